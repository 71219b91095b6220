//! Training without a prediction task: shallow prior boxes per domain, and
//! joint prior + GNN training under the semantic loss alone.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{decayed_lr, Adam, ParamSet, Tape, Tensor, Var};
use crate::boxes::GumbelTemp;
use crate::error::{Error, Result};
use crate::gnn::{init_prior, prior_name, HeteroGnn};
use crate::kg::{negatives_per_positive, KnowledgeGraph, NegativeSampler};
use crate::loss::{
    negative_samplers, positive_pairs, sample_random_negatives, tape_boxes, tape_neg_losses,
    tape_pos_losses, tape_reg_big, tape_reg_small, tape_semantic_loss, LossEntry, LossKind, Norm,
    RandomNegatives, SemanticLossWeights, SemanticOptions,
};
use crate::seed;

/// Settings for one domain's prior boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorDomainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg_lambda: f64,
    pub gumbel_temp: f64,
    pub neg_ratio: f64,
}

impl PriorDomainConfig {
    pub const MATERIAL_ENTITY: PriorDomainConfig = PriorDomainConfig {
        dim: 10,
        epochs: 1000,
        lr: 1e-2,
        reg_lambda: 1e-3,
        gumbel_temp: 0.25,
        neg_ratio: 2.0,
    };
    pub const GENES: PriorDomainConfig = PriorDomainConfig {
        dim: 8,
        epochs: 1000,
        lr: 1e-2,
        reg_lambda: 1e-3,
        gumbel_temp: 0.25,
        neg_ratio: 4.0,
    };
    /// Row shared by all remaining ontology domains.
    pub const ONTOLOGY: PriorDomainConfig = PriorDomainConfig {
        dim: 5,
        epochs: 800,
        lr: 1e-2,
        reg_lambda: 1e-3,
        gumbel_temp: 0.25,
        neg_ratio: 2.0,
    };

    fn validate(&self, key: &str) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("{key}.{field}"), msg));
        if self.dim == 0 {
            return bad("dim", "must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(self.reg_lambda.is_finite() && self.reg_lambda >= 0.0) {
            return bad("reg_lambda", "must be non-negative");
        }
        if !(self.gumbel_temp.is_finite() && self.gumbel_temp > 0.0) {
            return bad("gumbel_temp", "must be positive");
        }
        if !(self.neg_ratio.is_finite() && self.neg_ratio >= 0.0) {
            return bad("neg_ratio", "must be non-negative");
        }
        Ok(())
    }
}

impl Default for PriorDomainConfig {
    fn default() -> Self {
        Self::ONTOLOGY
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PriorTrainConfig {
    /// Used for every domain without an override.
    pub default: PriorDomainConfig,
    pub domains: BTreeMap<String, PriorDomainConfig>,
}

impl PriorTrainConfig {
    pub fn for_domain(&self, domain: &str) -> &PriorDomainConfig {
        self.domains.get(domain).unwrap_or(&self.default)
    }

    pub fn validate(&self, g: &KnowledgeGraph) -> Result<()> {
        self.default.validate("priors.default")?;
        for (d, c) in &self.domains {
            let key = format!("priors.domains.{d}");
            if !g.domains().any(|x| x == d) {
                return Err(Error::config(key, format!("unknown domain `{d}`")));
            }
            c.validate(&key)?;
        }
        Ok(())
    }

    /// Prior box dimension per domain of `g`.
    pub fn dims(&self, g: &KnowledgeGraph) -> BTreeMap<String, usize> {
        g.domains().map(|d| (d.to_string(), self.for_domain(d).dim)).collect()
    }
}

/// Loss sums for one prior-training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorEpoch {
    pub epoch: usize,
    pub pos: f64,
    pub neg: f64,
    pub reg: f64,
    pub loss: f64,
}

/// Trained prior latents `[n, 2·dim]` for one domain with its loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedPrior {
    pub domain: String,
    pub latent: Tensor,
    pub history: Vec<PriorEpoch>,
}

/// Trains the prior boxes of one domain with overlap losses over Gumbel
/// volumes: subclass pairs pulled inside, fresh negatives drawn every epoch
/// from classes that are neither ancestors nor descendants, and
/// `reg_lambda · Σ side²` against growth.
pub fn train_priors(
    g: &KnowledgeGraph,
    domain: &str,
    cfg: &PriorDomainConfig,
    seed_value: u64,
) -> Result<TrainedPrior> {
    cfg.validate("priors")?;
    let classes = g.domain_classes(domain);
    if classes.is_empty() {
        return Err(Error::data(format!("domain `{domain}` has no classes")));
    }
    let index: BTreeMap<_, _> = classes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
    let pos = positive_pairs(g, domain, false)?;
    let pos_a: Vec<usize> = pos.iter().map(|(c, _)| index[c]).collect();
    let pos_b: Vec<usize> = pos.iter().map(|(_, d)| index[d]).collect();
    let opts = SemanticOptions {
        kind: LossKind::Overlap,
        temp: GumbelTemp::new(cfg.gumbel_temp)?,
        ..SemanticOptions::default()
    };
    let sampler = NegativeSampler::unrelated(g, domain);
    let k = negatives_per_positive(cfg.neg_ratio);

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_named(seed_value, &prior_name(domain)));
    let name = prior_name(domain);
    let mut params = ParamSet::new();
    params.insert(name.clone(), init_prior(&mut rng, classes.len(), cfg.dim));
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut neg_a, mut neg_b) = (Vec::new(), Vec::new());
        for &a in &pos_a {
            for n in sampler.sample(&classes[a], k, &mut rng) {
                neg_a.push(a);
                neg_b.push(index[&n]);
            }
        }
        let mut t = Tape::new();
        let bound = params.bind(&mut t, |_| true);
        let b = tape_boxes(&mut t, bound.var(&name)?)?;
        let reg = tape_reg_big(&mut t, &b)?;
        let mut root = t.scale(reg, cfg.reg_lambda);
        let reg_v = t.value(reg).item();
        let mut pos_v = 0.0;
        let mut neg_v = 0.0;
        if !pos_a.is_empty() {
            let l = tape_pos_losses(&mut t, &b, &pos_a, &pos_b, &opts)?;
            let s = t.sum(l);
            pos_v = t.value(s).item();
            root = t.add(root, s)?;
        }
        if !neg_a.is_empty() {
            let l = tape_neg_losses(&mut t, &b, &neg_a, &neg_b, &opts)?;
            let s = t.sum(l);
            neg_v = t.value(s).item();
            root = t.add(root, s)?;
        }
        let loss = t.value(root).item();
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "prior training of `{domain}` reached loss {loss} at epoch {epoch}"
            )));
        }
        let grads = bound.collect(&t.backward(root)?);
        adam.step(&mut params, &grads)?;
        history.push(PriorEpoch {
            epoch,
            pos: pos_v,
            neg: neg_v,
            reg: reg_v,
            loss,
        });
    }
    Ok(TrainedPrior {
        domain: domain.to_string(),
        latent: params.remove(&name).expect("inserted above"),
        history,
    })
}

/// Trains every domain's priors independently on up to `jobs` threads.
/// Output is ordered by domain name.
pub fn train_all_priors(
    g: &KnowledgeGraph,
    cfg: &PriorTrainConfig,
    seed_value: u64,
    jobs: usize,
) -> Result<Vec<TrainedPrior>> {
    cfg.validate(g)?;
    let domains: Vec<&str> = g.domains().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    pool.install(|| {
        domains
            .par_iter()
            .map(|d| train_priors(g, d, cfg.for_domain(d), seed_value))
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointTrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    /// Weight decay on GNN parameters.
    pub reg_lambda: f64,
    pub small_box_lambda: f64,
    pub beta_neg: f64,
    pub gamma_random: f64,
    pub l0: f64,
    pub loss_kind: LossKind,
    pub norm: Norm,
    pub gumbel_temp: f64,
    /// Random negatives per positive pair.
    pub neg_ratio: f64,
    pub exclude_domains: Vec<String>,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        JointTrainConfig {
            epochs: 500,
            initial_lr: 0.1,
            lr_decay: 0.001,
            reg_lambda: 0.001,
            small_box_lambda: 0.01,
            beta_neg: 0.5,
            gamma_random: 1.0,
            l0: 1.0,
            loss_kind: LossKind::Distance,
            norm: Norm::L2,
            gumbel_temp: GumbelTemp::DEFAULT.beta(),
            neg_ratio: 1.0,
            exclude_domains: Vec::new(),
        }
    }
}

impl JointTrainConfig {
    pub fn validate(&self, g: &KnowledgeGraph) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("joint.{field}"), msg));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return bad("initial_lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return bad("lr_decay", "must lie in [0, 1)");
        }
        if !(self.gumbel_temp.is_finite() && self.gumbel_temp > 0.0) {
            return bad("gumbel_temp", "must be positive");
        }
        if !(self.neg_ratio.is_finite() && self.neg_ratio >= 0.0) {
            return bad("neg_ratio", "must be non-negative");
        }
        for d in &self.exclude_domains {
            if !g.domains().any(|x| x == d) {
                return bad("exclude_domains", &format!("unknown domain `{d}`"));
            }
        }
        self.weights().validate()
    }

    pub fn weights(&self) -> SemanticLossWeights {
        SemanticLossWeights {
            alpha: 1.0,
            beta_neg: self.beta_neg,
            gamma_random: self.gamma_random,
            lambda_wd: self.reg_lambda,
            lambda_small: self.small_box_lambda,
            l0: self.l0,
        }
    }

    pub fn semantic_options(&self) -> Result<SemanticOptions> {
        Ok(SemanticOptions {
            kind: self.loss_kind,
            norm: self.norm,
            temp: GumbelTemp::new(self.gumbel_temp)?,
            exclude_domains: self.exclude_domains.iter().cloned().collect(),
            include_prior_layer: true,
            transitive: false,
        })
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        decayed_lr(self.initial_lr, self.lr_decay, epoch as u32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub small_box: f64,
    pub semantic: Vec<LossEntry>,
}

impl JointEpoch {
    /// Positive loss summed over all layers and domains.
    pub fn total_pos(&self) -> f64 {
        self.semantic.iter().map(|e| e.pos).sum()
    }
}

fn small_box_term(
    t: &mut Tape,
    layers: &[BTreeMap<String, Var>],
    opts: &SemanticOptions,
    l0: f64,
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for latents in layers {
        for (d, &lat) in latents {
            if opts.exclude_domains.contains(d) {
                continue;
            }
            let b = tape_boxes(t, lat)?;
            let r = tape_reg_small(t, &b, l0)?;
            acc = Some(match acc {
                None => r,
                Some(a) => t.add(a, r)?,
            });
        }
    }
    Ok(acc)
}

/// Trains priors and GNN weights together on
/// `L_pos + β (L_neg_data + γ L_neg_random) + λ_s R_small + λ ‖w‖²`, with
/// the learning rate multiplied by `1 - decay` after every epoch. Data
/// negatives are the graph's disjointness axioms.
pub fn train_joint(
    g: &KnowledgeGraph,
    model: &mut HeteroGnn,
    cfg: &JointTrainConfig,
    seed_value: u64,
) -> Result<Vec<JointEpoch>> {
    cfg.validate(g)?;
    let opts = cfg.semantic_options()?;
    let w = cfg.weights();
    let idx = model.index(g)?;
    let samplers = negative_samplers(g, &opts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_named(seed_value, "joint"));
    let mut adam = Adam::new(cfg.initial_lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        let random = if cfg.gamma_random > 0.0 && cfg.beta_neg > 0.0 {
            sample_random_negatives(g, &samplers, &opts, cfg.neg_ratio, &mut rng)?
        } else {
            RandomNegatives::new()
        };
        let mut params = model.params().clone();
        let mut t = Tape::new();
        let bound = params.bind(&mut t, |_| true);
        let fwd = model.forward(&mut t, &bound, &idx, &[])?;
        let (sem, entries) = tape_semantic_loss(&mut t, &fwd.layers, g, &opts, &w, &random)?;
        let mut terms: Vec<Var> = sem.into_iter().collect();
        let mut small_v = 0.0;
        if let Some(r) = small_box_term(&mut t, &fwd.layers, &opts, cfg.l0)? {
            small_v = t.value(r).item();
            if cfg.small_box_lambda != 0.0 {
                terms.push(t.scale(r, cfg.small_box_lambda));
            }
        }
        if cfg.reg_lambda != 0.0 {
            for v in bound.trainable_vars(|n| n.starts_with("gnn/")) {
                let sq = t.mul(v, v)?;
                let s = t.sum(sq);
                terms.push(t.scale(s, cfg.reg_lambda));
            }
        }
        let Some(mut root) = terms.first().copied() else {
            return Err(Error::data("joint objective has no terms"));
        };
        for &v in &terms[1..] {
            root = t.add(root, v)?;
        }
        let loss = t.value(root).item();
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "joint training reached loss {loss} at epoch {epoch}"
            )));
        }
        let grads = bound.collect(&t.backward(root)?);
        adam.step(&mut params, &grads)?;
        *model.params_mut() = params;
        history.push(JointEpoch {
            epoch,
            lr: adam.lr,
            loss,
            small_box: small_v,
            semantic: entries,
        });
    }
    Ok(history)
}
