//! Gene-pair fitness regression on top of the GNN: pair combiners, a small
//! fully connected head, training with MSE plus semantic loss, R², and
//! gene-based cross-validation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, BoundParams, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gnn::{glorot, GnnConfig, GraphIndex, HeteroGnn};
use crate::kg::{split_by_genes, ClassId, FitnessRecord, KnowledgeGraph};
use crate::loss::{
    negative_samplers, sample_random_negatives, tape_semantic_loss, LossEntry, LossKind, Norm,
    RandomNegatives, SemanticLossWeights, SemanticOptions,
};
use crate::boxes::GumbelTemp;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    Product,
    Bilinear,
    Intersection,
    Concatenation,
}

impl Combiner {
    pub fn is_symmetric(self) -> bool {
        !matches!(self, Combiner::Concatenation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub combiner: Combiner,
    /// Hidden layer widths of the head; a final width-1 layer is appended.
    pub head_hidden: Vec<usize>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            combiner: Combiner::Product,
            head_hidden: vec![64],
        }
    }
}

/// Element-wise combination of two gene embeddings (plain vectors).
pub fn combine(x1: &[f64], x2: &[f64], c: Combiner, bilinear: Option<&Tensor>) -> Result<Vec<f64>> {
    if c != Combiner::Concatenation && x1.len() != x2.len() {
        return Err(Error::shape(format!("combine {} vs {}", x1.len(), x2.len())));
    }
    Ok(match c {
        Combiner::Product => x1.iter().zip(x2).map(|(a, b)| a * b).collect(),
        Combiner::Bilinear => {
            let w = bilinear.ok_or_else(|| Error::data("bilinear combiner needs a weight matrix"))?;
            if w.shape() != [x1.len(), x1.len()] {
                return Err(Error::shape(format!("bilinear weight {:?}", w.shape())));
            }
            let wx = |x: &[f64]| -> Vec<f64> {
                (0..x.len())
                    .map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
                    .collect()
            };
            let (w2, w1) = (wx(x2), wx(x1));
            (0..x1.len()).map(|i| x1[i] * w2[i] + x2[i] * w1[i]).collect()
        }
        Combiner::Intersection => {
            if !x1.len().is_multiple_of(2) {
                return Err(Error::shape("intersection combiner needs even-length latents"));
            }
            let k = x1.len() / 2;
            let upper = |x: &[f64], i: usize| x[i] + crate::boxes::softplus(x[k + i]);
            let mut out: Vec<f64> = (0..k).map(|i| x1[i].max(x2[i])).collect();
            out.extend((0..k).map(|i| upper(x1, i).min(upper(x2, i))));
            out
        }
        Combiner::Concatenation => x1.iter().chain(x2).copied().collect(),
    })
}

/// GNN plus prediction head.
#[derive(Clone, Debug, PartialEq)]
pub struct FitnessModel {
    pub gnn: HeteroGnn,
    pub gene_domain: String,
    pub predictor: PredictorConfig,
    /// `head/{i}/w`, `head/{i}/bias` and, for the bilinear combiner, `bilinear/w`.
    pub head: ParamSet,
}

fn combined_width(c: Combiner, d: usize) -> usize {
    match c {
        Combiner::Concatenation => 2 * d,
        _ => d,
    }
}

impl FitnessModel {
    pub fn new(
        g: &KnowledgeGraph,
        gnn_cfg: GnnConfig,
        predictor: PredictorConfig,
        gene_domain: &str,
        seed_value: u64,
    ) -> Result<Self> {
        if g.domain_classes(gene_domain).is_empty() {
            return Err(Error::config("gene_domain", format!("domain `{gene_domain}` has no classes")));
        }
        if predictor.head_hidden.contains(&0) {
            return Err(Error::config("predictor.head_hidden", "widths must be >= 1"));
        }
        let gnn = HeteroGnn::new(g, gnn_cfg, seed::derive(seed_value, 1))?;
        let d = gnn.config().width(gene_domain, gnn.depth());
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, 2));
        let mut head = ParamSet::new();
        if predictor.combiner == Combiner::Bilinear {
            head.insert("bilinear/w", glorot(&mut rng, d, d));
        }
        let mut fan_in = combined_width(predictor.combiner, d);
        for (i, &w) in predictor.head_hidden.iter().chain(&[1]).enumerate() {
            head.insert(format!("head/{i}/w"), glorot(&mut rng, fan_in, w));
            head.insert(format!("head/{i}/bias"), Tensor::zeros(&[w]));
            fan_in = w;
        }
        Ok(FitnessModel {
            gnn,
            gene_domain: gene_domain.to_string(),
            predictor,
            head,
        })
    }

    /// All parameters under one namespace (GNN names plus head names).
    pub fn params(&self) -> ParamSet {
        let mut p = self.gnn.params().clone();
        p.extend(self.head.clone());
        p
    }

    pub fn set_params(&mut self, p: &ParamSet) -> Result<()> {
        for (name, t) in p.iter() {
            let slot = if self.head.contains(name) {
                self.head.get_mut(name)
            } else {
                self.gnn.params_mut().get_mut(name)
            };
            let slot = slot.ok_or_else(|| Error::data(format!("unknown parameter {name}")))?;
            if slot.shape() != t.shape() {
                return Err(Error::shape(format!("parameter {name} changes shape")));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    fn n_head_layers(&self) -> usize {
        self.predictor.head_hidden.len() + 1
    }

    fn tape_combine(&self, t: &mut Tape, bound: &BoundParams, x1: Var, x2: Var) -> Result<Var> {
        match self.predictor.combiner {
            Combiner::Product => t.mul(x1, x2),
            Combiner::Bilinear => {
                let w = bound.var("bilinear/w")?;
                let wt = t.transpose(w)?;
                let w2 = t.matmul(x2, wt)?;
                let w1 = t.matmul(x1, wt)?;
                let a = t.mul(x1, w2)?;
                let b = t.mul(x2, w1)?;
                t.add(a, b)
            }
            Combiner::Intersection => {
                let k = t.shape(x1)[1] / 2;
                let corners = |t: &mut Tape, x: Var| -> Result<(Var, Var)> {
                    let lo = t.slice(x, 1, 0, k)?;
                    let w = t.slice(x, 1, k, k)?;
                    let s = t.softplus(w);
                    Ok((lo, t.add(lo, s)?))
                };
                let (l1, u1) = corners(t, x1)?;
                let (l2, u2) = corners(t, x2)?;
                let lo = t.maximum(l1, l2)?;
                let hi = t.minimum(u1, u2)?;
                t.concat(&[lo, hi], 1)
            }
            Combiner::Concatenation => t.concat(&[x1, x2], 1),
        }
    }

    /// Applies the head to a `[m, d]` input, giving `[m, 1]`.
    fn tape_head(&self, t: &mut Tape, bound: &BoundParams, input: Var) -> Result<Var> {
        let mut h = input;
        let n = self.n_head_layers();
        for i in 0..n {
            let w = bound.var(&format!("head/{i}/w"))?;
            let b = bound.var(&format!("head/{i}/bias"))?;
            let lin = t.matmul(h, w)?;
            let shape = t.shape(lin).to_vec();
            let bb = t.broadcast(b, &shape)?;
            h = t.add(lin, bb)?;
            if i + 1 < n {
                h = t.relu(h);
            }
        }
        Ok(h)
    }

    /// Predictions `[m, 1]` for gene index pairs, given final gene latents.
    pub fn tape_predict(
        &self,
        t: &mut Tape,
        bound: &BoundParams,
        genes: Var,
        a: &[usize],
        b: &[usize],
    ) -> Result<Var> {
        let x1 = t.gather_rows(genes, a)?;
        let x2 = t.gather_rows(genes, b)?;
        let c = self.tape_combine(t, bound, x1, x2)?;
        self.tape_head(t, bound, c)
    }

    /// Prediction for three genes through the element-wise product.
    pub fn tape_predict_triple(
        &self,
        t: &mut Tape,
        bound: &BoundParams,
        genes: Var,
        idx: [usize; 3],
    ) -> Result<Var> {
        if self.predictor.combiner != Combiner::Product {
            return Err(Error::config(
                "predictor.combiner",
                "triple predictions require the product combiner",
            ));
        }
        // A fixed multiplication order keeps the result exactly invariant
        // under permutations of the arguments.
        let mut idx = idx;
        idx.sort_unstable();
        let x: Vec<Var> = idx
            .iter()
            .map(|&i| t.gather_rows(genes, &[i]))
            .collect::<Result<_>>()?;
        let p = t.mul(x[0], x[1])?;
        let p = t.mul(p, x[2])?;
        self.tape_head(t, bound, p)
    }

    pub fn gene_index(&self, g: &KnowledgeGraph) -> BTreeMap<ClassId, usize> {
        g.domain_classes(&self.gene_domain)
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect()
    }

    fn lookup(index: &BTreeMap<ClassId, usize>, c: &ClassId) -> Result<usize> {
        index
            .get(c)
            .copied()
            .ok_or_else(|| Error::data(format!("unknown gene {c}")))
    }

    /// Predictions for many pairs with one forward pass.
    pub fn predict_pairs(&self, g: &KnowledgeGraph, pairs: &[(ClassId, ClassId)]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let index = self.gene_index(g);
        let mut a = Vec::with_capacity(pairs.len());
        let mut b = Vec::with_capacity(pairs.len());
        for (x, y) in pairs {
            a.push(Self::lookup(&index, x)?);
            b.push(Self::lookup(&index, y)?);
        }
        let idx = self.gnn.index(g)?;
        let mut t = Tape::new();
        let bound = self.params().bind(&mut t, |_| false);
        let f = self.gnn.forward(&mut t, &bound, &idx, &[])?;
        let genes = f.layers[self.gnn.depth()][&self.gene_domain];
        let y = self.tape_predict(&mut t, &bound, genes, &a, &b)?;
        Ok(t.value(y).data().to_vec())
    }

    pub fn predict_pair(&self, g: &KnowledgeGraph, a: &ClassId, b: &ClassId) -> Result<f64> {
        Ok(self.predict_pairs(g, &[(a.clone(), b.clone())])?[0])
    }

    pub fn predict_triple(&self, g: &KnowledgeGraph, a: &ClassId, b: &ClassId, c: &ClassId) -> Result<f64> {
        let index = self.gene_index(g);
        let ids = [
            Self::lookup(&index, a)?,
            Self::lookup(&index, b)?,
            Self::lookup(&index, c)?,
        ];
        let idx = self.gnn.index(g)?;
        let mut t = Tape::new();
        let bound = self.params().bind(&mut t, |_| false);
        let f = self.gnn.forward(&mut t, &bound, &idx, &[])?;
        let genes = f.layers[self.gnn.depth()][&self.gene_domain];
        let y = self.tape_predict_triple(&mut t, &bound, genes, ids)?;
        Ok(t.value(y).item())
    }
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() || y.len() < 2 {
        return Err(Error::data(format!(
            "r_squared needs two equal-length samples of size >= 2 ({} vs {})",
            y.len(),
            y_hat.len()
        )));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::data("r_squared of a constant target"));
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weights: SemanticLossWeights,
    pub loss_kind: LossKind,
    pub norm: Norm,
    pub gumbel_temp: f64,
    /// Random negatives per positive pair (used when `gamma_random > 0`).
    pub neg_ratio: f64,
    /// Keep prior latents fixed.
    pub freeze_priors: bool,
    /// Train only the head (and bilinear weight); everything else fixed.
    pub head_only: bool,
    /// Domains left out of the semantic loss; `None` means the gene domain.
    pub exclude_domains: Option<Vec<String>>,
    pub include_prior_layer: bool,
    /// Full batch when absent.
    pub batch_size: Option<usize>,
    pub folds: usize,
    /// Set from the run seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 160,
            lr: 1e-4,
            weights: SemanticLossWeights::default(),
            loss_kind: LossKind::Distance,
            norm: Norm::L2,
            gumbel_temp: GumbelTemp::DEFAULT.beta(),
            neg_ratio: 2.0,
            freeze_priors: false,
            head_only: false,
            exclude_domains: None,
            include_prior_layer: true,
            batch_size: None,
            folds: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("must be >= 0, got {}", self.lr)));
        }
        if self.folds < 2 {
            return Err(Error::config("train.folds", format!("must be >= 2, got {}", self.folds)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.neg_ratio > 0.0) {
            return Err(Error::config("train.neg_ratio", "must be > 0"));
        }
        GumbelTemp::new(self.gumbel_temp).map_err(|_| Error::config("train.gumbel_temp", "must be > 0"))?;
        self.weights.validate()
    }

    pub fn semantic_options(&self, gene_domain: &str) -> Result<SemanticOptions> {
        Ok(SemanticOptions {
            kind: self.loss_kind,
            norm: self.norm,
            temp: GumbelTemp::new(self.gumbel_temp)?,
            exclude_domains: match &self.exclude_domains {
                Some(v) => v.iter().cloned().collect(),
                None => BTreeSet::from([gene_domain.to_string()]),
            },
            include_prior_layer: self.include_prior_layer,
            transitive: false,
        })
    }
}

/// One epoch of training.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
    pub semantic: Vec<LossEntry>,
}

fn is_weight(name: &str) -> bool {
    name.starts_with("gnn/") || name.starts_with("head/") || name.starts_with("bilinear/")
}

fn trainable_filter(cfg: &TrainConfig) -> impl Fn(&str) -> bool + '_ {
    move |name: &str| {
        if cfg.head_only {
            return name.starts_with("head/") || name.starts_with("bilinear/");
        }
        !(cfg.freeze_priors && name.starts_with("prior/"))
    }
}

/// Builds the full objective on a tape. Returns the root, the MSE value and
/// the semantic breakdown.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    model: &FitnessModel,
    t: &mut Tape,
    bound: &BoundParams,
    idx: &GraphIndex,
    g: &KnowledgeGraph,
    a: &[usize],
    b: &[usize],
    y: &[f64],
    cfg: &TrainConfig,
    opts: &SemanticOptions,
    random: &RandomNegatives,
) -> Result<(Var, f64, Vec<LossEntry>)> {
    let f = model.gnn.forward(t, bound, idx, &[])?;
    let genes = f.layers[model.gnn.depth()][&model.gene_domain];
    let pred = model.tape_predict(t, bound, genes, a, b)?;
    let target = t.constant(Tensor::matrix(y.len(), 1, y.to_vec())?);
    let diff = t.sub(pred, target)?;
    let sq = t.mul(diff, diff)?;
    let mse = t.mean(sq);
    let mse_v = t.value(mse).item();
    let mut root = mse;
    let w = &cfg.weights;
    let (sem, entries) = tape_semantic_loss(t, &f.layers, g, opts, w, random)?;
    if let (Some(s), true) = (sem, w.alpha != 0.0) {
        let s = t.scale(s, w.alpha);
        root = t.add(root, s)?;
    }
    if w.lambda_wd != 0.0 {
        for v in bound.trainable_vars(is_weight) {
            let sq = t.mul(v, v)?;
            let s = t.sum(sq);
            let s = t.scale(s, w.lambda_wd);
            root = t.add(root, s)?;
        }
    }
    Ok((root, mse_v, entries))
}

/// Gradient-based training of `model` on `records`. Deterministic per
/// `cfg.seed`.
pub fn train(
    model: &mut FitnessModel,
    g: &KnowledgeGraph,
    records: &[FitnessRecord],
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::data("no training pairs"));
    }
    let index = model.gene_index(g);
    let mut a_all = Vec::with_capacity(records.len());
    let mut b_all = Vec::with_capacity(records.len());
    for r in records {
        a_all.push(FitnessModel::lookup(&index, &r.gene_a)?);
        b_all.push(FitnessModel::lookup(&index, &r.gene_b)?);
    }
    let y_all: Vec<f64> = records.iter().map(|r| r.fitness).collect();
    let idx = model.gnn.index(g)?;
    let opts = cfg.semantic_options(&model.gene_domain)?;
    let samplers = negative_samplers(g, &opts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, 3));
    let mut adam = Adam::new(cfg.lr);
    let trainable = trainable_filter(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..records.len()).collect();
    for epoch in 0..cfg.epochs {
        let random = if cfg.weights.gamma_random > 0.0 {
            sample_random_negatives(g, &samplers, &opts, cfg.neg_ratio, &mut rng)?
        } else {
            RandomNegatives::new()
        };
        let batches: Vec<Vec<usize>> = match cfg.batch_size {
            None => vec![order.clone()],
            Some(bs) => {
                order.shuffle(&mut rng);
                order.chunks(bs).map(<[usize]>::to_vec).collect()
            }
        };
        let mut loss_sum = 0.0;
        let mut mse_sum = 0.0;
        let mut entries = Vec::new();
        for batch in &batches {
            let a: Vec<usize> = batch.iter().map(|&i| a_all[i]).collect();
            let b: Vec<usize> = batch.iter().map(|&i| b_all[i]).collect();
            let y: Vec<f64> = batch.iter().map(|&i| y_all[i]).collect();
            let mut params = model.params();
            let mut t = Tape::new();
            let bound = params.bind(&mut t, &trainable);
            let (root, mse, e) = objective(model, &mut t, &bound, &idx, g, &a, &b, &y, cfg, &opts, &random)?;
            let loss = t.value(root).item();
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite training loss {loss} at epoch {epoch} (mse {mse})"
                )));
            }
            let grads = bound.collect(&t.backward(root)?);
            adam.step(&mut params, &grads)?;
            model.set_params(&params)?;
            loss_sum += loss * batch.len() as f64;
            mse_sum += mse * batch.len() as f64;
            entries = e;
        }
        let n = records.len() as f64;
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / n,
            mse: mse_sum / n,
            semantic: entries,
        });
    }
    Ok(history)
}

/// Outcome of one cross-validation fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub r2: f64,
    /// `(gene_a, gene_b, y_true, y_pred)` for the validation pairs.
    pub predictions: Vec<(ClassId, ClassId, f64, f64)>,
    pub history: Vec<EpochRecord>,
}

/// Gene-based k-fold cross-validation. `prepare` runs on every fresh model
/// before training (e.g. to install pretrained priors). Folds run on up to
/// `jobs` threads; results are in fold order regardless.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate<F>(
    g: &KnowledgeGraph,
    gnn_cfg: &GnnConfig,
    predictor: &PredictorConfig,
    gene_domain: &str,
    records: &crate::kg::FitnessDataset,
    cfg: &TrainConfig,
    jobs: usize,
    prepare: F,
) -> Result<Vec<FoldResult>>
where
    F: Fn(&mut FitnessModel) -> Result<()> + Sync,
{
    cfg.validate()?;
    let folds = split_by_genes(records, cfg.folds, cfg.seed)?;
    let run = |k: usize| -> Result<FoldResult> {
        let fold = &folds[k];
        let fold_seed = seed::derive(cfg.seed, 100 + k as u64);
        let mut model = FitnessModel::new(g, gnn_cfg.clone(), predictor.clone(), gene_domain, fold_seed)?;
        prepare(&mut model)?;
        let fold_cfg = TrainConfig {
            seed: fold_seed,
            ..cfg.clone()
        };
        let history = train(&mut model, g, &fold.train.records, &fold_cfg)?;
        let pairs: Vec<(ClassId, ClassId)> = fold
            .valid
            .records
            .iter()
            .map(|r| (r.gene_a.clone(), r.gene_b.clone()))
            .collect();
        let y_hat = model.predict_pairs(g, &pairs)?;
        let y: Vec<f64> = fold.valid.records.iter().map(|r| r.fitness).collect();
        let r2 = r_squared(&y, &y_hat)?;
        let predictions = fold
            .valid
            .records
            .iter()
            .zip(&y_hat)
            .map(|(r, p)| (r.gene_a.clone(), r.gene_b.clone(), r.fitness, *p))
            .collect();
        Ok(FoldResult {
            fold: k,
            r2,
            predictions,
            history,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    pool.install(|| (0..folds.len()).into_par_iter().map(run).collect())
}

/// Mean and sample standard deviation.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::kg::{parse_graph, FitnessDataset};

    fn gnn_cfg(depth: usize, dims: &[(&str, usize, usize)]) -> GnnConfig {
        GnnConfig {
            depth,
            prior_dim: dims.iter().map(|(d, p, _)| (d.to_string(), *p)).collect(),
            hidden_dim: dims.iter().map(|(d, _, h)| (d.to_string(), *h)).collect(),
        }
    }

    fn c(s: &str) -> ClassId {
        ClassId::new(s)
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine(&[1.0, 2.0], &[3.0, 4.0], Combiner::Product, None).unwrap(), vec![3.0, 8.0]);
        let id = Tensor::identity(2);
        let x = [1.5, -2.0];
        let y = [0.5, 3.0];
        let b = combine(&x, &y, Combiner::Bilinear, Some(&id)).unwrap();
        assert_eq!(b, vec![1.5, -12.0]);
        assert_eq!(b, combine(&y, &x, Combiner::Bilinear, Some(&id)).unwrap());
        assert_eq!(combine(&[1.0], &[2.0], Combiner::Concatenation, None).unwrap(), vec![1.0, 2.0]);
        assert_ne!(
            combine(&[1.0], &[2.0], Combiner::Concatenation, None).unwrap(),
            combine(&[2.0], &[1.0], Combiner::Concatenation, None).unwrap()
        );
        let i = combine(&[0.0, 0.0], &[1.0, 0.0], Combiner::Intersection, None).unwrap();
        assert_eq!(i[0], 1.0);
        assert!((i[1] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(combine(&[1.0], &[1.0, 2.0], Combiner::Product, None).is_err());
        assert!(combine(&[1.0], &[2.0], Combiner::Intersection, None).is_err());
    }

    #[test]
    fn r_squared_examples() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        assert_eq!(r_squared(&y, &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(r_squared(&y, &[1.0, 2.0, 4.0]).unwrap(), 0.5);
        assert!(r_squared(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(r_squared(&[1.0], &[1.0]).is_err());
    }

    fn gene_graph() -> KnowledgeGraph {
        parse_graph(
            "t1\tsubClassOf\tt0\nt2\tsubClassOf\tt0\ng1\tann\tt1\ng2\tann\tt2\ng3\tann\tt1\ng4\tann\tt2\nt1\tann_rev\tg1\nt2\tann_rev\tg2\nt1\tann_rev\tg3\nt2\tann_rev\tg4\ng1\tint\tg2\n",
            "t0\tgo\nt1\tgo\nt2\tgo\ng1\tgene\ng2\tgene\ng3\tgene\ng4\tgene\n@rel\tann\tgene\tgo\n@rel\tann_rev\tgo\tgene\n@rel\tint\tgene\tgene\n",
        )
        .unwrap()
    }

    fn model(comb: Combiner, hidden: Vec<usize>, seed_value: u64) -> (KnowledgeGraph, FitnessModel) {
        let g = gene_graph();
        let m = FitnessModel::new(
            &g,
            gnn_cfg(2, &[("go", 2, 4), ("gene", 2, 4)]),
            PredictorConfig { combiner: comb, head_hidden: hidden },
            "gene",
            seed_value,
        )
        .unwrap();
        (g, m)
    }

    #[test]
    fn symmetric_combiners_give_symmetric_predictions() {
        for comb in [Combiner::Product, Combiner::Bilinear, Combiner::Intersection] {
            let (g, m) = model(comb, vec![8], 1);
            for (a, b) in [("g1", "g2"), ("g3", "g4"), ("g1", "g4")] {
                let ab = m.predict_pair(&g, &c(a), &c(b)).unwrap();
                let ba = m.predict_pair(&g, &c(b), &c(a)).unwrap();
                assert_eq!(ab, ba, "{comb:?}");
            }
        }
    }

    #[test]
    fn zero_head_predicts_bias() {
        let (g, mut m) = model(Combiner::Product, vec![8], 2);
        for name in ["head/0/w", "head/1/w"] {
            let shape = m.head.get(name).unwrap().shape().to_vec();
            m.head.insert(name, Tensor::zeros(&shape));
        }
        m.head.insert("head/1/bias", Tensor::vector(vec![0.75]));
        for (a, b) in [("g1", "g2"), ("g3", "g4")] {
            assert_eq!(m.predict_pair(&g, &c(a), &c(b)).unwrap(), 0.75);
        }
    }

    #[test]
    fn hand_forward_matches() {
        // Two genes, one relation a -> b, identity modules, linear head.
        let g = parse_graph("a\tr\tb\n", "a\tgene\nb\tgene\n@rel\tr\tgene\tgene\n").unwrap();
        let mut m = FitnessModel::new(
            &g,
            gnn_cfg(1, &[("gene", 1, 2)]),
            PredictorConfig { combiner: Combiner::Product, head_hidden: vec![] },
            "gene",
            0,
        )
        .unwrap();
        let p = m.gnn.params_mut();
        *p.get_mut("prior/gene").unwrap() = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        *p.get_mut("gnn/1/gene:r:gene/w_self").unwrap() = Tensor::identity(2);
        *p.get_mut("gnn/1/gene:r:gene/w_neigh").unwrap() = Tensor::identity(2);
        m.head.insert("head/0/w", Tensor::matrix(2, 1, vec![0.5, 2.0]).unwrap());
        m.head.insert("head/0/bias", Tensor::vector(vec![0.1]));
        // a: no incoming edges -> relu(h_a) = (1, 2)
        // b: relu(h_b + h_a) = relu(4, 1) = (4, 1)
        // product (4, 2); head 0.5*4 + 2*2 + 0.1
        let y = m.predict_pair(&g, &c("a"), &c("b")).unwrap();
        assert_eq!(y, 0.5 * 4.0 + 2.0 * 2.0 + 0.1);
    }

    #[test]
    fn triple_predictions() {
        let (g, m) = model(Combiner::Product, vec![8], 3);
        let ids = ["g1", "g2", "g4"];
        let base = m.predict_triple(&g, &c(ids[0]), &c(ids[1]), &c(ids[2])).unwrap();
        for p in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let v = m.predict_triple(&g, &c(ids[p[0]]), &c(ids[p[1]]), &c(ids[p[2]])).unwrap();
            assert_eq!(v, base);
        }
        let (g, m2) = model(Combiner::Bilinear, vec![8], 3);
        assert!(m2.predict_triple(&g, &c("g1"), &c("g2"), &c("g3")).is_err());
        assert!(m.predict_pair(&g, &c("g1"), &c("t1")).is_err());
    }

    #[test]
    fn triple_with_all_ones_gene_equals_pair() {
        let g = parse_graph("", "a\tgene\nb\tgene\nc\tgene\n").unwrap();
        let mut m = FitnessModel::new(
            &g,
            gnn_cfg(1, &[("gene", 1, 2)]),
            PredictorConfig::default(),
            "gene",
            4,
        )
        .unwrap();
        // Self module identity: final embedding = relu(prior).
        *m.gnn.params_mut().get_mut("gnn/1/self/gene/w").unwrap() = Tensor::identity(2);
        *m.gnn.params_mut().get_mut("prior/gene").unwrap() =
            Tensor::from_rows(&[vec![0.3, 0.9], vec![1.2, 0.4], vec![1.0, 1.0]]).unwrap();
        let t = m.predict_triple(&g, &c("a"), &c("b"), &c("c")).unwrap();
        let p = m.predict_pair(&g, &c("a"), &c("b")).unwrap();
        assert_eq!(t, p);
    }

    fn dataset(g: &KnowledgeGraph) -> FitnessDataset {
        let genes = ["g1", "g2", "g3", "g4"];
        let mut triples = Vec::new();
        for i in 0..4 {
            for j in i + 1..4 {
                let v = 0.5 + 0.1 * (i + 2 * j) as f64;
                triples.push((c(genes[i]), c(genes[j]), v));
            }
        }
        FitnessDataset::new(g, "gene", triples).unwrap()
    }

    #[test]
    fn alpha_zero_removes_semantic_gradients() {
        let (g, m) = model(Combiner::Product, vec![8], 5);
        let d = dataset(&g);
        let cfg = TrainConfig {
            epochs: 3,
            lr: 1e-2,
            weights: SemanticLossWeights { alpha: 0.0, ..TrainConfig::default().weights },
            ..TrainConfig::default()
        };
        let mut m1 = m.clone();
        train(&mut m1, &g, &d.records, &cfg).unwrap();
        let cfg2 = TrainConfig {
            weights: SemanticLossWeights { beta_neg: 7.0, ..cfg.weights },
            loss_kind: LossKind::Overlap,
            ..cfg.clone()
        };
        let mut m2 = m.clone();
        train(&mut m2, &g, &d.records, &cfg2).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn training_is_deterministic_and_reports_semantics() {
        let (g, m) = model(Combiner::Product, vec![8], 6);
        let d = dataset(&g);
        let cfg = TrainConfig {
            epochs: 5,
            lr: 1e-2,
            batch_size: Some(2),
            ..TrainConfig::default()
        };
        let mut a = m.clone();
        let ha = train(&mut a, &g, &d.records, &cfg).unwrap();
        let mut b = m.clone();
        let hb = train(&mut b, &g, &d.records, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert!(ha[0].semantic.iter().all(|e| e.domain == "go"));
        assert_eq!(ha[0].semantic.len(), 3);
    }

    #[test]
    fn head_only_mse_training_is_monotone() {
        for s in 0..5 {
            let (g, m) = model(Combiner::Product, vec![], 10 + s);
            let d = dataset(&g);
            let cfg = TrainConfig {
                epochs: 100,
                lr: 1e-3,
                head_only: true,
                weights: SemanticLossWeights { alpha: 0.0, lambda_wd: 0.0, ..TrainConfig::default().weights },
                ..TrainConfig::default()
            };
            let mut mm = m.clone();
            let h = train(&mut mm, &g, &d.records, &cfg).unwrap();
            for w in h.windows(2) {
                assert!(w[1].mse <= w[0].mse, "seed {s}: {} -> {}", w[0].mse, w[1].mse);
            }
            assert_eq!(mm.gnn, m.gnn);
        }
    }

    #[test]
    fn large_weight_decay_shrinks_predictions_to_bias() {
        let (g, m) = model(Combiner::Product, vec![8], 7);
        let d = dataset(&g);
        let cfg = TrainConfig {
            epochs: 300,
            lr: 5e-2,
            weights: SemanticLossWeights { alpha: 0.0, lambda_wd: 1e3, ..TrainConfig::default().weights },
            ..TrainConfig::default()
        };
        let mut mm = m.clone();
        train(&mut mm, &g, &d.records, &cfg).unwrap();
        let bias = mm.head.get("head/1/bias").unwrap().item();
        for r in &d.records {
            let y = mm.predict_pair(&g, &r.gene_a, &r.gene_b).unwrap();
            assert!((y - bias).abs() < 1e-2, "{y} vs {bias}");
        }
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        // 6 nodes, depth 1.
        let g = parse_graph(
            "t1\tsubClassOf\tt0\nt2\tsubClassOf\tt0\ng1\tann\tt1\ng2\tann\tt2\ng3\tann\tt1\nt1\tann_rev\tg1\nt2\tann_rev\tg2\nt1\tann_rev\tg3\n",
            "t0\tgo\nt1\tgo\nt2\tgo\ng1\tgene\ng2\tgene\ng3\tgene\n@rel\tann\tgene\tgo\n@rel\tann_rev\tgo\tgene\n",
        )
        .unwrap();
        let d = FitnessDataset::new(
            &g,
            "gene",
            vec![(c("g1"), c("g2"), 0.4), (c("g1"), c("g3"), 0.9), (c("g2"), c("g3"), 0.6)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut checked = 0;
        for s in 0..40 {
            for kind in [LossKind::Distance, LossKind::Overlap] {
                let m = FitnessModel::new(
                    &g,
                    gnn_cfg(1, &[("go", 2, 4), ("gene", 2, 4)]),
                    PredictorConfig { combiner: Combiner::Product, head_hidden: vec![4] },
                    "gene",
                    s,
                )
                .unwrap();
                let cfg = TrainConfig {
                    loss_kind: kind,
                    weights: SemanticLossWeights { alpha: 0.5, beta_neg: 0.3, gamma_random: 1.0, ..TrainConfig::default().weights },
                    ..TrainConfig::default()
                };
                let opts = cfg.semantic_options("gene").unwrap();
                let random = sample_random_negatives(&g, &negative_samplers(&g, &opts), &opts, 1.0, &mut rng).unwrap();
                let idx = m.gnn.index(&g).unwrap();
                let params = m.params();
                let names: Vec<String> = params.names().cloned().collect();
                let mut point: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
                for p in point.iter_mut() {
                    for x in p.data_mut() {
                        *x += rng.gen_range(-0.2..0.2);
                    }
                }
                let index = m.gene_index(&g);
                let a: Vec<usize> = d.records.iter().map(|r| index[&r.gene_a]).collect();
                let b: Vec<usize> = d.records.iter().map(|r| index[&r.gene_b]).collect();
                let y: Vec<f64> = d.records.iter().map(|r| r.fitness).collect();
                let f = |t: &mut Tape, vars: &[Var]| -> Result<Var> {
                    let bound = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect());
                    Ok(objective(&m, t, &bound, &idx, &g, &a, &b, &y, &cfg, &opts, &random)?.0)
                };
                let chk = finite_diff_check(f, &point, 1e-3).unwrap();
                if chk.kink_margin < 1e-2 {
                    continue;
                }
                assert!(chk.max_rel_error < 1e-4, "{kind:?}: {chk:?}");
                checked += 1;
            }
        }
        assert!(checked >= 5, "only {checked} kink-free draws");
    }
}
