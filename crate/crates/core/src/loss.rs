//! Semantic losses measuring how far box geometry is from satisfying
//! subclass and disjointness axioms, the volume regularizers, and their
//! aggregation over layers and domains.
//!
//! Every loss exists twice: as a plain `f64` function over [`AxisBox`]
//! values, and as a batched tape computation over latent matrices. The two
//! agree to rounding and the tests hold them to that.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::boxes::{
    box_distance, gumbel_log_volume, hard_volume, intersect, intersection_corners, AxisBox,
    GumbelTemp, Intersection,
};
use crate::error::{Error, Result};
use rand::Rng;

use crate::kg::{ancestors, negatives_per_positive, ClassId, KnowledgeGraph, NegativeSampler};

/// Upper clamp on the intersection ratio of the negative overlap loss.
pub const OVERLAP_RATIO_CAP: f64 = 1.0 - 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Distance,
    Overlap,
}

/// Norm applied to the per-dimension violation vector of the distance losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    #[default]
    L2,
}

impl Norm {
    fn apply(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

/// How volumes are measured by the overlap losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VolumeMode {
    Hard,
    Gumbel(GumbelTemp),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemanticLossWeights {
    pub alpha: f64,
    pub beta_neg: f64,
    pub gamma_random: f64,
    pub lambda_wd: f64,
    pub lambda_small: f64,
    pub l0: f64,
}

/// Prediction-task defaults: α = 0.1, β = 0.05, λ = 0.1, random negatives
/// off.
impl Default for SemanticLossWeights {
    fn default() -> Self {
        SemanticLossWeights {
            alpha: 0.1,
            beta_neg: 0.05,
            gamma_random: 0.0,
            lambda_wd: 0.1,
            lambda_small: 0.0,
            l0: 1.0,
        }
    }
}

impl SemanticLossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("beta_neg", self.beta_neg),
            ("gamma_random", self.gamma_random),
            ("lambda_wd", self.lambda_wd),
            ("lambda_small", self.lambda_small),
        ];
        for (k, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.l0 > 0.0 && self.l0.is_finite()) {
            return Err(Error::config("l0", format!("must be > 0, got {}", self.l0)));
        }
        Ok(())
    }
}

fn check_dims(c: &AxisBox, d: &AxisBox) -> Result<()> {
    if c.dim() != d.dim() {
        return Err(Error::shape(format!(
            "box dimensions differ ({} vs {})",
            c.dim(),
            d.dim()
        )));
    }
    Ok(())
}

fn offsets(b: &AxisBox) -> Vec<f64> {
    b.sides().map(|s| s / 2.0).collect()
}

/// Penalty for `C` not lying inside `D`: the norm of `max(0, d + 2 o^C)`.
pub fn loss_distance_pos(c: &AxisBox, d: &AxisBox, norm: Norm) -> Result<f64> {
    let dist = box_distance(c, d)?;
    let oc = offsets(c);
    let v: Vec<f64> = dist
        .iter()
        .zip(&oc)
        .map(|(di, oi)| (di + 2.0 * oi).max(0.0))
        .collect();
    Ok(norm.apply(&v))
}

/// Penalty for overlapping boxes; zero as soon as one axis separates them.
pub fn loss_distance_neg(c: &AxisBox, d: &AxisBox, norm: Norm) -> Result<f64> {
    let dist = box_distance(c, d)?;
    if dist.iter().any(|&x| x >= 0.0) {
        return Ok(0.0);
    }
    let v: Vec<f64> = dist.iter().map(|x| (-x).max(0.0)).collect();
    Ok(norm.apply(&v))
}

fn log_volumes(c: &AxisBox, d: &AxisBox, mode: VolumeMode) -> (f64, f64, f64) {
    match mode {
        VolumeMode::Hard => {
            let inter = intersect(c, d).expect("dims checked");
            let lv = |b: &AxisBox| hard_volume(&Intersection::Box(b.clone())).ln();
            (lv(c), lv(d), hard_volume(&inter).ln())
        }
        VolumeMode::Gumbel(t) => {
            let corners = intersection_corners(c, d).expect("dims checked");
            (
                gumbel_log_volume(c, t),
                gumbel_log_volume(d, t),
                gumbel_log_volume(&corners, t),
            )
        }
    }
}

/// `-ln(Vol(C ∩ D) / Vol(C))`.
pub fn loss_overlap_pos(c: &AxisBox, d: &AxisBox, mode: VolumeMode) -> Result<f64> {
    check_dims(c, d)?;
    let (lc, _, li) = log_volumes(c, d, mode);
    if mode == VolumeMode::Hard {
        if lc == f64::NEG_INFINITY {
            return Err(Error::data("subclass box has zero volume"));
        }
        if li == f64::NEG_INFINITY {
            return Err(Error::InfiniteLoss(
                "empty intersection under hard volumes".into(),
            ));
        }
    }
    Ok((lc - li).max(0.0))
}

/// `-ln(1 - Vol(C ∩ D) / min(Vol C, Vol D))`, ratio capped at
/// [`OVERLAP_RATIO_CAP`].
pub fn loss_overlap_neg(c: &AxisBox, d: &AxisBox, mode: VolumeMode) -> Result<f64> {
    check_dims(c, d)?;
    let (lc, ld, li) = log_volumes(c, d, mode);
    if mode == VolumeMode::Hard && lc.min(ld) == f64::NEG_INFINITY {
        return Err(Error::data("box with zero volume in negative overlap loss"));
    }
    let ratio = (li - lc.min(ld)).exp().min(OVERLAP_RATIO_CAP);
    Ok(-(1.0 - ratio).ln())
}

/// Sum of squared side lengths.
pub fn reg_big_box(b: &AxisBox) -> f64 {
    b.sides().map(|s| s * s).sum()
}

/// `Σ max(0, 1/side - l0)`.
pub fn reg_small_box(b: &AxisBox, l0: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in b.sides() {
        if s <= 0.0 {
            return Err(Error::data(format!("non-positive box side {s}")));
        }
        total += (1.0 / s - l0).max(0.0);
    }
    Ok(total)
}

/// Options deciding which terms enter [`semantic_loss_total`].
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticOptions {
    pub kind: LossKind,
    pub norm: Norm,
    pub temp: GumbelTemp,
    /// Domains whose hierarchy is left out of the loss.
    pub exclude_domains: BTreeSet<String>,
    /// Whether layer 0 (the priors) is penalized.
    pub include_prior_layer: bool,
    /// Use all (class, ancestor) pairs instead of direct subclass axioms.
    pub transitive: bool,
}

impl Default for SemanticOptions {
    fn default() -> Self {
        SemanticOptions {
            kind: LossKind::Distance,
            norm: Norm::L2,
            temp: GumbelTemp::DEFAULT,
            exclude_domains: BTreeSet::new(),
            include_prior_layer: true,
            transitive: false,
        }
    }
}

/// Random negative pairs per domain (typically resampled every epoch).
pub type RandomNegatives = BTreeMap<String, Vec<(ClassId, ClassId)>>;

/// Boxes for one layer: per domain, one box per class in
/// [`KnowledgeGraph::domain_classes`] order.
pub type LayerBoxes = BTreeMap<String, Vec<AxisBox>>;

/// Positive (subclass, superclass) pairs for `domain`.
pub fn positive_pairs(g: &KnowledgeGraph, domain: &str, transitive: bool) -> Result<Vec<(ClassId, ClassId)>> {
    if !transitive {
        return Ok(g.hierarchy(domain).cloned().collect());
    }
    let mut out = Vec::new();
    for c in g.domain_classes(domain) {
        for a in ancestors(g, c)? {
            out.push((c.clone(), a));
        }
    }
    Ok(out)
}

/// Per-domain negative samplers for every domain the loss covers.
pub fn negative_samplers(g: &KnowledgeGraph, opts: &SemanticOptions) -> BTreeMap<String, NegativeSampler> {
    g.domains()
        .filter(|d| !opts.exclude_domains.contains(*d))
        .map(|d| (d.to_string(), NegativeSampler::unrelated(g, d)))
        .collect()
}

/// For every positive pair `(c, _)`, `round(ratio)` pairs `(c, n)` with `n`
/// drawn from classes that are neither ancestors nor descendants of `c`.
pub fn sample_random_negatives<R: Rng + ?Sized>(
    g: &KnowledgeGraph,
    samplers: &BTreeMap<String, NegativeSampler>,
    opts: &SemanticOptions,
    ratio: f64,
    rng: &mut R,
) -> Result<RandomNegatives> {
    let k = negatives_per_positive(ratio);
    let mut out = RandomNegatives::new();
    for (domain, sampler) in samplers {
        let mut pairs = Vec::new();
        for (c, _) in positive_pairs(g, domain, opts.transitive)? {
            for n in sampler.sample(&c, k, rng) {
                pairs.push((c.clone(), n));
            }
        }
        out.insert(domain.clone(), pairs);
    }
    Ok(out)
}

fn class_index(g: &KnowledgeGraph, domain: &str) -> BTreeMap<ClassId, usize> {
    g.domain_classes(domain)
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clone(), i))
        .collect()
}

fn index_pairs(
    index: &BTreeMap<ClassId, usize>,
    pairs: &[(ClassId, ClassId)],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let look = |c: &ClassId| {
        index
            .get(c)
            .copied()
            .ok_or_else(|| Error::data(format!("no box for class {c}")))
    };
    let mut a = Vec::with_capacity(pairs.len());
    let mut b = Vec::with_capacity(pairs.len());
    for (x, y) in pairs {
        a.push(look(x)?);
        b.push(look(y)?);
    }
    Ok((a, b))
}

/// Per-(layer, domain) positive and negative loss sums.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEntry {
    pub layer: usize,
    pub domain: String,
    pub pos: f64,
    pub neg: f64,
    pub n_classes: usize,
}

impl LossEntry {
    /// Losses averaged per class, used for reporting.
    pub fn per_class(&self) -> (f64, f64) {
        let n = self.n_classes.max(1) as f64;
        (self.pos / n, self.neg / n)
    }
}

struct DomainPairs {
    n_classes: usize,
    pos: (Vec<usize>, Vec<usize>),
    disj: (Vec<usize>, Vec<usize>),
    random: (Vec<usize>, Vec<usize>),
}

fn domain_pairs(
    g: &KnowledgeGraph,
    opts: &SemanticOptions,
    random: &RandomNegatives,
) -> Result<BTreeMap<String, DomainPairs>> {
    let mut out = BTreeMap::new();
    for domain in g.domains() {
        if opts.exclude_domains.contains(domain) {
            continue;
        }
        let index = class_index(g, domain);
        let pos = positive_pairs(g, domain, opts.transitive)?;
        let disj: Vec<_> = g.disjoint(domain).cloned().collect();
        let rnd = random.get(domain).cloned().unwrap_or_default();
        out.insert(
            domain.to_string(),
            DomainPairs {
                n_classes: index.len(),
                pos: index_pairs(&index, &pos)?,
                disj: index_pairs(&index, &disj)?,
                random: index_pairs(&index, &rnd)?,
            },
        );
    }
    Ok(out)
}

fn first_layer(opts: &SemanticOptions) -> usize {
    usize::from(!opts.include_prior_layer)
}

/// Plain evaluation of the aggregated semantic loss
/// `Σ_layers Σ_domains [pos + β (disjoint + γ random)]`, with the per-term
/// breakdown.
pub fn semantic_loss_total(
    layers: &[LayerBoxes],
    g: &KnowledgeGraph,
    opts: &SemanticOptions,
    w: &SemanticLossWeights,
    random: &RandomNegatives,
) -> Result<(f64, Vec<LossEntry>)> {
    let pairs = domain_pairs(g, opts, random)?;
    let mode = VolumeMode::Gumbel(opts.temp);
    let pos_fn = |c: &AxisBox, d: &AxisBox| match opts.kind {
        LossKind::Distance => loss_distance_pos(c, d, opts.norm),
        LossKind::Overlap => loss_overlap_pos(c, d, mode),
    };
    let neg_fn = |c: &AxisBox, d: &AxisBox| match opts.kind {
        LossKind::Distance => loss_distance_neg(c, d, opts.norm),
        LossKind::Overlap => loss_overlap_neg(c, d, mode),
    };
    let mut total = 0.0;
    let mut entries = Vec::new();
    for (layer, boxes) in layers.iter().enumerate().skip(first_layer(opts)) {
        for (domain, p) in &pairs {
            let bx = boxes
                .get(domain)
                .ok_or_else(|| Error::data(format!("no boxes for domain {domain} at layer {layer}")))?;
            if bx.len() != p.n_classes {
                return Err(Error::shape(format!(
                    "domain {domain} has {} classes but {} boxes",
                    p.n_classes,
                    bx.len()
                )));
            }
            let sum = |(a, b): &(Vec<usize>, Vec<usize>), f: &dyn Fn(&AxisBox, &AxisBox) -> Result<f64>| {
                a.iter().zip(b).try_fold(0.0, |acc, (&i, &j)| Ok::<_, Error>(acc + f(&bx[i], &bx[j])?))
            };
            let pos = sum(&p.pos, &pos_fn)?;
            let disj = sum(&p.disj, &neg_fn)?;
            let rnd = sum(&p.random, &neg_fn)?;
            let neg = disj + w.gamma_random * rnd;
            total += pos + w.beta_neg * neg;
            entries.push(LossEntry {
                layer,
                domain: domain.clone(),
                pos,
                neg,
                n_classes: p.n_classes,
            });
        }
    }
    Ok((total, entries))
}

/// Box corners of a latent matrix `[n, 2k]` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoxVars {
    pub lower: Var,
    pub upper: Var,
    pub side: Var,
}

pub fn tape_boxes(t: &mut Tape, latent: Var) -> Result<BoxVars> {
    let shape = t.shape(latent).to_vec();
    if shape.len() != 2 || !shape[1].is_multiple_of(2) {
        return Err(Error::shape(format!("box latent matrix of shape {shape:?}")));
    }
    let k = shape[1] / 2;
    let lower = t.slice(latent, 1, 0, k)?;
    let w = t.slice(latent, 1, k, k)?;
    let side = t.softplus(w);
    let upper = t.add(lower, side)?;
    Ok(BoxVars { lower, upper, side })
}

struct Gathered {
    cl: Var,
    cu: Var,
    dl: Var,
    du: Var,
}

fn gather(t: &mut Tape, b: &BoxVars, ci: &[usize], di: &[usize]) -> Result<Gathered> {
    Ok(Gathered {
        cl: t.gather_rows(b.lower, ci)?,
        cu: t.gather_rows(b.upper, ci)?,
        dl: t.gather_rows(b.lower, di)?,
        du: t.gather_rows(b.upper, di)?,
    })
}

/// Element-wise `d = |c^C - c^D| - o^C - o^D` and `o^C`, from corners.
fn tape_distance(t: &mut Tape, p: &Gathered) -> Result<(Var, Var)> {
    let sc = t.add(p.cl, p.cu)?;
    let sd = t.add(p.dl, p.du)?;
    let dc = t.sub(sc, sd)?;
    let dc = t.scale(dc, 0.5);
    let abs = t.abs(dc);
    let wc = t.sub(p.cu, p.cl)?;
    let wd = t.sub(p.du, p.dl)?;
    let oc = t.scale(wc, 0.5);
    let od = t.scale(wd, 0.5);
    let o = t.add(oc, od)?;
    Ok((t.sub(abs, o)?, oc))
}

fn tape_norm(t: &mut Tape, v: Var, norm: Norm) -> Result<Var> {
    match norm {
        Norm::L2 => t.norm_rows(v),
        Norm::L1 => t.sum_axis(v, 1),
    }
}

fn tape_log_volume(t: &mut Tape, lower: Var, upper: Var, temp: GumbelTemp) -> Result<Var> {
    let beta = temp.beta();
    let side = t.sub(upper, lower)?;
    let scaled = t.scale(side, 1.0 / beta);
    let ls = t.log_softplus(scaled);
    let per_dim = t.add_scalar(ls, beta.ln());
    t.sum_axis(per_dim, 1)
}

/// Per-pair positive losses `[m]` for subclass pairs `(ci[k], di[k])`.
pub fn tape_pos_losses(
    t: &mut Tape,
    b: &BoxVars,
    ci: &[usize],
    di: &[usize],
    opts: &SemanticOptions,
) -> Result<Var> {
    let p = gather(t, b, ci, di)?;
    match opts.kind {
        LossKind::Distance => {
            let (d, oc) = tape_distance(t, &p)?;
            let two_oc = t.scale(oc, 2.0);
            let v = t.add(d, two_oc)?;
            let v = t.relu(v);
            tape_norm(t, v, opts.norm)
        }
        LossKind::Overlap => {
            let il = t.maximum(p.cl, p.dl)?;
            let iu = t.minimum(p.cu, p.du)?;
            let lc = tape_log_volume(t, p.cl, p.cu, opts.temp)?;
            let li = tape_log_volume(t, il, iu, opts.temp)?;
            let diff = t.sub(lc, li)?;
            Ok(t.relu(diff))
        }
    }
}

/// Per-pair negative losses `[m]` for pairs that should not overlap.
pub fn tape_neg_losses(
    t: &mut Tape,
    b: &BoxVars,
    ci: &[usize],
    di: &[usize],
    opts: &SemanticOptions,
) -> Result<Var> {
    let p = gather(t, b, ci, di)?;
    match opts.kind {
        LossKind::Distance => {
            let (d, _) = tape_distance(t, &p)?;
            let dv = t.value(d).clone();
            let mask: Vec<f64> = (0..dv.rows())
                .map(|i| f64::from(u8::from(dv.row(i).iter().all(|&x| x < 0.0))))
                .collect();
            let mask = t.constant(Tensor::vector(mask));
            let nd = t.neg(d);
            let v = t.relu(nd);
            let n = tape_norm(t, v, opts.norm)?;
            t.mul(n, mask)
        }
        LossKind::Overlap => {
            let il = t.maximum(p.cl, p.dl)?;
            let iu = t.minimum(p.cu, p.du)?;
            let lc = tape_log_volume(t, p.cl, p.cu, opts.temp)?;
            let ld = tape_log_volume(t, p.dl, p.du, opts.temp)?;
            let li = tape_log_volume(t, il, iu, opts.temp)?;
            let lmin = t.minimum(lc, ld)?;
            let lr = t.sub(li, lmin)?;
            let r = t.exp(lr);
            let r = t.clamp_max(r, OVERLAP_RATIO_CAP);
            let nr = t.neg(r);
            let one_minus = t.add_scalar(nr, 1.0);
            let l = t.log(one_minus)?;
            Ok(t.neg(l))
        }
    }
}

/// `Σ side²` over all boxes of a latent matrix.
pub fn tape_reg_big(t: &mut Tape, b: &BoxVars) -> Result<Var> {
    let sq = t.mul(b.side, b.side)?;
    Ok(t.sum(sq))
}

/// `Σ max(0, 1/side - l0)` over all boxes of a latent matrix.
pub fn tape_reg_small(t: &mut Tape, b: &BoxVars, l0: f64) -> Result<Var> {
    if t.value(b.side).data().contains(&0.0) {
        return Err(Error::Divergence("a box side underflowed to zero".into()));
    }
    let inv = t.recip(b.side)?;
    let shifted = t.add_scalar(inv, -l0);
    let r = t.relu(shifted);
    Ok(t.sum(r))
}

/// Tape counterpart of [`semantic_loss_total`] over per-layer per-domain
/// latent matrices. Returns `None` for the root when no term applies.
pub fn tape_semantic_loss(
    t: &mut Tape,
    layers: &[BTreeMap<String, Var>],
    g: &KnowledgeGraph,
    opts: &SemanticOptions,
    w: &SemanticLossWeights,
    random: &RandomNegatives,
) -> Result<(Option<Var>, Vec<LossEntry>)> {
    let pairs = domain_pairs(g, opts, random)?;
    let mut terms = Vec::new();
    let mut entries = Vec::new();
    for (layer, latents) in layers.iter().enumerate().skip(first_layer(opts)) {
        for (domain, p) in &pairs {
            let lat = *latents
                .get(domain)
                .ok_or_else(|| Error::data(format!("no latents for domain {domain} at layer {layer}")))?;
            if t.shape(lat)[0] != p.n_classes {
                return Err(Error::shape(format!(
                    "domain {domain} has {} classes but {} latent rows",
                    p.n_classes,
                    t.shape(lat)[0]
                )));
            }
            let b = tape_boxes(t, lat)?;
            let mut pos_v = 0.0;
            let mut neg_v = 0.0;
            if !p.pos.0.is_empty() {
                let l = tape_pos_losses(t, &b, &p.pos.0, &p.pos.1, opts)?;
                let s = t.sum(l);
                pos_v = t.value(s).item();
                terms.push(s);
            }
            let mut negs = Vec::new();
            if !p.disj.0.is_empty() {
                let l = tape_neg_losses(t, &b, &p.disj.0, &p.disj.1, opts)?;
                negs.push((t.sum(l), 1.0));
            }
            if !p.random.0.is_empty() && w.gamma_random != 0.0 {
                let l = tape_neg_losses(t, &b, &p.random.0, &p.random.1, opts)?;
                negs.push((t.sum(l), w.gamma_random));
            }
            for (s, k) in negs {
                neg_v += k * t.value(s).item();
                if w.beta_neg != 0.0 {
                    terms.push(t.scale(s, w.beta_neg * k));
                }
            }
            entries.push(LossEntry {
                layer,
                domain: domain.clone(),
                pos: pos_v,
                neg: neg_v,
                n_classes: p.n_classes,
            });
        }
    }
    let mut root = None;
    for v in terms {
        root = Some(match root {
            None => v,
            Some(r) => t.add(r, v)?,
        });
    }
    Ok((root, entries))
}
