//! Ranking candidate edge additions by how far they move the GNN-generated
//! boxes, compared against class-constrained and fully random edges with a
//! two-sided Mann–Whitney U test.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::Tensor;
use crate::boxes::{box_distance, center_offset};
use crate::error::{Error, Result};
use crate::gnn::{boxes_at_layer, HeteroGnn};
use crate::kg::{ClassId, Edge, KnowledgeGraph, RelationId};
use crate::seed;

/// How two versions of the same box are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DisplacementMode {
    /// `|Δc_i| + |Δo_i|` per dimension; zero exactly when the boxes agree.
    #[default]
    CenterOffset,
    /// `|Δz_i| + |ΔZ_i|` per dimension.
    Corner,
    /// The signed element-wise box distance between old and new box.
    BoxDistance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Real,
    Constrained,
    Random,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Real => "real",
            BaselineKind::Constrained => "constrained",
            BaselineKind::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkEvalOptions {
    pub mode: DisplacementMode,
    /// Add `(o, r_rev, s)` together with each candidate `(s, r, o)`.
    pub add_reverse: bool,
}

impl Default for LinkEvalOptions {
    fn default() -> Self {
        LinkEvalOptions {
            mode: DisplacementMode::CenterOffset,
            add_reverse: true,
        }
    }
}

/// Final-layer latents of `g` under `model`.
pub fn final_layer(model: &HeteroGnn, g: &KnowledgeGraph) -> Result<BTreeMap<String, Tensor>> {
    Ok(model.forward_values(g)?.pop().expect("depth >= 1"))
}

/// Mean per-dimension change between two final layers, over every node of
/// every domain.
pub fn layer_displacement(
    before: &BTreeMap<String, Tensor>,
    after: &BTreeMap<String, Tensor>,
    mode: DisplacementMode,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (d, lat) in before {
        let other = after
            .get(d)
            .ok_or_else(|| Error::shape(format!("domain {d} missing after revision")))?;
        let (b0, b1) = (boxes_at_layer(lat)?, boxes_at_layer(other)?);
        for (x, y) in b0.iter().zip(&b1) {
            let per_dim: Vec<f64> = match mode {
                DisplacementMode::CenterOffset => {
                    let ((c0, o0), (c1, o1)) = (center_offset(x), center_offset(y));
                    (0..x.dim())
                        .map(|i| (c0[i] - c1[i]).abs() + (o0[i] - o1[i]).abs())
                        .collect()
                }
                DisplacementMode::Corner => (0..x.dim())
                    .map(|i| (x.lower[i] - y.lower[i]).abs() + (x.upper[i] - y.upper[i]).abs())
                    .collect(),
                DisplacementMode::BoxDistance => box_distance(x, y)?,
            };
            count += per_dim.len();
            total += per_dim.iter().sum::<f64>();
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn revision_edges(model: &HeteroGnn, g: &KnowledgeGraph, edge: &Edge, add_reverse: bool) -> Result<Vec<Edge>> {
    for c in [&edge.subject, &edge.object] {
        if !g.contains(c) {
            return Err(Error::data(format!("unknown endpoint {c}")));
        }
    }
    let mut out = vec![edge.clone()];
    if add_reverse {
        out.push(edge.reversed());
    }
    for e in &out {
        if !model.relations().contains(&e.relation) {
            return Err(Error::data(format!("no module for relation {}", e.relation.key())));
        }
    }
    Ok(out)
}

/// Displacement of the final-layer boxes caused by adding `edge` to `g`.
/// `base` must be `final_layer(model, g)`.
pub fn embedding_displacement(
    model: &HeteroGnn,
    g: &KnowledgeGraph,
    base: &BTreeMap<String, Tensor>,
    edge: &Edge,
    opts: &LinkEvalOptions,
) -> Result<f64> {
    let extra = revision_edges(model, g, edge, opts.add_reverse)?;
    let revised = g.with_edges(extra)?;
    let after = final_layer(model, &revised)?;
    layer_displacement(base, &after, opts.mode)
}

/// One evaluated candidate edge.
#[derive(Clone, Debug, PartialEq)]
pub struct RevisionResult {
    /// Relation of the test edge this candidate belongs to.
    pub group: String,
    pub kind: BaselineKind,
    pub edge: Edge,
    pub distance: f64,
    /// Midrank by descending distance within `(group, kind)`.
    pub rank: f64,
}

const MAX_DRAWS: usize = 10_000;

fn draw_constrained<R: Rng>(g: &KnowledgeGraph, test: &Edge, rng: &mut R) -> Result<Edge> {
    let src = g.domain_classes(&test.relation.source_domain);
    let dst = g.domain_classes(&test.relation.target_domain);
    let mut last = None;
    for _ in 0..MAX_DRAWS {
        let e = Edge::new(
            src[rng.gen_range(0..src.len())].clone(),
            test.relation.clone(),
            dst[rng.gen_range(0..dst.len())].clone(),
        );
        if !g.contains_edge(&e) && e.subject != e.object {
            return Ok(e);
        }
        last = Some(e);
    }
    last.ok_or_else(|| Error::data("no constrained candidate"))
}

fn draw_random<R: Rng>(model: &HeteroGnn, g: &KnowledgeGraph, test: &Edge, rng: &mut R) -> Result<Edge> {
    let nodes: Vec<&ClassId> = g.nodes().keys().collect();
    let base: Vec<&RelationId> = model.relations().iter().filter(|r| !r.is_reverse()).collect();
    let mut last = None;
    for _ in 0..MAX_DRAWS {
        let s = nodes[rng.gen_range(0..nodes.len())];
        let o = nodes[rng.gen_range(0..nodes.len())];
        let (ds, dobj) = (g.domain_of(s).expect("node"), g.domain_of(o).expect("node"));
        let fits: Vec<&&RelationId> = base
            .iter()
            .filter(|r| r.source_domain == ds && r.target_domain == dobj)
            .collect();
        let rel = fits
            .iter()
            .find(|r| r.name == test.relation.name)
            .or_else(|| fits.first());
        let Some(rel) = rel else { continue };
        let e = Edge::new(s.clone(), (**rel).clone(), o.clone());
        if !g.contains_edge(&e) && s != o {
            return Ok(e);
        }
        last = Some(e);
    }
    last.ok_or_else(|| Error::data("no random candidate: no relation fits any node pair"))
}

/// Evaluates every test edge with its two baselines against the pristine
/// `g_train`. Each test edge draws its baselines from its own seeded stream,
/// so results do not depend on evaluation order or thread count.
pub fn evaluate_revisions(
    model: &HeteroGnn,
    g_train: &KnowledgeGraph,
    test_edges: &[Edge],
    opts: &LinkEvalOptions,
    seed_value: u64,
    jobs: usize,
) -> Result<Vec<RevisionResult>> {
    for e in test_edges {
        if g_train.contains_edge(e) {
            return Err(Error::data(format!("test edge {e} is part of the training graph")));
        }
    }
    let base = final_layer(model, g_train)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|err| Error::config("jobs", err.to_string()))?;
    let per_edge: Vec<Vec<RevisionResult>> = pool.install(|| {
        test_edges
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, i as u64));
                let constrained = draw_constrained(g_train, e, &mut rng)?;
                let random = draw_random(model, g_train, e, &mut rng)?;
                [
                    (BaselineKind::Real, e.clone()),
                    (BaselineKind::Constrained, constrained),
                    (BaselineKind::Random, random),
                ]
                .into_iter()
                .map(|(kind, edge)| {
                    let distance = embedding_displacement(model, g_train, &base, &edge, opts)?;
                    Ok(RevisionResult {
                        group: e.relation.name.clone(),
                        kind,
                        edge,
                        distance,
                        rank: 0.0,
                    })
                })
                .collect()
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut results: Vec<RevisionResult> = per_edge.into_iter().flatten().collect();
    assign_ranks(&mut results);
    Ok(results)
}

/// Midranks by descending distance within each `(group, kind)`.
fn assign_ranks(results: &mut [RevisionResult]) {
    let mut groups: BTreeMap<(String, BaselineKind), Vec<usize>> = BTreeMap::new();
    for (i, r) in results.iter().enumerate() {
        groups.entry((r.group.clone(), r.kind)).or_default().push(i);
    }
    for idx in groups.values() {
        let neg: Vec<f64> = idx.iter().map(|&i| -results[i].distance).collect();
        for (k, r) in midranks(&neg).into_iter().enumerate() {
            results[idx[k]].rank = r;
        }
    }
}

/// Ranks `1..=n` with ties replaced by their average rank.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Largest smaller-sample size for which the exact null distribution is used.
pub const EXACT_LIMIT: usize = 8;

/// Two-sided Mann–Whitney U test. Returns `U` for `a` (number of pairs with
/// `a > b`, ties counting one half) and the p-value: exact over all rank
/// arrangements (respecting ties) when `min(n_a, n_b) <= 8`, otherwise the
/// tie-corrected normal approximation with continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("Mann-Whitney U needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::data("Mann-Whitney U on non-finite values"));
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let ra: f64 = ranks[..na].iter().sum();
    let u = ra - (na * (na + 1)) as f64 / 2.0;
    let p = if na.min(nb) <= EXACT_LIMIT {
        exact_p(&ranks, na, nb)
    } else {
        normal_p(u, &pooled, na, nb)
    };
    Ok((u, p))
}

/// Exact two-sided p: the share of size-`k` rank subsets (k = smaller
/// sample) whose statistic is at least as far from its mean as observed.
fn exact_p(ranks: &[f64], na: usize, nb: usize) -> f64 {
    // Doubled midranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let observed_a: usize = doubled[..na].iter().sum();
    let (k, observed) = if na <= nb {
        (na, observed_a)
    } else {
        (nb, doubled.iter().sum::<usize>() - observed_a)
    };
    let max_sum: usize = doubled.iter().sum();
    // counts[j][s]: subsets of size j with doubled rank sum s.
    let mut counts = vec![vec![0.0f64; max_sum + 1]; k + 1];
    counts[0][0] = 1.0;
    for &r in &doubled {
        for j in (1..=k).rev() {
            let (lo, hi) = counts.split_at_mut(j);
            let (prev, cur) = (&lo[j - 1], &mut hi[0]);
            for s in (r..=max_sum).rev() {
                if prev[s - r] != 0.0 {
                    cur[s] += prev[s - r];
                }
            }
        }
    }
    // The doubled rank sum has mean k (N + 1); compare distances in that scale.
    let n = na + nb;
    let mean2 = (k * (n + 1)) as i64;
    let dev = (observed as i64 - mean2).abs();
    let mut hit = 0.0;
    let mut total = 0.0;
    for (s, &c) in counts[k].iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        total += c;
        if (s as i64 - mean2).abs() >= dev {
            hit += c;
        }
    }
    (hit / total).min(1.0)
}

fn normal_p(u: f64, pooled: &[f64], na: usize, nb: usize) -> f64 {
    let (na_f, nb_f) = (na as f64, nb as f64);
    let n = na_f + nb_f;
    let mut sorted = pooled.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = na_f * nb_f / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let mu = na_f * nb_f / 2.0;
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - std.cdf(z))).min(1.0)
}

/// One row of the per-relation summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub relation: String,
    pub n_test: usize,
    pub mean_real: f64,
    pub mean_constrained: f64,
    pub mean_random: f64,
    pub u_random: f64,
    pub p_random: f64,
    pub u_constrained: f64,
    pub p_constrained: f64,
}

pub const SUMMARY_COLUMNS: [&str; 9] = [
    "Edge Type",
    "#Test Edges",
    "Mean Dist. (real)",
    "Mean Dist. (constrained)",
    "Mean Dist. (random)",
    "M-W U (Real vs Random)",
    "p-value (Real vs Random)",
    "M-W U (Real vs Constrained)",
    "p-value (Real vs Constrained)",
];

pub fn summarize(results: &[RevisionResult]) -> Result<Vec<SummaryRow>> {
    let mut by: BTreeMap<&str, BTreeMap<BaselineKind, Vec<f64>>> = BTreeMap::new();
    for r in results {
        by.entry(&r.group).or_default().entry(r.kind).or_default().push(r.distance);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut rows = Vec::new();
    for (rel, kinds) in by {
        let get = |k: BaselineKind| {
            kinds
                .get(&k)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::data(format!("relation {rel} lacks {} results", k.as_str())))
        };
        let (real, cons, rand) = (
            get(BaselineKind::Real)?,
            get(BaselineKind::Constrained)?,
            get(BaselineKind::Random)?,
        );
        let (u_random, p_random) = mann_whitney_u(real, rand)?;
        let (u_constrained, p_constrained) = mann_whitney_u(real, cons)?;
        rows.push(SummaryRow {
            relation: rel.to_string(),
            n_test: real.len(),
            mean_real: mean(real),
            mean_constrained: mean(cons),
            mean_random: mean(rand),
            u_random,
            p_random,
            u_constrained,
            p_constrained,
        });
    }
    Ok(rows)
}

pub fn summary_to_text(rows: &[SummaryRow]) -> String {
    let mut s = SUMMARY_COLUMNS.join("\t");
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}",
            r.relation,
            r.n_test,
            r.mean_real,
            r.mean_constrained,
            r.mean_random,
            r.u_random,
            r.p_random,
            r.u_constrained,
            r.p_constrained
        );
    }
    s
}

/// `relation<TAB>kind<TAB>edge<TAB>distance` lines for one relation group.
pub fn results_to_text(results: &[RevisionResult], group: &str) -> String {
    let mut s = String::new();
    for r in results.iter().filter(|r| r.group == group) {
        let _ = writeln!(s, "{}\t{}\t{}\t{:.16e}", r.group, r.kind.as_str(), r.edge, r.distance);
    }
    s
}
