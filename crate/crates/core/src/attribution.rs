//! Input×gradient attribution of gene-pair predictions to the knowledge
//! graph edges feeding each gene, and accumulation of edge-pair importances
//! over many deletion pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kg::{ancestors, ClassId, KnowledgeGraph, RelationId};
use crate::predictor::FitnessModel;

/// `(subject, predicate)` of an edge whose object is a gene.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeKey {
    pub subject: ClassId,
    pub predicate: RelationId,
}

/// `Σ_i x_i · ∂root/∂x_i` for each leaf.
pub fn input_times_gradient(t: &Tape, root: Var, leaves: &[Var]) -> Result<Vec<f64>> {
    let grads = t.backward(root)?;
    Ok(leaves
        .iter()
        .map(|&v| {
            let g: Tensor = grads.get(v);
            t.value(v).data().iter().zip(g.data()).map(|(x, d)| x * d).sum()
        })
        .collect())
}

/// Importance score per incoming edge of one gene.
pub type EdgeScores = Vec<(EdgeKey, f64)>;

/// Attribution of `f(gene_a, gene_b)` to the first-layer messages arriving
/// at each gene. Returns the scores for `gene_a`'s edges and for `gene_b`'s.
pub fn input_x_gradient(
    model: &FitnessModel,
    g: &KnowledgeGraph,
    gene_a: &ClassId,
    gene_b: &ClassId,
) -> Result<(EdgeScores, EdgeScores)> {
    let index = model.gene_index(g);
    let look = |c: &ClassId| {
        index
            .get(c)
            .copied()
            .ok_or_else(|| Error::data(format!("unknown gene {c}")))
    };
    let (ia, ib) = (look(gene_a)?, look(gene_b)?);
    let idx = model.gnn.index(g)?;
    let mut t = Tape::new();
    let bound = model.params().bind(&mut t, |_| false);
    let mut probes = vec![(model.gene_domain.clone(), ia)];
    if ib != ia {
        probes.push((model.gene_domain.clone(), ib));
    }
    let f = model.gnn.forward(&mut t, &bound, &idx, &probes)?;
    let genes = f.layers[model.gnn.depth()][&model.gene_domain];
    let y = model.tape_predict(&mut t, &bound, genes, &[ia], &[ib])?;
    let leaves: Vec<Var> = f.probes.iter().map(|(_, v)| *v).collect();
    let scores = input_times_gradient(&t, y, &leaves)?;
    let mut side_a = Vec::new();
    let mut side_b = Vec::new();
    for ((edge, _), s) in f.probes.iter().zip(scores) {
        let key = EdgeKey {
            subject: edge.subject.clone(),
            predicate: edge.relation.clone(),
        };
        if &edge.object == gene_a {
            side_a.push((key.clone(), s));
        }
        if &edge.object == gene_b {
            side_b.push((key, s));
        }
    }
    Ok((side_a, side_b))
}

/// Accumulated `l1 · l2` scores keyed by ordered `(gene_a-side, gene_b-side)`
/// edge keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairImportanceTable {
    pub entries: BTreeMap<(EdgeKey, EdgeKey), f64>,
}

impl PairImportanceTable {
    /// Adds every cross product of the two sides' scores.
    pub fn add_pair(&mut self, side_a: &[(EdgeKey, f64)], side_b: &[(EdgeKey, f64)]) {
        for (ka, la) in side_a {
            for (kb, lb) in side_b {
                *self.entries.entry((ka.clone(), kb.clone())).or_insert(0.0) += la * lb;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Merges `(l1, l2)` with `(l2, l1)`; keys come out with `l1 <= l2`.
    pub fn symmetrized(&self) -> BTreeMap<(EdgeKey, EdgeKey), f64> {
        let mut out = BTreeMap::new();
        for ((a, b), s) in &self.entries {
            let key = if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
            *out.entry(key).or_insert(0.0) += s;
        }
        out
    }

    /// Symmetrized entries by descending score (ties by key).
    pub fn sorted_desc(&self) -> Vec<((EdgeKey, EdgeKey), f64)> {
        let mut v: Vec<_> = self.symmetrized().into_iter().collect();
        v.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        v
    }

    /// `rank<TAB>score<TAB>pred1<TAB>class1<TAB>pred2<TAB>class2` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (rank, ((a, b), score)) in self.sorted_desc().into_iter().enumerate() {
            let _ = writeln!(
                s,
                "{}\t{score:.16e}\t{}\t{}\t{}\t{}",
                rank + 1,
                a.predicate.name,
                a.subject,
                b.predicate.name,
                b.subject
            );
        }
        s
    }

    /// Keeps entries where a predicate name is allowed, or a subject is an
    /// allowed class or one of its descendants.
    pub fn filter(
        &self,
        allow_predicates: &BTreeSet<String>,
        allow_superclasses: &BTreeSet<ClassId>,
        g: &KnowledgeGraph,
    ) -> Result<PairImportanceTable> {
        let mut memo: BTreeMap<ClassId, bool> = BTreeMap::new();
        let mut under = |c: &ClassId| -> Result<bool> {
            if let Some(&v) = memo.get(c) {
                return Ok(v);
            }
            let v = allow_superclasses.contains(c)
                || (g.contains(c) && !ancestors(g, c)?.is_disjoint(allow_superclasses));
            memo.insert(c.clone(), v);
            Ok(v)
        };
        let mut entries = BTreeMap::new();
        for ((a, b), s) in &self.entries {
            let keep = allow_predicates.contains(&a.predicate.name)
                || allow_predicates.contains(&b.predicate.name)
                || under(&a.subject)?
                || under(&b.subject)?;
            if keep {
                entries.insert((a.clone(), b.clone()), *s);
            }
        }
        Ok(PairImportanceTable { entries })
    }
}

/// Runs attribution for every pair and accumulates the table. Pairs are
/// merged in sorted order, so the result does not depend on list order.
pub fn accumulate_pair_importances(
    model: &FitnessModel,
    g: &KnowledgeGraph,
    pairs: &[(ClassId, ClassId)],
    jobs: usize,
) -> Result<PairImportanceTable> {
    let mut sorted = pairs.to_vec();
    sorted.sort();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let scores: Vec<_> = pool.install(|| {
        sorted
            .par_iter()
            .map(|(a, b)| input_x_gradient(model, g, a, b))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut table = PairImportanceTable::default();
    for (sa, sb) in &scores {
        table.add_pair(sa, sb);
    }
    Ok(table)
}
