//! Synthetic knowledge graphs with a known fitness function, used as test
//! fixtures and as the bundled benchmark.
//!
//! Each ontology domain is a balanced tree. Every gene is annotated with one
//! leaf per ontology domain, and the fitness of a gene pair is
//! `1 - Σ_domains level_weights[depth of the deepest shared ancestor]`.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{ClassId, Edge, FitnessDataset, KnowledgeGraph, RelationId};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_genes: usize,
    /// Names of the ontology domains; each gets its own tree.
    pub ontology_domains: Vec<String>,
    /// Children per node at each level below the root.
    pub branching: Vec<usize>,
    /// Fitness penalty by depth of the deepest shared ancestor (index 0 is
    /// the root). Must have `branching.len() + 1` entries.
    pub level_weights: Vec<f64>,
    /// Declare siblings disjoint at every level.
    pub disjoint_siblings: bool,
    pub gene_domain: String,
    /// Share of gene pairs that receive a fitness value.
    pub pair_fraction: f64,
    /// Put the tuned benchmark training settings into the emitted config
    /// instead of copying the current ones.
    pub write_benchmark_settings: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_genes: 150,
            ontology_domains: vec!["function".into(), "process".into()],
            branching: vec![3, 3],
            level_weights: vec![0.0, 0.15, 0.3],
            disjoint_siblings: true,
            gene_domain: "gene".into(),
            pair_fraction: 1.0,
            write_benchmark_settings: true,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(format!("synthetic.{k}"), m));
        if self.n_genes < 2 {
            return bad("n_genes", "need at least 2 genes");
        }
        if self.branching.is_empty() || self.branching.contains(&0) {
            return bad("branching", "need at least one level, each with >= 1 child");
        }
        if self.level_weights.len() != self.branching.len() + 1 {
            return bad("level_weights", "need one weight per level including the root");
        }
        let total: f64 = self.ontology_domains.len() as f64
            * self.level_weights.iter().cloned().fold(0.0, f64::max);
        if self.level_weights.iter().any(|w| !w.is_finite() || *w < 0.0) || total > 1.0 {
            return bad("level_weights", "weights must be >= 0 with worst-case fitness >= 0");
        }
        let mut names = BTreeSet::new();
        for d in self.ontology_domains.iter().chain([&self.gene_domain]) {
            if d.is_empty() || d.contains(char::is_whitespace) || !names.insert(d) {
                return bad("ontology_domains", "domain names must be distinct non-blank tokens");
            }
        }
        if !(self.pair_fraction > 0.0 && self.pair_fraction <= 1.0) {
            return bad("pair_fraction", "must lie in (0, 1]");
        }
        Ok(())
    }
}

pub struct Synthetic {
    pub graph: KnowledgeGraph,
    pub fitness: FitnessDataset,
    pub gene_domain: String,
}

/// Relation linking genes to the leaves of `domain`.
pub fn annotation_relation(gene_domain: &str, domain: &str) -> RelationId {
    RelationId::new(format!("annotated_{domain}"), gene_domain, domain)
}

/// Class ids of a balanced tree, as `(class, parent, depth)` in creation order.
fn tree(domain: &str, branching: &[usize]) -> Vec<(ClassId, Option<ClassId>, usize)> {
    let root = ClassId::new(format!("{domain}_0"));
    let mut out = vec![(root.clone(), None, 0)];
    let mut frontier = vec![root];
    for (level, &k) in branching.iter().enumerate() {
        let mut next = Vec::new();
        for p in &frontier {
            for i in 0..k {
                let c = ClassId::new(format!("{}_{i}", p.as_str()));
                out.push((c.clone(), Some(p.clone()), level + 1));
                next.push(c);
            }
        }
        frontier = next;
    }
    out
}

/// Depth of the deepest common ancestor of two leaves named by tree paths.
fn shared_depth(domain: &str, a: &ClassId, b: &ClassId) -> usize {
    let path = |c: &ClassId| -> Vec<String> {
        c.as_str()[domain.len() + 1..].split('_').map(str::to_string).collect()
    };
    let (pa, pb) = (path(a), path(b));
    pa.iter().zip(&pb).take_while(|(x, y)| x == y).count() - 1
}

pub fn generate(cfg: &SyntheticConfig, seed_value: u64) -> Result<Synthetic> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_named(seed_value, "synthetic"));
    let mut nodes = BTreeMap::new();
    let mut relations = BTreeSet::new();
    let mut hierarchy = Vec::new();
    let mut disjoint = Vec::new();
    let mut edges = Vec::new();
    let width = (cfg.n_genes - 1).to_string().len();
    let genes: Vec<ClassId> = (0..cfg.n_genes)
        .map(|i| ClassId::new(format!("g{i:0width$}")))
        .collect();
    for g in &genes {
        nodes.insert(g.clone(), cfg.gene_domain.clone());
    }
    let depth = cfg.branching.len();
    let mut leaf_of: BTreeMap<&ClassId, Vec<ClassId>> = BTreeMap::new();
    for domain in &cfg.ontology_domains {
        let t = tree(domain, &cfg.branching);
        let mut children: BTreeMap<ClassId, Vec<ClassId>> = BTreeMap::new();
        for (c, parent, _) in &t {
            nodes.insert(c.clone(), domain.clone());
            if let Some(p) = parent {
                hierarchy.push((c.clone(), p.clone()));
                children.entry(p.clone()).or_default().push(c.clone());
            }
        }
        if cfg.disjoint_siblings {
            for kids in children.values() {
                for i in 0..kids.len() {
                    for j in i + 1..kids.len() {
                        disjoint.push((kids[i].clone(), kids[j].clone()));
                    }
                }
            }
        }
        let leaves: Vec<ClassId> = t.iter().filter(|x| x.2 == depth).map(|x| x.0.clone()).collect();
        let rel = annotation_relation(&cfg.gene_domain, domain);
        relations.insert(rel.clone());
        for g in &genes {
            let leaf = leaves[rng.gen_range(0..leaves.len())].clone();
            edges.push(Edge::new(g.clone(), rel.clone(), leaf.clone()));
            leaf_of.entry(g).or_default().push(leaf);
        }
    }
    let graph = KnowledgeGraph::from_parts(nodes, relations, edges, hierarchy, disjoint)?;
    let mut triples = Vec::new();
    for i in 0..genes.len() {
        for j in i + 1..genes.len() {
            if cfg.pair_fraction < 1.0 && rng.gen::<f64>() >= cfg.pair_fraction {
                continue;
            }
            let (a, b) = (&genes[i], &genes[j]);
            let penalty: f64 = cfg
                .ontology_domains
                .iter()
                .zip(leaf_of[a].iter().zip(&leaf_of[b]))
                .map(|(d, (x, y))| cfg.level_weights[shared_depth(d, x, y)])
                .sum();
            triples.push((a.clone(), b.clone(), 1.0 - penalty));
        }
    }
    let fitness = FitnessDataset::new(&graph, &cfg.gene_domain, triples)?;
    Ok(Synthetic {
        graph,
        fitness,
        gene_domain: cfg.gene_domain.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{ancestors, parse_fitness, parse_graph};

    #[test]
    fn shape_of_default_graph() {
        let s = generate(&SyntheticConfig::default(), 1).unwrap();
        let g = &s.graph;
        assert_eq!(g.domain_classes("function").len(), 13);
        assert_eq!(g.domain_classes("gene").len(), 150);
        assert_eq!(g.hierarchy("process").count(), 12);
        assert_eq!(g.disjoint("function").count(), 3 + 3 * 3);
        assert_eq!(g.edges().len(), 300);
        assert_eq!(s.fitness.len(), 150 * 149 / 2);
    }

    #[test]
    fn fitness_matches_shared_ancestors() {
        let s = generate(&SyntheticConfig::default(), 2).unwrap();
        let g = &s.graph;
        let leaf = |gene: &ClassId, d: &str| {
            g.edges()
                .iter()
                .find(|e| &e.subject == gene && e.relation.target_domain == d)
                .unwrap()
                .object
                .clone()
        };
        for r in s.fitness.records.iter().take(300) {
            let mut expected = 1.0;
            for d in ["function", "process"] {
                let (la, lb) = (leaf(&r.gene_a, d), leaf(&r.gene_b, d));
                let shared = ancestors(g, &la).unwrap().intersection(&ancestors(g, &lb).unwrap()).count();
                expected -= [0.0, 0.0, 0.15, 0.3][shared];
            }
            assert!((r.fitness - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn text_round_trip_and_determinism() {
        let cfg = SyntheticConfig::default();
        let a = generate(&cfg, 5).unwrap();
        let b = generate(&cfg, 5).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.fitness, b.fitness);
        let g = parse_graph(&a.graph.to_axiom_text(), &a.graph.to_domain_text()).unwrap();
        assert_eq!(g, a.graph);
        assert_eq!(parse_fitness(&a.fitness.to_text(), &g, "gene").unwrap(), a.fitness);
        assert_ne!(generate(&cfg, 6).unwrap().fitness, a.fitness);
    }

    #[test]
    fn rejects_bad_weights() {
        let cfg = SyntheticConfig {
            level_weights: vec![0.0, 0.6, 0.7],
            ..SyntheticConfig::default()
        };
        assert!(matches!(generate(&cfg, 0), Err(Error::Config { .. })));
    }
}
