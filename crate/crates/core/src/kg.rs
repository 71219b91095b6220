//! TBox-style knowledge graph: typed nodes partitioned into domains, typed
//! directed edges, per-domain subclass hierarchies and disjointness axioms.
//!
//! Class assertions `C(a)` are expected to already be rewritten as nominal
//! subsumptions `{a} ⊑ C`, and role assertions `r(a, b)` as `{a} ⊑ ∃r.{b}`,
//! so every fact is one of three axiom shapes: `A ⊑ B`, `A ⊓ B ⊑ ⊥` and
//! `A ⊑ ∃r.B`. The first two form the hierarchy, the third the edge set.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUBCLASS_OF: &str = "subClassOf";
pub const DISJOINT_WITH: &str = "disjointWith";
pub const REVERSE_SUFFIX: &str = "_rev";

/// Ontology class or nominal identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(String);

impl ClassId {
    pub fn new(id: impl Into<String>) -> Self {
        ClassId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        ClassId(s.to_string())
    }
}

/// A typed relation: `(name, source_domain, target_domain)` is the identity.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId {
    pub name: String,
    pub source_domain: String,
    pub target_domain: String,
}

impl RelationId {
    pub fn new(
        name: impl Into<String>,
        source_domain: impl Into<String>,
        target_domain: impl Into<String>,
    ) -> Self {
        RelationId {
            name: name.into(),
            source_domain: source_domain.into(),
            target_domain: target_domain.into(),
        }
    }

    pub fn is_reverse(&self) -> bool {
        self.name.ends_with(REVERSE_SUFFIX)
    }

    /// The relation traversed in the opposite direction. Reversing a `_rev`
    /// relation yields its base relation, so reversal is an involution.
    pub fn reversed(&self) -> RelationId {
        let name = match self.name.strip_suffix(REVERSE_SUFFIX) {
            Some(base) => base.to_string(),
            None => format!("{}{}", self.name, REVERSE_SUFFIX),
        };
        RelationId {
            name,
            source_domain: self.target_domain.clone(),
            target_domain: self.source_domain.clone(),
        }
    }

    /// Stable key used for parameter names and report rows.
    pub fn key(&self) -> String {
        format!("{}:{}:{}", self.source_domain, self.name, self.target_domain)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub subject: ClassId,
    pub relation: RelationId,
    pub object: ClassId,
}

impl Edge {
    pub fn new(subject: ClassId, relation: RelationId, object: ClassId) -> Self {
        Edge {
            subject,
            relation,
            object,
        }
    }

    pub fn reversed(&self) -> Edge {
        Edge {
            subject: self.object.clone(),
            relation: self.relation.reversed(),
            object: self.subject.clone(),
        }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.subject, self.relation.name, self.object)
    }
}

fn unordered(a: ClassId, b: ClassId) -> (ClassId, ClassId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Immutable knowledge graph. All collections are ordered so iteration (and
/// therefore every downstream computation) is deterministic.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct KnowledgeGraph {
    nodes: BTreeMap<ClassId, String>,
    relations: BTreeSet<RelationId>,
    edges: BTreeSet<Edge>,
    hierarchy: BTreeMap<String, BTreeSet<(ClassId, ClassId)>>,
    disjoint: BTreeMap<String, BTreeSet<(ClassId, ClassId)>>,
    domain_classes: BTreeMap<String, Vec<ClassId>>,
    supers: BTreeMap<ClassId, Vec<ClassId>>,
}

impl KnowledgeGraph {
    /// Builds and validates a graph from its raw parts.
    pub fn from_parts(
        nodes: BTreeMap<ClassId, String>,
        relations: BTreeSet<RelationId>,
        edges: impl IntoIterator<Item = Edge>,
        hierarchy: impl IntoIterator<Item = (ClassId, ClassId)>,
        disjoint: impl IntoIterator<Item = (ClassId, ClassId)>,
    ) -> Result<Self> {
        let mut g = KnowledgeGraph {
            nodes,
            relations,
            ..Default::default()
        };
        for edge in edges {
            g.check_edge(&edge)?;
            g.edges.insert(edge);
        }
        for (sub, sup) in hierarchy {
            let domain = g.same_domain(&sub, &sup, SUBCLASS_OF)?;
            g.hierarchy.entry(domain).or_default().insert((sub, sup));
        }
        for (a, b) in disjoint {
            if a == b {
                return Err(Error::data(format!("class {a} declared disjoint with itself")));
            }
            let domain = g.same_domain(&a, &b, DISJOINT_WITH)?;
            g.disjoint.entry(domain).or_default().insert(unordered(a, b));
        }
        g.reindex();
        g.check_acyclic()?;
        Ok(g)
    }

    fn reindex(&mut self) {
        self.domain_classes.clear();
        for (class, domain) in &self.nodes {
            self.domain_classes
                .entry(domain.clone())
                .or_default()
                .push(class.clone());
        }
        self.supers.clear();
        for pairs in self.hierarchy.values() {
            for (sub, sup) in pairs {
                self.supers.entry(sub.clone()).or_default().push(sup.clone());
            }
        }
    }

    fn domain_or_err(&self, c: &ClassId) -> Result<&str> {
        self.nodes
            .get(c)
            .map(String::as_str)
            .ok_or_else(|| Error::data(format!("undeclared class {c}")))
    }

    fn same_domain(&self, a: &ClassId, b: &ClassId, what: &str) -> Result<String> {
        let da = self.domain_or_err(a)?;
        let db = self.domain_or_err(b)?;
        if da != db {
            return Err(Error::data(format!(
                "cross-domain {what} pair ({a} in {da}, {b} in {db})"
            )));
        }
        Ok(da.to_string())
    }

    fn check_edge(&self, e: &Edge) -> Result<()> {
        let ds = self.domain_or_err(&e.subject)?;
        let dobj = self.domain_or_err(&e.object)?;
        if !self.relations.contains(&e.relation) {
            return Err(Error::data(format!(
                "undeclared relation {} ({} -> {})",
                e.relation.name, e.relation.source_domain, e.relation.target_domain
            )));
        }
        if ds != e.relation.source_domain || dobj != e.relation.target_domain {
            return Err(Error::data(format!(
                "edge {e} does not respect relation domains {} -> {}",
                e.relation.source_domain, e.relation.target_domain
            )));
        }
        Ok(())
    }

    fn check_acyclic(&self) -> Result<()> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state: BTreeMap<&ClassId, u8> = BTreeMap::new();
        for start in self.supers.keys() {
            if state.get(start).copied().unwrap_or(0) != 0 {
                continue;
            }
            let mut stack: Vec<(&ClassId, usize)> = vec![(start, 0)];
            state.insert(start, 1);
            while let Some((node, next)) = stack.pop() {
                let parents = self.supers.get(node).map(Vec::as_slice).unwrap_or(&[]);
                if next < parents.len() {
                    stack.push((node, next + 1));
                    let p = &parents[next];
                    match state.get(p).copied().unwrap_or(0) {
                        0 => {
                            state.insert(p, 1);
                            stack.push((p, 0));
                        }
                        1 => {
                            return Err(Error::data(format!(
                                "hierarchy cycle through {p} (reached from {node})"
                            )))
                        }
                        _ => {}
                    }
                } else {
                    state.insert(node, 2);
                }
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &BTreeMap<ClassId, String> {
        &self.nodes
    }

    pub fn contains(&self, c: &ClassId) -> bool {
        self.nodes.contains_key(c)
    }

    pub fn domain_of(&self, c: &ClassId) -> Option<&str> {
        self.nodes.get(c).map(String::as_str)
    }

    /// Domain names in sorted order, including domains with no hierarchy.
    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domain_classes.keys().map(String::as_str)
    }

    /// Classes of a domain in sorted order. Row `i` of every per-domain
    /// feature matrix corresponds to `domain_classes(d)[i]`.
    pub fn domain_classes(&self, domain: &str) -> &[ClassId] {
        self.domain_classes
            .get(domain)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn declared_relations(&self) -> &BTreeSet<RelationId> {
        &self.relations
    }

    /// Relations that carry at least one edge.
    pub fn active_relations(&self) -> BTreeSet<RelationId> {
        self.edges.iter().map(|e| e.relation.clone()).collect()
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn contains_edge(&self, e: &Edge) -> bool {
        self.edges.contains(e)
    }

    pub fn hierarchy(&self, domain: &str) -> impl Iterator<Item = &(ClassId, ClassId)> {
        self.hierarchy.get(domain).into_iter().flatten()
    }

    pub fn hierarchy_len(&self) -> usize {
        self.hierarchy.values().map(BTreeSet::len).sum()
    }

    pub fn disjoint(&self, domain: &str) -> impl Iterator<Item = &(ClassId, ClassId)> {
        self.disjoint.get(domain).into_iter().flatten()
    }

    pub fn direct_supers(&self, c: &ClassId) -> &[ClassId] {
        self.supers.get(c).map(Vec::as_slice).unwrap_or(&[])
    }

    /// A copy of this graph with an extra set of edges. Edges already
    /// present are absorbed by set semantics.
    pub fn with_edges(&self, extra: impl IntoIterator<Item = Edge>) -> Result<KnowledgeGraph> {
        let mut g = self.clone();
        for e in extra {
            if !g.relations.contains(&e.relation) {
                g.relations.insert(e.relation.clone());
            }
            g.check_edge(&e)?;
            g.edges.insert(e);
        }
        Ok(g)
    }

    /// A copy of this graph with only the edges accepted by `keep`.
    pub fn retain_edges(&self, mut keep: impl FnMut(&Edge) -> bool) -> KnowledgeGraph {
        let mut g = self.clone();
        g.edges.retain(|e| keep(e));
        g
    }

    /// Serializes to the axiom-file format. `parse_graph` on the output of
    /// `to_axiom_text` and `to_domain_text` reproduces this graph.
    pub fn to_axiom_text(&self) -> String {
        let mut out = String::new();
        for pairs in self.hierarchy.values() {
            for (sub, sup) in pairs {
                out.push_str(&format!("{sub}\t{SUBCLASS_OF}\t{sup}\n"));
            }
        }
        for pairs in self.disjoint.values() {
            for (a, b) in pairs {
                out.push_str(&format!("{a}\t{DISJOINT_WITH}\t{b}\n"));
            }
        }
        for e in &self.edges {
            out.push_str(&format!("{}\t{}\t{}\n", e.subject, e.relation.name, e.object));
        }
        out
    }

    pub fn to_domain_text(&self) -> String {
        let mut out = String::new();
        for (class, domain) in &self.nodes {
            out.push_str(&format!("{class}\t{domain}\n"));
        }
        for r in &self.relations {
            out.push_str(&format!(
                "@rel\t{}\t{}\t{}\n",
                r.name, r.source_domain, r.target_domain
            ));
        }
        out
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            None
        } else {
            Some((i + 1, line))
        }
    })
}

fn parse_err(source_name: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source_name.to_string(),
        line,
        message: message.into(),
    }
}

/// Parses the axiom and domain files into a validated graph.
///
/// Errors carry the offending line number for malformed lines, undeclared
/// classes and relations, and cross-domain hierarchy pairs. Hierarchy cycles
/// are reported as data errors after the whole file is read.
pub fn parse_graph(axiom_text: &str, domain_text: &str) -> Result<KnowledgeGraph> {
    let mut nodes = BTreeMap::new();
    let mut relations = BTreeSet::new();
    for (ln, line) in content_lines(domain_text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields[0] == "@rel" {
            if fields.len() != 4 || fields[1..].iter().any(|f| f.is_empty()) {
                return Err(parse_err(
                    "domains",
                    ln,
                    "expected `@rel<TAB>name<TAB>source_domain<TAB>target_domain`",
                ));
            }
            let name = fields[1];
            if name == SUBCLASS_OF || name == DISJOINT_WITH {
                return Err(parse_err("domains", ln, format!("`{name}` is a reserved predicate")));
            }
            relations.insert(RelationId::new(name, fields[2], fields[3]));
        } else {
            if fields.len() != 2 || fields.iter().any(|f| f.is_empty()) {
                return Err(parse_err("domains", ln, "expected `class<TAB>domain`"));
            }
            let class = ClassId::new(fields[0]);
            if let Some(prev) = nodes.insert(class.clone(), fields[1].to_string()) {
                if prev != fields[1] {
                    return Err(parse_err(
                        "domains",
                        ln,
                        format!("class {class} declared in both {prev} and {}", fields[1]),
                    ));
                }
            }
        }
    }
    let domains: BTreeSet<&String> = nodes.values().collect();
    for r in &relations {
        for d in [&r.source_domain, &r.target_domain] {
            if !domains.contains(d) {
                return Err(Error::data(format!(
                    "relation {} references domain {d} with no classes",
                    r.name
                )));
            }
        }
    }

    let mut edges = Vec::new();
    let mut hierarchy = Vec::new();
    let mut disjoint = Vec::new();
    for (ln, line) in content_lines(axiom_text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(parse_err("axioms", ln, "expected `subject<TAB>predicate<TAB>object`"));
        }
        let (s, p, o) = (ClassId::new(fields[0]), fields[1], ClassId::new(fields[2]));
        let ds = nodes
            .get(&s)
            .ok_or_else(|| parse_err("axioms", ln, format!("undeclared class {s}")))?;
        let dobj = nodes
            .get(&o)
            .ok_or_else(|| parse_err("axioms", ln, format!("undeclared class {o}")))?;
        match p {
            SUBCLASS_OF | DISJOINT_WITH => {
                if ds != dobj {
                    return Err(parse_err(
                        "axioms",
                        ln,
                        format!("cross-domain {p} pair ({s} in {ds}, {o} in {dobj})"),
                    ));
                }
                if p == SUBCLASS_OF {
                    hierarchy.push((s, o));
                } else {
                    if s == o {
                        return Err(parse_err("axioms", ln, format!("{s} disjoint with itself")));
                    }
                    disjoint.push((s, o));
                }
            }
            name => {
                let rel = RelationId::new(name, ds.as_str(), dobj.as_str());
                if !relations.contains(&rel) {
                    return Err(parse_err(
                        "axioms",
                        ln,
                        format!("undeclared relation {name} ({ds} -> {dobj})"),
                    ));
                }
                edges.push(Edge::new(s, rel, o));
            }
        }
    }
    KnowledgeGraph::from_parts(nodes, relations, edges, hierarchy, disjoint)
}

/// Adds `(o, r_rev, s)` for every edge `(s, r, o)`. Idempotent.
pub fn add_reverse_edges(g: &KnowledgeGraph) -> KnowledgeGraph {
    let mut out = g.clone();
    for e in &g.edges {
        let rev = e.reversed();
        out.relations.insert(rev.relation.clone());
        out.edges.insert(rev);
    }
    out
}

/// Drops every edge whose relation occurs fewer than `min_count` times.
/// Counts are taken per relation id, so a base relation and its reverse are
/// counted separately. Nodes, hierarchy and relation declarations are kept.
pub fn filter_rare_relations(g: &KnowledgeGraph, min_count: usize) -> KnowledgeGraph {
    let mut counts: BTreeMap<&RelationId, usize> = BTreeMap::new();
    for e in &g.edges {
        *counts.entry(&e.relation).or_default() += 1;
    }
    let keep: BTreeSet<RelationId> = counts
        .into_iter()
        .filter(|(_, n)| *n >= min_count)
        .map(|(r, _)| r.clone())
        .collect();
    g.retain_edges(|e| keep.contains(&e.relation))
}

/// Reflexive-transitive closure of the subclass relation starting at `c`.
pub fn ancestors(g: &KnowledgeGraph, c: &ClassId) -> Result<BTreeSet<ClassId>> {
    if !g.contains(c) {
        return Err(Error::data(format!("undeclared class {c}")));
    }
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([c.clone()]);
    while let Some(x) = queue.pop_front() {
        if seen.insert(x.clone()) {
            for p in g.direct_supers(&x) {
                if !seen.contains(p) {
                    queue.push_back(p.clone());
                }
            }
        }
    }
    Ok(seen)
}

/// Classes of `c`'s domain that are not ancestors of `c`.
pub fn negative_candidates(g: &KnowledgeGraph, c: &ClassId) -> Result<Vec<ClassId>> {
    let anc = ancestors(g, c)?;
    let domain = g.domain_of(c).expect("checked by ancestors");
    Ok(g.domain_classes(domain)
        .iter()
        .filter(|x| !anc.contains(*x))
        .cloned()
        .collect())
}

/// Number of negatives drawn per positive example for a fractional ratio.
pub fn negatives_per_positive(ratio: f64) -> usize {
    ratio.round().max(0.0) as usize
}

/// Draws `round(ratio)` classes (with replacement) from `c`'s domain that are
/// not ancestors of `c`.
pub fn sample_negatives(
    g: &KnowledgeGraph,
    c: &ClassId,
    ratio: f64,
    rng_seed: u64,
) -> Result<Vec<ClassId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_negatives_with(g, c, ratio, &mut rng)
}

pub fn sample_negatives_with<R: Rng + ?Sized>(
    g: &KnowledgeGraph,
    c: &ClassId,
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<ClassId>> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::data(format!("negative ratio must be positive, got {ratio}")));
    }
    let pool = negative_candidates(g, c)?;
    if pool.is_empty() {
        return Err(Error::data(format!(
            "domain of {c} has no class outside its ancestors to sample"
        )));
    }
    Ok((0..negatives_per_positive(ratio))
        .map(|_| pool[rng.gen_range(0..pool.len())].clone())
        .collect())
}

/// Cached negative pools for repeated per-epoch sampling.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    pools: BTreeMap<ClassId, Vec<ClassId>>,
}

impl NegativeSampler {
    pub fn new(g: &KnowledgeGraph, domain: &str) -> Self {
        let pools = g
            .domain_classes(domain)
            .iter()
            .map(|c| (c.clone(), negative_candidates(g, c).expect("class is declared")))
            .collect();
        NegativeSampler { pools }
    }

    /// Like [`NegativeSampler::new`] but also leaves out the descendants of
    /// each class, which overlap it by construction.
    pub fn unrelated(g: &KnowledgeGraph, domain: &str) -> Self {
        let classes = g.domain_classes(domain);
        let anc: BTreeMap<&ClassId, BTreeSet<ClassId>> = classes
            .iter()
            .map(|c| (c, ancestors(g, c).expect("class is declared")))
            .collect();
        let pools = classes
            .iter()
            .map(|c| {
                let pool = classes
                    .iter()
                    .filter(|x| !anc[c].contains(*x) && !anc[*x].contains(c))
                    .cloned()
                    .collect();
                (c.clone(), pool)
            })
            .collect();
        NegativeSampler { pools }
    }

    /// `count` negatives for `c`; empty when `c` has no eligible negatives.
    pub fn sample<R: Rng + ?Sized>(&self, c: &ClassId, count: usize, rng: &mut R) -> Vec<ClassId> {
        match self.pools.get(c) {
            Some(pool) if !pool.is_empty() => (0..count)
                .map(|_| pool[rng.gen_range(0..pool.len())].clone())
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Declares pairwise disjointness among the direct children of each root in
/// `domain`, and between each child and every descendant of its siblings.
pub fn augment_sibling_disjointness(g: &KnowledgeGraph, domain: &str) -> Result<KnowledgeGraph> {
    let mut children: BTreeMap<&ClassId, Vec<&ClassId>> = BTreeMap::new();
    for (sub, sup) in g.hierarchy(domain) {
        children.entry(sup).or_default().push(sub);
    }
    let descendants = |c: &ClassId| -> BTreeSet<ClassId> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![c];
        while let Some(x) = stack.pop() {
            for ch in children.get(x).into_iter().flatten() {
                if seen.insert((*ch).clone()) {
                    stack.push(ch);
                }
            }
        }
        seen
    };
    let roots: Vec<&ClassId> = g
        .domain_classes(domain)
        .iter()
        .filter(|c| g.direct_supers(c).is_empty())
        .collect();
    let mut extra = Vec::new();
    for root in roots {
        let kids = children.get(root).cloned().unwrap_or_default();
        for a in &kids {
            for b in &kids {
                if a == b {
                    continue;
                }
                extra.push(((*a).clone(), (*b).clone()));
                for d in descendants(b) {
                    if &d != *a {
                        extra.push(((*a).clone(), d));
                    }
                }
            }
        }
    }
    let mut out = g.clone();
    for (a, b) in extra {
        // Skip pairs that would contradict the hierarchy (a is an ancestor of b or vice versa).
        if ancestors(g, &a)?.contains(&b) || ancestors(g, &b)?.contains(&a) {
            continue;
        }
        out.disjoint
            .entry(domain.to_string())
            .or_default()
            .insert(unordered(a, b));
    }
    Ok(out)
}

/// Splits base-relation edges into train and test sets, stratified by
/// relation: each relation contributes `round(test_fraction * n)` test edges.
/// Reverse-relation edges are not split; callers add reverses afterwards.
pub fn split_edges_stratified(
    g: &KnowledgeGraph,
    test_fraction: f64,
    rng_seed: u64,
) -> Result<(KnowledgeGraph, Vec<Edge>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config(
            "link_eval.test_fraction",
            format!("must be in [0, 1), got {test_fraction}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut by_rel: BTreeMap<&RelationId, Vec<&Edge>> = BTreeMap::new();
    for e in g.edges.iter().filter(|e| !e.relation.is_reverse()) {
        by_rel.entry(&e.relation).or_default().push(e);
    }
    let mut test = BTreeSet::new();
    for edges in by_rel.values_mut() {
        edges.shuffle(&mut rng);
        let n_test = (test_fraction * edges.len() as f64).round() as usize;
        test.extend(edges.iter().take(n_test).map(|e| (*e).clone()));
    }
    let train = g.retain_edges(|e| !test.contains(e));
    Ok((train, test.into_iter().collect()))
}

/// One double-deletion measurement. `gene_a < gene_b` lexicographically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub gene_a: ClassId,
    pub gene_b: ClassId,
    pub fitness: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FitnessDataset {
    pub records: Vec<FitnessRecord>,
}

impl FitnessDataset {
    /// Builds a dataset from raw triples, canonicalizing pair order and
    /// validating genes against `gene_domain`.
    pub fn new(
        g: &KnowledgeGraph,
        gene_domain: &str,
        triples: impl IntoIterator<Item = (ClassId, ClassId, f64)>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut records = Vec::new();
        for (a, b, y) in triples {
            if a == b {
                return Err(Error::data(format!("fitness pair ({a}, {a}) repeats a gene")));
            }
            for gene in [&a, &b] {
                match g.domain_of(gene) {
                    Some(d) if d == gene_domain => {}
                    Some(d) => {
                        return Err(Error::data(format!(
                            "{gene} is in domain {d}, not the gene domain {gene_domain}"
                        )))
                    }
                    None => return Err(Error::data(format!("unknown gene {gene}"))),
                }
            }
            if !y.is_finite() || y < 0.0 {
                return Err(Error::data(format!(
                    "fitness for ({a}, {b}) must be finite and non-negative, got {y}"
                )));
            }
            let (a, b) = unordered(a, b);
            if !seen.insert((a.clone(), b.clone())) {
                return Err(Error::data(format!("duplicate fitness pair ({a}, {b})")));
            }
            records.push(FitnessRecord {
                gene_a: a,
                gene_b: b,
                fitness: y,
            });
        }
        Ok(FitnessDataset { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn genes(&self) -> BTreeSet<ClassId> {
        self.records
            .iter()
            .flat_map(|r| [r.gene_a.clone(), r.gene_b.clone()])
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.gene_a, r.gene_b, r.fitness))
            .collect()
    }
}

/// Parses `gene_a<TAB>gene_b<TAB>fitness` lines.
pub fn parse_fitness(text: &str, g: &KnowledgeGraph, gene_domain: &str) -> Result<FitnessDataset> {
    let mut triples = Vec::new();
    for (ln, line) in content_lines(text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err("fitness", ln, "expected `gene_a<TAB>gene_b<TAB>fitness`"));
        }
        let y: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err("fitness", ln, format!("bad fitness literal `{}`", fields[2])))?;
        triples.push((ClassId::new(fields[0]), ClassId::new(fields[1]), y));
    }
    FitnessDataset::new(g, gene_domain, triples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneFold {
    pub train_genes: BTreeSet<ClassId>,
    pub valid_genes: BTreeSet<ClassId>,
    pub train: FitnessDataset,
    pub valid: FitnessDataset,
}

/// Train/validation split for a fixed set of validation genes. Pairs with
/// one gene on each side are discarded.
pub fn split_for_validation_genes(d: &FitnessDataset, valid_genes: &BTreeSet<ClassId>) -> GeneFold {
    let all = d.genes();
    let train_genes: BTreeSet<ClassId> = all.difference(valid_genes).cloned().collect();
    let mut train = FitnessDataset::default();
    let mut valid = FitnessDataset::default();
    for r in &d.records {
        let va = valid_genes.contains(&r.gene_a);
        let vb = valid_genes.contains(&r.gene_b);
        match (va, vb) {
            (false, false) => train.records.push(r.clone()),
            (true, true) => valid.records.push(r.clone()),
            _ => {}
        }
    }
    GeneFold {
        train_genes,
        valid_genes: valid_genes.intersection(&all).cloned().collect(),
        train,
        valid,
    }
}

/// Gene-based k-fold cross-validation: genes are shuffled with the seed and
/// dealt round-robin into `folds` disjoint groups; fold `k` validates on
/// group `k`.
pub fn split_by_genes(d: &FitnessDataset, folds: usize, rng_seed: u64) -> Result<Vec<GeneFold>> {
    if folds < 2 {
        return Err(Error::config("fitness.folds", format!("need at least 2 folds, got {folds}")));
    }
    if d.is_empty() {
        return Err(Error::data("fitness dataset is empty"));
    }
    let mut genes: Vec<ClassId> = d.genes().into_iter().collect();
    if genes.len() < folds {
        return Err(Error::data(format!(
            "{} genes cannot be split into {folds} folds",
            genes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    genes.shuffle(&mut rng);
    let mut groups = vec![BTreeSet::new(); folds];
    for (i, gene) in genes.into_iter().enumerate() {
        groups[i % folds].insert(gene);
    }
    Ok(groups
        .iter()
        .map(|valid| split_for_validation_genes(d, valid))
        .collect())
}
