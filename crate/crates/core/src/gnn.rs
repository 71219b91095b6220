//! Heterogeneous GraphSAGE-style message passing. Every relation type has
//! its own module per layer; neighbours are max-aggregated and the outputs of
//! a node's relation modules are mean-combined. Layer outputs are read as box
//! latents (first half lower corners, second half width parameters).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, ParamSet, Tape, Tensor, Var};
use crate::boxes::{make_box, AxisBox, BoxLatent};
use crate::error::{Error, Result};
use crate::kg::{ClassId, Edge, KnowledgeGraph, RelationId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GnnConfig {
    /// Number of message-passing layers.
    pub depth: usize,
    /// Prior box dimension per domain (prior latents have twice this width).
    pub prior_dim: BTreeMap<String, usize>,
    /// Latent width of every message-passing layer per domain; must be even.
    pub hidden_dim: BTreeMap<String, usize>,
}

impl GnnConfig {
    pub fn validate(&self, g: &KnowledgeGraph) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("gnn.depth", "must be >= 1"));
        }
        for d in g.domains() {
            match self.prior_dim.get(d) {
                Some(&k) if k > 0 => {}
                Some(_) => return Err(Error::config(format!("gnn.prior_dim.{d}"), "must be >= 1")),
                None => return Err(Error::config(format!("gnn.prior_dim.{d}"), "missing")),
            }
            match self.hidden_dim.get(d) {
                Some(&k) if k > 0 && k % 2 == 0 => {}
                Some(k) => {
                    return Err(Error::config(
                        format!("gnn.hidden_dim.{d}"),
                        format!("must be even and >= 2, got {k}"),
                    ))
                }
                None => return Err(Error::config(format!("gnn.hidden_dim.{d}"), "missing")),
            }
        }
        let known: Vec<&str> = g.domains().collect();
        for key in self.prior_dim.keys().chain(self.hidden_dim.keys()) {
            if !known.contains(&key.as_str()) {
                return Err(Error::config(
                    format!("gnn.*_dim.{key}"),
                    "names a domain that is not in the graph",
                ));
            }
        }
        Ok(())
    }

    /// Latent width of `domain` at `layer` (layer 0 = priors).
    pub fn width(&self, domain: &str, layer: usize) -> usize {
        if layer == 0 {
            2 * self.prior_dim[domain]
        } else {
            self.hidden_dim[domain]
        }
    }
}

pub fn prior_name(domain: &str) -> String {
    format!("prior/{domain}")
}

fn rel_prefix(layer: usize, r: &RelationId) -> String {
    format!("gnn/{layer}/{}", r.key())
}

fn self_prefix(layer: usize, domain: &str) -> String {
    format!("gnn/{layer}/self/{domain}")
}

/// Uniform fan-based (Glorot) initialization.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("non-zero dims")
}

/// Prior latents: lower corners in `[-1, 1]`, width parameters in `[-1, 0]`.
pub fn init_prior(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * 2 * dim);
    for _ in 0..n {
        data.extend((0..dim).map(|_| rng.gen_range(-1.0..1.0)));
        data.extend((0..dim).map(|_| rng.gen_range(-1.0..0.0)));
    }
    Tensor::matrix(n, 2 * dim, data).expect("non-zero dims")
}

/// Model structure plus all parameters (priors and per-layer modules).
///
/// Weight matrices are stored input-major (`[d_in, d_out]`) so a layer is a
/// plain right multiplication of the feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGnn {
    config: GnnConfig,
    relations: Vec<RelationId>,
    domains: BTreeMap<String, usize>,
    params: ParamSet,
}

impl HeteroGnn {
    /// Builds modules for every relation with at least one edge in `g`.
    pub fn new(g: &KnowledgeGraph, config: GnnConfig, seed: u64) -> Result<Self> {
        config.validate(g)?;
        let relations: Vec<RelationId> = g.active_relations().into_iter().collect();
        let domains: BTreeMap<String, usize> = g
            .domains()
            .map(|d| (d.to_string(), g.domain_classes(d).len()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (d, &n) in &domains {
            params.insert(prior_name(d), init_prior(&mut rng, n, config.prior_dim[d]));
        }
        for layer in 1..=config.depth {
            for r in &relations {
                let p = rel_prefix(layer, r);
                let out = config.width(&r.target_domain, layer);
                let in_t = config.width(&r.target_domain, layer - 1);
                let in_s = config.width(&r.source_domain, layer - 1);
                params.insert(format!("{p}/w_self"), glorot(&mut rng, in_t, out));
                params.insert(format!("{p}/w_neigh"), glorot(&mut rng, in_s, out));
                params.insert(format!("{p}/bias"), Tensor::zeros(&[out]));
            }
            for d in domains.keys() {
                if !relations.iter().any(|r| &r.target_domain == d) {
                    let p = self_prefix(layer, d);
                    let (i, o) = (config.width(d, layer - 1), config.width(d, layer));
                    params.insert(format!("{p}/w"), glorot(&mut rng, i, o));
                    params.insert(format!("{p}/bias"), Tensor::zeros(&[o]));
                }
            }
        }
        Ok(HeteroGnn {
            config,
            relations,
            domains,
            params,
        })
    }

    /// Reassembles a model from stored parts, checking every shape.
    pub fn from_parts(
        g: &KnowledgeGraph,
        config: GnnConfig,
        relations: Vec<RelationId>,
        params: ParamSet,
    ) -> Result<Self> {
        config.validate(g)?;
        let domains: BTreeMap<String, usize> = g
            .domains()
            .map(|d| (d.to_string(), g.domain_classes(d).len()))
            .collect();
        for r in &relations {
            if !domains.contains_key(&r.source_domain) || !domains.contains_key(&r.target_domain) {
                return Err(Error::data(format!("relation {} references an unknown domain", r.key())));
            }
        }
        let model = HeteroGnn {
            config,
            relations,
            domains,
            params,
        };
        let wanted = model.expected_shapes();
        if wanted.len() != model.params.len() {
            return Err(Error::data(format!(
                "model expects {} parameter tensors, found {}",
                wanted.len(),
                model.params.len()
            )));
        }
        for (name, shape) in &wanted {
            let got = model.params.get(name)?;
            if got.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter {name}: expected {shape:?}, got {:?}",
                    got.shape()
                )));
            }
        }
        Ok(model)
    }

    fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let c = &self.config;
        let mut out = BTreeMap::new();
        for (d, &n) in &self.domains {
            out.insert(prior_name(d), vec![n, c.width(d, 0)]);
        }
        for layer in 1..=c.depth {
            for r in &self.relations {
                let p = rel_prefix(layer, r);
                let o = c.width(&r.target_domain, layer);
                out.insert(format!("{p}/w_self"), vec![c.width(&r.target_domain, layer - 1), o]);
                out.insert(format!("{p}/w_neigh"), vec![c.width(&r.source_domain, layer - 1), o]);
                out.insert(format!("{p}/bias"), vec![o]);
            }
            for d in self.domains.keys() {
                if self.targeting(d).is_empty() {
                    let p = self_prefix(layer, d);
                    let o = c.width(d, layer);
                    out.insert(format!("{p}/w"), vec![c.width(d, layer - 1), o]);
                    out.insert(format!("{p}/bias"), vec![o]);
                }
            }
        }
        out
    }

    pub fn config(&self) -> &GnnConfig {
        &self.config
    }

    pub fn relations(&self) -> &[RelationId] {
        &self.relations
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    fn targeting(&self, domain: &str) -> Vec<&RelationId> {
        self.relations
            .iter()
            .filter(|r| r.target_domain == domain)
            .collect()
    }

    /// Message-passing structure of `g` under this model.
    pub fn index(&self, g: &KnowledgeGraph) -> Result<GraphIndex> {
        for (d, &n) in &self.domains {
            if g.domain_classes(d).len() != n {
                return Err(Error::shape(format!(
                    "domain {d}: model has {n} classes, graph has {}",
                    g.domain_classes(d).len()
                )));
            }
        }
        let pos: BTreeMap<&ClassId, usize> = g
            .domains()
            .flat_map(|d| g.domain_classes(d).iter().enumerate().map(|(i, c)| (c, i)))
            .collect();
        let mut groups: BTreeMap<RelationId, Vec<Vec<usize>>> = self
            .relations
            .iter()
            .map(|r| (r.clone(), vec![Vec::new(); self.domains[&r.target_domain]]))
            .collect();
        for e in g.edges() {
            let gr = groups.get_mut(&e.relation).ok_or_else(|| {
                Error::data(format!("no module for relation {}", e.relation.key()))
            })?;
            gr[pos[&e.object]].push(pos[&e.subject]);
        }
        let mut coef = BTreeMap::new();
        for (d, &n) in &self.domains {
            let rels = self.targeting(d);
            if rels.is_empty() {
                continue;
            }
            let counts: Vec<usize> = (0..n)
                .map(|v| rels.iter().filter(|r| !groups[*r][v].is_empty()).count())
                .collect();
            for r in rels {
                let c: Vec<f64> = (0..n)
                    .map(|v| match counts[v] {
                        0 => 1.0 / self.targeting(d).len() as f64,
                        k if !groups[r][v].is_empty() => 1.0 / k as f64,
                        _ => 0.0,
                    })
                    .collect();
                coef.insert(r.clone(), c);
            }
        }
        let classes = g
            .domains()
            .map(|d| (d.to_string(), g.domain_classes(d).to_vec()))
            .collect();
        Ok(GraphIndex {
            groups,
            coef,
            classes,
        })
    }

    /// Forward pass on a tape. Returns latents for layers `0..=depth`.
    ///
    /// Every first-layer message into a node listed in `probes` reads its
    /// source features from a fresh leaf instead of the shared feature
    /// matrix, so gradients with respect to individual edge messages can be
    /// read off. Probe leaves are returned with their edges.
    pub fn forward(
        &self,
        t: &mut Tape,
        bound: &BoundParams,
        idx: &GraphIndex,
        probes: &[(String, usize)],
    ) -> Result<Forward> {
        let mut layers = Vec::with_capacity(self.config.depth + 1);
        let mut h: BTreeMap<String, Var> = BTreeMap::new();
        for d in self.domains.keys() {
            h.insert(d.clone(), bound.var(&prior_name(d))?);
        }
        layers.push(h.clone());
        let mut probe_vars = Vec::new();
        for layer in 1..=self.config.depth {
            let mut next = BTreeMap::new();
            for (d, &n) in &self.domains {
                let rels = self.targeting(d);
                let ht = h[d];
                let out_w = self.config.width(d, layer);
                if rels.is_empty() {
                    let p = self_prefix(layer, d);
                    let w = bound.var(&format!("{p}/w"))?;
                    let b = bound.var(&format!("{p}/bias"))?;
                    let lin = t.matmul(ht, w)?;
                    let bb = t.broadcast(b, &[n, out_w])?;
                    let pre = t.add(lin, bb)?;
                    next.insert(d.clone(), t.relu(pre));
                    continue;
                }
                let mut acc: Option<Var> = None;
                for r in rels {
                    let p = rel_prefix(layer, r);
                    let ws = bound.var(&format!("{p}/w_self"))?;
                    let wn = bound.var(&format!("{p}/w_neigh"))?;
                    let b = bound.var(&format!("{p}/bias"))?;
                    let mut xs = h[&r.source_domain];
                    let mut groups = idx.groups[r].clone();
                    if layer == 1 {
                        let mut extra = Vec::new();
                        let base = t.shape(xs)[0];
                        for (pd, v) in probes {
                            if pd != d || groups[*v].is_empty() {
                                continue;
                            }
                            let mut remapped = Vec::new();
                            for &u in &groups[*v] {
                                let row = t.value(xs).row(u).to_vec();
                                let leaf = t.param(Tensor::matrix(1, row.len(), row)?);
                                remapped.push(base + extra.len());
                                extra.push(leaf);
                                probe_vars.push((
                                    Edge::new(
                                        idx.classes[&r.source_domain][u].clone(),
                                        r.clone(),
                                        idx.classes[d][*v].clone(),
                                    ),
                                    leaf,
                                ));
                            }
                            groups[*v] = remapped;
                        }
                        if !extra.is_empty() {
                            let mut parts = vec![xs];
                            parts.extend(extra);
                            xs = t.concat(&parts, 0)?;
                        }
                    }
                    let self_path = t.matmul(ht, ws)?;
                    let agg = t.segment_max(xs, &groups)?;
                    let neigh = t.matmul(agg, wn)?;
                    let bb = t.broadcast(b, &[n, out_w])?;
                    let s = t.add(self_path, neigh)?;
                    let pre = t.add(s, bb)?;
                    let out = t.relu(pre);
                    let c = t.constant(Tensor::matrix(n, 1, idx.coef[r].clone())?);
                    let cb = t.broadcast(c, &[n, out_w])?;
                    let weighted = t.mul(out, cb)?;
                    acc = Some(match acc {
                        None => weighted,
                        Some(a) => t.add(a, weighted)?,
                    });
                }
                next.insert(d.clone(), acc.expect("at least one relation"));
            }
            h = next;
            layers.push(h.clone());
        }
        Ok(Forward {
            layers,
            probes: probe_vars,
        })
    }

    /// Forward pass without gradients: per-layer per-domain latent matrices.
    pub fn forward_values(&self, g: &KnowledgeGraph) -> Result<Vec<BTreeMap<String, Tensor>>> {
        let idx = self.index(g)?;
        let mut t = Tape::new();
        let bound = self.params.bind(&mut t, |_| false);
        let f = self.forward(&mut t, &bound, &idx, &[])?;
        Ok(f
            .layers
            .iter()
            .map(|l| l.iter().map(|(d, v)| (d.clone(), t.value(*v).clone())).collect())
            .collect())
    }
}

/// Precomputed neighbourhoods and combination weights for one graph.
#[derive(Clone, Debug)]
pub struct GraphIndex {
    /// Per relation, per target node: source node indices.
    groups: BTreeMap<RelationId, Vec<Vec<usize>>>,
    /// Per relation, per target node: weight in the mean combination.
    coef: BTreeMap<RelationId, Vec<f64>>,
    classes: BTreeMap<String, Vec<ClassId>>,
}

impl GraphIndex {
    pub fn class_index(&self, domain: &str, c: &ClassId) -> Option<usize> {
        self.classes.get(domain)?.iter().position(|x| x == c)
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub layers: Vec<BTreeMap<String, Var>>,
    pub probes: Vec<(Edge, Var)>,
}

/// Interprets each row of a latent matrix as a box.
pub fn boxes_at_layer(latents: &Tensor) -> Result<Vec<AxisBox>> {
    if latents.shape().len() != 2 {
        return Err(Error::shape(format!("latent matrix of shape {:?}", latents.shape())));
    }
    (0..latents.rows())
        .map(|i| BoxLatent::from_concat(latents.row(i)).map(|l| make_box(&l)))
        .collect()
}
