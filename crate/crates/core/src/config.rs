//! Run configuration: one strict JSON document covering paths, model variant
//! and every module's settings. Unknown keys are rejected with the dotted
//! path of the offending key.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed_trainer::{JointTrainConfig, PriorTrainConfig};
use crate::error::{Error, Result};
use crate::gnn::GnnConfig;
use crate::kg::KnowledgeGraph;
use crate::link_eval::DisplacementMode;
use crate::predictor::{PredictorConfig, TrainConfig};
use crate::synthetic::SyntheticConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub axioms: Option<PathBuf>,
    pub domains: Option<PathBuf>,
    pub fitness: Option<PathBuf>,
    pub output: PathBuf,
    /// Model checkpoint read by `attribute`, `link-eval` and `export-boxes`.
    pub checkpoint: Option<PathBuf>,
    /// Prior checkpoint installed in `prior_box` mode; priors are trained
    /// in-run when absent.
    pub priors: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            axioms: None,
            domains: None,
            fitness: None,
            output: PathBuf::from("out"),
            checkpoint: None,
            priors: None,
        }
    }
}

/// Which kind of prior features the GNN starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Randomly initialized prior latents, no box training.
    NoBox,
    /// As `no_box`, with subclass axioms added as graph edges.
    SubclassLinks,
    /// Prior latents from prior box training.
    #[default]
    PriorBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub gene_domain: String,
    pub reverse_edges: bool,
    /// Relations with fewer edges are dropped before training.
    pub min_relation_count: usize,
    /// Domains whose top-level branches are declared mutually disjoint.
    pub sibling_disjointness: Vec<String>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            gene_domain: "gene".into(),
            reverse_edges: true,
            min_relation_count: 1,
            sibling_disjointness: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnnSection {
    pub depth: usize,
    /// Width of every message-passing layer for domains not listed in
    /// `hidden_dim`.
    pub default_hidden_dim: usize,
    pub hidden_dim: BTreeMap<String, usize>,
}

impl Default for GnnSection {
    fn default() -> Self {
        GnnSection {
            depth: 2,
            default_hidden_dim: 32,
            hidden_dim: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub allow_predicates: Vec<String>,
    pub allow_superclasses: Vec<String>,
    /// Keep only the highest-scoring entries.
    pub top: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkEvalConfig {
    /// Share of each relation's edges held out by `train-joint`.
    pub test_fraction: f64,
    pub mode: DisplacementMode,
}

impl Default for LinkEvalConfig {
    fn default() -> Self {
        LinkEvalConfig {
            test_fraction: 0.2,
            mode: DisplacementMode::CenterOffset,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub mode: ModelMode,
    pub seed: u64,
    pub jobs: usize,
    pub graph: GraphConfig,
    pub gnn: GnnSection,
    pub priors: PriorTrainConfig,
    pub predictor: PredictorConfig,
    pub fitness: TrainConfig,
    pub joint: JointTrainConfig,
    pub attribution: AttributionConfig,
    pub link_eval: LinkEvalConfig,
    pub synthetic: SyntheticConfig,
}

/// Parses a configuration document. Relative paths are resolved against
/// `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let key = if key == "." { "config".to_string() } else { key };
        Error::config(key, e.into_inner().to_string())
    })?;
    cfg.paths.resolve(base_dir);
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &absolute(&base)?)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    Ok(cwd.join(p))
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.axioms,
            &mut self.domains,
            &mut self.fitness,
            &mut self.checkpoint,
            &mut self.priors,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output);
    }

    /// Resolves relative paths against the working directory.
    pub fn make_absolute(&mut self) -> Result<()> {
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        self.resolve(&cwd);
        Ok(())
    }
}

/// `key` must name an existing file.
pub fn require_file<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    match p {
        None => Err(Error::config(key, "required for this command")),
        Some(p) if !p.is_file() => Err(Error::config(key, format!("no such file: {}", p.display()))),
        Some(p) => Ok(p),
    }
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Checks the settings that do not depend on the graph.
    pub fn validate(&self) -> Result<()> {
        if self.gnn.depth == 0 {
            return Err(Error::config("gnn.depth", "must be >= 1"));
        }
        if self.gnn.default_hidden_dim == 0 || !self.gnn.default_hidden_dim.is_multiple_of(2) {
            return Err(Error::config("gnn.default_hidden_dim", "must be even and >= 2"));
        }
        if !(0.0..1.0).contains(&self.link_eval.test_fraction) {
            return Err(Error::config("link_eval.test_fraction", "must lie in [0, 1)"));
        }
        self.fitness.validate().map_err(|e| prefix(e, "fitness"))?;
        self.synthetic.validate()
    }

    /// Checks the settings that name domains of `g`.
    pub fn validate_for(&self, g: &KnowledgeGraph) -> Result<()> {
        let known = |d: &str| g.domains().any(|x| x == d);
        if !known(&self.graph.gene_domain) {
            return Err(Error::config(
                "graph.gene_domain",
                format!("unknown domain `{}`", self.graph.gene_domain),
            ));
        }
        for d in &self.graph.sibling_disjointness {
            if !known(d) {
                return Err(Error::config("graph.sibling_disjointness", format!("unknown domain `{d}`")));
            }
        }
        for d in self.gnn.hidden_dim.keys() {
            if !known(d) {
                return Err(Error::config(format!("gnn.hidden_dim.{d}"), format!("unknown domain `{d}`")));
            }
        }
        for d in self.fitness.exclude_domains.iter().flatten() {
            if !known(d) {
                return Err(Error::config("fitness.exclude_domains", format!("unknown domain `{d}`")));
            }
        }
        self.priors.validate(g)?;
        self.joint.validate(g)?;
        self.gnn_config(g).validate(g)
    }

    pub fn gnn_config(&self, g: &KnowledgeGraph) -> GnnConfig {
        GnnConfig {
            depth: self.gnn.depth,
            prior_dim: self.priors.dims(g),
            hidden_dim: g
                .domains()
                .map(|d| {
                    let w = self.gnn.hidden_dim.get(d).copied().unwrap_or(self.gnn.default_hidden_dim);
                    (d.to_string(), w)
                })
                .collect(),
        }
    }
}

fn prefix(e: Error, section: &str) -> Error {
    match e {
        Error::Config { key, message } if !key.starts_with(section) => {
            let key = key.strip_prefix("train.").unwrap_or(&key).to_string();
            Error::config(format!("{section}.{key}"), message)
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(text: &str) -> String {
        match parse_config(text, Path::new("/base")) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse_config("{}", Path::new("/base")).unwrap();
        assert_eq!(cfg.paths.output, PathBuf::from("/base/out"));
        assert_eq!(cfg.fitness.weights.alpha, 0.1);
        assert_eq!(cfg.fitness.weights.beta_neg, 0.05);
        assert_eq!(cfg.fitness.epochs, 160);
        assert_eq!(cfg.joint.epochs, 500);
        assert_eq!(cfg.mode, ModelMode::PriorBox);
    }

    #[test]
    fn unknown_keys_are_named() {
        assert_eq!(key_of(r#"{"bogus": 1}"#), "bogus");
        assert_eq!(key_of(r#"{"fitness": {"epoch": 3}}"#), "fitness.epoch");
        assert_eq!(key_of(r#"{"fitness": {"weights": {"alpah": 3}}}"#), "fitness.weights.alpah");
        assert_eq!(key_of(r#"{"fitness": {"epochs": "x"}}"#), "fitness.epochs");
        assert_eq!(key_of(r#"{"mode": "boxes"}"#), "mode");
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg = parse_config(
            r#"{"fitness": {"weights": {"alpha": 0.0}}, "paths": {"axioms": "a.tsv"}}"#,
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.fitness.weights.alpha, 0.0);
        assert_eq!(cfg.fitness.weights.beta_neg, 0.05);
        assert_eq!(cfg.paths.axioms, Some(PathBuf::from("/base/a.tsv")));
    }

    #[test]
    fn round_trip_is_stable() {
        let cfg = RunConfig::default();
        let text = cfg.to_json();
        let back = parse_config(&text, Path::new("/")).unwrap();
        assert_eq!(back.to_json(), text.replace("\"out\"", "\"/out\""));
    }

    #[test]
    fn validation_names_keys() {
        let mut cfg = RunConfig::default();
        cfg.fitness.folds = 1;
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "fitness.folds"),
            other => panic!("{other:?}"),
        }
    }
}
