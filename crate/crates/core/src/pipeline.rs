//! File-based pipelines behind the command-line driver. Every command reads
//! a [`RunConfig`], writes its artifacts into `paths.output` and returns a
//! summary of what it did.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attribution::{accumulate_pair_importances, PairImportanceTable};
use crate::autodiff::{ParamSet, Tensor};
use crate::boxes::format_box_line;
use crate::checkpoint::{Checkpoint, CheckpointKind, Metadata};
use crate::config::{require_file, ModelMode, Paths, RunConfig};
use crate::embed_trainer::{train_all_priors, train_joint, JointEpoch, PriorDomainConfig, TrainedPrior};
use crate::error::{Error, Result};
use crate::gnn::{boxes_at_layer, prior_name, HeteroGnn};
use crate::kg::{
    add_reverse_edges, augment_sibling_disjointness, filter_rare_relations, parse_fitness, parse_graph,
    split_edges_stratified, ClassId, Edge, FitnessDataset, KnowledgeGraph, RelationId,
};
use crate::link_eval::{evaluate_revisions, results_to_text, summarize, summary_to_text, LinkEvalOptions, SummaryRow};
use crate::loss::LossEntry;
use crate::predictor::{cross_validate, mean_sd, train, Combiner, FitnessModel, FoldResult, PredictorConfig, TrainConfig};
use crate::seed;
use crate::synthetic::generate;

/// Relation name used for hierarchy edges in `subclass_links` mode.
pub const SUBCLASS_LINK: &str = "subclass_link";

pub const CONFIG_FILE: &str = "config.json";
pub const PRIORS_CHECKPOINT: &str = "priors.ckpt.json";
pub const FITNESS_CHECKPOINT: &str = "fitness.ckpt.json";
pub const JOINT_CHECKPOINT: &str = "joint.ckpt.json";

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn save(dir: &Path, name: &str, c: &Checkpoint) -> Result<PathBuf> {
    let text = c.to_json()?;
    write(dir, name, &text)
}

/// Axioms and domains as declared in the input files.
pub fn load_graph(cfg: &RunConfig) -> Result<KnowledgeGraph> {
    let axioms = read(require_file(&cfg.paths.axioms, "paths.axioms")?)?;
    let domains = read(require_file(&cfg.paths.domains, "paths.domains")?)?;
    parse_graph(&axioms, &domains)
}

/// Input graph after validation, rare-relation filtering, disjointness
/// augmentation and (in `subclass_links` mode) hierarchy edges. Reverse
/// edges are not yet added.
pub fn base_graph(cfg: &RunConfig) -> Result<KnowledgeGraph> {
    cfg.validate()?;
    let g = load_graph(cfg)?;
    cfg.validate_for(&g)?;
    let mut g = filter_rare_relations(&g, cfg.graph.min_relation_count);
    for d in &cfg.graph.sibling_disjointness {
        g = augment_sibling_disjointness(&g, d)?;
    }
    if cfg.mode == ModelMode::SubclassLinks {
        let mut links = Vec::new();
        for d in g.domains() {
            let rel = RelationId::new(SUBCLASS_LINK, d, d);
            links.extend(g.hierarchy(d).map(|(sub, sup)| Edge::new(sub.clone(), rel.clone(), sup.clone())));
        }
        g = g.with_edges(links)?;
    }
    Ok(g)
}

fn finish_graph(cfg: &RunConfig, g: KnowledgeGraph) -> KnowledgeGraph {
    if cfg.graph.reverse_edges {
        add_reverse_edges(&g)
    } else {
        g
    }
}

/// The message-passing graph used for training.
pub fn training_graph(cfg: &RunConfig) -> Result<KnowledgeGraph> {
    Ok(finish_graph(cfg, base_graph(cfg)?))
}

pub fn load_fitness(cfg: &RunConfig, g: &KnowledgeGraph) -> Result<FitnessDataset> {
    let text = read(require_file(&cfg.paths.fitness, "paths.fitness")?)?;
    parse_fitness(&text, g, &cfg.graph.gene_domain)
}

/// `epoch<TAB>layer<TAB>domain<TAB>pos<TAB>neg` rows.
fn push_loss_lines(s: &mut String, epoch: usize, entries: &[LossEntry]) {
    for e in entries {
        let _ = writeln!(s, "{epoch}\t{}\t{}\t{:.16e}\t{:.16e}", e.layer, e.domain, e.pos, e.neg);
    }
}

const LOSS_HEADER: &str = "epoch\tlayer\tdomain\tpos\tneg\n";

/// Prior latents for `g`, read from `paths.priors` or trained in-run.
pub fn obtain_priors(cfg: &RunConfig, g: &KnowledgeGraph) -> Result<BTreeMap<String, Tensor>> {
    if let Some(path) = &cfg.paths.priors {
        let c = Checkpoint::load(require_file(&Some(path.clone()), "paths.priors")?)?;
        if c.kind != CheckpointKind::Priors {
            return Err(Error::data(format!("{} is not a priors checkpoint", path.display())));
        }
        let params = c.param_set()?;
        return Ok(params.iter().map(|(k, t)| (k.clone(), t.clone())).collect());
    }
    Ok(train_all_priors(g, &cfg.priors, cfg.seed, cfg.jobs)?
        .into_iter()
        .map(|p| (prior_name(&p.domain), p.latent))
        .collect())
}

/// Replaces prior latents in `params`, checking shapes.
pub fn install_priors(params: &mut ParamSet, priors: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, t) in priors {
        let slot = params
            .get_mut(name)
            .ok_or_else(|| Error::data(format!("model has no parameter `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(Error::shape(format!(
                "prior {name}: model expects {:?}, checkpoint has {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(())
}

/// Training settings under which the synthetic benchmark is learnable in
/// 200 epochs: one-dimensional gene priors, frozen priors, box-intersection
/// combiner and no semantic term in the fitness objective.
pub fn apply_benchmark_settings(cfg: &mut RunConfig) {
    let gene = cfg.synthetic.gene_domain.clone();
    cfg.mode = ModelMode::PriorBox;
    cfg.gnn.depth = 2;
    cfg.gnn.default_hidden_dim = 32;
    cfg.priors.domains.insert(
        gene,
        PriorDomainConfig {
            dim: 1,
            ..PriorDomainConfig::GENES
        },
    );
    cfg.predictor = PredictorConfig {
        combiner: Combiner::Intersection,
        head_hidden: vec![64],
    };
    cfg.fitness.epochs = 200;
    cfg.fitness.lr = 5e-3;
    cfg.fitness.weights.alpha = 0.0;
    cfg.fitness.weights.lambda_wd = 1e-4;
    cfg.fitness.freeze_priors = true;
}

pub fn run_gen_synthetic(cfg: &RunConfig) -> Result<PathBuf> {
    let s = generate(&cfg.synthetic, cfg.seed)?;
    let out = &cfg.paths.output;
    write(out, "axioms.tsv", &s.graph.to_axiom_text())?;
    write(out, "domains.tsv", &s.graph.to_domain_text())?;
    write(out, "fitness.tsv", &s.fitness.to_text())?;
    let mut run = cfg.clone();
    run.paths = Paths {
        axioms: Some("axioms.tsv".into()),
        domains: Some("domains.tsv".into()),
        fitness: Some("fitness.tsv".into()),
        ..Paths::default()
    };
    run.graph.gene_domain = s.gene_domain;
    if cfg.synthetic.write_benchmark_settings {
        apply_benchmark_settings(&mut run);
    }
    write(out, CONFIG_FILE, &run.to_json())
}

pub fn run_train_priors(cfg: &RunConfig) -> Result<Vec<TrainedPrior>> {
    let g = training_graph(cfg)?;
    let priors = train_all_priors(&g, &cfg.priors, cfg.seed, cfg.jobs)?;
    let mut params = ParamSet::new();
    let mut metrics = String::from(LOSS_HEADER);
    let mut md = Metadata::default();
    for p in &priors {
        params.insert(prior_name(&p.domain), p.latent.clone());
        for h in &p.history {
            let _ = writeln!(metrics, "{}\t0\t{}\t{:.16e}\t{:.16e}", h.epoch, p.domain, h.pos, h.neg);
        }
        md.epochs_completed = md.epochs_completed.max(p.history.len());
        if let Some(last) = p.history.last() {
            md.final_losses.insert(p.domain.clone(), last.loss);
        }
    }
    let out = &cfg.paths.output;
    save(out, PRIORS_CHECKPOINT, &Checkpoint::new(CheckpointKind::Priors, cfg.clone(), vec![], &params, md))?;
    write(out, "priors_metrics.tsv", &metrics)?;
    write(out, CONFIG_FILE, &cfg.to_json())?;
    Ok(priors)
}

pub struct FitnessOutcome {
    pub folds: Vec<FoldResult>,
    pub mean_r2: f64,
    pub sd_r2: f64,
}

fn fitness_train_config(cfg: &RunConfig, seed_value: u64) -> TrainConfig {
    TrainConfig {
        seed: seed_value,
        ..cfg.fitness.clone()
    }
}

pub fn run_train_fitness(cfg: &RunConfig) -> Result<FitnessOutcome> {
    let g = training_graph(cfg)?;
    let data = load_fitness(cfg, &g)?;
    let gnn_cfg = cfg.gnn_config(&g);
    let gene = cfg.graph.gene_domain.as_str();
    let priors = match cfg.mode {
        ModelMode::PriorBox => Some(obtain_priors(cfg, &g)?),
        _ => None,
    };
    let prepare = |m: &mut FitnessModel| match &priors {
        Some(p) => install_priors(m.gnn.params_mut(), p),
        None => Ok(()),
    };
    let tc = fitness_train_config(cfg, cfg.seed);
    let folds = cross_validate(&g, &gnn_cfg, &cfg.predictor, gene, &data, &tc, cfg.jobs, prepare)?;

    let refit_seed = seed::derive_named(cfg.seed, "refit");
    let mut model = FitnessModel::new(&g, gnn_cfg, cfg.predictor.clone(), gene, refit_seed)?;
    prepare(&mut model)?;
    let history = train(&mut model, &g, &data.records, &fitness_train_config(cfg, refit_seed))?;

    let r2: Vec<f64> = folds.iter().map(|f| f.r2).collect();
    let (mean_r2, sd_r2) = mean_sd(&r2);
    let mut summary = String::from("fold\tR2\tSD\n");
    for f in &folds {
        let _ = writeln!(summary, "{}\t{:.16e}\t-", f.fold, f.r2);
    }
    let _ = writeln!(summary, "mean\t{mean_r2:.16e}\t{sd_r2:.16e}");
    let mut predictions = String::from("gene_a\tgene_b\ty_true\ty_pred\n");
    let mut training = String::from("fold\tepoch\tloss\tmse\n");
    for f in &folds {
        for (a, b, y, p) in &f.predictions {
            let _ = writeln!(predictions, "{a}\t{b}\t{y:.16e}\t{p:.16e}");
        }
        for h in &f.history {
            let _ = writeln!(training, "{}\t{}\t{:.16e}\t{:.16e}", f.fold, h.epoch, h.loss, h.mse);
        }
    }
    let mut semantic = String::from(LOSS_HEADER);
    for h in &history {
        let _ = writeln!(training, "refit\t{}\t{:.16e}\t{:.16e}", h.epoch, h.loss, h.mse);
        push_loss_lines(&mut semantic, h.epoch, &h.semantic);
    }
    let last = history.last().expect("at least one epoch");
    let md = Metadata {
        epochs_completed: history.len(),
        final_losses: BTreeMap::from([
            ("loss".to_string(), last.loss),
            ("mse".to_string(), last.mse),
            ("cv_mean_r2".to_string(), mean_r2),
        ]),
        test_edges: Vec::new(),
    };
    let out = &cfg.paths.output;
    let relations = model.gnn.relations().to_vec();
    save(
        out,
        FITNESS_CHECKPOINT,
        &Checkpoint::new(CheckpointKind::Fitness, cfg.clone(), relations, &model.params(), md),
    )?;
    write(out, "fold_summary.tsv", &summary)?;
    write(out, "predictions.tsv", &predictions)?;
    write(out, "training.tsv", &training)?;
    write(out, "semantic_metrics.tsv", &semantic)?;
    write(out, CONFIG_FILE, &cfg.to_json())?;
    Ok(FitnessOutcome { folds, mean_r2, sd_r2 })
}

pub struct JointOutcome {
    pub history: Vec<JointEpoch>,
    pub test_edges: Vec<Edge>,
}

pub fn run_train_joint(cfg: &RunConfig) -> Result<JointOutcome> {
    let base = base_graph(cfg)?;
    let (train_base, test_edges) =
        split_edges_stratified(&base, cfg.link_eval.test_fraction, seed::derive_named(cfg.seed, "split"))?;
    let g = finish_graph(cfg, train_base);
    let mut model = HeteroGnn::new(&g, cfg.gnn_config(&g), seed::derive_named(cfg.seed, "gnn"))?;
    if cfg.mode == ModelMode::PriorBox {
        let priors = obtain_priors(cfg, &g)?;
        install_priors(model.params_mut(), &priors)?;
    }
    let history = train_joint(&g, &mut model, &cfg.joint, cfg.seed)?;

    let mut metrics = String::from(LOSS_HEADER);
    let mut training = String::from("epoch\tlr\tloss\tsmall_box\n");
    for h in &history {
        push_loss_lines(&mut metrics, h.epoch, &h.semantic);
        let _ = writeln!(training, "{}\t{:.16e}\t{:.16e}\t{:.16e}", h.epoch, h.lr, h.loss, h.small_box);
    }
    let mut md = Metadata {
        epochs_completed: history.len(),
        test_edges: test_edges.clone(),
        ..Metadata::default()
    };
    if let Some(last) = history.last() {
        md.final_losses.insert("loss".into(), last.loss);
        md.final_losses.insert("pos".into(), last.total_pos());
    }
    let out = &cfg.paths.output;
    let c = Checkpoint::new(CheckpointKind::Joint, cfg.clone(), model.relations().to_vec(), model.params(), md);
    save(out, JOINT_CHECKPOINT, &c)?;
    write(out, "joint_metrics.tsv", &metrics)?;
    write(out, "joint_training.tsv", &training)?;
    write(out, CONFIG_FILE, &cfg.to_json())?;
    Ok(JointOutcome { history, test_edges })
}

/// Checkpoint named by `paths.checkpoint`.
pub fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    Checkpoint::load(require_file(&cfg.paths.checkpoint, "paths.checkpoint")?)
}

/// Rebuilds the graph a checkpoint was trained on: the checkpoint's own
/// graph settings, input files from `cfg` when given, held-out test edges
/// removed.
pub fn checkpoint_graph(cfg: &RunConfig, c: &Checkpoint) -> Result<KnowledgeGraph> {
    let mut gc = c.config.clone();
    for (mine, theirs) in [
        (&cfg.paths.axioms, &mut gc.paths.axioms),
        (&cfg.paths.domains, &mut gc.paths.domains),
    ] {
        if mine.is_some() {
            theirs.clone_from(mine);
        }
    }
    let test: BTreeSet<&Edge> = c.metadata.test_edges.iter().collect();
    let base = base_graph(&gc)?.retain_edges(|e| !test.contains(e));
    Ok(finish_graph(&gc, base))
}

fn split_params(c: &Checkpoint) -> Result<(ParamSet, ParamSet)> {
    let mut gnn = ParamSet::new();
    let mut head = ParamSet::new();
    for (name, t) in c.param_set()?.iter() {
        if name.starts_with("prior/") || name.starts_with("gnn/") {
            gnn.insert(name.clone(), t.clone());
        } else {
            head.insert(name.clone(), t.clone());
        }
    }
    Ok((gnn, head))
}

pub fn gnn_from_checkpoint(c: &Checkpoint, g: &KnowledgeGraph) -> Result<HeteroGnn> {
    if c.kind == CheckpointKind::Priors {
        return Err(Error::data("a priors checkpoint holds no GNN"));
    }
    let (gnn, _) = split_params(c)?;
    HeteroGnn::from_parts(g, c.config.gnn_config(g), c.relations.clone(), gnn)
}

pub fn fitness_model_from_checkpoint(c: &Checkpoint, g: &KnowledgeGraph) -> Result<FitnessModel> {
    if c.kind != CheckpointKind::Fitness {
        return Err(Error::data("expected a fitness checkpoint"));
    }
    let (gnn, head) = split_params(c)?;
    let model = FitnessModel {
        gnn: HeteroGnn::from_parts(g, c.config.gnn_config(g), c.relations.clone(), gnn)?,
        gene_domain: c.config.graph.gene_domain.clone(),
        predictor: c.config.predictor.clone(),
        head,
    };
    let fresh = FitnessModel::new(g, c.config.gnn_config(g), c.config.predictor.clone(), &model.gene_domain, 0)?;
    let want: BTreeSet<&String> = fresh.head.names().collect();
    let have: BTreeSet<&String> = model.head.names().collect();
    if want != have {
        return Err(Error::data("checkpoint head parameters do not match the predictor config"));
    }
    for (name, t) in fresh.head.iter() {
        if model.head.get(name)?.shape() != t.shape() {
            return Err(Error::shape(format!("parameter {name} has the wrong shape")));
        }
    }
    Ok(model)
}

pub fn run_attribute(cfg: &RunConfig) -> Result<PairImportanceTable> {
    let c = load_checkpoint(cfg)?;
    let g = checkpoint_graph(cfg, &c)?;
    let model = fitness_model_from_checkpoint(&c, &g)?;
    let mut fc = c.config.clone();
    if cfg.paths.fitness.is_some() {
        fc.paths.fitness.clone_from(&cfg.paths.fitness);
    }
    let data = load_fitness(&fc, &g)?;
    let pairs: Vec<(ClassId, ClassId)> = data.records.iter().map(|r| (r.gene_a.clone(), r.gene_b.clone())).collect();
    let mut table = accumulate_pair_importances(&model, &g, &pairs, cfg.jobs)?;
    let a = &cfg.attribution;
    if !a.allow_predicates.is_empty() || !a.allow_superclasses.is_empty() {
        let preds: BTreeSet<String> = a.allow_predicates.iter().cloned().collect();
        let supers: BTreeSet<ClassId> = a.allow_superclasses.iter().map(ClassId::new).collect();
        table = table.filter(&preds, &supers, &g)?;
    }
    let text = table.to_text();
    let text: String = match a.top {
        Some(n) => text.lines().take(n).flat_map(|l| [l, "\n"]).collect(),
        None => text,
    };
    write(&cfg.paths.output, "importance.tsv", &format!("rank\tscore\tpred1\tclass1\tpred2\tclass2\n{text}"))?;
    Ok(table)
}

/// File-name-safe form of a relation name.
fn file_token(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn run_link_eval(cfg: &RunConfig) -> Result<Vec<SummaryRow>> {
    let c = load_checkpoint(cfg)?;
    if c.metadata.test_edges.is_empty() {
        return Err(Error::data("checkpoint has no held-out test edges"));
    }
    let g = checkpoint_graph(cfg, &c)?;
    let model = gnn_from_checkpoint(&c, &g)?;
    let opts = LinkEvalOptions {
        mode: cfg.link_eval.mode,
        add_reverse: c.config.graph.reverse_edges,
    };
    let results = evaluate_revisions(
        &model,
        &g,
        &c.metadata.test_edges,
        &opts,
        seed::derive_named(cfg.seed, "link_eval"),
        cfg.jobs,
    )?;
    let rows = summarize(&results)?;
    let out = &cfg.paths.output;
    for r in &rows {
        let body = results_to_text(&results, &r.relation);
        write(
            out,
            &format!("link_eval_{}.tsv", file_token(&r.relation)),
            &format!("relation\tkind\tedge\tdistance\n{body}"),
        )?;
    }
    write(out, "summary.tsv", &summary_to_text(&rows))?;
    Ok(rows)
}

/// Writes `boxes.tsv` with one line per class and layer; returns the line
/// count.
pub fn run_export_boxes(cfg: &RunConfig) -> Result<usize> {
    let c = load_checkpoint(cfg)?;
    let g = checkpoint_graph(cfg, &c)?;
    let layers: Vec<BTreeMap<String, Tensor>> = if c.kind == CheckpointKind::Priors {
        let p = c.param_set()?;
        let mut l0 = BTreeMap::new();
        for d in g.domains() {
            l0.insert(d.to_string(), p.get(&prior_name(d))?.clone());
        }
        vec![l0]
    } else {
        gnn_from_checkpoint(&c, &g)?.forward_values(&g)?
    };
    let mut text = String::new();
    let mut n = 0;
    for (layer, latents) in layers.iter().enumerate() {
        for (d, t) in latents {
            let classes = g.domain_classes(d);
            if t.rows() != classes.len() {
                return Err(Error::shape(format!("domain {d}: {} rows for {} classes", t.rows(), classes.len())));
            }
            for (class, b) in classes.iter().zip(boxes_at_layer(t)?) {
                text.push_str(&format_box_line(class.as_str(), d, layer, &b));
                text.push('\n');
                n += 1;
            }
        }
    }
    write(&cfg.paths.output, "boxes.tsv", &text)?;
    Ok(n)
}
