use std::path::PathBuf;
use std::process::ExitCode;

use boxgnn::config::{load_config, RunConfig};
use boxgnn::pipeline;
use boxgnn::Result;
use clap::{Args, Parser, Subcommand};

/// Box-embedding GNN training and evaluation on ontology-backed knowledge graphs.
#[derive(Parser)]
#[command(name = "boxgnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic knowledge graph, fitness table and matching config.
    GenSynthetic(Common),
    /// Train prior box embeddings for every domain.
    TrainPriors(Common),
    /// Cross-validate the fitness predictor and refit it on all pairs.
    TrainFitness(Common),
    /// Train priors and GNN on the semantic loss alone, holding out test edges.
    TrainJoint(Common),
    /// Edge-pair importance table for a fitness checkpoint.
    Attribute(Common),
    /// Rank held-out edges against baselines by embedding displacement.
    LinkEval(Common),
    /// Write every class's box at every layer of a checkpoint.
    ExportBoxes(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for fold-, domain- and edge-level parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => {
                let mut c = RunConfig::default();
                c.paths.make_absolute()?;
                c
            }
        };
        let cwd = std::env::current_dir().map_err(|e| boxgnn::Error::io(".", e))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if let Some(o) = &self.output {
            cfg.paths.output = cwd.join(o);
        }
        if let Some(c) = &self.checkpoint {
            cfg.paths.checkpoint = Some(cwd.join(c));
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<String> {
    Ok(match cli.command {
        Command::GenSynthetic(c) => {
            let path = pipeline::run_gen_synthetic(&c.resolve()?)?;
            format!("wrote {}", path.display())
        }
        Command::TrainPriors(c) => {
            let cfg = c.resolve()?;
            let priors = pipeline::run_train_priors(&cfg)?;
            let mut s = String::new();
            for p in priors {
                let last = p.history.last().map_or(0.0, |h| h.loss);
                s.push_str(&format!("{}\tfinal loss {last:.6e}\n", p.domain));
            }
            s.trim_end().to_string()
        }
        Command::TrainFitness(c) => {
            let out = pipeline::run_train_fitness(&c.resolve()?)?;
            format!("mean R2 {:.4} (SD {:.4}) over {} folds", out.mean_r2, out.sd_r2, out.folds.len())
        }
        Command::TrainJoint(c) => {
            let out = pipeline::run_train_joint(&c.resolve()?)?;
            let last = out.history.last().map_or(0.0, |h| h.loss);
            format!("final loss {last:.6e}; {} test edges held out", out.test_edges.len())
        }
        Command::Attribute(c) => {
            let table = pipeline::run_attribute(&c.resolve()?)?;
            format!("{} edge pairs scored", table.symmetrized().len())
        }
        Command::LinkEval(c) => {
            let rows = pipeline::run_link_eval(&c.resolve()?)?;
            format!("{} relations evaluated", rows.len())
        }
        Command::ExportBoxes(c) => {
            let n = pipeline::run_export_boxes(&c.resolve()?)?;
            format!("{n} boxes written")
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
