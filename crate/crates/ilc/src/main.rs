use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ilc::config::{self, ScenarioName};
use ilc::pipeline::Pipeline;
use ilc::Result;

#[derive(Parser)]
#[command(name = "ilc", version, about = "Intermediate-layer classifier experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Root seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    scenario: Option<ScenarioName>,
    /// Few-shot fractions, comma separated; overrides `pis`.
    #[arg(long, global = true, value_delimiter = ',')]
    pi: Vec<f64>,
    /// Largest layer eligible for selection.
    #[arg(long, global = true)]
    max_layer: Option<usize>,
    /// `dotted.path=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ID and OOD datasets for every seed.
    Generate,
    /// Train one backbone per seed on its ID data.
    TrainBackbone,
    /// Extract per-layer representations for every split.
    Extract,
    /// Train the (η, λ) sweep of ILCs on every layer.
    Probe,
    /// Select l* on validation data and score base, last and best layer.
    Evaluate,
    /// Sensitivity, TVD, collapse and PCA analyses.
    Analyze,
    /// Collect tables, selections and timings under report/.
    Report,
    /// Every stage in order.
    Run,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(s) = self.scenario {
            o.push(format!("scenario={}", s.as_str()));
        }
        if !self.pi.is_empty() {
            o.push(format!("pis={}", serde_json::to_string(&self.pi).expect("json")));
        }
        if let Some(l) = self.max_layer {
            o.push(format!("max_layer={l}"));
        }
        o.extend(self.set.iter().cloned());
        o
    }
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let mut cfg = config::load(cli.common.config.as_deref(), &cli.common.overrides())?;
    if let Some(out) = &cli.common.out {
        cfg.out_dir = out.clone();
    }
    let p = Pipeline::new(cfg, cli.common.jobs)?;
    match cli.command {
        Command::Generate => p.run_stage("generate"),
        Command::TrainBackbone => p.run_stage("train-backbone"),
        Command::Extract => p.run_stage("extract"),
        Command::Probe => p.run_stage("probe"),
        Command::Evaluate => p.run_stage("evaluate"),
        Command::Analyze => p.run_stage("analyze"),
        Command::Report => p.run_stage("report"),
        Command::Run => p.run_all(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
