use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use genar_cli::{Overrides, Preset, RunConfig};

#[derive(Parser)]
#[command(name = "genar", version, about = "Coarse-to-fine autoregressive gene-expression prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with planted co-expression modules.
    Synth(Common),
    /// Cluster genes on the training slides and write hierarchy.json.
    Cluster(Common),
    /// Train a model; writes checkpoint.bin and history.jsonl.
    Train(Common),
    /// Greedy-decode every spot; writes predictions.tsv.
    Predict(Common),
    /// Score predictions against ground truth; writes report.json.
    Eval(Common),
    /// Train and score a list of variants; writes ablation_report.json.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Continue training from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    val_slide: Option<String>,
    /// Also write count-head means.
    #[arg(long)]
    with_mu: bool,
    /// Sample with this temperature instead of greedy decoding.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(base.resolve(&Overrides {
            seed: self.seed,
            data: self.data.clone(),
            hierarchy: self.hierarchy.clone(),
            checkpoint: self.checkpoint.clone(),
            predictions: self.predictions.clone(),
            resume: self.resume.clone(),
            val_slide: self.val_slide.clone(),
            with_mu: self.with_mu,
            temperature: self.temperature,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            preset: self.preset,
        }))
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(c) => genar_cli::cmd_synth(&c.resolve()?, &c.out),
        Command::Cluster(c) => genar_cli::cmd_cluster(&c.resolve()?, &c.out).map(drop),
        Command::Train(c) => genar_cli::cmd_train(&c.resolve()?, &c.out).map(drop),
        Command::Predict(c) => genar_cli::cmd_predict(&c.resolve()?, &c.out).map(drop),
        Command::Eval(c) => genar_cli::cmd_eval(&c.resolve()?, &c.out).map(drop),
        Command::Ablate(c) => genar_cli::cmd_ablate(&c.resolve()?, &c.out).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
