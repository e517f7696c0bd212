//! `cgp` — synthesize data, train, evaluate and plot class-guided trajectory
//! predictors.

mod commands;
mod lists;
mod manifest;
mod plot;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "cgp", version, about = "Class-guided handwriting trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled dataset from a TOML template config.
    Synth(SynthArgs),
    /// Train a cgp, mdn or dlstm model.
    Train(TrainArgs),
    /// Compute metrics for a checkpoint (or the 1-NN baseline) on a data split.
    Eval(EvalArgs),
    /// Render rollouts from one observed prefix as SVG.
    Sample(SampleArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Trajectory file (`id<TAB>class<TAB>x,y;x,y;...`).
    #[arg(long)]
    pub data: PathBuf,
    /// Number of classes. Defaults to the class count in `<data>.meta.json`
    /// when present, else 10.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Seed of the 70/10/20 train/validation/test split.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// TOML config with one `[[class]]` table per template.
    #[arg(long)]
    pub config: PathBuf,
    /// Output trajectory file; metadata goes to `<out>.meta.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Model kind: cgp, mdn or dlstm.
    #[arg(long, default_value = "cgp")]
    pub model: String,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for the checkpoint, epoch log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Mixture components per class (the MDN gets classes x components).
    #[arg(long, default_value_t = 4)]
    pub components: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 500)]
    pub max_epochs: usize,
    /// Seeds weight initialization and batch shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint path, or `1nn` for the nearest-neighbour baseline indexed
    /// on the training split.
    #[arg(long)]
    pub model: String,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for `report.jsonl`, `summary.txt` and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated subset of rmse1,rmse2,rmse3,nll,class_frequency.
    #[arg(long, default_value = "rmse1,rmse2,rmse3,nll,class_frequency")]
    pub metrics: String,
    /// Horizons, e.g. `1-10` or `1,5,10`.
    #[arg(long, default_value = "1-10")]
    pub dt: String,
    /// Input times (observed displacements).
    #[arg(long, default_value = "5,10,15,20,25,30,35,40")]
    pub t: String,
    /// Rollouts per test item.
    #[arg(long, default_value_t = cgp_core::evaluation::DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate every item instead of the test split.
    #[arg(long)]
    pub all: bool,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Checkpoint path.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Item id; defaults to the first test item.
    #[arg(long)]
    pub item: Option<String>,
    /// Input times; several values make one figure row each.
    #[arg(long, default_value = "15")]
    pub t: String,
    /// Horizons; several values make one figure column each.
    #[arg(long, default_value = "20")]
    pub dt: String,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also draw the deterministic per-class mean trajectories.
    #[arg(long)]
    pub class_means: bool,
    /// Output SVG; rollouts go to `<out>.rollouts.tsv`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Bad input the user can fix; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sample(a) => commands::sample(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
