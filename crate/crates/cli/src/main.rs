//! `pgnn`: batch driver for grid import, dataset generation, Kron reduction,
//! training, evaluation and the reconstruction experiments.
//!
//! Exit codes: 0 success, 1 other failure, 2 missing input, 3 parse error,
//! 4 stalled generation, 5 training divergence, 6 singular reduction.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "pgnn",
    version,
    about = "Physics-informed power-grid parameter and state estimation"
)]
struct Cli {
    /// Seed shared by every random component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output root holding `grid/`, `data/` and `runs/`.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON settings file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert a MATPOWER case file to the native grid schema.
    Import(ImportArgs),
    /// Generate a dataset of solved operating points.
    Generate(GenerateArgs),
    /// Kron-reduce a grid onto the observed buses.
    Kron(KronArgs),
    /// Train a Power-GNN or vanilla estimator.
    Train(TrainArgs),
    /// Injection mismatch of a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Reconstruction quality across regularization coefficients.
    SweepReg(SweepArgs),
    /// Admittance reconstruction error against the training-set size.
    ReconCurve(ReconArgs),
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    pub case: PathBuf,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// c1..c6.
    #[arg(long)]
    pub case: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Degrees added to every angle (c6).
    #[arg(long)]
    pub phase_shift: Option<f64>,
    /// Relative load noise (c2, c3).
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct KronArgs {
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// `full`, `generators`, or comma-separated bus ids.
    #[arg(long)]
    pub obs: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct TrainOpts {
    /// `desk` (default) or `full-scale`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Freeze the Power-GNN correction at zero.
    #[arg(long)]
    pub no_net: bool,
    #[arg(long)]
    pub net_width: Option<usize>,
    #[arg(long)]
    pub net_hidden: Option<usize>,
    /// Vanilla units per hidden layer.
    #[arg(long)]
    pub units: Option<usize>,
    /// Vanilla hidden layers.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub train_frac: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `pgnn` or `vanilla`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub obs: Option<String>,
    /// `reference` (Kron graph) or `pruned` (complete graph, pruned after warm-up).
    #[arg(long)]
    pub topology: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub reg: Option<f64>,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `all` (default), `train` or `validation`.
    #[arg(long, default_value = "all")]
    pub split: String,
    #[arg(long)]
    pub train_frac: Option<f64>,
    /// Also write the result as JSON.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub obs: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Args, Debug)]
pub struct ReconArgs {
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub ns: Option<Vec<usize>>,
    #[arg(long)]
    pub realizations: Option<usize>,
    /// Report samples per node on the abscissa.
    #[arg(long)]
    pub per_node: bool,
    #[command(flatten)]
    pub opts: TrainOpts,
}

impl TrainOpts {
    fn apply(self, c: RunConfig) -> RunConfig {
        RunConfig {
            preset: self.preset,
            epochs: self.epochs,
            lr: self.lr,
            lr_final: self.lr_final,
            batch_size: self.batch_size,
            no_net: self.no_net.then_some(true),
            net_width: self.net_width,
            net_hidden: self.net_hidden,
            units: self.units,
            layers: self.layers,
            train_frac: self.train_frac,
            ..c
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<String, error::CliError> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let base = RunConfig {
        seed: cli.seed,
        ..RunConfig::default()
    };
    let out = cli.out;
    match cli.command {
        Command::Import(a) => commands::import(&a.case, a.output, &out),
        Command::Generate(a) => {
            let c = RunConfig {
                grid: a.grid,
                case: a.case,
                n: a.n,
                phase_shift: a.phase_shift,
                noise: a.noise,
                ..base
            };
            commands::generate(&c.over(file), a.output, &out)
        }
        Command::Kron(a) => {
            let c = RunConfig {
                grid: a.grid,
                obs: a.obs,
                threshold: a.threshold,
                ..base
            };
            commands::kron(&c.over(file), a.output, &out)
        }
        Command::Train(a) => {
            let c = RunConfig {
                model: a.model,
                grid: a.grid,
                data: a.data,
                obs: a.obs,
                topology: a.topology,
                threshold: a.threshold,
                reg: a.reg,
                ..base
            };
            commands::train(&a.opts.apply(c).over(file), &out)
        }
        Command::Evaluate(a) => {
            let c = RunConfig {
                data: a.data,
                train_frac: a.train_frac,
                ..base
            };
            commands::evaluate(&a.model, &c.over(file), &a.split, a.output)
        }
        Command::SweepReg(a) => {
            let c = RunConfig {
                grid: a.grid,
                data: a.data,
                obs: a.obs,
                threshold: a.threshold,
                alphas: a.alphas,
                ..base
            };
            commands::sweep_reg(&a.opts.apply(c).over(file), &out)
        }
        Command::ReconCurve(a) => {
            let c = RunConfig {
                grid: a.grid,
                data: a.data,
                ns: a.ns,
                realizations: a.realizations,
                per_node: a.per_node.then_some(true),
                ..base
            };
            commands::recon_curve(&a.opts.apply(c).over(file), &out)
        }
    }
}
