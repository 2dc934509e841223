mod commands;
mod config;
mod error;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

const AFTER_HELP: &str = "\
Configuration: every subcommand starts from the built-in defaults (print them with
`occpose defaults`), merges the JSON file given by --config, then applies each
--set key=value (dotted keys, JSON values). Unknown keys are rejected.

Exit codes: 0 success, 1 runtime failure, 2 invalid usage or configuration
(the message names the offending key), 3 missing input file or directory.

File formats are described in FORMATS.md.";

#[derive(Parser, Debug)]
#[command(name = "occpose", version, about = "Occlusion-aware multi-person 3D pose estimation on synthetic scenes", after_help = AFTER_HELP)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set detector_train.epochs=4 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Global seed (same as --set seed=N).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (same as --set out_dir=PATH).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: one array file and JSON sidecar per scene.
    SynthGen {
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Write occlusion labels and cached targets into a dataset.
    Labelgen {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the detector on a labelled dataset.
    TrainDet {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the reasoning network on detector outputs and synthetic maps.
    TrainDsed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        /// Labelled dataset for synthetic batches (defaults to --data).
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// Train the pose refinement network on synthetic poses.
    TrainRefine,
    /// Run the pipeline and write one JSON file per frame.
    Infer {
        #[command(flatten)]
        models: Models,
    },
    /// Score the pipeline on a labelled dataset.
    Eval {
        #[command(flatten)]
        models: Models,
    },
    /// Run an ablation suite end to end.
    Ablate {
        #[arg(long, default_value = "table3")]
        suite: String,
    },
    /// Render loss curves from a run directory, and optionally one scene.
    Plot {
        /// Run directory holding loss or schedule CSV files.
        #[arg(long)]
        run: Option<PathBuf>,
        #[command(flatten)]
        scene: PlotScene,
    },
    /// Print the default configuration.
    Defaults,
}

#[derive(Args, Debug, Clone)]
pub struct Models {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    reasoner: Option<PathBuf>,
    #[arg(long)]
    refine: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct PlotScene {
    /// Dataset for the scene figures.
    #[arg(long, requires = "detector")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    detector: Option<PathBuf>,
    #[arg(long)]
    reasoner: Option<PathBuf>,
    /// Record index within the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands::*;
    let cfg = || -> Result<config::RunConfig, CliError> {
        let mut overrides = cli.common.set.iter().map(|s| config::parse_override(s)).collect::<Result<Vec<_>, _>>()?;
        if let Some(seed) = cli.common.seed {
            overrides.push(("seed".into(), seed.into()));
        }
        if let Some(out) = &cli.common.out {
            overrides.push(("out_dir".into(), out.display().to_string().into()));
        }
        config::load(cli.common.config.as_deref(), &overrides)
    };
    match &cli.command {
        Command::SynthGen { count } => synth_gen(&cfg()?, *count),
        Command::Labelgen { data } => labelgen(&cfg()?, data),
        Command::TrainDet { data } => train_det(&cfg()?, data),
        Command::TrainDsed { data, detector, synthetic } => train_dsed(&cfg()?, data, detector, synthetic.as_deref()),
        Command::TrainRefine => train_refine(&cfg()?),
        Command::Infer { models } => infer(&cfg()?, models),
        Command::Eval { models } => eval(&cfg()?, models),
        Command::Ablate { suite } => ablate(&cfg()?, suite),
        Command::Plot { run, scene } => plot(&cfg()?, run.as_deref(), scene),
        Command::Defaults => {
            print!("{}", config::documented_defaults());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let detail = serde_json::json!({"error": e.kind(), "message": e.to_string()});
            eprintln!("{detail}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
