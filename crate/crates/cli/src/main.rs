use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use recurx_cli::{parse_config, rereport, run, ConfigError, ExperimentKind, RunOptions};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "recurx", version, about = "Fixed points of recursively applied explainers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Feature-mask recursion over a trained classifier.
    Feature(ExperimentArgs),
    /// Prototype-system sweep.
    Proto(ExperimentArgs),
    /// Sparse-autoencoder hidden-state recursion.
    Sae(ExperimentArgs),
    /// Monte Carlo study of linear recursion dynamics.
    LinearMc(ExperimentArgs),
    /// Re-aggregate summaries from a `records.json`.
    Report(ReportArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir` and RECURX_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Class count for the census; defaults to one past the largest label.
    #[arg(long)]
    classes: Option<usize>,
}

fn experiment(kind: ExperimentKind, args: ExperimentArgs) -> ExitCode {
    let cfg = match parse_config(&args.config) {
        Ok(cfg) if cfg.kind == kind => cfg,
        Ok(cfg) => {
            let err = ConfigError::ValidationError {
                key: "kind".into(),
                reason: format!("config is for `{}`, not `{}`", cfg.kind.as_str(), kind.as_str()),
            };
            eprintln!("config error: {err}");
            return ExitCode::from(EXIT_CONFIG);
        }
        Err(err) => {
            eprintln!("config error: {err}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if args.jobs == Some(0) {
        eprintln!("config error: --jobs must be >= 1");
        return ExitCode::from(EXIT_CONFIG);
    }
    let opts = RunOptions {
        seed: args.seed,
        out: args.out,
        jobs: args.jobs,
    };
    match run(&cfg, &opts) {
        Ok(out) => {
            println!("wrote {} files to {}", out.manifest.files.len() + 1, out.dir.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Feature(a) => experiment(ExperimentKind::Feature, a),
        Command::Proto(a) => experiment(ExperimentKind::Proto, a),
        Command::Sae(a) => experiment(ExperimentKind::Sae, a),
        Command::LinearMc(a) => experiment(ExperimentKind::LinearMc, a),
        Command::Report(a) => match rereport(&a.records, a.classes, &a.out) {
            Ok(files) => {
                println!("wrote {} files to {}", files.len(), a.out.display());
                ExitCode::SUCCESS
            }
            Err(err) => {
                eprintln!("error: {err}");
                ExitCode::from(EXIT_RUNTIME)
            }
        },
    }
}
