use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradvi::io::{parse_config_with, run, ExitStatus, Kind};

#[derive(Parser)]
#[command(name = "gradvi", version, about = "Gradient-constrained variational and quasi-variational solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stationary variational inequality
    Elliptic(RunArgs),
    /// Stationary quasi-variational inequality
    Qvi(RunArgs),
    /// Evolution variational inequality
    Parabolic(RunArgs),
    /// Evolution problem with drift and reaction
    Transport(RunArgs),
    /// Evolution quasi-variational inequality
    QviEvolution(RunArgs),
    /// Sandpile growth with a fixed repose slope
    Sandpile(RunArgs),
    /// Variational, obstacle and complementarity formulations compared
    Verify(RunArgs),
    /// Sweep, refinement, dependence or stability study
    Study(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory (defaults to output.dir, then ./out)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override a config value, e.g. --set problem.delta=0.5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for sampled diagnostics
    #[arg(long)]
    seed: Option<u64>,
}

impl Command {
    fn split(self) -> (Kind, RunArgs) {
        match self {
            Self::Elliptic(a) => (Kind::Elliptic, a),
            Self::Qvi(a) => (Kind::Qvi, a),
            Self::Parabolic(a) => (Kind::Parabolic, a),
            Self::Transport(a) => (Kind::Transport, a),
            Self::QviEvolution(a) => (Kind::QviEvolution, a),
            Self::Sandpile(a) => (Kind::Sandpile, a),
            Self::Verify(a) => (Kind::Verify, a),
            Self::Study(a) => (Kind::Study, a),
        }
    }
}

fn exit(status: ExitStatus) -> ExitCode {
    ExitCode::from(status.code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (kind, args) = Cli::parse().command.split();
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return exit(ExitStatus::ConfigError);
        }
    };
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("solver.seed={seed}"));
    }
    let cfg = match parse_config_with(&text, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit(ExitStatus::ConfigError);
        }
    };
    if cfg.problem.kind != kind {
        eprintln!("error: the configuration declares kind `{}` but the subcommand is `{}`", cfg.problem.kind.name(), kind.name());
        return exit(ExitStatus::ConfigError);
    }
    let out = args
        .out
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let bundle = run(&cfg, &out);
    match bundle.summary.get("error").and_then(|e| e.as_str()) {
        Some(e) => eprintln!("{}: {e}", bundle.status.name()),
        None => eprintln!("{}: {}", bundle.status.name(), out.join("summary.json").display()),
    }
    exit(bundle.status)
}
