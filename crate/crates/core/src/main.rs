//! Command-line front end: `predict`, `chain`, `mlp`, `conv` and `verify`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use vanishlab::harness::{self, csv_string, ExperimentSpec, Kind};
use vanishlab::{Error, Result};

#[derive(Parser)]
#[command(name = "vanishlab", version, about = "Gradient and Hessian scaling of random deep networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the closed-form predictions and print JSON.
    Predict(Common),
    /// Scalar chain scans (`chain_scan`) or optimizer runs (`chain_train`).
    Chain(Common),
    /// MLP scans (`mlp_scan`) or Hessian spectra (`mlp_hessian`).
    Mlp(Common),
    /// Convolutional network scans.
    Conv(Common),
    /// Run the theory-versus-simulation suite; exits 1 if any check fails.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment spec (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Trials per depth; overrides `trials`.
    #[arg(long)]
    trials: Option<usize>,
    /// Output file; overrides `output`. Without one, CSV goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides the VANISHLAB_THREADS variable.
    #[arg(long)]
    threads: Option<usize>,
}

fn load(common: &Common, allowed: &[Kind], default: Option<Kind>) -> Result<ExperimentSpec> {
    let mut spec = match (&common.config, default) {
        (Some(path), _) => ExperimentSpec::from_path(path)?,
        (None, Some(kind)) => ExperimentSpec::new(kind, json!({}))?,
        (None, None) => return Err(Error::Config("--config is required".into())),
    };
    if !allowed.contains(&spec.kind) {
        let names: Vec<&str> = allowed.iter().map(|k| k.name()).collect();
        return Err(Error::Config(format!("kind {:?} does not belong to this subcommand (expected one of {names:?})", spec.kind.name())));
    }
    if let Some(s) = common.seed {
        spec.master_seed = s;
    }
    if let Some(t) = common.trials {
        spec.trials = t;
    }
    if let Some(o) = &common.out {
        spec.output = Some(o.clone());
    }
    Ok(spec)
}

fn run(cli: Cli) -> Result<bool> {
    let (common, allowed, default): (&Common, &[Kind], Option<Kind>) = match &cli.command {
        Command::Predict(c) => (c, &[Kind::Predict], None),
        Command::Chain(c) => (c, &[Kind::ChainScan, Kind::ChainTrain], None),
        Command::Mlp(c) => (c, &[Kind::MlpScan, Kind::MlpHessian], None),
        Command::Conv(c) => (c, &[Kind::ConvScan], None),
        Command::Verify(c) => (c, &[Kind::Verify], Some(Kind::Verify)),
    };
    let spec = load(common, allowed, default)?;
    let out = harness::execute(&spec, common.threads)?;
    match spec.kind {
        Kind::Predict => {
            let doc = out.prediction.clone().unwrap_or(Value::Null);
            println!("{}", serde_json::to_string_pretty(&doc).map_err(|e| Error::Io(e.to_string()))?);
        }
        Kind::Verify => {
            for c in &out.checks {
                println!("{}", c.line());
            }
            let failed = out.checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", out.checks.len());
        }
        _ if spec.output.is_none() => print!("{}", csv_string(&out.rows)?),
        _ => {}
    }
    Ok(out.passed())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(2)
        }
    }
}
