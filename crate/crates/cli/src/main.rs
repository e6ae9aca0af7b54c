//! `visco`: runs configured experiments and writes JSON/CSV reports.
//!
//! Exit codes: 0 pass, 1 usage or invalid input, 2 finding.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};
use visco_core::Error;

use commands::{pretty, Outcome};

const OUTPUT_ENV: &str = "VISCO_OUTPUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "visco", version, about = "Gradient-flow experiments for 1D viscoelasticity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override `flow.rtol`.
    #[arg(long, global = true)]
    rtol: Option<f64>,
    /// Output directory (takes precedence over VISCO_OUTPUT_DIR and the config).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Solve the flow from `initial` and check energy dissipation.
    Simulate,
    /// Distance between `initial` and `distance.target`.
    Distance,
    /// Relaxed geodesic between `initial` and `distance.target`, with the path as CSV.
    Geodesic,
    /// Contraction of two flows against the rate envelope.
    Contraction,
    /// Evolution variational inequality along the flow from `initial`.
    Evi,
    /// Scan of the refinement counterexample over `counterexample.m`.
    Counterexample,
    /// Convergence of the flow along a resolution ladder.
    Refine,
    /// Cross-resolution growth envelope study.
    Envelope,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Distance => "distance",
            Command::Geodesic => "geodesic",
            Command::Contraction => "contraction",
            Command::Evi => "evi",
            Command::Counterexample => "counterexample",
            Command::Refine => "refine",
            Command::Envelope => "envelope",
        }
    }
}

/// Library errors that describe the input map to 1, the rest are findings.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidParameter(_)
        | Error::InvalidResolution(_)
        | Error::InvalidLevel(_)
        | Error::DimensionMismatch { .. }
        | Error::Invariant(_)
        | Error::UnsupportedLaw(_)
        | Error::Io(_)
        | Error::Parse(_) => 1,
        Error::AssumptionViolation { .. }
        | Error::LeftDomain { .. }
        | Error::StiffnessFailure { .. }
        | Error::IntegrityFailure { .. }
        | Error::PropertyViolation(_)
        | Error::ConstructionBug(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Result<u8, (u8, String)> {
    let started = SystemTime::now();
    let usage = |m: String| (1, m);
    // the counterexample has no law-dependent input and may run without a config
    let (text, config_name) = match &cli.config {
        Some(path) => (
            std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?,
            path.display().to_string(),
        ),
        None if cli.command == Command::Counterexample => ("[law]\nid = \"appendix\"\n".to_string(), "<built-in>".into()),
        None => return Err(usage("--config is required for this command".into())),
    };
    let mut cfg = config::parse(&text).map_err(|e| usage(format!("{config_name}: {e}")))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(rtol) = cli.rtol {
        cfg.flow.rtol = rtol;
    }
    cfg.flow.validate().map_err(|e| usage(e.to_string()))?;

    let base = cli
        .config
        .as_ref()
        .and_then(|p| p.parent())
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let out_dir = cli
        .output_dir
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| cfg.output_dir.as_ref().map(|d| base.join(d)))
        .unwrap_or_else(|| PathBuf::from("visco-output"));

    let outcome: Outcome = match cli.command {
        Command::Simulate => commands::simulate(&cfg, &base),
        Command::Distance => commands::distance(&cfg, &base),
        Command::Geodesic => commands::geodesic(&cfg, &base),
        Command::Contraction => commands::contraction(&cfg, &base),
        Command::Evi => commands::evi(&cfg, &base),
        Command::Counterexample => commands::counterexample(&cfg),
        Command::Refine => commands::refine(&cfg, &base),
        Command::Envelope => commands::envelope(&cfg),
    }
    .map_err(|e| (exit_code(&e), e.to_string()))?;

    let name = cli.command.name();
    let status = if outcome.findings.is_empty() { "pass" } else { "finding" };
    let report = json!({
        "command": name,
        "library_version": visco_core::VERSION,
        "config_sha256": hex::encode(Sha256::digest(text.as_bytes())),
        "seed": cfg.seed,
        "rtol": cfg.flow.rtol,
        "status": status,
        "findings": outcome.findings,
        "report": outcome.report,
    });
    let io_err = |e: std::io::Error| usage(format!("{}: {e}", out_dir.display()));
    std::fs::create_dir_all(&out_dir).map_err(io_err)?;
    for (file, bytes) in &outcome.artifacts {
        std::fs::write(out_dir.join(file), bytes).map_err(io_err)?;
    }
    std::fs::write(out_dir.join(format!("{name}.json")), pretty(&report)).map_err(io_err)?;
    let finished = SystemTime::now();
    let sidecar = json!({
        "started_unix": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        "elapsed_seconds": finished.duration_since(started).map(|d| d.as_secs_f64()).unwrap_or(0.0),
    });
    std::fs::write(out_dir.join(format!("{name}.run.json")), pretty(&sidecar)).map_err(io_err)?;

    for line in &outcome.summary {
        println!("{line}");
    }
    println!("report: {}", out_dir.join(format!("{name}.json")).display());
    if outcome.findings.is_empty() {
        println!("status: pass");
        Ok(0)
    } else {
        for f in &outcome.findings {
            eprintln!("finding: {f}");
        }
        Ok(2)
    }
}
