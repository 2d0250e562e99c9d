//! Command-line front end: orchestrates campaigns, persists manifests,
//! and emits machine-readable CSV/JSON reports.
//!
//! Exit codes: 0 success; 2 invalid config; 3 solver or numerical
//! failure; 4 admissibility/guard violation; 5 statistically inconclusive
//! result (outputs still written).

mod commands;
mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use corrlab_core::error::Error;
use serde_json::json;

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "corrlab", version, about = "Lattice corrector laboratory")]
struct Cli {
    /// Path to the JSON experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores). Results are
    /// independent of this setting.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sample one environment and dump it with its sidecar.
    GenEnv,
    /// Solve the corrector for the configured direction and dump it.
    SolveCorrector,
    /// Monte Carlo estimate of the effective conductivity matrix.
    EffectiveMatrix,
    /// Evaluate rescaled-field samples over the (ε, λ) grid.
    SampleField,
    /// Variance, Gaussian-distance and rate-fit statistics.
    Stats,
    /// Normalized moment scan over (ε, λ, p).
    MomentScan,
    /// Corrector covariance table and the Q fit.
    Covariance,
    /// Normal-approximation bound estimate.
    SteinBound,
    /// Deterministic convolution-sum scans.
    LemmaCheck,
    /// Everything above in one run with cross-checks.
    FullCampaign,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenEnv => "gen-env",
            Command::SolveCorrector => "solve-corrector",
            Command::EffectiveMatrix => "effective-matrix",
            Command::SampleField => "sample-field",
            Command::Stats => "stats",
            Command::MomentScan => "moment-scan",
            Command::Covariance => "covariance",
            Command::SteinBound => "stein-bound",
            Command::LemmaCheck => "lemma-check",
            Command::FullCampaign => "full-campaign",
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::SolverDidNotConverge { .. } | Error::Accuracy(..) | Error::DegenerateSample(_) => 3,
        Error::Precondition(_) | Error::SizeGuard(_) | Error::Singularity(_) => 4,
        Error::Io(_) | Error::Format(_) => 1,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| Error::Config(format!("config parse error: {e}")))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &cli.output {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    cfg.materialize();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool, Error> {
    let cfg = load_config(cli)?;
    let name = cli.command.name();
    let outdir = commands::prepare_outdir(&cfg, name)?;
    log::info!("writing artifacts to {}", outdir.display());

    let started_ms =
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let clock = Instant::now();
    let outcome = match cli.command {
        Command::GenEnv => commands::gen_env(&cfg, &outdir)?,
        Command::SolveCorrector => commands::solve_corrector_cmd(&cfg, &outdir)?,
        Command::EffectiveMatrix => commands::effective_matrix_cmd(&cfg, &outdir)?,
        Command::SampleField => commands::sample_field(&cfg, &outdir)?,
        Command::Stats => commands::stats_cmd(&cfg, &outdir)?,
        Command::MomentScan => commands::moment_scan_cmd(&cfg, &outdir)?,
        Command::Covariance => commands::covariance_cmd(&cfg, &outdir)?,
        Command::SteinBound => commands::stein_bound_cmd(&cfg, &outdir)?,
        Command::LemmaCheck => commands::lemma_check(&cfg, &outdir)?,
        Command::FullCampaign => commands::full_campaign(&cfg, &outdir)?,
    };

    let manifest = json!({
        "subcommand": name,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "threads": rayon::current_num_threads(),
        "config": cfg,
        "config_hash": cfg.hash(),
        "started_unix_ms": started_ms,
        "wall_seconds": clock.elapsed().as_secs_f64(),
        "outputs": outcome.outputs,
        "summary": outcome.summary,
        "inconclusive": outcome.inconclusive,
    });
    fs::write(outdir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
    log::info!("done in {:.2}s", clock.elapsed().as_secs_f64());
    Ok(outcome.inconclusive)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: could not configure {threads} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(5),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
