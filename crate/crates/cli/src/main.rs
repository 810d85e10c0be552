mod config;
mod manifest;
mod stages;

use clap::{Parser, Subcommand};
use config::RunConfig;
use itemcal::Error;
use manifest::{DirLock, RunManifest};
use stages::StageCtx;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

/// Item difficulty calibration pipeline: ingest response logs, calibrate a
/// Rasch model, draw a stratified sample, elicit LLM difficulty judgements,
/// fit Bradley-Terry strengths, and report bootstrapped rank agreement.
#[derive(Parser)]
#[command(name = "itemcal", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "itemcal.toml")]
    config: PathBuf,

    /// Only process design cells whose key contains this substring,
    /// e.g. "pairwise|soft".
    #[arg(long, global = true)]
    only: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic response logs, item bank, and truth file.
    Synth,
    /// Filter and sessionize response logs into weighted matrices.
    Ingest,
    /// Fit the Rasch model per domain.
    Calibrate,
    /// Draw the stratified evaluation sample and pair schedule.
    Sample,
    /// Run the judgement campaign (resumable).
    Elicit,
    /// Fit Bradley-Terry strengths from pairwise judgements.
    Fit,
    /// Bootstrap rank-agreement estimates and contrasts.
    Analyze,
    /// Render the agreement and cost report.
    Report,
    /// Run every stage in order.
    Run,
}

fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::StagePrecondition(_) | Error::EmptyDomain { .. } => 3,
        Error::Backend(_)
        | Error::Auth { .. }
        | Error::MalformedResponse(_)
        | Error::RetryExhausted { .. }
        | Error::CacheCorrupt { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> itemcal::Result<()> {
    let (config, config_raw) = RunConfig::load(&cli.config)?;
    let out = config.paths.output_dir.clone();
    let _lock = DirLock::acquire(&out)?;

    let mut manifest = RunManifest::load_or_new(&out)?;
    let mut seeds: BTreeMap<String, u64> = BTreeMap::new();
    seeds.insert("sampling".into(), config.sampling.seed);
    seeds.insert("schedule".into(), config.schedule.seed);
    seeds.insert("analysis".into(), config.analysis.seed);
    for (name, spec) in &config.backends {
        if let config::BackendSpec::Mock { seed, .. } = spec {
            seeds.insert(format!("backend.{name}"), *seed);
        }
    }
    manifest.align(&config_raw, seeds);

    let mut ctx = StageCtx {
        config: &config,
        out,
        manifest: &mut manifest,
        only: cli.only,
    };
    match cli.command {
        Command::Synth => ctx.synth(),
        Command::Ingest => ctx.ingest(),
        Command::Calibrate => ctx.calibrate(),
        Command::Sample => ctx.sample(),
        Command::Elicit => ctx.elicit(),
        Command::Fit => ctx.fit(),
        Command::Analyze => ctx.analyze(),
        Command::Report => ctx.report(),
        Command::Run => ctx.run_all(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code_for(&error))
        }
    }
}
