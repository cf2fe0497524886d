use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use roadres::pipeline::{run_stages, Overrides, PipelineConfig, PipelineError, Stage};
use roadres::synth::{gen_synthetic, SyntheticScenario};

/// Road link resilience under extreme weather events.
#[derive(Parser)]
#[command(name = "roadres", version)]
struct Cli {
    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config; defaults to <workspace>/config.toml, then ./config.toml.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts and the manifest.
    #[arg(long)]
    workspace: Option<PathBuf>,
    /// Run a single declared event.
    #[arg(long)]
    event: Option<String>,
    /// Relative speed change threshold in percent, negative.
    #[arg(long, allow_negative_numbers = true)]
    threshold: Option<f64>,
    /// Hours of recovery tolerated inside one window.
    #[arg(long, allow_negative_numbers = true)]
    gap_hours: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    lookback_days: Option<i64>,
    /// Worker threads, 0 for all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the raw inputs.
    Ingest(Common),
    /// Merge links into TMC segments.
    Conflate(Common),
    /// Match reports to links.
    Match(Common),
    /// Hour-of-week baselines.
    Baseline(Common),
    /// Event windows, duration, change and AUC per link.
    Metrics(Common),
    /// UPS, hourly intensity, report windows and network series.
    Severity(Common),
    /// Welch tests of network change by intensity.
    Ttest(Common),
    /// Fit the configured models.
    Gam(Common),
    /// Human-readable summary.
    Report(Common),
    /// Every stage in order.
    Run(Common),
    /// Write a synthetic scenario with known truth.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to write into.
    #[arg(long)]
    workspace: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    links: usize,
    #[arg(long, default_value_t = 14)]
    days: i64,
    /// Half-width of uniform speed noise, mph.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
}

fn load(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let path = match (&common.config, &common.workspace) {
        (Some(p), _) => p.clone(),
        (None, Some(w)) if w.join("config.toml").exists() => w.join("config.toml"),
        _ => PathBuf::from("config.toml"),
    };
    let mut cfg = PipelineConfig::load(Path::new(&path))?;
    cfg.apply(&Overrides {
        workspace: common.workspace.clone(),
        event: common.event.clone(),
        threshold: common.threshold,
        gap_hours: common.gap_hours,
        lookback_days: common.lookback_days,
        jobs: common.jobs,
    })?;
    Ok(cfg)
}

fn stages(common: &Common, stages: &[Stage]) -> Result<(), PipelineError> {
    let cfg = load(common)?;
    let report = run_stages(&cfg, stages)?;
    for s in &report.stages {
        let state = if s.ran { "ran" } else { "up to date" };
        println!("{:<9} {state:<10} {}", s.stage.name(), s.outputs.join(" "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Ingest(c) => stages(c, &[Stage::Ingest]),
        Command::Conflate(c) => stages(c, &[Stage::Conflate]),
        Command::Match(c) => stages(c, &[Stage::Match]),
        Command::Baseline(c) => stages(c, &[Stage::Baseline]),
        Command::Metrics(c) => stages(c, &[Stage::Metrics]),
        Command::Severity(c) => stages(c, &[Stage::Severity]),
        Command::Ttest(c) => stages(c, &[Stage::Ttest]),
        Command::Gam(c) => stages(c, &[Stage::Gam]),
        Command::Report(c) => stages(c, &[Stage::Report]).and_then(|_| {
            let cfg = load(c)?;
            let text = std::fs::read_to_string(cfg.workspace_dir().join("report.txt"))
                .map_err(|e| PipelineError::Io(e.to_string()))?;
            print!("{text}");
            Ok(())
        }),
        Command::Run(c) => stages(c, &Stage::ALL),
        Command::Synth(a) => {
            let sc = SyntheticScenario {
                seed: a.seed,
                n_links: a.links,
                days: a.days,
                sigma: a.sigma,
                ..Default::default()
            };
            match gen_synthetic(&sc, &a.workspace) {
                Ok(out) => {
                    println!("wrote scenario to {}", out.dir.display());
                    Ok(())
                }
                Err(e) => Err(PipelineError::Config(e.to_string())),
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
