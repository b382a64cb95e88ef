use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use wheelvo::config::{Mode, PipelineConfig};
use wheelvo::sim::Scenario;

mod overrides;
mod report;

const DEFAULT_CONFIG: &str = include_str!("../../../config/default.toml");

#[derive(Parser, Debug)]
#[command(name = "wheelvo", version, about = "Simulate, estimate and evaluate wheel-visual odometry runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write trajectories, metrics, frame log and map.
    Run(RunArgs),
    /// Run scenarios over several seeds and write a summary CSV.
    Batch(BatchArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Estimator config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ablation mode, overriding the config.
    #[arg(long)]
    mode: Option<Mode>,
    /// Override a config key, e.g. `--set window_size=8` or `--set noise.pixel=1.0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Noise seed; the scenario's seed when omitted.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct BatchArgs {
    #[arg(long, required = true, num_args = 1..)]
    scenario: Vec<PathBuf>,
    /// First seed; run r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    repeats: u64,
    #[command(flatten)]
    common: Common,
}

/// Errors in the inputs; reported with exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn load_scenario(path: &Path) -> anyhow::Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read scenario {}: {e}", path.display())))?;
    Scenario::from_toml(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_config(common: &Common) -> anyhow::Result<PipelineConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?,
        None => DEFAULT_CONFIG.to_string(),
    };
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| usage(format!("config: {e}")))?;
    for s in &common.set {
        overrides::apply(&mut table, s).map_err(usage)?;
    }
    let mut cfg: PipelineConfig =
        PipelineConfig::from_toml(&toml::to_string(&table).expect("table serializes")).map_err(|e| usage(format!("config: {e}")))?;
    if let Some(m) = common.mode {
        cfg.mode = m;
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create output directory {}: {e}", dir.display())))
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let scenario = load_scenario(&args.scenario)?;
    let cfg = load_config(&args.common)?;
    prepare_out(&args.common.out)?;
    let seed = args.seed.unwrap_or(scenario.seed);
    let outcome = report::execute(&scenario, seed, &cfg)?;
    report::write_run(&args.common.out, &outcome)?;
    let m = &outcome.metrics;
    println!(
        "{} seed {}: RMSE {:.4} m ({:.4}% of {:.1} m), dead reckoning {:.4} m",
        scenario.name, seed, m.rmse, m.percent, m.distance, m.dr_rmse
    );
    Ok(())
}

fn batch(args: BatchArgs) -> anyhow::Result<()> {
    let scenarios: Vec<Scenario> = args.scenario.iter().map(|p| load_scenario(p)).collect::<anyhow::Result<_>>()?;
    let cfg = load_config(&args.common)?;
    prepare_out(&args.common.out)?;
    let mut rows = Vec::new();
    for s in &scenarios {
        let base = args.seed.unwrap_or(s.seed);
        for r in 0..args.repeats {
            let seed = base + r;
            let row = match report::execute(s, seed, &cfg) {
                Ok(o) => report::Row::ok(&s.name, seed, o.metrics),
                Err(e) => report::Row::failed(&s.name, seed, &format!("{e:#}")),
            };
            rows.push(row);
        }
    }
    let path = args.common.out.join("summary.csv");
    std::fs::write(&path, report::summary_csv(&rows)?).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Batch(a) => batch(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
