use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use distillfed::config::ExperimentConfig;
use distillfed::runner::{execute, RunOptions, Sweep};

#[derive(Parser)]
#[command(
    name = "distillfed",
    version,
    about = "One-shot federated learning from distilled client data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, local epochs, seed) cell of a config.
    Run(Common),
    /// Vary the number of clients with a fixed global distilled count.
    SweepClients(Common),
    /// Vary distilled points per class (distillation methods only).
    SweepImgcls(Common),
    /// Vary classes per client under the pathological partition.
    SweepCk(Common),
    /// Vary the straggler drop rate.
    SweepStragglers(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, env = "DISTILLFED_JOBS")]
    jobs: Option<usize>,
    /// Reuse reports already present in the output directory.
    #[arg(long)]
    resume: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (sweep, common) = match cli.command {
        Command::Run(c) => (Sweep::Run, c),
        Command::SweepClients(c) => (Sweep::Clients, c),
        Command::SweepImgcls(c) => (Sweep::ImgCls, c),
        Command::SweepCk(c) => (Sweep::Ck, c),
        Command::SweepStragglers(c) => (Sweep::Stragglers, c),
    };

    let cfg = match load(&common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let opts = RunOptions {
        out_dir: common
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out")),
        jobs: common
            .jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
        resume: common.resume,
    };

    let outcome = match execute(&cfg, sweep, &opts) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let failed = outcome.failures().count();
    println!(
        "{} cells ({} reused, {} failed); wrote {} and {}",
        outcome.results.len(),
        outcome.results.iter().filter(|r| r.resumed).count(),
        failed,
        outcome.aggregate_csv.display(),
        outcome.curves_csv.display()
    );
    if failed > 0 {
        for r in outcome.failures() {
            eprintln!(
                "failed: {}: {}",
                r.cell.id,
                r.outcome.as_ref().err().unwrap()
            );
        }
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    cfg.apply_seed_env()?;
    if common.jobs == Some(0) {
        anyhow::bail!("--jobs must be at least 1");
    }
    Ok(cfg)
}
