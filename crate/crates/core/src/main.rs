use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zpg_core::cli::{run_experiment, CliError, ExperimentConfig, Task};

#[derive(Parser)]
#[command(name = "zpg", version, about = "Photon-counting statistics of emitter networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Photon-number distribution on a Fourier grid
    PnDist(Common),
    /// Click statistics from the 2^M corner solves
    Threshold(Common),
    /// Mean photon number, g2 and parity
    Fom(Common),
    /// Two-photon interference of identical sources
    Hom(Common),
    /// Haar-circuit TVD against ideal interference
    TvdBenchmark(Common),
    /// Timing of the pipeline against the recursive oracle
    Bench(Common),
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides output.directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides run.workers
    #[arg(long)]
    workers: Option<usize>,
    /// Base seed for Haar circuits
    #[arg(long)]
    seed: Option<u64>,
}

fn run(task: Task, args: Common) -> Result<(), CliError> {
    let mut config = ExperimentConfig::from_file(&args.config)?;
    if let Some(w) = args.workers {
        config.run.workers = Some(w);
    }
    if let Some(seed) = args.seed {
        config.apply_seed(seed);
    }
    let bundle = run_experiment(&config, Some(task))?;
    let dir = args.out.or_else(|| config.output.directory.clone()).unwrap_or_else(|| PathBuf::from("zpg-out"));
    for path in bundle.write(&dir, &config.output.formats)? {
        log::info!("wrote {}", path.display());
    }
    println!("{}", serde_json::to_string_pretty(&bundle.summary).unwrap_or_default());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (task, args) = match cli.command {
        Command::PnDist(a) => (Task::PnDist, a),
        Command::Threshold(a) => (Task::Threshold, a),
        Command::Fom(a) => (Task::Fom, a),
        Command::Hom(a) => (Task::Hom, a),
        Command::TvdBenchmark(a) => (Task::TvdBenchmark, a),
        Command::Bench(a) => (Task::BenchScaling, a),
    };
    match run(task, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("zpg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
