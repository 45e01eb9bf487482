use std::path::PathBuf;
use std::process::ExitCode;

use cascadelab::scenario::{self, Manifest, RunOptions};
use cascadelab::Error;
use clap::{Parser, Subcommand};

/// Run deferral experiments on classifier cascades.
///
/// Set CASCADELAB_THREADS to cap the number of worker threads.
#[derive(Parser)]
#[command(name = "cascadelab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario config (or re-run a manifest) and write its artifacts.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir, then runs/<scenario>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render curve CSVs as an SVG chart.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate headline accuracy deltas between two runs.
    Compare { a: PathBuf, b: PathBuf },
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("CASCADELAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("CASCADELAB_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::Run { config, out, seed } => {
            let summary = scenario::run_scenario_file(&config, &RunOptions { out, seed })?;
            let m = &summary.manifest;
            println!("scenario {} -> {}", m.scenario, summary.out_dir.display());
            for run in &m.runs {
                let acc: Vec<String> = run.base_accuracies.iter().map(|a| format!("{a:.4}")).collect();
                println!("seed {}: base accuracies {}", run.seed, acc.join(" "));
            }
        }
        Command::Plot { csv, out } => {
            scenario::emit_plot(&csv, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Compare { a, b } => {
            let (ma, mb) = (Manifest::load(&a)?, Manifest::load(&b)?);
            let rows = scenario::compare_manifests(&ma, &mb)?;
            print!("{}", scenario::format_comparison(&ma, &mb, &rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
