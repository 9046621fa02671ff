use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mose_cli::runner::{self, SweepAxis};

#[derive(Parser)]
#[command(name = "mose", version, about = "Online continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config.
    Run { config: PathBuf },
    /// Run a config across values of one axis and aggregate over seeds.
    Sweep {
        config: PathBuf,
        /// epochs, n_experts, memory, augment, rsd, direction or student
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write plot_data.csv for a run directory or a directory of runs.
    PlotData { run_dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => runner::run(&config).map(|runs| {
            for r in runs {
                println!(
                    "seed {}: ACC {:.4} AF {:.4} -> {}",
                    r.summary.seed,
                    r.summary.acc,
                    r.summary.af,
                    r.dir.display()
                );
            }
        }),
        Command::Sweep { config, axis, values } => axis
            .parse::<SweepAxis>()
            .and_then(|axis| runner::sweep(&config, axis, &values))
            .map(|out| {
                for row in out.rows.iter().filter(|r| r.metric == "acc") {
                    println!("{}={}: ACC {:.4} ± {:.4} ({} runs)", row.axis, row.value, row.mean, row.std, row.runs);
                }
                println!("{}", out.csv.display());
            }),
        Command::PlotData { run_dir } => runner::plot_data(&run_dir).map(|p| println!("{}", p.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
