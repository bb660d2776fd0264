use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddsmc::experiment::{
    compare_proposals, exit_code, parse_config, run_experiment, target_table, CONFIG_HELP,
};
use ddsmc::Result;

const EXIT_HELP: &str = "Exit status: 0 success, 1 output I/O failure, 2 configuration error, 3 numeric or degeneracy error, 4 enumeration guard refusal.";

#[derive(Parser)]
#[command(
    name = "ddsmc",
    version,
    about = "Twisted SMC sampling from tabular discrete diffusion models",
    after_help = format!("{CONFIG_HELP}\n\n{EXIT_HELP}")
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one proposal and write samples, trace, metrics and density images.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `seed` from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `out` from the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every proposal in `proposals` from one seed and write comparison.csv.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the reward-tilted target table as CSV.
    EnumerateTarget {
        #[arg(long)]
        config: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            let summary = run_experiment(&cfg)?;
            println!("{summary} out={}", cfg.out.display());
        }
        Command::Compare { config } => {
            let cfg = parse_config(&config)?;
            for s in compare_proposals(&cfg)? {
                println!("{s}");
            }
            println!("wrote {}", cfg.out.join("comparison.csv").display());
        }
        Command::EnumerateTarget { config } => {
            let cfg = parse_config(&config)?;
            let table = target_table(&cfg)?;
            match std::io::stdout().lock().write_all(table.as_bytes()) {
                // reader went away (e.g. piped into `head`)
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                r => r?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ddsmc: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
