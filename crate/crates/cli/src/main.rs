use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deepdp::{Scheme, PROBLEM_IDS};
use deepdp_cli::{aggregate, emit_outputs, exit_code, read_records, render_summary, run_experiment, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "deepdp", version, about = "Neural-network Monte-Carlo PDE and control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment and write records and summaries.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Added to every seed in the config.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize an existing records.csv.
    Report {
        #[arg(long)]
        records: PathBuf,
    },
    ListProblems,
    ListSchemes,
}

fn run(config: PathBuf, seed_offset: u64, out: Option<PathBuf>) -> Result<i32, CliError> {
    let mut cfg = ExperimentConfig::load(&config)?;
    cfg.seeds.iter_mut().for_each(|s| *s += seed_offset);
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let records = run_experiment(&cfg)?;
    for r in &records {
        match &r.error {
            None => eprintln!("seed {:>4}  estimate {:.6}  ({:.1} s)", r.seed, r.estimate, r.runtime_s),
            Some(e) => eprintln!("seed {:>4}  {:?}: {e}", r.seed, r.status),
        }
    }
    let summary = match aggregate(&records) {
        Ok(s) => s,
        Err(CliError::EmptySummary) => Vec::new(),
        Err(e) => return Err(e),
    };
    emit_outputs(&summary, &records, &cfg.output_dir)?;
    print!("{}", render_summary(&summary));
    Ok(exit_code(&records))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed_offset, out } => run(config, seed_offset, out),
        Command::Report { records } => read_records(&records).and_then(|r| aggregate(&r)).map(|s| {
            print!("{}", render_summary(&s));
            0
        }),
        Command::ListProblems => {
            PROBLEM_IDS.iter().for_each(|p| println!("{p}"));
            Ok(0)
        }
        Command::ListSchemes => {
            for s in Scheme::ALL {
                let kind = if s.is_semilinear() {
                    "semilinear"
                } else if s.is_fully_nonlinear() {
                    "fully nonlinear"
                } else {
                    "control"
                };
                println!("{:<15} {kind}", s.id());
            }
            Ok(0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
