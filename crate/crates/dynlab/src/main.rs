use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynlab::config::SEED_ENV;
use dynlab::{cmd_analyze, cmd_compare, cmd_train, CliError, TrainOptions};

#[derive(Parser)]
#[command(name = "dynlab", version, about = "Layer-wise convergence dynamics of toy transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replace an existing run in the output directory.
        #[arg(long)]
        force: bool,
        /// Suppress per-checkpoint progress lines.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Compute metric series and report files for a run.
    Analyze {
        run_dir: PathBuf,
        /// Worker threads for metric computation (default: all cores).
        #[arg(long, value_parser = clap::value_parser!(u16).range(1..))]
        jobs: Option<u16>,
    },
    /// Align analyzed runs on a training-fraction axis.
    Compare {
        #[arg(required = true, num_args = 2..)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a deterministic synthetic text corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, force, quiet } => {
            let seed_override = match std::env::var(SEED_ENV) {
                Ok(v) => Some(v),
                Err(std::env::VarError::NotPresent) => None,
                Err(e) => return Err(CliError::usage(format!("{SEED_ENV}: {e}"))),
            };
            let opts = TrainOptions { seed_override, force, quiet };
            let dir = cmd_train(&config, &opts)?;
            println!("{}", dir.display());
        }
        Command::Analyze { run_dir, jobs } => {
            let out = cmd_analyze(&run_dir, jobs.map(usize::from))?;
            println!("{}", out.display());
        }
        Command::Compare { run_dirs, out } => {
            let report = cmd_compare(&run_dirs, &out)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!("layer-mean CKA to final at ~{:.0}% of training:", report.target_fraction * 100.0);
            for m in &report.models {
                println!(
                    "  {:<24} D={:<5} step {:>7}  att {}  mlp {}  mean {}",
                    m.model, m.model_dim, m.step, fmt(m.cka_att), fmt(m.cka_mlp), fmt(m.cka_mean)
                );
            }
            let verdict = match report.wider_converges_faster {
                Some(true) => "yes",
                Some(false) => "no",
                None => "undetermined",
            };
            println!("wider models converge faster: {verdict}");
            println!("{}", report.out_dir.display());
        }
        Command::GenCorpus { out, bytes, seed } => {
            let text = dynlab::corpus::synthetic_text(bytes, seed);
            std::fs::write(&out, text)
                .map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with code 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
