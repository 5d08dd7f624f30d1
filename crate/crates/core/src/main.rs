use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use normlab::constants::{mc_dispersion_ratio, ConstantQuery, Scheme};
use normlab::dynamics::default_claim_check;
use normlab::harness::config::ExperimentConfig;
use normlab::harness::experiments::{
    claim_record, constant_record, run_experiment, train_from_config, ConstantRow, ExperimentName, CLAIM_HEADER,
    CONSTANT_HEADER,
};
use normlab::harness::train::{emit_csv, write_run_csv};

/// Exit status of a run that diverged.
const EXIT_DIVERGED: u8 = 2;

#[derive(Parser)]
#[command(
    name = "normlab",
    version,
    about = "Lp batch normalization, bounded weight normalization and weight-decay dynamics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and print the per-epoch CSV (or write it to `run.output`).
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a named multi-arm experiment into a directory.
    Experiment {
        /// wd-equivalence, norm-schedule, constants, claim, half-precision,
        /// bwn-invariance or lp-compare
        name: ExperimentName,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-form normalization constant against a Monte Carlo estimate.
    VerifyConstants {
        #[arg(long)]
        scheme: Scheme,
        #[arg(long)]
        n: usize,
        /// Only used by topk.
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 1_000_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Second-order check of the direction update on a scale-invariant probe.
    VerifyClaim {
        #[arg(long)]
        eta: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn csv_stdout<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let result = train_from_config(&cfg)?;
            if let Some(path) = &cfg.run.trajectory_out {
                result
                    .trajectory
                    .write_csv(BufWriter::new(File::create(path).with_context(|| path.display().to_string())?))?;
            }
            match &cfg.run.output {
                Some(path) => emit_csv(&result, path)?,
                None => write_run_csv(&result.epochs, io::stdout().lock())?,
            }
            if let Some(d) = result.divergence {
                eprintln!("diverged at epoch {} step {}", d.epoch, d.step);
                return Ok(ExitCode::from(EXIT_DIVERGED));
            }
        }
        Command::Experiment { name, config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let files = run_experiment(name, &cfg, &out)?;
            let mut stdout = io::stdout().lock();
            for f in files {
                writeln!(stdout, "{}", f.display())?;
            }
        }
        Command::VerifyConstants { scheme, n, k, trials, seed } => {
            let query = ConstantQuery::new(scheme, n, k)?;
            let estimate = mc_dispersion_ratio(query, trials, seed)?;
            let row = ConstantRow { query, closed_form: query.closed_form(), estimate };
            csv_stdout(CONSTANT_HEADER, [constant_record(&row)])?;
        }
        Command::VerifyClaim { eta, seed } => {
            let report = default_claim_check(eta, seed)?;
            csv_stdout(CLAIM_HEADER, [claim_record(&report)])?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("normlab: {e:#}");
            ExitCode::FAILURE
        }
    }
}
