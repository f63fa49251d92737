//! Command-line front end: Monte Carlo runs, analytic CRB sweeps and invariant checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use irsloc_core::harness::{
    crb_sweep, emit_crb_csv, figure_table, run_experiment, table_csv, validate_suite, write_csv, ExperimentConfig,
    FIGURE_IDS,
};

#[derive(Parser)]
#[command(name = "irsloc", version, about = "IRS-assisted 3D target localization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Emit one figure layout (fig6 ... fig12) instead of the full table.
        #[arg(long)]
        figure: Option<String>,
        /// Output CSV path; defaults to `output_path` from the config, then stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of trials per sweep point.
        #[arg(long)]
        trials: Option<usize>,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Analytic CRB sweep; no trials are run.
    Crb {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite on the configured scene.
    Validate { config: PathBuf },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_path(path).with_context(|| format!("loading config {}", path.display()))
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn std::io::Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, figure, out, trials, seed } => {
            let mut cfg = load(&config)?;
            if let Some(t) = trials {
                cfg.experiment.trials = t;
                if let Some(a) = cfg.experiment.area.as_mut() {
                    a.trials = Some(t);
                }
            }
            if let Some(s) = seed {
                cfg.experiment.base_seed = s;
            }
            if let Some(id) = &figure {
                if !FIGURE_IDS.contains(&id.as_str()) {
                    bail!("unknown figure id {id:?}; expected one of {}", FIGURE_IDS.join(", "));
                }
            }
            let table = run_experiment(&cfg)?;
            let failed: usize = table.rows.iter().map(|r| r.trials_failed).sum();
            if failed > 0 {
                log::warn!("{failed} of {} trials failed", table.trials.len());
            }
            let data = match &figure {
                Some(id) => figure_table(&table, id)?,
                None => table_csv(&table),
            };
            let dest = out.or(cfg.experiment.output_path.clone());
            write_csv(open_out(dest.as_deref())?, &data)?;
            Ok(true)
        }
        Command::Crb { config, out } => {
            let cfg = load(&config)?;
            let rows = crb_sweep(&cfg)?;
            emit_crb_csv(&rows, open_out(out.as_deref())?)?;
            Ok(true)
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            let checks = validate_suite(&cfg)?;
            let mut all = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                all &= c.passed;
            }
            Ok(all)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
