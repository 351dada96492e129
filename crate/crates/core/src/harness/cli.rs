//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::{load_config, ExperimentConfig};
use super::runner::{analyze, run_bound_comparison, simulate, HarnessError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const DEFAULT_OUT: &str = "results";

#[derive(Debug, Parser)]
#[command(name = "ebatc", version, about = "Event-based diffusion LMS experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment configuration file.
    config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; affects speed only.
    #[arg(long)]
    threads: Option<usize>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the Monte Carlo experiment and write learning curves.
    Simulate(Common),
    /// Stability conditions and bounds, without simulation.
    Analyze(Common),
    /// Simulate a small network and compare against the bounds.
    Compare(Common),
    /// Check the configuration only.
    Validate(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|source| HarnessError::Io { path, source })
}

/// Print to stdout; a closed pipe is not an error worth aborting for.
fn emit(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Validate(c) => {
            let cfg = load(&c)?;
            emit(&cfg.canonical());
            emit(&format!("config.sha256 = {}\n", cfg.hash()));
        }
        Command::Simulate(c) => {
            let cfg = load(&c)?;
            let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            let man = simulate(&cfg, &dir, c.threads)?;
            emit(&format!("wrote {} files to {}\n", man.files.len(), dir.display()));
        }
        Command::Analyze(c) => {
            let cfg = load(&c)?;
            let summary = analyze(&cfg)?;
            let text = summary.to_key_value();
            emit(&text);
            if let Some(dir) = &cfg.out {
                write(dir, "analysis.txt", &text)?;
                write(dir, "stability.csv", &summary.stability.to_csv())?;
            }
        }
        Command::Compare(c) => {
            let cfg = load(&c)?;
            let report = run_bound_comparison(&cfg, c.threads)?;
            let text = report.to_key_value();
            emit(&text);
            if let Some(dir) = &cfg.out {
                write(dir, "comparison.txt", &text)?;
                write(dir, "comparison.csv", &report.to_csv())?;
            }
        }
    }
    Ok(())
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
