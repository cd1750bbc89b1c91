use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctm_core::config::{parse_config, parse_duration, TwinConfig, DEFAULTS_HELP};
use ctm_core::diagnostics::format_report;
use ctm_core::dump::read_field;
use ctm_core::harness::{diagnose, run_forward, run_ftle, run_sweep, run_twin_command, threads_from_env};
use ctm_core::CtmError;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(
    name = "ctm",
    version,
    about = "Channel tracer transport, adjoint source reconstruction and information-loss diagnostics",
    after_help = format!("{DEFAULTS_HELP}\n\nExit codes: 0 success, 1 configuration error, 2 runtime failure.\nCTM_THREADS caps the worker count; outputs do not depend on it.")
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn duration_arg(s: &str) -> Result<f64, String> {
    parse_duration(s).ok_or_else(|| format!("`{s}` is not a duration (e.g. 90s, 3h, 2d)"))
}

#[derive(Subcommand)]
enum Command {
    /// One identical-twin experiment for a single window.
    Twin {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = duration_arg)]
        window: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Twin experiments for every configured window, with report CSV and manifest.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward transport of the configured plume, dumped at the configured cadence.
    Forward {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Integration length; defaults to the longest configured window.
        #[arg(long, value_parser = duration_arg)]
        window: Option<f64>,
    },
    /// Finite-time Lyapunov exponent field of the configured wind.
    Ftle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = duration_arg)]
        horizon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error metrics between stored truth and estimate dumps.
    Diagnose {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        background: f64,
    },
}

enum Failure {
    Config(CtmError),
    Runtime(CtmError),
}

fn load(path: &Path) -> Result<TwinConfig, Failure> {
    parse_config(path).map_err(Failure::Config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = threads_from_env();
    match cli.command {
        Command::Twin { config, window, out } => {
            let cfg = load(&config)?;
            let (run, _) = run_twin_command(&cfg, window, &out).map_err(Failure::Runtime)?;
            print!("{}", format_report(std::slice::from_ref(&run.report)));
        }
        Command::Sweep { config, out } => {
            let cfg = load(&config)?;
            let outcome = run_sweep(&cfg, &out, threads).map_err(Failure::Runtime)?;
            print!("{}", format_report(&outcome.reports()));
            let failed: Vec<String> = outcome
                .manifest
                .windows
                .iter()
                .filter_map(|w| w.error.as_ref().map(|e| format!("window {} s: {e}", w.window_s)))
                .collect();
            if !failed.is_empty() {
                for f in &failed {
                    eprintln!("ctm: {f}");
                }
                return Err(Failure::Runtime(CtmError::invalid(
                    "windows",
                    format!("{} of {} windows failed", failed.len(), outcome.manifest.windows.len()),
                )));
            }
        }
        Command::Forward { config, out, window } => {
            let cfg = load(&config)?;
            let window = window.unwrap_or_else(|| cfg.experiment.windows.last().copied().unwrap_or(0.0));
            let manifest = run_forward(&cfg, window, &out).map_err(Failure::Runtime)?;
            println!("wrote {} dumps to {}", manifest.files.len(), out.display());
        }
        Command::Ftle { config, horizon, out } => {
            let cfg = load(&config)?;
            run_ftle(&cfg, horizon, &out, threads).map_err(Failure::Runtime)?;
            println!("wrote {}", out.join("ftle.dat").display());
        }
        Command::Diagnose {
            truth,
            estimate,
            background,
        } => {
            let (t, _) = read_field(&truth).map_err(Failure::Runtime)?;
            let (e, _) = read_field(&estimate).map_err(Failure::Runtime)?;
            let m = diagnose(&t, &e, background).map_err(Failure::Runtime)?;
            print!("{}", m.csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("ctm: configuration error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("ctm: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
