use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cbf_compose::commands::{self, CompareMode};
use cbf_compose::par::Execution;
use cbf_compose::plot::PlotKind;

/// Safe exploration with incrementally composed barrier functions.
///
/// Log verbosity follows `CBF_LOG` (error, warn, info, debug, trace; default warn).
#[derive(Parser)]
#[command(name = "cbf-compose", version)]
struct Cli {
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explore a scenario and write the run artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `output.dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render SVG figures from a run directory.
    Plot {
        /// Run directory written by `run`.
        run: PathBuf,
        /// trajectory, levelsets, angle-arcs or gradnorm; all when omitted.
        #[arg(long, value_parser = parse_kind)]
        kind: Option<PlotKind>,
        /// Directory for the SVGs (default `<run>/plots`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Heading of the level-set and gradient slices.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        theta: f64,
    },
    /// Run one of the baseline comparisons.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// sdf-baseline, single-shot or rff-demo.
        #[arg(long, value_parser = parse_mode)]
        mode: CompareMode,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit a saved barrier or composite manifest.
    Verify {
        /// `composite.json` or a single `cbfs/cbf_NNN.json`.
        artifact: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the reference config with every default spelled out.
    Reference,
}

fn parse_kind(s: &str) -> Result<PlotKind, String> {
    s.parse().map_err(|e: cbf_compose::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<CompareMode, String> {
    s.parse().map_err(|e: cbf_compose::Error| e.to_string())
}

fn execute(cli: Cli) -> cbf_compose::Result<u8> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::Run { config, seed, out } => {
            let run = commands::cmd_run(&config, seed, out.as_deref(), exec)?;
            println!("{}", serde_json::to_string_pretty(&run.summary)?);
            Ok(run.exit_code() as u8)
        }
        Command::Plot { run, kind, out, theta } => {
            for p in commands::cmd_plot(&run, kind, out.as_deref(), theta, exec)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Compare { config, mode, seed, out } => {
            let outcome = commands::cmd_compare(&config, mode, seed, out.as_deref(), exec)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "mode": mode.as_str(),
                    "expected_outcome": outcome.expected_outcome,
                    "report": outcome.report_path,
                    "svg": outcome.svgs,
                }))?
            );
            Ok(0)
        }
        Command::Verify { artifact, config, out } => {
            let report = commands::cmd_verify(&artifact, &config, exec)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                std::fs::write(path, &text)?;
            }
            println!("{text}");
            Ok(if report.passed { 0 } else { 1 })
        }
        Command::Reference => {
            print!("{}", cbf_compose::config::reference_toml());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CBF_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
