//! `synthaudit`: config-driven pipeline driver.
//!
//! Exit codes: 0 ok, 1 other failure, 2 config error, 3 training diverged,
//! 4 report conflict or schema mismatch.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use synthaudit_core::audit::{compare, format_comparison, read_report};
use synthaudit_core::experiment::{ExperimentConfig, Pipeline, Stage, StageOutcome};
use synthaudit_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "synthaudit", version, about = "Privacy, utility and fairness audit of synthetic training data")]
#[command(after_help = "Any `--section.key=value` argument overrides that config field, e.g. `--gan.gamma=0`.\n\
Relative output directories resolve under $SYNTHAUDIT_OUTPUT_ROOT when set.")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Rerun stages even when their artifacts are complete.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for data-parallel work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Zero wall-clock fields and timestamps in artifacts and logs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    GenCorpus,
    TrainGan,
    EmitSynth,
    TrainDownstream,
    Attack,
    Audit,
    /// All stages, ending with the audit report.
    Pipeline,
    /// Metric deltas `b - a` between two reports.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Match victim `A` of the first report with victim `B` of the second, as `A:B`.
        #[arg(long)]
        victims: Option<String>,
        #[arg(long)]
        json: bool,
    },
}

const FLAGS: [&str; 5] = ["config", "force", "jobs", "seed", "deterministic"];

/// Splits `--a.b=v` and `--a.b v` overrides out of the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') || FLAGS.contains(&key.as_str()) {
            rest.push(a);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::config(key.clone(), "override is missing a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn init_logging(deterministic: bool) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let b = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false);
    if deterministic {
        b.without_time().init();
    } else {
        b.init();
    }
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Error::config("--jobs", e.to_string()))?;
    }
    if let Command::Compare { a, b, victims, json } = &cli.command {
        let ra = read_report(a)?;
        let rb = read_report(b)?;
        let pair = match victims {
            Some(v) => Some(
                v.split_once(':')
                    .ok_or_else(|| Error::config("--victims", "expected `A:B`"))?,
            ),
            None => None,
        };
        let c = compare(&ra, &rb, pair)?;
        if *json {
            println!("{}", serde_json::to_string_pretty(&c).map_err(|e| Error::Serde(e.to_string()))?);
        } else {
            print!("{}", format_comparison(&c));
        }
        return Ok(());
    }

    let mut overrides = overrides;
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if cli.deterministic {
        overrides.push(("deterministic".into(), "true".into()));
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    let target = match cli.command {
        Command::GenCorpus => Stage::GenCorpus,
        Command::TrainGan => Stage::TrainGan,
        Command::EmitSynth => Stage::EmitSynth,
        Command::TrainDownstream => Stage::TrainDownstream,
        Command::Attack => Stage::Attack,
        Command::Audit | Command::Pipeline => Stage::Audit,
        Command::Compare { .. } => unreachable!("handled above"),
    };
    let pipeline = Pipeline::new(cfg, cli.force)?;
    tracing::info!(run_dir = %pipeline.root().display(), target = target.name(), "run");
    let done = pipeline.run(&[target])?;
    for (stage, outcome) in &done {
        let what = match outcome {
            StageOutcome::Ran => "ran",
            StageOutcome::Skipped => "skipped",
        };
        tracing::info!(stage = stage.name(), outcome = what, "stage summary");
    }
    if target == Stage::Audit {
        let report = read_report(&pipeline.report_path())?;
        println!("{}", report.digest);
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (rest, overrides) = match split_overrides(args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = Cli::parse_from(rest);
    init_logging(cli.deterministic);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %e, "failed");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, ov) = split_overrides(s(&[
            "synthaudit",
            "pipeline",
            "--gan.gamma=0",
            "--config",
            "x.toml",
            "--downstream.epochs",
            "3",
        ]))
        .unwrap();
        assert_eq!(rest, s(&["synthaudit", "pipeline", "--config", "x.toml"]));
        assert_eq!(
            ov,
            vec![("gan.gamma".to_string(), "0".to_string()), ("downstream.epochs".to_string(), "3".to_string())]
        );
        assert!(split_overrides(s(&["synthaudit", "--gan.gamma"])).is_err());
    }
}
