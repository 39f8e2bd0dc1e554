use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use s2o_core::harness::{self, RunConfig};
use s2o_core::Error;

#[derive(Parser)]
#[command(name = "s2o", version, about = "Adversarial training with second-order statistics regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics.csv, timing.csv, run.json and checkpoint.json.
    Train(Common),
    /// Clean and robust accuracy of a checkpoint on the test set (eval.csv).
    Evaluate(Common),
    /// Weight-correlation statistics for clean and adversarial data.
    Stats(Common),
    /// Complexity terms of the configured bound kinds (bound.json, bound.csv).
    Bound(Common),
    /// Sample correlation matrices and their spectral summaries (fig3.csv).
    Simulate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, replacing the one in the config.
    #[arg(long)]
    seed: Option<u64>,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_IO: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::Invalid(_) | Error::InvalidMargin(_) => EXIT_CONFIG,
        Error::DivergedTraining { .. } => EXIT_DIVERGED,
        Error::Io { .. } | Error::BadMagic { .. } | Error::Truncated(_) | Error::CountMismatch { .. } => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = match (&common.out, &cfg.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => cfg.resolve(o),
        (None, None) => return Err(Error::Config("no output directory: pass --out or set output_dir".into())),
    };
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<String, Error> {
    let (cmd, common) = match &cli.command {
        Command::Train(c) => ("train", c),
        Command::Evaluate(c) => ("evaluate", c),
        Command::Stats(c) => ("stats", c),
        Command::Bound(c) => ("bound", c),
        Command::Simulate(c) => ("simulate", c),
    };
    let (cfg, out) = load(common)?;
    let out: &Path = &out;
    Ok(match cmd {
        "train" => {
            let (rec, _) = harness::train(&cfg, Some(out))?;
            match rec.metrics.last() {
                Some(m) => format!(
                    "epoch {}: clean_test {:.4} pgd_test {:.4}",
                    m.epoch, m.clean_test, m.pgd_test
                ),
                None => "no epochs; initialization written".into(),
            }
        }
        "evaluate" => {
            let t = harness::evaluate(&cfg, out)?;
            t.rows.iter().map(|r| format!("{} {}", r[0], r[4])).collect::<Vec<_>>().join("\n")
        }
        "stats" => {
            let stats = harness::stats_cmd(&cfg, out)?;
            stats.iter().map(|s| s.file_name()).collect::<Vec<_>>().join("\n")
        }
        "bound" => {
            let reports = harness::bound_cmd(&cfg, out)?;
            reports
                .iter()
                .map(|r| format!("{} complexity_term {:e}", r.bound_kind, r.complexity_term))
                .collect::<Vec<_>>()
                .join("\n")
        }
        _ => {
            let (_, s) = harness::simulate_cmd(&cfg, out)?;
            format!(
                "rho(frob, lam_max_proxy) {:.4}  rho(frob, det_lb) {:.4}  det violations {}",
                s.rho_frob_lam_max_proxy, s.rho_frob_det_lb, s.det_violations
            )
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
