//! The non-training commands: evaluation, correlation statistics, bounds and
//! the correlation-matrix simulation. Each writes its outputs into `out`.

use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::train::{accuracy_under, bound_inputs};
use crate::attacks::{self, build_attack, AttackSpec};
use crate::bounds::{self, BoundReport, StatsSummary};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::Network;
use crate::rng::{self, stream};
use crate::table::{fmt_f64, Table};
use crate::weight_stats::{self, CorrSource, DataKind, Fig3Row, Fig3Summary, LayerCorrStats};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(io_err(out))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(io_err(path))
}

pub fn checkpoint_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    match &cfg.checkpoint {
        Some(p) => cfg.resolve(p),
        None => out.join("checkpoint.json"),
    }
}

pub const EVAL_HEADER: &[&str] = &["attack", "norm", "epsilon", "steps", "accuracy"];

/// Clean accuracy on the test set, then one row per configured attack.
/// Zero-radius attacks leave the inputs untouched.
pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<Table> {
    cfg.validate()?;
    let net = Network::load(&checkpoint_path(cfg, out))?;
    let (_, test) = cfg.load_datasets()?;
    let mut t = Table::new(EVAL_HEADER);
    let clean = accuracy_under(&net, &test, None)?;
    t.push(vec!["clean".into(), String::new(), fmt_f64(0.0), "0".into(), fmt_f64(clean)]);
    for a in &cfg.attack_eval {
        let acc = if a.spec.epsilon == 0.0 {
            clean
        } else {
            let attack = build_attack(&a.method, a.spec)?;
            let f = |n: &Network, x: &Matrix, y: &[usize]| attack.perturb(n, x, y);
            accuracy_under(&net, &test, Some(&f))?
        };
        let norm = serde_json::to_value(a.spec.norm)?.as_str().unwrap_or_default().to_string();
        t.push(vec![
            a.method.clone(),
            norm,
            fmt_f64(a.spec.epsilon),
            a.spec.steps.to_string(),
            fmt_f64(acc),
        ]);
    }
    ensure_dir(out)?;
    t.write(&out.join("eval.csv"))?;
    Ok(t)
}

/// `ds` with every row replaced by its PGD adversarial counterpart under the
/// training attack, replayed with a fixed seed.
pub fn adversarial_copy(net: &Network, ds: &Dataset, spec: &AttackSpec, seed: u64) -> Result<Dataset> {
    let mut spec = *spec;
    spec.seed = rng::derive_seed(seed, stream::EVAL, 1);
    let mut parts = Vec::new();
    for start in (0..ds.len()).step_by(super::train::EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + super::train::EVAL_BATCH).min(ds.len())).collect();
        let x = ds.inputs.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        parts.push(attacks::pgd(net, &x, &y, &spec)?);
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    Dataset::new(Matrix::vstack(&refs), ds.labels.clone(), ds.num_classes, format!("{}-adv", ds.name))
}

/// Correlation statistics for clean and adversarial training rows, one
/// `stats_<layer>_<source>_<data>.csv` per layer and data kind.
pub fn stats_cmd(cfg: &RunConfig, out: &Path) -> Result<Vec<LayerCorrStats>> {
    cfg.validate()?;
    let net = Network::load(&checkpoint_path(cfg, out))?;
    let (train, _) = cfg.load_datasets()?;
    let sc = &cfg.stats;
    let clean = train.head(sc.data_limit.max(1));
    let adv = adversarial_copy(&net, &clean, &cfg.attack_train, cfg.training.seed)?;
    let n = net.num_layers();
    let layers: Vec<usize> = match (sc.layers.is_empty(), sc.source) {
        (false, _) => sc.layers.clone(),
        (true, CorrSource::Sampling) => (0..n).collect(),
        (true, CorrSource::Laplace) => vec![n - 1],
    };
    if let Some(&l) = layers.iter().find(|&&l| l >= n) {
        return Err(Error::Config(format!("stats layer {l} out of range for {n} layers")));
    }
    ensure_dir(out)?;
    let mut all = Vec::new();
    for (kind, ds) in [(DataKind::Clean, &clean), (DataKind::Adversarial, &adv)] {
        let stats: Vec<LayerCorrStats> = match sc.source {
            CorrSource::Sampling => {
                let samples = weight_stats::sample_weight_perturbations(&net, ds, &sc.sampling)?;
                layers
                    .iter()
                    .map(|&l| weight_stats::corr_from_samples(&samples.deltas, l, kind))
                    .collect::<Result<_>>()?
            }
            CorrSource::Laplace => layers
                .iter()
                .map(|&l| weight_stats::corr_from_laplace(&net, ds, l, &sc.damping, kind))
                .collect::<Result<_>>()?,
        };
        for s in &stats {
            s.to_table().write(&out.join(s.file_name()))?;
        }
        all.extend(stats);
    }
    Ok(all)
}

fn find_stats_file(cfg: &RunConfig, out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    let in_out = out.join(p);
    if in_out.exists() {
        in_out
    } else {
        cfg.resolve(p)
    }
}

/// Evaluates every configured bound kind; writes `bound.json` (one report per
/// kind) and `bound.csv` (one row per kind).
pub fn bound_cmd(cfg: &RunConfig, out: &Path) -> Result<Vec<BoundReport>> {
    cfg.validate()?;
    let net = Network::load(&checkpoint_path(cfg, out))?;
    let (train, _) = cfg.load_datasets()?;
    let mut stats = Vec::new();
    for p in &cfg.bound.stats_files {
        let t = Table::read(&find_stats_file(cfg, out, p))?;
        stats.extend(StatsSummary::from_table(&t)?);
    }
    let inputs = bound_inputs(cfg, &train);
    let reports: Vec<BoundReport> = cfg
        .bound
        .kinds
        .iter()
        .map(|&k| bounds::evaluate_bound(&net, &stats, &inputs, k))
        .collect::<Result<_>>()?;
    ensure_dir(out)?;
    write_json(&out.join("bound.json"), &reports)?;
    let mut t = Table::new(bounds::BOUND_HEADER);
    for r in &reports {
        t.rows.extend(r.to_table().rows);
    }
    t.write(&out.join("bound.csv"))?;
    Ok(reports)
}

/// Samples correlation matrices; writes `fig3.csv` and `fig3_summary.json`.
pub fn simulate_cmd(cfg: &RunConfig, out: &Path) -> Result<(Vec<Fig3Row>, Fig3Summary)> {
    let s = &cfg.simulate;
    let (rows, summary) = weight_stats::simulate_fig3(s.dim, s.n_samples, s.family, s.seed)?;
    ensure_dir(out)?;
    weight_stats::fig3_table(&rows).write(&out.join("fig3.csv"))?;
    write_json(
        &out.join("fig3_summary.json"),
        &serde_json::json!({
            "family": cfg.simulate_family_name(),
            "dim": s.dim,
            "seed": s.seed,
            "summary": summary,
        }),
    )?;
    Ok((rows, summary))
}
