//! Minibatch SGD over the registered training objectives.

use std::path::Path;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};
use crate::attacks::{self, AttackSpec};
use crate::bounds::{self, BoundInputs, BoundKind, BoundReport};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{loss, Gradients, Loss, Network, Seeds};
use crate::rng::{self, stream};
use crate::s2o::{self, S2OConfig};
use crate::table::{fmt_f64, Table};

/// Standard deviation of the Gaussian start of the TRADES inner maximization.
pub const TRADES_START_STD: f64 = 0.001;
/// Rows per forward pass during evaluation.
pub const EVAL_BATCH: usize = 256;
/// Steps of the PGD attack behind the `pgd_*` metrics.
pub const METRIC_PGD_STEPS: usize = 20;

pub struct StepContext<'a> {
    pub attack: AttackSpec,
    pub s2o: &'a S2OConfig,
    pub trades_beta: f64,
}

pub struct StepOutput {
    /// Task objective, penalty excluded.
    pub loss: f64,
    /// `‖A_x‖_F² + ‖A_{x′}‖_F²`; zero for methods without the penalty.
    pub penalty: f64,
    pub grads: Gradients,
}

/// One training objective: produces the loss and weight gradient for a batch.
pub trait TrainingMethod: Sync {
    fn method(&self) -> Method;
    fn step(&self, net: &Network, x: &Matrix, y: &[usize], ctx: &StepContext) -> Result<StepOutput>;
}

struct Standard;
struct Adversarial {
    s2o: bool,
}
struct Trades {
    s2o: bool,
}

fn ce_step(net: &Network, x: &Matrix, y: &[usize]) -> Result<(f64, Gradients, crate::net::ForwardTape)> {
    let tape = net.forward(x)?;
    let (value, dlogits) = loss::cross_entropy_grad(tape.logits(), y)?;
    let seeds = Seeds {
        logits: Some(&dlogits),
        ..Seeds::default()
    };
    let (g, _) = net.backprop(&tape, &seeds)?;
    Ok((value, g, tape))
}

fn add_penalty(
    net: &Network,
    out: &mut StepOutput,
    tape_clean: &crate::net::ForwardTape,
    tape_adv: &crate::net::ForwardTape,
    cfg: &S2OConfig,
) -> Result<()> {
    // α = 0 must leave the update bit-identical to the unpenalized method
    if cfg.alpha == 0.0 {
        return Ok(());
    }
    let (value, grads) = s2o::s2o_value_and_gradient(net, tape_clean, tape_adv, cfg)?;
    out.penalty = value;
    out.grads.axpy(1.0, &grads);
    Ok(())
}

impl TrainingMethod for Standard {
    fn method(&self) -> Method {
        Method::Standard
    }

    fn step(&self, net: &Network, x: &Matrix, y: &[usize], _ctx: &StepContext) -> Result<StepOutput> {
        let (loss, grads, _) = ce_step(net, x, y)?;
        Ok(StepOutput {
            loss,
            penalty: 0.0,
            grads,
        })
    }
}

impl TrainingMethod for Adversarial {
    fn method(&self) -> Method {
        if self.s2o {
            Method::AtS2o
        } else {
            Method::At
        }
    }

    fn step(&self, net: &Network, x: &Matrix, y: &[usize], ctx: &StepContext) -> Result<StepOutput> {
        let adv = attacks::pgd(net, x, y, &ctx.attack)?;
        let (loss, grads, tape_adv) = ce_step(net, &adv, y)?;
        let mut out = StepOutput {
            loss,
            penalty: 0.0,
            grads,
        };
        if self.s2o {
            let tape_clean = net.forward(x)?;
            add_penalty(net, &mut out, &tape_clean, &tape_adv, ctx.s2o)?;
        }
        Ok(out)
    }
}

/// Gaussian start around `x` for the TRADES inner maximization; row `i` uses
/// the stream `(seed, attack, i)`.
pub fn trades_start(x: &Matrix, spec: &AttackSpec) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let mut r = rng::rng_for(spec.seed, stream::ATTACK, i as u64);
        out.row_mut(i).iter_mut().for_each(|v| {
            let n: f64 = StandardNormal.sample(&mut r);
            *v += TRADES_START_STD * n;
        });
    }
    attacks::project(x, &out, spec.norm, spec.epsilon)
}

/// `CE(f(x), y) + β·KL(f(x) ‖ f(x′))` with its gradient through both branches.
pub fn trades_objective(
    net: &Network,
    x: &Matrix,
    adv: &Matrix,
    y: &[usize],
    beta: f64,
) -> Result<(f64, Gradients, crate::net::ForwardTape, crate::net::ForwardTape)> {
    let tape_clean = net.forward(x)?;
    let tape_adv = net.forward(adv)?;
    let (ce, mut d_clean) = loss::cross_entropy_grad(tape_clean.logits(), y)?;
    let (kl, dp, dq) = loss::kl_softmax_grad(tape_clean.logits(), tape_adv.logits())?;
    d_clean.axpy(beta, &dp);
    let d_adv = dq.scale(beta);
    let (mut g, _) = net.backprop(
        &tape_clean,
        &Seeds {
            logits: Some(&d_clean),
            ..Seeds::default()
        },
    )?;
    let (ga, _) = net.backprop(
        &tape_adv,
        &Seeds {
            logits: Some(&d_adv),
            ..Seeds::default()
        },
    )?;
    g.axpy(1.0, &ga);
    Ok((ce + beta * kl, g, tape_clean, tape_adv))
}

impl TrainingMethod for Trades {
    fn method(&self) -> Method {
        if self.s2o {
            Method::TradesS2o
        } else {
            Method::Trades
        }
    }

    fn step(&self, net: &Network, x: &Matrix, y: &[usize], ctx: &StepContext) -> Result<StepOutput> {
        let clean_logits = net.logits(x)?;
        let start = trades_start(x, &ctx.attack);
        let adv = attacks::pgd_from(
            net,
            x,
            &start,
            y,
            &ctx.attack,
            &Loss::KlFrom {
                reference: &clean_logits,
            },
        )?;
        let (loss, grads, tape_clean, tape_adv) = trades_objective(net, x, &adv, y, ctx.trades_beta)?;
        let mut out = StepOutput {
            loss,
            penalty: 0.0,
            grads,
        };
        if self.s2o {
            add_penalty(net, &mut out, &tape_clean, &tape_adv, ctx.s2o)?;
        }
        Ok(out)
    }
}

pub static REGISTRY: &[&dyn TrainingMethod] = &[
    &Standard,
    &Adversarial { s2o: false },
    &Trades { s2o: false },
    &Adversarial { s2o: true },
    &Trades { s2o: true },
];

pub fn training_method(method: Method) -> &'static dyn TrainingMethod {
    *REGISTRY.iter().find(|m| m.method() == method).expect("every method is registered")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean task objective over the epoch's steps; NaN-free by construction.
    pub train_loss: f64,
    pub clean_train: f64,
    pub clean_test: f64,
    pub pgd_train: f64,
    pub pgd_test: f64,
    /// `‖A_x‖_F²` of the clean train-metric rows.
    pub penalty: f64,
}

pub const METRICS_HEADER: &[&str] = &["epoch", "train_loss", "clean_train", "clean_test", "pgd_train", "pgd_test", "penalty"];

pub fn metrics_table(rows: &[EpochMetrics]) -> Table {
    let mut t = Table::new(METRICS_HEADER);
    for m in rows {
        t.push(vec![
            m.epoch.to_string(),
            fmt_f64(m.train_loss),
            fmt_f64(m.clean_train),
            fmt_f64(m.clean_test),
            fmt_f64(m.pgd_train),
            fmt_f64(m.pgd_test),
            fmt_f64(m.penalty),
        ]);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

pub fn timing_table(rows: &[EpochTiming]) -> Table {
    let mut t = Table::new(&["epoch", "train_seconds", "eval_seconds"]);
    for r in rows {
        t.push(vec![r.epoch.to_string(), fmt_f64(r.train_seconds), fmt_f64(r.eval_seconds)]);
    }
    t
}

/// Everything a run produces. Wall-clock timings are kept out of this record
/// so it is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub train_dataset: String,
    pub test_dataset: String,
    pub layer_dims: Vec<usize>,
    /// Metrics of the initial weights.
    pub init: EpochMetrics,
    pub metrics: Vec<EpochMetrics>,
    pub bounds: Vec<BoundReport>,
    pub checkpoint: String,
    pub note: String,
    #[serde(skip)]
    pub timing: Vec<EpochTiming>,
}

pub const RUN_NOTE: &str = "desk-scale run: metrics reproduce directions and invariants only, \
not absolute accuracies or bound values of large-scale experiments";

/// The PGD attack behind the `pgd_*` metrics: the training radius and norm,
/// 20 steps, fixed seed.
pub fn metric_attack(cfg: &RunConfig) -> AttackSpec {
    let mut spec = AttackSpec::linf(cfg.attack_train.epsilon, METRIC_PGD_STEPS);
    spec.norm = cfg.attack_train.norm;
    spec.seed = rng::derive_seed(cfg.training.seed, stream::EVAL, 0);
    spec
}

/// Accuracy on `ds`, optionally under `attack`, in fixed-size chunks.
pub fn accuracy_under(
    net: &Network,
    ds: &Dataset,
    attack: Option<&dyn Fn(&Network, &Matrix, &[usize]) -> Result<Matrix>>,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0.0;
    for start in (0..ds.len()).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(ds.len())).collect();
        let x = ds.inputs.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let x = match attack {
            Some(a) => a(net, &x, &y)?,
            None => x,
        };
        correct += loss::accuracy(&net.logits(&x)?, &y)? * idx.len() as f64;
    }
    Ok(correct / ds.len() as f64)
}

fn evaluate_epoch(
    net: &Network,
    cfg: &RunConfig,
    train_eval: &Dataset,
    test: &Dataset,
    epoch: usize,
    train_loss: f64,
) -> Result<EpochMetrics> {
    let spec = metric_attack(cfg);
    let pgd = |n: &Network, x: &Matrix, y: &[usize]| attacks::pgd(n, x, y, &spec);
    let tape = net.forward(&train_eval.inputs)?;
    let penalty = s2o::penalty_value(&tape, &cfg.s2o)?;
    Ok(EpochMetrics {
        epoch,
        train_loss,
        clean_train: accuracy_under(net, train_eval, None)?,
        clean_test: accuracy_under(net, test, None)?,
        pgd_train: accuracy_under(net, train_eval, Some(&pgd))?,
        pgd_test: accuracy_under(net, test, Some(&pgd))?,
        penalty,
    })
}

/// Largest ℓ2 norm of an input row.
pub fn max_input_norm(ds: &Dataset) -> f64 {
    (0..ds.len())
        .map(|i| ds.inputs.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Bound inputs from the config, filling unset fields from the data: `m` is
/// the training-set size, `b` the largest input norm and `ε` the training
/// radius in ℓ2 (`ε·√d` for ℓ∞).
pub fn bound_inputs(cfg: &RunConfig, train: &Dataset) -> BoundInputs {
    let b = &cfg.bound;
    let eps_l2 = match cfg.attack_train.norm {
        attacks::Norm::Linf => cfg.attack_train.epsilon * (train.dim() as f64).sqrt(),
        attacks::Norm::L2 => cfg.attack_train.epsilon,
    };
    BoundInputs {
        gamma: b.gamma,
        delta: b.delta,
        m: b.m.unwrap_or(train.len()),
        b: b.b.unwrap_or_else(|| max_input_norm(train)),
        epsilon: b.epsilon.unwrap_or(if cfg.training.method == Method::Standard { 0.0 } else { eps_l2 }),
        c: b.c,
    }
}

struct Sgd {
    velocity: Gradients,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) {
        for (l, (v, g)) in self.velocity.layers.iter_mut().zip(&grads.layers).enumerate() {
            let w = net.weight_mut(l);
            for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// Writes the artifacts of a (possibly partial) run into `out`.
pub fn write_run(out: &Path, record: &RunRecord, net: &Network) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    net.save(&out.join("checkpoint.json"))?;
    metrics_table(&record.metrics).write(&out.join("metrics.csv"))?;
    timing_table(&record.timing).write(&out.join("timing.csv"))?;
    let mut json = serde_json::to_string_pretty(record)?;
    json.push('\n');
    let p = out.join("run.json");
    std::fs::write(&p, json).map_err(|e| Error::Io { path: p, source: e })
}

/// Trains per `cfg`. When `out` is given, artifacts are written there; on
/// divergence the last good weights are written before the error returns.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<(RunRecord, Network)> {
    cfg.validate()?;
    let (train_ds, test_ds) = cfg.load_datasets()?;
    let t = &cfg.training;
    let dims = cfg.layer_dims(&train_ds);
    let mut net = Network::init(&dims, t.seed)?;
    let train_eval = train_ds.head(t.eval_train_limit.max(1));
    let method = training_method(t.method);
    let mut sgd = Sgd {
        velocity: Gradients::zeros_like(&net),
        momentum: t.momentum,
        weight_decay: t.weight_decay,
    };
    // the initial objective is the clean loss before any update
    let init_loss = loss::cross_entropy(&net.logits(&train_eval.inputs)?, &train_eval.labels)?;
    let mut record = RunRecord {
        config: cfg.clone(),
        train_dataset: train_ds.name.clone(),
        test_dataset: test_ds.name.clone(),
        layer_dims: dims,
        init: evaluate_epoch(&net, cfg, &train_eval, &test_ds, 0, init_loss)?,
        metrics: Vec::new(),
        bounds: Vec::new(),
        checkpoint: "checkpoint.json".into(),
        note: RUN_NOTE.into(),
        timing: Vec::new(),
    };

    let mut global_step = 0u64;
    for epoch in 0..t.epochs {
        let started = Instant::now();
        let lr = t.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        let shuffle_seed = rng::derive_seed(t.seed, stream::SHUFFLE, epoch as u64);
        for (step, (x, y)) in data::batches(&train_ds, t.batch_size, shuffle_seed)?.enumerate() {
            let mut attack = cfg.attack_train;
            attack.seed = rng::derive_seed(t.seed, stream::ATTACK, global_step);
            global_step += 1;
            let ctx = StepContext {
                attack,
                s2o: &cfg.s2o,
                trades_beta: cfg.trades_lambda,
            };
            let outcome = method.step(&net, &x, &y, &ctx);
            let diverged = match &outcome {
                Ok(o) => !(o.loss.is_finite() && o.penalty.is_finite() && o.grads.is_finite()),
                Err(Error::NonFinite { .. } | Error::NotPositiveDefinite { .. } | Error::DegenerateDiagonal { .. }) => {
                    true
                }
                Err(_) => false,
            };
            if diverged {
                if let Some(dir) = out {
                    write_run(dir, &record, &net)?;
                }
                return Err(Error::DivergedTraining { epoch, step });
            }
            let o = outcome?;
            let before = net.clone();
            sgd.step(&mut net, &o.grads, lr);
            if !net.layers().iter().all(|l| l.weight.is_finite()) {
                if let Some(dir) = out {
                    write_run(dir, &record, &before)?;
                }
                return Err(Error::DivergedTraining { epoch, step });
            }
            loss_sum += o.loss * y.len() as f64;
            rows += y.len();
        }
        let train_seconds = started.elapsed().as_secs_f64();
        let started = Instant::now();
        let m = match evaluate_epoch(&net, cfg, &train_eval, &test_ds, epoch + 1, loss_sum / rows as f64) {
            Ok(m) if m.train_loss.is_finite() && m.penalty.is_finite() => m,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                if let Some(dir) = out {
                    write_run(dir, &record, &net)?;
                }
                return Err(Error::DivergedTraining {
                    epoch,
                    step: rows.div_ceil(t.batch_size),
                });
            }
            Err(e) => return Err(e),
        };
        record.metrics.push(m);
        record.timing.push(EpochTiming {
            epoch: epoch + 1,
            train_seconds,
            eval_seconds: started.elapsed().as_secs_f64(),
        });
    }
    let inputs = bound_inputs(cfg, &train_ds);
    record.bounds = [BoundKind::Neyshabur22, BoundKind::Xiao24]
        .into_iter()
        .map(|k| bounds::evaluate_bound(&net, &[], &inputs, k))
        .collect::<Result<_>>()?;
    if let Some(dir) = out {
        write_run(dir, &record, &net)?;
    }
    Ok((record, net))
}
