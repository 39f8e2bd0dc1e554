//! White-box ℓ∞ / ℓ2 attacks on the `[0, 1]` input box.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{Loss, Network, Seeds};
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    Ce,
    CwMargin,
}

impl AttackLoss {
    fn loss(self) -> Loss<'static> {
        match self {
            AttackLoss::Ce => Loss::CrossEntropy,
            AttackLoss::CwMargin => Loss::CwMargin { kappa: 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub seed: u64,
    pub loss: AttackLoss,
}

impl AttackSpec {
    /// ℓ∞ cross-entropy PGD with step `ε/4` and no random start.
    pub fn linf(epsilon: f64, steps: usize) -> Self {
        AttackSpec {
            norm: Norm::Linf,
            epsilon,
            steps,
            step_size: epsilon / 4.0,
            random_start: false,
            seed: 0,
            loss: AttackLoss::Ce,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Invalid(format!("attack epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size <= 2.0 * self.epsilon) {
            return Err(Error::Invalid(format!(
                "step size {} must lie in (0, 2ε = {}]",
                self.step_size,
                2.0 * self.epsilon
            )));
        }
        if self.loss == AttackLoss::CwMargin && self.steps == 0 {
            return Err(Error::Invalid("CW margin attack needs at least one step".into()));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Project `cand` onto the `epsilon`-ball around `origin`, then onto the box.
/// Because the origin lies in the box, box clipping keeps the ball constraint.
pub fn project(origin: &Matrix, cand: &Matrix, norm: Norm, epsilon: f64) -> Matrix {
    let mut out = cand.clone();
    for i in 0..out.rows() {
        let o = origin.row(i);
        let row = out.row_mut(i);
        match norm {
            Norm::Linf => {
                for (x, &c) in row.iter_mut().zip(o) {
                    *x = x.clamp(c - epsilon, c + epsilon);
                }
            }
            Norm::L2 => {
                let d: Vec<f64> = row.iter().zip(o).map(|(x, c)| x - c).collect();
                let len = norm2(&d);
                if len > epsilon {
                    let s = epsilon / len;
                    for ((x, &c), di) in row.iter_mut().zip(o).zip(&d) {
                        *x = c + di * s;
                    }
                }
            }
        }
        row.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    }
    out
}

/// Largest per-row perturbation size in the given norm.
pub fn max_perturbation(origin: &Matrix, adv: &Matrix, norm: Norm) -> f64 {
    (0..origin.rows())
        .map(|i| {
            let d = origin.row(i).iter().zip(adv.row(i)).map(|(a, b)| b - a);
            match norm {
                Norm::Linf => d.map(f64::abs).fold(0.0, f64::max),
                Norm::L2 => d.map(|x| x * x).sum::<f64>().sqrt(),
            }
        })
        .fold(0.0, f64::max)
}

fn ascent_step(x: &mut Matrix, grad: &Matrix, norm: Norm, step: f64) {
    for i in 0..x.rows() {
        let g = grad.row(i);
        let scale = match norm {
            Norm::Linf => None,
            Norm::L2 => {
                let len = norm2(g);
                if len == 0.0 {
                    continue;
                }
                Some(step / len)
            }
        };
        for (xv, &gv) in x.row_mut(i).iter_mut().zip(g) {
            *xv += match scale {
                None => step * sign(gv),
                Some(s) => s * gv,
            };
        }
    }
}

/// Uniform draw from the ε-ball around each row; row `i` uses the stream
/// `(seed, attack, i)`.
pub fn random_start(origin: &Matrix, norm: Norm, epsilon: f64, seed: u64) -> Matrix {
    let mut out = origin.clone();
    let d = origin.cols();
    for i in 0..out.rows() {
        let mut r = rng::rng_for(seed, stream::ATTACK, i as u64);
        let row = out.row_mut(i);
        match norm {
            Norm::Linf => row.iter_mut().for_each(|x| *x += r.random_range(-epsilon..=epsilon)),
            Norm::L2 => {
                let dir: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
                let len = norm2(&dir);
                let radius = epsilon * r.random::<f64>().powf(1.0 / d as f64);
                if len > 0.0 {
                    row.iter_mut().zip(&dir).for_each(|(x, v)| *x += radius * v / len);
                }
            }
        }
    }
    project(origin, &out, norm, epsilon)
}

/// Projected ascent on `loss` from `start`, constrained around `origin`.
/// Returns, per row, the iterate with the highest row objective (the start
/// included).
pub fn pgd_from(
    net: &Network,
    origin: &Matrix,
    start: &Matrix,
    labels: &[usize],
    spec: &AttackSpec,
    loss: &Loss,
) -> Result<Matrix> {
    spec.validate()?;
    if origin.shape() != start.shape() {
        return Err(Error::InvalidShape("attack start does not match the batch".into()));
    }
    let mut x = project(origin, start, spec.norm, spec.epsilon);
    let mut best = x.clone();
    let mut best_val = vec![f64::NEG_INFINITY; x.rows()];
    for step in 0..=spec.steps {
        let tape = net.forward(&x)?;
        let rows = loss.row_values(tape.logits(), labels)?;
        for (i, &v) in rows.iter().enumerate() {
            if v > best_val[i] {
                best_val[i] = v;
                best.row_mut(i).copy_from_slice(x.row(i));
            }
        }
        if step == spec.steps {
            break;
        }
        let (_, dlogits) = loss.value_and_grad(tape.logits(), labels)?;
        let seeds = Seeds {
            logits: Some(&dlogits),
            ..Seeds::default()
        };
        let (_, grad) = net.backprop(&tape, &seeds)?;
        ascent_step(&mut x, &grad, spec.norm, spec.step_size);
        x = project(origin, &x, spec.norm, spec.epsilon);
    }
    Ok(best)
}

pub fn fgsm(net: &Network, batch: &Matrix, labels: &[usize], epsilon: f64) -> Result<Matrix> {
    if !(epsilon > 0.0) {
        return Err(Error::Invalid(format!("attack epsilon must be positive, got {epsilon}")));
    }
    let (_, grad) = net.input_gradient(batch, &Loss::CrossEntropy, labels)?;
    let mut x = batch.clone();
    ascent_step(&mut x, &grad, Norm::Linf, epsilon);
    Ok(project(batch, &x, Norm::Linf, epsilon))
}

pub fn pgd(net: &Network, batch: &Matrix, labels: &[usize], spec: &AttackSpec) -> Result<Matrix> {
    let start = if spec.random_start {
        random_start(batch, spec.norm, spec.epsilon, spec.seed)
    } else {
        batch.clone()
    };
    pgd_from(net, batch, &start, labels, spec, &spec.loss.loss())
}

pub fn cw_pgd(net: &Network, batch: &Matrix, labels: &[usize], spec: &AttackSpec) -> Result<Matrix> {
    if spec.loss != AttackLoss::CwMargin {
        return Err(Error::Invalid("cw_pgd requires the CW margin loss".into()));
    }
    pgd(net, batch, labels, spec)
}

/// A named attack with its parameters bound.
pub trait Attack: Send + Sync {
    fn name(&self) -> &'static str;
    fn spec(&self) -> &AttackSpec;
    fn perturb(&self, net: &Network, batch: &Matrix, labels: &[usize]) -> Result<Matrix>;
}

struct Fgsm(AttackSpec);
struct Pgd(AttackSpec);
struct CwPgd(AttackSpec);

impl Attack for Fgsm {
    fn name(&self) -> &'static str {
        "fgsm"
    }
    fn spec(&self) -> &AttackSpec {
        &self.0
    }
    fn perturb(&self, net: &Network, batch: &Matrix, labels: &[usize]) -> Result<Matrix> {
        fgsm(net, batch, labels, self.0.epsilon)
    }
}

impl Attack for Pgd {
    fn name(&self) -> &'static str {
        "pgd"
    }
    fn spec(&self) -> &AttackSpec {
        &self.0
    }
    fn perturb(&self, net: &Network, batch: &Matrix, labels: &[usize]) -> Result<Matrix> {
        pgd(net, batch, labels, &self.0)
    }
}

impl Attack for CwPgd {
    fn name(&self) -> &'static str {
        "cw_pgd"
    }
    fn spec(&self) -> &AttackSpec {
        &self.0
    }
    fn perturb(&self, net: &Network, batch: &Matrix, labels: &[usize]) -> Result<Matrix> {
        cw_pgd(net, batch, labels, &self.0)
    }
}

type AttackCtor = fn(AttackSpec) -> Result<Box<dyn Attack>>;

const REGISTRY: &[(&str, AttackCtor)] = &[
    ("fgsm", |s| {
        if s.norm != Norm::Linf {
            return Err(Error::Config("fgsm is defined for the linf norm only".into()));
        }
        Ok(Box::new(Fgsm(s)))
    }),
    ("pgd", |s| Ok(Box::new(Pgd(s)))),
    ("cw_pgd", |s| {
        Ok(Box::new(CwPgd(AttackSpec {
            loss: AttackLoss::CwMargin,
            ..s
        })))
    }),
];

pub fn attack_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn build_attack(method: &str, spec: AttackSpec) -> Result<Box<dyn Attack>> {
    let ctor = REGISTRY
        .iter()
        .find(|(n, _)| *n == method)
        .map(|(_, c)| c)
        .ok_or_else(|| Error::Config(format!("unknown attack {method:?}; known: {:?}", attack_names())))?;
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    ctor(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{loss, Activation, Layer};

    fn linear(w: Matrix) -> Network {
        Network::new(vec![Layer {
            weight: w,
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng::rng_for(seed, "attack-test", 0);
        Matrix::from_fn(rows, cols, |_, _| r.random_range(0.2..0.8))
    }

    #[test]
    fn fgsm_follows_constant_gradient_sign() {
        // two logits z0 = -x1 + x2, z1 = 0; CE with label 1 rises with z0,
        // so the loss gradient is proportional to (x1 - x2) direction's negative
        let net = linear(Matrix::from_rows(&[&[1.0, -1.0, 0.0], &[0.0, 0.0, 0.0]]));
        let x = Matrix::from_rows(&[&[0.5, 0.5]]);
        let adv = fgsm(&net, &x, &[1], 0.1).unwrap();
        let d: Vec<f64> = adv.row(0).iter().zip(x.row(0)).map(|(a, b)| a - b).collect();
        assert!((d[0] - 0.1).abs() < 1e-15 && (d[1] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn fgsm_leaves_zero_gradient_coordinates() {
        let net = linear(Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]));
        let x = Matrix::from_rows(&[&[0.5, 0.5]]);
        let adv = fgsm(&net, &x, &[1], 0.1).unwrap();
        assert_eq!(adv.get(0, 1), 0.5);
        let flat = linear(Matrix::zeros(2, 3));
        assert_eq!(fgsm(&flat, &x, &[0], 0.1).unwrap(), x);
    }

    #[test]
    fn fgsm_saturates_every_active_coordinate() {
        let net = Network::init(&[6, 8, 3], 1).unwrap();
        let x = random_batch(5, 6, 2);
        let labels = [0, 1, 2, 0, 1];
        let (_, g) = net.input_gradient(&x, &Loss::CrossEntropy, &labels).unwrap();
        let adv = fgsm(&net, &x, &labels, 0.1).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let d = adv.get(i, j) - x.get(i, j);
                if g.get(i, j) != 0.0 {
                    assert!((d.abs() - 0.1).abs() < 1e-12);
                    assert_eq!(sign(d), sign(g.get(i, j)));
                } else {
                    assert_eq!(d, 0.0);
                }
            }
        }
    }

    #[test]
    fn projection_examples() {
        let x = Matrix::from_rows(&[&[0.5, 0.5]]);
        let cand = Matrix::from_rows(&[&[0.7, 0.5]]);
        assert!((project(&x, &cand, Norm::Linf, 0.1).get(0, 0) - 0.6).abs() < 1e-15);

        let cand = Matrix::from_rows(&[&[0.5 + 0.12, 0.5 + 0.16]]);
        let p = project(&x, &cand, Norm::L2, 0.1);
        assert!((max_perturbation(&x, &p, Norm::L2) - 0.1).abs() < 1e-12);
        assert!((p.get(0, 0) - 0.56).abs() < 1e-12);
    }

    #[test]
    fn pgd_stays_in_ball_and_box() {
        let net = Network::init(&[6, 10, 3], 3).unwrap();
        let x = random_batch(8, 6, 4).map(|v| (v - 0.3).max(0.0));
        let labels = [0, 1, 2, 0, 1, 2, 0, 1];
        for norm in [Norm::Linf, Norm::L2] {
            let spec = AttackSpec {
                norm,
                random_start: true,
                seed: 5,
                ..AttackSpec::linf(0.3, 15)
            };
            let adv = pgd(&net, &x, &labels, &spec).unwrap();
            assert!(max_perturbation(&x, &adv, norm) <= 0.3 + 1e-9);
            assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(adv, pgd(&net, &x, &labels, &spec).unwrap());
        }
    }

    #[test]
    fn pgd_beats_fgsm_beats_clean() {
        let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let mut by_seed = Vec::new();
        for seed in 0..20 {
            let net = Network::init(&[10, 16, 4], seed).unwrap();
            let x = random_batch(16, 10, seed + 100);
            let clean = loss::cross_entropy(&net.logits(&x).unwrap(), &labels).unwrap();
            let f = loss::cross_entropy(&net.logits(&fgsm(&net, &x, &labels, 0.1).unwrap()).unwrap(), &labels).unwrap();
            let p = loss::cross_entropy(
                &net.logits(&pgd(&net, &x, &labels, &AttackSpec::linf(0.1, 20)).unwrap()).unwrap(),
                &labels,
            )
            .unwrap();
            by_seed.push((clean, f, p));
        }
        let median = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            (v[9] + v[10]) / 2.0
        };
        let c = median(by_seed.iter().map(|t| t.0).collect());
        let f = median(by_seed.iter().map(|t| t.1).collect());
        let p = median(by_seed.iter().map(|t| t.2).collect());
        assert!(p >= f && f >= c, "{p} {f} {c}");
    }

    #[test]
    fn cw_attack_never_lowers_the_margin() {
        let net = Network::init(&[6, 10, 3], 7).unwrap();
        let x = random_batch(10, 6, 8);
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let spec = AttackSpec {
            loss: AttackLoss::CwMargin,
            ..AttackSpec::linf(0.2, 20)
        };
        let adv = cw_pgd(&net, &x, &labels, &spec).unwrap();
        let before = loss::cw_margins(&net.logits(&x).unwrap(), &labels).unwrap();
        let after = loss::cw_margins(&net.logits(&adv).unwrap(), &labels).unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert!(a - b >= -1e-9);
        }
        assert!(cw_pgd(&net, &x, &labels, &AttackSpec::linf(0.2, 20)).is_err());
    }

    #[test]
    fn cw_keeps_misclassified_inputs_misclassified() {
        let net = linear(Matrix::from_rows(&[&[-5.0, 0.0, 0.0], &[5.0, 0.0, 0.0]]));
        let x = Matrix::from_rows(&[&[0.9, 0.5]]);
        let spec = AttackSpec {
            loss: AttackLoss::CwMargin,
            ..AttackSpec::linf(0.1, 10)
        };
        let adv = cw_pgd(&net, &x, &[0], &spec).unwrap();
        assert_eq!(loss::margin_loss(&net.logits(&adv).unwrap(), &[0], 0.0).unwrap(), 1.0);
    }

    #[test]
    fn two_class_linear_cw_matches_fgsm_direction() {
        let mut r = rng::rng_for(11, "cw-dir", 0);
        let w = Matrix::from_fn(2, 5, |_, _| r.sample::<f64, _>(StandardNormal));
        let net = linear(w);
        let x = Matrix::from_rows(&[&[0.5, 0.5, 0.5, 0.5]]);
        let spec = AttackSpec {
            loss: AttackLoss::CwMargin,
            ..AttackSpec::linf(0.05, 1)
        };
        // label the row with its prediction so the capped margin is active
        let z = net.logits(&x).unwrap();
        let y = usize::from(z.get(0, 1) > z.get(0, 0));
        let cw = cw_pgd(&net, &x, &[y], &AttackSpec { step_size: 0.05, ..spec }).unwrap();
        let f = fgsm(&net, &x, &[y], 0.05).unwrap();
        for j in 0..4 {
            assert_eq!(sign(cw.get(0, j) - 0.5), sign(f.get(0, j) - 0.5));
        }
    }

    #[test]
    fn registry_builds_by_name() {
        assert_eq!(attack_names(), vec!["fgsm", "pgd", "cw_pgd"]);
        let a = build_attack("cw_pgd", AttackSpec::linf(0.1, 5)).unwrap();
        assert_eq!(a.name(), "cw_pgd");
        assert_eq!(a.spec().loss, AttackLoss::CwMargin);
        assert!(matches!(build_attack("apgd", AttackSpec::linf(0.1, 5)), Err(Error::Config(_))));
        let bad = AttackSpec {
            step_size: 0.5,
            ..AttackSpec::linf(0.1, 5)
        };
        assert!(build_attack("pgd", bad).is_err());
    }
}
