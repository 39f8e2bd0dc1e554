//! Second-order statistics penalty on post-activation correlations.
//!
//! For the activations `a` (B × h) feeding a penalized layer:
//! `Σ = aᵀa / B`, `M = (Σ + λI)⁻¹`, `A = D^{-1/2} M D^{-1/2}` with
//! `D = diag(M)`, and `g = ‖A‖_F²`. The gradient is propagated back through
//! every step of that chain into the network weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::net::{loss, ForwardTape, Gradients, Network, Seeds};

/// Smallest ridge ever applied, whatever the damping rule yields.
pub const MIN_DAMPING: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Damping {
    /// `λ = c · tr(Σ) / h`.
    Relative(f64),
    /// Constant `λ`.
    Fixed(f64),
}

impl Damping {
    /// Ridge for `cov`, and `∂λ/∂tr(Σ)` (zero when fixed or floored).
    pub fn resolve(&self, cov: &Matrix) -> (f64, f64) {
        match *self {
            Damping::Fixed(v) => (v.max(MIN_DAMPING), 0.0),
            Damping::Relative(_) => self.resolve_trace(cov.trace(), cov.rows()),
        }
    }

    /// [`Damping::resolve`] from `tr(Σ)` and the dimension alone.
    pub fn resolve_trace(&self, trace: f64, dim: usize) -> (f64, f64) {
        match *self {
            Damping::Fixed(v) => (v.max(MIN_DAMPING), 0.0),
            Damping::Relative(c) => {
                let d = dim as f64;
                let v = c * trace / d;
                if v >= MIN_DAMPING {
                    (v, c / d)
                } else {
                    (MIN_DAMPING, 0.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPolicy {
    /// Only the activations entering the output layer.
    LastOnly,
    /// The input of every layer, the raw input included.
    All,
}

/// How per-layer terms are weighted in the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScale {
    /// `Σ_l ‖A_l‖_F²`.
    #[default]
    Total,
    /// `Σ_l ‖A_l‖_F² / h_l`, so `α` does not grow with the layer width.
    PerUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct S2OConfig {
    pub alpha: f64,
    pub damping: Damping,
    pub layer_policy: LayerPolicy,
    #[serde(default)]
    pub scale: PenaltyScale,
}

impl Default for S2OConfig {
    fn default() -> Self {
        S2OConfig {
            alpha: 0.1,
            damping: Damping::Relative(1e-3),
            layer_policy: LayerPolicy::LastOnly,
            scale: PenaltyScale::Total,
        }
    }
}

impl S2OConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("s2o alpha must be finite and nonnegative, got {}", self.alpha)));
        }
        match self.damping {
            Damping::Fixed(v) if !(v >= MIN_DAMPING && v.is_finite()) => {
                Err(Error::Config(format!("fixed damping must be at least {MIN_DAMPING}, got {v}")))
            }
            Damping::Relative(c) if !(c > 0.0 && c.is_finite()) => {
                Err(Error::Config(format!("relative damping must be positive, got {c}")))
            }
            _ => Ok(()),
        }
    }

    /// Layer indices whose input activations are penalized.
    pub fn layers(&self, num_layers: usize) -> Vec<usize> {
        match self.layer_policy {
            LayerPolicy::LastOnly => vec![num_layers - 1],
            LayerPolicy::All => (0..num_layers).collect(),
        }
    }
}

/// Second moment `aᵀa / B` of the input to layer `layer` (bias excluded).
pub fn activation_cov(tape: &ForwardTape, layer: usize) -> Result<Matrix> {
    if layer >= tape.pre.len() {
        return Err(Error::Invalid(format!("layer {layer} out of range")));
    }
    second_moment(tape.layer_input(layer))
}

fn second_moment(a: &Matrix) -> Result<Matrix> {
    if a.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(a.matmul_tn(a).scale(1.0 / a.rows() as f64).symmetrized())
}

/// `normalize((cov + damping·I)⁻¹)`.
pub fn s2o_matrix(cov: &Matrix, damping: f64) -> Result<Matrix> {
    let m = linalg::inverse_psd(&cov.add_diag(damping))?;
    linalg::normalize_to_correlation(&m)
}

struct Chain {
    value: f64,
    /// `∂g/∂a` for the penalized activations.
    grad_act: Matrix,
}

/// `M = (aᵀa/B + λI)⁻¹` and `aM`. When `B < h` this goes through the B × B
/// system `K = (aaᵀ + λB·I)⁻¹`: `M = (I − aᵀKa)/λ` and `aM = B·Ka`.
fn ridge_inverse(a: &Matrix, lambda: f64) -> Result<(Matrix, Matrix)> {
    let (b, h) = a.shape();
    if b >= h {
        let cov = second_moment(a)?;
        let m = linalg::inverse_psd(&cov.add_diag(lambda))?;
        let am = a.matmul(&m);
        return Ok((m, am));
    }
    let k = linalg::inverse_psd(&a.matmul_nt(a).symmetrized().add_diag(lambda * b as f64))?;
    let q = k.matmul(a);
    let mut m = a.matmul_tn(&q).scale(-1.0 / lambda);
    m = m.add_diag(1.0 / lambda).symmetrized();
    Ok((m, q.scale(b as f64)))
}

fn penalty_chain(a: &Matrix, damping: &Damping) -> Result<Chain> {
    if a.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let (b, h) = a.shape();
    let trace = linalg::frobenius_sq(a) / b as f64;
    let (lambda, dlambda_dtr) = damping.resolve_trace(trace, h);
    let (m, am) = ridge_inverse(a, lambda)?;
    let diag = m.diagonal();
    if let Some(index) = diag.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::DegenerateDiagonal {
            index,
            value: diag[index],
        });
    }
    let inv_sd: Vec<f64> = diag.iter().map(|v| 1.0 / v.sqrt()).collect();

    // g and ∂g/∂M in one sweep; off-diagonal entries of A are M_kj/(sd_k sd_j)
    let mut value = h as f64;
    let mut gm = Matrix::zeros(h, h);
    for k in 0..h {
        let (mk, gk) = (m.row(k), gm.row_mut(k));
        let mut off = 0.0;
        for j in 0..h {
            if j != k {
                let s = inv_sd[k] * inv_sd[j];
                let akj = mk[j] * s;
                off += akj * akj;
                gk[j] = 2.0 * akj * s;
            }
        }
        gk[k] = -2.0 * off * inv_sd[k] * inv_sd[k];
        value += off;
    }
    // ∂g/∂Σ = −M (∂g/∂M) M + (∂λ/∂tr Σ)·tr(·)·I, pulled back through Σ = aᵀa/B
    let x = gm.matmul(&m);
    let mut grad_act = am.matmul(&x).scale(-2.0 / b as f64);
    if dlambda_dtr != 0.0 {
        // M symmetric: tr(MX) = Σ_ij M_ij X_ij
        let tr_mx: f64 = m.data().iter().zip(x.data()).map(|(p, q)| p * q).sum();
        grad_act.axpy(-2.0 / b as f64 * dlambda_dtr * tr_mx, a);
    }
    Ok(Chain { value, grad_act })
}

/// Weight of layer `l`'s term in the training objective.
pub fn layer_weight(scale: PenaltyScale, width: usize) -> f64 {
    match scale {
        PenaltyScale::Total => 1.0,
        PenaltyScale::PerUnit => 1.0 / width as f64,
    }
}

struct Terms {
    raw: f64,
    weighted: f64,
    /// Seeds of the weighted value.
    seeds: Vec<(usize, Matrix)>,
}

fn terms(tape: &ForwardTape, cfg: &S2OConfig) -> Result<Terms> {
    let mut t = Terms {
        raw: 0.0,
        weighted: 0.0,
        seeds: Vec::new(),
    };
    for l in cfg.layers(tape.pre.len()) {
        let a = tape.layer_input(l);
        let w = layer_weight(cfg.scale, a.cols());
        let mut chain = penalty_chain(a, &cfg.damping)?;
        t.raw += chain.value;
        t.weighted += w * chain.value;
        if w != 1.0 {
            chain.grad_act.scale_in_place(w);
        }
        t.seeds.push((l, chain.grad_act));
    }
    Ok(t)
}

/// `Σ_l ‖A_l‖_F²` over the configured layers.
pub fn penalty_value(tape: &ForwardTape, cfg: &S2OConfig) -> Result<f64> {
    Ok(terms(tape, cfg)?.raw)
}

/// `Σ_l w_l ‖A_l‖_F²` with [`layer_weight`] `w_l`, and its `∂/∂(layer input)` seeds.
pub fn penalty_terms(tape: &ForwardTape, cfg: &S2OConfig) -> Result<(f64, Vec<(usize, Matrix)>)> {
    let t = terms(tape, cfg)?;
    Ok((t.weighted, t.seeds))
}

/// `‖A_x‖_F² + ‖A_{x′}‖_F²` summed over the configured layers.
pub fn s2o_penalty(tape_clean: &ForwardTape, tape_adv: &ForwardTape, cfg: &S2OConfig) -> Result<f64> {
    Ok(penalty_value(tape_clean, cfg)? + penalty_value(tape_adv, cfg)?)
}

/// The penalty as it enters the training objective: `α Σ_l w_l (‖A_x‖_F² + ‖A_{x′}‖_F²)`.
/// Equal to `α · s2o_penalty` under [`PenaltyScale::Total`].
pub fn s2o_objective(tape_clean: &ForwardTape, tape_adv: &ForwardTape, cfg: &S2OConfig) -> Result<f64> {
    Ok(cfg.alpha * (penalty_terms(tape_clean, cfg)?.0 + penalty_terms(tape_adv, cfg)?.0))
}

/// Gradient of [`s2o_objective`] with respect to the weights, the
/// adversarial batch held fixed, together with [`s2o_penalty`].
pub fn s2o_value_and_gradient(
    net: &Network,
    tape_clean: &ForwardTape,
    tape_adv: &ForwardTape,
    cfg: &S2OConfig,
) -> Result<(f64, Gradients)> {
    let mut total = Gradients::zeros_like(net);
    let mut value = 0.0;
    for tape in [tape_clean, tape_adv] {
        let t = terms(tape, cfg)?;
        value += t.raw;
        let seeds = Seeds {
            logits: None,
            activations: t.seeds.iter().map(|(l, g)| (*l, g)).collect(),
        };
        let (g, _) = net.backprop(tape, &seeds)?;
        total.axpy(cfg.alpha, &g);
    }
    Ok((value, total))
}

/// Gradient of [`s2o_objective`]; `α · ∇_w (‖A_x‖_F² + ‖A_{x′}‖_F²)` under
/// [`PenaltyScale::Total`].
pub fn s2o_gradient(net: &Network, tape_clean: &ForwardTape, tape_adv: &ForwardTape, cfg: &S2OConfig) -> Result<Gradients> {
    Ok(s2o_value_and_gradient(net, tape_clean, tape_adv, cfg)?.1)
}

/// Batch means of the Kronecker factors of the cross-entropy Hessian with
/// respect to the output-layer weights: `E[ã ãᵀ]` (bias column included) and
/// `E[diag(p) − p pᵀ]`.
pub fn kron_hessian_factors(tape: &ForwardTape, labels: &[usize], layer: usize) -> Result<(Matrix, Matrix)> {
    let n = tape.pre.len();
    if layer + 1 != n {
        return Err(Error::Unsupported(format!(
            "Hessian factors are available for the output layer ({}) only, got {layer}",
            n - 1
        )));
    }
    if labels.len() != tape.batch_size() {
        return Err(Error::InvalidShape("labels do not match the batch".into()));
    }
    let aug = tape.layer_input(layer).with_constant_column(1.0);
    let a_fac = second_moment(&aug)?;
    let p = loss::softmax(tape.logits());
    let b = p.rows() as f64;
    let h_fac = Matrix::diag(&column_sums(&p)).sub(&p.matmul_tn(&p)).scale(1.0 / b).symmetrized();
    Ok((a_fac, h_fac))
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        s.iter_mut().zip(m.row(i)).for_each(|(t, v)| *t += v);
    }
    s
}

/// Relative Frobenius gap `‖E[𝒜⊗ℋ] − E[𝒜]⊗E[ℋ]‖ / ‖E[𝒜⊗ℋ]‖` at the output layer.
pub fn kron_factorization_gap(tape: &ForwardTape, labels: &[usize]) -> Result<f64> {
    let layer = tape.pre.len() - 1;
    let (a_fac, h_fac) = kron_hessian_factors(tape, labels, layer)?;
    let aug = tape.layer_input(layer).with_constant_column(1.0);
    let p = loss::softmax(tape.logits());
    let b = p.rows() as f64;
    let mut exact: Option<Matrix> = None;
    for r in 0..p.rows() {
        let a = Matrix::new(1, aug.cols(), aug.row(r).to_vec())?;
        let pr = Matrix::new(1, p.cols(), p.row(r).to_vec())?;
        let outer_a = a.matmul_tn(&a);
        let hr = Matrix::diag(pr.row(0)).sub(&pr.matmul_tn(&pr));
        let term = linalg::kronecker(&outer_a, &hr)?;
        match exact.as_mut() {
            Some(e) => e.axpy(1.0 / b, &term),
            None => exact = Some(term.scale(1.0 / b)),
        }
    }
    let exact = exact.expect("nonempty batch");
    let approx = linalg::kronecker(&a_fac, &h_fac)?;
    let denom = linalg::frobenius_sq(&exact).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(linalg::frobenius_sq(&exact.sub(&approx)).sqrt() / denom)
}
