//! Finite-difference oracles shared by the integration tests.
#![allow(dead_code)]

use s2o_core::net::{Activation, ForwardTape, Gradients, Network};
use s2o_core::s2o::{activation_cov, s2o_matrix, Damping, S2OConfig};
use s2o_core::Matrix;

pub const FD_STEP: f64 = 1e-5;
pub const KINK_MARGIN: f64 = 1e-6;

pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Sign pattern of every ReLU pre-activation; `None` marks a value within
/// `KINK_MARGIN` of the kink.
fn relu_pattern(net: &Network, batches: &[&Matrix]) -> Vec<Option<bool>> {
    let mut out = Vec::new();
    for x in batches {
        let tape = net.forward(x).unwrap();
        for (layer, pre) in net.layers().iter().zip(&tape.pre) {
            if layer.activation == Activation::Relu {
                out.extend(pre.data().iter().map(|&h| if h.abs() < KINK_MARGIN { None } else { Some(h > 0.0) }));
            }
        }
    }
    out
}

fn smooth(base: &[Option<bool>], other: &[Option<bool>]) -> bool {
    base.iter().zip(other).all(|(a, b)| a.is_some() && a == b)
}

/// Compare `analytic` against central differences of `f` on every weight.
/// Coordinates whose ± perturbation moves any ReLU pre-activation of
/// `batches` across (or near) the kink are skipped.
pub fn check_weights(net: &Network, analytic: &Gradients, batches: &[&Matrix], f: impl Fn(&Network) -> f64) -> FdReport {
    let base = relu_pattern(net, batches);
    let mut rep = FdReport { max_rel: 0.0, checked: 0, skipped: 0 };
    for l in 0..net.num_layers() {
        for idx in 0..net.weight(l).data().len() {
            let mut plus = net.clone();
            plus.weight_mut(l).data_mut()[idx] += FD_STEP;
            let mut minus = net.clone();
            minus.weight_mut(l).data_mut()[idx] -= FD_STEP;
            if !smooth(&base, &relu_pattern(&plus, batches)) || !smooth(&base, &relu_pattern(&minus, batches)) {
                rep.skipped += 1;
                continue;
            }
            let fd = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
            rep.max_rel = rep.max_rel.max(rel_err(analytic.layers[l].data()[idx], fd));
            rep.checked += 1;
        }
    }
    rep
}

/// Same check for the gradient with respect to the input batch.
pub fn check_input(net: &Network, x: &Matrix, analytic: &Matrix, f: impl Fn(&Matrix) -> f64) -> FdReport {
    let base = relu_pattern(net, &[x]);
    let mut rep = FdReport { max_rel: 0.0, checked: 0, skipped: 0 };
    for idx in 0..x.data().len() {
        let mut plus = x.clone();
        plus.data_mut()[idx] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[idx] -= FD_STEP;
        if !smooth(&base, &relu_pattern(net, &[&plus])) || !smooth(&base, &relu_pattern(net, &[&minus])) {
            rep.skipped += 1;
            continue;
        }
        let fd = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        rep.max_rel = rep.max_rel.max(rel_err(analytic.data()[idx], fd));
        rep.checked += 1;
    }
    rep
}

/// `Σ_l ‖normalize((Σ_l + λ_l I)⁻¹)‖_F²` assembled from the public pieces,
/// inverting the h × h matrix directly whatever the batch size.
pub fn penalty_oracle(tape: &ForwardTape, cfg: &S2OConfig) -> f64 {
    cfg.layers(tape.pre.len()).into_iter().map(|l| layer_penalty_oracle(tape, l, &cfg.damping)).sum()
}

pub fn layer_penalty_oracle(tape: &ForwardTape, layer: usize, damping: &Damping) -> f64 {
    let cov = activation_cov(tape, layer).unwrap();
    let (lambda, _) = damping.resolve(&cov);
    s2o_core::linalg::frobenius_sq(&s2o_matrix(&cov, lambda).unwrap())
}
