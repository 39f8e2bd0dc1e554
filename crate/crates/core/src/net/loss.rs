//! Losses on logit matrices (one row per sample), with gradients w.r.t. the
//! logits. All batch losses are row means.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Scalar objectives the network can be differentiated against.
#[derive(Debug, Clone, Copy)]
pub enum Loss<'a> {
    /// Mean softmax cross-entropy.
    CrossEntropy,
    /// Carlini-Wagner logit margin `max_{j≠y} z_j − z_y`, capped at `kappa`.
    CwMargin { kappa: f64 },
    /// `KL(softmax(reference) ‖ softmax(logits))`, reference held fixed.
    KlFrom { reference: &'a Matrix },
}

impl Loss<'_> {
    pub fn value_and_grad(&self, logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        match self {
            Loss::CrossEntropy => cross_entropy_grad(logits, labels),
            Loss::CwMargin { kappa } => cw_margin_grad(logits, labels, *kappa),
            Loss::KlFrom { reference } => {
                let (v, _, dq) = kl_softmax_grad(reference, logits)?;
                Ok((v, dq))
            }
        }
    }

    pub fn value(&self, logits: &Matrix, labels: &[usize]) -> Result<f64> {
        let rows = self.row_values(logits, labels)?;
        Ok(match self {
            Loss::CwMargin { kappa } => rows.iter().map(|m| m.min(*kappa)).sum::<f64>() / rows.len() as f64,
            _ => rows.iter().sum::<f64>() / rows.len() as f64,
        })
    }

    /// Per-row objective used to rank attack iterates. For the CW margin this
    /// is the uncapped margin.
    pub fn row_values(&self, logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
        match self {
            Loss::CrossEntropy => {
                check_labels(logits, labels)?;
                let ls = log_softmax(logits);
                Ok(labels.iter().enumerate().map(|(i, &y)| -ls.get(i, y)).collect())
            }
            Loss::CwMargin { .. } => cw_margins(logits, labels),
            Loss::KlFrom { reference } => kl_rows(reference, logits),
        }
    }
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::InvalidShape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::InvalidLabel {
            label,
            classes: logits.cols(),
        });
    }
    Ok(())
}

pub fn log_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

pub fn softmax(logits: &Matrix) -> Matrix {
    log_softmax(logits).map(f64::exp)
}

pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    Loss::CrossEntropy.value(logits, labels)
}

/// Mean cross-entropy and its gradient `(softmax − onehot) / B`.
pub fn cross_entropy_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(logits, labels)?;
    let b = logits.rows() as f64;
    let ls = log_softmax(logits);
    let mut loss = 0.0;
    let mut grad = ls.map(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        loss -= ls.get(i, y);
        let g = grad.get(i, y);
        grad.set(i, y, g - 1.0);
    }
    grad.scale_in_place(1.0 / b);
    Ok((loss / b, grad))
}

/// Fraction of rows with `z_y ≤ γ + max_{j≠y} z_j`; `γ = 0` is the 0-1 error.
pub fn margin_loss(logits: &Matrix, labels: &[usize], gamma: f64) -> Result<f64> {
    let margins = cw_margins(logits, labels)?;
    let hits = margins.iter().filter(|&&m| -m <= gamma).count();
    Ok(hits as f64 / margins.len() as f64)
}

/// Fraction of rows whose arg-max equals the label (ties count as errors).
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    Ok(1.0 - margin_loss(logits, labels, 0.0)?)
}

fn best_other(row: &[f64], y: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (j, &v) in row.iter().enumerate() {
        if j != y && v > best.1 {
            best = (j, v);
        }
    }
    best
}

/// Per-row `max_{j≠y} z_j − z_y`.
pub fn cw_margins(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    if logits.cols() < 2 {
        return Err(Error::InvalidShape("margin needs at least two classes".into()));
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            best_other(row, y).1 - row[y]
        })
        .collect())
}

fn cw_margin_grad(logits: &Matrix, labels: &[usize], kappa: f64) -> Result<(f64, Matrix)> {
    let margins = cw_margins(logits, labels)?;
    let b = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total += margins[i].min(kappa);
        if margins[i] < kappa {
            let (j, _) = best_other(logits.row(i), y);
            grad.set(i, j, 1.0 / b);
            grad.set(i, y, -1.0 / b);
        }
    }
    Ok((total / b, grad))
}

fn check_pair(p: &Matrix, q: &Matrix) -> Result<()> {
    if p.shape() != q.shape() {
        return Err(Error::InvalidShape(format!(
            "KL between {:?} and {:?} logits",
            p.shape(),
            q.shape()
        )));
    }
    Ok(())
}

fn kl_rows(p_logits: &Matrix, q_logits: &Matrix) -> Result<Vec<f64>> {
    check_pair(p_logits, q_logits)?;
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    Ok((0..lp.rows())
        .map(|i| {
            lp.row(i)
                .iter()
                .zip(lq.row(i))
                .map(|(a, b)| a.exp() * (a - b))
                .sum::<f64>()
                .max(0.0)
        })
        .collect())
}

/// Mean row-wise `KL(softmax(p) ‖ softmax(q))`, computed in log space.
pub fn kl_softmax(p_logits: &Matrix, q_logits: &Matrix) -> Result<f64> {
    let rows = kl_rows(p_logits, q_logits)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Mean KL and its gradients w.r.t. both logit matrices:
/// `∂/∂z_p = p ⊙ (log p − log q − KL_row) / B`, `∂/∂z_q = (q − p) / B`.
pub fn kl_softmax_grad(p_logits: &Matrix, q_logits: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    check_pair(p_logits, q_logits)?;
    let b = p_logits.rows() as f64;
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let (rows, cols) = lp.shape();
    let mut dp = Matrix::zeros(rows, cols);
    let mut dq = Matrix::zeros(rows, cols);
    let mut total = 0.0;
    for i in 0..rows {
        let kl: f64 = lp.row(i).iter().zip(lq.row(i)).map(|(a, c)| a.exp() * (a - c)).sum();
        total += kl;
        for j in 0..cols {
            let p = lp.get(i, j).exp();
            let q = lq.get(i, j).exp();
            dp.set(i, j, p * (lp.get(i, j) - lq.get(i, j) - kl) / b);
            dq.set(i, j, (q - p) / b);
        }
    }
    Ok(((total / b).max(0.0), dp, dq))
}
