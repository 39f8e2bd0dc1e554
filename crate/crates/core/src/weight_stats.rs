//! Second-order statistics of weight perturbations.
//!
//! A layer's perturbation `U` (h_out × d_in) is vectorized column-major,
//! `vec(U)[j·h_out + i] = U[i][j]`. `R` is the correlation matrix of
//! `vec(U)`; `Rc` and `Rr` are the normalized partial traces of `R` over rows
//! and over columns. All three have a unit diagonal.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::net::{loss, Loss, Network};
use crate::rng::{self, stream};
use crate::s2o::{kron_hessian_factors, Damping};
use crate::table::{fmt_f64, Table};

/// `R` is stored only up to this many entries per side.
pub const MAX_MATERIALIZED_DIM: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrSource {
    Sampling,
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Clean,
    Adversarial,
}

impl CorrSource {
    pub fn as_str(self) -> &'static str {
        match self {
            CorrSource::Sampling => "sampling",
            CorrSource::Laplace => "laplace",
        }
    }
}

impl DataKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DataKind::Clean => "clean",
            DataKind::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCorrStats {
    pub layer: usize,
    pub source: CorrSource,
    pub data: DataKind,
    pub num_samples: usize,
    /// `h_out · d_in`, the dimension of `R`.
    pub dim: usize,
    pub r: Option<Matrix>,
    pub rc: Matrix,
    pub rr: Matrix,
    pub lam_max: f64,
    pub lam_min: f64,
    /// `‖Rc‖₂^½`.
    pub lamc_max: f64,
    /// `‖Rr‖₂^½`.
    pub lamr_max: f64,
    pub k: f64,
    /// `Λ_min^k Λ_max^(dim−k)`, zero when `R` is singular.
    pub det_lb: f64,
    pub ln_det_lb: Option<f64>,
    pub logdet: Option<f64>,
    pub frob_sq: f64,
}

const STATS_HEADER: &[&str] = &[
    "layer",
    "source",
    "data",
    "num_samples",
    "dim",
    "lam_max",
    "lam_min",
    "lamc_max",
    "lamr_max",
    "k",
    "det_lb",
    "ln_det_lb",
    "logdet",
    "frob_sq",
    "rc_frob_sq",
    "rr_frob_sq",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, fmt_f64)
}

impl LayerCorrStats {
    pub fn file_name(&self) -> String {
        format!("stats_{}_{}_{}.csv", self.layer, self.source.as_str(), self.data.as_str())
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(STATS_HEADER);
        t.push(vec![
            self.layer.to_string(),
            self.source.as_str().into(),
            self.data.as_str().into(),
            self.num_samples.to_string(),
            self.dim.to_string(),
            fmt_f64(self.lam_max),
            fmt_f64(self.lam_min),
            fmt_f64(self.lamc_max),
            fmt_f64(self.lamr_max),
            fmt_f64(self.k),
            fmt_f64(self.det_lb),
            opt(self.ln_det_lb),
            opt(self.logdet),
            fmt_f64(self.frob_sq),
            fmt_f64(linalg::frobenius_sq(&self.rc)),
            fmt_f64(linalg::frobenius_sq(&self.rr)),
        ]);
        t
    }

    fn finish(
        layer: usize,
        source: CorrSource,
        data: DataKind,
        num_samples: usize,
        parts: Extremes,
        rc: Matrix,
        rr: Matrix,
    ) -> Result<Self> {
        let lamc_max = linalg::spectral_norm(&rc).sqrt();
        let lamr_max = linalg::spectral_norm(&rr).sqrt();
        let (k, det_lb, ln_det_lb) = if parts.lam_min > 0.0 {
            // unit-diagonal R brackets 1; tiny excursions are rounding
            let lmin = parts.lam_min.min(1.0);
            let lmax = parts.lam_max.max(1.0);
            let ln = linalg::ln_det_lower_bound(lmin, lmax, parts.dim)?;
            (linalg::det_bound_exponent(lmin, lmax, parts.dim), ln.exp(), Some(ln))
        } else {
            (parts.dim as f64, 0.0, None)
        };
        Ok(LayerCorrStats {
            layer,
            source,
            data,
            num_samples,
            dim: parts.dim,
            r: parts.r,
            rc,
            rr,
            lam_max: parts.lam_max,
            lam_min: parts.lam_min,
            lamc_max,
            lamr_max,
            k,
            det_lb,
            ln_det_lb,
            logdet: parts.logdet,
            frob_sq: parts.frob_sq,
        })
    }
}

struct Extremes {
    dim: usize,
    r: Option<Matrix>,
    lam_max: f64,
    lam_min: f64,
    logdet: Option<f64>,
    frob_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub num_samples: usize,
    pub loss_tolerance: f64,
    pub refine_epochs: usize,
    pub refine_lr: f64,
    /// Absolute proposal scale for every layer; `None` uses `0.01 · RMS(W_l)`.
    pub noise_sigma: Option<f64>,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            num_samples: 100,
            loss_tolerance: 0.05,
            refine_epochs: 50,
            refine_lr: 1e-4,
            noise_sigma: None,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples < 2 {
            return Err(Error::Config("sampling needs at least two samples".into()));
        }
        if !(self.loss_tolerance > 0.0) || !(self.refine_lr >= 0.0) {
            return Err(Error::Config("loss tolerance must be positive and refine_lr nonnegative".into()));
        }
        if let Some(s) = self.noise_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("noise sigma must be finite and nonnegative, got {s}")));
            }
        }
        Ok(())
    }
}

/// Accepted perturbations around `reference`, the input network after the
/// same refinement every sample receives.
#[derive(Debug, Clone)]
pub struct WeightSamples {
    pub reference: Network,
    pub reference_loss: f64,
    /// `deltas[sample][layer]`.
    pub deltas: Vec<Vec<Matrix>>,
    pub draws: usize,
}

fn dataset_loss(net: &Network, ds: &Dataset) -> Result<f64> {
    loss::cross_entropy(&net.logits(&ds.inputs)?, &ds.labels)
}

/// Full-batch gradient descent on the mean cross-entropy. `None` when the
/// loss stops being finite.
fn refine(mut net: Network, ds: &Dataset, epochs: usize, lr: f64) -> Result<Option<Network>> {
    for _ in 0..epochs {
        let tape = match net.forward(&ds.inputs) {
            Ok(t) => t,
            Err(Error::NonFinite { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let g = net.backward(&tape, &Loss::CrossEntropy, &ds.labels)?;
        if !g.is_finite() {
            return Ok(None);
        }
        for (l, gl) in g.layers.iter().enumerate() {
            net.weight_mut(l).axpy(-lr, gl);
        }
    }
    Ok(Some(net))
}

fn rms(m: &Matrix) -> f64 {
    (linalg::frobenius_sq(m) / m.data().len() as f64).sqrt()
}

/// Draw `w + u₀` with Gaussian `u₀`, refine it, and keep `u = refined − reference`
/// when `|L(reference + u) − L(reference)| ≤ ε′`. Draw `t` uses the stream
/// `(seed, sampling, t)`.
pub fn sample_weight_perturbations(net: &Network, ds: &Dataset, cfg: &SamplingConfig) -> Result<WeightSamples> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let reference = refine(net.clone(), ds, cfg.refine_epochs, cfg.refine_lr)?
        .ok_or_else(|| Error::Invalid("refining the unperturbed network diverged".into()))?;
    let reference_loss = dataset_loss(&reference, ds)?;
    let sigmas: Vec<f64> = (0..net.num_layers())
        .map(|l| cfg.noise_sigma.unwrap_or_else(|| 0.01 * rms(net.weight(l))))
        .collect();
    let max_draws = 100 * cfg.num_samples;
    let mut deltas = Vec::with_capacity(cfg.num_samples);
    let mut draws = 0;
    while deltas.len() < cfg.num_samples && draws < max_draws {
        let mut r = rng::rng_for(cfg.seed, stream::SAMPLING, draws as u64);
        draws += 1;
        let mut noisy = net.clone();
        for (l, &s) in sigmas.iter().enumerate() {
            if s > 0.0 {
                let normal = Normal::new(0.0, s).expect("finite sigma");
                noisy.weight_mut(l).data_mut().iter_mut().for_each(|w| *w += normal.sample(&mut r));
            }
        }
        let Some(refined) = refine(noisy, ds, cfg.refine_epochs, cfg.refine_lr)? else {
            continue;
        };
        let l_new = match dataset_loss(&refined, ds) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => continue,
            Err(e) => return Err(e),
        };
        if (l_new - reference_loss).abs() <= cfg.loss_tolerance {
            deltas.push(
                (0..net.num_layers())
                    .map(|l| refined.weight(l).sub(reference.weight(l)))
                    .collect(),
            );
        }
    }
    if deltas.len() < cfg.num_samples {
        return Err(Error::SamplingStalled {
            accepted: deltas.len(),
            draws,
        });
    }
    Ok(WeightSamples {
        reference,
        reference_loss,
        deltas,
        draws,
    })
}

/// Standardized samples: row `k` is `(vec(U_k) − mean) / sd`, scaled by
/// `1/√(N−1)` so that `SᵀS` is the sample correlation matrix.
fn standardized(mats: &[&Matrix]) -> Result<Matrix> {
    let n = mats.len();
    let (h, d) = mats[0].shape();
    let p = h * d;
    let mut s = Matrix::zeros(n, p);
    for (k, m) in mats.iter().enumerate() {
        if m.shape() != (h, d) {
            return Err(Error::InvalidShape("perturbations differ in shape".into()));
        }
        for j in 0..d {
            for i in 0..h {
                s.set(k, j * h + i, m.get(i, j));
            }
        }
    }
    for e in 0..p {
        let mean = (0..n).map(|k| s.get(k, e)).sum::<f64>() / n as f64;
        let var = (0..n).map(|k| (s.get(k, e) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        if !(var > 0.0) {
            return Err(Error::DegenerateVariance { index: e });
        }
        let scale = 1.0 / (var * (n - 1) as f64).sqrt();
        for k in 0..n {
            s.set(k, e, (s.get(k, e) - mean) * scale);
        }
    }
    Ok(s)
}

/// Correlation statistics of layer `layer` from accepted perturbations.
pub fn corr_from_samples(deltas: &[Vec<Matrix>], layer: usize, data: DataKind) -> Result<LayerCorrStats> {
    if deltas.len() < 2 {
        return Err(Error::Invalid("need at least two perturbations".into()));
    }
    let mats: Vec<&Matrix> = deltas
        .iter()
        .map(|d| d.get(layer).ok_or(Error::IncompleteStats { layer }))
        .collect::<Result<_>>()?;
    let n = mats.len();
    let (h, d) = mats[0].shape();
    let p = h * d;
    let s = standardized(&mats)?;

    // partial traces of R = SᵀS, accumulated sample by sample
    let mut rc_raw = Matrix::zeros(d, d);
    let mut rr_raw = Matrix::zeros(h, h);
    for k in 0..n {
        let sk = Matrix::from_fn(h, d, |i, j| s.get(k, j * h + i));
        rc_raw.axpy(1.0, &sk.matmul_tn(&sk));
        rr_raw.axpy(1.0, &sk.matmul_nt(&sk));
    }
    let rc = linalg::normalize_to_correlation(&rc_raw.symmetrized())?;
    let rr = linalg::normalize_to_correlation(&rr_raw.symmetrized())?;

    let gram = s.matmul_nt(&s).symmetrized();
    let frob_sq = linalg::frobenius_sq(&gram);
    let r = if p <= MAX_MATERIALIZED_DIM {
        Some(linalg::normalize_to_correlation(&s.matmul_tn(&s).symmetrized())?)
    } else {
        None
    };
    let (lam_max, lam_min, logdet) = if p < n {
        let r = r.as_ref().expect("small R is materialized");
        let ev = linalg::sym_eigvals(r)?;
        let logdet = linalg::logdet_psd(r).ok();
        (ev[0], *ev.last().unwrap(), logdet)
    } else {
        // centered rank is at most N−1 < p, so R is singular
        (linalg::sym_eigvals(&gram)?[0], 0.0, None)
    };
    LayerCorrStats::finish(
        layer,
        CorrSource::Sampling,
        data,
        n,
        Extremes {
            dim: p,
            r,
            lam_max,
            lam_min,
            logdet,
            frob_sq,
        },
        rc,
        rr,
    )
}

/// Laplace statistics from Kronecker factors: `Rc = normalize((𝒜 + λI)⁻¹)`,
/// `Rr = normalize((ℋ + λI)⁻¹)`, `R = Rc ⊗ Rr`.
pub fn laplace_from_factors(
    a_fac: &Matrix,
    h_fac: &Matrix,
    damping: &Damping,
    layer: usize,
    data: DataKind,
    num_samples: usize,
) -> Result<LayerCorrStats> {
    let invert = |m: &Matrix| -> Result<Matrix> {
        let (lambda, _) = damping.resolve(m);
        linalg::normalize_to_correlation(&linalg::inverse_psd(&m.add_diag(lambda))?)
    };
    let rc = invert(a_fac)?;
    let rr = invert(h_fac)?;
    let (dc, dr) = (rc.rows(), rr.rows());
    let ec = linalg::sym_eigvals(&rc)?;
    let er = linalg::sym_eigvals(&rr)?;
    let lam_max = ec[0] * er[0];
    let lam_min = ec.last().unwrap() * er.last().unwrap();
    let logdet = match (linalg::logdet_psd(&rc), linalg::logdet_psd(&rr)) {
        (Ok(a), Ok(b)) => Some(dr as f64 * a + dc as f64 * b),
        _ => None,
    };
    let p = dc * dr;
    let r = if p <= MAX_MATERIALIZED_DIM {
        Some(linalg::kronecker(&rc, &rr)?)
    } else {
        None
    };
    let frob_sq = linalg::frobenius_sq(&rc) * linalg::frobenius_sq(&rr);
    LayerCorrStats::finish(
        layer,
        CorrSource::Laplace,
        data,
        num_samples,
        Extremes {
            dim: p,
            r,
            lam_max,
            lam_min,
            logdet,
            frob_sq,
        },
        rc,
        rr,
    )
}

/// Laplace statistics of the output layer on `ds`.
pub fn corr_from_laplace(net: &Network, ds: &Dataset, layer: usize, damping: &Damping, data: DataKind) -> Result<LayerCorrStats> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let tape = net.forward(&ds.inputs)?;
    let (a_fac, h_fac) = kron_hessian_factors(&tape, &ds.labels, layer)?;
    laplace_from_factors(&a_fac, &h_fac, damping, layer, data, ds.len())
}

/// Ranks with ties sharing their average rank (1-based).
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation; zero when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fig3Family {
    Equicorrelation,
    RandomCorrelation,
}

/// Statistics of one sampled `dim × dim` correlation matrix, read as the
/// correlation of a `rows × cols` perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fig3Row {
    /// Off-diagonal value for the equicorrelation family.
    pub r: Option<f64>,
    pub frob_sq: f64,
    pub lam_max: f64,
    pub lam_min: f64,
    /// `√λ_max(R)`.
    pub lam_max_proxy: f64,
    /// `‖Σ_rows blocks of R‖₂^½`, the unnormalized column quantity.
    pub lamc: f64,
    pub lamr: f64,
    pub k: f64,
    pub det_lb: f64,
    pub det: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fig3Summary {
    pub n_samples: usize,
    pub rho_frob_lam_max_proxy: f64,
    pub rho_frob_lamc: f64,
    pub rho_frob_det_lb: f64,
    pub det_violations: usize,
}

/// `rows × cols` with `rows` the largest divisor of `dim` not above `√dim`.
pub fn matricize(dim: usize) -> (usize, usize) {
    let rows = (1..=dim).take_while(|r| r * r <= dim).filter(|r| dim % r == 0).last().unwrap_or(1);
    (rows, dim / rows)
}

fn partial_traces(r: &Matrix, rows: usize, cols: usize) -> (Matrix, Matrix) {
    let mut c = Matrix::zeros(cols, cols);
    let mut w = Matrix::zeros(rows, rows);
    for j in 0..cols {
        for j2 in 0..cols {
            c.set(j, j2, (0..rows).map(|i| r.get(j * rows + i, j2 * rows + i)).sum());
        }
    }
    for i in 0..rows {
        for i2 in 0..rows {
            w.set(i, i2, (0..cols).map(|j| r.get(j * rows + i, j * rows + i2)).sum());
        }
    }
    (c, w)
}

pub fn fig3_row(r_mat: &Matrix, r: Option<f64>) -> Result<Fig3Row> {
    let d = r_mat.rows();
    let (rows, cols) = matricize(d);
    let ev = linalg::sym_eigvals(r_mat)?;
    let (lam_max, lam_min) = (ev[0], *ev.last().unwrap());
    let (c, w) = partial_traces(r_mat, rows, cols);
    let (k, det_lb) = if lam_min > 0.0 {
        let (lmin, lmax) = (lam_min.min(1.0), lam_max.max(1.0));
        (linalg::det_bound_exponent(lmin, lmax, d), linalg::det_lower_bound(lmin, lmax, d)?)
    } else {
        (d as f64, 0.0)
    };
    Ok(Fig3Row {
        r,
        frob_sq: linalg::frobenius_sq(r_mat),
        lam_max,
        lam_min,
        lam_max_proxy: lam_max.sqrt(),
        lamc: linalg::spectral_norm(&c).sqrt(),
        lamr: linalg::spectral_norm(&w).sqrt(),
        k,
        det_lb,
        det: ev.iter().product(),
    })
}

/// Closed forms for the `dim`-dimensional equicorrelation matrix with
/// off-diagonal `r`, matricized as in [`matricize`].
pub fn equicorrelation_closed_form(dim: usize, r: f64) -> Fig3Row {
    let d = dim as f64;
    let (rows, cols) = matricize(dim);
    let big = 1.0 + (d - 1.0) * r;
    let small = 1.0 - r;
    let (lam_max, lam_min, k) = if r >= 0.0 { (big, small, d - 1.0) } else { (small, big, 1.0) };
    let det = small.powf(d - 1.0) * big;
    // partial traces are themselves scaled equicorrelation matrices
    let side = |h: usize, n: usize| {
        let (h, n) = (h as f64, n as f64);
        if r >= 0.0 {
            (h * (1.0 + (n - 1.0) * r)).sqrt()
        } else {
            (h * (1.0 - r)).sqrt()
        }
    };
    Fig3Row {
        r: Some(r),
        frob_sq: d + d * (d - 1.0) * r * r,
        lam_max,
        lam_min,
        lam_max_proxy: lam_max.sqrt(),
        lamc: side(rows, cols),
        lamr: side(cols, rows),
        k: if r == 0.0 { 0.0 } else { k },
        det_lb: det,
        det,
    }
}

/// Sample `n_samples` correlation matrices of the family and tabulate them.
/// Sample `i` uses the stream `(seed, sampling, i)`.
pub fn simulate_fig3(dim: usize, n_samples: usize, family: Fig3Family, seed: u64) -> Result<(Vec<Fig3Row>, Fig3Summary)> {
    if dim < 2 || n_samples < 2 {
        return Err(Error::Invalid("simulation needs dim ≥ 2 and at least two samples".into()));
    }
    let lo = -1.0 / (dim as f64 - 1.0);
    let rows = (0..n_samples)
        .map(|i| {
            let mut rg = rng::rng_for(seed, stream::SAMPLING, i as u64);
            match family {
                Fig3Family::Equicorrelation => {
                    let r = loop {
                        let r = rand::Rng::random_range(&mut rg, lo..1.0);
                        if r > lo {
                            break r;
                        }
                    };
                    fig3_row(&Matrix::equicorrelation(dim, r), Some(r))
                }
                Fig3Family::RandomCorrelation => fig3_row(&linalg::random_correlation(dim, &mut rg), None),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&Fig3Row) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let frob = col(|r| r.frob_sq);
    let summary = Fig3Summary {
        n_samples,
        rho_frob_lam_max_proxy: spearman(&frob, &col(|r| r.lam_max_proxy)),
        rho_frob_lamc: spearman(&frob, &col(|r| r.lamc)),
        rho_frob_det_lb: spearman(&frob, &col(|r| r.det_lb)),
        det_violations: rows.iter().filter(|r| r.det_lb > r.det * (1.0 + 1e-9) + 1e-300).count(),
    };
    Ok((rows, summary))
}

pub fn fig3_table(rows: &[Fig3Row]) -> Table {
    let mut t = Table::new(&[
        "sample",
        "r",
        "frob_sq",
        "lam_max",
        "lam_min",
        "lam_max_proxy",
        "lamc",
        "lamr",
        "k",
        "det_lb",
        "det",
    ]);
    for (i, r) in rows.iter().enumerate() {
        t.push(vec![
            i.to_string(),
            opt(r.r),
            fmt_f64(r.frob_sq),
            fmt_f64(r.lam_max),
            fmt_f64(r.lam_min),
            fmt_f64(r.lam_max_proxy),
            fmt_f64(r.lamc),
            fmt_f64(r.lamr),
            fmt_f64(r.k),
            fmt_f64(r.det_lb),
            fmt_f64(r.det),
        ]);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationReport {
    pub h: usize,
    pub sigma: f64,
    pub ratios: Vec<f64>,
    pub median: f64,
    pub p95: f64,
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Ratios `‖U‖₂ / (2√h·σ)` for iid `N(0, σ²)` matrices `U` of size `h × h`.
/// Trial `t` uses the stream `(seed, sampling, t)`.
pub fn check_perturbation_bound(h: usize, sigma: f64, trials: usize, seed: u64) -> Result<PerturbationReport> {
    if trials < 30 || h == 0 || !(sigma > 0.0) {
        return Err(Error::Invalid("need h ≥ 1, σ > 0 and at least 30 trials".into()));
    }
    let denom = 2.0 * (h as f64).sqrt() * sigma;
    let ratios: Vec<f64> = (0..trials)
        .map(|t| {
            let mut rg = rng::rng_for(seed, stream::SAMPLING, t as u64);
            let u = Matrix::from_fn(h, h, |_, _| sigma * rand::Rng::sample::<f64, _>(&mut rg, rand_distr::StandardNormal));
            linalg::spectral_norm(&u) / denom
        })
        .collect();
    Ok(PerturbationReport {
        h,
        sigma,
        median: quantile(&ratios, 0.5),
        p95: quantile(&ratios, 0.95),
        ratios,
    })
}
