//! Dense real linear algebra.
//!
//! A row-major `f64` [`Matrix`] plus the matrix-analytic routines the bound
//! calculus and the regularizer depend on: a cyclic Jacobi symmetric
//! eigensolver, power-iteration spectral norm, Cholesky-based log-determinant
//! and inverse, Kronecker products, correlation normalization and the
//! trace-constrained determinant lower bound.
//!
//! Matrix products go through `matrixmultiply`, which is single threaded and
//! deterministic for a fixed input.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Relative asymmetry tolerated by routines that require symmetric input.
pub const TOL_SYM: f64 = 1e-9;
/// Eigenvalues in `[-TOL_PSD, 0)` are treated as numerical zeros.
pub const TOL_PSD: f64 = 1e-10;
/// Largest number of entries a Kronecker product may produce.
pub const MAX_KRON_ENTRIES: usize = 1 << 26;

const JACOBI_MAX_SWEEPS: usize = 100;
const POWER_MAX_ITERS: usize = 10_000;
const POWER_TOL: f64 = 1e-13;

/// Dense matrix in row-major order: `data[i * cols + j]` holds `m[i, j]`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Validating constructor: positive dimensions, matching length, finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(format!("{rows}x{cols} has a zero dimension")));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from row slices. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diag(&vec![1.0; n])
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Unit diagonal with constant off-diagonal `r`.
    pub fn equicorrelation(n: usize, r: f64) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { r })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix::from_raw(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix::from_raw(self.rows, self.cols, data)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn add_diag(&self, v: f64) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out.data[i * self.cols + i] += v;
        }
        out
    }

    /// `(m + mᵀ) / 2`
    pub fn symmetrized(&self) -> Matrix {
        assert!(self.is_square());
        Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self.get(i, j) + self.get(j, i)))
    }

    /// Largest `|m_ij - m_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        gemm(self, false, other, false)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        gemm(self, true, other, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        gemm(self, false, other, true)
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Sub-block copy of columns `[start, end)`.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    /// Select rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(idx.len(), self.cols, data)
    }

    /// Append a constant column (used for folded biases).
    pub fn with_constant_column(&self, value: f64) -> Matrix {
        let cols = self.cols + 1;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.push(value);
        }
        Matrix::from_raw(self.rows, cols, data)
    }

    pub fn vstack(parts: &[&Matrix]) -> Matrix {
        let cols = parts.first().map_or(0, |m| m.cols);
        assert!(parts.iter().all(|m| m.cols == cols), "vstack: column mismatch");
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Matrix::from_raw(rows, cols, data)
    }
}

fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Matrix {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul: inner dimension mismatch ({k} vs {k2})");
    let mut c = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe the row-major buffers of `a`, `b` and `c`, whose
    // lengths match the logical dimensions checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn require_square(m: &Matrix, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidShape(format!(
            "{what} requires a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    Ok(())
}

fn require_symmetric(m: &Matrix, what: &str) -> Result<()> {
    require_square(m, what)?;
    let scale = m.max_abs().max(1.0);
    let asym = m.max_asymmetry();
    if asym > TOL_SYM * scale {
        return Err(Error::InvalidShape(format!(
            "{what} requires a symmetric matrix (asymmetry {asym:e})"
        )));
    }
    Ok(())
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Column `k` is the unit eigenvector of `eigenvalues[k]`.
    pub eigenvectors: Option<Matrix>,
}

impl SymEig {
    pub fn max(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn min(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty spectrum")
    }

    /// `V · diag(λ) · Vᵀ`; `None` when eigenvectors were not requested.
    pub fn reconstruct(&self) -> Option<Matrix> {
        let v = self.eigenvectors.as_ref()?;
        let n = v.rows();
        let scaled = Matrix::from_fn(n, n, |i, k| v.get(i, k) * self.eigenvalues[k]);
        Some(scaled.matmul_nt(v))
    }
}

/// Cyclic Jacobi eigen-decomposition with eigenvectors.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    jacobi(m, true)
}

/// Eigenvalues only (skips eigenvector accumulation).
pub fn sym_eigvals(m: &Matrix) -> Result<Vec<f64>> {
    Ok(jacobi(m, false)?.eigenvalues)
}

fn jacobi(m: &Matrix, want_vectors: bool) -> Result<SymEig> {
    require_symmetric(m, "sym_eig")?;
    let n = m.rows;
    let mut a = m.symmetrized();
    let mut v = want_vectors.then(|| Matrix::identity(n));

    let total: f64 = a.data.iter().map(|x| x * x).sum();
    let threshold = f64::EPSILON * f64::EPSILON * total;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * a.get(i, j) * a.get(i, j);
            }
        }
        if off <= threshold || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // rotate rows/columns p and q
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                if let Some(v) = v.as_mut() {
                    for k in 0..n {
                        let vkp = v.get(k, p);
                        let vkq = v.get(k, q);
                        v.set(k, p, c * vkp - s * vkq);
                        v.set(k, q, s * vkp + c * vkq);
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let eigenvalues = order
        .iter()
        .map(|&i| {
            let l = a.get(i, i);
            if (-TOL_PSD..0.0).contains(&l) {
                0.0
            } else {
                l
            }
        })
        .collect();
    let eigenvectors = v.map(|v| Matrix::from_fn(n, n, |i, k| v.get(i, order[k])));
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Matrices whose smaller side is at most this use an exact Gram eigensolve
/// in `spectral_norm`.
pub const SPECTRAL_EXACT_DIM: usize = 64;

/// Largest singular value: exact via the smaller Gram matrix when small,
/// otherwise power iteration on `mᵀm` from a fixed-seed Gaussian start (a
/// structured start such as all-ones can be an exact non-dominant eigenvector).
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.max_abs() == 0.0 {
        return 0.0;
    }
    if m.rows.min(m.cols) <= SPECTRAL_EXACT_DIM {
        let gram = if m.rows <= m.cols { m.matmul_nt(m) } else { m.matmul_tn(m) };
        let top = sym_eigvals(&gram.symmetrized()).expect("Gram matrix is symmetric")[0];
        return top.max(0.0).sqrt();
    }
    let n = m.cols;
    let apply = |v: &[f64]| -> Vec<f64> {
        let mv = m.matvec(v);
        let mut out = vec![0.0; n];
        for (i, mvi) in mv.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(m.row(i)) {
                *o += a * mvi;
            }
        }
        out
    };
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();

    let mut r = rng::rng_for(0x5eed, "spectral_norm", 0);
    let mut v: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut w = apply(&v);
    let mut lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    for _ in 0..POWER_MAX_ITERS {
        let nw = norm(&w);
        if nw == 0.0 {
            break;
        }
        v = w.iter().map(|x| x / nw).collect();
        w = apply(&v);
        let next = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let done = (next - lambda).abs() <= POWER_TOL * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    lambda.max(0.0).sqrt()
}

pub fn frobenius_sq(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum()
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    require_symmetric(m, "cholesky")?;
    let n = m.rows;
    let a = m.symmetrized();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let (done, rest) = l.data.split_at_mut(j * n);
        let lj = &mut rest[..n];
        // row j left of the diagonal, from rows already finished
        for k in 0..j {
            let lk = &done[k * n..k * n + k];
            lj[k] = (a.get(j, k) - dot(&lj[..k], lk)) / done[k * n + k];
        }
        let d = a.get(j, j) - dot(&lj[..j], &lj[..j]);
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        lj[j] = d.sqrt();
    }
    Ok(l)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ln det m` for symmetric positive definite `m`.
pub fn logdet_psd(m: &Matrix) -> Result<f64> {
    let l = cholesky(m)?;
    Ok(2.0 * (0..l.rows).map(|i| l.get(i, i).ln()).sum::<f64>())
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
pub fn inverse_psd(m: &Matrix) -> Result<Matrix> {
    let l = cholesky(m)?;
    let n = l.rows;
    // row i of L⁻¹ is (e_i − Σ_{k<i} L_ik · row k of L⁻¹) / L_ii
    let mut linv = Matrix::zeros(n, n);
    for i in 0..n {
        let (done, rest) = linv.data.split_at_mut(i * n);
        let ri = &mut rest[..n];
        for k in 0..i {
            let lik = l.data[i * n + k];
            if lik != 0.0 {
                ri[..=k].iter_mut().zip(&done[k * n..k * n + k + 1]).for_each(|(r, v)| *r -= lik * v);
            }
        }
        ri[i] += 1.0;
        let d = l.data[i * n + i];
        ri[..=i].iter_mut().for_each(|r| *r /= d);
    }
    Ok(linv.matmul_tn(&linv).symmetrized())
}

pub fn kronecker(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let rows = a.rows.checked_mul(b.rows);
    let cols = a.cols.checked_mul(b.cols);
    let (rows, cols) = match (rows, cols) {
        (Some(r), Some(c)) if r.checked_mul(c).is_some_and(|n| n <= MAX_KRON_ENTRIES) => (r, c),
        _ => {
            return Err(Error::TooLarge {
                rows: a.rows.saturating_mul(b.rows),
                cols: a.cols.saturating_mul(b.cols),
            })
        }
    };
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let aij = a.get(i, j);
            for k in 0..b.rows {
                let dst = (i * b.rows + k) * cols + j * b.cols;
                for (o, bv) in out.data[dst..dst + b.cols].iter_mut().zip(b.row(k)) {
                    *o = aij * bv;
                }
            }
        }
    }
    Ok(out)
}

/// `out[i][j] = m[i][j] / sqrt(m[i][i] m[j][j])`, with an exact unit diagonal
/// and off-diagonal entries clamped to `[-1, 1]`.
pub fn normalize_to_correlation(m: &Matrix) -> Result<Matrix> {
    require_square(m, "normalize_to_correlation")?;
    let d = m.diagonal();
    if let Some((index, &value)) = d.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::DegenerateDiagonal { index, value });
    }
    Ok(Matrix::from_fn(m.rows, m.cols, |i, j| {
        if i == j {
            1.0
        } else {
            (m.get(i, j) / (d[i] * d[j]).sqrt()).clamp(-1.0, 1.0)
        }
    }))
}

/// Exponent `k` splitting a trace-`dim` spectrum between its extremes.
pub fn det_bound_exponent(lam_min: f64, lam_max: f64, dim: usize) -> f64 {
    if lam_max == lam_min {
        return 0.0;
    }
    dim as f64 * (lam_max - 1.0) / (lam_max - lam_min)
}

fn check_eigen_range(lam_min: f64, lam_max: f64, dim: usize) -> Result<()> {
    const SLACK: f64 = 1e-12;
    let ok = dim >= 1
        && lam_min > 0.0
        && lam_min <= lam_max
        && lam_min <= 1.0 + SLACK
        && lam_max >= 1.0 - SLACK
        && lam_max.is_finite();
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidEigenRange { lam_min, lam_max })
    }
}

/// `ln(Λ_min^k Λ_max^(dim-k))`; stays finite for large `dim` where the
/// bound itself underflows.
pub fn ln_det_lower_bound(lam_min: f64, lam_max: f64, dim: usize) -> Result<f64> {
    check_eigen_range(lam_min, lam_max, dim)?;
    if lam_max == lam_min {
        return Ok(dim as f64 * lam_min.ln());
    }
    let k = det_bound_exponent(lam_min, lam_max, dim);
    Ok(k * lam_min.ln() + (dim as f64 - k) * lam_max.ln())
}

/// Lower bound `Λ_min^k Λ_max^(dim-k)` on the determinant of a trace-`dim`
/// correlation matrix whose spectrum lies in `[lam_min, lam_max]`.
/// Non-integer `k` uses real exponentiation.
pub fn det_lower_bound(lam_min: f64, lam_max: f64, dim: usize) -> Result<f64> {
    ln_det_lower_bound(lam_min, lam_max, dim).map(f64::exp)
}

/// Random correlation matrix: `normalize(G Gᵀ)` with `G` a `dim x 2·dim`
/// standard normal matrix.
pub fn random_correlation(dim: usize, rng: &mut Rng) -> Matrix {
    let g = Matrix::from_fn(dim, 2 * dim, |_, _| rng.sample(StandardNormal));
    normalize_to_correlation(&g.matmul_nt(&g)).expect("Gram matrix of a full-rank draw has a positive diagonal")
}

/// Random symmetric matrix with standard normal entries on and above the diagonal.
pub fn random_symmetric(dim: usize, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(dim, dim);
    for i in 0..dim {
        for j in i..dim {
            let v: f64 = rng.sample(StandardNormal);
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    fn rng(i: u64) -> Rng {
        rng::rng_for(42, "linalg-test", i)
    }

    fn random_pd(n: usize, r: &mut Rng) -> Matrix {
        let g = Matrix::from_fn(n, n + 3, |_, _| r.sample(StandardNormal));
        g.matmul_nt(&g).add_diag(0.1)
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(matches!(Matrix::new(2, 2, vec![1.0; 3]), Err(Error::InvalidShape(_))));
        assert!(matches!(Matrix::new(0, 2, vec![]), Err(Error::InvalidShape(_))));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn matmul_variants_agree() {
        let mut r = rng(0);
        let a = Matrix::from_fn(3, 4, |_, _| r.sample(StandardNormal));
        let b = Matrix::from_fn(4, 5, |_, _| r.sample(StandardNormal));
        let naive = Matrix::from_fn(3, 5, |i, j| (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum());
        assert!(a.matmul(&b).sub(&naive).max_abs() < 1e-12);
        assert!(a.transpose().matmul_tn(&b).sub(&naive).max_abs() < 1e-12);
        assert!(a.matmul_nt(&b.transpose()).sub(&naive).max_abs() < 1e-12);
    }

    #[test]
    fn sym_eig_examples() {
        let e = sym_eig(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);

        let e = sym_eigvals(&Matrix::equicorrelation(3, 0.5)).unwrap();
        assert!(close(e[0], 2.0, 1e-12) && close(e[1], 0.5, 1e-12) && close(e[2], 0.5, 1e-12));

        let m = random_symmetric(8, &mut rng(1));
        let e = sym_eig(&m).unwrap();
        let sum: f64 = e.eigenvalues.iter().sum();
        assert!((sum - m.trace()).abs() < 1e-9);
        assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        let recon = e.reconstruct().unwrap();
        assert!(frobenius_sq(&recon.sub(&m)).sqrt() <= 1e-10 * frobenius_sq(&m).sqrt());
        let v = e.eigenvectors.unwrap();
        assert!(v.matmul_tn(&v).sub(&Matrix::identity(8)).max_abs() < 1e-12);
    }

    #[test]
    fn sym_eig_rejects_bad_shapes() {
        assert!(matches!(sym_eig(&Matrix::zeros(2, 3)), Err(Error::InvalidShape(_))));
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(sym_eig(&m), Err(Error::InvalidShape(_))));
        // within tolerance is symmetrized, not rejected
        let m = Matrix::from_rows(&[&[1.0, 0.5], &[0.5 + 1e-12, 1.0]]);
        assert!(sym_eig(&m).is_ok());
    }

    #[test]
    fn spectral_norm_examples() {
        assert!(close(spectral_norm(&Matrix::diag(&[3.0, 1.0])), 3.0, 1e-12));
        let m = Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]]);
        assert!(close(spectral_norm(&m), 2.0, 1e-12));
        assert_eq!(spectral_norm(&Matrix::zeros(3, 2)), 0.0);

        let mut r = rng(2);
        let m = Matrix::from_fn(16, 16, |_, _| r.sample(StandardNormal));
        let oracle = sym_eigvals(&m.matmul_tn(&m)).unwrap()[0].sqrt();
        let got = spectral_norm(&m);
        assert!((got - oracle).abs() <= 1e-7 * oracle, "{got} vs {oracle}");
    }

    #[test]
    fn spectral_norm_is_not_fooled_by_structured_eigenvectors() {
        // all-ones is an eigenvector with the smaller eigenvalue 3(1 - 2·0.12)
        let m = Matrix::equicorrelation(3, -0.12).scale(3.0);
        assert!(close(spectral_norm(&m), 3.0 * 1.12, 1e-12));
        let m = Matrix::from_rows(&[&[1.0, -1.0], &[2.0, -2.0]]);
        assert!(close(spectral_norm(&m), (10.0f64).sqrt(), 1e-12));

        // power-iteration path
        let n = SPECTRAL_EXACT_DIM + 6;
        let big = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 - 0.2 } else { -0.2 / (n as f64 - 1.0) * 0.9 })
            .add_diag(0.0);
        let oracle = sym_eigvals(&big.matmul_tn(&big)).unwrap()[0].sqrt();
        assert!((spectral_norm(&big) - oracle).abs() <= 1e-7 * oracle);
        let mut r = rng(3);
        let g = Matrix::from_fn(n, n + 3, |_, _| r.sample(StandardNormal));
        let oracle = sym_eigvals(&g.matmul_tn(&g)).unwrap()[0].sqrt();
        assert!((spectral_norm(&g) - oracle).abs() <= 1e-7 * oracle);
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_sq(&Matrix::identity(3)), 3.0);
        assert_eq!(frobenius_sq(&Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])), 30.0);
        let e = frobenius_sq(&Matrix::equicorrelation(9, 0.3));
        assert!(close(e, 9.0 + 72.0 * 0.09, 1e-14));
    }

    #[test]
    fn logdet_examples() {
        assert_eq!(logdet_psd(&Matrix::identity(4)).unwrap(), 0.0);
        let got = logdet_psd(&Matrix::identity(3).scale(2.0)).unwrap();
        assert!(close(got, 3.0 * 2f64.ln(), 1e-14));

        let m = random_pd(6, &mut rng(3));
        let oracle: f64 = sym_eigvals(&m).unwrap().iter().map(|l| l.ln()).sum();
        assert!((logdet_psd(&m).unwrap() - oracle).abs() < 1e-9);

        let singular = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(logdet_psd(&singular), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn inverse_examples() {
        let inv = inverse_psd(&Matrix::diag(&[4.0, 1.0])).unwrap();
        assert_eq!(inv, Matrix::diag(&[0.25, 1.0]));
        assert_eq!(inverse_psd(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
        let m = random_pd(8, &mut rng(4));
        let resid = m.matmul(&inverse_psd(&m).unwrap()).sub(&Matrix::identity(8));
        assert!(frobenius_sq(&resid).sqrt() < 1e-8);
        assert!(matches!(
            inverse_psd(&Matrix::diag(&[1.0, -1.0])),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn kronecker_examples() {
        let k = kronecker(&Matrix::identity(2), &Matrix::from_rows(&[&[5.0]])).unwrap();
        assert_eq!(k, Matrix::diag(&[5.0, 5.0]));
        let k = kronecker(&Matrix::from_rows(&[&[1.0, 2.0]]), &Matrix::from_rows(&[&[0.0, 1.0]])).unwrap();
        assert_eq!(k, Matrix::from_rows(&[&[0.0, 1.0, 0.0, 2.0]]));

        let mut r = rng(5);
        let a = Matrix::from_fn(3, 3, |_, _| r.sample(StandardNormal));
        let b = Matrix::from_fn(2, 2, |_, _| r.sample(StandardNormal));
        let k = kronecker(&a, &b).unwrap();
        let prod = spectral_norm(&a) * spectral_norm(&b);
        assert!((spectral_norm(&k) - prod).abs() <= 1e-8 * prod);

        let big = Matrix::zeros(1 << 7, 1 << 7);
        assert!(matches!(kronecker(&big, &big), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn normalize_examples() {
        let m = Matrix::from_rows(&[&[4.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(
            normalize_to_correlation(&m).unwrap(),
            Matrix::from_rows(&[&[1.0, 0.5], &[0.5, 1.0]])
        );
        assert_eq!(
            normalize_to_correlation(&Matrix::diag(&[2.0, 7.0, 0.1])).unwrap(),
            Matrix::identity(3)
        );
        let c = normalize_to_correlation(&random_pd(5, &mut rng(6))).unwrap();
        for i in 0..5 {
            assert_eq!(c.get(i, i), 1.0);
            for j in 0..5 {
                assert!(c.get(i, j).abs() <= 1.0);
            }
        }
        assert!(matches!(
            normalize_to_correlation(&Matrix::diag(&[1.0, 0.0])),
            Err(Error::DegenerateDiagonal { index: 1, .. })
        ));
    }

    #[test]
    fn det_lower_bound_examples() {
        let b = det_lower_bound(0.5, 2.0, 9).unwrap();
        assert!(close(b, 0.125, 1e-14), "{b}");
        assert_eq!(det_lower_bound(1.0, 1.0, 17).unwrap(), 1.0);
        assert!(matches!(
            det_lower_bound(1.2, 2.0, 3),
            Err(Error::InvalidEigenRange { .. })
        ));
        assert!(matches!(
            det_lower_bound(0.0, 2.0, 3),
            Err(Error::InvalidEigenRange { .. })
        ));
    }

    #[test]
    fn det_lower_bound_holds_on_convex_combinations() {
        let mut r = rng(7);
        for _ in 0..1000 {
            let a = random_correlation(6, &mut r);
            let b = random_correlation(6, &mut r);
            let q: f64 = r.random();
            let m = a.scale(q).add(&b.scale(1.0 - q));
            let ev = sym_eigvals(&m).unwrap();
            let det: f64 = ev.iter().product();
            let bound = det_lower_bound(ev[5], ev[0], 6).unwrap();
            assert!(bound <= det * (1.0 + 1e-10), "{bound} > {det}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weyl_subadditivity(seed in any::<u64>(), n in 2usize..8) {
            let mut r = rng::rng_for(seed, "weyl", 0);
            let a = random_symmetric(n, &mut r);
            let b = random_symmetric(n, &mut r);
            let lab = sym_eigvals(&a.add(&b)).unwrap()[0];
            let la = sym_eigvals(&a).unwrap()[0];
            let lb = sym_eigvals(&b).unwrap()[0];
            prop_assert!(lab <= la + lb + 1e-10);
        }

        #[test]
        fn convex_combination_min_bracketing(seed in any::<u64>(), n in 2usize..8, q in 0.0f64..=1.0) {
            let mut r = rng::rng_for(seed, "bracket", 0);
            let a = random_correlation(n, &mut r);
            let b = random_correlation(n, &mut r);
            let m = a.scale(q).add(&b.scale(1.0 - q));
            let lm = *sym_eigvals(&m).unwrap().last().unwrap();
            let la = *sym_eigvals(&a).unwrap().last().unwrap();
            let lb = *sym_eigvals(&b).unwrap().last().unwrap();
            prop_assert!(lm >= la.min(lb) - 1e-10);
        }

        #[test]
        fn equicorrelation_closed_form(d in 2usize..12, t in 0.0f64..1.0) {
            // valid range is (-1/(d-1), 1)
            let lo = -1.0 / (d as f64 - 1.0);
            let r = lo + (1.0 - lo) * (0.01 + 0.98 * t);
            let ev = sym_eigvals(&Matrix::equicorrelation(d, r)).unwrap();
            let mut want = vec![1.0 - r; d];
            want[0] = 1.0 + (d as f64 - 1.0) * r;
            want.sort_by(|a, b| b.total_cmp(a));
            for (g, w) in ev.iter().zip(&want) {
                prop_assert!((g - w).abs() < 1e-9);
            }
        }

        #[test]
        fn normalize_is_idempotent(seed in any::<u64>(), n in 1usize..8) {
            let mut r = rng::rng_for(seed, "idem", 0);
            let once = normalize_to_correlation(&random_pd(n, &mut r)).unwrap();
            let twice = normalize_to_correlation(&once).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
