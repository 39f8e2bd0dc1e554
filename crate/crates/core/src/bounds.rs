//! PAC-Bayesian complexity terms.
//!
//! Every kind reports the argument of its `O(√·)` verbatim as
//! `complexity_term`. The constants hidden in `O` are unknown, so the value is
//! a relative complexity measure for comparing models, not a risk bound.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::net::Network;
use crate::table::{fmt_f64, Table};
use crate::weight_stats::LayerCorrStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    pub gamma: f64,
    pub delta: f64,
    pub m: usize,
    /// ℓ2 bound on the inputs.
    pub b: f64,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "one")]
    pub c: f64,
}

fn one() -> f64 {
    1.0
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidMargin(self.gamma));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Invalid(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if self.m == 0 {
            return Err(Error::Invalid("m must be positive".into()));
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(Error::Invalid(format!("b must be positive, got {}", self.b)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Invalid(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Invalid(format!("c must be positive, got {}", self.c)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Neyshabur22,
    Xiao24,
    S2O35,
    S2O36,
}

impl BoundKind {
    pub const ALL: [BoundKind; 4] = [BoundKind::Neyshabur22, BoundKind::Xiao24, BoundKind::S2O35, BoundKind::S2O36];

    pub fn as_str(self) -> &'static str {
        match self {
            BoundKind::Neyshabur22 => "neyshabur22",
            BoundKind::Xiao24 => "xiao24",
            BoundKind::S2O35 => "s2o35",
            BoundKind::S2O36 => "s2o36",
        }
    }
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BoundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BoundKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown bound kind '{s}'")))
    }
}

/// The per-layer correlation quantities a bound consumes. A stats CSV row
/// carries exactly these, so bounds can be evaluated from files alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub layer: usize,
    pub dim: usize,
    pub lam_max: f64,
    pub lam_min: f64,
    pub lamc_max: f64,
    pub lamr_max: f64,
    pub logdet: Option<f64>,
}

impl From<&LayerCorrStats> for StatsSummary {
    fn from(s: &LayerCorrStats) -> Self {
        StatsSummary {
            layer: s.layer,
            dim: s.dim,
            lam_max: s.lam_max,
            lam_min: s.lam_min,
            lamc_max: s.lamc_max,
            lamr_max: s.lamr_max,
            logdet: s.logdet,
        }
    }
}

impl StatsSummary {
    pub fn identity(layer: usize, dim: usize) -> Self {
        StatsSummary {
            layer,
            dim,
            lam_max: 1.0,
            lam_min: 1.0,
            lamc_max: 1.0,
            lamr_max: 1.0,
            logdet: Some(0.0),
        }
    }

    /// Parses every row of a stats table written by `LayerCorrStats::to_table`.
    pub fn from_table(t: &Table) -> Result<Vec<StatsSummary>> {
        let col = |name: &str| -> Result<Vec<&str>> {
            t.column(name).ok_or_else(|| Error::Parse(format!("stats table lacks column '{name}'")))
        };
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("'{s}': {e}")));
        let parse_u = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("'{s}': {e}")));
        let (layer, dim) = (col("layer")?, col("dim")?);
        let (lmax, lmin) = (col("lam_max")?, col("lam_min")?);
        let (lc, lr, ld) = (col("lamc_max")?, col("lamr_max")?, col("logdet")?);
        (0..t.rows.len())
            .map(|i| {
                Ok(StatsSummary {
                    layer: parse_u(layer[i])?,
                    dim: parse_u(dim[i])?,
                    lam_max: parse_f(lmax[i])?,
                    lam_min: parse_f(lmin[i])?,
                    lamc_max: parse_f(lc[i])?,
                    lamr_max: parse_f(lr[i])?,
                    logdet: if ld[i].is_empty() { None } else { Some(parse_f(ld[i])?) },
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTerms {
    pub spectral_norm: f64,
    pub frob_sq: f64,
    pub lamc: Option<f64>,
    pub lamr: Option<f64>,
    pub det_lb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_kind: BoundKind,
    pub inputs: BoundInputs,
    /// Number of layers.
    pub n: usize,
    /// Largest layer width, the input included.
    pub h: usize,
    pub phi: f64,
    /// `−Σ ln det R_l` (or its lower-bound form); zero for the standard kinds.
    pub logdet_term: f64,
    /// Numerator minus the confidence term.
    pub kl_proxy: f64,
    /// `ln(n·m/δ)`.
    pub confidence_term: f64,
    pub numerator: f64,
    pub complexity_term: f64,
    pub per_layer: Vec<LayerTerms>,
}

pub const BOUND_HEADER: &[&str] = &[
    "bound_kind",
    "gamma",
    "delta",
    "m",
    "b",
    "epsilon",
    "c",
    "n",
    "h",
    "phi",
    "logdet_term",
    "kl_proxy",
    "confidence_term",
    "numerator",
    "complexity_term",
];

impl BoundReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report fields are finite");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(BOUND_HEADER);
        let i = &self.inputs;
        t.push(vec![
            self.bound_kind.to_string(),
            fmt_f64(i.gamma),
            fmt_f64(i.delta),
            i.m.to_string(),
            fmt_f64(i.b),
            fmt_f64(i.epsilon),
            fmt_f64(i.c),
            self.n.to_string(),
            self.h.to_string(),
            fmt_f64(self.phi),
            fmt_f64(self.logdet_term),
            fmt_f64(self.kl_proxy),
            fmt_f64(self.confidence_term),
            fmt_f64(self.numerator),
            fmt_f64(self.complexity_term),
        ]);
        t
    }
}

fn layer_norms(net: &Network) -> Result<Vec<(f64, f64)>> {
    net.layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let s = linalg::spectral_norm(&layer.weight);
            if !(s > 0.0) {
                return Err(Error::DegenerateLayer { layer: l });
            }
            Ok((s, linalg::frobenius_sq(&layer.weight)))
        })
        .collect()
}

/// `∏‖W_l‖₂² · Σ ‖W_l‖_F²/‖W_l‖₂²` over the folded weights.
pub fn phi_standard(net: &Network) -> Result<f64> {
    let norms = layer_norms(net)?;
    let prod: f64 = norms.iter().map(|(s, _)| s * s).product();
    let sum: f64 = norms.iter().map(|(s, f)| f / (s * s)).sum();
    Ok(prod * sum)
}

/// Per-layer stats merged across data kinds. Λ maxima take the larger value
/// and Λ minima the smaller, so the pair brackets any mixture of the inputs.
/// Log-determinants take the minimum, which lower-bounds the mixture by
/// concavity of `ln det`.
pub fn merge_stats(net: &Network, stats: &[StatsSummary]) -> Result<Vec<StatsSummary>> {
    let n = net.num_layers();
    let mut out = Vec::with_capacity(n);
    for l in 0..n {
        let layer = net.layers()[l].weight.shape();
        let dim = layer.0 * layer.1;
        let mut merged: Option<StatsSummary> = None;
        for s in stats.iter().filter(|s| s.layer == l) {
            if s.dim != dim {
                return Err(Error::InvalidShape(format!(
                    "stats for layer {l} have dim {}, weights have {dim} entries",
                    s.dim
                )));
            }
            merged = Some(match merged {
                None => *s,
                Some(m) => StatsSummary {
                    layer: l,
                    dim,
                    lam_max: m.lam_max.max(s.lam_max),
                    lam_min: m.lam_min.min(s.lam_min),
                    lamc_max: m.lamc_max.max(s.lamc_max),
                    lamr_max: m.lamr_max.max(s.lamr_max),
                    logdet: match (m.logdet, s.logdet) {
                        (Some(a), Some(b)) => Some(a.min(b)),
                        _ => None,
                    },
                },
            });
        }
        out.push(merged.ok_or(Error::IncompleteStats { layer: l })?);
    }
    Ok(out)
}

/// `Φ_standard · (Σ_l (Λᶜ_l + Λʳ_l))²`.
pub fn phi_s2o(net: &Network, stats: &[StatsSummary]) -> Result<f64> {
    let merged = merge_stats(net, stats)?;
    Ok(phi_standard(net)? * lambda_factor(&merged))
}

fn lambda_factor(merged: &[StatsSummary]) -> f64 {
    let sum: f64 = merged.iter().map(|s| s.lamc_max + s.lamr_max).sum();
    sum * sum
}

/// Everything a formula may read.
pub struct BoundContext<'a> {
    pub inputs: &'a BoundInputs,
    pub n: usize,
    pub h: usize,
    pub phi_standard: f64,
    /// Present for kinds that consume correlation statistics.
    pub stats: Option<&'a [StatsSummary]>,
}

/// `(phi, capacity, logdet_term)` with `numerator = capacity + logdet_term + ln(nm/δ)`.
pub struct FormulaTerms {
    pub phi: f64,
    pub capacity: f64,
    pub logdet_term: f64,
}

pub trait BoundFormula: Sync {
    fn kind(&self) -> BoundKind;
    fn needs_stats(&self) -> bool;
    fn terms(&self, ctx: &BoundContext) -> Result<FormulaTerms>;
}

fn nh_factor(ctx: &BoundContext) -> f64 {
    let (n, h) = (ctx.n as f64, ctx.h as f64);
    n * n * h * (n * h).ln()
}

struct Neyshabur22;
struct Xiao24;
struct S2O35;
struct S2O36;

impl BoundFormula for Neyshabur22 {
    fn kind(&self) -> BoundKind {
        BoundKind::Neyshabur22
    }
    fn needs_stats(&self) -> bool {
        false
    }
    fn terms(&self, ctx: &BoundContext) -> Result<FormulaTerms> {
        let b = ctx.inputs.b;
        Ok(FormulaTerms {
            phi: ctx.phi_standard,
            capacity: b * b * nh_factor(ctx) * ctx.phi_standard,
            logdet_term: 0.0,
        })
    }
}

impl BoundFormula for Xiao24 {
    fn kind(&self) -> BoundKind {
        BoundKind::Xiao24
    }
    fn needs_stats(&self) -> bool {
        false
    }
    fn terms(&self, ctx: &BoundContext) -> Result<FormulaTerms> {
        let be = ctx.inputs.b + ctx.inputs.epsilon;
        Ok(FormulaTerms {
            phi: ctx.phi_standard,
            capacity: be * be * nh_factor(ctx) * ctx.phi_standard,
            logdet_term: 0.0,
        })
    }
}

fn s2o_capacity(ctx: &BoundContext, stats: &[StatsSummary]) -> (f64, f64) {
    let phi = ctx.phi_standard * lambda_factor(stats);
    let be = ctx.inputs.b + ctx.inputs.epsilon;
    (phi, be * be * ctx.inputs.c * ctx.inputs.c * phi)
}

fn stats_of<'a>(ctx: &BoundContext<'a>) -> &'a [StatsSummary] {
    ctx.stats.expect("evaluate_bound supplies stats to formulas that need them")
}

impl BoundFormula for S2O35 {
    fn kind(&self) -> BoundKind {
        BoundKind::S2O35
    }
    fn needs_stats(&self) -> bool {
        true
    }
    fn terms(&self, ctx: &BoundContext) -> Result<FormulaTerms> {
        let stats = stats_of(ctx);
        let (phi, capacity) = s2o_capacity(ctx, stats);
        let mut logdet_term = 0.0;
        for s in stats {
            let ld = s.logdet.ok_or_else(|| {
                Error::Invalid(format!("layer {}: correlation matrix is singular, ln det is -inf", s.layer))
            })?;
            logdet_term -= ld;
        }
        Ok(FormulaTerms {
            phi,
            capacity,
            logdet_term,
        })
    }
}

impl BoundFormula for S2O36 {
    fn kind(&self) -> BoundKind {
        BoundKind::S2O36
    }
    fn needs_stats(&self) -> bool {
        true
    }
    fn terms(&self, ctx: &BoundContext) -> Result<FormulaTerms> {
        let stats = stats_of(ctx);
        let (phi, capacity) = s2o_capacity(ctx, stats);
        let mut logdet_term = 0.0;
        for s in stats {
            if !(s.lam_min > 0.0) {
                return Err(Error::Invalid(format!(
                    "layer {}: Λ_min is zero, the determinant bound is vacuous",
                    s.layer
                )));
            }
            logdet_term -= ln_det_lb(s)?;
        }
        Ok(FormulaTerms {
            phi,
            capacity,
            logdet_term,
        })
    }
}

/// Unit-diagonal matrices bracket 1, so excursions past it are rounding.
fn ln_det_lb(s: &StatsSummary) -> Result<f64> {
    linalg::ln_det_lower_bound(s.lam_min.min(1.0), s.lam_max.max(1.0), s.dim)
}

pub static REGISTRY: &[&dyn BoundFormula] = &[&Neyshabur22, &Xiao24, &S2O35, &S2O36];

pub fn formula(kind: BoundKind) -> &'static dyn BoundFormula {
    *REGISTRY.iter().find(|f| f.kind() == kind).expect("every kind is registered")
}

pub fn evaluate_bound(
    net: &Network,
    stats: &[StatsSummary],
    inputs: &BoundInputs,
    kind: BoundKind,
) -> Result<BoundReport> {
    inputs.validate()?;
    let f = formula(kind);
    let norms = layer_norms(net)?;
    let merged = if f.needs_stats() {
        Some(merge_stats(net, stats)?)
    } else {
        // standard kinds report stats when they happen to be complete
        merge_stats(net, stats).ok()
    };
    let n = net.num_layers();
    let h = net.layer_dims().into_iter().max().expect("nonempty network");
    let ctx = BoundContext {
        inputs,
        n,
        h,
        phi_standard: phi_standard(net)?,
        stats: if f.needs_stats() { merged.as_deref() } else { None },
    };
    let terms = f.terms(&ctx)?;
    let confidence_term = (n as f64 * inputs.m as f64 / inputs.delta).ln();
    let kl_proxy = terms.capacity + terms.logdet_term;
    let numerator = kl_proxy + confidence_term;
    let complexity_term = (numerator.max(0.0) / (inputs.gamma * inputs.gamma * inputs.m as f64)).sqrt();
    let per_layer = norms
        .iter()
        .enumerate()
        .map(|(l, &(s, frob))| {
            let st = merged.as_ref().map(|m| m[l]);
            LayerTerms {
                spectral_norm: s,
                frob_sq: frob,
                lamc: st.map(|s| s.lamc_max),
                lamr: st.map(|s| s.lamr_max),
                det_lb: st.and_then(|s| {
                    if s.lam_min > 0.0 {
                        ln_det_lb(&s).ok().map(f64::exp)
                    } else {
                        Some(0.0)
                    }
                }),
            }
        })
        .collect();
    Ok(BoundReport {
        bound_kind: kind,
        inputs: *inputs,
        n,
        h,
        phi: terms.phi,
        logdet_term: terms.logdet_term,
        kl_proxy,
        confidence_term,
        numerator,
        complexity_term,
        per_layer,
    })
}
