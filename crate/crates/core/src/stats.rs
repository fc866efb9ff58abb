//! Test statistics as quadratic forms in the score vector `g = Γᵀ S(θ*)`,
//! plus the tuning rules that resolve them.
//!
//! Both statistics reduce to `n⁻¹ gᵀ Π g / λ₂` for a positive semidefinite
//! `Π` that depends only on `V`, `κ` and the tuning values, so the same
//! kernel evaluates observed and bootstrap scores alike. Kernels are stored
//! through a factor `F` with `Π = FᵀF`, which keeps every evaluated
//! statistic nonnegative.
//!
//! Internally everything is expressed in whitened coordinates: with
//! `D = diag(1/κ)` and `D^{-1/2} V D^{-1/2} = Q Λ Qᵀ`, the pencil
//! `V + λD` is diagonal, so the λ₁ and λ₃ searches cost `O(d)` per step.

use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::basis::{FunctionExpansion, SobolevBasis};
use crate::error::{Error, Result};
use crate::linalg::{entries_of, penalized_cholesky, rows_of};
use crate::nuisance::{fold_assignment, log_grid, Dataset, NuisanceFit};
use crate::rng;
use crate::score::{
    influence_variance, GateauxModel, NonparametricMean, PartiallyAdditiveMean, ScoreComponents,
    ScoreDesign,
};

/// Smallest admissible direction-class bound.
pub const GAMMA_MIN: f64 = 1e-6;
/// Default number of Monte Carlo directions for the L2 statistic.
pub const DEFAULT_DIRECTIONS: usize = 2000;
/// Retained-fraction window targeted by the λ₃ search.
pub const RETAINED_WINDOW: (f64, f64) = (0.45, 0.55);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Sup,
    L2,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::Sup => "sup",
            NormKind::L2 => "l2",
        })
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sup" => Ok(NormKind::Sup),
            "l2" => Ok(NormKind::L2),
            other => Err(Error::invalid(format!("unknown norm `{other}`"))),
        }
    }
}

/// Resolved tuning values of a kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuning {
    pub gamma: f64,
    pub lambda1: Option<f64>,
    pub lambda2: f64,
    pub lambda3: Option<f64>,
    pub retained_fraction: Option<f64>,
    /// λ₁ sits on the search bracket because the ratio target was unreachable.
    pub bracket_exhausted: bool,
    /// Requested γ when the L2 class had to be widened to `gamma`.
    pub widened_from: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatisticKernel {
    pub pi_matrix: DMatrix<f64>,
    factor: DMatrix<f64>,
    pub kind: NormKind,
    pub tuning: Tuning,
}

impl StatisticKernel {
    pub fn d(&self) -> usize {
        self.pi_matrix.ncols()
    }

    /// `F` with `Π = FᵀF`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// `n⁻¹ gᵀ Π g / λ₂` for a score vector `g = Γᵀ s`.
    pub fn evaluate(&self, score_vector: &DVector<f64>, n: usize) -> f64 {
        (&self.factor * score_vector).norm_squared() / (n as f64 * self.tuning.lambda2)
    }

    /// Row-wise [`evaluate`](Self::evaluate) for an `m × d` matrix of scores.
    pub fn evaluate_rows(&self, scores: &DMatrix<f64>, n: usize) -> Vec<f64> {
        let projected = scores * self.factor.transpose();
        let denom = n as f64 * self.tuning.lambda2;
        projected
            .row_iter()
            .map(|r| r.norm_squared() / denom)
            .collect()
    }

    /// Hash of the exact bit patterns of `Π`.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.pi_matrix.nrows().hash(&mut h);
        for v in self.pi_matrix.iter() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Same `Π` with a different λ₂.
    pub fn with_lambda2(&self, lambda2: f64) -> StatisticKernel {
        let mut k = self.clone();
        k.tuning.lambda2 = lambda2;
        k
    }

    /// Kernel with `Π = FᵀF`.
    pub fn from_factor(factor: DMatrix<f64>, kind: NormKind, tuning: Tuning) -> Self {
        let pi = factor.tr_mul(&factor);
        let pi_matrix = (&pi + pi.transpose()) * 0.5;
        StatisticKernel {
            pi_matrix,
            factor,
            kind,
            tuning,
        }
    }
}

/// Eigen-whitened view of `(V, κ)`.
#[derive(Debug, Clone)]
pub struct Whitened {
    sqrt_kappa: DVector<f64>,
    q: DMatrix<f64>,
    lambda: DVector<f64>,
    scale: f64,
}

impl Whitened {
    pub fn new(v: &DMatrix<f64>, kappa: &[f64]) -> Result<Self> {
        let d = v.nrows();
        if v.ncols() != d || kappa.len() != d {
            return Err(Error::invalid("V and κ dimensions disagree"));
        }
        let sqrt_kappa = DVector::from_iterator(d, kappa.iter().map(|k| k.sqrt()));
        let vt = DMatrix::from_fn(d, d, |i, j| sqrt_kappa[i] * v[(i, j)] * sqrt_kappa[j]);
        let vt = (&vt + vt.transpose()) * 0.5;
        let eig = vt.symmetric_eigen();
        let lambda = eig.eigenvalues.map(|l| l.max(0.0));
        let trace_d: f64 = kappa.iter().map(|k| 1.0 / k).sum();
        let scale = v.trace() / trace_d;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::NumericalFailure(
                "variance matrix has nonpositive trace".into(),
            ));
        }
        Ok(Whitened {
            sqrt_kappa,
            q: eig.eigenvectors,
            lambda,
            scale,
        })
    }

    fn from_components(c: &ScoreComponents, kappa: &[f64]) -> Result<Self> {
        Whitened::new(&c.v_guarded(), kappa)
    }

    /// `trace(V)/trace(diag(1/κ))`, the natural unit for λ₁ and λ₃.
    pub fn lambda_scale(&self) -> f64 {
        self.scale
    }

    fn bracket(&self) -> (f64, f64) {
        (1e-8 * self.scale, 1e8 * self.scale)
    }

    /// `Qᵀ D^{-1/2} g`.
    fn whiten(&self, g: &DVector<f64>) -> DVector<f64> {
        self.q.tr_mul(&g.component_mul(&self.sqrt_kappa))
    }

    /// `D^{-1/2} Q y`, back to basis coefficients.
    fn unwhiten(&self, y: &DVector<f64>) -> DVector<f64> {
        (&self.q * y).component_mul(&self.sqrt_kappa)
    }

    /// Ratio `ãᵀDã / ãᵀVã` at `ã ∝ (V + λD)⁻¹ g`, from whitened `g`.
    fn sup_ratio(&self, gw: &DVector<f64>, lambda1: f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (g, l) in gw.iter().zip(self.lambda.iter()) {
            let y2 = (g / (l + lambda1)).powi(2);
            num += y2;
            den += l * y2;
        }
        num / den
    }

    /// `F = diag((Λ+λ)^{-1/2}) Qᵀ D^{-1/2}` so that `FᵀF = (V + λD)⁻¹`.
    fn penalized_inverse_factor(&self, lambda1: f64) -> DMatrix<f64> {
        let d = self.lambda.len();
        DMatrix::from_fn(d, d, |r, c| {
            self.q[(c, r)] * self.sqrt_kappa[c] / (self.lambda[r] + lambda1).sqrt()
        })
    }
}

/// Settings for the penalized supremum-norm statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct SupNormConfig {
    pub gamma: f64,
    /// Fixed λ₁; `None` solves the ratio-equals-γ rule.
    pub lambda1: Option<f64>,
    pub tol: f64,
    pub lambda2: f64,
}

impl SupNormConfig {
    pub fn new(gamma: f64) -> Self {
        SupNormConfig {
            gamma,
            lambda1: None,
            tol: 1e-4,
            lambda2: 1.0,
        }
    }
}

/// Settings for the Monte Carlo L2 statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct L2NormConfig {
    pub gamma: f64,
    pub b: usize,
    /// Fixed λ₃; `None` searches for a retained fraction in [0.45, 0.55].
    pub lambda3: Option<f64>,
    pub seed: u64,
    pub lambda2: f64,
}

impl L2NormConfig {
    pub fn new(gamma: f64, seed: u64) -> Self {
        L2NormConfig {
            gamma,
            b: DEFAULT_DIRECTIONS,
            lambda3: None,
            seed,
            lambda2: 1.0,
        }
    }
}

/// Solves `ratio(λ₁) = γ` by bisection in `log λ₁` over the scale-aware
/// bracket. The ratio is nonincreasing in λ₁.
pub fn solve_lambda1(white: &Whitened, g: &DVector<f64>, gamma: f64, tol: f64) -> Result<f64> {
    let gw = white.whiten(g);
    let (lo, hi) = white.bracket();
    let r_lo = white.sup_ratio(&gw, lo);
    let r_hi = white.sup_ratio(&gw, hi);
    let close = |r: f64| ((r - gamma) / gamma).abs() <= tol;
    if close(r_lo) {
        return Ok(lo);
    }
    if close(r_hi) {
        return Ok(hi);
    }
    if r_lo < gamma {
        return Err(Error::BracketExhausted {
            lambda1: lo,
            ratio: r_lo,
            gamma,
        });
    }
    if r_hi > gamma {
        return Err(Error::BracketExhausted {
            lambda1: hi,
            ratio: r_hi,
            gamma,
        });
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        let r = white.sup_ratio(&gw, mid.exp());
        if close(r) {
            return Ok(mid.exp());
        }
        if r > gamma {
            a = mid;
        } else {
            b = mid;
        }
    }
    Err(Error::NumericalFailure(format!(
        "lambda1 bisection stalled for gamma = {gamma:e}"
    )))
}

/// Sup-norm kernel `Π = (V + λ₁D)⁻¹`, with λ₁ resolved from the score vector
/// `selection_score` unless fixed in `cfg`.
pub fn sup_norm_kernel(
    c: &ScoreComponents,
    kappa: &[f64],
    selection_score: &DVector<f64>,
    cfg: &SupNormConfig,
) -> Result<StatisticKernel> {
    check_gamma(cfg.gamma)?;
    let white = Whitened::from_components(c, kappa)?;
    let lambda1 = match cfg.lambda1 {
        Some(l) if l > 0.0 => l,
        Some(l) => return Err(Error::invalid(format!("lambda1 must be positive, got {l}"))),
        None if selection_score.iter().all(|v| *v == 0.0) => white.lambda_scale(),
        None => solve_lambda1(&white, selection_score, cfg.gamma, cfg.tol)?,
    };
    Ok(sup_kernel_at(&white, lambda1, cfg, false))
}

fn sup_kernel_at(
    white: &Whitened,
    lambda1: f64,
    cfg: &SupNormConfig,
    exhausted: bool,
) -> StatisticKernel {
    StatisticKernel::from_factor(
        white.penalized_inverse_factor(lambda1),
        NormKind::Sup,
        Tuning {
            gamma: cfg.gamma,
            lambda1: Some(lambda1),
            lambda2: cfg.lambda2,
            lambda3: None,
            retained_fraction: None,
            bracket_exhausted: exhausted,
            widened_from: None,
        },
    )
}

/// Like [`sup_norm_kernel`], but when the ratio target is unreachable the
/// boundary λ₁ reported by the search is used instead of failing.
pub fn sup_norm_kernel_or_boundary(
    c: &ScoreComponents,
    kappa: &[f64],
    selection_score: &DVector<f64>,
    cfg: &SupNormConfig,
) -> Result<StatisticKernel> {
    match sup_norm_kernel(c, kappa, selection_score, cfg) {
        Err(Error::BracketExhausted { lambda1, .. }) => {
            let white = Whitened::from_components(c, kappa)?;
            Ok(sup_kernel_at(&white, lambda1, cfg, true))
        }
        other => other,
    }
}

/// Penalized supremum-norm statistic `n⁻¹ gᵀ(V + λ₁D)⁻¹g / λ₂` at
/// `g = Γᵀ s`, with λ₁ chosen from the same `g`.
pub fn sup_norm_statistic(
    c: &ScoreComponents,
    kappa: &[f64],
    cfg: &SupNormConfig,
) -> Result<(f64, StatisticKernel)> {
    let g = c.score_vector();
    let kernel = sup_norm_kernel(c, kappa, &g, cfg)?;
    Ok((kernel.evaluate(&g, c.n), kernel))
}

/// Maximizer of `n^{-1/2} gᵀa − (λ₂/2)(aᵀVa + λ₁ aᵀDa)`:
/// `ã = n^{-1/2} λ₂⁻¹ (V + λ₁D)⁻¹ g`.
pub fn closed_form_direction(
    c: &ScoreComponents,
    kappa: &[f64],
    lambda1: f64,
    lambda2: f64,
) -> Result<DVector<f64>> {
    let penalty = DVector::from_iterator(kappa.len(), kappa.iter().map(|k| 1.0 / k));
    let ch = penalized_cholesky(&c.v_guarded(), &penalty, lambda1)?;
    Ok(ch.solve(&c.score_vector()) / ((c.n as f64).sqrt() * lambda2))
}

/// `ãᵀDã / ãᵀVã` at the closed-form direction for a given λ₁.
pub fn constraint_ratio(c: &ScoreComponents, kappa: &[f64], lambda1: f64) -> Result<f64> {
    let white = Whitened::from_components(c, kappa)?;
    Ok(white.sup_ratio(&white.whiten(&c.score_vector()), lambda1))
}

/// Standard normal draws `z_b`, one independent stream per direction.
fn direction_draws(seed: u64, b: usize, d: usize) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, rng::tag::DIRECTIONS, i as u64);
            (0..d).map(|_| StandardNormal.sample(&mut r)).collect()
        })
        .collect();
    DMatrix::from_fn(b, d, |i, j| rows[i][j])
}

/// Whitened draws `y_b = z_b / sqrt(Λ + λ₃)` give `a_b = D^{-1/2} Q y_b`,
/// so `a_bᵀDa_b = ‖y_b‖²` and `a_bᵀVa_b = Σ Λ y_b²`.
fn direction_ratios(white: &Whitened, z: &DMatrix<f64>, lambda3: f64) -> Vec<f64> {
    z.row_iter()
        .map(|row| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (zj, l) in row.iter().zip(white.lambda.iter()) {
                let y2 = zj * zj / (l + lambda3);
                num += y2;
                den += l * y2;
            }
            num / den
        })
        .collect()
}

fn retained_fraction(ratios: &[f64], gamma: f64) -> f64 {
    ratios.iter().filter(|&&r| r <= gamma).count() as f64 / ratios.len() as f64
}

/// Gaussian kernel density estimate with Silverman's bandwidth, evaluated at
/// every sample point.
pub fn kde_at_samples(samples: &[f64]) -> Vec<f64> {
    let m = samples.len();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mean = sorted.iter().sum::<f64>() / m as f64;
    let sd = if m > 1 {
        (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt()
    } else {
        0.0
    };
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let mut h = 0.9 * spread * (m as f64).powf(-0.2);
    if !(h > 0.0) {
        h = (mean.abs() * 1e-3).max(1e-12);
    }
    let norm = 1.0 / (m as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    // contributions beyond 10 bandwidths are below e^-50 and skipped
    samples
        .iter()
        .map(|&t| {
            let lo = sorted.partition_point(|&v| v < t - 10.0 * h);
            let hi = sorted.partition_point(|&v| v <= t + 10.0 * h);
            sorted[lo..hi]
                .iter()
                .map(|&v| (-0.5 * ((t - v) / h).powi(2)).exp())
                .sum::<f64>()
                * norm
        })
        .collect()
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

fn solve_lambda3(white: &Whitened, z: &DMatrix<f64>, gamma: f64) -> f64 {
    let (lo, hi) = white.bracket();
    let (w_lo, w_hi) = RETAINED_WINDOW;
    let target = 0.5 * (w_lo + w_hi);
    let inside = |f: f64| (w_lo..=w_hi).contains(&f);
    let f_lo = retained_fraction(&direction_ratios(white, z, lo), gamma);
    let f_hi = retained_fraction(&direction_ratios(white, z, hi), gamma);
    if inside(f_lo) {
        return lo;
    }
    if inside(f_hi) {
        return hi;
    }
    // the fraction is nondecreasing in λ₃; unreachable targets take the
    // closer endpoint
    if f_lo > w_hi {
        return lo;
    }
    if f_hi < w_lo {
        return hi;
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut best = (f64::INFINITY, hi);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        let f = retained_fraction(&direction_ratios(white, z, mid.exp()), gamma);
        if (f - target).abs() < best.0 {
            best = ((f - target).abs(), mid.exp());
        }
        if inside(f) {
            return mid.exp();
        }
        if f < w_lo {
            a = mid;
        } else {
            b = mid;
        }
    }
    best.1
}

/// Monte Carlo L2 kernel `Π = Aᵀ U⁻¹ A` over the retained directions.
pub fn l2_norm_kernel(
    c: &ScoreComponents,
    kappa: &[f64],
    cfg: &L2NormConfig,
) -> Result<StatisticKernel> {
    check_gamma(cfg.gamma)?;
    if cfg.b < 100 {
        return Err(Error::invalid(format!(
            "at least 100 Monte Carlo directions required, got {}",
            cfg.b
        )));
    }
    let white = Whitened::from_components(c, kappa)?;
    let d = kappa.len();
    let z = direction_draws(cfg.seed, cfg.b, d);
    let lambda3 = match cfg.lambda3 {
        Some(l) if l > 0.0 => l,
        Some(l) => return Err(Error::invalid(format!("lambda3 must be positive, got {l}"))),
        None => solve_lambda3(&white, &z, cfg.gamma),
    };
    let ratios = direction_ratios(&white, &z, lambda3);
    let retained: Vec<usize> = (0..cfg.b).filter(|&i| ratios[i] <= cfg.gamma).collect();
    if retained.is_empty() {
        return Err(Error::DegenerateSampler {
            gamma: cfg.gamma,
            lambda3,
        });
    }
    let density = kde_at_samples(&ratios);
    let floor = 1e-12 * density.iter().cloned().fold(0.0, f64::max);
    let mut rows = DMatrix::zeros(retained.len(), d);
    for (r, &i) in retained.iter().enumerate() {
        let y = DVector::from_fn(d, |j, _| z[(i, j)] / (white.lambda[j] + lambda3).sqrt());
        let var: f64 = y.iter().zip(white.lambda.iter()).map(|(v, l)| l * v * v).sum();
        let weight = density[i].max(floor) * var;
        let a = white.unwhiten(&y) / weight.sqrt();
        rows.set_row(r, &a.transpose());
    }
    let factor = compress_factor(rows);
    Ok(StatisticKernel::from_factor(
        factor,
        NormKind::L2,
        Tuning {
            gamma: cfg.gamma,
            lambda1: None,
            lambda2: cfg.lambda2,
            lambda3: Some(lambda3),
            retained_fraction: Some(retained.len() as f64 / cfg.b as f64),
            bracket_exhausted: false,
            widened_from: None,
        },
    ))
}

/// Like [`l2_norm_kernel`], but when even the most diffuse sampler keeps
/// fewer than the target share of draws inside `A_γ`, the class is widened
/// to the median ratio at the top of the λ₃ bracket. The Gaussian family
/// cannot concentrate on the smoothest directions, so a small γ (a smooth
/// `h_n`) otherwise leaves too few or no draws.
pub fn l2_norm_kernel_or_widened(
    c: &ScoreComponents,
    kappa: &[f64],
    cfg: &L2NormConfig,
) -> Result<StatisticKernel> {
    match l2_norm_kernel(c, kappa, cfg) {
        Ok(k) if k.tuning.retained_fraction.unwrap_or(1.0) >= RETAINED_WINDOW.0 => return Ok(k),
        Ok(_) | Err(Error::DegenerateSampler { .. }) => {}
        Err(e) => return Err(e),
    }
    let white = Whitened::from_components(c, kappa)?;
    let z = direction_draws(cfg.seed, cfg.b, kappa.len());
    let mut ratios = direction_ratios(&white, &z, white.bracket().1);
    ratios.sort_by(|a, b| a.total_cmp(b));
    let widened = ratios[ratios.len() / 2];
    if widened <= cfg.gamma {
        return l2_norm_kernel(c, kappa, cfg);
    }
    let mut wide = cfg.clone();
    wide.gamma = widened;
    let mut k = l2_norm_kernel(c, kappa, &wide)?;
    k.tuning.widened_from = Some(cfg.gamma);
    Ok(k)
}

/// Replaces a tall factor by the `R` of its QR decomposition, which has the
/// same Gram matrix.
fn compress_factor(rows: DMatrix<f64>) -> DMatrix<f64> {
    if rows.nrows() <= rows.ncols() {
        rows
    } else {
        rows.qr().r()
    }
}

/// Approximate L2-norm statistic `n⁻¹ Σ_b (gᵀa_b)² / U_b` over retained
/// directions.
pub fn l2_norm_statistic(
    c: &ScoreComponents,
    kappa: &[f64],
    cfg: &L2NormConfig,
) -> Result<(f64, StatisticKernel)> {
    let kernel = l2_norm_kernel(c, kappa, cfg)?;
    Ok((kernel.evaluate(&c.score_vector(), c.n), kernel))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("gamma must be positive, got {gamma}")))
    }
}

/// Direction-class bound for testing: `J(h_n) / h_nᵀVh_n` with
/// `h_n = θ_n − θ*`, floored at [`GAMMA_MIN`] when `h_n` vanishes.
pub fn select_gamma(
    theta_n: &FunctionExpansion,
    theta_star: &FunctionExpansion,
    c: &ScoreComponents,
) -> Result<f64> {
    let h = theta_n.difference(theta_star)?;
    let size = theta_n.coeffs().amax().max(theta_star.coeffs().amax());
    if h.coeffs().amax() <= 1e-12 * size || h.coeffs().amax() == 0.0 {
        return Ok(GAMMA_MIN);
    }
    gamma_for(&h, c)
}

/// Direction-class bound for band construction: `J(θ_n) / θ_nᵀVθ_n`.
pub fn select_gamma_band(theta_n: &FunctionExpansion, c: &ScoreComponents) -> Result<f64> {
    if theta_n.coeffs().amax() == 0.0 {
        return Ok(GAMMA_MIN);
    }
    gamma_for(theta_n, c)
}

fn gamma_for(h: &FunctionExpansion, c: &ScoreComponents) -> Result<f64> {
    let mut var = influence_variance(c, h.coeffs())?;
    if !(var > 0.0) {
        let v = c.v_guarded();
        var = h.coeffs().dot(&(&v * h.coeffs()));
    }
    let gamma = h.rkhs_norm() / var;
    Ok(if gamma.is_finite() {
        gamma.max(GAMMA_MIN)
    } else {
        GAMMA_MIN
    })
}

/// Default λ grid for the penalized fit of `θ_n`.
pub fn default_theta_grid() -> Vec<f64> {
    log_grid(1e-10, 1.0, 21)
}

/// Penalized estimate of `θ_0` and the cross-validated λ.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaFit {
    pub coeffs: DVector<f64>,
    pub lambda: f64,
    pub cv_error: Vec<f64>,
}

/// Minimizes `n⁻¹‖r − Γa‖² + λ Σ a_k²/κ_k`, choosing λ from `grid` by
/// K-fold cross-validation on the same objective.
pub fn fit_theta_from_design(
    design: &ScoreDesign,
    kappa: &[f64],
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<ThetaFit> {
    if grid.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    if folds < 2 {
        return Err(Error::invalid("cross-validation needs at least two folds"));
    }
    let n = design.n();
    let penalty = DVector::from_iterator(kappa.len(), kappa.iter().map(|k| 1.0 / k));
    let gamma = &design.gamma;
    let r = &design.residual_base;
    let mut cv_error = vec![0.0; grid.len()];
    if grid.len() > 1 {
        let labels = fold_assignment(n, folds, seed);
        for f in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| labels[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| labels[i] == f).collect();
            if train.is_empty() || test.is_empty() {
                continue;
            }
            let g_tr = rows_of(gamma, &train);
            let r_tr = entries_of(r, &train);
            let g_te = rows_of(gamma, &test);
            let r_te = entries_of(r, &test);
            let scale = 1.0 / train.len() as f64;
            let gram = g_tr.tr_mul(&g_tr) * scale;
            let rhs = g_tr.tr_mul(&r_tr) * scale;
            for (l, &lambda) in grid.iter().enumerate() {
                let a = penalized_cholesky(&gram, &penalty, lambda)?.solve(&rhs);
                cv_error[l] += (&r_te - &g_te * a).norm_squared() / n as f64;
            }
        }
    }
    let best = (0..grid.len())
        .min_by(|&a, &b| cv_error[a].total_cmp(&cv_error[b]))
        .unwrap_or(0);
    let scale = 1.0 / n as f64;
    let gram = gamma.tr_mul(gamma) * scale;
    let rhs = gamma.tr_mul(r) * scale;
    let coeffs = penalized_cholesky(&gram, &penalty, grid[best])?.solve(&rhs);
    if coeffs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("penalized fit produced non-finite coefficients".into()));
    }
    Ok(ThetaFit {
        coeffs,
        lambda: grid[best],
        cv_error,
    })
}

/// Penalized estimate `θ_n` for either model; `fit` supplies the nuisances
/// of the partially additive model.
pub fn fit_theta_penalized(
    data: &Dataset,
    basis: &std::sync::Arc<SobolevBasis>,
    fit: Option<&NuisanceFit>,
    lambda_grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<FunctionExpansion> {
    let design = match fit {
        None => NonparametricMean.design(data, basis)?,
        Some(fit) => PartiallyAdditiveMean {
            fit,
            center_gamma: true,
        }
        .design(data, basis)?,
    };
    let theta = fit_theta_from_design(&design, basis.kappa(), lambda_grid, folds, seed)?;
    FunctionExpansion::new(basis.clone(), theta.coeffs)
}
