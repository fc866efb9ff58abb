//! Simultaneous confidence bands by inverting the score test over the
//! roughness-bounded class `{Σ a_k η_k : Σ a_k²/κ_k ≤ ζ}`.
//!
//! Each band limit is the optimum of a linear objective `η(x0)ᵀa` under two
//! convex quadratic constraints: the roughness bound and
//! `n⁻¹ (Γᵀ(r − Γa))ᵀ Π (Γᵀ(r − Γa)) / λ₂ ≤ t*`. The problem is rotated
//! once per band so that both constraints are diagonal, after which a
//! log-barrier Newton method costs `O(d)` per step (the Hessian is diagonal
//! plus rank two).

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::SobolevBasis;
use crate::bootstrap::{critical_value, BootstrapResult};
use crate::error::{Error, Result};
use crate::score::ScoreComponents;
use crate::stats::StatisticKernel;

/// Relative shrinkage applied to `t*` to close the strict inequality.
pub const STRICTNESS: f64 = 1e-12;
const MAX_OUTER: usize = 50;
const MAX_INNER: usize = 200;
/// Barrier parameter growth per outer iteration.
const BARRIER_GROWTH: f64 = 10.0;
/// Target duality gap relative to the objective scale.
const GAP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Max,
    Min,
}

#[derive(Debug, Clone)]
pub struct BandRequest {
    /// Strictly increasing evaluation points inside the observed X range.
    pub grid: Vec<f64>,
    pub zeta: f64,
    pub alpha: f64,
    pub kernel: StatisticKernel,
    pub components: ScoreComponents,
    /// θ-independent residual part `r`, with `S(Σ a_k η_k) = r − Γa`.
    pub residual_base: DVector<f64>,
    pub basis: Arc<SobolevBasis>,
    /// Observed `[min X, max X]`.
    pub x_range: (f64, f64),
    /// Optional linear identifiability constraint `mᵀa = 0`.
    pub mean_zero: Option<DVector<f64>>,
}

impl BandRequest {
    fn validate(&self) -> Result<()> {
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(Error::invalid(format!("zeta must be nonnegative, got {}", self.zeta)));
        }
        let (lo, hi) = self.x_range;
        if self.grid.is_empty() {
            return Err(Error::invalid("band grid is empty"));
        }
        for w in self.grid.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid("band grid must be strictly increasing"));
            }
        }
        for &x in &self.grid {
            if x < lo || x > hi {
                return Err(Error::invalid(format!(
                    "grid point {x} lies outside the observed range [{lo}, {hi}]"
                )));
            }
            self.basis.rescale(x)?;
        }
        let d = self.basis.d();
        if self.kernel.d() != d || self.components.d() != d || self.residual_base.len() != self.components.n {
            return Err(Error::invalid("band request dimensions disagree"));
        }
        Ok(())
    }
}

/// Optimal value at one grid point plus solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct BandLimit {
    pub value: f64,
    pub coeffs: DVector<f64>,
    /// Multipliers of (roughness, statistic) constraints.
    pub duals: [f64; 2],
    pub kkt: KktResiduals,
    pub iterations: usize,
}

/// Scale-free KKT residuals in the rotated coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

/// The band optimization for a fixed `t*`, rotated to diagonal form.
#[derive(Debug, Clone)]
pub struct BandProblem {
    basis: Arc<SobolevBasis>,
    /// Maps rotated coordinates `v` back to basis coefficients: `a = map · v`.
    map: DMatrix<f64>,
    lambda: DVector<f64>,
    center: DVector<f64>,
    /// `min_v (statistic-constraint value)`, i.e. `f2(center)`.
    offset: f64,
    zeta: f64,
    t_star: f64,
}

impl BandProblem {
    pub fn new(req: &BandRequest, t_star: f64) -> Result<Self> {
        req.validate()?;
        if !(t_star.is_finite()) {
            return Err(Error::invalid("critical value must be finite"));
        }
        let c = &req.components;
        let d = req.basis.d();
        let gram = c.gamma.tr_mul(&c.gamma);
        let b = c.gamma.tr_mul(&req.residual_base);
        let scale = c.n as f64 * req.kernel.tuning.lambda2;
        let limit = scale * t_star * (1.0 - STRICTNESS);

        // a = T u with uᵀu = aᵀ diag(1/κ) a on the constrained subspace
        let sqrt_kappa = DVector::from_iterator(d, req.basis.kappa().iter().map(|k| k.sqrt()));
        let t_map = match &req.mean_zero {
            None => DMatrix::from_diagonal(&sqrt_kappa),
            Some(m) => {
                if m.len() != d {
                    return Err(Error::invalid("identifiability vector has wrong length"));
                }
                let null = null_space_of(m);
                let inv_kappa = req.basis.inv_kappa();
                let metric = null.transpose() * DMatrix::from_diagonal(&inv_kappa) * &null;
                let metric = (&metric + metric.transpose()) * 0.5;
                let chol = Cholesky::new(metric)
                    .ok_or_else(|| Error::NumericalFailure("roughness metric not positive definite".into()))?;
                let l_inv = chol
                    .l()
                    .try_inverse()
                    .ok_or_else(|| Error::NumericalFailure("singular roughness factor".into()))?;
                null * l_inv.transpose()
            }
        };
        let factor = req.kernel.factor();
        let k_mat = factor * &gram * &t_map;
        let p = factor * &b;
        let ktk = k_mat.tr_mul(&k_mat);
        let eig = ((&ktk + ktk.transpose()) * 0.5).symmetric_eigen();
        let rot = eig.eigenvectors;
        let k_rot = &k_mat * &rot;
        let h = k_rot.tr_mul(&p);
        let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let cut = lambda_max * 1e-13;
        let lambda = eig.eigenvalues.map(|l| if l > cut { l } else { 0.0 });
        let center = DVector::from_fn(lambda.len(), |j, _| {
            if lambda[j] > 0.0 {
                h[j] / lambda[j]
            } else {
                0.0
            }
        });
        let offset = (&p - &k_rot * &center).norm_squared() - limit;
        Ok(BandProblem {
            basis: req.basis.clone(),
            map: t_map * rot,
            lambda,
            center,
            offset,
            zeta: req.zeta,
            t_star,
        })
    }

    pub fn t_star(&self) -> f64 {
        self.t_star
    }

    fn f1(&self, v: &DVector<f64>) -> f64 {
        v.norm_squared() - self.zeta
    }

    fn f2(&self, v: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for j in 0..v.len() {
            let e = v[j] - self.center[j];
            acc += self.lambda[j] * e * e;
        }
        acc + self.offset
    }

    fn grad_f2(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |j, _| 2.0 * self.lambda[j] * (v[j] - self.center[j]))
    }

    /// Point of the roughness ball with the smallest statistic; `None` when
    /// even that point violates the statistic bound.
    fn most_plausible(&self) -> Option<DVector<f64>> {
        let r = self.center.len();
        let v = if self.center.norm_squared() <= self.zeta {
            self.center.clone()
        } else {
            // shrink towards the origin along the trust-region path
            let path = |mu: f64| {
                DVector::from_fn(r, |j, _| self.lambda[j] * self.center[j] / (self.lambda[j] + mu))
            };
            let weighted = self.center.component_mul(&self.lambda).norm();
            let mut lo = 0.0;
            let mut hi = weighted / self.zeta.sqrt().max(f64::MIN_POSITIVE) + 1.0;
            for _ in 0..300 {
                let mid = 0.5 * (lo + hi);
                if path(mid).norm_squared() > self.zeta {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            path(hi)
        };
        if self.f2(&v) < 0.0 {
            Some(v)
        } else {
            None
        }
    }

    /// Strictly feasible starting point for the barrier method.
    fn interior_start(&self, x0: f64) -> Result<DVector<f64>> {
        let best = self.most_plausible().ok_or(Error::InfeasibleBand { x0 })?;
        let origin = DVector::zeros(best.len());
        let f_origin = self.f2(&origin);
        let f_best = self.f2(&best);
        let beta_min = if f_origin > 0.0 {
            f_origin / (f_origin - f_best)
        } else {
            0.0
        };
        let beta = 0.5 * (beta_min + 1.0);
        let v = best * beta;
        if self.f1(&v) < 0.0 && self.f2(&v) < 0.0 {
            Ok(v)
        } else {
            Err(Error::InfeasibleBand { x0 })
        }
    }

    /// Upper (`Max`) or lower (`Min`) band limit at `x0`.
    pub fn limit(&self, x0: f64, sense: Sense) -> Result<BandLimit> {
        let eta = self.basis.evaluate_all(x0)?;
        let sign = match sense {
            Sense::Max => 1.0,
            Sense::Min => -1.0,
        };
        let w = self.map.tr_mul(&eta) * sign;
        let r = w.len();

        if self.zeta == 0.0 {
            let origin = DVector::zeros(r);
            if self.f2(&origin) <= 0.0 {
                return Ok(BandLimit {
                    value: 0.0,
                    coeffs: DVector::zeros(self.basis.d()),
                    duals: [0.0, 0.0],
                    kkt: KktResiduals {
                        stationarity: 0.0,
                        primal: 0.0,
                        complementarity: 0.0,
                    },
                    iterations: 0,
                });
            }
            return Err(Error::InfeasibleBand { x0 });
        }

        let mut v = self.interior_start(x0)?;
        let w_norm = w.norm();
        let obj_scale = w_norm * self.zeta.sqrt();
        if obj_scale == 0.0 {
            // objective is constant on the feasible set
            return Ok(self.finish(&v, &w, sign, 0.0, 0.0, 0));
        }
        let mut tau = 1.0 / obj_scale;
        let mut iterations = 0;
        for _ in 0..MAX_OUTER {
            self.center_step(&mut v, &w, tau, &mut iterations, x0)?;
            if 2.0 / tau <= GAP_TOL * obj_scale {
                let (f1, f2) = (self.f1(&v), self.f2(&v));
                let duals = [1.0 / (tau * -f1), 1.0 / (tau * -f2)];
                return Ok(self.finish(&v, &w, sign, duals[0], duals[1], iterations));
            }
            tau *= BARRIER_GROWTH;
        }
        let (f1, f2) = (self.f1(&v), self.f2(&v));
        Err(Error::SolverNonConvergence {
            iterations,
            duals: [1.0 / (tau * -f1), 1.0 / (tau * -f2)],
        })
    }

    fn barrier(&self, v: &DVector<f64>, w: &DVector<f64>, tau: f64) -> Option<f64> {
        let (f1, f2) = (self.f1(v), self.f2(v));
        if f1 < 0.0 && f2 < 0.0 {
            Some(-tau * w.dot(v) - (-f1).ln() - (-f2).ln())
        } else {
            None
        }
    }

    /// Damped Newton iterations on the barrier at parameter `tau`.
    fn center_step(
        &self,
        v: &mut DVector<f64>,
        w: &DVector<f64>,
        tau: f64,
        iterations: &mut usize,
        x0: f64,
    ) -> Result<()> {
        let r = v.len();
        for _ in 0..MAX_INNER {
            *iterations += 1;
            let f1 = self.f1(v);
            let f2 = self.f2(v);
            let g1 = &*v * 2.0;
            let g2 = self.grad_f2(v);
            let grad = -w * tau + &g1 / (-f1) + &g2 / (-f2);
            // H = diag + u1 u1ᵀ + u2 u2ᵀ
            let diag = DVector::from_fn(r, |j, _| 2.0 / (-f1) + 2.0 * self.lambda[j] / (-f2));
            let u1 = &g1 / (-f1);
            let u2 = &g2 / (-f2);
            let step = -woodbury_solve(&diag, &u1, &u2, &grad);
            let decrement = -grad.dot(&step);
            if !decrement.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "barrier Newton step failed at x0 = {x0}"
                )));
            }
            if decrement <= 1e-14 {
                return Ok(());
            }
            let phi = self.barrier(v, w, tau).expect("iterate stays interior");
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..80 {
                let trial = &*v + &step * alpha;
                if let Some(phi_t) = self.barrier(&trial, w, tau) {
                    if phi_t <= phi - 0.25 * alpha * decrement {
                        *v = trial;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // no further decrease is representable at this precision
                return Ok(());
            }
        }
        Ok(())
    }

    fn finish(
        &self,
        v: &DVector<f64>,
        w: &DVector<f64>,
        sign: f64,
        dual1: f64,
        dual2: f64,
        iterations: usize,
    ) -> BandLimit {
        let g1 = v * 2.0;
        let g2 = self.grad_f2(v);
        let w_norm = w.norm().max(f64::MIN_POSITIVE);
        // Barrier duals 1/(τ|f_i|) lose relative accuracy once |f_i| nears
        // rounding level, so the multipliers are refitted by least squares
        // over the constraints the barrier flags as active.
        let active = [
            dual1 * g1.norm() >= 1e-6 * w_norm,
            dual2 * g2.norm() >= 1e-6 * w_norm,
        ];
        let (dual1, dual2) = refit_duals(w, &g1, &g2, active).unwrap_or((dual1, dual2));
        let resid = w - &g1 * dual1 - &g2 * dual2;
        let obj_scale = w_norm * self.zeta.sqrt().max(f64::MIN_POSITIVE);
        let f1 = self.f1(v);
        let f2 = self.f2(v);
        let stat_scale = (self.offset.abs()).max(self.lambda.amax() * self.zeta).max(f64::MIN_POSITIVE);
        BandLimit {
            value: sign * w.dot(v),
            coeffs: &self.map * v,
            duals: [dual1, dual2],
            kkt: KktResiduals {
                stationarity: resid.norm() / w_norm,
                primal: (f1 / self.zeta.max(f64::MIN_POSITIVE)).max(f2 / stat_scale).max(0.0),
                complementarity: (dual1 * f1.abs()).max(dual2 * f2.abs()) / obj_scale,
            },
            iterations,
        }
    }

    /// Statistic-constraint value `f2` at basis coefficients `a` (negative
    /// inside the region), for diagnostics.
    pub fn contains(&self, coeffs: &DVector<f64>) -> Option<bool> {
        let pinv = self.map.clone().pseudo_inverse(1e-14).ok()?;
        let v = pinv * coeffs;
        Some(self.f1(&v) <= 0.0 && self.f2(&v) <= 0.0)
    }
}

/// Nonnegative least-squares multipliers for `w ≈ λ₁g₁ + λ₂g₂` restricted to
/// the active constraints.
fn refit_duals(
    w: &DVector<f64>,
    g1: &DVector<f64>,
    g2: &DVector<f64>,
    active: [bool; 2],
) -> Option<(f64, f64)> {
    let single = |g: &DVector<f64>| {
        let gg = g.norm_squared();
        if gg > 0.0 {
            (w.dot(g) / gg).max(0.0)
        } else {
            0.0
        }
    };
    match active {
        [false, false] => None,
        [true, false] => Some((single(g1), 0.0)),
        [false, true] => Some((0.0, single(g2))),
        [true, true] => {
            let (a, b, c) = (g1.norm_squared(), g1.dot(g2), g2.norm_squared());
            let (r1, r2) = (g1.dot(w), g2.dot(w));
            let det = a * c - b * b;
            if det <= 1e-14 * a * c {
                return None;
            }
            let l1 = (c * r1 - b * r2) / det;
            let l2 = (a * r2 - b * r1) / det;
            if l1 >= 0.0 && l2 >= 0.0 {
                Some((l1, l2))
            } else {
                // best single-constraint fit
                let s1 = single(g1);
                let s2 = single(g2);
                let e1 = (w - g1 * s1).norm();
                let e2 = (w - g2 * s2).norm();
                Some(if e1 <= e2 { (s1, 0.0) } else { (0.0, s2) })
            }
        }
    }
}

/// Solves `(diag + u1u1ᵀ + u2u2ᵀ) x = rhs`.
fn woodbury_solve(
    diag: &DVector<f64>,
    u1: &DVector<f64>,
    u2: &DVector<f64>,
    rhs: &DVector<f64>,
) -> DVector<f64> {
    let dinv_rhs = rhs.component_div(diag);
    let dinv_u1 = u1.component_div(diag);
    let dinv_u2 = u2.component_div(diag);
    let c11 = 1.0 + u1.dot(&dinv_u1);
    let c12 = u1.dot(&dinv_u2);
    let c22 = 1.0 + u2.dot(&dinv_u2);
    let r1 = u1.dot(&dinv_rhs);
    let r2 = u2.dot(&dinv_rhs);
    let det = c11 * c22 - c12 * c12;
    let y1 = (c22 * r1 - c12 * r2) / det;
    let y2 = (c11 * r2 - c12 * r1) / det;
    dinv_rhs - dinv_u1 * y1 - dinv_u2 * y2
}

/// Orthonormal basis of the complement of `m`.
fn null_space_of(m: &DVector<f64>) -> DMatrix<f64> {
    let d = m.len();
    let unit = m / m.norm();
    let proj = DMatrix::identity(d, d) - &unit * unit.transpose();
    let eig = proj.symmetric_eigen();
    let keep: Vec<usize> = (0..d).filter(|&j| eig.eigenvalues[j] > 0.5).collect();
    DMatrix::from_fn(d, keep.len(), |i, j| eig.eigenvectors[(i, keep[j])])
}

/// One band limit, building the rotated problem on the fly.
pub fn band_limit(req: &BandRequest, t_star: f64, x0: f64, sense: Sense) -> Result<BandLimit> {
    BandProblem::new(req, t_star)?.limit(x0, sense)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceBand {
    pub grid: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub t_star: f64,
    pub zeta: f64,
    pub feasible: Vec<bool>,
    /// Per-point failure, if any.
    pub errors: Vec<Option<Error>>,
}

impl ConfidenceBand {
    /// Mean of `upper − lower` over feasible points.
    pub fn mean_width(&self) -> f64 {
        let widths: Vec<f64> = (0..self.grid.len())
            .filter(|&i| self.feasible[i])
            .map(|i| self.upper[i] - self.lower[i])
            .collect();
        if widths.is_empty() {
            f64::NAN
        } else {
            widths.iter().sum::<f64>() / widths.len() as f64
        }
    }

    /// Whether `f(x_i)` lies in `[lower_i, upper_i]` at every grid point.
    pub fn covers<F: Fn(f64) -> f64>(&self, f: F) -> bool {
        (0..self.grid.len()).all(|i| {
            let v = f(self.grid[i]);
            self.feasible[i] && v >= self.lower[i] && v <= self.upper[i]
        })
    }
}

/// Band at the critical value `t*` read off the bootstrap replicates.
pub fn build_band(req: &BandRequest, boot: &BootstrapResult) -> Result<ConfidenceBand> {
    let t_star = critical_value(boot, req.alpha)?;
    build_band_at(req, t_star)
}

/// Band at an explicit critical value.
pub fn build_band_at(req: &BandRequest, t_star: f64) -> Result<ConfidenceBand> {
    let problem = BandProblem::new(req, t_star)?;
    let limits: Vec<(Result<BandLimit>, Result<BandLimit>)> = req
        .grid
        .par_iter()
        .map(|&x| (problem.limit(x, Sense::Min), problem.limit(x, Sense::Max)))
        .collect();
    let mut band = ConfidenceBand {
        grid: req.grid.clone(),
        lower: Vec::with_capacity(limits.len()),
        upper: Vec::with_capacity(limits.len()),
        t_star,
        zeta: req.zeta,
        feasible: Vec::with_capacity(limits.len()),
        errors: Vec::with_capacity(limits.len()),
    };
    for (lo, hi) in limits {
        match (lo, hi) {
            (Ok(lo), Ok(hi)) => {
                band.lower.push(lo.value.min(hi.value));
                band.upper.push(hi.value.max(lo.value));
                band.feasible.push(true);
                band.errors.push(None);
            }
            (Err(e), _) | (_, Err(e)) => {
                band.lower.push(f64::NAN);
                band.upper.push(f64::NAN);
                band.feasible.push(false);
                band.errors.push(Some(e));
            }
        }
    }
    Ok(band)
}

/// `n` evenly spaced points from `lo` to `hi`.
pub fn even_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::Dataset;
    use crate::rng;
    use crate::score::{GateauxModel, NonparametricMean};
    use crate::stats::{sup_norm_kernel, SupNormConfig};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn request(d: usize, n: usize, seed: u64, zeta: f64) -> BandRequest {
        let basis = Arc::new(SobolevBasis::new(d, 0.0, 1.0).unwrap());
        let mut r = rng::stream(seed, rng::tag::DATA, 0);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| 0.8 * basis.eigenfunction(0, v) + 0.5 * { let z: f64 = StandardNormal.sample(&mut r); z })
            .collect();
        let data = Dataset::without_adjusters(x, y).unwrap();
        let design = NonparametricMean.design(&data, &basis).unwrap();
        let c = design.components(&DVector::zeros(d), &DVector::zeros(d)).unwrap();
        let mut cfg = SupNormConfig::new(1.0);
        cfg.lambda1 = Some(1e-3);
        let kernel = sup_norm_kernel(&c, basis.kappa(), &c.score_vector(), &cfg).unwrap();
        let x_range = data.x_range();
        BandRequest {
            grid: even_grid(x_range.0, x_range.1, 7),
            zeta,
            alpha: 0.05,
            kernel,
            residual_base: c.residual_base.clone(),
            components: c,
            basis,
            x_range,
            mean_zero: None,
        }
    }

    #[test]
    fn zero_roughness_pins_the_band_at_zero() {
        let req = request(4, 100, 1, 0.0);
        let band = build_band_at(&req, 1e9).unwrap();
        assert!(band.lower.iter().chain(band.upper.iter()).all(|&v| v == 0.0));
        assert!(matches!(
            band_limit(&req, 1e-12, req.grid[0], Sense::Max),
            Err(Error::InfeasibleBand { .. })
        ));
    }

    #[test]
    fn tiny_critical_value_is_infeasible() {
        let req = request(4, 100, 2, 1e-6);
        let err = band_limit(&req, 1e-14, req.grid[2], Sense::Max).unwrap_err();
        assert!(matches!(err, Error::InfeasibleBand { .. }));
        let band = build_band_at(&req, 1e-14).unwrap();
        assert!(band.feasible.iter().all(|f| !f));
    }

    #[test]
    fn kkt_conditions_hold() {
        let req = request(8, 200, 3, 5e3);
        let problem = BandProblem::new(&req, 0.5).unwrap();
        for &x in &req.grid {
            for sense in [Sense::Max, Sense::Min] {
                let lim = problem.limit(x, sense).unwrap();
                assert!(lim.kkt.stationarity <= 1e-6, "{:?}", lim.kkt);
                assert!(lim.kkt.primal <= 1e-6, "{:?}", lim.kkt);
                assert!(lim.kkt.complementarity <= 1e-6, "{:?}", lim.kkt);
            }
        }
    }

    #[test]
    fn band_grows_with_zeta_and_t_star() {
        let zetas = [2e3, 4e3, 8e3];
        let ts = [0.2, 0.5, 1.0];
        let mut bands = vec![];
        for &z in &zetas {
            let mut row = vec![];
            for &t in &ts {
                let mut req = request(6, 150, 4, z);
                req.zeta = z;
                row.push(build_band_at(&req, t).unwrap());
            }
            bands.push(row);
        }
        let tol = 1e-7;
        for i in 0..3 {
            for j in 0..3 {
                let b = &bands[i][j];
                for next in [bands.get(i + 1).map(|r| &r[j]), bands[i].get(j + 1)]
                    .into_iter()
                    .flatten()
                {
                    for k in 0..b.grid.len() {
                        assert!(next.upper[k] >= b.upper[k] - tol);
                        assert!(next.lower[k] <= b.lower[k] + tol);
                    }
                }
            }
        }
    }

    #[test]
    fn mean_zero_constraint_is_respected() {
        let mut req = request(6, 150, 5, 5e3);
        let m = DVector::from_fn(6, |k, _| {
            req.components.gamma.column(k).mean()
        });
        req.mean_zero = Some(m.clone());
        let lim = band_limit(&req, 0.8, req.grid[3], Sense::Max).unwrap();
        assert!(m.dot(&lim.coeffs).abs() <= 1e-9 * lim.coeffs.norm().max(1.0));
        assert!(lim.kkt.stationarity <= 1e-6);
    }

    #[test]
    fn grid_validation() {
        let mut req = request(4, 50, 6, 1e3);
        req.grid = vec![0.5, 0.4];
        assert!(build_band_at(&req, 1.0).is_err());
        req.grid = vec![req.x_range.1 + 1e-3];
        assert!(build_band_at(&req, 1.0).is_err());
    }

    #[test]
    fn even_grid_endpoints() {
        let g = even_grid(-1.0, 1.0, 50);
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], -1.0);
        assert_eq!(g[49], 1.0);
    }
}
