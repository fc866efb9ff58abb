//! Conditional-mean nuisance estimation for the partially additive model.
//!
//! The default learner is an additive penalized regression on every
//! adjustment covariate: an intercept, a lightly penalized linear trend and a
//! truncated Sobolev expansion per coordinate. All targets (the outcome and
//! every eigenfunction of the exposure) share one design, so each candidate
//! penalty costs a single factorization.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::basis::SobolevBasis;
use crate::error::{Error, Result};
use crate::linalg::{penalized_cholesky, rows_of};
use crate::rng;

/// Observed sample `Z_i = (X_i, W_i, Y_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    w: DMatrix<f64>,
    y: Vec<f64>,
}

impl Dataset {
    /// `w` is `n × p`; pass an `n × 0` matrix for the nonparametric model.
    pub fn new(x: Vec<f64>, w: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n == 0 {
            return Err(Error::invalid("dataset must contain at least one row"));
        }
        if y.len() != n || w.nrows() != n {
            return Err(Error::invalid(format!(
                "row counts disagree: x has {n}, w has {}, y has {}",
                w.nrows(),
                y.len()
            )));
        }
        let bad: Vec<usize> = (0..n)
            .filter(|&i| {
                !x[i].is_finite() || !y[i].is_finite() || w.row(i).iter().any(|v| !v.is_finite())
            })
            .collect();
        if !bad.is_empty() {
            return Err(Error::NonFiniteRows(bad));
        }
        Ok(Dataset { x, w, y })
    }

    pub fn without_adjusters(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        Dataset::new(x, DMatrix::zeros(n, 0), y)
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn p(&self) -> usize {
        self.w.ncols()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x_range(&self) -> (f64, f64) {
        self.x
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Hyperparameters of [`AdditiveSobolevLearner`].
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    /// Sobolev terms per adjustment coordinate.
    pub d_w: usize,
    pub n_lambda: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub folds: usize,
    pub seed: u64,
    /// Penalty weight of each per-coordinate linear trend, relative to the
    /// `1/κ` weights of the Sobolev terms.
    pub linear_weight: f64,
    /// Standard errors of slack in the CV rule: the largest λ whose error is
    /// within `se_rule` standard errors of the minimum is chosen.
    pub se_rule: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            d_w: 10,
            n_lambda: 20,
            lambda_min: 1e-6,
            lambda_max: 1e2,
            folds: 5,
            seed: 0,
            linear_weight: 1.0,
            se_rule: 0.5,
        }
    }
}

impl LearnerConfig {
    pub fn lambda_grid(&self) -> Vec<f64> {
        log_grid(self.lambda_min, self.lambda_max, self.n_lambda)
    }
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Output of a multi-target regression fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerOutput {
    /// `n × k` in-sample fitted values, one column per target.
    pub fitted: DMatrix<f64>,
    /// Penalty chosen for each target.
    pub lambdas: Vec<f64>,
}

/// Regression of several targets on the adjustment covariates.
pub trait NuisanceLearner {
    fn fit(&self, w: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<LearnerOutput>;
}

#[derive(Debug, Clone, Default)]
pub struct AdditiveSobolevLearner {
    pub config: LearnerConfig,
}

struct AdditiveDesign {
    matrix: DMatrix<f64>,
    penalty: DVector<f64>,
}

impl AdditiveSobolevLearner {
    pub fn new(config: LearnerConfig) -> Self {
        AdditiveSobolevLearner { config }
    }

    fn design(&self, w: &DMatrix<f64>) -> Result<AdditiveDesign> {
        let n = w.nrows();
        let coord_basis = SobolevBasis::new(self.config.d_w.max(2), 0.0, 1.0)?;
        let dw = coord_basis.d();
        let mut columns: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0)];
        let mut penalty = vec![0.0];
        for c in 0..w.ncols() {
            let col = w.column(c);
            let lo = col.min();
            let hi = col.max();
            if hi - lo <= f64::EPSILON * (1.0 + lo.abs().max(hi.abs())) {
                continue;
            }
            let z: Vec<f64> = col.iter().map(|v| (v - lo) / (hi - lo)).collect();
            columns.push(DVector::from_vec(z.clone()));
            penalty.push(self.config.linear_weight);
            for k in 0..dw {
                columns.push(DVector::from_iterator(
                    n,
                    z.iter().map(|&zi| coord_basis.eigenfunction(k, zi)),
                ));
                penalty.push(1.0 / coord_basis.kappa()[k]);
            }
        }
        Ok(AdditiveDesign {
            matrix: DMatrix::from_columns(&columns),
            penalty: DVector::from_vec(penalty),
        })
    }
}

/// Deterministic fold labels: a seeded shuffle of `0..n`, dealt round robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::tag::FOLDS, 0));
    let mut labels = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = pos % folds;
    }
    labels
}

impl NuisanceLearner for AdditiveSobolevLearner {
    fn fit(&self, w: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<LearnerOutput> {
        let n = w.nrows();
        let k = targets.ncols();
        if targets.nrows() != n {
            return Err(Error::invalid("targets and covariates differ in row count"));
        }
        let design = self.design(w)?;
        let b = &design.matrix;
        let grid = self.config.lambda_grid();
        let folds = self.config.folds.clamp(2, n.max(2));
        let labels = fold_assignment(n, folds, self.config.seed);

        // cv_err[l][t]: held-out squared error of target t at grid point l,
        // cv_sq the matching sum of squared per-observation errors
        let mut cv_err = vec![vec![0.0; k]; grid.len()];
        let mut cv_sq = vec![vec![0.0; k]; grid.len()];
        for f in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| labels[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| labels[i] == f).collect();
            if train.is_empty() || test.is_empty() {
                continue;
            }
            let b_tr = rows_of(b, &train);
            let t_tr = rows_of(targets, &train);
            let b_te = rows_of(b, &test);
            let t_te = rows_of(targets, &test);
            let scale = 1.0 / train.len() as f64;
            let gram = b_tr.tr_mul(&b_tr) * scale;
            let rhs = b_tr.tr_mul(&t_tr) * scale;
            for (l, &lambda) in grid.iter().enumerate() {
                let beta = penalized_cholesky(&gram, &design.penalty, lambda)?.solve(&rhs);
                let resid = &t_te - &b_te * beta;
                for t in 0..k {
                    for e in resid.column(t).iter() {
                        cv_err[l][t] += e * e;
                        cv_sq[l][t] += e.powi(4);
                    }
                }
            }
        }

        // the largest λ within `se_rule` standard errors of the best
        let nf = n as f64;
        let chosen: Vec<usize> = (0..k)
            .map(|t| {
                let best = (0..grid.len())
                    .min_by(|&a, &c| cv_err[a][t].total_cmp(&cv_err[c][t]))
                    .unwrap_or(0);
                let mean = cv_err[best][t] / nf;
                let var = (cv_sq[best][t] / nf - mean * mean).max(0.0);
                let cutoff = mean + self.config.se_rule * (var / nf).sqrt();
                (best..grid.len())
                    .rev()
                    .find(|&l| cv_err[l][t] / nf <= cutoff)
                    .unwrap_or(best)
            })
            .collect();

        let scale = 1.0 / n as f64;
        let gram = b.tr_mul(b) * scale;
        let mut fitted = DMatrix::zeros(n, k);
        let mut distinct = chosen.clone();
        distinct.sort_unstable();
        distinct.dedup();
        for l in distinct {
            let cols: Vec<usize> = (0..k).filter(|&t| chosen[t] == l).collect();
            let sub = DMatrix::from_fn(n, cols.len(), |r, c| targets[(r, cols[c])]);
            let rhs = b.tr_mul(&sub) * scale;
            let beta = penalized_cholesky(&gram, &design.penalty, grid[l])?.solve(&rhs);
            let pred = b * beta;
            for (c, &t) in cols.iter().enumerate() {
                fitted.set_column(t, &pred.column(c));
            }
        }
        Ok(LearnerOutput {
            fitted,
            lambdas: chosen.iter().map(|&l| grid[l]).collect(),
        })
    }
}

/// What was actually used to produce a [`NuisanceFit`].
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerReport {
    pub config: LearnerConfig,
    pub lambda_y: f64,
    pub lambda_eta: Vec<f64>,
}

/// Fitted conditional means given `W`, evaluated at the observed `W_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceFit {
    pub mu_y: DVector<f64>,
    /// `n × d`; column `k` estimates `E[η_k(X) | W]`.
    pub mu_eta: DMatrix<f64>,
    pub learner_config: LearnerReport,
}

impl NuisanceFit {
    pub fn n(&self) -> usize {
        self.mu_y.len()
    }

    pub fn d(&self) -> usize {
        self.mu_eta.ncols()
    }
}

/// Fits the nuisances with the default additive learner.
pub fn fit_nuisance(
    data: &Dataset,
    basis: &SobolevBasis,
    config: &LearnerConfig,
) -> Result<NuisanceFit> {
    let learner = AdditiveSobolevLearner::new(config.clone());
    let mut fit = fit_nuisance_with(data, basis, &learner)?;
    fit.learner_config.config = config.clone();
    Ok(fit)
}

pub fn fit_nuisance_with(
    data: &Dataset,
    basis: &SobolevBasis,
    learner: &dyn NuisanceLearner,
) -> Result<NuisanceFit> {
    if data.p() == 0 {
        return Err(Error::ModelMisuse(
            "nuisance regressions need at least one adjustment covariate".into(),
        ));
    }
    let n = data.n();
    let d = basis.d();
    let eta = basis.design_matrix(data.x())?;
    let mut targets = DMatrix::zeros(n, d + 1);
    targets.set_column(0, &DVector::from_column_slice(data.y()));
    targets.columns_mut(1, d).copy_from(&eta);
    let out = learner.fit(data.w(), &targets)?;
    Ok(NuisanceFit {
        mu_y: out.fitted.column(0).into_owned(),
        mu_eta: out.fitted.columns(1, d).into_owned(),
        learner_config: LearnerReport {
            config: LearnerConfig::default(),
            lambda_y: out.lambdas[0],
            lambda_eta: out.lambdas[1..].to_vec(),
        },
    })
}

/// `μ_{n,h}(W_i)` for `h = Σ a_k η_k`, i.e. `mu_eta · a`.
pub fn project_expansion(fit: &NuisanceFit, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
    if coeffs.len() != fit.d() {
        return Err(Error::invalid(format!(
            "coefficient vector has length {} but the nuisance fit has d = {}",
            coeffs.len(),
            fit.d()
        )));
    }
    Ok(&fit.mu_eta * coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn uniform_data(n: usize, seed: u64, f: impl Fn(f64, f64, f64) -> f64) -> Dataset {
        let mut r = rng::stream(seed, rng::tag::DATA, 0);
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut w = DMatrix::zeros(n, 2);
        for i in 0..n {
            let xi: f64 = r.random_range(-1.0..1.0);
            let w1: f64 = r.random_range(-1.0..1.0);
            let w2: f64 = r.random_range(-1.0..1.0);
            x.push(xi);
            w[(i, 0)] = w1;
            w[(i, 1)] = w2;
            y.push(f(xi, w1, w2));
        }
        Dataset::new(x, w, y).unwrap()
    }

    fn basis() -> SobolevBasis {
        SobolevBasis::new(10, -1.0, 1.0).unwrap()
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::without_adjusters(vec![], vec![]).is_err());
        assert!(Dataset::without_adjusters(vec![0.0, 1.0], vec![1.0]).is_err());
        let err = Dataset::without_adjusters(vec![0.0, f64::NAN, 1.0], vec![1.0, 2.0, 3.0]);
        assert_eq!(err, Err(Error::NonFiniteRows(vec![1])));
    }

    #[test]
    fn nonparametric_data_is_rejected() {
        let data = Dataset::without_adjusters(vec![0.1, 0.2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            fit_nuisance(&data, &basis(), &LearnerConfig::default()),
            Err(Error::ModelMisuse(_))
        ));
    }

    #[test]
    fn constant_outcome_is_fitted_exactly() {
        let data = uniform_data(300, 1, |_, _, _| 4.25);
        let fit = fit_nuisance(&data, &basis(), &LearnerConfig::default()).unwrap();
        assert!(fit.mu_y.iter().all(|v| (v - 4.25).abs() < 1e-6));
    }

    #[test]
    fn independent_exposure_gives_marginal_means() {
        let data = uniform_data(2000, 2, |_, _, _| 0.0);
        let b = basis();
        let fit = fit_nuisance(&data, &b, &LearnerConfig::default()).unwrap();
        let eta = b.design_matrix(data.x()).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..b.d() {
            let mean = eta.column(k).mean();
            for i in 0..data.n() {
                worst = worst.max((fit.mu_eta[(i, k)] - mean).abs());
            }
        }
        assert!(worst <= 0.1, "max deviation {worst}");
    }

    #[test]
    fn noiseless_outcome_is_learned() {
        let data = uniform_data(2000, 3, |_, w1, _| w1);
        let fit = fit_nuisance(&data, &basis(), &LearnerConfig::default()).unwrap();
        let mse: f64 = (0..data.n())
            .map(|i| (fit.mu_y[i] - data.w()[(i, 0)]).powi(2))
            .sum::<f64>()
            / data.n() as f64;
        assert!(mse <= 1e-2, "mse {mse}");
    }

    #[test]
    fn fits_are_bit_identical() {
        let data = uniform_data(400, 4, |x, w1, w2| x + w1 * w2);
        let cfg = LearnerConfig {
            seed: 99,
            ..LearnerConfig::default()
        };
        let a = fit_nuisance(&data, &basis(), &cfg).unwrap();
        let b = fit_nuisance(&data, &basis(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projection_selects_and_sums_columns() {
        let data = uniform_data(200, 5, |x, w1, _| x + w1);
        let b = basis();
        let fit = fit_nuisance(&data, &b, &LearnerConfig::default()).unwrap();
        let d = b.d();
        assert_eq!(
            project_expansion(&fit, &DVector::zeros(d)).unwrap(),
            DVector::zeros(data.n())
        );
        let mut e3 = DVector::zeros(d);
        e3[3] = 1.0;
        assert_eq!(
            project_expansion(&fit, &e3).unwrap(),
            fit.mu_eta.column(3).into_owned()
        );
        let ones = project_expansion(&fit, &DVector::from_element(d, 1.0)).unwrap();
        for i in 0..data.n() {
            let row_sum: f64 = fit.mu_eta.row(i).iter().sum();
            assert!((ones[i] - row_sum).abs() <= 1e-12 * (1.0 + row_sum.abs()));
        }
        assert!(project_expansion(&fit, &DVector::zeros(d + 1)).is_err());
    }

    #[test]
    fn folds_are_balanced() {
        let labels = fold_assignment(23, 5, 11);
        for f in 0..5 {
            let c = labels.iter().filter(|&&l| l == f).count();
            assert!(c == 4 || c == 5);
        }
        assert_eq!(labels, fold_assignment(23, 5, 11));
    }
}
