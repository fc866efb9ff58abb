//! Multiplier bootstrap for quadratic-form statistics.
//!
//! Replicate `m` perturbs the residuals at `θ_n` by centered multipliers,
//! `s̃ = diag(ξ − ξ̄) S(θ_n)`, and evaluates the kernel of the observed
//! statistic at `Γᵀ s̃`. Multipliers for replicate `m` come from their own
//! stream keyed by `(seed, m)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::score::ScoreComponents;
use crate::stats::StatisticKernel;

/// Default replicate count.
pub const DEFAULT_REPLICATES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiplierKind {
    #[default]
    Gaussian,
    Rademacher,
}

impl std::str::FromStr for MultiplierKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(MultiplierKind::Gaussian),
            "rademacher" => Ok(MultiplierKind::Rademacher),
            other => Err(Error::invalid(format!("unknown multiplier `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub replicates: Vec<f64>,
    pub m: usize,
    pub seed: u64,
    pub multiplier_kind: MultiplierKind,
    /// Fingerprint of the kernel every replicate was evaluated with.
    pub kernel_fingerprint: u64,
}

fn multipliers(seed: u64, index: usize, n: usize, kind: MultiplierKind) -> Vec<f64> {
    let mut r = rng::stream(seed, rng::tag::MULTIPLIERS, index as u64);
    let mut xi: Vec<f64> = match kind {
        MultiplierKind::Gaussian => (0..n).map(|_| StandardNormal.sample(&mut r)).collect(),
        MultiplierKind::Rademacher => (0..n)
            .map(|_| if r.random::<bool>() { 1.0 } else { -1.0 })
            .collect(),
    };
    let mean = xi.iter().sum::<f64>() / n as f64;
    xi.iter_mut().for_each(|v| *v -= mean);
    xi
}

/// Bootstrap replicates of the statistic defined by `kernel`, anchored at the
/// residuals carried in `c_at_theta_n.s`.
pub fn bootstrap_distribution(
    c_at_theta_n: &ScoreComponents,
    kernel: &StatisticKernel,
    m: usize,
    seed: u64,
    multiplier_kind: MultiplierKind,
) -> Result<BootstrapResult> {
    if m < 100 {
        return Err(Error::invalid(format!(
            "at least 100 bootstrap replicates required, got {m}"
        )));
    }
    let c = c_at_theta_n;
    let n = c.n;
    if kernel.d() != c.d() || c.s.len() != n || c.gamma.nrows() != n {
        return Err(Error::invalid(format!(
            "kernel is {}-dimensional but components have d = {} and n = {}",
            kernel.d(),
            c.d(),
            n
        )));
    }
    // rows of diag(S(θ_n)) Γ
    let mut weighted = c.gamma.clone();
    for (mut row, s) in weighted.row_iter_mut().zip(c.s.iter()) {
        row *= *s;
    }
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| multipliers(seed, i, n, multiplier_kind))
        .collect();
    let xi = DMatrix::from_fn(m, n, |i, j| rows[i][j]);
    let scores = xi * weighted;
    let replicates = kernel.evaluate_rows(&scores, n);
    Ok(BootstrapResult {
        replicates,
        m,
        seed,
        multiplier_kind,
        kernel_fingerprint: kernel.fingerprint(),
    })
}

/// One replicate for explicit multipliers `xi` (centered here).
pub fn replicate_statistic(c: &ScoreComponents, kernel: &StatisticKernel, xi: &[f64]) -> f64 {
    let n = c.n;
    let mean = xi.iter().sum::<f64>() / n as f64;
    let perturbed = DVector::from_fn(n, |i, _| (xi[i] - mean) * c.s[i]);
    kernel.evaluate(&c.gamma.tr_mul(&perturbed), n)
}

/// `M⁻¹ Σ I(T_m > t)`.
pub fn p_value(t_observed: f64, boot: &BootstrapResult) -> f64 {
    let exceed = boot.replicates.iter().filter(|&&v| v > t_observed).count();
    exceed as f64 / boot.replicates.len() as f64
}

/// Finite-sample valid variant `(1 + #{T_m ≥ t}) / (M + 1)`.
pub fn p_value_conservative(t_observed: f64, boot: &BootstrapResult) -> f64 {
    let exceed = boot.replicates.iter().filter(|&&v| v >= t_observed).count();
    (1 + exceed) as f64 / (boot.replicates.len() + 1) as f64
}

/// Empirical `(1 − α)` quantile with "higher" interpolation: the order
/// statistic at 0-based position `⌈(1 − α)(M − 1)⌉`.
pub fn critical_value(boot: &BootstrapResult, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut sorted = boot.replicates.clone();
    if sorted.is_empty() {
        return Err(Error::invalid("no bootstrap replicates"));
    }
    sorted.sort_by(|a, b| a.total_cmp(b));
    let m = sorted.len();
    let pos = ((1.0 - alpha) * (m - 1) as f64).ceil() as usize;
    Ok(sorted[pos.min(m - 1)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SobolevBasis;
    use crate::nuisance::Dataset;
    use crate::score::{GateauxModel, NonparametricMean};
    use crate::stats::{sup_norm_kernel, NormKind, SupNormConfig, Tuning};

    fn boot_of(values: &[f64]) -> BootstrapResult {
        BootstrapResult {
            replicates: values.to_vec(),
            m: values.len(),
            seed: 0,
            multiplier_kind: MultiplierKind::Gaussian,
            kernel_fingerprint: 0,
        }
    }

    #[test]
    fn p_values() {
        let b = boot_of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p_value(10.0, &b), 0.0);
        assert_eq!(p_value(-1.0, &b), 1.0);
        assert_eq!(p_value(2.5, &b), 0.5);
        assert_eq!(p_value_conservative(2.0, &b), 4.0 / 5.0);
    }

    #[test]
    fn critical_values() {
        let b = boot_of(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(critical_value(&b, 0.5).unwrap(), 3.0);
        assert_eq!(critical_value(&b, 1e-9).unwrap(), 4.0);
        assert_eq!(critical_value(&boot_of(&[2.5; 7]), 0.3).unwrap(), 2.5);
        assert!(critical_value(&b, 0.0).is_err());
        assert!(critical_value(&b, 1.0).is_err());
    }

    #[test]
    fn centered_multipliers_sum_to_zero() {
        let xi = multipliers(3, 5, 101, MultiplierKind::Rademacher);
        assert!(xi.iter().sum::<f64>().abs() < 1e-12);
        // two values, ±1 shifted by the same mean
        let lo = xi.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((hi - lo - 2.0).abs() < 1e-12);
        assert!(xi.iter().all(|&v| v == lo || v == hi));
    }

    fn components(n: usize) -> (ScoreComponents, SobolevBasis) {
        let basis = SobolevBasis::new(4, 0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| (9.0 * v).sin()).collect();
        let data = Dataset::without_adjusters(x, y).unwrap();
        let design = NonparametricMean.design(&data, &basis).unwrap();
        let c = design.components(&DVector::zeros(4), &DVector::zeros(4)).unwrap();
        (c, basis)
    }

    fn fixed_kernel(c: &ScoreComponents, basis: &SobolevBasis) -> StatisticKernel {
        let mut cfg = SupNormConfig::new(1.0);
        cfg.lambda1 = Some(1e-3);
        sup_norm_kernel(c, basis.kappa(), &c.score_vector(), &cfg).unwrap()
    }

    #[test]
    fn zero_residuals_give_zero_replicates() {
        let (c, basis) = components(40);
        let kernel = fixed_kernel(&c, &basis);
        let mut z = c.clone();
        z.s = DVector::zeros(40);
        let b = bootstrap_distribution(&z, &kernel, 200, 1, MultiplierKind::Gaussian).unwrap();
        assert!(b.replicates.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn replicates_are_reproducible_and_nonnegative() {
        let (c, basis) = components(60);
        let kernel = fixed_kernel(&c, &basis);
        let a = bootstrap_distribution(&c, &kernel, 300, 9, MultiplierKind::Gaussian).unwrap();
        let b = bootstrap_distribution(&c, &kernel, 300, 9, MultiplierKind::Gaussian).unwrap();
        assert_eq!(a, b);
        assert!(a.replicates.iter().all(|&v| v >= 0.0));
        assert_eq!(a.kernel_fingerprint, kernel.fingerprint());
        assert!(bootstrap_distribution(&c, &kernel, 50, 9, MultiplierKind::Gaussian).is_err());
    }

    #[test]
    fn two_point_hand_expansion() {
        let c = ScoreComponents {
            s: DVector::from_vec(vec![2.0, 0.5]),
            gamma: DMatrix::from_row_slice(2, 1, &[0.7, -1.3]),
            v: DMatrix::identity(1, 1),
            n: 2,
            residual_base: DVector::zeros(2),
        };
        let unit = StatisticKernel::from_factor(
            DMatrix::identity(1, 1),
            NormKind::Sup,
            Tuning {
                gamma: 1.0,
                lambda1: Some(1.0),
                lambda2: 1.0,
                lambda3: None,
                retained_fraction: None,
                bracket_exhausted: false,
                widened_from: None,
            },
        );
        let t = replicate_statistic(&c, &unit, &[1.0, -1.0]);
        let expected = (0.7 * 2.0 - (-1.3) * 0.5f64).powi(2) / 2.0;
        assert!((t - expected).abs() < 1e-14);
        assert_eq!(replicate_statistic(&c, &unit, &[0.3, 0.3]), 0.0);
    }

    #[test]
    fn batched_replicates_match_direct_evaluation() {
        let (c, basis) = components(50);
        let kernel = fixed_kernel(&c, &basis);
        let b = bootstrap_distribution(&c, &kernel, 120, 4, MultiplierKind::Gaussian).unwrap();
        for m in [0usize, 17, 119] {
            let xi = multipliers(4, m, 50, MultiplierKind::Gaussian);
            let direct = replicate_statistic(&c, &kernel, &xi);
            assert!((direct - b.replicates[m]).abs() <= 1e-10 * direct.max(1e-300));
        }
    }
}
