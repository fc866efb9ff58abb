//! End-to-end test and band pipeline: nuisances, penalized fit of `θ_n`,
//! score components, tuning, statistic, bootstrap.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::band::{build_band, even_grid, BandRequest, ConfidenceBand};
use crate::basis::{FunctionExpansion, SobolevBasis};
use crate::bootstrap::{
    bootstrap_distribution, p_value, p_value_conservative, BootstrapResult, MultiplierKind,
    DEFAULT_REPLICATES,
};
use crate::error::{Error, Result};
use crate::nuisance::{fit_nuisance, Dataset, LearnerConfig, LearnerReport, NuisanceFit};
use crate::rng;
use crate::score::{GateauxModel, NonparametricMean, PartiallyAdditiveMean, ScoreComponents, ScoreDesign};
use crate::stats::{
    default_theta_grid, fit_theta_from_design, l2_norm_kernel_or_widened, select_gamma, select_gamma_band,
    sup_norm_kernel_or_boundary, L2NormConfig, NormKind, StatisticKernel, SupNormConfig, Tuning,
    DEFAULT_DIRECTIONS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Nonparametric,
    Pam,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Nonparametric => "nonparametric",
            ModelKind::Pam => "pam",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nonparametric" | "np" => Ok(ModelKind::Nonparametric),
            "pam" | "partially-additive" => Ok(ModelKind::Pam),
            other => Err(Error::InvalidArgument(format!("unknown model `{other}`"))),
        }
    }
}

/// Roughness bound for the band: a known value or the plug-in `J(θ_n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothness {
    Oracle(f64),
    Plugin,
}

impl Smoothness {
    pub fn mode_name(&self) -> &'static str {
        match self {
            Smoothness::Oracle(_) => "oracle",
            Smoothness::Plugin => "plugin",
        }
    }
}

impl std::fmt::Display for Smoothness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Smoothness::Oracle(v) => write!(f, "oracle:{v}"),
            Smoothness::Plugin => f.write_str("plugin"),
        }
    }
}

impl std::str::FromStr for Smoothness {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("plugin") {
            return Ok(Smoothness::Plugin);
        }
        if let Some(v) = s.strip_prefix("oracle:") {
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad oracle value in `{s}`")))?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("oracle zeta must be ≥ 0, got {v}")));
            }
            return Ok(Smoothness::Oracle(v));
        }
        Err(Error::InvalidArgument(format!(
            "zeta must be `plugin` or `oracle:<value>`, got `{s}`"
        )))
    }
}

/// Settings shared by every stage of one test or band.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub norm: NormKind,
    pub boot: usize,
    pub alpha: f64,
    pub seed: u64,
    pub multiplier: MultiplierKind,
    pub theta_grid: Vec<f64>,
    pub folds: usize,
    pub directions: usize,
    pub lambda2: f64,
    pub learner: LearnerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            norm: NormKind::Sup,
            boot: DEFAULT_REPLICATES,
            alpha: 0.05,
            seed: 0,
            multiplier: MultiplierKind::Gaussian,
            theta_grid: default_theta_grid(),
            folds: 5,
            directions: DEFAULT_DIRECTIONS,
            lambda2: 1.0,
            learner: LearnerConfig::default(),
        }
    }
}

/// Outcome of one restricted score test.
#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub p_value_conservative: f64,
    pub bootstrap: BootstrapResult,
    pub norm: NormKind,
    pub tuning: Tuning,
    pub theta_n: FunctionExpansion,
    /// Penalty chosen for `θ_n`.
    pub theta_lambda: f64,
    pub nuisance: Option<LearnerReport>,
}

/// Everything about a dataset that does not depend on the null `θ*`.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub model: ModelKind,
    pub basis: Arc<SobolevBasis>,
    pub design: ScoreDesign,
    pub nuisance: Option<NuisanceFit>,
    pub theta_n: FunctionExpansion,
    pub theta_lambda: f64,
    pub x_range: (f64, f64),
    /// Sample means of `η_k(X_i)`, used for the mean-zero constraint.
    pub eta_means: DVector<f64>,
}

/// Fits nuisances (partially additive model only) and `θ_n`.
pub fn fit_model(
    data: &Dataset,
    basis: Arc<SobolevBasis>,
    model: ModelKind,
    cfg: &PipelineConfig,
) -> Result<FittedModel> {
    let nuisance = match model {
        ModelKind::Nonparametric => None,
        ModelKind::Pam => {
            let mut learner = cfg.learner.clone();
            learner.seed = rng::derive_seed(cfg.seed, rng::tag::FOLDS, 0);
            Some(fit_nuisance(data, &basis, &learner).map_err(|e| e.at_stage("nuisance"))?)
        }
    };
    let design = match &nuisance {
        None => NonparametricMean.design(data, &basis),
        Some(fit) => PartiallyAdditiveMean {
            fit,
            center_gamma: true,
        }
        .design(data, &basis),
    }
    .map_err(|e| e.at_stage("components"))?;
    let theta = fit_theta_from_design(
        &design,
        basis.kappa(),
        &cfg.theta_grid,
        cfg.folds,
        rng::derive_seed(cfg.seed, rng::tag::FOLDS, 1),
    )
    .map_err(|e| e.at_stage("theta fit"))?;
    let theta_n = FunctionExpansion::new(basis.clone(), theta.coeffs)?;
    let eta = basis.design_matrix(data.x())?;
    let eta_means = DVector::from_fn(basis.d(), |k, _| eta.column(k).mean());
    Ok(FittedModel {
        model,
        basis,
        design,
        nuisance,
        theta_n,
        theta_lambda: theta.lambda,
        x_range: data.x_range(),
        eta_means,
    })
}

impl FittedModel {
    fn kernel(
        &self,
        c: &ScoreComponents,
        gamma: f64,
        selection_score: &DVector<f64>,
        cfg: &PipelineConfig,
        stream: u64,
    ) -> Result<StatisticKernel> {
        match cfg.norm {
            NormKind::Sup => {
                let mut sup = SupNormConfig::new(gamma);
                sup.lambda2 = cfg.lambda2;
                sup_norm_kernel_or_boundary(c, self.basis.kappa(), selection_score, &sup)
            }
            NormKind::L2 => {
                let mut l2 = L2NormConfig::new(
                    gamma,
                    rng::derive_seed(cfg.seed, rng::tag::DIRECTIONS, stream),
                );
                l2.b = cfg.directions;
                l2.lambda2 = cfg.lambda2;
                l2_norm_kernel_or_widened(c, self.basis.kappa(), &l2)
            }
        }
    }

    fn bootstrap(
        &self,
        kernel: &StatisticKernel,
        cfg: &PipelineConfig,
        stream: u64,
    ) -> Result<BootstrapResult> {
        let at_theta_n = self
            .design
            .components(self.theta_n.coeffs(), self.theta_n.coeffs())?;
        bootstrap_distribution(
            &at_theta_n,
            kernel,
            cfg.boot,
            rng::derive_seed(cfg.seed, rng::tag::MULTIPLIERS, stream),
            cfg.multiplier,
        )
    }

    /// Tests `H0: θ0 = θ*`.
    pub fn test(&self, theta_star: &FunctionExpansion, cfg: &PipelineConfig) -> Result<TestResult> {
        if theta_star.basis() != &self.basis && theta_star.basis().as_ref() != self.basis.as_ref() {
            return Err(Error::InvalidArgument("θ* must use the model's basis".into()));
        }
        let c = self
            .design
            .components(theta_star.coeffs(), self.theta_n.coeffs())
            .map_err(|e| e.at_stage("components"))?;
        let gamma = select_gamma(&self.theta_n, theta_star, &c).map_err(|e| e.at_stage("gamma"))?;
        let g = c.score_vector();
        let kernel = self
            .kernel(&c, gamma, &g, cfg, 0)
            .map_err(|e| e.at_stage("statistic"))?;
        let statistic = kernel.evaluate(&g, c.n);
        let boot = self
            .bootstrap(&kernel, cfg, 0)
            .map_err(|e| e.at_stage("bootstrap"))?;
        Ok(TestResult {
            statistic,
            p_value: p_value(statistic, &boot),
            p_value_conservative: p_value_conservative(statistic, &boot),
            bootstrap: boot,
            norm: cfg.norm,
            tuning: kernel.tuning.clone(),
            theta_n: self.theta_n.clone(),
            theta_lambda: self.theta_lambda,
            nuisance: self.nuisance.as_ref().map(|f| f.learner_config.clone()),
        })
    }

    /// Resolved roughness bound.
    pub fn zeta(&self, smoothness: Smoothness) -> f64 {
        match smoothness {
            Smoothness::Oracle(v) => v,
            Smoothness::Plugin => self.theta_n.rkhs_norm(),
        }
    }

    /// Evenly spaced grid over the observed exposure range.
    pub fn default_grid(&self, points: usize) -> Vec<f64> {
        even_grid(self.x_range.0, self.x_range.1, points)
    }

    /// Simultaneous band at `grid` by inverting the test over
    /// `{θ : J(θ) ≤ ζ}`.
    pub fn band(
        &self,
        smoothness: Smoothness,
        grid: Vec<f64>,
        cfg: &PipelineConfig,
    ) -> Result<ConfidenceBand> {
        let zero = DVector::zeros(self.basis.d());
        let c = self
            .design
            .components(&zero, self.theta_n.coeffs())
            .map_err(|e| e.at_stage("components"))?;
        let gamma = select_gamma_band(&self.theta_n, &c).map_err(|e| e.at_stage("gamma"))?;
        let g = c.score_vector();
        let kernel = self
            .kernel(&c, gamma, &g, cfg, 1)
            .map_err(|e| e.at_stage("statistic"))?;
        let boot = self
            .bootstrap(&kernel, cfg, 1)
            .map_err(|e| e.at_stage("bootstrap"))?;
        let req = BandRequest {
            grid,
            zeta: self.zeta(smoothness),
            alpha: cfg.alpha,
            kernel,
            residual_base: self.design.residual_base.clone(),
            components: c,
            basis: self.basis.clone(),
            x_range: self.x_range,
            mean_zero: match self.model {
                ModelKind::Nonparametric => None,
                ModelKind::Pam => Some(self.eta_means.clone()),
            },
        };
        build_band(&req, &boot).map_err(|e| e.at_stage("band"))
    }
}

/// Fits the model and tests `H0: θ0 = θ*` in one call.
pub fn run_test(
    data: &Dataset,
    model: ModelKind,
    theta_star: &FunctionExpansion,
    cfg: &PipelineConfig,
) -> Result<TestResult> {
    fit_model(data, theta_star.basis().clone(), model, cfg)?.test(theta_star, cfg)
}
