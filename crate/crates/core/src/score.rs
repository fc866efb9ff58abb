//! Quadratic-form building blocks of the Gâteaux-derivative estimators.
//!
//! For a candidate `θ = Σ a_k η_k` the residual vector is linear in the
//! coefficients, `S(θ) = r − Γa`, where `r` does not depend on `θ`. The
//! derivative in direction `h = Σ c_k η_k` is `n⁻¹ S(θ)ᵀ Γ c` and its
//! influence-function variance is `cᵀ V c` with
//! `V = n⁻¹ Γᵀ diag(S(θ_n))² Γ`.

use nalgebra::{DMatrix, DVector};

use crate::basis::{FunctionExpansion, SobolevBasis};
use crate::error::{Error, Result};
use crate::nuisance::{project_expansion, Dataset, NuisanceFit};

/// `r` and `Γ` for one dataset, independent of any candidate `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDesign {
    pub residual_base: DVector<f64>,
    pub gamma: DMatrix<f64>,
}

/// A risk functional whose derivative estimate is linear in the residuals.
pub trait GateauxModel {
    fn design(&self, data: &Dataset, basis: &SobolevBasis) -> Result<ScoreDesign>;
}

/// Nonparametric mean regression: `r = Y`, `Γ_ik = η_k(X_i)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NonparametricMean;

impl GateauxModel for NonparametricMean {
    fn design(&self, data: &Dataset, basis: &SobolevBasis) -> Result<ScoreDesign> {
        if data.p() != 0 {
            return Err(Error::ModelMisuse(
                "nonparametric model takes no adjustment covariates".into(),
            ));
        }
        Ok(ScoreDesign {
            residual_base: DVector::from_column_slice(data.y()),
            gamma: basis.design_matrix(data.x())?,
        })
    }
}

/// Partially additive mean regression with fitted nuisances:
/// `r_i = Y_i − μ_Y(W_i)` and `Γ_ik = η_k(X_i) − μ_{η_k}(W_i)`.
#[derive(Debug, Clone, Copy)]
pub struct PartiallyAdditiveMean<'a> {
    pub fit: &'a NuisanceFit,
    /// Subtract column means from `Γ` after the nuisance projection.
    pub center_gamma: bool,
}

impl GateauxModel for PartiallyAdditiveMean<'_> {
    fn design(&self, data: &Dataset, basis: &SobolevBasis) -> Result<ScoreDesign> {
        if data.p() == 0 {
            return Err(Error::ModelMisuse(
                "partially additive model needs adjustment covariates".into(),
            ));
        }
        if self.fit.n() != data.n() || self.fit.d() != basis.d() {
            return Err(Error::invalid(format!(
                "nuisance fit is {}x{} but data/basis are {}x{}",
                self.fit.n(),
                self.fit.d(),
                data.n(),
                basis.d()
            )));
        }
        let y = DVector::from_column_slice(data.y());
        let mut gamma = basis.design_matrix(data.x())? - &self.fit.mu_eta;
        if self.center_gamma {
            for mut col in gamma.column_iter_mut() {
                let mean = col.mean();
                col.add_scalar_mut(-mean);
            }
        }
        Ok(ScoreDesign {
            residual_base: y - &self.fit.mu_y,
            gamma,
        })
    }
}

/// `S(θ*)`, `Γ` and `V` (weighted at `θ_n`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreComponents {
    pub s: DVector<f64>,
    pub gamma: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub n: usize,
    pub residual_base: DVector<f64>,
}

impl ScoreDesign {
    pub fn n(&self) -> usize {
        self.residual_base.len()
    }

    pub fn d(&self) -> usize {
        self.gamma.ncols()
    }

    /// `S(θ) = r − Γa`.
    pub fn residuals(&self, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
        if coeffs.len() != self.d() {
            return Err(Error::invalid(format!(
                "expansion has {} coefficients, design has d = {}",
                coeffs.len(),
                self.d()
            )));
        }
        Ok(&self.residual_base - &self.gamma * coeffs)
    }

    /// Components for testing `θ* = theta_star` with variance weights at
    /// `theta_n`.
    pub fn components(
        &self,
        theta_star: &DVector<f64>,
        theta_n: &DVector<f64>,
    ) -> Result<ScoreComponents> {
        let s = self.residuals(theta_star)?;
        let weights = self.residuals(theta_n)?;
        Ok(ScoreComponents {
            s,
            v: variance_matrix(&self.gamma, &weights),
            gamma: self.gamma.clone(),
            n: self.n(),
            residual_base: self.residual_base.clone(),
        })
    }
}

/// `n⁻¹ Γᵀ diag(w)² Γ`, symmetrized.
pub fn variance_matrix(gamma: &DMatrix<f64>, weights: &DVector<f64>) -> DMatrix<f64> {
    let n = gamma.nrows();
    let mut q = gamma.clone();
    for (mut row, w) in q.row_iter_mut().zip(weights.iter()) {
        row *= *w;
    }
    let v = q.tr_mul(&q) / n as f64;
    (&v + v.transpose()) * 0.5
}

impl ScoreComponents {
    pub fn d(&self) -> usize {
        self.gamma.ncols()
    }

    /// `Γᵀ s`.
    pub fn score_vector(&self) -> DVector<f64> {
        self.gamma.tr_mul(&self.s)
    }

    /// Same `Γ`, `V` and `r`, with `s` replaced by `S(θ)` for `θ = coeffs`.
    pub fn recentered(&self, coeffs: &DVector<f64>) -> Result<ScoreComponents> {
        if coeffs.len() != self.d() {
            return Err(Error::invalid("coefficient length differs from d"));
        }
        Ok(ScoreComponents {
            s: &self.residual_base - &self.gamma * coeffs,
            ..self.clone()
        })
    }

    /// `V` with a small ridge when its smallest eigenvalue falls below
    /// `1e-10·trace(V)/d`.
    pub fn v_guarded(&self) -> DMatrix<f64> {
        let d = self.d();
        let floor = 1e-10 * self.v.trace() / d as f64;
        let min_eig = self
            .v
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let mut v = self.v.clone();
        if min_eig < floor && floor > 0.0 {
            for k in 0..d {
                v[(k, k)] += floor;
            }
        } else if floor <= 0.0 {
            // all-zero residuals: any positive ridge keeps downstream solves finite
            for k in 0..d {
                v[(k, k)] += f64::MIN_POSITIVE.sqrt();
            }
        }
        v
    }

    /// Uncentered per-observation influence values `S_i (Γc)_i`.
    pub fn influence_values(&self, h_coeffs: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(h_coeffs, self.d())?;
        Ok((&self.gamma * h_coeffs).component_mul(&self.s))
    }
}

fn check_len(v: &DVector<f64>, d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::invalid(format!(
            "direction has {} coefficients, expected {d}",
            v.len()
        )));
    }
    Ok(())
}

/// Builds components from raw inputs. `fit` must be present exactly when
/// the data carry adjustment covariates; `Γ` is column-centered for the
/// partially additive model.
pub fn assemble_components(
    data: &Dataset,
    basis: &SobolevBasis,
    fit: Option<&NuisanceFit>,
    theta_star: &FunctionExpansion,
    theta_n: &FunctionExpansion,
) -> Result<ScoreComponents> {
    if theta_star.basis().as_ref() != basis || theta_n.basis().as_ref() != basis {
        return Err(Error::invalid("expansions must share the supplied basis"));
    }
    let design = match fit {
        None => NonparametricMean.design(data, basis)?,
        Some(fit) => PartiallyAdditiveMean {
            fit,
            center_gamma: true,
        }
        .design(data, basis)?,
    };
    design.components(theta_star.coeffs(), theta_n.coeffs())
}

/// `μ_{n,θ}(W_i)` for an expansion, for callers that need it directly.
pub fn nuisance_of(fit: &NuisanceFit, theta: &FunctionExpansion) -> Result<DVector<f64>> {
    project_expansion(fit, theta.coeffs())
}

/// `n⁻¹ sᵀ Γ h`.
pub fn gateaux_derivative(c: &ScoreComponents, h_coeffs: &DVector<f64>) -> Result<f64> {
    check_len(h_coeffs, c.d())?;
    Ok(c.s.dot(&(&c.gamma * h_coeffs)) / c.n as f64)
}

/// `hᵀ V h`.
pub fn influence_variance(c: &ScoreComponents, h_coeffs: &DVector<f64>) -> Result<f64> {
    check_len(h_coeffs, c.d())?;
    Ok(h_coeffs.dot(&(&c.v * h_coeffs)).max(0.0))
}
