//! Truncated eigensystem of the periodic second-order Sobolev kernel on [0, 1].
//!
//! Eigenfunctions come in cosine/sine pairs
//! `√2 cos(2πjz)`, `√2 sin(2πjz)` sharing the eigenvalue `(2πj)^-4`, and the
//! RKHS roughness of `Σ a_k η_k` is `J = Σ a_k² / κ_k`. Raw covariates are
//! mapped affinely onto [0, 1] before evaluation.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SobolevBasis {
    d: usize,
    kappa: Vec<f64>,
    domain_lo: f64,
    domain_hi: f64,
}

impl SobolevBasis {
    /// Builds the first `d` eigenpairs on `[domain_lo, domain_hi]`.
    ///
    /// An odd `d` is rounded up to the next even number so that every cosine
    /// has its sine partner.
    pub fn new(d: usize, domain_lo: f64, domain_hi: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("basis size d must be positive"));
        }
        if !(domain_lo.is_finite() && domain_hi.is_finite()) || domain_lo >= domain_hi {
            return Err(Error::invalid(format!(
                "empty basis domain [{domain_lo}, {domain_hi}]"
            )));
        }
        let d = if d % 2 == 1 {
            log::warn!("odd basis size {d} rounded up to {}", d + 1);
            d + 1
        } else {
            d
        };
        let kappa = (0..d)
            .map(|k| (2.0 * PI * frequency(k) as f64).powi(-4))
            .collect();
        Ok(SobolevBasis {
            d,
            kappa,
            domain_lo,
            domain_hi,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    /// Diagonal of the roughness penalty, `1/κ_k`.
    pub fn inv_kappa(&self) -> DVector<f64> {
        DVector::from_iterator(self.d, self.kappa.iter().map(|k| 1.0 / k))
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.domain_lo, self.domain_hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.domain_lo && x <= self.domain_hi
    }

    /// Affine map of a raw covariate value onto [0, 1].
    pub fn rescale(&self, x: f64) -> Result<f64> {
        if !self.contains(x) {
            return Err(Error::OutOfDomain {
                x,
                lo: self.domain_lo,
                hi: self.domain_hi,
            });
        }
        Ok((x - self.domain_lo) / (self.domain_hi - self.domain_lo))
    }

    /// `η_k(z)` for 0-based index `k` at an already rescaled point.
    pub fn eigenfunction(&self, k: usize, z: f64) -> f64 {
        eigenfunction(k, z)
    }

    /// All `d` eigenfunctions at the raw point `x`.
    pub fn evaluate_all(&self, x: f64) -> Result<DVector<f64>> {
        let z = self.rescale(x)?;
        Ok(DVector::from_iterator(
            self.d,
            (0..self.d).map(|k| eigenfunction(k, z)),
        ))
    }

    /// `n × d` matrix with entry `(i, k) = η_k(x_i)`.
    pub fn design_matrix(&self, xs: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(xs.len(), self.d);
        for (i, &x) in xs.iter().enumerate() {
            let z = self.rescale(x)?;
            for k in 0..self.d {
                out[(i, k)] = eigenfunction(k, z);
            }
        }
        Ok(out)
    }

    /// L2([0,1]) projection coefficients of `f` (a function of the raw
    /// covariate) onto the basis, by composite 5-point Gauss-Legendre
    /// quadrature over `panels` equal panels of the rescaled domain.
    pub fn project<F: Fn(f64) -> f64>(&self, f: F, panels: usize) -> DVector<f64> {
        let panels = panels.max(1);
        let width = self.domain_hi - self.domain_lo;
        let mut coeffs = DVector::zeros(self.d);
        let h = 1.0 / panels as f64;
        for p in 0..panels {
            let mid = (p as f64 + 0.5) * h;
            for (node, weight) in GL5_NODES.iter().zip(GL5_WEIGHTS.iter()) {
                let z = mid + 0.5 * h * node;
                let fx = f(self.domain_lo + z * width);
                let wz = 0.5 * h * weight * fx;
                for k in 0..self.d {
                    coeffs[k] += wz * eigenfunction(k, z);
                }
            }
        }
        coeffs
    }
}

const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Frequency `j` of the 0-based eigenfunction index `k`.
fn frequency(k: usize) -> usize {
    k / 2 + 1
}

fn eigenfunction(k: usize, z: f64) -> f64 {
    let arg = 2.0 * PI * frequency(k) as f64 * z;
    if k % 2 == 0 {
        SQRT_2 * arg.cos()
    } else {
        SQRT_2 * arg.sin()
    }
}

/// Coefficients of a function in a [`SobolevBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionExpansion {
    basis: Arc<SobolevBasis>,
    coeffs: DVector<f64>,
}

impl FunctionExpansion {
    pub fn new(basis: Arc<SobolevBasis>, coeffs: DVector<f64>) -> Result<Self> {
        if coeffs.len() != basis.d() {
            return Err(Error::invalid(format!(
                "expansion has {} coefficients but the basis has d = {}",
                coeffs.len(),
                basis.d()
            )));
        }
        Ok(FunctionExpansion { basis, coeffs })
    }

    pub fn zero(basis: Arc<SobolevBasis>) -> Self {
        let d = basis.d();
        FunctionExpansion {
            basis,
            coeffs: DVector::zeros(d),
        }
    }

    /// Expansion of `f` obtained by L2 projection.
    pub fn from_function<F: Fn(f64) -> f64>(basis: Arc<SobolevBasis>, f: F) -> Self {
        let coeffs = basis.project(f, 4096);
        FunctionExpansion { basis, coeffs }
    }

    pub fn basis(&self) -> &Arc<SobolevBasis> {
        &self.basis
    }

    pub fn coeffs(&self) -> &DVector<f64> {
        &self.coeffs
    }

    /// `Σ_k a_k η_k(x)`; errors when `x` is outside the basis domain.
    pub fn evaluate(&self, x: f64) -> Result<f64> {
        let z = self.basis.rescale(x)?;
        Ok(self
            .coeffs
            .iter()
            .enumerate()
            .map(|(k, a)| a * eigenfunction(k, z))
            .sum())
    }

    /// Roughness `J(f) = Σ a_k² / κ_k`.
    pub fn rkhs_norm(&self) -> f64 {
        self.coeffs
            .iter()
            .zip(self.basis.kappa())
            .map(|(a, k)| a * a / k)
            .sum()
    }

    /// `self - other`, both in the same basis.
    pub fn difference(&self, other: &FunctionExpansion) -> Result<FunctionExpansion> {
        if self.basis != other.basis {
            return Err(Error::invalid("expansions live in different bases"));
        }
        Ok(FunctionExpansion {
            basis: self.basis.clone(),
            coeffs: &self.coeffs - &other.coeffs,
        })
    }
}

/// Free-function form of [`SobolevBasis::new`].
pub fn build_basis(d: usize, domain_lo: f64, domain_hi: f64) -> Result<SobolevBasis> {
    SobolevBasis::new(d, domain_lo, domain_hi)
}

pub fn evaluate_expansion(f: &FunctionExpansion, x: f64) -> Result<f64> {
    f.evaluate(x)
}

pub fn rkhs_norm(f: &FunctionExpansion) -> f64 {
    f.rkhs_norm()
}
