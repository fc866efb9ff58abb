//! Simulation designs: the sinusoidal mean model with no adjusters and the
//! partially additive model with two confounders.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::Dataset;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    Example1,
    Example2,
}

impl std::fmt::Display for DesignKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DesignKind::Example1 => "example1",
            DesignKind::Example2 => "example2",
        })
    }
}

impl std::str::FromStr for DesignKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "example1" | "1" => Ok(DesignKind::Example1),
            "example2" | "2" => Ok(DesignKind::Example2),
            other => Err(Error::InvalidArgument(format!("unknown design `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimDesign {
    pub kind: DesignKind,
    pub n: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SimDesign {
    pub fn new(kind: DesignKind, n: usize, seed: u64) -> Self {
        SimDesign {
            kind,
            n,
            noise_sd: 3.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("design needs n ≥ 1".into()));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise_sd must be positive, got {}",
                self.noise_sd
            )));
        }
        Ok(())
    }

    /// Draws a dataset with the design's true exposure effect.
    pub fn generate(&self) -> Result<Dataset> {
        match self.kind {
            DesignKind::Example1 => gen_example1(self),
            DesignKind::Example2 => gen_example2(self),
        }
    }
}

/// `θ0(x) = sin(π x² sign x)`.
pub fn theta0(x: f64) -> f64 {
    (PI * x * x * sign(x)).sin()
}

/// Second derivative of [`theta0`].
pub fn theta0_second_derivative(x: f64) -> f64 {
    let u = PI * x * x;
    sign(x) * (2.0 * PI * u.cos() - 4.0 * PI * PI * x * x * u.sin())
}

/// `f0(w) = −4[logistic(5w₁) − 1/2] − 2 sign(w₂) w₂²`.
pub fn f0(w1: f64, w2: f64) -> f64 {
    let logistic = 1.0 / (1.0 + (-5.0 * w1).exp());
    -4.0 * (logistic - 0.5) - 2.0 * sign(w2) * w2 * w2
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `X ~ U(−1, 1)`, `Y = θ0(X) + ε`.
pub fn gen_example1(design: &SimDesign) -> Result<Dataset> {
    gen_example1_with(design, theta0)
}

/// Example 1 with an arbitrary mean function, e.g. a zero null.
pub fn gen_example1_with<F: Fn(f64) -> f64>(design: &SimDesign, mean: F) -> Result<Dataset> {
    design.validate()?;
    let mut r = rng::stream(design.seed, rng::tag::DATA, 0);
    let noise = Normal::new(0.0, design.noise_sd).expect("validated noise sd");
    let mut x = Vec::with_capacity(design.n);
    let mut y = Vec::with_capacity(design.n);
    for _ in 0..design.n {
        let xi: f64 = r.random_range(-1.0..1.0);
        x.push(xi);
        y.push(mean(xi) + noise.sample(&mut r));
    }
    Dataset::without_adjusters(x, y)
}

/// `W₁, W₂ ~ U(−1, 1)`, `X = W₁/3 + sin(πW₂)/3 + Δ` with `Δ ~ U(−1/3, 1/3)`,
/// `Y = f0(W) + θ0(X) + ε`.
pub fn gen_example2(design: &SimDesign) -> Result<Dataset> {
    design.validate()?;
    let mut r = rng::stream(design.seed, rng::tag::DATA, 0);
    let noise = Normal::new(0.0, design.noise_sd).expect("validated noise sd");
    let n = design.n;
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut w = DMatrix::zeros(n, 2);
    for i in 0..n {
        let w1: f64 = r.random_range(-1.0..1.0);
        let w2: f64 = r.random_range(-1.0..1.0);
        let delta: f64 = r.random_range(-1.0 / 3.0..1.0 / 3.0);
        let xi = w1 / 3.0 + (PI * w2).sin() / 3.0 + delta;
        w[(i, 0)] = w1;
        w[(i, 1)] = w2;
        x.push(xi);
        y.push(f0(w1, w2) + theta0(xi) + noise.sample(&mut r));
    }
    Dataset::new(x, w, y)
}

/// `J(θ0)` on the domain `[−1, 1]`: `8 ∫ θ0''(x)² dx`, the factor coming from
/// the affine map onto `[0, 1]`.
pub fn theta0_roughness() -> f64 {
    // θ0''² is even; integrate on [0, 1] with composite Simpson
    let panels = 20_000;
    let h = 1.0 / panels as f64;
    let f = |x: f64| theta0_second_derivative(x).powi(2);
    let mut acc = f(0.0) + f(1.0);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(i as f64 * h);
    }
    16.0 * acc * h / 3.0
}
