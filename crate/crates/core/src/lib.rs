//! Restricted score tests for nonparametric and partially additive mean
//! regression, with multiplier-bootstrap calibration and simultaneous
//! confidence bands over a Sobolev ball.

pub mod band;
pub mod basis;
pub mod bootstrap;
pub mod error;
pub mod harness;
mod linalg;
pub mod nuisance;
pub mod rng;
pub mod score;
pub mod stats;

pub use band::{build_band, BandRequest, ConfidenceBand, Sense};
pub use basis::{FunctionExpansion, SobolevBasis};
pub use bootstrap::{bootstrap_distribution, critical_value, p_value, BootstrapResult, MultiplierKind};
pub use error::{Error, Result};
pub use nuisance::{fit_nuisance, Dataset, LearnerConfig, NuisanceFit};
pub use score::{assemble_components, ScoreComponents};
pub use stats::{NormKind, StatisticKernel};
