//! Flat TOML run configuration. Every key has a command-line override.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::designs::DesignKind;
use super::pipeline::{ModelKind, Smoothness};
use crate::bootstrap::MultiplierKind;
use crate::error::{Error, Result};
use crate::stats::{NormKind, DEFAULT_DIRECTIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model for `test`/`band`/`analyze`; unset means nonparametric for
    /// `test` and `band`, partially additive for `analyze`.
    pub model: Option<ModelKind>,
    /// Unset means sup for single analyses and both norms for `simulate`.
    pub norm: Option<NormKind>,
    /// Basis size; unset uses the per-design or per-command default.
    pub d: Option<usize>,
    /// Bootstrap replicates; unset uses 1000 (10000 for `analyze`).
    pub boot: Option<usize>,
    pub alpha: f64,
    pub seed: u64,
    pub reps: usize,
    pub workers: usize,
    /// `plugin` or `oracle:<value>`; unset uses the plug-in bound, or the
    /// true roughness in simulations.
    pub zeta: Option<String>,
    pub grid_points: usize,
    pub design: DesignKind,
    pub n: Vec<usize>,
    pub noise_sd: f64,
    pub multiplier: MultiplierKind,
    pub directions: usize,
    pub folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: None,
            norm: None,
            d: None,
            boot: None,
            alpha: 0.05,
            seed: 0,
            reps: 200,
            workers: 1,
            zeta: None,
            grid_points: 50,
            design: DesignKind::Example1,
            n: vec![500],
            noise_sd: 3.0,
            multiplier: MultiplierKind::Gaussian,
            directions: DEFAULT_DIRECTIONS,
            folds: 5,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn smoothness(&self) -> Result<Option<Smoothness>> {
        self.zeta.as_deref().map(str::parse).transpose()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.grid_points == 0 {
            return Err(Error::InvalidArgument("grid_points must be positive".into()));
        }
        if self.n.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument("sample sizes must be positive".into()));
        }
        self.smoothness()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = RunConfig::parse("norm = \"l2\"\nseed = 7\nn = [100, 200]\n").unwrap();
        assert_eq!(cfg.norm, Some(NormKind::L2));
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.n, vec![100, 200]);
        assert_eq!(cfg.alpha, 0.05);
        assert_eq!(cfg.model, None);
    }

    #[test]
    fn unknown_keys_and_bad_values_report_lines() {
        let err = RunConfig::parse("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
        let err = RunConfig::parse("alpha = 0.1\nnorm = \"max\"\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn zeta_is_checked() {
        let mut cfg = RunConfig::default();
        cfg.zeta = Some("oracle:3.5".into());
        assert_eq!(cfg.smoothness().unwrap(), Some(Smoothness::Oracle(3.5)));
        cfg.zeta = Some("oracle".into());
        assert!(cfg.validate().is_err());
    }
}
