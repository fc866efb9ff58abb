//! Monte Carlo study runner: type I error, power, simultaneous coverage and
//! band width per (design, n, norm, smoothness mode) cell.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use super::designs::{theta0, theta0_roughness, DesignKind, SimDesign};
use super::pipeline::{fit_model, ModelKind, PipelineConfig, Smoothness};
use crate::basis::{FunctionExpansion, SobolevBasis};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::NormKind;

/// Knobs of a simulation study beyond the per-test pipeline settings.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub designs: Vec<(DesignKind, usize)>,
    pub reps: usize,
    pub norms: Vec<NormKind>,
    pub smoothness: Vec<Smoothness>,
    pub seed: u64,
    pub workers: usize,
    pub grid_points: usize,
    pub noise_sd: f64,
    /// Basis size per design; `None` uses 50 for Example 1 and 10 for
    /// Example 2.
    pub d: Option<usize>,
    pub pipeline: PipelineConfig,
    /// Skip the band (coverage and width are then reported as NaN).
    pub skip_bands: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            designs: vec![(DesignKind::Example1, 500)],
            reps: 200,
            norms: vec![NormKind::Sup, NormKind::L2],
            smoothness: vec![Smoothness::Oracle(theta0_roughness())],
            seed: 0,
            workers: 1,
            grid_points: 50,
            noise_sd: 3.0,
            d: None,
            pipeline: PipelineConfig::default(),
            skip_bands: false,
        }
    }
}

pub fn default_d(kind: DesignKind) -> usize {
    match kind {
        DesignKind::Example1 => 50,
        DesignKind::Example2 => 10,
    }
}

/// What one replicate produced for one (norm, smoothness) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub design: DesignKind,
    pub n: usize,
    pub norm: NormKind,
    pub smoothness_mode: &'static str,
    pub rep: usize,
    /// p-value of the test against the (projected) truth.
    pub p_null: Option<f64>,
    /// p-value of the test against `θ* ≡ 0`.
    pub p_alt: Option<f64>,
    pub covered: Option<bool>,
    pub width: Option<f64>,
    pub errors: Vec<String>,
    pub seconds: f64,
}

/// Aggregated rates for one cell, with Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub design: DesignKind,
    pub n: usize,
    pub norm: NormKind,
    pub smoothness_mode: &'static str,
    pub reps: usize,
    pub type1: f64,
    pub type1_se: f64,
    pub power: f64,
    pub power_se: f64,
    pub coverage: f64,
    pub coverage_se: f64,
    pub mean_width: f64,
    pub failures: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub cells: Vec<CellSummary>,
    pub records: Vec<ReplicateRecord>,
    pub reps: usize,
    pub alpha: f64,
}

impl StudyReport {
    /// Null p-values of one cell, in replicate order.
    pub fn null_p_values(&self, design: DesignKind, n: usize, norm: NormKind) -> Vec<f64> {
        let mode = self.records.first().map(|r| r.smoothness_mode);
        self.records
            .iter()
            .filter(|r| r.design == design && r.n == n && r.norm == norm && Some(r.smoothness_mode) == mode)
            .filter_map(|r| r.p_null)
            .collect()
    }

    pub fn cell(&self, design: DesignKind, n: usize, norm: NormKind) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.design == design && c.n == n && c.norm == norm)
    }
}

fn rate(hits: usize, total: usize) -> (f64, f64) {
    if total == 0 {
        return (f64::NAN, f64::NAN);
    }
    let p = hits as f64 / total as f64;
    (p, (p * (1.0 - p) / total as f64).sqrt())
}

/// Runs every replicate of every cell. Each replicate draws its data,
/// bootstrap multipliers and Monte Carlo directions from streams keyed by
/// `(seed, design, n, rep)`, so results do not depend on `workers`.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    if cfg.reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    if cfg.norms.is_empty() || cfg.designs.is_empty() {
        return Err(Error::InvalidArgument("study needs at least one design and norm".into()));
    }
    let modes: Vec<Smoothness> = if cfg.skip_bands || cfg.smoothness.is_empty() {
        vec![Smoothness::Plugin]
    } else {
        cfg.smoothness.clone()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;

    let mut records = Vec::new();
    for (cell_index, &(kind, n)) in cfg.designs.iter().enumerate() {
        let d = cfg.d.unwrap_or_else(|| default_d(kind));
        let basis = Arc::new(SobolevBasis::new(d, -1.0, 1.0)?);
        let projected = FunctionExpansion::from_function(basis.clone(), theta0);
        let zero = FunctionExpansion::zero(basis.clone());
        let design_seed = rng::derive_seed(cfg.seed, rng::tag::REPLICATE, cell_index as u64);
        let per_rep: Vec<Vec<ReplicateRecord>> = pool.install(|| {
            (0..cfg.reps)
                .into_par_iter()
                .map(|rep| {
                    let seed = rng::derive_seed(design_seed, rng::tag::REPLICATE, rep as u64);
                    run_replicate(cfg, kind, n, rep, seed, &basis, &projected, &zero, &modes)
                })
                .collect()
        });
        records.extend(per_rep.into_iter().flatten());
    }

    let mut cells = Vec::new();
    for &(kind, n) in &cfg.designs {
        for &norm in &cfg.norms {
            for mode in &modes {
                let recs: Vec<&ReplicateRecord> = records
                    .iter()
                    .filter(|r| {
                        r.design == kind
                            && r.n == n
                            && r.norm == norm
                            && r.smoothness_mode == mode.mode_name()
                    })
                    .collect();
                cells.push(summarize(kind, n, norm, mode.mode_name(), &recs, cfg));
            }
        }
    }
    Ok(StudyReport {
        cells,
        records,
        reps: cfg.reps,
        alpha: cfg.pipeline.alpha,
    })
}

fn summarize(
    design: DesignKind,
    n: usize,
    norm: NormKind,
    mode: &'static str,
    recs: &[&ReplicateRecord],
    cfg: &StudyConfig,
) -> CellSummary {
    let alpha = cfg.pipeline.alpha;
    let nulls: Vec<f64> = recs.iter().filter_map(|r| r.p_null).collect();
    let alts: Vec<f64> = recs.iter().filter_map(|r| r.p_alt).collect();
    let covers: Vec<bool> = recs.iter().filter_map(|r| r.covered).collect();
    let widths: Vec<f64> = recs.iter().filter_map(|r| r.width).collect();
    let (type1, type1_se) = rate(nulls.iter().filter(|&&p| p <= alpha).count(), nulls.len());
    let (power, power_se) = rate(alts.iter().filter(|&&p| p <= alpha).count(), alts.len());
    let (coverage, coverage_se) = rate(covers.iter().filter(|&&c| c).count(), covers.len());
    let mean_width = if widths.is_empty() {
        f64::NAN
    } else {
        widths.iter().sum::<f64>() / widths.len() as f64
    };
    CellSummary {
        design,
        n,
        norm,
        smoothness_mode: mode,
        reps: recs.len(),
        type1,
        type1_se,
        power,
        power_se,
        coverage,
        coverage_se,
        mean_width,
        failures: recs.iter().filter(|r| !r.errors.is_empty()).count(),
        seconds: recs.iter().map(|r| r.seconds).sum(),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_replicate(
    cfg: &StudyConfig,
    kind: DesignKind,
    n: usize,
    rep: usize,
    seed: u64,
    basis: &Arc<SobolevBasis>,
    projected: &FunctionExpansion,
    zero: &FunctionExpansion,
    modes: &[Smoothness],
) -> Vec<ReplicateRecord> {
    let start = Instant::now();
    let design = SimDesign {
        kind,
        n,
        noise_sd: cfg.noise_sd,
        seed,
    };
    let model = match kind {
        DesignKind::Example1 => ModelKind::Nonparametric,
        DesignKind::Example2 => ModelKind::Pam,
    };
    let mut pipeline = cfg.pipeline.clone();
    pipeline.seed = seed;
    let fitted = design
        .generate()
        .and_then(|data| fit_model(&data, basis.clone(), model, &pipeline).map(|f| (data, f)));
    let setup_seconds = start.elapsed().as_secs_f64();

    let mut out = Vec::new();
    for &norm in &cfg.norms {
        let t0 = Instant::now();
        let mut p = pipeline.clone();
        p.norm = norm;
        let mut errors = Vec::new();
        let (p_null, p_alt, fitted_ok) = match &fitted {
            Err(e) => {
                errors.push(e.to_string());
                (None, None, None)
            }
            Ok((data, f)) => {
                let null = f.test(projected, &p).map(|r| r.p_value);
                let alt = f.test(zero, &p).map(|r| r.p_value);
                let null = null.map_err(|e| errors.push(format!("null test: {e}"))).ok();
                let alt = alt.map_err(|e| errors.push(format!("power test: {e}"))).ok();
                (null, alt, Some((data, f)))
            }
        };
        let test_seconds = t0.elapsed().as_secs_f64() + setup_seconds / cfg.norms.len() as f64;
        for mode in modes {
            let t1 = Instant::now();
            let mut errs = errors.clone();
            let (covered, width) = match (fitted_ok, cfg.skip_bands) {
                (Some((data, f)), false) => {
                    // the band targets the representative with the same
                    // identifiability convention as the fit
                    let shift = match model {
                        ModelKind::Nonparametric => 0.0,
                        ModelKind::Pam => {
                            data.x().iter().map(|&x| theta0(x)).sum::<f64>() / data.n() as f64
                        }
                    };
                    let grid = f.default_grid(cfg.grid_points);
                    match f.band(*mode, grid, &p) {
                        Ok(band) => {
                            let solver_error = band
                                .errors
                                .iter()
                                .flatten()
                                .find(|e| !matches!(e, Error::InfeasibleBand { .. }));
                            if let Some(e) = solver_error {
                                errs.push(format!("band: {e}"));
                                (None, None)
                            } else if band.feasible.iter().all(|&ok| ok) {
                                (
                                    Some(band.covers(|x| theta0(x) - shift)),
                                    Some(band.mean_width()),
                                )
                            } else {
                                // an empty region cannot contain θ0
                                (Some(false), None)
                            }
                        }
                        Err(e) => {
                            errs.push(format!("band: {e}"));
                            (None, None)
                        }
                    }
                }
                _ => (None, None),
            };
            out.push(ReplicateRecord {
                design: kind,
                n,
                norm,
                smoothness_mode: mode.mode_name(),
                rep,
                p_null,
                p_alt,
                covered,
                width,
                errors: errs,
                seconds: test_seconds / modes.len() as f64 + t1.elapsed().as_secs_f64(),
            });
        }
    }
    out
}

/// Report table with one row per cell.
pub fn write_report_csv<W: std::io::Write>(report: &StudyReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record([
        "design",
        "n",
        "norm",
        "smoothness_mode",
        "reps",
        "type1",
        "type1_se",
        "power",
        "power_se",
        "coverage",
        "coverage_se",
        "mean_width",
        "failures",
        "seconds",
    ])
    .map_err(io)?;
    for c in &report.cells {
        w.write_record([
            c.design.to_string(),
            c.n.to_string(),
            c.norm.to_string(),
            c.smoothness_mode.to_string(),
            c.reps.to_string(),
            format!("{:.6}", c.type1),
            format!("{:.6}", c.type1_se),
            format!("{:.6}", c.power),
            format!("{:.6}", c.power_se),
            format!("{:.6}", c.coverage),
            format!("{:.6}", c.coverage_se),
            format!("{:.6}", c.mean_width),
            c.failures.to_string(),
            format!("{:.3}", c.seconds),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roughness_oracle_bounds_partial_sums() {
        let full = theta0_roughness();
        let basis = Arc::new(SobolevBasis::new(50, -1.0, 1.0).unwrap());
        let partial = FunctionExpansion::from_function(basis, theta0).rkhs_norm();
        assert!(partial <= full * (1.0 + 1e-9));
        assert!(partial >= 0.9 * full, "partial {partial} full {full}");
    }

    #[test]
    fn rates_and_errors() {
        assert_eq!(rate(0, 0).0.is_nan(), true);
        let (p, se) = rate(5, 100);
        assert_eq!(p, 0.05);
        assert!((se - (0.05f64 * 0.95 / 100.0).sqrt()).abs() < 1e-15);
    }
}
