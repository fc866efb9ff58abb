//! CSV ingestion and output: datasets with columns `x`, `y`, `w1..wp`, band
//! tables, and the one-call analysis of a data file.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use super::pipeline::{fit_model, ModelKind, PipelineConfig, Smoothness, TestResult};
use crate::band::ConfidenceBand;
use crate::basis::{FunctionExpansion, SobolevBasis};
use crate::error::{Error, Result};
use crate::nuisance::Dataset;

/// Which columns hold the exposure, outcome and adjusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSpec {
    pub exposure: String,
    pub outcome: String,
    /// `None` takes every column named `w<k>`, ordered by `k`.
    pub adjusters: Option<Vec<String>>,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        ColumnSpec {
            exposure: "x".into(),
            outcome: "y".into(),
            adjusters: None,
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Reads a dataset. Rows with an empty or `NA` field are skipped as
/// incomplete; `nan`/`inf` values are rejected with their row indices.
pub fn read_dataset<R: Read>(input: R, spec: &ColumnSpec) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers().map_err(csv_error)?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let xi = find(&spec.exposure)?;
    let yi = find(&spec.outcome)?;
    let adjusters: Vec<String> = match &spec.adjusters {
        Some(cols) => cols.clone(),
        None => {
            let mut ws: Vec<(usize, String)> = headers
                .iter()
                .filter_map(|h| {
                    h.strip_prefix('w')
                        .and_then(|k| k.parse::<usize>().ok())
                        .map(|k| (k, h.to_string()))
                })
                .collect();
            ws.sort();
            ws.into_iter().map(|(_, h)| h).collect()
        }
    };
    let wi: Vec<usize> = adjusters.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut w: Vec<Vec<f64>> = Vec::new();
    let mut skipped = 0usize;
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let parse = |idx: usize| -> Result<Option<f64>> {
            let field = record.get(idx).unwrap_or("");
            if field.is_empty() || field.eq_ignore_ascii_case("na") {
                return Ok(None);
            }
            field.parse::<f64>().map(Some).map_err(|_| Error::Parse {
                line,
                message: format!("column `{}`: cannot parse `{field}` as a number", &headers[idx]),
            })
        };
        let xv = parse(xi)?;
        let yv = parse(yi)?;
        let wv: Vec<Option<f64>> = wi.iter().map(|&i| parse(i)).collect::<Result<_>>()?;
        match (xv, yv, wv.iter().all(Option::is_some)) {
            (Some(xv), Some(yv), true) => {
                x.push(xv);
                y.push(yv);
                w.push(wv.into_iter().flatten().collect());
            }
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} incomplete rows");
    }
    if x.is_empty() {
        return Err(Error::InsufficientData { rows: 0, needed: 1 });
    }
    let p = wi.len();
    let wm = DMatrix::from_fn(x.len(), p, |i, j| w[i][j]);
    Dataset::new(x, wm, y)
}

pub fn read_dataset_file(path: &Path, spec: &ColumnSpec) -> Result<Dataset> {
    read_dataset(File::open(path)?, spec)
}

/// Writes `x, y, w1..wp` with 17 significant digits, enough to round-trip
/// every `f64`.
pub fn write_dataset<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut header = vec!["x".to_string(), "y".to_string()];
    header.extend((1..=data.p()).map(|k| format!("w{k}")));
    w.write_record(&header).map_err(io)?;
    for i in 0..data.n() {
        let mut row = vec![format!("{:.16e}", data.x()[i]), format!("{:.16e}", data.y()[i])];
        row.extend(data.w().row(i).iter().map(|v| format!("{v:.16e}")));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Band table with columns `x, lower, upper, feasible`.
pub fn write_band_csv<W: Write>(band: &ConfidenceBand, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["x", "lower", "upper", "feasible"]).map_err(io)?;
    for i in 0..band.grid.len() {
        w.write_record([
            format!("{:.16e}", band.grid[i]),
            format!("{:.16e}", band.lower[i]),
            format!("{:.16e}", band.upper[i]),
            band.feasible[i].to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Settings of [`analyze_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeConfig {
    pub model: ModelKind,
    pub d: usize,
    pub grid_points: usize,
    pub smoothness: Smoothness,
    pub pipeline: PipelineConfig,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            model: ModelKind::Pam,
            d: 10,
            grid_points: 50,
            smoothness: Smoothness::Plugin,
            pipeline: PipelineConfig {
                boot: 10_000,
                ..PipelineConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub data: Dataset,
    pub test: TestResult,
    pub band: ConfidenceBand,
}

/// Tests `H0: θ0 ≡ 0` on an in-memory dataset and builds the band over the
/// observed exposure range.
pub fn analyze_dataset(data: Dataset, cfg: &AnalyzeConfig) -> Result<Analysis> {
    let d = SobolevBasis::new(cfg.d, 0.0, 1.0)?.d();
    if data.n() < d + 1 {
        return Err(Error::InsufficientData {
            rows: data.n(),
            needed: d + 1,
        });
    }
    let (lo, hi) = data.x_range();
    if !(hi > lo) {
        return Err(Error::InvalidArgument("exposure is constant".into()));
    }
    let basis = Arc::new(SobolevBasis::new(d, lo, hi)?);
    let fitted = fit_model(&data, basis.clone(), cfg.model, &cfg.pipeline)?;
    let test = fitted.test(&FunctionExpansion::zero(basis), &cfg.pipeline)?;
    let band = fitted.band(
        cfg.smoothness,
        fitted.default_grid(cfg.grid_points),
        &cfg.pipeline,
    )?;
    Ok(Analysis { data, test, band })
}

/// [`analyze_dataset`] on a CSV file.
pub fn analyze_csv(path: &Path, spec: &ColumnSpec, cfg: &AnalyzeConfig) -> Result<Analysis> {
    let data = read_dataset_file(path, spec)?;
    analyze_dataset(data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_column_is_named() {
        let err = read_dataset("x,z\n1,2\n".as_bytes(), &ColumnSpec::default()).unwrap_err();
        assert_eq!(err, Error::MissingColumn("y".into()));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = read_dataset("x,y\n1,2\n3,abc\n".as_bytes(), &ColumnSpec::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn non_finite_rows_are_reported() {
        let err =
            read_dataset("x,y\n1,2\n3,inf\n4,5\nnan,1\n".as_bytes(), &ColumnSpec::default()).unwrap_err();
        assert_eq!(err, Error::NonFiniteRows(vec![1, 3]));
    }

    #[test]
    fn incomplete_rows_are_skipped() {
        let data = read_dataset("x,y,w1\n1,2,3\n3,,1\n4,5,NA\n6,7,8\n".as_bytes(), &ColumnSpec::default())
            .unwrap();
        assert_eq!(data.n(), 2);
        assert_eq!(data.p(), 1);
    }

    #[test]
    fn adjusters_are_ordered_numerically() {
        let data = read_dataset("w10,y,w2,x\n1,2,3,4\n".as_bytes(), &ColumnSpec::default()).unwrap();
        assert_eq!(data.w()[(0, 0)], 3.0);
        assert_eq!(data.w()[(0, 1)], 1.0);
    }

    #[test]
    fn too_few_rows_for_the_basis() {
        let data = Dataset::new(
            vec![0.1, 0.2, 0.3],
            DMatrix::from_element(3, 1, 1.0),
            vec![1.0, 2.0, 3.0],
        )
        .unwrap();
        assert_eq!(
            analyze_dataset(data, &AnalyzeConfig::default()).unwrap_err(),
            Error::InsufficientData { rows: 3, needed: 11 }
        );
    }
}
