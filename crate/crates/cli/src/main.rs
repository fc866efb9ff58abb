//! `scoretest` command line: `test`, `band`, `simulate` and `analyze`.
//!
//! Settings come from an optional TOML file (`--config`) and are then
//! overridden by any flag given on the command line.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use scoretest::band::ConfidenceBand;
use scoretest::basis::{FunctionExpansion, SobolevBasis};
use scoretest::harness::csvio::{analyze_dataset, read_dataset_file, write_band_csv, AnalyzeConfig, ColumnSpec};
use scoretest::harness::designs::DesignKind;
use scoretest::harness::pipeline::{fit_model, ModelKind, PipelineConfig, Smoothness, TestResult};
use scoretest::harness::plot::{band_chart, line_chart, Series};
use scoretest::harness::study::{default_d, run_study, write_report_csv, StudyConfig, StudyReport};
use scoretest::harness::RunConfig;
use scoretest::nuisance::Dataset;
use scoretest::stats::NormKind;
use scoretest::MultiplierKind;

#[derive(Parser)]
#[command(name = "scoretest", version, about = "Restricted score tests and simultaneous confidence bands")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test H0: theta0 = theta* on one dataset (theta* defaults to zero).
    Test(DataArgs),
    /// Simultaneous confidence band for one dataset, written as CSV.
    Band(DataArgs),
    /// Monte Carlo study over the simulation designs, written as a report CSV.
    Simulate(CommonArgs),
    /// Partially additive analysis of a CSV file: test of theta0 = 0 plus band.
    Analyze(DataArgs),
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// TOML file with run settings; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file for the main table (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a static SVG chart to this path.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    norm: Option<NormKind>,
    /// Number of basis functions.
    #[arg(long)]
    d: Option<usize>,
    /// Bootstrap replicates M.
    #[arg(long)]
    boot: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Roughness bound: `plugin` or `oracle:<value>`.
    #[arg(long)]
    zeta: Option<String>,
    #[arg(long)]
    grid_points: Option<usize>,
    /// Simulation design: example1 or example2.
    #[arg(long)]
    design: Option<DesignKind>,
    /// Sample sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Bootstrap multipliers: gaussian or rademacher.
    #[arg(long)]
    multiplier: Option<MultiplierKind>,
    /// Monte Carlo directions for the L2 statistic.
    #[arg(long)]
    directions: Option<usize>,
    /// Cross-validation folds.
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "x")]
    exposure: String,
    #[arg(long, default_value = "y")]
    outcome: String,
    /// Adjustment columns, comma separated (default: every `w<k>` column).
    #[arg(long, value_delimiter = ',')]
    adjusters: Option<Vec<String>>,
    /// Basis coefficients of theta*, comma separated (default: zero).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    null: Option<Vec<f64>>,
}

impl CommonArgs {
    /// The config file, if any, with every given flag applied on top.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone().into(); })*
            };
        }
        set!(model, norm, d, boot, zeta);
        set!(alpha, seed, reps, workers, grid_points, design, n, noise_sd, multiplier, directions, folds);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn pipeline_config(cfg: &RunConfig, norm: NormKind, boot: usize) -> PipelineConfig {
    PipelineConfig {
        norm,
        boot,
        alpha: cfg.alpha,
        seed: cfg.seed,
        multiplier: cfg.multiplier,
        folds: cfg.folds,
        directions: cfg.directions,
        ..PipelineConfig::default()
    }
}

fn default_basis_size(model: ModelKind) -> usize {
    match model {
        ModelKind::Nonparametric => default_d(DesignKind::Example1),
        ModelKind::Pam => default_d(DesignKind::Example2),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_svg(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

fn column_spec(args: &DataArgs) -> ColumnSpec {
    ColumnSpec {
        exposure: args.exposure.clone(),
        outcome: args.outcome.clone(),
        adjusters: args.adjusters.clone(),
    }
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    read_dataset_file(&args.data, &column_spec(args))
        .with_context(|| format!("reading {}", args.data.display()))
}

fn write_test_result<W: Write>(out: &mut W, r: &TestResult) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.10e}")).unwrap_or_default();
    writeln!(
        out,
        "norm,statistic,p_value,p_value_conservative,boot,gamma,lambda1,lambda3,retained_fraction,theta_lambda"
    )?;
    writeln!(
        out,
        "{},{:.10e},{:.6},{:.6},{},{:.10e},{},{},{},{:.3e}",
        r.norm,
        r.statistic,
        r.p_value,
        r.p_value_conservative,
        r.bootstrap.m,
        r.tuning.gamma,
        opt(r.tuning.lambda1),
        opt(r.tuning.lambda3),
        opt(r.tuning.retained_fraction),
        r.theta_lambda
    )?;
    Ok(())
}

/// Basis over the observed exposure range.
fn data_basis(data: &Dataset, d: usize) -> Result<Arc<SobolevBasis>> {
    let (lo, hi) = data.x_range();
    if !(hi > lo) {
        bail!("exposure column is constant");
    }
    Ok(Arc::new(SobolevBasis::new(d, lo, hi)?))
}

fn run_single(args: &DataArgs, band: bool) -> Result<()> {
    let cfg = args.common.resolve()?;
    let data = load_data(args)?;
    let model = cfg.model.unwrap_or(ModelKind::Nonparametric);
    let basis = data_basis(&data, cfg.d.unwrap_or_else(|| default_basis_size(model)))?;
    let pipeline = pipeline_config(&cfg, cfg.norm.unwrap_or(NormKind::Sup), cfg.boot.unwrap_or(1000));
    let fitted = fit_model(&data, basis.clone(), model, &pipeline)?;
    let mut out = output(args.common.out.as_deref())?;
    if band {
        let smoothness = cfg.smoothness()?.unwrap_or(Smoothness::Plugin);
        let b = fitted.band(smoothness, fitted.default_grid(cfg.grid_points), &pipeline)?;
        report_band(&b);
        write_band_csv(&b, &mut out)?;
        if let Some(p) = &args.common.plot {
            write_svg(p, &band_chart(&b, None))?;
        }
    } else {
        let theta_star = match &args.null {
            None => FunctionExpansion::zero(basis.clone()),
            Some(c) => FunctionExpansion::new(basis.clone(), DVector::from_column_slice(c))?,
        };
        let r = fitted.test(&theta_star, &pipeline)?;
        eprintln!("statistic {:.6}, p-value {:.4} ({} replicates)", r.statistic, r.p_value, r.bootstrap.m);
        write_test_result(&mut out, &r)?;
    }
    out.flush()?;
    Ok(())
}

fn report_band(b: &ConfidenceBand) {
    let infeasible = b.feasible.iter().filter(|f| !**f).count();
    eprintln!(
        "band at {} points: critical value {:.4}, zeta {:.4}, mean width {:.4}, {} infeasible",
        b.grid.len(),
        b.t_star,
        b.zeta,
        b.mean_width(),
        infeasible
    );
}

fn run_analyze(args: &DataArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let data = load_data(args)?;
    let defaults = AnalyzeConfig::default();
    let acfg = AnalyzeConfig {
        model: cfg.model.unwrap_or(defaults.model),
        d: cfg.d.unwrap_or(defaults.d),
        grid_points: cfg.grid_points,
        smoothness: cfg.smoothness()?.unwrap_or(defaults.smoothness),
        pipeline: pipeline_config(
            &cfg,
            cfg.norm.unwrap_or(NormKind::Sup),
            cfg.boot.unwrap_or(defaults.pipeline.boot),
        ),
    };
    let analysis = analyze_dataset(data, &acfg)?;
    let t = &analysis.test;
    eprintln!(
        "H0: theta0 = 0: statistic {:.6}, p-value {:.4} ({} replicates, n = {})",
        t.statistic,
        t.p_value,
        t.bootstrap.m,
        analysis.data.n()
    );
    report_band(&analysis.band);
    let mut out = output(args.common.out.as_deref())?;
    write_band_csv(&analysis.band, &mut out)?;
    out.flush()?;
    if let Some(p) = &args.common.plot {
        write_svg(p, &band_chart(&analysis.band, None))?;
    }
    Ok(())
}

fn study_chart(report: &StudyReport) -> String {
    let mut series = Vec::new();
    for norm in [NormKind::Sup, NormKind::L2] {
        let cells: Vec<_> = report.cells.iter().filter(|c| c.norm == norm).collect();
        if cells.is_empty() {
            continue;
        }
        series.push(Series {
            label: format!("type I ({norm})"),
            points: cells.iter().map(|c| (c.n as f64, c.type1)).collect(),
        });
        series.push(Series {
            label: format!("power ({norm})"),
            points: cells.iter().map(|c| (c.n as f64, c.power)).collect(),
        });
    }
    line_chart("Rejection rates", "n", "rate", &series)
}

fn run_simulate(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let norms = match cfg.norm {
        Some(n) => vec![n],
        None => vec![NormKind::Sup, NormKind::L2],
    };
    let defaults = StudyConfig::default();
    let study = StudyConfig {
        designs: cfg.n.iter().map(|&n| (cfg.design, n)).collect(),
        reps: cfg.reps,
        norms,
        smoothness: match cfg.smoothness()? {
            Some(s) => vec![s],
            None => defaults.smoothness,
        },
        seed: cfg.seed,
        workers: cfg.workers.max(1),
        grid_points: cfg.grid_points,
        noise_sd: cfg.noise_sd,
        d: cfg.d,
        pipeline: pipeline_config(&cfg, NormKind::Sup, cfg.boot.unwrap_or(1000)),
        skip_bands: false,
    };
    let report = run_study(&study)?;
    for c in &report.cells {
        eprintln!(
            "{} n={} {}: type I {:.3} ({:.3}), power {:.3}, coverage {:.3}, width {:.3}, failures {}",
            c.design, c.n, c.norm, c.type1, c.type1_se, c.power, c.coverage, c.mean_width, c.failures
        );
    }
    let mut out = output(args.out.as_deref())?;
    write_report_csv(&report, &mut out)?;
    out.flush()?;
    if let Some(p) = &args.plot {
        write_svg(p, &study_chart(&report))?;
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Test(a) => run_single(a, false),
        Command::Band(a) => run_single(a, true),
        Command::Simulate(a) => run_simulate(a),
        Command::Analyze(a) => run_analyze(a),
    };
    if let Err(e) = result {
        // stage errors already embed their source in the message
        let mut msg = e.to_string();
        for cause in e.chain().skip(1) {
            let text = cause.to_string();
            if !msg.contains(&text) {
                msg = format!("{msg}: {text}");
            }
        }
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
