//! Command-line front end.
//!
//! Subcommands mirror the pipeline: `fit`, `calibrate`, `predict`, `mse`,
//! `simulate`, `diagnostics`. Every flag can also be supplied through a
//! `key=value` configuration file (`--config PATH`); explicit flags win.
//! Every run writes a `manifest_<command>.csv` into the output directory;
//! rerunning with the manifest's flags and seed reproduces the other output
//! files byte-for-byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use crate::aggregate::calibrate_weights;
use crate::data_model::{
    validate_dataset, AreaPrediction, Convergence, Dataset, EstimatorKind, MseSource, UnitRecord,
};
use crate::error::{Error, Result};
use crate::io::{
    atomic_write, emit_diagnostics, format_value, read_aux, read_units, write_predictions,
    write_units, RunManifest,
};
use crate::predictors::{
    direct_estimator, mpeblup, survey_weighted_fit, unified_predictor,
    univariate_peblup, DesignVariance,
};
use crate::reml::{fit_reml, RemlOptions};
use crate::simulation::{estimate_true_mse, run_experiment_a, run_experiment_b, SimulationDesign};
use crate::uncertainty::{analytic_mse, bootstrap_mse, BootstrapConfig};

#[derive(Parser, Debug)]
#[command(name = "mner", version, about = "Small-area mean vectors under a multivariate nested-error model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate variance components and regression coefficients.
    Fit(RawFlags),
    /// Calibrate weights so weighted covariate means match population means.
    Calibrate(RawFlags),
    /// Compute area predictions for one estimator.
    Predict(RawFlags),
    /// Compute predictions with MSE matrices, analytic or bootstrap.
    Mse(RawFlags),
    /// Run a seeded simulation experiment.
    Simulate(RawFlags),
    /// Emit Q-Q model-checking data for area effects and unit residuals.
    Diagnostics(RawFlags),
}

#[derive(Args, Debug, Default)]
struct RawFlags {
    /// Unit-level survey file: area_id, weight, y_1..y_R, x{r}_{j}.
    #[arg(long)]
    units: Option<PathBuf>,
    /// Area auxiliary file: area_id, N_d, xbar{r}_{j}.
    #[arg(long)]
    aux: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed for all random streams.
    #[arg(long)]
    seed: Option<u64>,
    /// dir, myr, mu, uyr, or mfh.
    #[arg(long)]
    estimator: Option<String>,
    /// Bootstrap replicates; 0 selects the analytic MSE.
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Monte Carlo replicates for `simulate`.
    #[arg(long)]
    replicates: Option<usize>,
    /// Replicates behind the true-MSE reference of experiment b.
    #[arg(long = "true-replicates")]
    true_replicates: Option<usize>,
    /// a or b.
    #[arg(long)]
    experiment: Option<String>,
    /// on or off: finite-population correction in the direct design variance.
    #[arg(long)]
    fpc: Option<String>,
    /// on or off: calibrate weights before fitting and predicting.
    #[arg(long)]
    calibrated: Option<String>,
    /// Bootstrap worker threads; outputs do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
    /// key=value file supplying defaults for any flag above.
    #[arg(long)]
    config: Option<PathBuf>,
}

const CONFIG_KEYS: [&str; 12] = [
    "units",
    "aux",
    "out",
    "seed",
    "estimator",
    "bootstrap",
    "replicates",
    "true-replicates",
    "experiment",
    "fpc",
    "calibrated",
    "workers",
];

fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Usage(format!(
                "{}:{}: expected key=value, got '{line}'",
                path.display(),
                i + 1
            ))
        })?;
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::Usage(format!(
                "{}:{}: unknown configuration key '{key}'",
                path.display(),
                i + 1
            )));
        }
        map.insert(key.to_owned(), value.trim().to_owned());
    }
    Ok(map)
}

fn parse_on_off(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(Error::Usage(format!("{key} must be on or off, got '{other}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("{key}: '{value}' is not a valid value")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Experiment {
    A,
    B,
}

/// Flag values after merging explicit flags over the configuration file over
/// built-in defaults.
struct Effective {
    units: Option<PathBuf>,
    aux: Option<PathBuf>,
    out: PathBuf,
    seed: u64,
    estimator: EstimatorKind,
    bootstrap: usize,
    replicates: usize,
    true_replicates: usize,
    experiment: Experiment,
    fpc: bool,
    calibrated: bool,
    workers: usize,
}

impl Effective {
    fn resolve(flags: &RawFlags) -> Result<Effective> {
        let file = match &flags.config {
            Some(p) => read_config(p)?,
            None => BTreeMap::new(),
        };
        let text = |explicit: &Option<String>, key: &str| -> Option<String> {
            explicit.clone().or_else(|| file.get(key).cloned())
        };
        let units = flags
            .units
            .clone()
            .or_else(|| file.get("units").map(PathBuf::from));
        let aux = flags
            .aux
            .clone()
            .or_else(|| file.get("aux").map(PathBuf::from));
        let out = flags
            .out
            .clone()
            .or_else(|| file.get("out").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        let seed = match (flags.seed, file.get("seed")) {
            (Some(s), _) => s,
            (None, Some(v)) => parse_num("seed", v)?,
            (None, None) => 0,
        };
        let estimator = match text(&flags.estimator, "estimator") {
            Some(v) => EstimatorKind::parse(&v)?,
            None => EstimatorKind::Myr,
        };
        let bootstrap = match (flags.bootstrap, file.get("bootstrap")) {
            (Some(b), _) => b,
            (None, Some(v)) => parse_num("bootstrap", v)?,
            (None, None) => 0,
        };
        let replicates = match (flags.replicates, file.get("replicates")) {
            (Some(l), _) => l,
            (None, Some(v)) => parse_num("replicates", v)?,
            (None, None) => 100,
        };
        let true_replicates = match (flags.true_replicates, file.get("true-replicates")) {
            (Some(l), _) => l,
            (None, Some(v)) => parse_num("true-replicates", v)?,
            (None, None) => 1000,
        };
        let experiment = match text(&flags.experiment, "experiment").as_deref() {
            None | Some("a") => Experiment::A,
            Some("b") => Experiment::B,
            Some(other) => {
                return Err(Error::Usage(format!(
                    "experiment must be a or b, got '{other}'"
                )));
            }
        };
        let fpc = match text(&flags.fpc, "fpc") {
            Some(v) => parse_on_off("fpc", &v)?,
            None => false,
        };
        let calibrated = match text(&flags.calibrated, "calibrated") {
            Some(v) => parse_on_off("calibrated", &v)?,
            None => false,
        };
        let workers = match (flags.workers, file.get("workers")) {
            (Some(w), _) => w.max(1),
            (None, Some(v)) => parse_num::<usize>("workers", v)?.max(1),
            (None, None) => 1,
        };
        Ok(Effective {
            units,
            aux,
            out,
            seed,
            estimator,
            bootstrap,
            replicates,
            true_replicates,
            experiment,
            fpc,
            calibrated,
            workers,
        })
    }

    fn units_path(&self) -> Result<&Path> {
        self.units
            .as_deref()
            .ok_or_else(|| Error::Usage("--units is required".into()))
    }

    fn aux_path(&self) -> Result<&Path> {
        self.aux
            .as_deref()
            .ok_or_else(|| Error::Usage("--aux is required".into()))
    }

    fn experiment_str(&self) -> &'static str {
        match self.experiment {
            Experiment::A => "a",
            Experiment::B => "b",
        }
    }

    fn on_off(v: bool) -> &'static str {
        if v {
            "on"
        } else {
            "off"
        }
    }

    /// Record the effective value of each named flag, in canonical order.
    fn record(&self, manifest: &mut RunManifest, names: &[&str]) {
        for &name in names {
            let value = match name {
                "units" => self.units.as_ref().map(|p| p.display().to_string()),
                "aux" => self.aux.as_ref().map(|p| p.display().to_string()),
                "out" => Some(self.out.display().to_string()),
                "seed" => Some(self.seed.to_string()),
                "estimator" => Some(self.estimator.as_str().to_ascii_lowercase()),
                "bootstrap" => Some(self.bootstrap.to_string()),
                "replicates" => Some(self.replicates.to_string()),
                "true-replicates" => Some(self.true_replicates.to_string()),
                "experiment" => Some(self.experiment_str().to_string()),
                "fpc" => Some(Self::on_off(self.fpc).to_string()),
                "calibrated" => Some(Self::on_off(self.calibrated).to_string()),
                "workers" => Some(self.workers.to_string()),
                other => unreachable!("unknown flag {other}"),
            };
            if let Some(value) = value {
                manifest.flags.push((name.to_owned(), value));
            }
        }
    }
}

fn reml_options(seed: u64) -> RemlOptions {
    RemlOptions {
        seed,
        ..RemlOptions::default()
    }
}

fn load_dataset(cfg: &Effective, manifest: &mut RunManifest) -> Result<Dataset> {
    let units_path = cfg.units_path()?;
    let aux_path = cfg.aux_path()?;
    let units = read_units(units_path)?;
    let aux = read_aux(aux_path)?;
    manifest.digest_input(units_path)?;
    manifest.digest_input(aux_path)?;
    let ds = validate_dataset(&units, &aux)?;
    if cfg.calibrated {
        calibrate_weights(&ds)
    } else {
        Ok(ds)
    }
}

fn push_convergence(manifest: &mut RunManifest, name: &str, c: &Convergence) {
    manifest.summaries.push((
        name.to_owned(),
        format!(
            "converged={} iterations={} grad_norm={:.3e} boundary={}",
            c.converged, c.iterations, c.grad_norm, c.boundary_warning
        ),
    ));
}

fn unit_records(ds: &Dataset) -> Vec<UnitRecord> {
    ds.areas()
        .iter()
        .flat_map(|a| {
            a.units.iter().map(|u| UnitRecord {
                area_label: a.label,
                weight: u.weight,
                y: u.y.iter().copied().collect(),
                covariates: u.x_rows.iter().map(|r| r.iter().copied().collect()).collect(),
            })
        })
        .collect()
}

fn design_variance(cfg: &Effective) -> DesignVariance {
    if cfg.fpc {
        DesignVariance::SrsworFpc
    } else {
        DesignVariance::WithReplacement
    }
}

/// Reassemble per-response univariate predictions into R-vector predictions.
fn assemble_univariate(ds: &Dataset, cfg: &Effective) -> Result<Vec<AreaPrediction>> {
    let r_dim = ds.num_responses();
    let opts = reml_options(cfg.seed);
    let mut per_response = Vec::with_capacity(r_dim);
    for r in 0..r_dim {
        per_response.push(univariate_peblup(ds, r, &opts)?);
    }
    (0..ds.num_areas())
        .map(|d| {
            let mean = nalgebra::DVector::from_iterator(
                r_dim,
                per_response.iter().map(|preds| preds[d].mean[0]),
            );
            AreaPrediction::new(
                ds.area(d).label,
                EstimatorKind::Uyr,
                mean,
                None,
                MseSource::None,
            )
        })
        .collect()
}

fn cmd_fit(cfg: &Effective, manifest: &mut RunManifest) -> Result<()> {
    let ds = load_dataset(cfg, manifest)?;
    let fitted = fit_reml(&ds, &reml_options(cfg.seed))?;
    let weighted = survey_weighted_fit(&ds, &fitted)?;
    push_convergence(manifest, "reml", &fitted.convergence);

    let r_dim = ds.num_responses();
    let mut out = String::from("key,value\n");
    let mut put = |k: String, v: String| {
        writeln!(out, "{k},{v}").unwrap();
    };
    let su = fitted.components.sigma_u();
    let se = fitted.components.sigma_e();
    for r in 0..r_dim {
        for l in 0..r_dim {
            put(format!("sigma_u_{}{}", r + 1, l + 1), format_value(su[(r, l)]));
        }
    }
    for r in 0..r_dim {
        for l in 0..r_dim {
            put(format!("sigma_e_{}{}", r + 1, l + 1), format_value(se[(r, l)]));
        }
    }
    for j in 0..fitted.beta.len() {
        put(format!("beta_{}", j + 1), format_value(fitted.beta[j]));
    }
    for j in 0..weighted.beta.len() {
        put(format!("beta_w_{}", j + 1), format_value(weighted.beta[j]));
    }
    if let Some(phi) = &weighted.phi_w {
        for r in 0..phi.nrows() {
            for l in 0..phi.ncols() {
                put(
                    format!("phi_w_{}{}", r + 1, l + 1),
                    format_value(phi[(r, l)]),
                );
            }
        }
    }
    let c = &fitted.convergence;
    put("loglik".into(), format_value(c.loglik));
    put("iterations".into(), c.iterations.to_string());
    put("grad_norm".into(), format_value(c.grad_norm));
    put("converged".into(), c.converged.to_string());
    put("boundary_warning".into(), c.boundary_warning.to_string());
    drop(put);
    atomic_write(&cfg.out.join("fit.csv"), &out)
}

fn cmd_calibrate(cfg: &Effective, manifest: &mut RunManifest) -> Result<()> {
    let units_path = cfg.units_path()?;
    let aux_path = cfg.aux_path()?;
    let units = read_units(units_path)?;
    let aux = read_aux(aux_path)?;
    manifest.digest_input(units_path)?;
    manifest.digest_input(aux_path)?;
    let ds = validate_dataset(&units, &aux)?;
    let calibrated = calibrate_weights(&ds)?;
    write_units(&unit_records(&calibrated), &cfg.out.join("calibrated_units.csv"))
}

fn cmd_predict(cfg: &Effective, manifest: &mut RunManifest) -> Result<()> {
    let ds = load_dataset(cfg, manifest)?;
    let predictions = match cfg.estimator {
        EstimatorKind::Dir => direct_estimator(&ds, design_variance(cfg))?,
        EstimatorKind::Myr | EstimatorKind::Mu => {
            let fitted = fit_reml(&ds, &reml_options(cfg.seed))?;
            let weighted = survey_weighted_fit(&ds, &fitted)?;
            push_convergence(manifest, "reml", &fitted.convergence);
            if cfg.estimator == EstimatorKind::Myr {
                mpeblup(&ds, &weighted)?
            } else {
                unified_predictor(&ds, &weighted)?
            }
        }
        EstimatorKind::Uyr => assemble_univariate(&ds, cfg)?,
        EstimatorKind::Mfh => {
            let direct = direct_estimator(&ds, design_variance(cfg))?;
            let direct_cov: Vec<Option<DMatrix<f64>>> =
                direct.into_iter().map(|p| p.mse).collect();
            let fit = crate::predictors::fit_mfh(&ds, &direct_cov, &reml_options(cfg.seed))?;
            push_convergence(manifest, "mfh", &fit.convergence);
            crate::predictors::mfh_predictions(&ds, &fit, &direct_cov)?
        }
    };
    write_predictions(&predictions, &cfg.out.join("predictions.csv"))
}

fn cmd_mse(cfg: &Effective, manifest: &mut RunManifest) -> Result<()> {
    if !matches!(cfg.estimator, EstimatorKind::Myr | EstimatorKind::Mu) {
        return Err(Error::Usage(format!(
            "mse supports estimators myr and mu, got {}",
            cfg.estimator.as_str().to_ascii_lowercase()
        )));
    }
    let ds = load_dataset(cfg, manifest)?;
    let fitted = fit_reml(&ds, &reml_options(cfg.seed))?;
    let weighted = survey_weighted_fit(&ds, &fitted)?;
    push_convergence(manifest, "reml", &fitted.convergence);
    let points = if cfg.estimator == EstimatorKind::Myr {
        mpeblup(&ds, &weighted)?
    } else {
        unified_predictor(&ds, &weighted)?
    };
    let (matrices, source) = if cfg.bootstrap == 0 {
        let components = analytic_mse(&ds, &weighted)?;
        let mats: Vec<DMatrix<f64>> = components.iter().map(|c| c.total()).collect();
        (mats, MseSource::Analytic)
    } else {
        let boot = bootstrap_mse(
            &ds,
            &weighted,
            &BootstrapConfig {
                replicates: cfg.bootstrap,
                seed: cfg.seed,
                workers: cfg.workers,
                refit_theta: true,
                stream_prefix: Vec::new(),
            },
        )?;
        manifest.summaries.push((
            "bootstrap".into(),
            format!("used={} failed={}", boot.replicates_used, boot.replicates_failed),
        ));
        (boot.per_area, MseSource::Bootstrap)
    };
    let predictions: Vec<AreaPrediction> = points
        .into_iter()
        .zip(matrices)
        .map(|(p, m)| AreaPrediction::new(p.area_label, p.estimator, p.mean, Some(m), source))
        .collect::<Result<_>>()?;
    write_predictions(&predictions, &cfg.out.join("predictions.csv"))
}

fn cmd_simulate(cfg: &Effective, manifest: &mut RunManifest) -> Result<()> {
    let design = SimulationDesign {
        seed: cfg.seed,
        use_fpc: cfg.fpc,
        ..SimulationDesign::default()
    };
    match cfg.experiment {
        Experiment::A => {
            let result = run_experiment_a(&design, cfg.replicates)?;
            manifest.summaries.push((
                "replicates".into(),
                format!("used={} failed={}", result.replicates_used, result.replicates_failed),
            ));
            let mut out = String::from(
                "estimator,response,sample_size,arb_percent,rrmse_percent\n",
            );
            for est in &result.estimators {
                for r in 0..2 {
                    for g in &est.by_group {
                        writeln!(
                            out,
                            "{},{},{},{},{}",
                            est.estimator.as_str(),
                            r + 1,
                            g.sample_size,
                            format_value(g.arb_percent[r]),
                            format_value(g.rrmse_percent[r]),
                        )
                        .unwrap();
                    }
                }
            }
            atomic_write(&cfg.out.join("experiment_a.csv"), &out)?;
            // per-area plot data, one file per metric, percent scale
            for (name, select) in [
                ("experiment_a_area_rb.csv", 0usize),
                ("experiment_a_area_rrmse.csv", 1usize),
            ] {
                let mut header = String::from("area_id,n_d");
                for est in &result.estimators {
                    for r in 1..=2 {
                        write!(header, ",{}_{r}", est.estimator.as_str()).unwrap();
                    }
                }
                let mut out = header;
                out.push('\n');
                let num_areas = result.estimators[0].per_area.len();
                for d in 0..num_areas {
                    let first = &result.estimators[0].per_area[d];
                    write!(out, "{},{}", first.area_label, first.sample_size).unwrap();
                    for est in &result.estimators {
                        let area = &est.per_area[d];
                        let vals = if select == 0 { &area.rb } else { &area.rrmse };
                        for r in 0..2 {
                            write!(out, ",{}", format_value(100.0 * vals[r])).unwrap();
                        }
                    }
                    out.push('\n');
                }
                atomic_write(&cfg.out.join(name), &out)?;
            }
            Ok(())
        }
        Experiment::B => {
            if cfg.bootstrap == 0 {
                return Err(Error::Usage(
                    "experiment b needs --bootstrap >= 1".into(),
                ));
            }
            let true_mse = estimate_true_mse(&design, cfg.true_replicates)?;
            let result = run_experiment_b(
                &design,
                cfg.replicates,
                cfg.bootstrap,
                cfg.workers,
                &true_mse,
            )?;
            manifest.summaries.push((
                "replicates".into(),
                format!("used={} failed={}", result.replicates_used, result.replicates_failed),
            ));
            let mut header = String::from("area_id,sample_size");
            for r in 1..=2 {
                for l in 1..=2 {
                    write!(header, ",true_{r}{l}").unwrap();
                }
            }
            for r in 1..=2 {
                for l in 1..=2 {
                    write!(header, ",boot_{r}{l}").unwrap();
                }
            }
            let mut out = header;
            out.push('\n');
            for area in &result.per_area {
                write!(out, "{},{}", area.area_label, area.sample_size).unwrap();
                for m in [&area.true_mse, &area.mean_bootstrap] {
                    for r in 0..m.nrows() {
                        for l in 0..m.ncols() {
                            write!(out, ",{}", format_value(m[(r, l)])).unwrap();
                        }
                    }
                }
                out.push('\n');
            }
            atomic_write(&cfg.out.join("experiment_b.csv"), &out)
        }
    }
}

fn cmd_diagnostics(cfg: &Effective, manifest: &mut RunManifest) -> Result<()> {
    let ds = load_dataset(cfg, manifest)?;
    let fitted = fit_reml(&ds, &reml_options(cfg.seed))?;
    let weighted = survey_weighted_fit(&ds, &fitted)?;
    push_convergence(manifest, "reml", &fitted.convergence);
    emit_diagnostics(
        &ds,
        &weighted,
        &cfg.out.join("diagnostics_u.csv"),
        &cfg.out.join("diagnostics_e.csv"),
    )
}

/// Run the CLI on `args` (without the binary name). Errors map to exit codes
/// through [`Error::exit_code`].
pub fn run(args: &[String]) -> Result<()> {
    let mut argv = vec!["mner".to_owned()];
    argv.extend(args.iter().cloned());
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::Usage(e.to_string())),
    };
    let (name, flags, recorded): (&str, &RawFlags, &[&str]) = match &cli.command {
        Command::Fit(f) => ("fit", f, &["units", "aux", "out", "seed", "calibrated"]),
        Command::Calibrate(f) => ("calibrate", f, &["units", "aux", "out"]),
        Command::Predict(f) => (
            "predict",
            f,
            &["units", "aux", "out", "seed", "estimator", "fpc", "calibrated"],
        ),
        Command::Mse(f) => (
            "mse",
            f,
            &["units", "aux", "out", "seed", "estimator", "bootstrap", "calibrated", "workers"],
        ),
        Command::Simulate(f) => (
            "simulate",
            f,
            &[
                "out",
                "seed",
                "experiment",
                "replicates",
                "bootstrap",
                "true-replicates",
                "fpc",
                "workers",
            ],
        ),
        Command::Diagnostics(f) => {
            ("diagnostics", f, &["units", "aux", "out", "seed", "calibrated"])
        }
    };
    let cfg = Effective::resolve(flags)?;
    std::fs::create_dir_all(&cfg.out)?;
    let start = Instant::now();
    let mut manifest = RunManifest::new(name, cfg.seed);
    cfg.record(&mut manifest, recorded);
    match name {
        "fit" => cmd_fit(&cfg, &mut manifest)?,
        "calibrate" => cmd_calibrate(&cfg, &mut manifest)?,
        "predict" => cmd_predict(&cfg, &mut manifest)?,
        "mse" => cmd_mse(&cfg, &mut manifest)?,
        "simulate" => cmd_simulate(&cfg, &mut manifest)?,
        "diagnostics" => cmd_diagnostics(&cfg, &mut manifest)?,
        _ => unreachable!(),
    }
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest.write(&cfg.out.join(format!("manifest_{name}.csv")))
}
