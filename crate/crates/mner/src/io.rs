//! Delimited-text schemas, atomic file output, run metadata, and Q-Q
//! diagnostic data.
//!
//! All files are comma-separated with headers. Numbers are rendered with 17
//! significant digits so a write-then-read round trip reproduces every f64
//! bit-for-bit. Writes go to a sibling temp file first and are renamed into
//! place.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data_model::{
    AreaPrediction, AuxRecord, Dataset, EstimatorKind, FittedModel, MseSource, UnitRecord,
};
use crate::error::{Error, Result};
use crate::linalg::SpdChol;
use crate::mner_core::predict_area_effects;

fn schema_err(file: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Schema {
        file: file.display().to_string(),
        line,
        message: message.into(),
    }
}

/// 17-significant-digit rendering; parses back to the identical f64.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(file: &Path, line: u64, field: &str, value: &str) -> Result<f64> {
    let v: f64 = value
        .trim()
        .parse()
        .map_err(|_| schema_err(file, line, format!("{field}: '{value}' is not a number")))?;
    Ok(v)
}

fn parse_label(file: &Path, line: u64, value: &str) -> Result<i64> {
    value
        .trim()
        .parse()
        .map_err(|_| schema_err(file, line, format!("area_id: '{value}' is not an integer")))
}

fn read_rows(path: &Path) -> Result<Vec<(u64, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| schema_err(path, 0, e.to_string()))?;
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| schema_err(path, idx as u64 + 1, e.to_string()))?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(idx as u64 + 1);
        rows.push((line, record.iter().map(str::to_owned).collect()));
    }
    Ok(rows)
}

/// Block structure declared by a unit or auxiliary header.
struct HeaderShape {
    num_responses: usize,
    block_sizes: Vec<usize>,
}

/// Parse `x{r}_{j}` columns: r = 1..R in order, j = 1..p_r in order.
fn parse_x_columns(
    file: &Path,
    fields: &[String],
    mut i: usize,
    num_responses: usize,
    prefix: &str,
) -> Result<HeaderShape> {
    let mut block_sizes = Vec::with_capacity(num_responses);
    for r in 1..=num_responses {
        let mut p_r = 0usize;
        while i < fields.len() && fields[i] == format!("{prefix}{r}_{}", p_r + 1) {
            p_r += 1;
            i += 1;
        }
        if p_r == 0 {
            return Err(schema_err(
                file,
                1,
                format!("expected column {prefix}{r}_1, found '{}'", fields.get(i).map(String::as_str).unwrap_or("end of header")),
            ));
        }
        block_sizes.push(p_r);
    }
    if i != fields.len() {
        return Err(schema_err(
            file,
            1,
            format!("unexpected trailing column '{}'", fields[i]),
        ));
    }
    Ok(HeaderShape {
        num_responses,
        block_sizes,
    })
}

fn split_blocks(values: &[f64], shape: &HeaderShape) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(shape.num_responses);
    let mut off = 0;
    for &p_r in &shape.block_sizes {
        out.push(values[off..off + p_r].to_vec());
        off += p_r;
    }
    out
}

/// Read unit records. Header: `area_id, weight, y_1..y_R, x{r}_{j}` with the
/// covariate blocks in response order.
pub fn read_units(path: &Path) -> Result<Vec<UnitRecord>> {
    let rows = read_rows(path)?;
    let (header_line, header) = rows
        .first()
        .ok_or_else(|| schema_err(path, 0, "empty file"))?;
    if header.len() < 2 || header[0] != "area_id" || header[1] != "weight" {
        return Err(schema_err(
            path,
            *header_line,
            "header must start with area_id, weight",
        ));
    }
    let mut i = 2;
    let mut num_responses = 0;
    while i < header.len() && header[i] == format!("y_{}", num_responses + 1) {
        num_responses += 1;
        i += 1;
    }
    if num_responses == 0 {
        return Err(schema_err(path, *header_line, "expected column y_1"));
    }
    let shape = parse_x_columns(path, header, i, num_responses, "x")?;
    let expected = 2 + num_responses + shape.block_sizes.iter().sum::<usize>();
    let mut units = Vec::with_capacity(rows.len().saturating_sub(1));
    for (line, row) in &rows[1..] {
        if row.len() != expected {
            return Err(schema_err(
                path,
                *line,
                format!("{} columns, header declares {expected}", row.len()),
            ));
        }
        let area_label = parse_label(path, *line, &row[0])?;
        let weight = parse_f64(path, *line, "weight", &row[1])?;
        let y: Vec<f64> = row[2..2 + num_responses]
            .iter()
            .map(|v| parse_f64(path, *line, "response", v))
            .collect::<Result<_>>()?;
        let xs: Vec<f64> = row[2 + num_responses..]
            .iter()
            .map(|v| parse_f64(path, *line, "covariate", v))
            .collect::<Result<_>>()?;
        units.push(UnitRecord {
            area_label,
            weight,
            y,
            covariates: split_blocks(&xs, &shape),
        });
    }
    Ok(units)
}

/// Read auxiliary records. Header: `area_id, N_d, xbar{r}_{j}`.
pub fn read_aux(path: &Path) -> Result<Vec<AuxRecord>> {
    let rows = read_rows(path)?;
    let (header_line, header) = rows
        .first()
        .ok_or_else(|| schema_err(path, 0, "empty file"))?;
    if header.len() < 2 || header[0] != "area_id" || header[1] != "N_d" {
        return Err(schema_err(
            path,
            *header_line,
            "header must start with area_id, N_d",
        ));
    }
    // infer R from the xbar{r}_1 markers
    let mut num_responses = 0;
    for field in &header[2..] {
        if let Some(rest) = field.strip_prefix("xbar") {
            if rest.ends_with("_1") {
                num_responses += 1;
            }
        }
    }
    if num_responses == 0 {
        return Err(schema_err(path, *header_line, "expected column xbar1_1"));
    }
    let shape = parse_x_columns(path, header, 2, num_responses, "xbar")?;
    let expected = 2 + shape.block_sizes.iter().sum::<usize>();
    let mut aux = Vec::with_capacity(rows.len().saturating_sub(1));
    for (line, row) in &rows[1..] {
        if row.len() != expected {
            return Err(schema_err(
                path,
                *line,
                format!("{} columns, header declares {expected}", row.len()),
            ));
        }
        let area_label = parse_label(path, *line, &row[0])?;
        let pop_size: u64 = row[1]
            .trim()
            .parse()
            .map_err(|_| schema_err(path, *line, format!("N_d: '{}' is not a positive integer", row[1])))?;
        let xs: Vec<f64> = row[2..]
            .iter()
            .map(|v| parse_f64(path, *line, "xbar", v))
            .collect::<Result<_>>()?;
        aux.push(AuxRecord {
            area_label,
            pop_size,
            xbar: split_blocks(&xs, &shape),
        });
    }
    Ok(aux)
}

/// Write then rename, so readers never observe a partial file.
pub fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let mut name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("not a file path: {}", path.display())))?
        .to_owned();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Write unit records in the `read_units` schema.
pub fn write_units(units: &[UnitRecord], path: &Path) -> Result<()> {
    let first = units
        .first()
        .ok_or_else(|| Error::Validation("no unit records to write".into()))?;
    let r_dim = first.y.len();
    let mut header = String::from("area_id,weight");
    for r in 1..=r_dim {
        write!(header, ",y_{r}").unwrap();
    }
    for (r, block) in first.covariates.iter().enumerate() {
        for j in 1..=block.len() {
            write!(header, ",x{}_{j}", r + 1).unwrap();
        }
    }
    let mut out = header;
    out.push('\n');
    for u in units {
        write!(out, "{},{}", u.area_label, format_value(u.weight)).unwrap();
        for v in &u.y {
            write!(out, ",{}", format_value(*v)).unwrap();
        }
        for block in &u.covariates {
            for v in block {
                write!(out, ",{}", format_value(*v)).unwrap();
            }
        }
        out.push('\n');
    }
    atomic_write(path, &out)
}

/// Write auxiliary records in the `read_aux` schema.
pub fn write_aux(aux: &[AuxRecord], path: &Path) -> Result<()> {
    let first = aux
        .first()
        .ok_or_else(|| Error::Validation("no auxiliary records to write".into()))?;
    let mut header = String::from("area_id,N_d");
    for (r, block) in first.xbar.iter().enumerate() {
        for j in 1..=block.len() {
            write!(header, ",xbar{}_{j}", r + 1).unwrap();
        }
    }
    let mut out = header;
    out.push('\n');
    for a in aux {
        write!(out, "{},{}", a.area_label, a.pop_size).unwrap();
        for block in &a.xbar {
            for v in block {
                write!(out, ",{}", format_value(*v)).unwrap();
            }
        }
        out.push('\n');
    }
    atomic_write(path, &out)
}

/// Write predictions. Header: `area_id, estimator, mu_1..mu_R,
/// mse_11..mse_RR (row-major, full matrix), mse_source`; MSE cells are empty
/// when no matrix is attached.
pub fn write_predictions(predictions: &[AreaPrediction], path: &Path) -> Result<()> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::Validation("no predictions to write".into()))?;
    let r_dim = first.mean.len();
    if predictions.iter().any(|p| p.mean.len() != r_dim) {
        return Err(Error::Validation(
            "predictions mix different response dimensions".into(),
        ));
    }
    let mut header = String::from("area_id,estimator");
    for r in 1..=r_dim {
        write!(header, ",mu_{r}").unwrap();
    }
    for r in 1..=r_dim {
        for l in 1..=r_dim {
            write!(header, ",mse_{r}{l}").unwrap();
        }
    }
    header.push_str(",mse_source");
    let mut out = header;
    out.push('\n');
    for p in predictions {
        write!(out, "{},{}", p.area_label, p.estimator.as_str()).unwrap();
        for v in p.mean.iter() {
            write!(out, ",{}", format_value(*v)).unwrap();
        }
        match &p.mse {
            Some(m) => {
                for r in 0..r_dim {
                    for l in 0..r_dim {
                        write!(out, ",{}", format_value(m[(r, l)])).unwrap();
                    }
                }
            }
            None => out.push_str(&",".repeat(r_dim * r_dim)),
        }
        write!(out, ",{}", p.mse_source.as_str()).unwrap();
        out.push('\n');
    }
    atomic_write(path, &out)
}

/// Read a predictions file written by [`write_predictions`].
pub fn read_predictions(path: &Path) -> Result<Vec<AreaPrediction>> {
    let rows = read_rows(path)?;
    let (header_line, header) = rows
        .first()
        .ok_or_else(|| schema_err(path, 0, "empty file"))?;
    if header.len() < 4 || header[0] != "area_id" || header[1] != "estimator" {
        return Err(schema_err(
            path,
            *header_line,
            "header must start with area_id, estimator",
        ));
    }
    let mut i = 2;
    let mut r_dim = 0;
    while i < header.len() && header[i] == format!("mu_{}", r_dim + 1) {
        r_dim += 1;
        i += 1;
    }
    if r_dim == 0 {
        return Err(schema_err(path, *header_line, "expected column mu_1"));
    }
    for r in 1..=r_dim {
        for l in 1..=r_dim {
            if i >= header.len() || header[i] != format!("mse_{r}{l}") {
                return Err(schema_err(path, *header_line, format!("expected column mse_{r}{l}")));
            }
            i += 1;
        }
    }
    if i + 1 != header.len() || header[i] != "mse_source" {
        return Err(schema_err(path, *header_line, "expected final column mse_source"));
    }
    let expected = header.len();
    let mut preds = Vec::new();
    for (line, row) in &rows[1..] {
        if row.len() != expected {
            return Err(schema_err(
                path,
                *line,
                format!("{} columns, header declares {expected}", row.len()),
            ));
        }
        let area_label = parse_label(path, *line, &row[0])?;
        let estimator = EstimatorKind::parse(&row[1])
            .map_err(|e| schema_err(path, *line, e.to_string()))?;
        let mean = nalgebra::DVector::from_iterator(
            r_dim,
            row[2..2 + r_dim]
                .iter()
                .map(|v| parse_f64(path, *line, "mu", v))
                .collect::<Result<Vec<_>>>()?,
        );
        let mse_cells = &row[2 + r_dim..2 + r_dim + r_dim * r_dim];
        let mse = if mse_cells.iter().all(|c| c.is_empty()) {
            None
        } else {
            let vals: Vec<f64> = mse_cells
                .iter()
                .map(|v| parse_f64(path, *line, "mse", v))
                .collect::<Result<_>>()?;
            Some(nalgebra::DMatrix::from_row_slice(r_dim, r_dim, &vals))
        };
        let source = match row[expected - 1].as_str() {
            "analytic" => MseSource::Analytic,
            "bootstrap" => MseSource::Bootstrap,
            "design" => MseSource::Design,
            "none" => MseSource::None,
            other => {
                return Err(schema_err(path, *line, format!("unknown mse_source '{other}'")));
            }
        };
        preds.push(
            AreaPrediction::new(area_label, estimator, mean, mse, source)
                .map_err(|e| schema_err(path, *line, e.to_string()))?,
        );
    }
    Ok(preds)
}

/// Run metadata. The manifest records everything needed to rerun a command;
/// replaying `command` with `flags` and `seed` reproduces the output files
/// byte-for-byte.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    /// Flag name (without leading dashes) and rendered value, in canonical order.
    pub flags: Vec<(String, String)>,
    /// Input path and SHA-256 hex digest.
    pub input_digests: Vec<(String, String)>,
    pub seed: u64,
    pub version: String,
    pub wall_seconds: f64,
    /// Named convergence or accounting summaries.
    pub summaries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_owned(),
            flags: Vec::new(),
            input_digests: Vec::new(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_owned(),
            wall_seconds: 0.0,
            summaries: Vec::new(),
        }
    }

    pub fn digest_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        self.input_digests
            .push((path.display().to_string(), format!("{:x}", hasher.finalize())));
        Ok(())
    }

    /// Reconstruct the argument vector of the recorded run.
    pub fn to_argv(&self) -> Vec<String> {
        let mut argv = vec![self.command.clone()];
        for (name, value) in &self.flags {
            argv.push(format!("--{name}"));
            argv.push(value.clone());
        }
        argv
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let mut put = |k: &str, v: &str| {
            w.write_record([k, v]).expect("write to memory");
        };
        put("key", "value");
        put("command", &self.command);
        for (name, value) in &self.flags {
            put(&format!("flag.{name}"), value);
        }
        for (p, d) in &self.input_digests {
            put(&format!("input.{p}"), d);
        }
        put("seed", &self.seed.to_string());
        put("version", &self.version);
        put("wall_seconds", &format!("{:.3}", self.wall_seconds));
        for (name, value) in &self.summaries {
            put(&format!("summary.{name}"), value);
        }
        drop(put);
        let bytes = w.into_inner().expect("flush to memory");
        atomic_write(path, std::str::from_utf8(&bytes).expect("utf-8"))
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        let rows = read_rows(path)?;
        let mut manifest = RunManifest::new("", 0);
        for (line, row) in rows.iter().skip(1) {
            if row.len() != 2 {
                return Err(schema_err(path, *line, "expected key,value rows"));
            }
            let (key, value) = (&row[0], &row[1]);
            if key == "command" {
                manifest.command = value.clone();
            } else if let Some(name) = key.strip_prefix("flag.") {
                manifest.flags.push((name.to_owned(), value.clone()));
            } else if let Some(p) = key.strip_prefix("input.") {
                manifest.input_digests.push((p.to_owned(), value.clone()));
            } else if key == "seed" {
                manifest.seed = value
                    .parse()
                    .map_err(|_| schema_err(path, *line, "seed is not an integer"))?;
            } else if key == "version" {
                manifest.version = value.clone();
            } else if key == "wall_seconds" {
                manifest.wall_seconds = value
                    .parse()
                    .map_err(|_| schema_err(path, *line, "wall_seconds is not a number"))?;
            } else if let Some(name) = key.strip_prefix("summary.") {
                manifest.summaries.push((name.to_owned(), value.clone()));
            } else {
                return Err(schema_err(path, *line, format!("unknown manifest key '{key}'")));
            }
        }
        if manifest.command.is_empty() {
            return Err(schema_err(path, 0, "manifest lacks a command"));
        }
        Ok(manifest)
    }
}

/// Q-Q data for multivariate normality checks: theoretical chi-square(R)
/// quantiles at (i - 0.5)/m against sorted squared Mahalanobis distances.
fn qq_table(distances_sq: &mut Vec<f64>, r_dim: usize) -> Result<String> {
    distances_sq.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let chi2 = ChiSquared::new(r_dim as f64)
        .map_err(|e| Error::Validation(format!("chi-square({r_dim}): {e}")))?;
    let m = distances_sq.len() as f64;
    let mut out = String::from("chi2_quantile,mahalanobis_sq\n");
    for (i, d2) in distances_sq.iter().enumerate() {
        let p = (i as f64 + 0.5) / m;
        writeln!(
            out,
            "{},{}",
            format_value(chi2.inverse_cdf(p)),
            format_value(*d2)
        )
        .unwrap();
    }
    Ok(out)
}

/// Emit model-checking Q-Q data: predicted area effects against the fitted
/// Sigma_u, and unit residuals against the fitted Sigma_e. A singular fitted
/// covariance is an error.
pub fn emit_diagnostics(
    ds: &Dataset,
    fitted: &FittedModel,
    area_path: &Path,
    unit_path: &Path,
) -> Result<()> {
    let (u_tilde, e_hat) = predict_area_effects(ds, &fitted.components, &fitted.beta)?;
    let chol_u = SpdChol::new(fitted.components.sigma_u(), "fitted area covariance")?;
    let chol_e = SpdChol::new(fitted.components.sigma_e(), "fitted unit covariance")?;
    let mut d2_u: Vec<f64> = u_tilde
        .iter()
        .map(|v| v.dot(&chol_u.solve_vec(v)))
        .collect();
    let mut d2_e: Vec<f64> = e_hat
        .iter()
        .flatten()
        .map(|v| v.dot(&chol_e.solve_vec(v)))
        .collect();
    let r_dim = ds.num_responses();
    atomic_write(area_path, &qq_table(&mut d2_u, r_dim)?)?;
    atomic_write(unit_path, &qq_table(&mut d2_e, r_dim)?)?;
    Ok(())
}
