//! Survey-weighted area aggregates, chi-square weight calibration, and the
//! population benchmarking residual.

use nalgebra::{DMatrix, DVector};

use crate::data_model::{AreaPrediction, Dataset};
use crate::error::{Error, Result};
use crate::linalg::SpdChol;

/// Weighted aggregates of one area's sample.
#[derive(Debug, Clone)]
pub struct AreaAggregates {
    pub area_label: i64,
    /// Sum of weights w_d.
    pub weight_total: f64,
    /// Weighted response mean, length R.
    pub ybar_w: DVector<f64>,
    /// Weighted covariate mean, R x p (block diagonal like the unit matrices).
    pub xbar_w: DMatrix<f64>,
    /// Squared-weight ratio k_d^2 = sum(w^2) / (sum w)^2, in [1/n_d, 1].
    pub k2: f64,
}

/// Compute per-area weighted means and the squared-weight ratio.
pub fn aggregate(ds: &Dataset) -> Vec<AreaAggregates> {
    let r_dim = ds.num_responses();
    let p = ds.num_coefficients();
    ds.areas()
        .iter()
        .map(|area| {
            let mut wtot = 0.0;
            let mut w2 = 0.0;
            let mut ybar = DVector::zeros(r_dim);
            let mut xbar = DMatrix::zeros(r_dim, p);
            for u in &area.units {
                wtot += u.weight;
                w2 += u.weight * u.weight;
                ybar += u.weight * &u.y;
                for (r, row) in u.x_rows.iter().enumerate() {
                    let off = ds.block_offsets()[r];
                    for j in 0..row.len() {
                        xbar[(r, off + j)] += u.weight * row[j];
                    }
                }
            }
            ybar /= wtot;
            xbar /= wtot;
            AreaAggregates {
                area_label: area.label,
                weight_total: wtot,
                ybar_w: ybar,
                xbar_w: xbar,
                k2: w2 / (wtot * wtot),
            }
        })
        .collect()
}

/// Chi-square (GREG) calibration of the sampling weights, one area at a time.
///
/// Constraints per area: the calibrated weights sum to N_d, and the calibrated
/// weighted totals of every distinct non-constant covariate column match the
/// population totals `N_d * xbar_pop`. Columns duplicated across response
/// blocks contribute one constraint. The calibrated weights keep the
/// minimum-chi-square form `w~ = w (1 + c^T lambda)`; any nonpositive
/// calibrated weight aborts with [`Error::Calibration`].
pub fn calibrate_weights(ds: &Dataset) -> Result<Dataset> {
    let mut new_weights = Vec::with_capacity(ds.num_areas());
    for area in ds.areas() {
        let cols = distinct_columns(ds, area)?;
        let n = area.units.len();
        let dim = 1 + cols.len();
        // c_i = (1, z_i1, ..., z_im); system: sum_i w_i c_i c_i^T lambda = target - sum_i w_i c_i
        let mut gram = DMatrix::zeros(dim, dim);
        let mut total = DVector::zeros(dim);
        let mut target = DVector::zeros(dim);
        target[0] = area.pop_size as f64;
        for (k, col) in cols.iter().enumerate() {
            target[1 + k] = area.pop_size as f64 * col.pop_mean;
        }
        let mut c_rows = Vec::with_capacity(n);
        for u in &area.units {
            let mut c = DVector::zeros(dim);
            c[0] = 1.0;
            for (k, col) in cols.iter().enumerate() {
                c[1 + k] = u.x_rows[col.response][col.column];
            }
            gram += u.weight * &c * c.transpose();
            total += u.weight * &c;
            c_rows.push(c);
        }
        let rhs = &target - &total;
        let chol = SpdChol::new(&gram, &format!("calibration system for area {}", area.label))
            .map_err(|e| Error::Calibration {
                area: area.label,
                message: e.to_string(),
            })?;
        let lambda = chol.solve_vec(&rhs);
        let mut w = Vec::with_capacity(n);
        for (u, c) in area.units.iter().zip(&c_rows) {
            let wi = u.weight * (1.0 + c.dot(&lambda));
            if !(wi > 0.0) {
                return Err(Error::Calibration {
                    area: area.label,
                    message: format!("calibrated weight {wi:.6} is not positive"),
                });
            }
            w.push(wi);
        }
        new_weights.push(w);
    }
    ds.with_weights(&new_weights)
}

struct CalibrationColumn {
    response: usize,
    column: usize,
    pop_mean: f64,
}

/// Distinct non-constant covariate columns of one area's population targets.
/// Two columns are duplicates when they agree on every unit in the dataset.
fn distinct_columns(ds: &Dataset, area: &crate::data_model::Area) -> Result<Vec<CalibrationColumn>> {
    let mut cols: Vec<CalibrationColumn> = Vec::new();
    for r in 0..ds.num_responses() {
        'col: for j in 0..ds.block_sizes()[r] {
            let constant = ds
                .areas()
                .iter()
                .flat_map(|a| &a.units)
                .map(|u| u.x_rows[r][j])
                .try_fold(None::<f64>, |acc, v| match acc {
                    None => Ok(Some(v)),
                    Some(prev) if prev == v => Ok(Some(v)),
                    Some(_) => Err(()),
                })
                .is_ok();
            if constant {
                continue;
            }
            for existing in &cols {
                let same = ds.areas().iter().flat_map(|a| &a.units).all(|u| {
                    u.x_rows[r][j] == u.x_rows[existing.response][existing.column]
                });
                if same {
                    continue 'col;
                }
            }
            let off = ds.block_offsets()[r];
            cols.push(CalibrationColumn {
                response: r,
                column: j,
                pop_mean: area.xbar_pop[(r, off + j)],
            });
        }
    }
    Ok(cols)
}

/// Population benchmarking residual of a set of area predictions:
/// `sum_d N_d mu_hat_d - [Y_hat + (X - X_hat) beta]`, an R-vector, where
/// `Y_hat`/`X_hat` are the survey-weighted totals and `X` the population totals.
/// When the weights satisfy `w_d. = N_d` and every response block contains an
/// intercept, the residual of the survey-weighted pseudo-EBLUP is zero up to
/// rounding; a nonzero residual is a reported value, not an error.
pub fn benchmark_totals(
    ds: &Dataset,
    beta_w: &DVector<f64>,
    predictions: &[AreaPrediction],
) -> Result<DVector<f64>> {
    let r_dim = ds.num_responses();
    if predictions.len() != ds.num_areas() {
        return Err(Error::Validation(format!(
            "benchmarking: {} predictions for {} areas",
            predictions.len(),
            ds.num_areas()
        )));
    }
    let mut lhs = DVector::zeros(r_dim);
    let mut y_hat = DVector::zeros(r_dim);
    let mut x_hat = DMatrix::zeros(r_dim, ds.num_coefficients());
    let mut x_pop = DMatrix::zeros(r_dim, ds.num_coefficients());
    for (area, pred) in ds.areas().iter().zip(predictions) {
        if pred.area_label != area.label {
            return Err(Error::Validation(format!(
                "benchmarking: prediction for area {} paired with area {}",
                pred.area_label, area.label
            )));
        }
        lhs += area.pop_size as f64 * &pred.mean;
        x_pop += area.pop_size as f64 * &area.xbar_pop;
        for u in &area.units {
            y_hat += u.weight * &u.y;
            x_hat += u.weight * ds.x_matrix(u);
        }
    }
    Ok(lhs - (y_hat + (x_pop - x_hat) * beta_w))
}
