//! Input records, the validated dataset handle, and fitted-model containers.
//!
//! A dataset couples unit-level survey records with one auxiliary record per
//! sampled area (population size and population covariate means). Validation
//! re-indexes areas to a dense `0..D` order sorted by label; original labels are
//! kept for output. Duplicate unit records are accepted as distinct units.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, SpdChol};

/// One sampled unit: area label, sampling weight, response vector and one
/// covariate row per response block.
#[derive(Debug, Clone)]
pub struct UnitRecord {
    pub area_label: i64,
    pub weight: f64,
    /// Length R.
    pub y: Vec<f64>,
    /// `covariates[r]` has length `p_r`; a model intercept is a leading 1.
    pub covariates: Vec<Vec<f64>>,
}

/// Auxiliary population information for one area.
#[derive(Debug, Clone)]
pub struct AuxRecord {
    pub area_label: i64,
    pub pop_size: u64,
    /// `xbar[r]` has length `p_r`: population means of the block-r covariates.
    pub xbar: Vec<Vec<f64>>,
}

/// A validated unit (dense storage).
#[derive(Debug, Clone)]
pub struct Unit {
    pub weight: f64,
    pub y: DVector<f64>,
    pub x_rows: Vec<DVector<f64>>,
}

/// All sampled units of one area plus its auxiliary record.
#[derive(Debug, Clone)]
pub struct Area {
    pub label: i64,
    pub pop_size: u64,
    /// R x p block-diagonal matrix of population covariate means.
    pub xbar_pop: DMatrix<f64>,
    pub units: Vec<Unit>,
}

impl Area {
    pub fn sample_size(&self) -> usize {
        self.units.len()
    }
}

/// Validated dataset handle: consistent block structure, positive weights,
/// matching area sets, dense area indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    num_responses: usize,
    block_sizes: Vec<usize>,
    block_offsets: Vec<usize>,
    areas: Vec<Area>,
}

impl Dataset {
    pub fn num_responses(&self) -> usize {
        self.num_responses
    }

    /// Coefficient counts per response block (`p_r`).
    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    /// Column offset of each response block inside the stacked coefficient vector.
    pub fn block_offsets(&self) -> &[usize] {
        &self.block_offsets
    }

    /// Total coefficient count `p = sum p_r`.
    pub fn num_coefficients(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn num_areas(&self) -> usize {
        self.areas.len()
    }

    pub fn areas(&self) -> &[Area] {
        &self.areas
    }

    pub fn area(&self, d: usize) -> &Area {
        &self.areas[d]
    }

    pub fn total_units(&self) -> usize {
        self.areas.iter().map(|a| a.units.len()).sum()
    }

    /// Materialize the R x p block-diagonal covariate matrix of one unit.
    pub fn x_matrix(&self, unit: &Unit) -> DMatrix<f64> {
        let p = self.num_coefficients();
        let mut x = DMatrix::zeros(self.num_responses, p);
        for (r, row) in unit.x_rows.iter().enumerate() {
            let off = self.block_offsets[r];
            for j in 0..row.len() {
                x[(r, off + j)] = row[j];
            }
        }
        x
    }

    /// Same dataset with replaced weights; `weights[d][i]` follows storage order.
    pub fn with_weights(&self, weights: &[Vec<f64>]) -> Result<Dataset> {
        if weights.len() != self.areas.len() {
            return Err(Error::Validation(
                "weight replacement: area count mismatch".into(),
            ));
        }
        let mut out = self.clone();
        for (area, w) in out.areas.iter_mut().zip(weights) {
            if w.len() != area.units.len() {
                return Err(Error::Validation(format!(
                    "weight replacement: unit count mismatch in area {}",
                    area.label
                )));
            }
            for (unit, &wi) in area.units.iter_mut().zip(w) {
                if !(wi > 0.0) || !wi.is_finite() {
                    return Err(Error::Validation(format!(
                        "weight replacement: nonpositive weight in area {}",
                        area.label
                    )));
                }
                unit.weight = wi;
            }
        }
        Ok(out)
    }

    /// Same dataset with replaced response vectors; `responses[d][i]` follows
    /// storage order. Shapes must match the originals.
    pub(crate) fn with_responses(&self, responses: &[Vec<DVector<f64>>]) -> Dataset {
        debug_assert_eq!(responses.len(), self.areas.len());
        let mut out = self.clone();
        for (area, ys) in out.areas.iter_mut().zip(responses) {
            debug_assert_eq!(ys.len(), area.units.len());
            for (unit, y) in area.units.iter_mut().zip(ys) {
                debug_assert_eq!(y.len(), unit.y.len());
                unit.y = y.clone();
            }
        }
        out
    }

    /// Univariate sub-dataset for response `r` (0-based): keeps block-r
    /// covariates and the r-th response only.
    pub fn restrict_to_response(&self, r: usize) -> Result<Dataset> {
        if r >= self.num_responses {
            return Err(Error::Validation(format!(
                "response index {r} out of range (R = {})",
                self.num_responses
            )));
        }
        let p_r = self.block_sizes[r];
        let areas = self
            .areas
            .iter()
            .map(|a| {
                let off = self.block_offsets[r];
                let mut xbar = DMatrix::zeros(1, p_r);
                for j in 0..p_r {
                    xbar[(0, j)] = a.xbar_pop[(r, off + j)];
                }
                Area {
                    label: a.label,
                    pop_size: a.pop_size,
                    xbar_pop: xbar,
                    units: a
                        .units
                        .iter()
                        .map(|u| Unit {
                            weight: u.weight,
                            y: DVector::from_element(1, u.y[r]),
                            x_rows: vec![u.x_rows[r].clone()],
                        })
                        .collect(),
                }
            })
            .collect();
        Ok(Dataset {
            num_responses: 1,
            block_sizes: vec![p_r],
            block_offsets: vec![0],
            areas,
        })
    }
}

/// Validate raw records and build the dataset handle.
///
/// Rules: at least one unit; identical block structure across units; finite
/// responses and covariates; strictly positive finite weights; exactly one aux
/// record per sampled area (no extras, none missing); `N_d >= n_d`; total unit
/// count exceeds the number of areas. Calling this on the records of an already
/// validated dataset returns an identical dataset.
pub fn validate_dataset(units: &[UnitRecord], aux: &[AuxRecord]) -> Result<Dataset> {
    let first = units
        .first()
        .ok_or_else(|| Error::Validation("no unit records".into()))?;
    let num_responses = first.y.len();
    if num_responses == 0 {
        return Err(Error::Validation("unit records carry no responses".into()));
    }
    if first.covariates.len() != num_responses {
        return Err(Error::Validation(format!(
            "area {}: {} covariate blocks for {} responses",
            first.area_label,
            first.covariates.len(),
            num_responses
        )));
    }
    let block_sizes: Vec<usize> = first.covariates.iter().map(|c| c.len()).collect();
    if block_sizes.iter().any(|&p| p == 0) {
        return Err(Error::Validation("empty covariate block".into()));
    }
    let mut block_offsets = Vec::with_capacity(block_sizes.len());
    let mut off = 0;
    for &p in &block_sizes {
        block_offsets.push(off);
        off += p;
    }

    let mut labels: Vec<i64> = units.iter().map(|u| u.area_label).collect();
    labels.sort_unstable();
    labels.dedup();

    let mut aux_by_label = std::collections::BTreeMap::new();
    for rec in aux {
        if aux_by_label.insert(rec.area_label, rec).is_some() {
            return Err(Error::Validation(format!(
                "area {}: duplicate auxiliary record",
                rec.area_label
            )));
        }
    }
    for rec in aux {
        if labels.binary_search(&rec.area_label).is_err() {
            return Err(Error::Validation(format!(
                "area {}: auxiliary record has no sampled units",
                rec.area_label
            )));
        }
    }

    let mut areas = Vec::with_capacity(labels.len());
    for &label in &labels {
        let rec = aux_by_label.get(&label).ok_or_else(|| {
            Error::Validation(format!("area {label}: missing auxiliary record"))
        })?;
        if rec.xbar.len() != num_responses
            || rec.xbar.iter().zip(&block_sizes).any(|(v, &p)| v.len() != p)
        {
            return Err(Error::Validation(format!(
                "area {label}: auxiliary covariate means do not match the unit block structure"
            )));
        }
        if rec.xbar.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "area {label}: nonfinite auxiliary covariate mean"
            )));
        }
        let mut xbar_pop = DMatrix::zeros(num_responses, off);
        for (r, row) in rec.xbar.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                xbar_pop[(r, block_offsets[r] + j)] = v;
            }
        }
        areas.push(Area {
            label,
            pop_size: rec.pop_size,
            xbar_pop,
            units: Vec::new(),
        });
    }

    for u in units {
        let d = labels.binary_search(&u.area_label).expect("label indexed");
        if u.y.len() != num_responses {
            return Err(Error::Validation(format!(
                "area {}: unit has {} responses, expected {}",
                u.area_label,
                u.y.len(),
                num_responses
            )));
        }
        if u.covariates.len() != num_responses
            || u.covariates.iter().zip(&block_sizes).any(|(c, &p)| c.len() != p)
        {
            return Err(Error::Validation(format!(
                "area {}: covariate block structure differs from the first record",
                u.area_label
            )));
        }
        if u.y.iter().any(|v| !v.is_finite())
            || u.covariates.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::Validation(format!(
                "area {}: nonfinite response or covariate (field y/x)",
                u.area_label
            )));
        }
        if !(u.weight > 0.0) || !u.weight.is_finite() {
            return Err(Error::Validation(format!(
                "area {}: weight {} is not strictly positive",
                u.area_label, u.weight
            )));
        }
        areas[d].units.push(Unit {
            weight: u.weight,
            y: DVector::from_vec(u.y.clone()),
            x_rows: u
                .covariates
                .iter()
                .map(|c| DVector::from_vec(c.clone()))
                .collect(),
        });
    }

    for a in &areas {
        if (a.pop_size as usize) < a.units.len() {
            return Err(Error::Validation(format!(
                "area {}: population size {} below sample size {}",
                a.label,
                a.pop_size,
                a.units.len()
            )));
        }
    }
    let total: usize = areas.iter().map(|a| a.units.len()).sum();
    if total <= areas.len() {
        return Err(Error::Validation(format!(
            "total sample size {total} does not exceed the number of areas {}",
            areas.len()
        )));
    }

    Ok(Dataset {
        num_responses,
        block_sizes,
        block_offsets,
        areas,
    })
}

/// Variance components (Sigma_u, Sigma_e), both symmetric positive definite.
///
/// The flattened parameter vector stacks the diagonals first and then the upper
/// off-diagonals in lexicographic order, for Sigma_u and then Sigma_e:
/// `(s_u,11.., s_u,12.., s_e,11.., s_e,12..)`, total length `R(R+1)`.
#[derive(Debug, Clone)]
pub struct VarianceComponents {
    sigma_u: DMatrix<f64>,
    sigma_e: DMatrix<f64>,
}

impl VarianceComponents {
    pub fn new(sigma_u: DMatrix<f64>, sigma_e: DMatrix<f64>) -> Result<Self> {
        for (m, name) in [(&sigma_u, "sigma_u"), (&sigma_e, "sigma_e")] {
            if m.nrows() != m.ncols() {
                return Err(Error::Validation(format!("{name} is not square")));
            }
            if linalg::asymmetry(m) > 1e-10 * (1.0 + m.abs().max()) {
                return Err(Error::Validation(format!("{name} is not symmetric")));
            }
            SpdChol::new(m, name)?;
        }
        if sigma_u.nrows() != sigma_e.nrows() {
            return Err(Error::Validation(
                "sigma_u and sigma_e have different sizes".into(),
            ));
        }
        Ok(Self { sigma_u, sigma_e })
    }

    /// Build without the positive-definiteness check. Callers must guarantee
    /// both matrices are symmetric PSD by construction (Cholesky products can
    /// sit numerically at the boundary, which `new` would reject).
    pub(crate) fn new_unchecked(sigma_u: DMatrix<f64>, sigma_e: DMatrix<f64>) -> Self {
        Self { sigma_u, sigma_e }
    }

    pub fn num_responses(&self) -> usize {
        self.sigma_u.nrows()
    }

    pub fn sigma_u(&self) -> &DMatrix<f64> {
        &self.sigma_u
    }

    pub fn sigma_e(&self) -> &DMatrix<f64> {
        &self.sigma_e
    }

    /// Flattened parameter vector of length R(R+1).
    pub fn theta(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.sigma_u.nrows() * (self.sigma_u.nrows() + 1));
        for m in [&self.sigma_u, &self.sigma_e] {
            let r_dim = m.nrows();
            for r in 0..r_dim {
                out.push(m[(r, r)]);
            }
            for r in 0..r_dim {
                for l in (r + 1)..r_dim {
                    out.push(m[(r, l)]);
                }
            }
        }
        out
    }

    /// Rebuild from a flattened parameter vector.
    pub fn from_theta(theta: &[f64], num_responses: usize) -> Result<Self> {
        let half = num_responses * (num_responses + 1) / 2;
        if theta.len() != 2 * half {
            return Err(Error::Validation(format!(
                "theta has length {}, expected {}",
                theta.len(),
                2 * half
            )));
        }
        let unpack = |flat: &[f64]| {
            let mut m = DMatrix::zeros(num_responses, num_responses);
            for r in 0..num_responses {
                m[(r, r)] = flat[r];
            }
            let mut k = num_responses;
            for r in 0..num_responses {
                for l in (r + 1)..num_responses {
                    m[(r, l)] = flat[k];
                    m[(l, r)] = flat[k];
                    k += 1;
                }
            }
            m
        };
        Self::new(unpack(&theta[..half]), unpack(&theta[half..]))
    }
}

/// How the fixed-effect coefficients were estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientMethod {
    /// Weighted least squares at theta-hat (model based, no survey weights).
    Wls,
    /// Survey-weighted estimating-equation solution.
    SurveyWeighted,
}

/// Optimizer outcome attached to a fitted model.
#[derive(Debug, Clone)]
pub struct Convergence {
    pub iterations: usize,
    pub grad_norm: f64,
    pub loglik: f64,
    pub converged: bool,
    /// Set when a diagonal of the Sigma_u Cholesky factor reached the 1e-8 floor.
    pub boundary_warning: bool,
}

/// REML estimates plus coefficient estimates.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub components: VarianceComponents,
    pub beta: DVector<f64>,
    /// Covariance of the survey-weighted coefficient estimator, when used.
    pub phi_w: Option<DMatrix<f64>>,
    pub coefficient_method: CoefficientMethod,
    pub convergence: Convergence,
}

/// Which predictor produced an [`AreaPrediction`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Dir,
    Myr,
    Mu,
    Uyr,
    Mfh,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Dir => "DIR",
            EstimatorKind::Myr => "MYR",
            EstimatorKind::Mu => "MU",
            EstimatorKind::Uyr => "UYR",
            EstimatorKind::Mfh => "MFH",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dir" => Ok(EstimatorKind::Dir),
            "myr" => Ok(EstimatorKind::Myr),
            "mu" => Ok(EstimatorKind::Mu),
            "uyr" => Ok(EstimatorKind::Uyr),
            "mfh" => Ok(EstimatorKind::Mfh),
            other => Err(Error::Usage(format!("unknown estimator '{other}'"))),
        }
    }
}

/// How the attached MSE matrix was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MseSource {
    Analytic,
    Bootstrap,
    Design,
    None,
}

impl MseSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            MseSource::Analytic => "analytic",
            MseSource::Bootstrap => "bootstrap",
            MseSource::Design => "design",
            MseSource::None => "none",
        }
    }
}

/// Predicted mean vector for one area, with an optional MSE matrix.
#[derive(Debug, Clone)]
pub struct AreaPrediction {
    pub area_label: i64,
    pub estimator: EstimatorKind,
    pub mean: DVector<f64>,
    pub mse: Option<DMatrix<f64>>,
    pub mse_source: MseSource,
}

impl AreaPrediction {
    /// Validates the MSE invariant: symmetric with nonnegative diagonal.
    pub fn new(
        area_label: i64,
        estimator: EstimatorKind,
        mean: DVector<f64>,
        mse: Option<DMatrix<f64>>,
        mse_source: MseSource,
    ) -> Result<Self> {
        if let Some(m) = &mse {
            if m.nrows() != mean.len() || m.ncols() != mean.len() {
                return Err(Error::Validation(format!(
                    "area {area_label}: MSE matrix shape {}x{} does not match R = {}",
                    m.nrows(),
                    m.ncols(),
                    mean.len()
                )));
            }
            if linalg::asymmetry(m) > 1e-8 * (1.0 + m.abs().max()) {
                return Err(Error::Validation(format!(
                    "area {area_label}: MSE matrix is not symmetric"
                )));
            }
            if (0..m.nrows()).any(|i| m[(i, i)] < -1e-12) {
                return Err(Error::Validation(format!(
                    "area {area_label}: negative MSE diagonal"
                )));
            }
        }
        Ok(Self {
            area_label,
            estimator,
            mean,
            mse,
            mse_source,
        })
    }

    /// Value and MSE of a linear combination of the mean vector.
    pub fn linear_combination(&self, spec: &LinearCombination) -> Result<(f64, Option<f64>)> {
        if spec.coefficients.len() != self.mean.len() {
            return Err(Error::Validation(format!(
                "linear combination has {} coefficients for R = {}",
                spec.coefficients.len(),
                self.mean.len()
            )));
        }
        let a = DVector::from_column_slice(&spec.coefficients);
        let value = a.dot(&self.mean);
        let mse = self.mse.as_ref().map(|m| (a.transpose() * m * &a)[(0, 0)]);
        Ok((value, mse))
    }
}

/// Coefficients of a derived indicator a^T mu_d (for example a rate built from
/// two response components).
#[derive(Debug, Clone)]
pub struct LinearCombination {
    coefficients: Vec<f64>,
}

impl LinearCombination {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.is_empty() || coefficients.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "linear combination coefficients must be finite".into(),
            ));
        }
        if coefficients.iter().all(|&v| v == 0.0) {
            return Err(Error::Validation(
                "linear combination coefficients are all zero".into(),
            ));
        }
        Ok(Self { coefficients })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn toy_units() -> Vec<UnitRecord> {
        vec![
            UnitRecord {
                area_label: 2,
                weight: 3.0,
                y: vec![1.0, 2.0],
                covariates: vec![vec![1.0, 0.5], vec![1.0, 2.0]],
            },
            UnitRecord {
                area_label: 1,
                weight: 1.5,
                y: vec![0.0, 1.0],
                covariates: vec![vec![1.0, -0.5], vec![1.0, 1.0]],
            },
            UnitRecord {
                area_label: 1,
                weight: 2.0,
                y: vec![2.0, 0.5],
                covariates: vec![vec![1.0, 1.5], vec![1.0, 3.0]],
            },
        ]
    }

    pub fn toy_aux() -> Vec<AuxRecord> {
        vec![
            AuxRecord {
                area_label: 1,
                pop_size: 10,
                xbar: vec![vec![1.0, 0.4], vec![1.0, 2.1]],
            },
            AuxRecord {
                area_label: 2,
                pop_size: 8,
                xbar: vec![vec![1.0, 0.6], vec![1.0, 2.4]],
            },
        ]
    }

    #[test]
    fn validates_and_reindexes_sorted_by_label() {
        let ds = validate_dataset(&toy_units(), &toy_aux()).unwrap();
        assert_eq!(ds.num_areas(), 2);
        assert_eq!(ds.num_responses(), 2);
        assert_eq!(ds.block_sizes(), &[2, 2]);
        assert_eq!(ds.area(0).label, 1);
        assert_eq!(ds.area(0).units.len(), 2);
        assert_eq!(ds.area(1).label, 2);
        // x matrix is block diagonal
        let x = ds.x_matrix(&ds.area(1).units[0]);
        assert_eq!(x[(0, 0)], 1.0);
        assert_eq!(x[(0, 2)], 0.0);
        assert_eq!(x[(1, 2)], 1.0);
        assert_eq!(x[(1, 3)], 2.0);
    }

    #[test]
    fn validation_is_idempotent() {
        let ds = validate_dataset(&toy_units(), &toy_aux()).unwrap();
        // rebuild records from the validated dataset and validate again
        let units: Vec<UnitRecord> = ds
            .areas()
            .iter()
            .flat_map(|a| {
                a.units.iter().map(|u| UnitRecord {
                    area_label: a.label,
                    weight: u.weight,
                    y: u.y.iter().copied().collect(),
                    covariates: u.x_rows.iter().map(|r| r.iter().copied().collect()).collect(),
                })
            })
            .collect();
        let aux: Vec<AuxRecord> = ds
            .areas()
            .iter()
            .map(|a| AuxRecord {
                area_label: a.label,
                pop_size: a.pop_size,
                xbar: (0..ds.num_responses())
                    .map(|r| {
                        (0..ds.block_sizes()[r])
                            .map(|j| a.xbar_pop[(r, ds.block_offsets()[r] + j)])
                            .collect()
                    })
                    .collect(),
            })
            .collect();
        let ds2 = validate_dataset(&units, &aux).unwrap();
        assert_eq!(ds2.num_areas(), ds.num_areas());
        for (a, b) in ds.areas().iter().zip(ds2.areas()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.units.len(), b.units.len());
            for (ua, ub) in a.units.iter().zip(&b.units) {
                assert_eq!(ua.weight, ub.weight);
                assert_eq!(ua.y, ub.y);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut units = toy_units();
        units[0].weight = 0.0;
        assert!(validate_dataset(&units, &toy_aux()).is_err());

        let mut units = toy_units();
        units[1].y[0] = f64::NAN;
        assert!(validate_dataset(&units, &toy_aux()).is_err());

        let mut units = toy_units();
        units[2].covariates[1] = vec![1.0];
        assert!(validate_dataset(&units, &toy_aux()).is_err());

        // missing aux for area 2
        let aux = vec![toy_aux().remove(0)];
        assert!(validate_dataset(&toy_units(), &aux).is_err());

        // extra aux for an unsampled area
        let mut aux = toy_aux();
        aux.push(AuxRecord {
            area_label: 9,
            pop_size: 5,
            xbar: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        });
        assert!(validate_dataset(&toy_units(), &aux).is_err());

        // population below sample size
        let mut aux = toy_aux();
        aux[0].pop_size = 1;
        assert!(validate_dataset(&toy_units(), &aux).is_err());
    }

    #[test]
    fn theta_roundtrip_r3() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let su = &a * a.transpose() + DMatrix::identity(3, 3);
            let b = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let se = &b * b.transpose() + DMatrix::identity(3, 3);
            let vc = VarianceComponents::new(su.clone(), se.clone()).unwrap();
            let theta = vc.theta();
            assert_eq!(theta.len(), 12);
            let back = VarianceComponents::from_theta(&theta, 3).unwrap();
            assert!((back.sigma_u() - &su).abs().max() < 1e-14);
            assert!((back.sigma_e() - &se).abs().max() < 1e-14);
        }
    }

    #[test]
    fn theta_layout_r2() {
        let su = DMatrix::from_row_slice(2, 2, &[0.1, 0.16, 0.16, 0.4]);
        let se = DMatrix::from_row_slice(2, 2, &[0.9, 0.75, 0.75, 1.0]);
        let vc = VarianceComponents::new(su, se).unwrap();
        assert_eq!(vc.theta(), vec![0.1, 0.4, 0.16, 0.9, 1.0, 0.75]);
    }

    #[test]
    fn variance_components_reject_indefinite() {
        let su = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]); // eigenvalues 3, -1
        let se = DMatrix::identity(2, 2);
        assert!(VarianceComponents::new(su, se).is_err());
    }

    #[test]
    fn linear_combination_of_prediction() {
        let pred = AreaPrediction::new(
            7,
            EstimatorKind::Myr,
            DVector::from_vec(vec![2.0, 3.0]),
            Some(DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.2])),
            MseSource::Analytic,
        )
        .unwrap();
        let spec = LinearCombination::new(vec![1.0, -1.0]).unwrap();
        let (v, m) = pred.linear_combination(&spec).unwrap();
        assert!((v - (-1.0)).abs() < 1e-15);
        assert!((m.unwrap() - (0.5 + 0.2 - 2.0 * 0.1)).abs() < 1e-15);
        assert!(LinearCombination::new(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn restrict_to_response_extracts_block() {
        let ds = validate_dataset(&toy_units(), &toy_aux()).unwrap();
        let uni = ds.restrict_to_response(1).unwrap();
        assert_eq!(uni.num_responses(), 1);
        assert_eq!(uni.num_coefficients(), 2);
        assert_eq!(uni.area(0).units[0].y[0], 1.0);
        assert_eq!(uni.area(0).units[0].x_rows[0][1], 1.0);
        assert_eq!(uni.area(0).xbar_pop[(0, 1)], 2.1);
    }
}
