//! Per-area model algebra for the multivariate nested-error regression model.
//!
//! The sample covariance of area d factors as
//!
//! ```text
//! V_ds = Z_ds Sigma_u Z_ds^T + I_{n_d} (x) Sigma_e,   Z_ds = 1_{n_d} (x) I_R,
//! ```
//!
//! so every V_ds^{-1} product reduces to R x R solves via the Woodbury identity:
//! with C_d = (Sigma_u^{-1} + n_d Sigma_e^{-1})^{-1},
//!
//! ```text
//! (V_ds^{-1} v)_i = Sigma_e^{-1} v_i - Sigma_e^{-1} C_d Sigma_e^{-1} sum_j v_j,
//! log|V_ds|       = n_d log|Sigma_e| + log|I + n_d Sigma_e^{-1} Sigma_u|.
//! ```
//!
//! C_d is evaluated as L_e (I + n_d A)^{-1} A L_e^T with A = L_e^{-1} Sigma_u
//! L_e^{-T}, which stays stable when Sigma_u approaches the boundary. All
//! likelihood quantities are assembled from per-area sufficient statistics
//! (one pass over the units per fit, O(R^2 p^2) per area per evaluation).

use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

use crate::data_model::{Dataset, VarianceComponents};
use crate::error::{Error, Result};
use crate::linalg::{symmetrize, KahanMat, SpdChol};

/// Stacked design of one area: response, covariates, and area-effect incidence.
#[derive(Debug, Clone)]
pub struct AreaDesign {
    /// Length `n_d * R`.
    pub y: DVector<f64>,
    /// `n_d * R` by `p`.
    pub x: DMatrix<f64>,
    /// `n_d * R` by `R`, stacked identity blocks.
    pub z: DMatrix<f64>,
}

/// Build the stacked design blocks of area `d`.
pub fn build_area_design(ds: &Dataset, d: usize) -> AreaDesign {
    let r_dim = ds.num_responses();
    let p = ds.num_coefficients();
    let area = ds.area(d);
    let n = area.units.len();
    let mut y = DVector::zeros(n * r_dim);
    let mut x = DMatrix::zeros(n * r_dim, p);
    let mut z = DMatrix::zeros(n * r_dim, r_dim);
    for (i, unit) in area.units.iter().enumerate() {
        let base = i * r_dim;
        for r in 0..r_dim {
            y[base + r] = unit.y[r];
            z[(base + r, r)] = 1.0;
            let off = ds.block_offsets()[r];
            for j in 0..unit.x_rows[r].len() {
                x[(base + r, off + j)] = unit.x_rows[r][j];
            }
        }
    }
    AreaDesign { y, x, z }
}

/// Dense `n_d R x n_d R` covariance matrix of one area's stacked sample
/// (oracle/test support; production paths never materialize it).
pub fn dense_covariance(n: usize, vc: &VarianceComponents) -> DMatrix<f64> {
    let r_dim = vc.num_responses();
    let mut v = DMatrix::zeros(n * r_dim, n * r_dim);
    for i in 0..n {
        for j in 0..n {
            for a in 0..r_dim {
                for b in 0..r_dim {
                    let mut val = vc.sigma_u()[(a, b)];
                    if i == j {
                        val += vc.sigma_e()[(a, b)];
                    }
                    v[(i * r_dim + a, j * r_dim + b)] = val;
                }
            }
        }
    }
    v
}

/// Sufficient statistics of one area: everything the likelihood, its gradient,
/// and the WLS estimator need, accumulated in a single pass over the units.
#[derive(Debug, Clone)]
pub(crate) struct AreaStats {
    pub n: usize,
    /// sum_i X_di, stored dense R x p.
    pub sx: DMatrix<f64>,
    /// sum_i y_di.
    pub sy: DVector<f64>,
    /// sum_i y_di y_di^T.
    pub syy: DMatrix<f64>,
    /// `pxx[r][l]`: sum_i x_dir x_dil^T (p_r x p_l).
    pub pxx: Vec<Vec<DMatrix<f64>>>,
    /// `qxy[r][l]`: sum_i x_dir y_dil (p_r).
    pub qxy: Vec<Vec<DVector<f64>>>,
}

#[derive(Debug, Clone)]
pub(crate) struct ModelLayout {
    pub r_dim: usize,
    pub p: usize,
    pub sizes: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl ModelLayout {
    pub fn of(ds: &Dataset) -> Self {
        Self {
            r_dim: ds.num_responses(),
            p: ds.num_coefficients(),
            sizes: ds.block_sizes().to_vec(),
            offsets: ds.block_offsets().to_vec(),
        }
    }
}

pub(crate) fn area_stats(ds: &Dataset) -> Vec<AreaStats> {
    let r_dim = ds.num_responses();
    let p = ds.num_coefficients();
    ds.areas()
        .iter()
        .map(|area| {
            let mut sx = DMatrix::zeros(r_dim, p);
            let mut sy = DVector::zeros(r_dim);
            let mut syy = DMatrix::zeros(r_dim, r_dim);
            let mut pxx: Vec<Vec<DMatrix<f64>>> = (0..r_dim)
                .map(|r| {
                    (0..r_dim)
                        .map(|l| DMatrix::zeros(ds.block_sizes()[r], ds.block_sizes()[l]))
                        .collect()
                })
                .collect();
            let mut qxy: Vec<Vec<DVector<f64>>> = (0..r_dim)
                .map(|r| (0..r_dim).map(|_| DVector::zeros(ds.block_sizes()[r])).collect())
                .collect();
            for u in &area.units {
                sy += &u.y;
                syy += &u.y * u.y.transpose();
                for r in 0..r_dim {
                    let xr = &u.x_rows[r];
                    let off = ds.block_offsets()[r];
                    for j in 0..xr.len() {
                        sx[(r, off + j)] += xr[j];
                    }
                    for l in 0..r_dim {
                        qxy[r][l].axpy(u.y[l], xr, 1.0);
                        // pxx is symmetric across (r, l); fill both for direct indexing
                        if l >= r {
                            pxx[r][l].ger(1.0, xr, &u.x_rows[l], 1.0);
                        }
                    }
                }
            }
            for r in 0..r_dim {
                for l in 0..r {
                    pxx[r][l] = pxx[l][r].transpose();
                }
            }
            AreaStats {
                n: area.units.len(),
                sx,
                sy,
                syy,
                pxx,
                qxy,
            }
        })
        .collect()
}

/// Per-theta factorizations shared across areas. `per_n` caches the Woodbury
/// core C_n and log|I + n Sigma_e^{-1} Sigma_u| for each distinct sample size.
pub(crate) struct ThetaContext {
    pub sei: DMatrix<f64>,
    pub logdet_se: f64,
    per_n: BTreeMap<usize, (DMatrix<f64>, f64)>,
}

impl ThetaContext {
    /// `sigma_u` only needs to be symmetric positive semidefinite; `sigma_e`
    /// must be positive definite.
    pub fn new(
        sigma_u: &DMatrix<f64>,
        sigma_e: &DMatrix<f64>,
        sample_sizes: impl Iterator<Item = usize>,
    ) -> Result<Self> {
        let se_chol = SpdChol::new(sigma_e, "sigma_e")?;
        let sei = se_chol.inverse();
        let logdet_se = se_chol.log_det();
        // A = L_e^{-1} Sigma_u L_e^{-T}
        let le = se_chol.lower();
        let tmp = lower_solve(le, sigma_u);
        let a = lower_solve(le, &tmp.transpose());
        let a = symmetrize(&a);
        let r_dim = a.nrows();
        let mut per_n = BTreeMap::new();
        for n in sample_sizes {
            if per_n.contains_key(&n) {
                continue;
            }
            let t = DMatrix::identity(r_dim, r_dim) + a.scale(n as f64);
            let t_chol = SpdChol::new(&t, "I + n A")?;
            let s = symmetrize(&t_chol.solve_mat(&a));
            let c = le * s * le.transpose();
            per_n.insert(n, (symmetrize(&c), t_chol.log_det()));
        }
        Ok(Self {
            sei,
            logdet_se,
            per_n,
        })
    }

    pub fn woodbury_core(&self, n: usize) -> &DMatrix<f64> {
        &self.per_n.get(&n).expect("sample size registered").0
    }

    pub fn logdet_v(&self, n: usize) -> f64 {
        let (_, logdet_t) = self.per_n.get(&n).expect("sample size registered");
        n as f64 * self.logdet_se + logdet_t
    }
}

/// Solve L X = B for lower-triangular L.
fn lower_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for col in 0..b.ncols() {
        for i in 0..n {
            let mut s = x[(i, col)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
    }
    x
}

/// Normal-equation pieces of one area: K_d = X^T V^{-1} X, b_d = X^T V^{-1} y,
/// q_d = y^T V^{-1} y.
pub(crate) struct AreaNormal {
    pub k: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: f64,
}

pub(crate) fn area_normal(stats: &AreaStats, layout: &ModelLayout, ctx: &ThetaContext) -> AreaNormal {
    let c = ctx.woodbury_core(stats.n);
    let sei = &ctx.sei;
    let r_dim = layout.r_dim;
    // G = sum_i X^T Sigma_e^{-1} X assembled blockwise from cross-moments
    let mut k = DMatrix::zeros(layout.p, layout.p);
    for r in 0..r_dim {
        for l in 0..r_dim {
            let w = sei[(r, l)];
            if w == 0.0 {
                continue;
            }
            let (or, ol) = (layout.offsets[r], layout.offsets[l]);
            let block = &stats.pxx[r][l];
            for i in 0..block.nrows() {
                for j in 0..block.ncols() {
                    k[(or + i, ol + j)] += w * block[(i, j)];
                }
            }
        }
    }
    let f = sei * &stats.sx; // R x p
    let cf = c * &f;
    k -= f.transpose() * &cf;

    let mut b = DVector::zeros(layout.p);
    for r in 0..r_dim {
        let or = layout.offsets[r];
        for l in 0..r_dim {
            let w = sei[(r, l)];
            if w == 0.0 {
                continue;
            }
            let qv = &stats.qxy[r][l];
            for i in 0..qv.len() {
                b[or + i] += w * qv[i];
            }
        }
    }
    let sei_sy = sei * &stats.sy;
    b -= f.transpose() * (c * &sei_sy);

    let q = (sei.component_mul(&stats.syy)).sum() - (sei_sy.transpose() * c * &sei_sy)[(0, 0)];
    AreaNormal { k, b, q }
}

/// Pooled normal equations K = sum_d K_d, b = sum_d b_d (compensated sums).
pub(crate) fn pooled_normal(
    stats: &[AreaStats],
    layout: &ModelLayout,
    ctx: &ThetaContext,
) -> (DMatrix<f64>, DVector<f64>, Vec<AreaNormal>) {
    let mut k_acc = KahanMat::zeros(layout.p, layout.p);
    let mut b_acc = KahanMat::zeros(layout.p, 1);
    let per_area: Vec<AreaNormal> = stats
        .iter()
        .map(|s| area_normal(s, layout, ctx))
        .collect();
    for an in &per_area {
        k_acc.add(&an.k);
        b_acc.add(&DMatrix::from_column_slice(layout.p, 1, an.b.as_slice()));
    }
    let k = k_acc.value();
    let b = DVector::from_column_slice(b_acc.value().as_slice());
    (k, b, per_area)
}

fn describe_pivot(layout: &ModelLayout, message: &str) -> String {
    // pivot index is embedded as "pivot {j}" in the factorization error
    if let Some(idx) = message
        .split("pivot ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse::<usize>().ok())
    {
        for r in 0..layout.r_dim {
            let off = layout.offsets[r];
            if idx >= off && idx < off + layout.sizes[r] {
                return format!(
                    "normal equations rank deficient at response block {} column {}",
                    r + 1,
                    idx - off + 1
                );
            }
        }
    }
    format!("normal equations rank deficient: {message}")
}

/// Weighted least squares coefficients at fixed variance components:
/// `beta(theta) = (sum_d X^T V^{-1} X)^{-1} sum_d X^T V^{-1} y`.
pub fn wls_beta(ds: &Dataset, vc: &VarianceComponents) -> Result<DVector<f64>> {
    if vc.num_responses() != ds.num_responses() {
        return Err(Error::Validation(format!(
            "variance components have R = {}, dataset has R = {}",
            vc.num_responses(),
            ds.num_responses()
        )));
    }
    if ds.total_units() * ds.num_responses() <= ds.num_coefficients() {
        return Err(Error::Validation(
            "fewer observations than coefficients".into(),
        ));
    }
    let layout = ModelLayout::of(ds);
    let stats = area_stats(ds);
    let ctx = ThetaContext::new(vc.sigma_u(), vc.sigma_e(), stats.iter().map(|s| s.n))?;
    let (k, b, _) = pooled_normal(&stats, &layout, &ctx);
    let chol = SpdChol::new(&k, "wls").map_err(|e| match e {
        Error::Singular(msg) => Error::Singular(describe_pivot(&layout, &msg)),
        other => other,
    })?;
    Ok(chol.solve_vec(&b))
}

/// Predicted area effects u~_dw = Gamma_dw (ybar_dw - Xbar_dw beta) and
/// unit-level residuals e^_di = y_di - X_di beta - u~_dw.
pub fn predict_area_effects(
    ds: &Dataset,
    vc: &VarianceComponents,
    beta: &DVector<f64>,
) -> Result<(Vec<DVector<f64>>, Vec<Vec<DVector<f64>>>)> {
    let aggs = crate::aggregate::aggregate(ds);
    let mut effects = Vec::with_capacity(ds.num_areas());
    let mut residuals = Vec::with_capacity(ds.num_areas());
    for (area, agg) in ds.areas().iter().zip(&aggs) {
        let gamma = shrinkage(vc, agg.k2)?;
        let u = &gamma * (&agg.ybar_w - &agg.xbar_w * beta);
        let res = area
            .units
            .iter()
            .map(|unit| &unit.y - ds.x_matrix(unit) * beta - &u)
            .collect();
        effects.push(u);
        residuals.push(res);
    }
    Ok((effects, residuals))
}

/// Shrinkage matrix `Sigma_u (Sigma_u + k2 Sigma_e)^{-1}` of the aggregated
/// area-level observation.
pub(crate) fn shrinkage(vc: &VarianceComponents, k2: f64) -> Result<DMatrix<f64>> {
    if !(k2 > 0.0) || k2 > 1.0 {
        return Err(Error::Validation(format!(
            "squared-weight ratio k2 = {k2} outside (0, 1]"
        )));
    }
    let v = vc.sigma_u() + vc.sigma_e().scale(k2);
    let chol = SpdChol::new(&v, "aggregated covariance")?;
    // Gamma = Sigma_u V^{-1}; solve V Gamma^T = Sigma_u
    Ok(chol.solve_mat(vc.sigma_u()).transpose())
}
