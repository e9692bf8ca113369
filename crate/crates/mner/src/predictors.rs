//! Point predictors of small-area mean vectors.
//!
//! DIR is the Hajek (weighted mean) direct estimator. MYR is the multivariate
//! pseudo-EBLUP built from the aggregated area-level observation:
//!
//! ```text
//! mu~_d = Gamma_dw [ybar_dw + (Xbar_d - Xbar_dw) beta] + (I - Gamma_dw) Xbar_d beta,
//! Gamma_dw = Sigma_u (Sigma_u + k_d^2 Sigma_e)^{-1},
//! ```
//!
//! with survey-weighted coefficients solving
//! `sum_d sum_i w_di X_di^T [y_di - Gamma_dw ybar_dw - (X_di - Gamma_dw Xbar_dw) beta] = 0`.
//! MU is the same predictor on weights calibrated to Xbar_dw = Xbar_d, UYR is
//! the univariate pipeline applied per response, and MFH is the area-level
//! comparator that treats design covariances of the direct estimators as known.

use nalgebra::{DMatrix, DVector};

use crate::aggregate::{aggregate, AreaAggregates};
use crate::data_model::{
    AreaPrediction, CoefficientMethod, Convergence, Dataset, EstimatorKind, FittedModel,
    MseSource, VarianceComponents,
};
use crate::error::{Error, Result};
use crate::linalg::{symmetrize, KahanMat, SpdChol};
use crate::mner_core::shrinkage;
use crate::optim::{maximize_box_bfgs, BoxBfgsOptions};
use crate::reml::{fit_reml, RemlOptions, DIAG_FLOOR};

/// Design-based covariance estimator attached to the direct estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignVariance {
    /// With-replacement style:
    /// `w_d.^{-2} sum_i w_di (w_di - 1)(y_di - ybar_dw)(y_di - ybar_dw)^T`.
    WithReplacement,
    /// SRSWOR with finite population correction: `(1 - n_d/N_d) S_d / n_d`.
    SrsworFpc,
}

/// Hajek direct estimator per area (tag DIR) with a design-based covariance.
/// Single-unit areas carry no covariance estimate.
pub fn direct_estimator(ds: &Dataset, variance: DesignVariance) -> Result<Vec<AreaPrediction>> {
    let aggs = aggregate(ds);
    let r_dim = ds.num_responses();
    ds.areas()
        .iter()
        .zip(&aggs)
        .map(|(area, agg)| {
            let n = area.units.len();
            let mse = if n < 2 {
                None
            } else {
                Some(match variance {
                    DesignVariance::WithReplacement => {
                        let mut acc = DMatrix::zeros(r_dim, r_dim);
                        for u in &area.units {
                            let dev = &u.y - &agg.ybar_w;
                            acc += (&dev * dev.transpose()).scale(u.weight * (u.weight - 1.0));
                        }
                        symmetrize(&(acc / agg.weight_total.powi(2)))
                    }
                    DesignVariance::SrsworFpc => {
                        let mean = area.units.iter().map(|u| &u.y).sum::<DVector<f64>>()
                            / n as f64;
                        let mut s = DMatrix::zeros(r_dim, r_dim);
                        for u in &area.units {
                            let dev = &u.y - &mean;
                            s += &dev * dev.transpose();
                        }
                        s /= (n - 1) as f64;
                        let fpc = 1.0 - n as f64 / area.pop_size as f64;
                        symmetrize(&(s.scale(fpc / n as f64)))
                    }
                })
            };
            let source = if mse.is_some() {
                MseSource::Design
            } else {
                MseSource::None
            };
            AreaPrediction::new(
                area.label,
                EstimatorKind::Dir,
                agg.ybar_w.clone(),
                mse,
                source,
            )
        })
        .collect()
}

/// Shrinkage matrix of the aggregated observation:
/// `Gamma_dw = Sigma_u (Sigma_u + k2 Sigma_e)^{-1}`. Eigenvalues lie in
/// [0, 1) whenever k2 > 0.
pub fn gamma_dw(vc: &VarianceComponents, k2: f64) -> Result<DMatrix<f64>> {
    shrinkage(vc, k2)
}

fn mpbp_mean(
    agg: &AreaAggregates,
    xbar_pop: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let r_dim = gamma.nrows();
    let eye = DMatrix::<f64>::identity(r_dim, r_dim);
    // primary form
    let adj = &agg.ybar_w + (xbar_pop - &agg.xbar_w) * beta;
    let mean = gamma * adj + (&eye - gamma) * (xbar_pop * beta);
    // equivalent form: regression-synthetic plus shrunken area residual
    let alt = xbar_pop * beta + gamma * (&agg.ybar_w - &agg.xbar_w * beta);
    let diff = (&mean - &alt).abs().max();
    if diff > 1e-10 * (1.0 + mean.abs().max()) {
        return Err(Error::Validation(format!(
            "area {}: predictor forms disagree by {diff:.3e}",
            agg.area_label
        )));
    }
    Ok(mean)
}

/// Pseudo-best predictor at known components and coefficients.
pub fn mpbp(
    ds: &Dataset,
    vc: &VarianceComponents,
    beta: &DVector<f64>,
) -> Result<Vec<AreaPrediction>> {
    if beta.len() != ds.num_coefficients() {
        return Err(Error::Validation(format!(
            "beta has length {}, expected {}",
            beta.len(),
            ds.num_coefficients()
        )));
    }
    let aggs = aggregate(ds);
    ds.areas()
        .iter()
        .zip(&aggs)
        .map(|(area, agg)| {
            let gamma = gamma_dw(vc, agg.k2)?;
            let mean = mpbp_mean(agg, &area.xbar_pop, &gamma, beta)?;
            AreaPrediction::new(area.label, EstimatorKind::Myr, mean, None, MseSource::None)
        })
        .collect()
}

/// Survey-weighted coefficient estimator and its covariance.
///
/// The estimating-equation solution is accumulated along two algebraically
/// equivalent routes (direct, and through A~_di = w_di (X_di - Gamma_dw^T
/// Xbar_dw), which match because sum_i w_di X_di = w_d. Xbar_dw) and the
/// routes must agree to 1e-10. The covariance is
///
/// ```text
/// Phi_w = M^{-1} [ sum_d (sum_i A~_di)^T Sigma_u (sum_i A~_di)
///                  + sum_d sum_i A~_di^T Sigma_e A~_di ] M^{-T}.
/// ```
pub fn beta_w(ds: &Dataset, vc: &VarianceComponents) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if vc.num_responses() != ds.num_responses() {
        return Err(Error::Validation(format!(
            "components have R = {}, dataset has R = {}",
            vc.num_responses(),
            ds.num_responses()
        )));
    }
    let p = ds.num_coefficients();
    let aggs = aggregate(ds);
    let mut m_direct = KahanMat::zeros(p, p);
    let mut rhs_direct = KahanMat::zeros(p, 1);
    let mut m_alt = KahanMat::zeros(p, p);
    let mut rhs_alt = KahanMat::zeros(p, 1);
    let mut mid = KahanMat::zeros(p, p);
    for (area, agg) in ds.areas().iter().zip(&aggs) {
        let gamma = gamma_dw(vc, agg.k2)?;
        let g_xbar = &gamma * &agg.xbar_w;
        let g_ybar = &gamma * &agg.ybar_w;
        let gt_xbar = gamma.transpose() * &agg.xbar_w;
        let mut sum_atilde = DMatrix::zeros(ds.num_responses(), p);
        let mut mid_e = DMatrix::zeros(p, p);
        for u in &area.units {
            let x = ds.x_matrix(u);
            m_direct.add(&((x.transpose() * (&x - &g_xbar)).scale(u.weight)));
            rhs_direct.add(&DMatrix::from_column_slice(
                p,
                1,
                (x.transpose() * (&u.y - &g_ybar)).scale(u.weight).as_slice(),
            ));
            let atilde = (&x - &gt_xbar).scale(u.weight);
            m_alt.add(&(atilde.transpose() * &x));
            rhs_alt.add(&DMatrix::from_column_slice(
                p,
                1,
                (atilde.transpose() * &u.y).as_slice(),
            ));
            mid_e += atilde.transpose() * vc.sigma_e() * &atilde;
            sum_atilde += atilde;
        }
        mid.add(&(sum_atilde.transpose() * vc.sigma_u() * &sum_atilde + mid_e));
    }
    let m = m_direct.value();
    let rhs = DVector::from_column_slice(rhs_direct.value().as_slice());
    let m2 = m_alt.value();
    let rhs2 = DVector::from_column_slice(rhs_alt.value().as_slice());
    let m_scale = 1.0 + m.abs().max();
    let r_scale = 1.0 + rhs.abs().max();
    if (&m - &m2).abs().max() > 1e-10 * m_scale || (&rhs - &rhs2).abs().max() > 1e-10 * r_scale {
        return Err(Error::Validation(
            "survey-weighted estimating-equation routes disagree beyond 1e-10".into(),
        ));
    }
    let lu = m.clone().full_piv_lu();
    if !lu.is_invertible() {
        return Err(Error::Singular(
            "survey-weighted estimating equations are rank deficient".into(),
        ));
    }
    let beta = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("survey-weighted solve failed".into()))?;
    let minv = lu
        .try_inverse()
        .ok_or_else(|| Error::Singular("survey-weighted solve failed".into()))?;
    let phi = symmetrize(&(&minv * mid.value() * minv.transpose()));
    Ok((beta, phi))
}

/// Replace the WLS coefficients of a fitted model with the survey-weighted
/// estimator at theta-hat, attaching its covariance.
pub fn survey_weighted_fit(ds: &Dataset, fitted: &FittedModel) -> Result<FittedModel> {
    let (beta, phi) = beta_w(ds, &fitted.components)?;
    Ok(FittedModel {
        components: fitted.components.clone(),
        beta,
        phi_w: Some(phi),
        coefficient_method: CoefficientMethod::SurveyWeighted,
        convergence: fitted.convergence.clone(),
    })
}

fn require_survey_weighted(fitted: &FittedModel) -> Result<()> {
    if fitted.coefficient_method != CoefficientMethod::SurveyWeighted {
        return Err(Error::Validation(
            "predictor requires survey-weighted coefficients (see survey_weighted_fit)".into(),
        ));
    }
    Ok(())
}

/// Multivariate pseudo-EBLUP (tag MYR): the pseudo-best predictor evaluated
/// at the fitted components and survey-weighted coefficients.
pub fn mpeblup(ds: &Dataset, fitted: &FittedModel) -> Result<Vec<AreaPrediction>> {
    require_survey_weighted(fitted)?;
    mpbp(ds, &fitted.components, &fitted.beta)
}

/// Unified predictor (tag MU) on calibrated weights:
/// `Gamma ybar_dw + (I - Gamma) Xbar_d beta`. Verifies Xbar_dw = Xbar_d to
/// 1e-6 in every area.
pub fn unified_predictor(ds: &Dataset, fitted: &FittedModel) -> Result<Vec<AreaPrediction>> {
    require_survey_weighted(fitted)?;
    let aggs = aggregate(ds);
    let r_dim = ds.num_responses();
    let eye = DMatrix::<f64>::identity(r_dim, r_dim);
    ds.areas()
        .iter()
        .zip(&aggs)
        .map(|(area, agg)| {
            let drift = (&agg.xbar_w - &area.xbar_pop).abs().max();
            if drift > 1e-6 * (1.0 + area.xbar_pop.abs().max()) {
                return Err(Error::Validation(format!(
                    "area {}: weights are not calibrated (|Xbar_dw - Xbar_d| = {drift:.3e})",
                    area.label
                )));
            }
            let gamma = gamma_dw(&fitted.components, agg.k2)?;
            let mean =
                &gamma * &agg.ybar_w + (&eye - &gamma) * (&area.xbar_pop * &fitted.beta);
            AreaPrediction::new(area.label, EstimatorKind::Mu, mean, None, MseSource::None)
        })
        .collect()
}

/// Univariate pseudo-EBLUP (tag UYR): the full pipeline on the single-response
/// sub-dataset of response `r` (0-based).
pub fn univariate_peblup(
    ds: &Dataset,
    r: usize,
    options: &RemlOptions,
) -> Result<Vec<AreaPrediction>> {
    let sub = ds.restrict_to_response(r)?;
    let fitted = fit_reml(&sub, options)?;
    let fitted = survey_weighted_fit(&sub, &fitted)?;
    let preds = mpeblup(&sub, &fitted)?;
    preds
        .into_iter()
        .map(|p| {
            AreaPrediction::new(p.area_label, EstimatorKind::Uyr, p.mean, None, MseSource::None)
        })
        .collect()
}

/// Area-level comparator fit: components of the model
/// `ybar_dw = Xbar_d beta + u_d + eps_d` with known Var(eps_d) = E_d,
/// where Xbar_d is the population covariate mean matrix.
pub(crate) struct MfhFit {
    pub sigma_u: DMatrix<f64>,
    pub beta: DVector<f64>,
    /// Indices of the areas used for fitting and prediction.
    pub usable: Vec<usize>,
    pub convergence: Convergence,
}

fn mfh_norm_constant(num_usable: usize, r_dim: usize, p: usize) -> f64 {
    -((num_usable * r_dim - p) as f64) / 2.0 * (2.0 * std::f64::consts::PI).ln()
}

/// Criterion and matrix gradient for the area-level model at Sigma_u.
fn mfh_loglik(
    obs: &[(DVector<f64>, DMatrix<f64>, DMatrix<f64>)], // (ybar_w, Xbar_d, E_d)
    sigma_u: &DMatrix<f64>,
    p: usize,
    norm_const: f64,
) -> Result<(f64, DMatrix<f64>)> {
    let r_dim = sigma_u.nrows();
    let mut k = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    let mut logdets = 0.0;
    let mut ws = Vec::with_capacity(obs.len());
    for (ybar, xbar, e_d) in obs {
        let chol = SpdChol::new(&(sigma_u + e_d), "area-level covariance")?;
        let w = chol.inverse();
        logdets += chol.log_det();
        k += xbar.transpose() * &w * xbar;
        rhs += xbar.transpose() * &w * ybar;
        ws.push(w);
    }
    let k_chol = SpdChol::new(&k, "area-level normal equations")?;
    let beta = k_chol.solve_vec(&rhs);
    let kinv = k_chol.inverse();
    let mut quad = 0.0;
    let mut grad = DMatrix::zeros(r_dim, r_dim);
    for ((ybar, xbar, _), w) in obs.iter().zip(&ws) {
        let resid = ybar - xbar * &beta;
        let wr = w * &resid;
        quad += resid.dot(&wr);
        let wx = w * xbar;
        grad += w - &wx * &kinv * wx.transpose() - &wr * wr.transpose();
    }
    let value = -0.5 * (logdets + k_chol.log_det() + quad) + norm_const;
    if !value.is_finite() {
        return Err(Error::Singular("area-level criterion is not finite".into()));
    }
    Ok((value, symmetrize(&grad.scale(-0.5))))
}

fn mfh_beta(
    obs: &[(DVector<f64>, DMatrix<f64>, DMatrix<f64>)],
    sigma_u: &DMatrix<f64>,
    p: usize,
) -> Result<DVector<f64>> {
    let mut k = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for (ybar, xbar, e_d) in obs {
        let chol = SpdChol::new(&(sigma_u + e_d), "area-level covariance")?;
        let w = chol.inverse();
        k += xbar.transpose() * &w * xbar;
        rhs += xbar.transpose() * &w * ybar;
    }
    Ok(SpdChol::new(&k, "area-level normal equations")?.solve_vec(&rhs))
}

pub(crate) fn fit_mfh(
    ds: &Dataset,
    direct_cov: &[Option<DMatrix<f64>>],
    options: &RemlOptions,
) -> Result<MfhFit> {
    if direct_cov.len() != ds.num_areas() {
        return Err(Error::Validation(
            "one direct covariance entry per area required".into(),
        ));
    }
    let r_dim = ds.num_responses();
    let p = ds.num_coefficients();
    let aggs = aggregate(ds);
    let mut usable = Vec::new();
    let mut obs = Vec::new();
    for (d, cov) in direct_cov.iter().enumerate() {
        let Some(e_d) = cov else { continue };
        if e_d.nrows() != r_dim || e_d.ncols() != r_dim {
            return Err(Error::Validation(format!(
                "area {}: direct covariance has shape {}x{}",
                ds.area(d).label,
                e_d.nrows(),
                e_d.ncols()
            )));
        }
        // near-singular design covariances are excluded from the area model
        let min_eig = crate::linalg::sym_eigenvalues(e_d)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if min_eig < 1e-10 {
            continue;
        }
        usable.push(d);
        obs.push((
            aggs[d].ybar_w.clone(),
            ds.area(d).xbar_pop.clone(),
            symmetrize(e_d),
        ));
    }
    if obs.len() <= p {
        return Err(Error::Validation(format!(
            "{} usable areas cannot identify {} coefficients plus components",
            obs.len(),
            p
        )));
    }
    let norm_const = mfh_norm_constant(obs.len(), r_dim, p);

    // moment start: between-area covariance of OLS residual means minus the
    // average known covariance, kept positive definite
    let mut k0 = DMatrix::zeros(p, p);
    let mut rhs0 = DVector::zeros(p);
    for (ybar, xbar, _) in &obs {
        k0 += xbar.transpose() * xbar;
        rhs0 += xbar.transpose() * ybar;
    }
    let beta0 = match SpdChol::new(&k0, "area-level ols start") {
        Ok(c) => c.solve_vec(&rhs0),
        Err(_) => {
            let ridge = 1e-8 * (1.0 + k0.diagonal().max());
            SpdChol::new(&(k0 + DMatrix::identity(p, p) * ridge), "area-level ols start")?
                .solve_vec(&rhs0)
        }
    };
    let mut s_b = DMatrix::zeros(r_dim, r_dim);
    let mut e_mean = DMatrix::zeros(r_dim, r_dim);
    for (ybar, xbar, e_d) in &obs {
        let resid = ybar - xbar * &beta0;
        s_b += &resid * resid.transpose();
        e_mean += e_d;
    }
    s_b /= obs.len() as f64;
    e_mean /= obs.len() as f64;
    let ridge = (0.05 * s_b.trace() / r_dim as f64).max(1e-6);
    let su0 = crate::linalg::psd_project(&(&s_b - &e_mean))
        + DMatrix::identity(r_dim, r_dim) * ridge;

    let half = r_dim * (r_dim + 1) / 2;
    let su0_l = SpdChol::new(&symmetrize(&su0), "area-level start")?.lower().clone();
    let mut x0 = Vec::with_capacity(half);
    for r in 0..r_dim {
        for c in 0..=r {
            x0.push(su0_l[(r, c)]);
        }
    }
    let mut lower = vec![f64::NEG_INFINITY; half];
    for r in 0..r_dim {
        lower[r * (r + 1) / 2 + r] = DIAG_FLOOR;
    }
    let unpack = |v: &[f64]| -> DMatrix<f64> {
        let mut l = DMatrix::zeros(r_dim, r_dim);
        let mut k = 0;
        for r in 0..r_dim {
            for c in 0..=r {
                l[(r, c)] = v[k];
                k += 1;
            }
        }
        l
    };
    let mut obj = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let l = unpack(v);
        let su = symmetrize(&(&l * l.transpose()));
        let (value, g) = mfh_loglik(&obs, &su, p, norm_const)?;
        let gl = &g * &l;
        let mut grad = Vec::with_capacity(half);
        for r in 0..r_dim {
            for c in 0..=r {
                grad.push(2.0 * gl[(r, c)]);
            }
        }
        Ok((value, grad))
    };
    let out = maximize_box_bfgs(
        &mut obj,
        &x0,
        &lower,
        &BoxBfgsOptions {
            max_iterations: options.max_iterations,
            grad_tol: options.grad_tol,
            step_tol: options.step_tol,
        },
    )?;
    if !out.converged {
        let l = unpack(&out.x);
        let su = symmetrize(&(&l * l.transpose()));
        return Err(Error::NonConvergence {
            iterations: out.iterations,
            grad_norm: out.grad_norm,
            best_theta: su.iter().copied().collect(),
            best_loglik: out.value,
        });
    }
    let l = unpack(&out.x);
    let boundary_warning = (0..r_dim).any(|r| l[(r, r)] <= DIAG_FLOOR * 1.000001);
    let sigma_u = symmetrize(&(&l * l.transpose()));
    let beta = mfh_beta(&obs, &sigma_u, p)?;
    Ok(MfhFit {
        sigma_u,
        beta,
        usable,
        convergence: Convergence {
            iterations: out.iterations,
            grad_norm: out.grad_norm,
            loglik: out.value,
            converged: true,
            boundary_warning,
        },
    })
}

/// One area-level EBLUP: `Gamma ybar_dw + (I - Gamma) Xbar_d beta` with
/// `Gamma = Sigma_u (Sigma_u + E_d)^{-1}` and Xbar_d the population
/// covariate mean matrix.
pub(crate) fn mfh_point(
    sigma_u: &DMatrix<f64>,
    beta: &DVector<f64>,
    agg: &AreaAggregates,
    xbar_pop: &DMatrix<f64>,
    e_d: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let chol = SpdChol::new(&(sigma_u + e_d), "area-level covariance")?;
    let gamma = chol.solve_mat(sigma_u).transpose();
    let r_dim = sigma_u.nrows();
    let eye = DMatrix::<f64>::identity(r_dim, r_dim);
    Ok(&gamma * &agg.ybar_w + (&eye - &gamma) * (xbar_pop * beta))
}

/// Predictions for the usable areas of a fitted area-level model.
pub(crate) fn mfh_predictions(
    ds: &Dataset,
    fit: &MfhFit,
    direct_cov: &[Option<DMatrix<f64>>],
) -> Result<Vec<AreaPrediction>> {
    let aggs = aggregate(ds);
    fit.usable
        .iter()
        .map(|&d| {
            let e_d = direct_cov[d].as_ref().expect("usable area has covariance");
            let mean = mfh_point(
                &fit.sigma_u,
                &fit.beta,
                &aggs[d],
                &ds.area(d).xbar_pop,
                &symmetrize(e_d),
            )?;
            AreaPrediction::new(
                ds.area(d).label,
                EstimatorKind::Mfh,
                mean,
                None,
                MseSource::None,
            )
        })
        .collect()
}

/// Area-level EBLUP comparator (tag MFH). `direct_cov[d]` is the design-based
/// covariance of the direct estimator, treated as known; areas without one, or
/// with smallest eigenvalue below 1e-10, are excluded from fitting and from
/// the returned predictions.
pub fn mfh_eblup(
    ds: &Dataset,
    direct_cov: &[Option<DMatrix<f64>>],
    options: &RemlOptions,
) -> Result<Vec<AreaPrediction>> {
    let fit = fit_mfh(ds, direct_cov, options)?;
    mfh_predictions(ds, &fit, direct_cov)
}
