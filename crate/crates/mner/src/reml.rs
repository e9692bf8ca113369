//! Restricted maximum likelihood for the variance components.
//!
//! The criterion is
//!
//! ```text
//! l_R(theta) = -1/2 [ sum_d log|V_ds| + log|sum_d X_ds^T V_ds^{-1} X_ds|
//!                     + sum_d r_ds^T V_ds^{-1} r_ds ] - (nR - p)/2 log(2 pi),
//! ```
//!
//! with `r_ds = y_ds - X_ds beta~(theta)` at the weighted least squares
//! coefficients. Optimization runs over [`CholeskyParam`], the stacked lower
//! triangles of the factors of Sigma_u and Sigma_e, so every iterate maps to
//! symmetric positive definite components. The gradient is analytic: the
//! matrix gradients with respect to Sigma_u and Sigma_e (assembled from the
//! same per-area sufficient statistics as the criterion) are chained through
//! d Sigma / d L, which for symmetric gradient G is 2 (G L) on the lower
//! triangle.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::data_model::{
    CoefficientMethod, Convergence, Dataset, FittedModel, VarianceComponents,
};
use crate::error::{Error, Result};
use crate::linalg::{psd_project, symmetrize, Kahan, SpdChol};
use crate::mner_core::{area_stats, pooled_normal, AreaStats, ModelLayout, ThetaContext};
use crate::optim::{maximize_box_bfgs, BoxBfgsOptions};
use crate::rng::{self, STREAM_RESTART};

/// Lower bound applied to every diagonal of L_u and L_e in optimizer
/// coordinates. A fit whose L_u diagonal lands on this floor raises the
/// boundary warning.
pub const DIAG_FLOOR: f64 = 1e-8;

/// Starting point for the optimizer.
#[derive(Debug, Clone)]
pub enum Initializer {
    /// Moment start: pooled within-area residual covariance for Sigma_e,
    /// between-area covariance of mean residuals for Sigma_u.
    Moment,
    /// Start from previously fitted components.
    Warm(VarianceComponents),
}

#[derive(Debug, Clone)]
pub struct RemlOptions {
    pub max_iterations: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub initializer: Initializer,
    /// Seeds the perturbed restarts tried after a failed first attempt.
    pub seed: u64,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            grad_tol: 1e-6,
            step_tol: 1e-9,
            initializer: Initializer::Moment,
            seed: 0,
        }
    }
}

impl RemlOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Validation("max_iterations must be positive".into()));
        }
        if !(self.grad_tol > 0.0) || !(self.step_tol > 0.0) {
            return Err(Error::Validation(
                "tolerances must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Lower-triangular factors (L_u, L_e) with positive diagonals;
/// Sigma_u = L_u L_u^T, Sigma_e = L_e L_e^T.
#[derive(Debug, Clone)]
pub struct CholeskyParam {
    l_u: DMatrix<f64>,
    l_e: DMatrix<f64>,
}

impl CholeskyParam {
    pub fn from_components(vc: &VarianceComponents) -> Result<Self> {
        let l_u = SpdChol::new(vc.sigma_u(), "sigma_u")?.lower().clone();
        let l_e = SpdChol::new(vc.sigma_e(), "sigma_e")?.lower().clone();
        Ok(Self { l_u, l_e })
    }

    fn from_matrices(sigma_u: &DMatrix<f64>, sigma_e: &DMatrix<f64>) -> Result<Self> {
        let l_u = SpdChol::new(sigma_u, "sigma_u start")?.lower().clone();
        let l_e = SpdChol::new(sigma_e, "sigma_e start")?.lower().clone();
        Ok(Self { l_u, l_e })
    }

    pub fn num_responses(&self) -> usize {
        self.l_u.nrows()
    }

    /// Products L L^T are symmetric positive definite by construction.
    pub fn components(&self) -> VarianceComponents {
        VarianceComponents::new_unchecked(
            symmetrize(&(&self.l_u * self.l_u.transpose())),
            symmetrize(&(&self.l_e * self.l_e.transpose())),
        )
    }

    /// Packed coordinates: lower triangle of L_u in row-major order, then L_e.
    pub fn vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.l_u.nrows() * (self.l_u.nrows() + 1));
        for l in [&self.l_u, &self.l_e] {
            for r in 0..l.nrows() {
                for c in 0..=r {
                    v.push(l[(r, c)]);
                }
            }
        }
        v
    }

    pub fn from_vector(num_responses: usize, v: &[f64]) -> Result<Self> {
        let half = num_responses * (num_responses + 1) / 2;
        if v.len() != 2 * half {
            return Err(Error::Validation(format!(
                "coordinate vector has length {}, expected {}",
                v.len(),
                2 * half
            )));
        }
        let unpack = |flat: &[f64]| -> Result<DMatrix<f64>> {
            let mut l = DMatrix::zeros(num_responses, num_responses);
            let mut k = 0;
            for r in 0..num_responses {
                for c in 0..=r {
                    l[(r, c)] = flat[k];
                    k += 1;
                }
            }
            for r in 0..num_responses {
                if !(l[(r, r)] > 0.0) {
                    return Err(Error::Validation(format!(
                        "factor diagonal {} is not positive",
                        r + 1
                    )));
                }
            }
            Ok(l)
        };
        Ok(Self {
            l_u: unpack(&v[..half])?,
            l_e: unpack(&v[half..])?,
        })
    }
}

/// Index of each diagonal position inside one packed lower triangle.
fn diag_positions(r_dim: usize) -> Vec<usize> {
    (0..r_dim).map(|r| r * (r + 1) / 2 + r).collect()
}

struct EvalPoint {
    value: f64,
    beta: DVector<f64>,
    kinv: DMatrix<f64>,
    ctx: ThetaContext,
}

fn norm_constant(total_units: usize, r_dim: usize, p: usize) -> f64 {
    -((total_units * r_dim - p) as f64) / 2.0 * (2.0 * std::f64::consts::PI).ln()
}

fn evaluate(
    stats: &[AreaStats],
    layout: &ModelLayout,
    sigma_u: &DMatrix<f64>,
    sigma_e: &DMatrix<f64>,
    norm_const: f64,
) -> Result<EvalPoint> {
    let ctx = ThetaContext::new(sigma_u, sigma_e, stats.iter().map(|s| s.n))?;
    let (k, b, per_area) = pooled_normal(stats, layout, &ctx);
    let k_chol = SpdChol::new(&k, "normal equations")?;
    let beta = k_chol.solve_vec(&b);
    let mut logdets = Kahan::default();
    let mut quad = Kahan::default();
    for an in &per_area {
        quad.add(an.q);
    }
    for s in stats {
        logdets.add(ctx.logdet_v(s.n));
    }
    let value =
        -0.5 * (logdets.value() + k_chol.log_det() + (quad.value() - beta.dot(&b))) + norm_const;
    if !value.is_finite() {
        return Err(Error::Singular("criterion is not finite".into()));
    }
    Ok(EvalPoint {
        value,
        beta,
        kinv: k_chol.inverse(),
        ctx,
    })
}

/// Residual cross-moments of one area at coefficients `beta`:
/// (sum_i r_di r_di^T, sum_i r_di) with r_di = y_di - X_di beta.
fn residual_moments(
    s: &AreaStats,
    layout: &ModelLayout,
    beta: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let r_dim = layout.r_dim;
    let mut mixed = DMatrix::zeros(r_dim, r_dim);
    let mut quad = DMatrix::zeros(r_dim, r_dim);
    for r in 0..r_dim {
        let beta_r = beta.rows(layout.offsets[r], layout.sizes[r]);
        for l in 0..r_dim {
            let beta_l = beta.rows(layout.offsets[l], layout.sizes[l]);
            // (sum_i y_di (X_di beta)^T)[r, l] = qxy[l][r] . beta_l
            mixed[(r, l)] = s.qxy[l][r].dot(&beta_l);
            quad[(r, l)] = (beta_r.transpose() * &s.pxx[r][l] * beta_l)[(0, 0)];
        }
    }
    let srr = &s.syy - &mixed - mixed.transpose() + quad;
    let sr = &s.sy - &s.sx * beta;
    (srr, sr)
}

/// Matrix gradients of the criterion with respect to Sigma_u and Sigma_e
/// (Frobenius pairing over all entries; both are symmetric).
fn full_gradients(
    stats: &[AreaStats],
    layout: &ModelLayout,
    point: &EvalPoint,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let r_dim = layout.r_dim;
    let sei = &point.ctx.sei;
    let kinv = &point.kinv;
    let beta = &point.beta;
    let eye = DMatrix::<f64>::identity(r_dim, r_dim);
    let mut gu = DMatrix::<f64>::zeros(r_dim, r_dim);
    let mut ge = DMatrix::<f64>::zeros(r_dim, r_dim);
    for s in stats {
        let n = s.n as f64;
        let c = point.ctx.woodbury_core(s.n);
        let seic = sei * c;
        let seicsei = &seic * sei;
        let f = sei * &s.sx;
        let shrink = &eye - seic.scale(n); // I - n Sigma_e^{-1} C_d
        let h = &shrink * &f;
        let sei_sy = sei * &s.sy;
        let t = &shrink * &sei_sy - &h * beta;
        // d log|V| / d Sigma_u = Z^T V^{-1} Z
        let m = sei.scale(n) - seicsei.scale(n * n);
        gu += m - &h * kinv * h.transpose() - &t * t.transpose();

        // d log|V| / d Sigma_e: unit-diagonal blocks of V^{-1}
        let d_mat = sei - &seicsei;
        let t_mat = &seic * &f;
        // sum_i X_di K^{-1} X_di^T through the covariate cross-moments
        let mut sxk = DMatrix::zeros(r_dim, r_dim);
        for r in 0..r_dim {
            for l in 0..r_dim {
                let (or, ol) = (layout.offsets[r], layout.offsets[l]);
                let block = &s.pxx[r][l];
                let mut acc = 0.0;
                for i in 0..block.nrows() {
                    for j in 0..block.ncols() {
                        acc += kinv[(or + i, ol + j)] * block[(i, j)];
                    }
                }
                sxk[(r, l)] = acc;
            }
        }
        let u = &f * kinv * t_mat.transpose();
        let term2 =
            sei * &sxk * sei - &u - u.transpose() + (&t_mat * kinv * t_mat.transpose()).scale(n);
        let (srr, sr) = residual_moments(s, layout, beta);
        let g = &seicsei * &sr;
        let sei_sr = sei * &sr;
        let term3 = sei * &srr * sei - &sei_sr * g.transpose() - &g * sei_sr.transpose()
            + (&g * g.transpose()).scale(n);
        ge += d_mat.scale(n) - term2 - term3;
    }
    (symmetrize(&gu.scale(-0.5)), symmetrize(&ge.scale(-0.5)))
}

/// Chain the matrix gradient through Sigma = L L^T: lower triangle of 2 G L.
fn chain_to_factor(g: &DMatrix<f64>, l: &DMatrix<f64>, out: &mut Vec<f64>) {
    let gl = g * l;
    for r in 0..l.nrows() {
        for c in 0..=r {
            out.push(2.0 * gl[(r, c)]);
        }
    }
}

/// Restricted log likelihood at fixed components (additive constant
/// included, so values are comparable across runs).
pub fn restricted_loglik(ds: &Dataset, vc: &VarianceComponents) -> Result<f64> {
    if vc.num_responses() != ds.num_responses() {
        return Err(Error::Validation(format!(
            "components have R = {}, dataset has R = {}",
            vc.num_responses(),
            ds.num_responses()
        )));
    }
    let layout = ModelLayout::of(ds);
    let stats = area_stats(ds);
    let nc = norm_constant(ds.total_units(), layout.r_dim, layout.p);
    Ok(evaluate(&stats, &layout, vc.sigma_u(), vc.sigma_e(), nc)?.value)
}

/// Criterion value and its analytic gradient in packed factor coordinates.
pub fn loglik_gradient(ds: &Dataset, param: &CholeskyParam) -> Result<(f64, Vec<f64>)> {
    if param.num_responses() != ds.num_responses() {
        return Err(Error::Validation(format!(
            "parameter has R = {}, dataset has R = {}",
            param.num_responses(),
            ds.num_responses()
        )));
    }
    let layout = ModelLayout::of(ds);
    let stats = area_stats(ds);
    let nc = norm_constant(ds.total_units(), layout.r_dim, layout.p);
    let vc = param.components();
    let point = evaluate(&stats, &layout, vc.sigma_u(), vc.sigma_e(), nc)?;
    let (gu, ge) = full_gradients(&stats, &layout, &point);
    let mut grad = Vec::with_capacity(layout.r_dim * (layout.r_dim + 1));
    chain_to_factor(&gu, &param.l_u, &mut grad);
    chain_to_factor(&ge, &param.l_e, &mut grad);
    Ok((point.value, grad))
}

/// Moment starting point: per-response OLS residuals split into pooled
/// within-area covariance (Sigma_e) and between-area covariance of area-mean
/// residuals minus the within contribution, kept positive definite.
fn moment_start(stats: &[AreaStats], layout: &ModelLayout) -> Result<CholeskyParam> {
    let r_dim = layout.r_dim;
    let num_areas = stats.len();
    let total: usize = stats.iter().map(|s| s.n).sum();
    // per-response OLS on the pooled data
    let mut beta = DVector::zeros(layout.p);
    for r in 0..r_dim {
        let p_r = layout.sizes[r];
        let mut gram = DMatrix::zeros(p_r, p_r);
        let mut rhs = DVector::zeros(p_r);
        for s in stats {
            gram += &s.pxx[r][r];
            rhs += &s.qxy[r][r];
        }
        let sol = match SpdChol::new(&gram, "ols start") {
            Ok(chol) => chol.solve_vec(&rhs),
            Err(_) => {
                let ridge = 1e-8 * (1.0 + gram.diagonal().max());
                let chol = SpdChol::new(
                    &(gram + DMatrix::identity(p_r, p_r) * ridge),
                    "ols start (ridged)",
                )?;
                chol.solve_vec(&rhs)
            }
        };
        for j in 0..p_r {
            beta[layout.offsets[r] + j] = sol[j];
        }
    }

    let mut within = DMatrix::zeros(r_dim, r_dim);
    let mut rbars = Vec::with_capacity(num_areas);
    let mut inv_n = 0.0;
    for s in stats {
        let (srr, sr) = residual_moments(s, layout, &beta);
        let n = s.n as f64;
        let rbar = sr / n;
        within += srr - (&rbar * rbar.transpose()).scale(n);
        rbars.push(rbar);
        inv_n += 1.0 / n;
    }
    inv_n /= num_areas as f64;
    let mut sigma_e0 = symmetrize(&(within / (total - num_areas) as f64));
    if SpdChol::new(&sigma_e0, "sigma_e start").is_err() {
        let ridge = 1e-6 * (1.0 + sigma_e0.diagonal().amax());
        sigma_e0 += DMatrix::identity(r_dim, r_dim) * ridge;
    }

    let mean_rbar = rbars.iter().sum::<DVector<f64>>() / num_areas as f64;
    let mut between = DMatrix::zeros(r_dim, r_dim);
    for rb in &rbars {
        let dv = rb - &mean_rbar;
        between += &dv * dv.transpose();
    }
    between /= (num_areas - 1).max(1) as f64;
    let floor_mat = sigma_e0.scale(0.1);
    let sigma_u0 = &floor_mat + psd_project(&(between - sigma_e0.scale(inv_n) - &floor_mat));
    CholeskyParam::from_matrices(&symmetrize(&sigma_u0), &sigma_e0)
}

/// Multiplicative jitter on the diagonals and additive jitter on the
/// off-diagonals of a starting point, for restart attempts.
fn perturb_start(base: &CholeskyParam, seed: u64, attempt: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[STREAM_RESTART, attempt]);
    let mut jitter = |l: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = l.clone();
        for r in 0..l.nrows() {
            for c in 0..=r {
                let z: f64 = StandardNormal.sample(&mut rng);
                if r == c {
                    out[(r, c)] = (l[(r, c)] * (0.4 * z).exp()).max(DIAG_FLOOR);
                } else {
                    let scale = 0.5 * (l[(r, r)].abs() + l[(c, c)].abs());
                    out[(r, c)] += 0.3 * scale * z;
                }
            }
        }
        out
    };
    CholeskyParam {
        l_u: jitter(&base.l_u),
        l_e: jitter(&base.l_e),
    }
    .vector()
}

/// Fit the variance components by REML and the coefficients by WLS at the
/// estimate. After a failed attempt the optimizer restarts from perturbed
/// moment starts (two retries) before reporting non-convergence with the
/// best point seen.
pub fn fit_reml(ds: &Dataset, options: &RemlOptions) -> Result<FittedModel> {
    options.validate()?;
    if ds.num_areas() < 2 {
        return Err(Error::Validation("fit requires at least two areas".into()));
    }
    if ds.total_units() <= ds.num_coefficients() {
        return Err(Error::Validation(format!(
            "{} units cannot identify {} coefficients",
            ds.total_units(),
            ds.num_coefficients()
        )));
    }
    if let Initializer::Warm(vc) = &options.initializer {
        if vc.num_responses() != ds.num_responses() {
            return Err(Error::Validation(
                "warm start has a different number of responses".into(),
            ));
        }
    }

    let layout = ModelLayout::of(ds);
    let stats = area_stats(ds);
    let nc = norm_constant(ds.total_units(), layout.r_dim, layout.p);
    let r_dim = layout.r_dim;
    let half = r_dim * (r_dim + 1) / 2;
    let diag = diag_positions(r_dim);
    let mut lower = vec![f64::NEG_INFINITY; 2 * half];
    for &i in &diag {
        lower[i] = DIAG_FLOOR;
        lower[half + i] = DIAG_FLOOR;
    }
    let bfgs = BoxBfgsOptions {
        max_iterations: options.max_iterations,
        grad_tol: options.grad_tol,
        step_tol: options.step_tol,
    };

    let moment = moment_start(&stats, &layout)?;
    let mut best: Option<(f64, Vec<f64>, f64, usize)> = None;
    let mut first_error: Option<Error> = None;
    for attempt in 0..3u64 {
        let x0 = match (attempt, &options.initializer) {
            (0, Initializer::Warm(vc)) => CholeskyParam::from_components(vc)?.vector(),
            (0, Initializer::Moment) => moment.vector(),
            (k, _) => perturb_start(&moment, options.seed, k),
        };
        let mut obj = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
            let param = CholeskyParam::from_vector(r_dim, v)?;
            let vc = param.components();
            let point = evaluate(&stats, &layout, vc.sigma_u(), vc.sigma_e(), nc)?;
            let (gu, ge) = full_gradients(&stats, &layout, &point);
            let mut grad = Vec::with_capacity(2 * half);
            chain_to_factor(&gu, &param.l_u, &mut grad);
            chain_to_factor(&ge, &param.l_e, &mut grad);
            Ok((point.value, grad))
        };
        let out = match maximize_box_bfgs(&mut obj, &x0, &lower, &bfgs) {
            Ok(out) => out,
            Err(e) => {
                first_error.get_or_insert(e);
                continue;
            }
        };
        if out.converged {
            let param = CholeskyParam::from_vector(r_dim, &out.x)?;
            let boundary_warning = (0..r_dim).any(|r| param.l_u[(r, r)] <= DIAG_FLOOR * 1.000001);
            let components = param.components();
            let point = evaluate(&stats, &layout, components.sigma_u(), components.sigma_e(), nc)?;
            return Ok(FittedModel {
                components,
                beta: point.beta,
                phi_w: None,
                coefficient_method: CoefficientMethod::Wls,
                convergence: Convergence {
                    iterations: out.iterations,
                    grad_norm: out.grad_norm,
                    loglik: out.value,
                    converged: true,
                    boundary_warning,
                },
            });
        }
        if best.as_ref().map_or(true, |(v, ..)| out.value > *v) {
            best = Some((out.value, out.x, out.grad_norm, out.iterations));
        }
    }

    match best {
        Some((value, x, grad_norm, iterations)) => {
            let theta = CholeskyParam::from_vector(r_dim, &x)
                .map(|p| p.components().theta())
                .unwrap_or(x);
            Err(Error::NonConvergence {
                iterations,
                grad_norm,
                best_theta: theta,
                best_loglik: value,
            })
        }
        None => Err(first_error.unwrap_or_else(|| {
            Error::Validation("optimization could not start".into())
        })),
    }
}
