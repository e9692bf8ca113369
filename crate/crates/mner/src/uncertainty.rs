//! MSE matrices for the area predictors.
//!
//! The analytic approximation splits into the conditional prediction variance
//! `G1 = (I - Gamma_dw) Sigma_u` and the coefficient-uncertainty term
//! `G2 = B_d Phi_w B_d^T` with `B_d = Xbar_d - Gamma_dw Xbar_dw`. The
//! parametric bootstrap regenerates responses at the fitted model, re-estimates
//! per replicate, and averages outer products of the prediction errors.
//!
//! Bootstrap draws come from the stream `(seed, [STREAM_BOOTSTRAP, b])` for
//! replicate `b` (retry path `[STREAM_BOOTSTRAP, b, 1]`), drawing per area the
//! R-vector u* and then per sampled unit the R-vector e*. Replicates are
//! therefore independent of worker scheduling, and accumulation happens in
//! replicate order, so results are byte-identical for any worker count.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::aggregate::aggregate;
use crate::data_model::{CoefficientMethod, Dataset, FittedModel, VarianceComponents};
use crate::error::{Error, Result};
use crate::linalg::{asymmetry, psd_sqrt, symmetrize};
use crate::predictors::{beta_w, gamma_dw, mpbp};
use crate::reml::{fit_reml, Initializer, RemlOptions};
use crate::rng::{stream, STREAM_BOOTSTRAP, STREAM_REPLICATE};

/// Conditional MSE of the pseudo-best predictor at known coefficients:
/// `G1 = (I - Gamma_dw) Sigma_u`. Symmetric in exact arithmetic; asymmetry
/// beyond 1e-10 aborts rather than being averaged away.
pub fn g1(vc: &VarianceComponents, k2: f64) -> Result<DMatrix<f64>> {
    let r = vc.num_responses();
    let gamma = gamma_dw(vc, k2)?;
    let raw = (DMatrix::<f64>::identity(r, r) - gamma) * vc.sigma_u();
    if asymmetry(&raw) > 1e-10 * (1.0 + raw.abs().max()) {
        return Err(Error::Validation(format!(
            "G1 asymmetry {:.3e} exceeds tolerance",
            asymmetry(&raw)
        )));
    }
    Ok(symmetrize(&raw))
}

/// Coefficient-uncertainty MSE term `G2 = B Phi_w B^T` with
/// `B = Xbar_d - Gamma_dw Xbar_dw`. Positive semidefinite by construction.
pub fn g2(
    vc: &VarianceComponents,
    k2: f64,
    xbar_pop: &DMatrix<f64>,
    xbar_w: &DMatrix<f64>,
    phi_w: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p = xbar_pop.ncols();
    if xbar_w.shape() != xbar_pop.shape() || phi_w.shape() != (p, p) {
        return Err(Error::Validation(
            "G2: mean and covariance shapes do not match".into(),
        ));
    }
    let gamma = gamma_dw(vc, k2)?;
    let b = xbar_pop - gamma * xbar_w;
    Ok(symmetrize(&(&b * phi_w * b.transpose())))
}

/// Per-area analytic MSE split.
#[derive(Debug, Clone)]
pub struct MseComponents {
    pub g1: DMatrix<f64>,
    pub g2: DMatrix<f64>,
}

impl MseComponents {
    pub fn total(&self) -> DMatrix<f64> {
        &self.g1 + &self.g2
    }
}

/// Analytic MSE components for every area at the fitted model. Requires
/// survey-weighted coefficients with their covariance attached.
pub fn analytic_mse(ds: &Dataset, fitted: &FittedModel) -> Result<Vec<MseComponents>> {
    if fitted.coefficient_method != CoefficientMethod::SurveyWeighted {
        return Err(Error::Validation(
            "analytic MSE requires survey-weighted coefficients".into(),
        ));
    }
    let phi = fitted.phi_w.as_ref().ok_or_else(|| {
        Error::Validation("analytic MSE requires the coefficient covariance".into())
    })?;
    let aggs = aggregate(ds);
    ds.areas()
        .iter()
        .zip(&aggs)
        .map(|(area, agg)| {
            Ok(MseComponents {
                g1: g1(&fitted.components, agg.k2)?,
                g2: g2(
                    &fitted.components,
                    agg.k2,
                    &area.xbar_pop,
                    &agg.xbar_w,
                    phi,
                )?,
            })
        })
        .collect()
}

/// Parametric bootstrap controls.
#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Worker threads; the result does not depend on this.
    pub workers: usize,
    /// Re-estimate the variance components per replicate (full bootstrap).
    /// When false only the coefficients are re-estimated (plug-in mode).
    pub refit_theta: bool,
    /// Stream path segment between STREAM_BOOTSTRAP and the replicate index,
    /// used to nest bootstrap draws inside an outer replicate.
    pub stream_prefix: Vec<u64>,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 200,
            seed: 0,
            workers: 1,
            refit_theta: true,
            stream_prefix: Vec::new(),
        }
    }
}

impl BootstrapConfig {
    fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Validation("bootstrap needs at least 1 replicate".into()));
        }
        if self.workers == 0 {
            return Err(Error::Validation("bootstrap needs at least 1 worker".into()));
        }
        Ok(())
    }
}

/// Bootstrap result: per-area MSE matrices plus replicate accounting.
#[derive(Debug, Clone)]
pub struct BootstrapMse {
    /// One symmetric PSD matrix per area, in dataset order.
    pub per_area: Vec<DMatrix<f64>>,
    pub replicates_used: usize,
    pub replicates_failed: usize,
}

/// Shared read-only state for one bootstrap run.
struct BootstrapWorld<'a> {
    ds: &'a Dataset,
    fitted: &'a FittedModel,
    su_root: DMatrix<f64>,
    se_root: DMatrix<f64>,
    config: &'a BootstrapConfig,
}

/// Prediction errors `mu_hat*_d - mu*_d` of one bootstrap replicate.
fn replicate_errors(world: &BootstrapWorld, path: &[u64]) -> Result<Vec<DVector<f64>>> {
    let ds = world.ds;
    let r_dim = ds.num_responses();
    let mut rng = stream(world.config.seed, path);
    let mut responses = Vec::with_capacity(ds.num_areas());
    let mut mu_star = Vec::with_capacity(ds.num_areas());
    for area in ds.areas() {
        let z = DVector::from_fn(r_dim, |_, _| StandardNormal.sample(&mut rng));
        let u_star = &world.su_root * z;
        mu_star.push(&area.xbar_pop * &world.fitted.beta + &u_star);
        let mut ys = Vec::with_capacity(area.units.len());
        for unit in &area.units {
            let z = DVector::from_fn(r_dim, |_, _| StandardNormal.sample(&mut rng));
            let e_star = &world.se_root * z;
            ys.push(ds.x_matrix(unit) * &world.fitted.beta + &u_star + e_star);
        }
        responses.push(ys);
    }
    let ds_star = ds.with_responses(&responses);
    let components = if world.config.refit_theta {
        let opts = RemlOptions {
            initializer: Initializer::Warm(world.fitted.components.clone()),
            seed: world.config.seed,
            ..RemlOptions::default()
        };
        fit_reml(&ds_star, &opts)?.components
    } else {
        world.fitted.components.clone()
    };
    let (bw, _) = beta_w(&ds_star, &components)?;
    let preds = mpbp(&ds_star, &components, &bw)?;
    Ok(preds
        .iter()
        .zip(&mu_star)
        .map(|(p, m)| &p.mean - m)
        .collect())
}

fn replicate_with_retry(world: &BootstrapWorld, b: usize) -> Option<Vec<DVector<f64>>> {
    let mut path = Vec::with_capacity(world.config.stream_prefix.len() + 3);
    path.push(STREAM_BOOTSTRAP);
    path.extend_from_slice(&world.config.stream_prefix);
    path.push(b as u64);
    replicate_errors(world, &path)
        .or_else(|_| {
            path.push(1);
            replicate_errors(world, &path)
        })
        .ok()
}

/// Parametric bootstrap MSE of the survey-weighted pseudo-EBLUP.
///
/// Each replicate regenerates (u*, e*) at the fitted components, rebuilds the
/// responses around `Xbar_d beta_hat_w`, re-estimates, and predicts. A failing
/// replicate is retried once on a fresh stream and dropped if it fails again;
/// more than 5% dropped aborts the run.
pub fn bootstrap_mse(
    ds: &Dataset,
    fitted: &FittedModel,
    config: &BootstrapConfig,
) -> Result<BootstrapMse> {
    config.validate()?;
    if fitted.coefficient_method != CoefficientMethod::SurveyWeighted {
        return Err(Error::Validation(
            "bootstrap requires survey-weighted coefficients".into(),
        ));
    }
    let world = BootstrapWorld {
        ds,
        fitted,
        su_root: psd_sqrt(fitted.components.sigma_u()),
        se_root: psd_sqrt(fitted.components.sigma_e()),
        config,
    };
    let total = config.replicates;
    let workers = config.workers.min(total);
    let mut slots: Vec<Option<Vec<DVector<f64>>>> = vec![None; total];
    if workers == 1 {
        for (b, slot) in slots.iter_mut().enumerate() {
            *slot = replicate_with_retry(&world, b);
        }
    } else {
        let world_ref = &world;
        let chunks = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        (w..total)
                            .step_by(workers)
                            .map(|b| (b, replicate_with_retry(world_ref, b)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("bootstrap worker panicked"))
                .collect::<Vec<_>>()
        });
        for chunk in chunks {
            for (b, res) in chunk {
                slots[b] = res;
            }
        }
    }
    let failed = slots.iter().filter(|s| s.is_none()).count();
    if (failed as f64) > 0.05 * total as f64 {
        return Err(Error::ReplicateFailures {
            failed,
            total,
            cap_percent: 5.0,
        });
    }
    let used = total - failed;
    let r_dim = ds.num_responses();
    let mut acc = vec![DMatrix::<f64>::zeros(r_dim, r_dim); ds.num_areas()];
    // fixed replicate order keeps the sums independent of the worker split
    for errs in slots.iter().flatten() {
        for (a, e) in acc.iter_mut().zip(errs) {
            *a += e * e.transpose();
        }
    }
    let per_area = acc
        .into_iter()
        .map(|m| symmetrize(&(m / used as f64)))
        .collect();
    Ok(BootstrapMse {
        per_area,
        replicates_used: used,
        replicates_failed: failed,
    })
}

/// Monte Carlo estimate of the cross term
/// `E[(mu_hat_d - mu_tilde_d)(mu_tilde_d - mu_d)^T]` between coefficient
/// estimation error and conditional prediction error, with elementwise
/// standard errors. Zero in expectation when weights are constant within areas.
#[derive(Debug, Clone)]
pub struct CrossTermCheck {
    pub area_label: i64,
    pub estimate: DMatrix<f64>,
    pub std_error: DMatrix<f64>,
}

/// Pooled and per-area Monte Carlo cross-term estimates. The pooled matrix
/// averages the per-area cross products within each replicate before taking
/// Monte Carlo moments, so its standard error reflects the coefficient noise
/// shared by all areas of a replicate.
#[derive(Debug, Clone)]
pub struct CrossTermMonteCarlo {
    pub pooled_estimate: DMatrix<f64>,
    pub pooled_std_error: DMatrix<f64>,
    pub per_area: Vec<CrossTermCheck>,
}

pub fn mse_cross_term_check(
    ds: &Dataset,
    vc: &VarianceComponents,
    beta: &DVector<f64>,
    replicates: usize,
    seed: u64,
) -> Result<CrossTermMonteCarlo> {
    if replicates < 2 {
        return Err(Error::Validation("cross-term check needs >= 2 replicates".into()));
    }
    let r_dim = ds.num_responses();
    let su_root = psd_sqrt(vc.sigma_u());
    let se_root = psd_sqrt(vc.sigma_e());
    let num_areas = ds.num_areas();
    let mut sum = vec![DMatrix::<f64>::zeros(r_dim, r_dim); num_areas];
    let mut sum_sq = vec![DMatrix::<f64>::zeros(r_dim, r_dim); num_areas];
    let mut pooled_sum = DMatrix::<f64>::zeros(r_dim, r_dim);
    let mut pooled_sq = DMatrix::<f64>::zeros(r_dim, r_dim);
    for l in 0..replicates {
        let mut rng = stream(seed, &[STREAM_REPLICATE, l as u64]);
        let mut responses = Vec::with_capacity(num_areas);
        let mut mu_true = Vec::with_capacity(num_areas);
        for area in ds.areas() {
            let z = DVector::from_fn(r_dim, |_, _| StandardNormal.sample(&mut rng));
            let u = &su_root * z;
            mu_true.push(&area.xbar_pop * beta + &u);
            let mut ys = Vec::with_capacity(area.units.len());
            for unit in &area.units {
                let z = DVector::from_fn(r_dim, |_, _| StandardNormal.sample(&mut rng));
                ys.push(ds.x_matrix(unit) * beta + &u + &se_root * z);
            }
            responses.push(ys);
        }
        let ds_l = ds.with_responses(&responses);
        let ideal = mpbp(&ds_l, vc, beta)?;
        let (bw, _) = beta_w(&ds_l, vc)?;
        let estimated = mpbp(&ds_l, vc, &bw)?;
        let mut repl_mean = DMatrix::<f64>::zeros(r_dim, r_dim);
        for d in 0..num_areas {
            let coef_err = &estimated[d].mean - &ideal[d].mean;
            let pred_err = &ideal[d].mean - &mu_true[d];
            let cross = coef_err * pred_err.transpose();
            sum[d] += &cross;
            sum_sq[d] += cross.component_mul(&cross);
            repl_mean += &cross;
        }
        repl_mean /= num_areas as f64;
        pooled_sum += &repl_mean;
        pooled_sq += repl_mean.component_mul(&repl_mean);
    }
    let l = replicates as f64;
    // (sq / l - mean^2) / (l - 1) is the elementwise variance of the mean
    let mc_se = |mean: &DMatrix<f64>, sq: &DMatrix<f64>| {
        let var = (sq / l - mean.component_mul(mean)) / (l - 1.0);
        var.map(|v| v.max(0.0).sqrt())
    };
    let per_area = (0..num_areas)
        .map(|d| {
            let mean = &sum[d] / l;
            let std_error = mc_se(&mean, &sum_sq[d]);
            CrossTermCheck {
                area_label: ds.area(d).label,
                estimate: mean,
                std_error,
            }
        })
        .collect();
    let pooled_estimate = &pooled_sum / l;
    let pooled_std_error = mc_se(&pooled_estimate, &pooled_sq);
    Ok(CrossTermMonteCarlo {
        pooled_estimate,
        pooled_std_error,
        per_area,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigenvalues;
    use crate::predictors::{mpeblup, survey_weighted_fit};
    use crate::test_util::{random_vc, simulate_mner};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn scalar_g1_closed_form() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let su: f64 = rng.gen_range(0.05..2.0);
            let se: f64 = rng.gen_range(0.05..2.0);
            let k2: f64 = rng.gen_range(0.05..1.0);
            let vc = VarianceComponents::new(
                DMatrix::from_element(1, 1, su),
                DMatrix::from_element(1, 1, se),
            )
            .unwrap();
            let g = g1(&vc, k2).unwrap();
            let expect = su * k2 * se / (su + k2 * se);
            assert!((g[(0, 0)] - expect).abs() < 1e-12 * (1.0 + expect));
        }
    }

    #[test]
    fn g1_matches_monte_carlo() {
        // mu = u, ybar = u + ebar with Var(ebar) = k2 Sigma_e; error Gamma ybar - u
        let vc = random_vc(5, 2);
        let k2 = 0.3;
        let expect = g1(&vc, k2).unwrap();
        let gamma = gamma_dw(&vc, k2).unwrap();
        let su_root = psd_sqrt(vc.sigma_u());
        let eb_root = psd_sqrt(&vc.sigma_e().scale(k2));
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let batches = 50;
        let per_batch = 2000;
        let mut batch_means = vec![Vec::new(); 4];
        for _ in 0..batches {
            let mut acc = DMatrix::<f64>::zeros(2, 2);
            for _ in 0..per_batch {
                let u = &su_root
                    * DVector::from_fn(2, |_, _| {
                        rand_distr::StandardNormal.sample(&mut rng)
                    });
                let ybar = &u
                    + &eb_root
                        * DVector::from_fn(2, |_, _| {
                            rand_distr::StandardNormal.sample(&mut rng)
                        });
                let err = &gamma * ybar - u;
                acc += &err * err.transpose();
            }
            acc /= per_batch as f64;
            for (k, v) in acc.iter().enumerate() {
                batch_means[k].push(*v);
            }
        }
        for (k, series) in batch_means.iter().enumerate() {
            let mean: f64 = series.iter().sum::<f64>() / batches as f64;
            let var: f64 = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (batches as f64 - 1.0);
            let se = (var / batches as f64).sqrt();
            let target = expect[(k / 2, k % 2)];
            assert!(
                (mean - target).abs() < 3.0 * se,
                "entry {k}: {mean} vs {target} (se {se:.2e})"
            );
        }
    }

    #[test]
    fn g2_matches_monte_carlo() {
        // coefficient error drawn straight from N(0, Phi); error B delta
        let vc = random_vc(7, 2);
        let k2 = 0.25;
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let p = 3;
        let a = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-0.7..0.7));
        let phi = &a * a.transpose() + DMatrix::identity(p, p) * 0.05;
        let xbar_pop = DMatrix::from_fn(2, p, |_, _| rng.gen_range(-1.0..1.0));
        let xbar_w = DMatrix::from_fn(2, p, |_, _| rng.gen_range(-1.0..1.0));
        let expect = g2(&vc, k2, &xbar_pop, &xbar_w, &phi).unwrap();
        let b = &xbar_pop - gamma_dw(&vc, k2).unwrap() * &xbar_w;
        let phi_root = psd_sqrt(&phi);
        let batches = 50;
        let per_batch = 2000;
        let mut batch_means = vec![Vec::new(); 4];
        for _ in 0..batches {
            let mut acc = DMatrix::<f64>::zeros(2, 2);
            for _ in 0..per_batch {
                let delta = &phi_root
                    * DVector::from_fn(p, |_, _| rand_distr::StandardNormal.sample(&mut rng));
                let err = &b * delta;
                acc += &err * err.transpose();
            }
            acc /= per_batch as f64;
            for (k, v) in acc.iter().enumerate() {
                batch_means[k].push(*v);
            }
        }
        for (k, series) in batch_means.iter().enumerate() {
            let mean: f64 = series.iter().sum::<f64>() / batches as f64;
            let var: f64 = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (batches as f64 - 1.0);
            let se = (var / batches as f64).sqrt();
            let target = expect[(k / 2, k % 2)];
            assert!(
                (mean - target).abs() < 3.0 * se,
                "entry {k}: {mean} vs {target} (se {se:.2e})"
            );
        }
    }

    #[test]
    fn analytic_components_symmetric_psd() {
        let beta = DVector::from_vec(vec![1.0, 0.5, -0.5, 2.0]);
        let su = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]);
        let se = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);
        let ds = simulate_mner(60, &vec![6; 10], &[2, 2], &beta, &su, &se);
        let fitted = fit_reml(&ds, &RemlOptions::default()).unwrap();
        let fitted = survey_weighted_fit(&ds, &fitted).unwrap();
        for comp in analytic_mse(&ds, &fitted).unwrap() {
            for m in [&comp.g1, &comp.g2, &comp.total()] {
                assert!(asymmetry(m) < 1e-12);
                for e in sym_eigenvalues(m) {
                    assert!(e > -1e-10, "eigenvalue {e}");
                }
            }
        }
    }

    #[test]
    fn single_replicate_is_outer_product() {
        let beta = DVector::from_vec(vec![1.0, 0.5]);
        let su = DMatrix::from_element(1, 1, 0.3);
        let se = DMatrix::from_element(1, 1, 0.9);
        let ds = simulate_mner(61, &vec![5; 8], &[2], &beta, &su, &se);
        let fitted = fit_reml(&ds, &RemlOptions::default()).unwrap();
        let fitted = survey_weighted_fit(&ds, &fitted).unwrap();
        let config = BootstrapConfig {
            replicates: 1,
            seed: 99,
            workers: 1,
            refit_theta: false,
            stream_prefix: Vec::new(),
        };
        let out = bootstrap_mse(&ds, &fitted, &config).unwrap();
        let world = BootstrapWorld {
            ds: &ds,
            fitted: &fitted,
            su_root: psd_sqrt(fitted.components.sigma_u()),
            se_root: psd_sqrt(fitted.components.sigma_e()),
            config: &config,
        };
        let errs = replicate_errors(&world, &[STREAM_BOOTSTRAP, 0]).unwrap();
        for (m, e) in out.per_area.iter().zip(&errs) {
            assert!((m - e * e.transpose()).abs().max() < 1e-14);
        }
    }

    #[test]
    fn bootstrap_reproducible_and_worker_invariant() {
        let beta = DVector::from_vec(vec![1.0, 0.5, -0.5, 2.0]);
        let su = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]);
        let se = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);
        let ds = simulate_mner(62, &vec![5; 8], &[2, 2], &beta, &su, &se);
        let fitted = fit_reml(&ds, &RemlOptions::default()).unwrap();
        let fitted = survey_weighted_fit(&ds, &fitted).unwrap();
        let mut config = BootstrapConfig {
            replicates: 8,
            seed: 7,
            workers: 1,
            refit_theta: true,
            stream_prefix: Vec::new(),
        };
        let a = bootstrap_mse(&ds, &fitted, &config).unwrap();
        let b = bootstrap_mse(&ds, &fitted, &config).unwrap();
        config.workers = 3;
        let c = bootstrap_mse(&ds, &fitted, &config).unwrap();
        for ((x, y), z) in a.per_area.iter().zip(&b.per_area).zip(&c.per_area) {
            assert_eq!(x.as_slice(), y.as_slice());
            assert_eq!(x.as_slice(), z.as_slice());
        }
        assert_eq!(a.replicates_used, 8);
    }

    #[test]
    fn plugin_bootstrap_approaches_analytic() {
        // equal weights within areas: the cross term vanishes and the plug-in
        // bootstrap targets exactly G1 + G2 at theta-hat
        let beta = DVector::from_vec(vec![1.0, 0.5, -0.5, 2.0]);
        let su = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]);
        let se = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);
        let ds = simulate_mner(63, &vec![5; 12], &[2, 2], &beta, &su, &se);
        let fitted = fit_reml(&ds, &RemlOptions::default()).unwrap();
        let fitted = survey_weighted_fit(&ds, &fitted).unwrap();
        let analytic = analytic_mse(&ds, &fitted).unwrap();
        let config = BootstrapConfig {
            replicates: 2000,
            seed: 13,
            workers: 1,
            refit_theta: false,
            stream_prefix: Vec::new(),
        };
        let boot = bootstrap_mse(&ds, &fitted, &config).unwrap();
        let mut diff_sq = 0.0;
        let mut ref_sq = 0.0;
        for (m, comp) in boot.per_area.iter().zip(&analytic) {
            let total = comp.total();
            let rel = (m - &total).norm() / total.norm();
            assert!(rel < 0.12, "relative deviation {rel:.3}");
            diff_sq += (m - &total).norm_squared();
            ref_sq += total.norm_squared();
        }
        // stacked over areas the Monte Carlo noise averages out
        let stacked = (diff_sq / ref_sq).sqrt();
        assert!(stacked < 0.05, "stacked relative deviation {stacked:.3}");

        let coarse = bootstrap_mse(
            &ds,
            &fitted,
            &BootstrapConfig {
                replicates: 200,
                ..config
            },
        )
        .unwrap();
        let mut coarse_sq = 0.0;
        for (m, comp) in coarse.per_area.iter().zip(&analytic) {
            coarse_sq += (m - &comp.total()).norm_squared();
        }
        assert!(
            diff_sq < coarse_sq,
            "B=2000 should sit closer than B=200: {diff_sq:.3e} vs {coarse_sq:.3e}"
        );
    }

    #[test]
    fn cross_term_degenerate_cases_vanish() {
        let beta = DVector::from_vec(vec![1.0, 0.5, -0.5, 2.0]);
        let se = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);
        // Sigma_u = 0 forces Gamma = 0 and u = 0: the ideal predictor hits the
        // target exactly and every cross product is the zero matrix
        let su = DMatrix::zeros(2, 2);
        let ds = simulate_mner(65, &vec![6; 8], &[2, 2], &beta, &su, &se);
        let vc = VarianceComponents::new_unchecked(su, se.clone());
        let checks = mse_cross_term_check(&ds, &vc, &beta, 50, 9).unwrap();
        for est in checks.pooled_estimate.iter() {
            assert!(est.abs() < 1e-12, "expected exact zero, got {est:.3e}");
        }
        for check in &checks.per_area {
            for est in check.estimate.iter() {
                assert!(est.abs() < 1e-12, "expected exact zero, got {est:.3e}");
            }
        }

        // identical coefficients in both factors: the first factor vanishes
        let su = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]);
        let ds = simulate_mner(66, &vec![6; 8], &[2, 2], &beta, &su, &se);
        let vc = VarianceComponents::new(su, se).unwrap();
        let fitted = fit_reml(&ds, &RemlOptions::default()).unwrap();
        let fitted = survey_weighted_fit(&ds, &fitted).unwrap();
        let ideal = mpeblup(&ds, &fitted).unwrap();
        let again = mpeblup(&ds, &fitted).unwrap();
        for (a, b) in ideal.iter().zip(&again) {
            assert_eq!(a.mean.as_slice(), b.mean.as_slice());
        }
    }

    #[test]
    fn cross_term_centered_at_zero_with_equal_weights() {
        let beta = DVector::from_vec(vec![1.0, 0.5, -0.5, 2.0]);
        let su = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]);
        let se = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);
        let ds = simulate_mner(64, &vec![6; 10], &[2, 2], &beta, &su, &se);
        let vc = VarianceComponents::new(su, se).unwrap();
        let checks = mse_cross_term_check(&ds, &vc, &beta, 400, 5).unwrap();
        for (est, se_mc) in checks
            .pooled_estimate
            .iter()
            .zip(checks.pooled_std_error.iter())
        {
            assert!(
                est.abs() <= 3.0 * se_mc,
                "pooled estimate {est:.3e} vs se {se_mc:.3e}"
            );
        }
        for check in checks.per_area {
            for (est, se_mc) in check.estimate.iter().zip(check.std_error.iter()) {
                assert!(
                    est.abs() <= 3.0 * se_mc,
                    "area {}: estimate {est:.3e} vs se {se_mc:.3e}",
                    check.area_label
                );
            }
        }
    }
}
