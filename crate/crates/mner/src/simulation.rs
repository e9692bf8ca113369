//! Model-based simulation experiments over a synthetic finite population.
//!
//! The default design has 50 areas of 500 units each with two responses. Block
//! covariates are (intercept, x_r2) with x_12 ~ Gamma(shape 2, scale 5) and
//! x_22 ~ Gamma(shape 5 + 3d/D, scale 5) for 1-based area d. Samples are
//! SRSWOR within areas, sizes {5, 10, 15, 20, 25} over consecutive blocks of
//! areas, weights N_d / n_d. The covariate frame and the sample indices are
//! drawn once from the stream `(seed, [STREAM_DESIGN])` and held fixed;
//! replicate `l` draws (u, e) from `(seed, [STREAM_REPLICATE, l])` (retry path
//! appends 1), per area u first, then e for every population unit in order.
//!
//! Experiment A compares DIR, MFH, MYR, and UYR against the exact
//! finite-population means with relative bias and relative RMSE per area and
//! per sample-size group. Experiment B compares bootstrap MSE estimates,
//! averaged over outer replicates, against a true MSE estimated from an
//! independent reference run on the stream `(seed, [STREAM_TRUE_MSE, l])`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::data_model::{
    validate_dataset, AuxRecord, Dataset, EstimatorKind, UnitRecord, VarianceComponents,
};
use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, symmetrize};
use crate::predictors::{
    direct_estimator, mfh_eblup, mpeblup, survey_weighted_fit, univariate_peblup, DesignVariance,
};
use crate::reml::{fit_reml, RemlOptions};
use crate::rng::{stream, STREAM_DESIGN, STREAM_REPLICATE, STREAM_TRUE_MSE};
use crate::uncertainty::{bootstrap_mse, BootstrapConfig};

/// Synthetic population and sampling design.
#[derive(Debug, Clone)]
pub struct SimulationDesign {
    pub num_areas: usize,
    pub pop_per_area: usize,
    /// Per-area sample sizes, one entry per equally sized block of areas.
    pub group_sample_sizes: Vec<usize>,
    pub beta: DVector<f64>,
    pub components: VarianceComponents,
    pub seed: u64,
    /// Use the SRSWOR finite-population-correction design variance for DIR.
    pub use_fpc: bool,
}

impl Default for SimulationDesign {
    fn default() -> Self {
        let sigma_u = DMatrix::from_row_slice(2, 2, &[0.1, 0.16, 0.16, 0.4]);
        let sigma_e = DMatrix::from_row_slice(2, 2, &[0.9, 0.75, 0.75, 1.0]);
        SimulationDesign {
            num_areas: 50,
            pop_per_area: 500,
            group_sample_sizes: vec![5, 10, 15, 20, 25],
            beta: DVector::from_vec(vec![1.0, 1.0, 4.0, 0.5]),
            components: VarianceComponents::new(sigma_u, sigma_e)
                .expect("default components are positive definite"),
            seed: 0,
            use_fpc: false,
        }
    }
}

impl SimulationDesign {
    pub fn validate(&self) -> Result<()> {
        if self.group_sample_sizes.is_empty()
            || self.num_areas % self.group_sample_sizes.len() != 0
        {
            return Err(Error::Validation(format!(
                "{} areas cannot be split into {} equal sample-size groups",
                self.num_areas,
                self.group_sample_sizes.len()
            )));
        }
        if self.num_areas < 2 {
            return Err(Error::Validation("need at least 2 areas".into()));
        }
        for &n in &self.group_sample_sizes {
            if n < 2 || n > self.pop_per_area {
                return Err(Error::Validation(format!(
                    "sample size {n} outside [2, {}]",
                    self.pop_per_area
                )));
            }
        }
        if self.components.num_responses() != 2 {
            return Err(Error::Validation(
                "the synthetic design generates exactly 2 responses".into(),
            ));
        }
        if self.beta.len() != 4 {
            return Err(Error::Validation(
                "the synthetic design uses 4 coefficients (2 per block)".into(),
            ));
        }
        Ok(())
    }

    /// Sample size of area `d` (0-based).
    pub fn sample_size(&self, d: usize) -> usize {
        let block = self.num_areas / self.group_sample_sizes.len();
        self.group_sample_sizes[d / block]
    }
}

/// Fixed covariate frame and sample membership.
#[derive(Debug, Clone)]
pub struct PopulationFrame {
    /// Per area, per population unit: (x_12, x_22).
    covariates: Vec<Vec<(f64, f64)>>,
    /// Sorted sampled unit indices per area.
    sample_indices: Vec<Vec<usize>>,
    /// Exact population covariate means, R x p.
    xbar_pop: Vec<DMatrix<f64>>,
}

impl PopulationFrame {
    pub fn sample_indices(&self, d: usize) -> &[usize] {
        &self.sample_indices[d]
    }

    pub fn xbar_pop(&self, d: usize) -> &DMatrix<f64> {
        &self.xbar_pop[d]
    }
}

/// Draw the covariate frame and SRSWOR samples from `[STREAM_DESIGN]`.
pub fn build_frame(design: &SimulationDesign) -> Result<PopulationFrame> {
    design.validate()?;
    let mut rng = stream(design.seed, &[STREAM_DESIGN]);
    let d_total = design.num_areas as f64;
    let g1 = Gamma::new(2.0, 5.0).expect("fixed shape/scale");
    let mut covariates = Vec::with_capacity(design.num_areas);
    let mut sample_indices = Vec::with_capacity(design.num_areas);
    let mut xbar_pop = Vec::with_capacity(design.num_areas);
    for d in 0..design.num_areas {
        let shape = 5.0 + 3.0 * (d as f64 + 1.0) / d_total;
        let g2 = Gamma::new(shape, 5.0).expect("positive shape");
        let mut units = Vec::with_capacity(design.pop_per_area);
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        for _ in 0..design.pop_per_area {
            let x12 = g1.sample(&mut rng);
            let x22 = g2.sample(&mut rng);
            s1 += x12;
            s2 += x22;
            units.push((x12, x22));
        }
        let n_pop = design.pop_per_area as f64;
        xbar_pop.push(DMatrix::from_row_slice(
            2,
            4,
            &[1.0, s1 / n_pop, 0.0, 0.0, 0.0, 0.0, 1.0, s2 / n_pop],
        ));
        covariates.push(units);
        let n_d = design.sample_size(d);
        let mut idx =
            rand::seq::index::sample(&mut rng, design.pop_per_area, n_d).into_vec();
        idx.sort_unstable();
        sample_indices.push(idx);
    }
    Ok(PopulationFrame {
        covariates,
        sample_indices,
        xbar_pop,
    })
}

/// One replicate: the exact finite-population means and the sampled dataset.
#[derive(Debug, Clone)]
pub struct PopulationDraw {
    pub mu_true: Vec<DVector<f64>>,
    pub sample: Dataset,
}

/// Realize responses over the whole population and assemble the sample.
/// Draws, in area order: u_d, then e_di for every population unit.
pub fn generate_population(
    design: &SimulationDesign,
    frame: &PopulationFrame,
    rng: &mut ChaCha12Rng,
) -> Result<PopulationDraw> {
    let su_root = psd_sqrt(design.components.sigma_u());
    let se_root = psd_sqrt(design.components.sigma_e());
    let beta = &design.beta;
    let mut mu_true = Vec::with_capacity(design.num_areas);
    let mut units = Vec::new();
    let mut aux = Vec::with_capacity(design.num_areas);
    for d in 0..design.num_areas {
        let label = d as i64 + 1;
        let z = DVector::from_fn(2, |_, _| StandardNormal.sample(rng));
        let u_eff = &su_root * z;
        let n_d = design.sample_size(d);
        let weight = design.pop_per_area as f64 / n_d as f64;
        let mut sum_y = DVector::zeros(2);
        let sample = &frame.sample_indices[d];
        let mut next_sample = 0usize;
        for (i, &(x12, x22)) in frame.covariates[d].iter().enumerate() {
            let z = DVector::from_fn(2, |_, _| StandardNormal.sample(rng));
            let e_eff = &se_root * z;
            let y1 = beta[0] + beta[1] * x12 + u_eff[0] + e_eff[0];
            let y2 = beta[2] + beta[3] * x22 + u_eff[1] + e_eff[1];
            sum_y[0] += y1;
            sum_y[1] += y2;
            if next_sample < sample.len() && sample[next_sample] == i {
                next_sample += 1;
                units.push(UnitRecord {
                    area_label: label,
                    weight,
                    y: vec![y1, y2],
                    covariates: vec![vec![1.0, x12], vec![1.0, x22]],
                });
            }
        }
        mu_true.push(sum_y / design.pop_per_area as f64);
        let xb = &frame.xbar_pop[d];
        aux.push(AuxRecord {
            area_label: label,
            pop_size: design.pop_per_area as u64,
            xbar: vec![
                vec![xb[(0, 0)], xb[(0, 1)]],
                vec![xb[(1, 2)], xb[(1, 3)]],
            ],
        });
    }
    Ok(PopulationDraw {
        mu_true,
        sample: validate_dataset(&units, &aux)?,
    })
}

/// Relative bias and relative RMSE from accumulated sums, using the Monte
/// Carlo mean of the target as the denominator.
pub(crate) fn rb_rrmse(sum_err: f64, sum_sq_err: f64, sum_mu: f64, count: usize) -> (f64, f64) {
    let denom = sum_mu / count as f64;
    let rb = (sum_err / count as f64) / denom;
    let rrmse = (sum_sq_err / count as f64).sqrt() / denom;
    (rb, rrmse)
}

/// Per-area metrics of one estimator.
#[derive(Debug, Clone)]
pub struct AreaMetrics {
    pub area_label: i64,
    pub sample_size: usize,
    /// Replicates in which the estimator produced this area.
    pub count: usize,
    pub rb: Vec<f64>,
    pub rrmse: Vec<f64>,
}

/// Group-averaged metrics in percent.
#[derive(Debug, Clone)]
pub struct GroupMetrics {
    pub sample_size: usize,
    /// Average absolute relative bias per response, percent.
    pub arb_percent: Vec<f64>,
    /// Average relative RMSE per response, percent.
    pub rrmse_percent: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EstimatorMetrics {
    pub estimator: EstimatorKind,
    pub per_area: Vec<AreaMetrics>,
    pub by_group: Vec<GroupMetrics>,
}

#[derive(Debug, Clone)]
pub struct ExperimentA {
    pub estimators: Vec<EstimatorMetrics>,
    pub replicates_used: usize,
    pub replicates_failed: usize,
}

#[derive(Default, Clone)]
struct AreaAccumulator {
    count: usize,
    sum_err: [f64; 2],
    sum_sq_err: [f64; 2],
    sum_mu: [f64; 2],
}

/// Predictions of every estimator for one replicate, keyed by area label.
struct ReplicateOutputs {
    per_estimator: Vec<(EstimatorKind, BTreeMap<i64, DVector<f64>>)>,
    mu_true: Vec<DVector<f64>>,
}

fn run_estimators(
    design: &SimulationDesign,
    draw: &PopulationDraw,
) -> Result<ReplicateOutputs> {
    let ds = &draw.sample;
    let opts = RemlOptions {
        seed: design.seed,
        ..RemlOptions::default()
    };
    let variance = if design.use_fpc {
        DesignVariance::SrsworFpc
    } else {
        DesignVariance::WithReplacement
    };
    let dir = direct_estimator(ds, variance)?;
    // the area-level comparator always consumes the SRSWOR covariance with
    // finite-population correction, whatever DIR reports
    let dir_fpc = direct_estimator(ds, DesignVariance::SrsworFpc)?;
    let direct_cov: Vec<Option<DMatrix<f64>>> = dir_fpc.into_iter().map(|p| p.mse).collect();
    let mfh = mfh_eblup(ds, &direct_cov, &opts)?;
    let fitted = fit_reml(ds, &opts)?;
    let fitted = survey_weighted_fit(ds, &fitted)?;
    let myr = mpeblup(ds, &fitted)?;
    // univariate pipeline per response, reassembled into 2-vectors
    let uyr_parts: Vec<Vec<crate::data_model::AreaPrediction>> = (0..2)
        .map(|r| univariate_peblup(ds, r, &opts))
        .collect::<Result<_>>()?;
    let mut uyr = BTreeMap::new();
    for (d, area) in ds.areas().iter().enumerate() {
        uyr.insert(
            area.label,
            DVector::from_vec(vec![uyr_parts[0][d].mean[0], uyr_parts[1][d].mean[0]]),
        );
    }
    let to_map = |preds: &[crate::data_model::AreaPrediction]| {
        preds
            .iter()
            .map(|p| (p.area_label, p.mean.clone()))
            .collect::<BTreeMap<_, _>>()
    };
    Ok(ReplicateOutputs {
        per_estimator: vec![
            (EstimatorKind::Dir, to_map(&dir)),
            (EstimatorKind::Mfh, to_map(&mfh)),
            (EstimatorKind::Myr, to_map(&myr)),
            (EstimatorKind::Uyr, uyr),
        ],
        mu_true: draw.mu_true.clone(),
    })
}

fn replicate_outputs_with_retry(
    design: &SimulationDesign,
    frame: &PopulationFrame,
    l: usize,
    lead: u64,
) -> Option<ReplicateOutputs> {
    for attempt in 0..2u64 {
        let path: Vec<u64> = if attempt == 0 {
            vec![lead, l as u64]
        } else {
            vec![lead, l as u64, 1]
        };
        let mut rng = stream(design.seed, &path);
        let result = generate_population(design, frame, &mut rng)
            .and_then(|draw| run_estimators(design, &draw));
        if let Ok(out) = result {
            return Some(out);
        }
    }
    None
}

fn cap_failures(failed: usize, total: usize) -> Result<()> {
    if (failed as f64) > 0.05 * total as f64 {
        return Err(Error::ReplicateFailures {
            failed,
            total,
            cap_percent: 5.0,
        });
    }
    Ok(())
}

/// Repeated-sampling comparison of DIR, MFH, MYR, and UYR against the exact
/// finite-population means. A replicate that fails to fit is regenerated once
/// and dropped if it fails again; more than 5% drops abort.
pub fn run_experiment_a(design: &SimulationDesign, replicates: usize) -> Result<ExperimentA> {
    if replicates == 0 {
        return Err(Error::Validation("need at least 1 replicate".into()));
    }
    let frame = build_frame(design)?;
    let estimators = [
        EstimatorKind::Dir,
        EstimatorKind::Mfh,
        EstimatorKind::Myr,
        EstimatorKind::Uyr,
    ];
    let mut acc: Vec<Vec<AreaAccumulator>> =
        vec![vec![AreaAccumulator::default(); design.num_areas]; estimators.len()];
    let mut failed = 0usize;
    for l in 0..replicates {
        let Some(out) = replicate_outputs_with_retry(design, &frame, l, STREAM_REPLICATE)
        else {
            failed += 1;
            continue;
        };
        for (e, (_, preds)) in out.per_estimator.iter().enumerate() {
            for d in 0..design.num_areas {
                let label = d as i64 + 1;
                let Some(mean) = preds.get(&label) else { continue };
                let a = &mut acc[e][d];
                a.count += 1;
                for r in 0..2 {
                    let err = mean[r] - out.mu_true[d][r];
                    a.sum_err[r] += err;
                    a.sum_sq_err[r] += err * err;
                    a.sum_mu[r] += out.mu_true[d][r];
                }
            }
        }
    }
    cap_failures(failed, replicates)?;
    let block = design.num_areas / design.group_sample_sizes.len();
    let result = estimators
        .iter()
        .zip(acc)
        .map(|(&estimator, areas)| {
            let per_area: Vec<AreaMetrics> = areas
                .iter()
                .enumerate()
                .map(|(d, a)| {
                    let (mut rb, mut rrmse) = (Vec::new(), Vec::new());
                    for r in 0..2 {
                        if a.count == 0 {
                            rb.push(f64::NAN);
                            rrmse.push(f64::NAN);
                        } else {
                            let (b, m) =
                                rb_rrmse(a.sum_err[r], a.sum_sq_err[r], a.sum_mu[r], a.count);
                            rb.push(b);
                            rrmse.push(m);
                        }
                    }
                    AreaMetrics {
                        area_label: d as i64 + 1,
                        sample_size: design.sample_size(d),
                        count: a.count,
                        rb,
                        rrmse,
                    }
                })
                .collect();
            let by_group = design
                .group_sample_sizes
                .iter()
                .enumerate()
                .map(|(g, &n)| {
                    let members = &per_area[g * block..(g + 1) * block];
                    let mut arb = vec![0.0; 2];
                    let mut rrmse = vec![0.0; 2];
                    for m in members {
                        for r in 0..2 {
                            arb[r] += m.rb[r].abs() * 100.0 / block as f64;
                            rrmse[r] += m.rrmse[r] * 100.0 / block as f64;
                        }
                    }
                    GroupMetrics {
                        sample_size: n,
                        arb_percent: arb,
                        rrmse_percent: rrmse,
                    }
                })
                .collect();
            EstimatorMetrics {
                estimator,
                per_area,
                by_group,
            }
        })
        .collect();
    Ok(ExperimentA {
        estimators: result,
        replicates_used: replicates - failed,
        replicates_failed: failed,
    })
}

/// Reference Monte Carlo estimate of the true MSE matrices of the
/// survey-weighted pseudo-EBLUP, on the dedicated `[STREAM_TRUE_MSE, l]`
/// streams.
pub fn estimate_true_mse(
    design: &SimulationDesign,
    replicates: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if replicates == 0 {
        return Err(Error::Validation("need at least 1 replicate".into()));
    }
    let frame = build_frame(design)?;
    let opts = RemlOptions {
        seed: design.seed,
        ..RemlOptions::default()
    };
    let mut acc = vec![DMatrix::<f64>::zeros(2, 2); design.num_areas];
    let mut used = 0usize;
    let mut failed = 0usize;
    'replicate: for l in 0..replicates {
        for attempt in 0..2u64 {
            let path: Vec<u64> = if attempt == 0 {
                vec![STREAM_TRUE_MSE, l as u64]
            } else {
                vec![STREAM_TRUE_MSE, l as u64, 1]
            };
            let mut rng = stream(design.seed, &path);
            let result = generate_population(design, &frame, &mut rng).and_then(|draw| {
                let fitted = fit_reml(&draw.sample, &opts)?;
                let fitted = survey_weighted_fit(&draw.sample, &fitted)?;
                let preds = mpeblup(&draw.sample, &fitted)?;
                Ok((draw, preds))
            });
            if let Ok((draw, preds)) = result {
                for d in 0..design.num_areas {
                    let err = &preds[d].mean - &draw.mu_true[d];
                    acc[d] += &err * err.transpose();
                }
                used += 1;
                continue 'replicate;
            }
        }
        failed += 1;
    }
    cap_failures(failed, replicates)?;
    Ok(acc
        .into_iter()
        .map(|m| symmetrize(&(m / used as f64)))
        .collect())
}

/// Per-area comparison of the bootstrap MSE estimator with the true MSE.
#[derive(Debug, Clone)]
pub struct AreaMseTracking {
    pub area_label: i64,
    pub sample_size: usize,
    pub true_mse: DMatrix<f64>,
    pub mean_bootstrap: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentB {
    pub per_area: Vec<AreaMseTracking>,
    pub replicates_used: usize,
    pub replicates_failed: usize,
}

/// Outer replicates refit the model and run a nested parametric bootstrap
/// (streams `[STREAM_BOOTSTRAP, l, b]`); the averaged bootstrap MSE matrices
/// are reported next to `true_mse` (from [`estimate_true_mse`]).
pub fn run_experiment_b(
    design: &SimulationDesign,
    outer_replicates: usize,
    bootstrap_replicates: usize,
    workers: usize,
    true_mse: &[DMatrix<f64>],
) -> Result<ExperimentB> {
    if outer_replicates == 0 || bootstrap_replicates == 0 {
        return Err(Error::Validation("need at least 1 replicate".into()));
    }
    if true_mse.len() != design.num_areas {
        return Err(Error::Validation(format!(
            "{} true MSE matrices for {} areas",
            true_mse.len(),
            design.num_areas
        )));
    }
    let frame = build_frame(design)?;
    let opts = RemlOptions {
        seed: design.seed,
        ..RemlOptions::default()
    };
    let mut acc = vec![DMatrix::<f64>::zeros(2, 2); design.num_areas];
    let mut used = 0usize;
    let mut failed = 0usize;
    'outer: for l in 0..outer_replicates {
        for attempt in 0..2u64 {
            let path: Vec<u64> = if attempt == 0 {
                vec![STREAM_REPLICATE, l as u64]
            } else {
                vec![STREAM_REPLICATE, l as u64, 1]
            };
            let mut rng = stream(design.seed, &path);
            let result = generate_population(design, &frame, &mut rng).and_then(|draw| {
                let fitted = fit_reml(&draw.sample, &opts)?;
                let fitted = survey_weighted_fit(&draw.sample, &fitted)?;
                let config = BootstrapConfig {
                    replicates: bootstrap_replicates,
                    seed: design.seed,
                    workers,
                    refit_theta: true,
                    stream_prefix: vec![l as u64],
                };
                bootstrap_mse(&draw.sample, &fitted, &config)
            });
            if let Ok(boot) = result {
                for (a, m) in acc.iter_mut().zip(&boot.per_area) {
                    *a += m;
                }
                used += 1;
                continue 'outer;
            }
        }
        failed += 1;
    }
    cap_failures(failed, outer_replicates)?;
    let per_area = (0..design.num_areas)
        .map(|d| AreaMseTracking {
            area_label: d as i64 + 1,
            sample_size: design.sample_size(d),
            true_mse: true_mse[d].clone(),
            mean_bootstrap: symmetrize(&(&acc[d] / used as f64)),
        })
        .collect();
    Ok(ExperimentB {
        per_area,
        replicates_used: used,
        replicates_failed: failed,
    })
}
