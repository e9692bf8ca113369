//! Data generators and independently coded oracles for the acceptance tests.
//!
//! Everything here recomputes its target through a different algorithmic
//! route than the library: dense inverses instead of factored solves, profile
//! golden-section search instead of quasi-Newton REML, scalar formulas
//! instead of blocked ones.

use mner::data_model::validate_dataset;
use mner::{AuxRecord, Dataset, UnitRecord, VarianceComponents};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

/// Covariate law for [`model_dataset`].
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Covariates {
    Normal,
    /// Uniform(-0.5, 0.5); keeps calibrated weights positive.
    Bounded,
}

/// Draw raw records from the nested-error model. Each covariate block starts
/// with an intercept; weights are 10 with population size 10 n_d, so the
/// weight totals equal the population sizes; auxiliary means are (1, 0, ..).
pub fn model_records(
    seed: u64,
    n_per_area: &[usize],
    block_sizes: &[usize],
    beta: &DVector<f64>,
    sigma_u: &DMatrix<f64>,
    sigma_e: &DMatrix<f64>,
    covariates: Covariates,
) -> (Vec<UnitRecord>, Vec<AuxRecord>) {
    let r_dim = sigma_e.nrows();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let lu = Cholesky::new(sigma_u.clone())
        .expect("sigma_u positive definite")
        .l();
    let le = Cholesky::new(sigma_e.clone())
        .expect("sigma_e positive definite")
        .l();
    let uniform = Uniform::new(-0.5, 0.5);
    let draw = |l: &DMatrix<f64>, rng: &mut ChaCha12Rng| -> DVector<f64> {
        l * DVector::from_fn(r_dim, |_, _| StandardNormal.sample(rng))
    };
    let mut units = Vec::new();
    let mut aux = Vec::new();
    for (d, &n) in n_per_area.iter().enumerate() {
        let label = d as i64 + 1;
        let u = draw(&lu, &mut rng);
        for _ in 0..n {
            let covs: Vec<Vec<f64>> = block_sizes
                .iter()
                .map(|&p| {
                    let mut c = vec![1.0];
                    for _ in 1..p {
                        c.push(match covariates {
                            Covariates::Normal => StandardNormal.sample(&mut rng),
                            Covariates::Bounded => uniform.sample(&mut rng),
                        });
                    }
                    c
                })
                .collect();
            let e = draw(&le, &mut rng);
            let mut y = vec![0.0; r_dim];
            let mut off = 0;
            for (r, &p) in block_sizes.iter().enumerate() {
                let mut m = 0.0;
                for j in 0..p {
                    m += covs[r][j] * beta[off + j];
                }
                off += p;
                y[r] = m + u[r] + e[r];
            }
            units.push(UnitRecord {
                area_label: label,
                weight: 10.0,
                y,
                covariates: covs,
            });
        }
        aux.push(AuxRecord {
            area_label: label,
            pop_size: (10 * n) as u64,
            xbar: block_sizes
                .iter()
                .map(|&p| {
                    let mut v = vec![1.0];
                    v.resize(p, 0.0);
                    v
                })
                .collect(),
        });
    }
    (units, aux)
}

/// [`model_records`] validated into a dataset handle.
pub fn model_dataset(
    seed: u64,
    n_per_area: &[usize],
    block_sizes: &[usize],
    beta: &DVector<f64>,
    sigma_u: &DMatrix<f64>,
    sigma_e: &DMatrix<f64>,
    covariates: Covariates,
) -> Dataset {
    let (units, aux) = model_records(
        seed,
        n_per_area,
        block_sizes,
        beta,
        sigma_u,
        sigma_e,
        covariates,
    );
    validate_dataset(&units, &aux).expect("generator produces a valid dataset")
}

/// Random symmetric positive definite matrix `A A^T + ridge I`.
pub fn random_spd(rng: &mut ChaCha12Rng, dim: usize, ridge: f64) -> DMatrix<f64> {
    let a: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    &a * a.transpose() + DMatrix::<f64>::identity(dim, dim) * ridge
}

/// Same dataset with fresh weights drawn from Uniform(0.5, 8).
pub fn randomize_weights(ds: &Dataset, rng: &mut ChaCha12Rng) -> Dataset {
    let law = Uniform::new(0.5, 8.0);
    let weights: Vec<Vec<f64>> = ds
        .areas()
        .iter()
        .map(|a| a.units.iter().map(|_| law.sample(rng)).collect())
        .collect();
    ds.with_weights(&weights).expect("positive weights")
}

/// Generalized least squares through a dense per-area covariance inverse.
pub fn dense_gls_beta(ds: &Dataset, vc: &VarianceComponents) -> DVector<f64> {
    let p = ds.num_coefficients();
    let r = ds.num_responses();
    let mut normal = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for area in ds.areas() {
        let n = area.units.len();
        let dim = n * r;
        let mut v = DMatrix::<f64>::zeros(dim, dim);
        let mut x = DMatrix::<f64>::zeros(dim, p);
        let mut y = DVector::<f64>::zeros(dim);
        for i in 0..n {
            for j in 0..n {
                let block = if i == j {
                    vc.sigma_u() + vc.sigma_e()
                } else {
                    vc.sigma_u().clone()
                };
                v.view_mut((i * r, j * r), (r, r)).copy_from(&block);
            }
            x.view_mut((i * r, 0), (r, p))
                .copy_from(&ds.x_matrix(&area.units[i]));
            y.rows_mut(i * r, r).copy_from(&area.units[i].y);
        }
        let vinv = v.try_inverse().expect("area covariance invertible");
        normal += x.transpose() * &vinv * &x;
        rhs += x.transpose() * &vinv * &y;
    }
    normal.lu().solve(&rhs).expect("normal equations solvable")
}

/// Conditional mean of the area mean vector given the weighted sample mean,
/// from the explicit joint normal covariance and a dense inverse.
pub fn conditional_mean_oracle(
    vc: &VarianceComponents,
    k2: f64,
    xbar_pop_beta: &DVector<f64>,
    xbar_w_beta: &DVector<f64>,
    ybar_w: &DVector<f64>,
) -> DVector<f64> {
    let r = vc.num_responses();
    let mut joint = DMatrix::<f64>::zeros(2 * r, 2 * r);
    joint.view_mut((0, 0), (r, r)).copy_from(vc.sigma_u());
    joint.view_mut((0, r), (r, r)).copy_from(vc.sigma_u());
    joint.view_mut((r, 0), (r, r)).copy_from(vc.sigma_u());
    joint
        .view_mut((r, r), (r, r))
        .copy_from(&(vc.sigma_u() + vc.sigma_e() * k2));
    let c12 = joint.view((0, r), (r, r)).into_owned();
    let c22 = joint.view((r, r), (r, r)).into_owned();
    let c22_inv = c22.try_inverse().expect("observation covariance invertible");
    xbar_pop_beta + c12 * c22_inv * (ybar_w - xbar_w_beta)
}

/// Scalar-response pipeline coded from the single-response formulas.
pub mod uni {
    use super::*;

    /// One response extracted from an R=1 dataset: `y[d][i]`, `x[d][i]`
    /// (length p, intercept first), `w[d][i]`, and population means per area.
    pub struct UniData {
        pub y: Vec<Vec<f64>>,
        pub x: Vec<Vec<Vec<f64>>>,
        pub w: Vec<Vec<f64>>,
        pub xbar_pop: Vec<Vec<f64>>,
        pub p: usize,
    }

    impl UniData {
        pub fn from_dataset(ds: &Dataset) -> UniData {
            assert_eq!(ds.num_responses(), 1);
            let p = ds.num_coefficients();
            let mut y = Vec::new();
            let mut x = Vec::new();
            let mut w = Vec::new();
            let mut xbar_pop = Vec::new();
            for area in ds.areas() {
                y.push(area.units.iter().map(|u| u.y[0]).collect());
                x.push(
                    area.units
                        .iter()
                        .map(|u| u.x_rows[0].iter().copied().collect())
                        .collect(),
                );
                w.push(area.units.iter().map(|u| u.weight).collect());
                xbar_pop.push((0..p).map(|j| area.xbar_pop[(0, j)]).collect());
            }
            UniData {
                y,
                x,
                w,
                xbar_pop,
                p,
            }
        }
    }

    pub struct UniFit {
        pub sigma_u2: f64,
        pub sigma_e2: f64,
    }

    /// Profile restricted likelihood at variance ratio rho = su2 / se2;
    /// returns (criterion, implied se2).
    fn profile(data: &UniData, rho: f64) -> (f64, f64) {
        let p = data.p;
        let mut logdet_w = 0.0;
        let mut k = DMatrix::<f64>::zeros(p, p);
        let mut b = DVector::<f64>::zeros(p);
        let mut q = 0.0;
        let mut total = 0usize;
        for d in 0..data.y.len() {
            let n = data.y[d].len();
            total += n;
            let c = rho / (1.0 + n as f64 * rho);
            logdet_w += (1.0 + n as f64 * rho).ln();
            let mut sx = DVector::<f64>::zeros(p);
            let mut sy = 0.0;
            for i in 0..n {
                let xi = DVector::from_row_slice(&data.x[d][i]);
                let yi = data.y[d][i];
                k += &xi * xi.transpose();
                b += &xi * yi;
                q += yi * yi;
                sx += xi;
                sy += yi;
            }
            k -= &sx * sx.transpose() * c;
            b -= &sx * (sy * c);
            q -= sy * sy * c;
        }
        let kinv_b = k.clone().lu().solve(&b).expect("profile normal equations");
        let s = q - b.dot(&kinv_b);
        let df = (total - p) as f64;
        let se2 = s / df;
        let logdet_k = k.determinant().ln();
        let crit = -0.5
            * (df * se2.ln()
                + logdet_w
                + logdet_k
                + df
                + df * (2.0 * std::f64::consts::PI).ln());
        (crit, se2)
    }

    /// Coarse grid over log rho followed by golden-section refinement.
    pub fn reml(data: &UniData) -> UniFit {
        let grid: Vec<f64> = (0..240).map(|i| -14.0 + 19.0 * i as f64 / 239.0).collect();
        let mut best = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        for (i, &t) in grid.iter().enumerate() {
            let (v, _) = profile(data, t.exp());
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        let mut lo = grid[best.saturating_sub(2)];
        let mut hi = grid[(best + 2).min(grid.len() - 1)];
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut t1 = hi - phi * (hi - lo);
        let mut t2 = lo + phi * (hi - lo);
        let mut f1 = profile(data, t1.exp()).0;
        let mut f2 = profile(data, t2.exp()).0;
        for _ in 0..200 {
            if f1 < f2 {
                lo = t1;
                t1 = t2;
                f1 = f2;
                t2 = lo + phi * (hi - lo);
                f2 = profile(data, t2.exp()).0;
            } else {
                hi = t2;
                t2 = t1;
                f2 = f1;
                t1 = hi - phi * (hi - lo);
                f1 = profile(data, t1.exp()).0;
            }
            if hi - lo < 1e-13 {
                break;
            }
        }
        let t = 0.5 * (lo + hi);
        let (_, se2) = profile(data, t.exp());
        UniFit {
            sigma_u2: t.exp() * se2,
            sigma_e2: se2,
        }
    }

    fn weighted_means(data: &UniData, d: usize) -> (f64, DVector<f64>, f64) {
        let p = data.p;
        let mut wsum = 0.0;
        let mut ybar = 0.0;
        let mut xbar = DVector::<f64>::zeros(p);
        let mut w2 = 0.0;
        for i in 0..data.y[d].len() {
            let w = data.w[d][i];
            wsum += w;
            w2 += w * w;
            ybar += w * data.y[d][i];
            xbar += DVector::from_row_slice(&data.x[d][i]) * w;
        }
        (ybar / wsum, xbar / wsum, w2 / (wsum * wsum))
    }

    /// Survey-weighted coefficients from the scalar estimating equation.
    pub fn beta_w(data: &UniData, su2: f64, se2: f64) -> DVector<f64> {
        let p = data.p;
        let mut m = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        for d in 0..data.y.len() {
            let (_, xbar_w, k2) = weighted_means(data, d);
            let gamma = su2 / (su2 + k2 * se2);
            for i in 0..data.y[d].len() {
                let xi = DVector::from_row_slice(&data.x[d][i]);
                let adj = &xi - &xbar_w * gamma;
                m += data.w[d][i] * &xi * adj.transpose();
                rhs += adj * (data.w[d][i] * data.y[d][i]);
            }
        }
        m.lu().solve(&rhs).expect("estimating equation solvable")
    }

    /// Scalar pseudo-EBLUP of each area mean.
    pub fn pseudo_eblup(data: &UniData, su2: f64, se2: f64, beta: &DVector<f64>) -> Vec<f64> {
        (0..data.y.len())
            .map(|d| {
                let (ybar_w, xbar_w, k2) = weighted_means(data, d);
                let gamma = su2 / (su2 + k2 * se2);
                let xbar = DVector::from_row_slice(&data.xbar_pop[d]);
                gamma * (ybar_w + (&xbar - &xbar_w).dot(beta)) + (1.0 - gamma) * xbar.dot(beta)
            })
            .collect()
    }
}

/// Closed-form variance components and restricted criterion for the balanced
/// intercept-only single-response model.
pub struct BalancedAnova {
    pub sigma_u2: f64,
    pub sigma_e2: f64,
    pub criterion: f64,
}

pub fn balanced_anova(y: &[Vec<f64>]) -> BalancedAnova {
    let d_num = y.len();
    let n = y[0].len();
    assert!(y.iter().all(|g| g.len() == n), "balanced design required");
    let total = (d_num * n) as f64;
    let grand: f64 = y.iter().flatten().sum::<f64>() / total;
    let means: Vec<f64> = y.iter().map(|g| g.iter().sum::<f64>() / n as f64).collect();
    let ssw: f64 = y
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let ssb: f64 = means.iter().map(|m| n as f64 * (m - grand).powi(2)).sum();
    let msw = ssw / ((d_num * (n - 1)) as f64);
    let msb = ssb / ((d_num - 1) as f64);
    let sigma_e2 = msw;
    let sigma_u2 = ((msb - msw) / n as f64).max(0.0);
    // restricted criterion at the estimates, intercept profiled out
    let lam = sigma_e2 + n as f64 * sigma_u2;
    let logdet_v = d_num as f64 * ((n - 1) as f64 * sigma_e2.ln() + lam.ln());
    let logdet_k = (total / lam).ln();
    let quad = ssw / sigma_e2 + ssb / lam;
    let df = total - 1.0;
    let criterion =
        -0.5 * (logdet_v + logdet_k + quad) - df / 2.0 * (2.0 * std::f64::consts::PI).ln();
    BalancedAnova {
        sigma_u2,
        sigma_e2,
        criterion,
    }
}
