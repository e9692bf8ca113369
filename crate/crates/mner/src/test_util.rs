//! Shared generators for unit tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data_model::{validate_dataset, AuxRecord, Dataset, UnitRecord, VarianceComponents};
use crate::linalg::psd_sqrt;

pub(crate) fn random_dataset(
    seed: u64,
    num_areas: usize,
    r_dim: usize,
    sizes: &[usize],
) -> Dataset {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut units = Vec::new();
    let mut aux = Vec::new();
    for d in 0..num_areas {
        let n = rng.gen_range(2..8usize);
        for _ in 0..n {
            units.push(UnitRecord {
                area_label: d as i64 + 1,
                weight: rng.gen_range(1.0..10.0),
                y: (0..r_dim).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                covariates: sizes
                    .iter()
                    .map(|&p| {
                        let mut row = vec![1.0];
                        row.extend((1..p).map(|_| rng.gen_range(-2.0..2.0)));
                        row
                    })
                    .collect(),
            });
        }
        aux.push(AuxRecord {
            area_label: d as i64 + 1,
            pop_size: (n + rng.gen_range(5..20)) as u64,
            xbar: sizes
                .iter()
                .map(|&p| {
                    let mut row = vec![1.0];
                    row.extend((1..p).map(|_| rng.gen_range(-2.0..2.0)));
                    row
                })
                .collect(),
        });
    }
    validate_dataset(&units, &aux).unwrap()
}

pub(crate) fn random_vc(seed: u64, r_dim: usize) -> VarianceComponents {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(r_dim, r_dim, |_, _| rng.gen_range(-0.6..0.6));
    let su = &a * a.transpose() + DMatrix::identity(r_dim, r_dim) * 0.2;
    let b = DMatrix::from_fn(r_dim, r_dim, |_, _| rng.gen_range(-0.8..0.8));
    let se = &b * b.transpose() + DMatrix::identity(r_dim, r_dim) * 0.4;
    VarianceComponents::new(su, se).unwrap()
}

/// Simulate one sample from the nested-error model. Covariate blocks start
/// with an intercept followed by standard normal draws; weights are N_d / n_d
/// with N_d = 10 n_d; auxiliary means are (1, 0, ..) per block.
pub(crate) fn simulate_mner(
    seed: u64,
    n_per_area: &[usize],
    block_sizes: &[usize],
    beta: &DVector<f64>,
    sigma_u: &DMatrix<f64>,
    sigma_e: &DMatrix<f64>,
) -> Dataset {
    let r_dim = sigma_e.nrows();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let su_root = psd_sqrt(sigma_u);
    let se_root = psd_sqrt(sigma_e);
    let draw = |rng: &mut ChaCha12Rng, root: &DMatrix<f64>| -> DVector<f64> {
        let z = DVector::from_fn(r_dim, |_, _| StandardNormal.sample(rng));
        root * z
    };
    let offsets: Vec<usize> = block_sizes
        .iter()
        .scan(0usize, |acc, &p| {
            let o = *acc;
            *acc += p;
            Some(o)
        })
        .collect();
    let mut units = Vec::new();
    let mut aux = Vec::new();
    for (d, &n) in n_per_area.iter().enumerate() {
        let u = draw(&mut rng, &su_root);
        for _ in 0..n {
            let covariates: Vec<Vec<f64>> = block_sizes
                .iter()
                .map(|&p| {
                    let mut row = vec![1.0];
                    row.extend((1..p).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
                    row
                })
                .collect();
            let e = draw(&mut rng, &se_root);
            let y: Vec<f64> = (0..r_dim)
                .map(|r| {
                    let mut v = u[r] + e[r];
                    for j in 0..block_sizes[r] {
                        v += covariates[r][j] * beta[offsets[r] + j];
                    }
                    v
                })
                .collect();
            units.push(UnitRecord {
                area_label: d as i64 + 1,
                weight: 10.0,
                y,
                covariates,
            });
        }
        aux.push(AuxRecord {
            area_label: d as i64 + 1,
            pop_size: 10 * n as u64,
            xbar: block_sizes
                .iter()
                .map(|&p| {
                    let mut row = vec![1.0];
                    row.extend(std::iter::repeat(0.0).take(p - 1));
                    row
                })
                .collect(),
        });
    }
    validate_dataset(&units, &aux).unwrap()
}
