//! Synthetic regression problems with a known channel support.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use entroprune::{ConvGeometry, RegressionDataset};

pub struct Planted {
    pub data: RegressionDataset,
    /// Ascending channel indices that generate `Y`.
    pub support: Vec<usize>,
}

/// Lifted data for `d` channels of `k × k` taps where only `s` channels
/// contribute: `X ~ N(0, x_std²)`, kernels `~ N(0, 1)`, additive noise `σ`.
pub fn planted(seed: u64, d: usize, s: usize, k: usize, m: usize, t: usize, x_std: f64, sigma: f64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taps = k * k;
    let mut support = index::sample(&mut rng, d, s).into_vec();
    support.sort_unstable();
    let xn = Normal::new(0.0, x_std).unwrap();
    let qn = Normal::new(0.0, 1.0).unwrap();
    let x = DMatrix::from_fn(d * taps, t, |_, _| xn.sample(&mut rng));
    let mut q = DMatrix::zeros(m, d * taps);
    for &c in &support {
        for f in c * taps..(c + 1) * taps {
            for i in 0..m {
                q[(i, f)] = qn.sample(&mut rng);
            }
        }
    }
    let mut y = &q * &x;
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).unwrap();
        y.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let g = ConvGeometry::new(k, 1, 0, d, m).unwrap();
    let origin = (0..t).map(|i| (i, 0, 0)).collect();
    Planted {
        data: RegressionDataset::new("planted", g, x, y, origin).unwrap(),
        support,
    }
}

/// Standard normal matrix.
pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    DMatrix::from_fn(rows, cols, |_, _| n.sample(rng))
}
