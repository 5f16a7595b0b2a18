//! Two-Gaussian-blob benchmark data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct BlobParams {
    pub n: usize,
    pub dim: usize,
    /// Class means sit at `+separation` and `-separation` on every feature.
    pub separation: f64,
    pub seed: u64,
}

impl BlobParams {
    pub const fn benchmark(n: usize, seed: u64) -> Self {
        BlobParams {
            n,
            dim: 10,
            separation: 0.7,
            seed,
        }
    }
}

/// Labels are +1 or -1 with equal probability; each feature is drawn from
/// `N(y * separation, 1)`.
pub fn gaussian_blobs(params: &BlobParams) -> Result<Rows> {
    let unit = Normal::new(0.0, 1.0).map_err(|e| Error::domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    Ok((0..params.n)
        .map(|_| {
            let y: i8 = if rng.random::<bool>() { 1 } else { -1 };
            let x = (0..params.dim)
                .map(|_| (f64::from(y) * params.separation + unit.sample(&mut rng)) as f32)
                .collect();
            (x, y)
        })
        .collect())
}

pub type Rows = Vec<(Vec<f32>, i8)>;

/// Train and test sets drawn from one stream so they never overlap.
pub fn blob_benchmark(train: usize, test: usize, seed: u64) -> Result<(Rows, Rows)> {
    let mut all = gaussian_blobs(&BlobParams::benchmark(train + test, seed))?;
    let test_rows = all.split_off(train);
    Ok((all, test_rows))
}
