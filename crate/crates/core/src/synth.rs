//! Seeded synthetic layers and calibration data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::feedback::LayerRecord;
use crate::linalg::DenseMatrix;

/// Projection names of one transformer block, attention then feed-forward.
pub const BLOCK_PROJECTIONS: [&str; 7] = ["Q", "K", "V", "O", "Down", "Gate", "Up"];

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// `W ~ N(0, 1/in_dim)` (`out_dim × in_dim`) and `n_samples` standard normal
/// calibration rows.
pub fn gaussian_layer(name: &str, out_dim: usize, in_dim: usize, n_samples: usize, seed: u64) -> LayerRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gaussian(out_dim, in_dim, 1.0 / (in_dim as f64).sqrt(), &mut rng);
    let x = gaussian(n_samples, in_dim, 1.0, &mut rng);
    LayerRecord { name: name.to_string(), w, x }
}

/// Seven projections of a toy block with hidden size `hidden` and
/// feed-forward size `ffn`, `n_samples` calibration rows each.
pub fn toy_block(hidden: usize, ffn: usize, n_samples: usize, seed: u64) -> Vec<LayerRecord> {
    BLOCK_PROJECTIONS
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let (out_dim, in_dim) = match *name {
                "Down" => (hidden, ffn),
                "Gate" | "Up" => (ffn, hidden),
                _ => (hidden, hidden),
            };
            gaussian_layer(name, out_dim, in_dim, n_samples, seed.wrapping_add(i as u64))
        })
        .collect()
}
