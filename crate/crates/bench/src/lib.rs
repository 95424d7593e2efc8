//! Deterministic fixtures shared by the benchmarks.

use nites_core::patchio::{random_crops, ExemplarPatchSet};
use nites_core::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Checkerboard with per-pixel noise, `side × side`.
pub fn textured_image(side: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(side, side, |x, y| {
        let on = (x / 8 + y / 8) % 2 == 0;
        let base = if on { [0.75, 0.55, 0.3] } else { [0.25, 0.35, 0.55] };
        base.map(|b| (b + 0.1 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0))
    })
    .expect("valid image size")
}

pub fn patch_set(count: usize, side: usize, seed: u64) -> ExemplarPatchSet {
    random_crops(&textured_image(128, seed), side, count, seed).expect("patches fit the image")
}

/// `len` uniform values in `[0, 1)`.
pub fn uniform(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random()).collect()
}
