//! Symmetric fixed-point FastICA with the log-cosh contrast.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Result};
use crate::linalg::symmetric_decorrelation;

pub const MAX_ITERATIONS: usize = 200;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct IcaFit {
    /// Orthogonal `r × r` unmixing matrix; rows are independent directions.
    pub unmixing: DMatrix<f64>,
    pub iterations: usize,
    /// `false` when the iteration cap was hit; the last iterate is returned.
    pub converged: bool,
}

/// Runs FastICA on white data laid out as `r × m` (components by samples).
pub fn fastica(whitened: &DMatrix<f64>, seed: u64) -> Result<IcaFit> {
    let (r, m) = whitened.shape();
    ensure!(m >= 2 || r == 0, Argument, "FastICA needs at least 2 samples");
    if r == 0 {
        return Ok(IcaFit {
            unmixing: DMatrix::zeros(0, 0),
            iterations: 0,
            converged: true,
        });
    }
    if r == 1 {
        return Ok(IcaFit {
            unmixing: DMatrix::from_element(1, 1, 1.0),
            iterations: 0,
            converged: true,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = DMatrix::from_fn(r, r, |_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&init);
    let inv_m = 1.0 / m as f64;
    let transposed = whitened.transpose();

    for iteration in 1..=MAX_ITERATIONS {
        let mut g = &w * whitened;
        let mut mean_dg = vec![0.0; r];
        for (i, row_mean) in mean_dg.iter_mut().enumerate() {
            let mut acc = 0.0;
            for v in g.row_mut(i).iter_mut() {
                let t = v.tanh();
                *v = t;
                acc += 1.0 - t * t;
            }
            *row_mean = acc * inv_m;
        }
        let mut next = (g * &transposed) * inv_m;
        for (i, &dg) in mean_dg.iter().enumerate() {
            let scaled = w.row(i) * dg;
            let mut row = next.row_mut(i);
            row -= scaled;
        }
        let next = symmetric_decorrelation(&next);
        let lim = next
            .row_iter()
            .zip(w.row_iter())
            .map(|(a, b)| (a.dot(&b).abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = next;
        if lim < TOLERANCE {
            return Ok(IcaFit {
                unmixing: w,
                iterations: iteration,
                converged: true,
            });
        }
    }
    log::warn!("FastICA did not converge in {MAX_ITERATIONS} iterations (r = {r}); using last iterate");
    Ok(IcaFit {
        unmixing: w,
        iterations: MAX_ITERATIONS,
        converged: false,
    })
}
