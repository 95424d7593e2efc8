//! Empirical quantile tables for histogram matching, and their vector
//! quantization into a shared codebook.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kmeans::kmeans;
use crate::error::{ensure, Result};

/// Quantiles of one marginal on a uniform probability grid of `bins` points.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfTable {
    quantiles: Vec<f64>,
}

/// Linear interpolation into sorted `points` at fractional position
/// `p · (len − 1)`.
fn interpolate(points: &[f64], p: f64) -> f64 {
    let pos = p.clamp(0.0, 1.0) * (points.len() - 1) as f64;
    let lo = (pos.floor() as usize).min(points.len() - 1);
    let hi = (lo + 1).min(points.len() - 1);
    let frac = pos - lo as f64;
    points[lo] + frac * (points[hi] - points[lo])
}

pub fn build_cdf(values: &[f64], bins: usize) -> Result<CdfTable> {
    ensure!(values.len() >= 2, Argument, "CDF table needs at least 2 values, got {}", values.len());
    ensure!(bins >= 2, Argument, "CDF table needs at least 2 bins, got {bins}");
    ensure!(values.iter().all(|v| v.is_finite()), Argument, "CDF table values must be finite");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantiles = (0..bins)
        .map(|k| interpolate(&sorted, k as f64 / (bins - 1) as f64))
        .collect();
    Ok(CdfTable { quantiles })
}

impl CdfTable {
    pub fn from_quantiles(quantiles: Vec<f64>) -> Result<Self> {
        ensure!(quantiles.len() >= 2, Argument, "CDF table needs at least 2 bins");
        ensure!(
            quantiles.windows(2).all(|w| w[0] <= w[1]),
            Argument,
            "CDF table quantiles must be nondecreasing"
        );
        Ok(Self { quantiles })
    }

    pub fn bins(&self) -> usize {
        self.quantiles.len()
    }

    pub fn quantiles(&self) -> &[f64] {
        &self.quantiles
    }

    pub fn support(&self) -> (f64, f64) {
        (self.quantiles[0], *self.quantiles.last().unwrap())
    }

    /// Inverse CDF at probability `u`, interpolating linearly between bins.
    pub fn inverse(&self, u: f64) -> f64 {
        interpolate(&self.quantiles, u)
    }
}

/// Shared codebook of quantized tables.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfCodebook {
    pub codewords: Vec<CdfTable>,
    /// Codeword index per input table.
    pub codes: Vec<usize>,
    /// Mean over tables of the summed squared quantile error.
    pub distortion: f64,
}

impl CdfCodebook {
    pub fn decode(&self, table: usize) -> &CdfTable {
        &self.codewords[self.codes[table]]
    }
}

/// K-means VQ over table quantile vectors. Codewords are sorted after
/// averaging so they stay monotone. A codebook at least as large as the
/// table count is the identity.
pub fn quantize_cdfs(tables: &[CdfTable], codebook_size: usize, seed: u64) -> Result<CdfCodebook> {
    ensure!(!tables.is_empty(), Argument, "no CDF tables to quantize");
    ensure!(codebook_size >= 1, Argument, "codebook size must be at least 1");
    let bins = tables[0].bins();
    ensure!(
        tables.iter().all(|t| t.bins() == bins),
        Argument,
        "all CDF tables must share one bin count"
    );
    if codebook_size >= tables.len() {
        return Ok(CdfCodebook {
            codewords: tables.to_vec(),
            codes: (0..tables.len()).collect(),
            distortion: 0.0,
        });
    }
    let points = DMatrix::from_fn(bins, tables.len(), |i, j| tables[j].quantiles[i]);
    let members: Vec<usize> = (0..tables.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fit = kmeans(&points, &members, codebook_size, &mut rng)?;
    let codewords: Vec<CdfTable> = fit
        .centroids
        .column_iter()
        .map(|c| {
            let mut q: Vec<f64> = c.iter().copied().collect();
            q.sort_by(f64::total_cmp);
            CdfTable { quantiles: q }
        })
        .collect();
    let distortion = tables
        .iter()
        .zip(&fit.labels)
        .map(|(t, &code)| {
            t.quantiles
                .iter()
                .zip(&codewords[code].quantiles)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / tables.len() as f64;
    Ok(CdfCodebook {
        codewords,
        codes: fit.labels,
        distortion,
    })
}
