//! One mixture component: PCA whitening, FastICA, and per-component
//! inverse-CDF tables.

use nalgebra::{DMatrix, DVector};

use super::cdf::{build_cdf, CdfTable};
use super::ica::fastica;
use crate::error::{ensure, Result};
use crate::linalg::pca_columns_with;

/// Fewest samples a cluster may be fitted from.
pub const MIN_CLUSTER_SAMPLES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterFitOptions {
    /// Fraction of variance the retained PCA components must capture.
    pub retain_energy: f64,
    /// Hard cap on retained components, on top of the half-sample-count cap.
    pub max_components: Option<usize>,
    pub cdf_bins: usize,
    pub seed: u64,
}

impl Default for ClusterFitOptions {
    fn default() -> Self {
        Self {
            retain_energy: 0.98,
            max_components: None,
            cdf_bins: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub(crate) weight: f64,
    pub(crate) mean: DVector<f64>,
    /// `d × r`, orthonormal columns.
    pub(crate) pca_basis: DMatrix<f64>,
    /// Standard deviation along each retained axis.
    pub(crate) pca_scales: DVector<f64>,
    /// `r × r`, orthogonal.
    pub(crate) unmixing: DMatrix<f64>,
    pub(crate) cdfs: Vec<CdfTable>,
    pub(crate) ica_converged: bool,
}

/// Fits a cluster from the columns of `samples` (`d × m`).
pub fn fit_cluster(samples: &DMatrix<f64>, options: &ClusterFitOptions) -> Result<ClusterModel> {
    let m = samples.ncols();
    ensure!(
        m >= MIN_CLUSTER_SAMPLES,
        Fit,
        "cluster has {m} samples, at least {MIN_CLUSTER_SAMPLES} are needed"
    );
    ensure!(
        options.retain_energy > 0.0 && options.retain_energy <= 1.0,
        Argument,
        "retain_energy must lie in (0, 1], got {}",
        options.retain_energy
    );

    let cap = options.max_components.unwrap_or(usize::MAX).min(m / 2);
    let mut r = 0;
    let pca = pca_columns_with(samples, |variances| {
        let total: f64 = variances.iter().sum();
        let target = options.retain_energy * total * (1.0 - 1e-12);
        let mut captured = 0.0;
        while r < variances.len() && captured < target {
            captured += variances[r];
            r += 1;
        }
        if r > cap {
            log::debug!("cluster of {m} samples: {r} components needed for energy, capped at {cap}");
            r = cap;
        }
        r
    });

    let basis = pca.axes.columns(0, r).into_owned();
    let scales = DVector::from_iterator(r, pca.variances[..r].iter().map(|v| v.sqrt()));
    let mut centered = samples.clone();
    for mut col in centered.column_iter_mut() {
        col -= &pca.mean;
    }
    let mut white = basis.tr_mul(&centered);
    for (i, mut row) in white.row_iter_mut().enumerate() {
        row /= scales[i];
    }
    debug_assert_eq!(white.shape(), (r, m));

    let ica = fastica(&white, options.seed)?;
    let components = &ica.unmixing * &white;
    let cdfs = components
        .row_iter()
        .map(|row| build_cdf(&row.iter().copied().collect::<Vec<_>>(), options.cdf_bins))
        .collect::<Result<Vec<_>>>()?;

    Ok(ClusterModel {
        weight: 1.0,
        mean: pca.mean,
        pca_basis: basis,
        pca_scales: scales,
        unmixing: ica.unmixing,
        cdfs,
        ica_converged: ica.converged,
    })
}

impl ClusterModel {
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Retained dimension `r`.
    pub fn components(&self) -> usize {
        self.pca_scales.len()
    }

    pub fn pca_basis(&self) -> &DMatrix<f64> {
        &self.pca_basis
    }

    pub fn pca_scales(&self) -> &DVector<f64> {
        &self.pca_scales
    }

    pub fn unmixing(&self) -> &DMatrix<f64> {
        &self.unmixing
    }

    pub fn cdfs(&self) -> &[CdfTable] {
        &self.cdfs
    }

    pub fn ica_converged(&self) -> bool {
        self.ica_converged
    }

    /// Whitened PCA scores of a sample.
    pub fn whiten(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut w = self.pca_basis.tr_mul(&(x - &self.mean));
        w.component_div_assign(&self.pca_scales);
        w
    }

    /// Independent components of a sample.
    pub fn analyze(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.unmixing * self.whiten(x)
    }

    /// Inverse of [`analyze`](Self::analyze): ICA remix, PCA unwhiten, add mean.
    pub fn synthesize(&self, components: &DVector<f64>) -> DVector<f64> {
        let mut w = self.unmixing.tr_mul(components);
        w.component_mul_assign(&self.pca_scales);
        &self.mean + &self.pca_basis * w
    }
}
