//! Single-stage Saab transform (subspace approximation with adjusted bias).
//!
//! A block `x` of dimension `d` is split into a DC response along the unit
//! all-ones direction and AC responses along the principal axes of the
//! DC-removed residuals. A shared bias makes every AC response on the fitting
//! data nonnegative. With all `d − 1` AC components kept the transform is an
//! orthonormal change of basis and the inverse is exact.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure, Result};
use crate::linalg::{ones_complement, sym_eigen_desc};

/// Ratio to the leading AC eigenvalue below which the spectrum is "flat".
pub const KNEE_FLATNESS_RATIO: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub window: usize,
    pub in_channels: usize,
}

impl BlockSpec {
    pub fn new(window: usize, in_channels: usize) -> Result<Self> {
        ensure!(window >= 1, Argument, "block window must be at least 1");
        ensure!(in_channels >= 1, Argument, "block needs at least one channel");
        Ok(Self { window, in_channels })
    }

    pub fn block_dim(&self) -> usize {
        self.window * self.window * self.in_channels
    }
}

/// How many AC components a fitted kernel retains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcKeep {
    All,
    Exact(usize),
    /// Knee of the AC spectrum, bounded to `[min, max]`.
    Knee { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaabKernel {
    spec: BlockSpec,
    /// All `d − 1` AC axes as rows, ordered by nonincreasing eigenvalue.
    ac_basis: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    /// Mean of the DC-removed residuals over the fitting blocks.
    mean: DVector<f64>,
    bias: f64,
    kept_ac: usize,
    /// Component of `mean` along the discarded axes; fills them on inverse.
    discarded_mean: DVector<f64>,
}

/// Fits a kernel on `blocks`, a concatenation of flattened blocks of
/// dimension `spec.block_dim()`.
pub fn fit_saab(spec: BlockSpec, blocks: &[f64], keep: AcKeep) -> Result<SaabKernel> {
    let d = spec.block_dim();
    ensure!(
        blocks.len().is_multiple_of(d),
        Argument,
        "block buffer length {} is not a multiple of block dimension {d}",
        blocks.len()
    );
    let count = blocks.len() / d;
    ensure!(count >= 2, Fit, "Saab fit needs at least 2 blocks, got {count}");

    let mut mean = DVector::<f64>::zeros(d);
    let mut bias = 0.0_f64;
    let mut residual = vec![0.0; d];
    for block in blocks.chunks_exact(d) {
        let avg = block.iter().sum::<f64>() / d as f64;
        let mut norm2 = 0.0;
        for (r, &x) in residual.iter_mut().zip(block) {
            *r = x - avg;
            norm2 += *r * *r;
        }
        bias = bias.max(norm2.sqrt());
        for (m, r) in mean.iter_mut().zip(&residual) {
            *m += r;
        }
    }
    mean /= count as f64;

    // Centered covariance of residuals.
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for block in blocks.chunks_exact(d) {
        let avg = block.iter().sum::<f64>() / d as f64;
        for (i, r) in residual.iter_mut().enumerate() {
            *r = block[i] - avg - mean[i];
        }
        for j in 0..d {
            let rj = residual[j];
            for i in j..d {
                cov[(i, j)] += residual[i] * rj;
            }
        }
    }
    for j in 0..d {
        for i in j..d {
            let v = cov[(i, j)] / count as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    // Diagonalize inside the complement of the DC direction so every AC axis
    // is exactly orthogonal to it.
    let q = ones_complement(d);
    let reduced = q.transpose() * &cov * &q;
    let (values, vectors) = if d > 1 {
        sym_eigen_desc(reduced)
    } else {
        (Vec::new(), DMatrix::zeros(0, 0))
    };
    let mut eigenvalues: Vec<f64> = values.iter().map(|&v| v.max(0.0)).collect();
    let ac_basis = (&q * vectors).transpose();

    let total: f64 = eigenvalues.iter().sum();
    let energy = blocks.iter().map(|x| x * x).sum::<f64>() / count as f64;
    let degenerate = total <= 1e-14 * energy.max(f64::MIN_POSITIVE);
    if degenerate {
        eigenvalues.iter_mut().for_each(|v| *v = 0.0);
    }

    let kept_ac = if degenerate {
        0
    } else {
        match keep {
            AcKeep::All => d - 1,
            AcKeep::Exact(k) => {
                ensure!(k < d, Argument, "cannot keep {k} AC components of a {d}-dimensional block");
                k
            }
            AcKeep::Knee { min, max } => select_knee(&eigenvalues, (min, max.min(d - 1)))?,
        }
    };

    let mut kernel = SaabKernel {
        spec,
        ac_basis,
        eigenvalues,
        mean,
        bias,
        kept_ac: 0,
        discarded_mean: DVector::zeros(d),
    };
    kernel.set_kept_ac(kept_ac)?;
    Ok(kernel)
}

/// Smallest `k` in `[min_k, max_k]` whose eigenvalue has dropped below
/// [`KNEE_FLATNESS_RATIO`] of the leading one; `max_k` when none has.
/// Indices past the end of the spectrum count as flat.
pub fn select_knee(eigenvalues: &[f64], (min_k, max_k): (usize, usize)) -> Result<usize> {
    ensure!(!eigenvalues.is_empty(), Argument, "knee selection on an empty spectrum");
    ensure!(
        min_k <= max_k && max_k <= eigenvalues.len(),
        Argument,
        "knee bounds ({min_k}, {max_k}) invalid for a spectrum of length {}",
        eigenvalues.len()
    );
    let lead = eigenvalues[0];
    Ok((min_k..=max_k)
        .find(|&k| eigenvalues.get(k).is_none_or(|&v| v < KNEE_FLATNESS_RATIO * lead))
        .unwrap_or(max_k))
}

impl SaabKernel {
    /// Reassembles a kernel from stored parts.
    pub fn from_parts(
        spec: BlockSpec,
        ac_basis: DMatrix<f64>,
        eigenvalues: Vec<f64>,
        mean: DVector<f64>,
        bias: f64,
        kept_ac: usize,
    ) -> Result<Self> {
        let d = spec.block_dim();
        ensure!(
            ac_basis.shape() == (d - 1, d) && eigenvalues.len() == d - 1 && mean.len() == d,
            Argument,
            "kernel arrays do not match block dimension {d}"
        );
        let mut kernel = Self {
            spec,
            ac_basis,
            eigenvalues,
            mean,
            bias,
            kept_ac: 0,
            discarded_mean: DVector::zeros(d),
        };
        kernel.set_kept_ac(kept_ac)?;
        Ok(kernel)
    }

    /// Changes how many leading AC components are retained.
    pub fn set_kept_ac(&mut self, kept_ac: usize) -> Result<()> {
        let d = self.spec.block_dim();
        ensure!(kept_ac < d, Argument, "cannot keep {kept_ac} AC components of a {d}-dimensional block");
        self.kept_ac = kept_ac;
        let mut fill = DVector::zeros(d);
        for row in self.ac_basis.row_iter().skip(kept_ac) {
            let coef = row.transpose().dot(&self.mean);
            fill.axpy(coef, &row.transpose(), 1.0);
        }
        self.discarded_mean = fill;
        Ok(())
    }

    pub fn spec(&self) -> BlockSpec {
        self.spec
    }

    pub fn block_dim(&self) -> usize {
        self.spec.block_dim()
    }

    /// Value shared by every entry of the unit-norm DC filter.
    pub fn dc_weight(&self) -> f64 {
        1.0 / (self.block_dim() as f64).sqrt()
    }

    pub fn ac_basis(&self) -> &DMatrix<f64> {
        &self.ac_basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn kept_ac(&self) -> usize {
        self.kept_ac
    }

    /// Response length: DC plus retained AC components.
    pub fn response_len(&self) -> usize {
        1 + self.kept_ac
    }

    /// Sum of the discarded AC eigenvalues.
    pub fn discarded_energy(&self) -> f64 {
        self.eigenvalues[self.kept_ac..].iter().sum()
    }

    pub fn forward(&self, block: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            block.len() == self.block_dim(),
            Argument,
            "block has dimension {}, kernel expects {}",
            block.len(),
            self.block_dim()
        );
        let mut out = vec![0.0; self.response_len()];
        self.forward_into(block, &mut out);
        Ok(out)
    }

    pub(crate) fn forward_into(&self, block: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.response_len());
        out[0] = block.iter().sum::<f64>() * self.dc_weight();
        for (j, o) in out[1..].iter_mut().enumerate() {
            let row = self.ac_basis.row(j);
            *o = row.iter().zip(block).map(|(a, x)| a * x).sum::<f64>() + self.bias;
        }
    }

    /// Inverse transform. Discarded AC components are restored at their
    /// fitting-set mean, i.e. zero in centered coordinates.
    pub fn inverse(&self, response: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            response.len() == self.response_len(),
            Argument,
            "response has length {}, kernel expects {}",
            response.len(),
            self.response_len()
        );
        let mut out = vec![0.0; self.block_dim()];
        self.inverse_into(response, &mut out);
        Ok(out)
    }

    pub(crate) fn inverse_into(&self, response: &[f64], out: &mut [f64]) {
        let dc = response[0] * self.dc_weight();
        for (o, fill) in out.iter_mut().zip(self.discarded_mean.iter()) {
            *o = dc + fill;
        }
        for (j, &r) in response[1..].iter().enumerate() {
            let coef = r - self.bias;
            for (o, a) in out.iter_mut().zip(self.ac_basis.row(j).iter()) {
                *o += coef * a;
            }
        }
    }
}
