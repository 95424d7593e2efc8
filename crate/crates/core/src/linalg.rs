//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted
/// nonincreasing. Eigenvectors are the columns of the returned matrix, each
/// sign-normalized so its largest-magnitude entry is positive.
pub(crate) fn sym_eigen_desc(matrix: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = matrix.nrows();
    let eig = SymmetricEigen::new(matrix);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        normalize_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

fn normalize_sign(v: &mut DVector<f64>) {
    let pivot = v.iter().copied().fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
    if pivot < 0.0 {
        v.neg_mut();
    }
}

/// Orthonormal basis (as columns) of the complement of the all-ones
/// direction in `R^d`: the non-constant columns of a Helmert matrix.
pub(crate) fn ones_complement(d: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(d, d.saturating_sub(1));
    for j in 1..d {
        let norm = ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            q[(i, j - 1)] = 1.0 / norm;
        }
        q[(j, j - 1)] = -(j as f64) / norm;
    }
    q
}

/// Principal axes of a sample matrix whose columns are observations.
#[derive(Debug, Clone)]
pub(crate) struct Pca {
    pub mean: DVector<f64>,
    /// Population variances along each axis, nonincreasing, all positive.
    pub variances: Vec<f64>,
    /// Orthonormal axes as columns, one per leading variance.
    pub axes: DMatrix<f64>,
}

/// Relative cutoff below which a variance is treated as numerically zero.
const RANK_TOL: f64 = 1e-10;

/// PCA with population (1/m) normalization. Uses the `m × m` Gram matrix when
/// there are fewer samples than dimensions.
#[cfg(test)]
pub(crate) fn pca_columns(samples: &DMatrix<f64>) -> Pca {
    pca_columns_with(samples, |v| v.len())
}

/// As [`pca_columns`], but only the leading `select(variances)` axes are
/// formed. All variances are still returned.
pub(crate) fn pca_columns_with(samples: &DMatrix<f64>, select: impl FnOnce(&[f64]) -> usize) -> Pca {
    let (d, m) = samples.shape();
    let mean = samples.column_mean();
    let mut centered = samples.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let scale = 1.0 / m as f64;
    // Variances this far below the data's mean energy are rounding noise.
    let floor = 1e-20 * samples.norm_squared() / m as f64;
    let (values, axes) = if m < d {
        let gram = centered.tr_mul(&centered) * scale;
        let (values, u) = sym_eigen_desc(gram);
        let rank = numerical_rank(&values, floor);
        let k = select(&values[..rank]).min(rank);
        let mut coeffs = u.columns(0, k).into_owned();
        for (j, mut col) in coeffs.column_iter_mut().enumerate() {
            col /= (values[j] * m as f64).sqrt();
        }
        let mut axes = &centered * coeffs;
        reorthonormalize(&mut axes);
        for mut col in axes.column_iter_mut() {
            let mut owned = col.clone_owned();
            normalize_sign(&mut owned);
            col.copy_from(&owned);
        }
        (values[..rank].to_vec(), axes)
    } else {
        let cov = (&centered * centered.transpose()) * scale;
        let (values, vectors) = sym_eigen_desc(cov);
        let rank = numerical_rank(&values, floor);
        let k = select(&values[..rank]).min(rank);
        (values[..rank].to_vec(), vectors.columns(0, k).into_owned())
    };
    Pca {
        mean,
        variances: values,
        axes,
    }
}

fn numerical_rank(values: &[f64], floor: f64) -> usize {
    let top = values.first().copied().unwrap_or(0.0);
    if top <= floor {
        return 0;
    }
    values.iter().take_while(|&&v| v > RANK_TOL * top).count()
}

/// Two passes of modified Gram-Schmidt over the columns.
pub(crate) fn reorthonormalize(m: &mut DMatrix<f64>) {
    for _ in 0..2 {
        for j in 0..m.ncols() {
            for i in 0..j {
                let proj = m.column(i).dot(&m.column(j));
                let ci = m.column(i).clone_owned();
                m.column_mut(j).axpy(-proj, &ci, 1.0);
            }
            let norm = m.column(j).norm();
            if norm > 0.0 {
                m.column_mut(j).scale_mut(1.0 / norm);
            }
        }
    }
}

/// Newton-Schulz steps allowed before falling back to an eigendecomposition.
const POLAR_MAX_STEPS: usize = 60;
const POLAR_TOL: f64 = 1e-13;
const POWER_STEPS: usize = 20;

/// `(A A^T)^{-1/2} A`, the nearest matrix with orthonormal rows.
pub(crate) fn symmetric_decorrelation(a: &DMatrix<f64>) -> DMatrix<f64> {
    polar_newton_schulz(a).unwrap_or_else(|| polar_eigen(a))
}

/// Newton-Schulz iteration `W <- 1.5 W - 0.5 W W^T W` for the polar factor.
/// Needs only matrix products; `None` if it has not converged in time.
fn polar_newton_schulz(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    // Power iteration on A^T A estimates the largest singular value from
    // below; the margin keeps every scaled singular value under sqrt(3), where
    // the iteration converges.
    let mut v = DVector::from_element(a.ncols(), 1.0 / (a.ncols() as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..POWER_STEPS {
        let av = a * &v;
        sigma = av.norm();
        let next = a.tr_mul(&av);
        let norm = next.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return None;
        }
        v = next / norm;
    }
    let bound = 1.2 * sigma;
    if !(bound > 0.0 && bound.is_finite()) {
        return None;
    }
    let identity = DMatrix::<f64>::identity(n, n);
    let mut w = a / bound;
    for _ in 0..POLAR_MAX_STEPS {
        let gram = &w * w.transpose();
        if (&gram - &identity).abs().max() < POLAR_TOL {
            return Some(w);
        }
        w = &w * 1.5 - (gram * &w) * 0.5;
        if !w.iter().all(|x| x.is_finite()) {
            return None;
        }
    }
    None
}

fn polar_eigen(a: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = a * a.transpose();
    let (values, vectors) = sym_eigen_desc(gram);
    let inv_sqrt = DVector::from_iterator(values.len(), values.iter().map(|&v| 1.0 / v.max(f64::MIN_POSITIVE).sqrt()));
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |i, j| vectors[(i, j)] * inv_sqrt[j]);
    scaled * vectors.transpose() * a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_complement_is_orthonormal_and_orthogonal_to_ones() {
        for d in [2, 4, 12, 48] {
            let q = ones_complement(d);
            let gram = q.transpose() * &q;
            assert!((gram - DMatrix::identity(d - 1, d - 1)).abs().max() < 1e-12);
            let ones = DVector::from_element(d, 1.0);
            assert!((q.transpose() * ones).abs().max() < 1e-12);
        }
    }

    #[test]
    fn gram_and_covariance_routes_agree() {
        // 6 samples in 10 dims (Gram route) vs same samples padded with
        // duplicates in the covariance route would differ; instead compare
        // against the covariance route on the same data directly.
        let data = DMatrix::from_fn(10, 6, |i, j| ((i * 7 + j * 3) % 11) as f64 + 0.1 * (i * j) as f64);
        let gram = pca_columns(&data);
        let mean = data.column_mean();
        let mut c = data.clone();
        for mut col in c.column_iter_mut() {
            col -= &mean;
        }
        let (values, vectors) = sym_eigen_desc(&c * c.transpose() / 6.0);
        assert_eq!(gram.variances.len(), 5);
        for k in 0..5 {
            assert!((gram.variances[k] - values[k]).abs() < 1e-9 * values[0]);
            let dot = gram.axes.column(k).dot(&vectors.column(k)).abs();
            assert!((dot - 1.0).abs() < 1e-8, "axis {k}: {dot}");
        }
    }

    #[test]
    fn decorrelation_yields_orthonormal_rows() {
        let a = DMatrix::from_fn(5, 5, |i, j| ((i + 2 * j) % 5) as f64 + if i == j { 3.0 } else { 0.0 });
        let w = symmetric_decorrelation(&a);
        assert!((&w * w.transpose() - DMatrix::identity(5, 5)).abs().max() < 1e-10);
    }

    #[test]
    fn newton_schulz_matches_eigen_polar_factor() {
        let a = DMatrix::from_fn(40, 40, |i, j| (((i * 31 + j * 17) % 23) as f64 - 11.0) / 7.0 + if i == j { 2.0 } else { 0.0 });
        let fast = polar_newton_schulz(&a).expect("converges");
        assert!((fast - polar_eigen(&a)).abs().max() < 1e-10);
        // Ill-conditioned but nonsingular input still converges.
        let mut b = DMatrix::<f64>::identity(6, 6);
        b[(5, 5)] = 1e-4;
        b[(0, 1)] = 3.0;
        let w = symmetric_decorrelation(&b);
        assert!((&w * w.transpose() - DMatrix::identity(6, 6)).abs().max() < 1e-10);
        assert!(polar_newton_schulz(&DMatrix::zeros(3, 3)).is_none());
    }
}
