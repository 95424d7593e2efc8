//! Image quilting: raster placement of overlapping patches with randomized
//! near-best selection and minimum-error boundary cuts.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::patchio::{Patch, RgbImage, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuiltSpec {
    pub out_side: usize,
    pub patch_side: usize,
    pub overlap: usize,
    /// Candidates within `(1 + tolerance) · min cost` are eligible.
    pub candidate_tolerance: f64,
}

impl Default for QuiltSpec {
    fn default() -> Self {
        Self {
            out_side: 256,
            patch_side: 32,
            overlap: 4,
            candidate_tolerance: 0.1,
        }
    }
}

impl QuiltSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.overlap > 0 && self.overlap < self.patch_side,
            Config,
            "quilt overlap {} must lie strictly between 0 and the patch side {}",
            self.overlap,
            self.patch_side
        );
        ensure!(
            self.out_side >= self.patch_side,
            Config,
            "quilt output side {} is smaller than the patch side {}",
            self.out_side,
            self.patch_side
        );
        let step = self.patch_side - self.overlap;
        ensure!(
            (self.out_side - self.patch_side).is_multiple_of(step),
            Config,
            "(out_side - patch_side) = {} is not a multiple of (patch_side - overlap) = {step}",
            self.out_side - self.patch_side
        );
        ensure!(
            self.candidate_tolerance >= 0.0 && self.candidate_tolerance.is_finite(),
            Config,
            "quilt tolerance must be a nonnegative number"
        );
        Ok(())
    }

    pub fn step(&self) -> usize {
        self.patch_side - self.overlap
    }

    pub fn placements_per_axis(&self) -> usize {
        (self.out_side - self.patch_side) / self.step() + 1
    }

    pub fn placements(&self) -> usize {
        self.placements_per_axis().pow(2)
    }
}

/// A minimum-error cut through an overlap band: one index per band row.
#[derive(Debug, Clone, PartialEq)]
pub struct SeamPath {
    pub cuts: Vec<usize>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub x: usize,
    pub y: usize,
    pub patch: usize,
    /// Cut through the left overlap, indexed by patch row.
    pub vertical_seam: Option<SeamPath>,
    /// Cut through the top overlap, indexed by patch column.
    pub horizontal_seam: Option<SeamPath>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuiltLayout {
    pub spec: QuiltSpec,
    pub placements: Vec<Placement>,
}

#[derive(Debug, Clone)]
pub struct Quilt {
    pub image: RgbImage,
    pub layout: QuiltLayout,
}

fn pixel_error(candidate: &Patch, canvas: &RgbImage, x: usize, y: usize, i: usize, j: usize) -> f64 {
    (0..CHANNELS)
        .map(|c| {
            let d = candidate.get(j, i, c) - canvas.get(x + j, y + i, c);
            d * d
        })
        .sum()
}

/// Squared difference between `candidate` placed at `(x, y)` and the canvas
/// over the left and/or top overlap strips. The shared corner counts once.
pub fn overlap_cost(candidate: &Patch, canvas: &RgbImage, (x, y): (usize, usize), overlap: usize) -> Result<f64> {
    let side = candidate.side();
    ensure!(
        x + side <= canvas.width() && y + side <= canvas.height(),
        Argument,
        "patch at ({x}, {y}) of side {side} falls outside the {}x{} canvas",
        canvas.width(),
        canvas.height()
    );
    ensure!(overlap <= side, Argument, "overlap {overlap} exceeds patch side {side}");
    let mut cost = 0.0;
    for i in 0..side {
        for j in 0..side {
            let in_left = x > 0 && j < overlap;
            let in_top = y > 0 && i < overlap;
            if in_left || in_top {
                cost += pixel_error(candidate, canvas, x, y, i, j);
            }
        }
    }
    Ok(cost)
}

/// Uniform choice among candidates whose cost is within
/// `(1 + tolerance)` of the minimum.
pub fn choose_patch(costs: &[f64], tolerance: f64, rng: &mut impl Rng) -> Result<usize> {
    ensure!(!costs.is_empty(), Argument, "no candidate patches to choose from");
    ensure!(costs.iter().all(|c| c.is_finite()), Argument, "candidate costs must be finite");
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let bound = (1.0 + tolerance) * min;
    let eligible: Vec<usize> = (0..costs.len()).filter(|&i| costs[i] <= bound).collect();
    Ok(eligible[rng.random_range(0..eligible.len())])
}

/// Dynamic-programming minimum cut through `band` (rows × width), where
/// consecutive rows' indices differ by at most one. Ties go to the smaller
/// column index.
pub fn min_cut_seam(band: &DMatrix<f64>) -> Result<SeamPath> {
    let (rows, width) = band.shape();
    ensure!(rows >= 1 && width >= 1, Argument, "seam band must be non-empty, got {rows}x{width}");
    let mut acc = band.clone();
    for r in 1..rows {
        for c in 0..width {
            let lo = c.saturating_sub(1);
            let hi = (c + 1).min(width - 1);
            let best = (lo..=hi).map(|k| acc[(r - 1, k)]).fold(f64::INFINITY, f64::min);
            acc[(r, c)] += best;
        }
    }
    let argmin = |r: usize, lo: usize, hi: usize| {
        (lo..=hi).fold(lo, |best, k| if acc[(r, k)] < acc[(r, best)] { k } else { best })
    };
    let mut cuts = vec![0; rows];
    cuts[rows - 1] = argmin(rows - 1, 0, width - 1);
    for r in (0..rows - 1).rev() {
        let next = cuts[r + 1];
        cuts[r] = argmin(r, next.saturating_sub(1), (next + 1).min(width - 1));
    }
    let cost = cuts.iter().enumerate().map(|(r, &c)| band[(r, c)]).sum();
    Ok(SeamPath { cuts, cost })
}

fn vertical_band(candidate: &Patch, canvas: &RgbImage, x: usize, y: usize, overlap: usize) -> DMatrix<f64> {
    DMatrix::from_fn(candidate.side(), overlap, |i, j| pixel_error(candidate, canvas, x, y, i, j))
}

fn horizontal_band(candidate: &Patch, canvas: &RgbImage, x: usize, y: usize, overlap: usize) -> DMatrix<f64> {
    DMatrix::from_fn(candidate.side(), overlap, |j, i| pixel_error(candidate, canvas, x, y, i, j))
}

/// Quilts `patches` into an `out_side × out_side` image. Patches may be
/// reused; the first placement is a uniform random pick.
pub fn quilt(patches: &[Patch], spec: &QuiltSpec, seed: u64) -> Result<Quilt> {
    spec.validate()?;
    ensure!(!patches.is_empty(), Argument, "quilting needs at least one patch");
    ensure!(
        patches.iter().all(|p| p.side() == spec.patch_side),
        Argument,
        "all patches must have side {}",
        spec.patch_side
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = RgbImage::zeros(spec.out_side, spec.out_side)?;
    let per_axis = spec.placements_per_axis();
    let (side, overlap) = (spec.patch_side, spec.overlap);
    let mut placements = Vec::with_capacity(per_axis * per_axis);

    for gy in 0..per_axis {
        for gx in 0..per_axis {
            let (x, y) = (gx * spec.step(), gy * spec.step());
            let index = if x == 0 && y == 0 {
                rng.random_range(0..patches.len())
            } else {
                let costs = patches
                    .par_iter()
                    .map(|p| overlap_cost(p, &canvas, (x, y), overlap))
                    .collect::<Result<Vec<_>>>()?;
                choose_patch(&costs, spec.candidate_tolerance, &mut rng)?
            };
            let patch = &patches[index];
            let vertical_seam = (x > 0)
                .then(|| min_cut_seam(&vertical_band(patch, &canvas, x, y, overlap)))
                .transpose()?;
            let horizontal_seam = (y > 0)
                .then(|| min_cut_seam(&horizontal_band(patch, &canvas, x, y, overlap)))
                .transpose()?;
            for i in 0..side {
                for j in 0..side {
                    let keep_canvas = match (&vertical_seam, &horizontal_seam) {
                        (Some(v), _) if j < overlap => j < v.cuts[i],
                        (_, Some(h)) if i < overlap => i < h.cuts[j],
                        _ => false,
                    };
                    if !keep_canvas {
                        for c in 0..CHANNELS {
                            canvas.set(x + j, y + i, c, patch.get(j, i, c));
                        }
                    }
                }
            }
            placements.push(Placement {
                x,
                y,
                patch: index,
                vertical_seam,
                horizontal_seam,
            });
        }
    }
    Ok(Quilt {
        image: canvas,
        layout: QuiltLayout { spec: *spec, placements },
    })
}
