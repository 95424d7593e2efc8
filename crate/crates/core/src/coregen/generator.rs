//! The core-subspace mixture model and its sampler.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::erf::erfc;

use super::cdf::{quantize_cdfs, CdfCodebook};
use super::cluster::{fit_cluster, ClusterFitOptions, ClusterModel, MIN_CLUSTER_SAMPLES};
use super::kmeans::split_tree;
use crate::error::{ensure, Error, Result};

/// Consecutive rejections after which sampling gives up.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub clusters: usize,
    pub cdf_bins: usize,
    /// Codebook size for CDF vector quantization; 0 disables VQ.
    pub vq_codebook: usize,
    /// Draws whose matched components all lie below this magnitude are
    /// rejected; 0 disables rejection.
    pub reject_threshold: f64,
    pub retain_energy: f64,
    pub max_components: Option<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            clusters: 8,
            cdf_bins: 64,
            vq_codebook: 64,
            reject_threshold: 0.5,
            retain_energy: 0.98,
            max_components: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub(crate) dim: usize,
    pub(crate) clusters: Vec<ClusterModel>,
    /// Right edge of each cluster's segment of the unit interval.
    pub(crate) boundaries: Vec<f64>,
    pub(crate) rejection_threshold: f64,
    pub(crate) codebook: Option<CdfCodebook>,
}

fn cluster_seed(seed: u64, index: usize) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(index as u64 + 1)
}

/// Fits the mixture model on core samples, the columns of `samples`.
pub fn fit_generator(samples: &DMatrix<f64>, config: &GeneratorConfig, seed: u64) -> Result<GeneratorModel> {
    let (dim, m) = samples.shape();
    ensure!(config.clusters >= 1, Config, "clusters must be at least 1");
    ensure!(
        m >= MIN_CLUSTER_SAMPLES,
        Fit,
        "generator needs at least {MIN_CLUSTER_SAMPLES} core samples, got {m}"
    );
    ensure!(
        config.reject_threshold >= 0.0,
        Config,
        "reject_threshold must be nonnegative"
    );
    let leaves = config.clusters.min(m);
    let start = Instant::now();
    let (labels, reached) = split_tree(samples, leaves, MIN_CLUSTER_SAMPLES, seed)?;
    log::debug!("clustering {m} samples took {:.2}s", start.elapsed().as_secs_f64());
    if reached < config.clusters {
        log::warn!(
            "formed {reached} clusters instead of {}: further splits would leave fewer than {MIN_CLUSTER_SAMPLES} samples",
            config.clusters
        );
    }
    let mut members = vec![Vec::new(); reached];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }

    let start = Instant::now();
    let mut clusters = members
        .par_iter()
        .enumerate()
        .map(|(i, cols)| {
            let sub = samples.select_columns(cols);
            let options = ClusterFitOptions {
                retain_energy: config.retain_energy,
                max_components: config.max_components,
                cdf_bins: config.cdf_bins,
                seed: cluster_seed(seed, i),
            };
            let mut model = fit_cluster(&sub, &options).map_err(|e| Error::Fit(format!("cluster {i}: {e}")))?;
            model.weight = cols.len() as f64 / m as f64;
            Ok(model)
        })
        .collect::<Result<Vec<_>>>()?;
    log::debug!("cluster models took {:.2}s", start.elapsed().as_secs_f64());
    let unconverged = clusters.iter().filter(|c| !c.ica_converged).count();
    if unconverged > 0 {
        log::info!("FastICA hit the iteration cap in {unconverged} of {reached} clusters");
    }

    let codebook = if config.vq_codebook > 0 {
        let tables: Vec<_> = clusters.iter().flat_map(|c| c.cdfs.iter().cloned()).collect();
        if tables.is_empty() {
            None
        } else {
            let cb = quantize_cdfs(&tables, config.vq_codebook, seed.wrapping_add(1))?;
            log::debug!("CDF codebook: {} codewords, distortion {:.3e}", cb.codewords.len(), cb.distortion);
            let mut next = 0;
            for c in &mut clusters {
                for t in &mut c.cdfs {
                    *t = cb.decode(next).clone();
                    next += 1;
                }
            }
            Some(cb)
        }
    } else {
        None
    };

    GeneratorModel::from_parts(dim, clusters, config.reject_threshold, codebook)
}

/// Standard normal CDF.
fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

impl GeneratorModel {
    pub(crate) fn from_parts(
        dim: usize,
        clusters: Vec<ClusterModel>,
        rejection_threshold: f64,
        codebook: Option<CdfCodebook>,
    ) -> Result<Self> {
        ensure!(!clusters.is_empty(), Argument, "generator needs at least one cluster");
        let mut boundaries = Vec::with_capacity(clusters.len());
        let mut acc = 0.0;
        for (i, c) in clusters.iter().enumerate() {
            ensure!(
                c.weight > 0.0 && c.weight <= 1.0,
                Argument,
                "cluster {i} weight {} outside (0, 1]",
                c.weight
            );
            ensure!(c.mean.len() == dim, Argument, "cluster {i} has dimension {}, expected {dim}", c.mean.len());
            acc += c.weight;
            boundaries.push(acc);
        }
        ensure!((acc - 1.0).abs() < 1e-9, Argument, "cluster weights sum to {acc}, not 1");
        *boundaries.last_mut().unwrap() = 1.0;
        ensure!(
            boundaries.windows(2).all(|w| w[0] < w[1]),
            Argument,
            "interval boundaries must strictly increase"
        );
        Ok(Self {
            dim,
            clusters,
            boundaries,
            rejection_threshold,
            codebook,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn clusters(&self) -> &[ClusterModel] {
        &self.clusters
    }

    pub fn weights(&self) -> Vec<f64> {
        self.clusters.iter().map(|c| c.weight).collect()
    }

    /// Cumulative segment edges of the interval representation.
    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn rejection_threshold(&self) -> f64 {
        self.rejection_threshold
    }

    pub fn codebook(&self) -> Option<&CdfCodebook> {
        self.codebook.as_ref()
    }

    /// Cluster whose segment of `[0, 1)` contains `u`.
    pub fn sample_cluster_index(&self, u: f64) -> Result<usize> {
        ensure!((0.0..1.0).contains(&u), Argument, "interval draw {u} outside [0, 1)");
        Ok(self.boundaries.partition_point(|&b| b <= u).min(self.clusters.len() - 1))
    }

    /// Picks a cluster and histogram-matches Gaussian draws through its
    /// tables, retrying while every matched value is below the threshold.
    /// Returns the cluster index and matched independent components.
    pub fn draw_components(&self, rng: &mut impl Rng) -> Result<(usize, DVector<f64>)> {
        for _ in 0..MAX_REJECTIONS {
            let index = self.sample_cluster_index(rng.random::<f64>())?;
            let cluster = &self.clusters[index];
            let matched = DVector::from_iterator(
                cluster.components(),
                cluster.cdfs.iter().map(|table| {
                    let g: f64 = StandardNormal.sample(rng);
                    table.inverse(phi(g))
                }),
            );
            let peak = matched.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if cluster.components() == 0 || peak >= self.rejection_threshold {
                return Ok((index, matched));
            }
        }
        Err(Error::Sampling(format!(
            "{MAX_REJECTIONS} consecutive draws rejected at threshold {}",
            self.rejection_threshold
        )))
    }

    /// Draws one flattened core sample.
    pub fn draw_core_sample(&self, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let (index, matched) = self.draw_components(rng)?;
        Ok(self.clusters[index].synthesize(&matched).iter().copied().collect())
    }
}
