//! Core-subspace generation: clustering, per-cluster PCA/ICA models with
//! inverse-CDF marginals, and the interval-representation sampler.

mod cdf;
mod cluster;
mod generator;
mod ica;
mod kmeans;

pub use cdf::{build_cdf, quantize_cdfs, CdfCodebook, CdfTable};
pub use cluster::{fit_cluster, ClusterFitOptions, ClusterModel, MIN_CLUSTER_SAMPLES};
pub use generator::{fit_generator, GeneratorConfig, GeneratorModel, MAX_REJECTIONS};
pub use ica::{fastica, IcaFit};
pub use kmeans::{hierarchical_kmeans, kmeans, KMeans};
