//! End-to-end fitting and patch generation.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::NitesConfig;
use crate::coregen::{fit_generator, GeneratorModel};
use crate::cwsaab::{fit_pipeline, PipelineModel, StageTensor};
use crate::error::{ensure, Result};
use crate::patchio::{random_crops, ExemplarPatchSet, Patch, RgbImage};
use crate::quilt::{quilt, Quilt, QuiltSpec};

pub const FORMAT_VERSION: u32 = 1;

/// A fitted analysis pipeline and core-sample generator.
#[derive(Debug, Clone, PartialEq)]
pub struct NitesModel {
    pub pipeline: PipelineModel,
    pub generator: GeneratorModel,
    pub config: NitesConfig,
    pub seed: u64,
}

impl NitesModel {
    pub fn patch_side(&self) -> usize {
        self.pipeline.patch_side()
    }

    pub fn core_shape(&self) -> (usize, usize) {
        let last = self.pipeline.depth();
        (self.pipeline.spatial_sides()[last], self.pipeline.stage_channels()[last])
    }
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The exemplar crops that `fit` trains on for this configuration and seed.
pub fn training_patches(exemplar: &RgbImage, config: &NitesConfig, seed: u64) -> Result<ExemplarPatchSet> {
    random_crops(exemplar, config.patch_size, config.num_crops, derive_seed(seed, 1))
}

/// Crops exemplar patches, fits the pipeline, embeds every patch to the core
/// stage and fits the generator on the resulting samples.
pub fn fit(exemplar: &RgbImage, config: &NitesConfig, seed: u64) -> Result<NitesModel> {
    config.validate()?;
    let patches = training_patches(exemplar, config, seed)?;
    log::info!("cropped {} patches of side {}", patches.len(), patches.side());
    let pipeline = fit_pipeline(&patches, &config.hops)?;
    log::info!(
        "stage dims {:?}, reduction ratio {:.4}",
        pipeline.stage_dims(),
        pipeline.reduction_ratio()
    );
    let dim = pipeline.core_dim();
    let cores = patches
        .patches()
        .par_iter()
        .map(|p| pipeline.embed(p).map(StageTensor::into_data))
        .collect::<Result<Vec<_>>>()?;
    let samples = DMatrix::from_vec(dim, cores.len(), cores.concat());
    let generator = fit_generator(&samples, &config.generator, derive_seed(seed, 2))?;
    log::info!("generator: {} clusters over {dim} dimensions", generator.clusters().len());
    Ok(NitesModel {
        pipeline,
        generator,
        config: config.clone(),
        seed,
    })
}

/// Every intermediate stage of one generated patch, core first and pixels
/// last. Nothing is clamped.
pub fn generate_stages(model: &NitesModel, rng: &mut impl Rng) -> Result<Vec<StageTensor>> {
    let (side, channels) = model.core_shape();
    let core = StageTensor::new(side, channels, model.generator.draw_core_sample(rng)?)?;
    model.pipeline.invert_stages(core)
}

/// Draws one core sample and inverts it to pixels, clamping to `[0, 1]` only
/// after the last inverse hop.
pub fn generate_patch(model: &NitesModel, rng: &mut impl Rng) -> Result<Patch> {
    let pixels = generate_stages(model, rng)?.pop().expect("pipeline has a pixel stage");
    ensure!(
        pixels.data().iter().all(|v| v.is_finite()),
        Sampling,
        "inverse transform produced non-finite pixels"
    );
    let data = pixels.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Patch::new(model.patch_side(), data)
}

/// The random stream for patch `index` of a batch. Independent of thread
/// count and scheduling.
pub fn patch_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate_batch(model: &NitesModel, count: usize, seed: u64) -> Result<Vec<Patch>> {
    ensure!(count >= 1, Argument, "patch count must be at least 1");
    (0..count)
        .into_par_iter()
        .map(|j| generate_patch(model, &mut patch_rng(seed, j)))
        .collect()
}

/// Wall-clock time and output counters per phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimingReport {
    pub embed_seconds: f64,
    pub generate_seconds: f64,
    pub quilt_seconds: f64,
    pub patches: usize,
    pub placements: usize,
    pub embed_runs: usize,
    pub generate_runs: usize,
    pub quilt_runs: usize,
}

impl TimingReport {
    /// The five reported metrics, one `key=value` per line.
    pub fn to_kv(&self) -> String {
        format!(
            "embed_seconds={:.6}\ngenerate_seconds={:.6}\nquilt_seconds={:.6}\npatches={}\nplacements={}\n",
            self.embed_seconds, self.generate_seconds, self.quilt_seconds, self.patches, self.placements
        )
    }
}

/// Runs the phases against one model and accumulates timings. The model is
/// fitted once and reused by every later call.
#[derive(Debug)]
pub struct Session {
    model: NitesModel,
    report: TimingReport,
}

impl Session {
    pub fn fit(exemplar: &RgbImage, config: &NitesConfig, seed: u64) -> Result<Self> {
        let start = Instant::now();
        let model = fit(exemplar, config, seed)?;
        let report = TimingReport {
            embed_seconds: start.elapsed().as_secs_f64(),
            embed_runs: 1,
            ..TimingReport::default()
        };
        Ok(Self { model, report })
    }

    pub fn from_model(model: NitesModel) -> Self {
        Self {
            model,
            report: TimingReport::default(),
        }
    }

    pub fn model(&self) -> &NitesModel {
        &self.model
    }

    pub fn report(&self) -> &TimingReport {
        &self.report
    }

    pub fn generate(&mut self, count: usize, seed: u64) -> Result<Vec<Patch>> {
        let start = Instant::now();
        let patches = generate_batch(&self.model, count, seed)?;
        self.report.generate_seconds += start.elapsed().as_secs_f64();
        self.report.generate_runs += 1;
        self.report.patches += patches.len();
        Ok(patches)
    }

    pub fn quilt(&mut self, patches: &[Patch], spec: &QuiltSpec, seed: u64) -> Result<Quilt> {
        let start = Instant::now();
        let q = quilt(patches, spec, seed)?;
        self.report.quilt_seconds += start.elapsed().as_secs_f64();
        self.report.quilt_runs += 1;
        self.report.placements += q.layout.placements.len();
        Ok(q)
    }
}

impl From<Session> for NitesModel {
    fn from(s: Session) -> Self {
        s.model
    }
}
