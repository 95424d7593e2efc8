//! Multi-hop channel-wise Saab pipeline.
//!
//! Hop 0 transforms joint `I₀×I₀×3` blocks with a single kernel. Every later
//! hop fits one kernel per incoming channel on that channel's `I×I` blocks,
//! and the retained responses of all groups are concatenated, group by group,
//! at each spatial site of the next stage.

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::patchio::{ExemplarPatchSet, Patch, CHANNELS};
use crate::saab::{fit_saab, select_knee, AcKeep, BlockSpec, SaabKernel};

/// A square multi-channel tensor, interleaved as `(y * side + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTensor {
    side: usize,
    channels: usize,
    data: Vec<f64>,
}

impl StageTensor {
    pub fn new(side: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == side * side * channels,
            Argument,
            "tensor data length {} does not match {side}x{side}x{channels}",
            data.len()
        );
        Ok(Self { side, channels, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// One channel as a `side × side` row-major plane.
    pub fn plane(&self, channel: usize) -> Vec<f64> {
        self.data.iter().skip(channel).step_by(self.channels).copied().collect()
    }
}

impl From<&Patch> for StageTensor {
    fn from(p: &Patch) -> Self {
        Self {
            side: p.side(),
            channels: CHANNELS,
            data: p.data().to_vec(),
        }
    }
}

/// How many channels a hop keeps. Counts include each group's DC channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeepPolicy {
    /// Total channels at the next stage, spread over groups by eigenvalue.
    Total(usize),
    /// Explicit count per group, in parent-channel order.
    PerChannel(Vec<usize>),
    /// Knee of each group's spectrum, then adjusted into `keep_total_band`.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopConfig {
    pub window: usize,
    pub keep: KeepPolicy,
    /// Inclusive bounds on the hop's total channel count.
    pub keep_total_band: Option<(usize, usize)>,
}

impl HopConfig {
    pub fn new(window: usize, keep: KeepPolicy) -> Self {
        Self {
            window,
            keep,
            keep_total_band: None,
        }
    }

    pub fn with_band(mut self, lo: usize, hi: usize) -> Self {
        self.keep_total_band = Some((lo, hi));
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGroup {
    /// Source channel in the previous stage; 0 for the joint hop-0 group.
    pub parent: usize,
    pub kernel: SaabKernel,
}

impl ChannelGroup {
    /// Channels this group contributes to the next stage.
    pub fn kept(&self) -> usize {
        self.kernel.response_len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hop {
    pub window: usize,
    pub groups: Vec<ChannelGroup>,
}

impl Hop {
    fn out_channels(&self) -> usize {
        self.groups.iter().map(ChannelGroup::kept).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    /// Reject models whose stage dimensions are not strictly decreasing.
    pub enforce_strict_decrease: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            enforce_strict_decrease: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineModel {
    hops: Vec<Hop>,
    spatial_sides: Vec<usize>,
    stage_channels: Vec<usize>,
}

pub fn fit_pipeline(patches: &ExemplarPatchSet, configs: &[HopConfig]) -> Result<PipelineModel> {
    fit_pipeline_with(patches, configs, PipelineOptions::default())
}

pub fn fit_pipeline_with(
    patches: &ExemplarPatchSet,
    configs: &[HopConfig],
    options: PipelineOptions,
) -> Result<PipelineModel> {
    ensure!(!configs.is_empty(), Config, "pipeline needs at least one hop");
    ensure!(patches.len() >= 2, Fit, "pipeline fit needs at least 2 patches, got {}", patches.len());
    let mut side = patches.side();
    for (i, cfg) in configs.iter().enumerate() {
        ensure!(cfg.window >= 1, Config, "hops.{i}.window must be at least 1");
        ensure!(
            side.is_multiple_of(cfg.window),
            Config,
            "hops.{i}.window={} does not divide the stage side {side}",
            cfg.window
        );
        side /= cfg.window;
    }

    let mut stage: Vec<StageTensor> = patches.patches().iter().map(StageTensor::from).collect();
    let mut hops = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        let (side, channels) = (stage[0].side, stage[0].channels);
        let next_area = (side / cfg.window).pow(2);
        let cap = options
            .enforce_strict_decrease
            .then(|| (side * side * channels - 1) / next_area);
        let hop = fit_hop(i, cfg, &stage, cap)?;
        stage = stage.par_iter().map(|t| forward_hop(&hop, i, t)).collect();
        hops.push(hop);
    }
    PipelineModel::from_hops(hops, patches.side(), options)
}

/// `cap` bounds the channel total chosen by [`KeepPolicy::Auto`].
fn fit_hop(index: usize, cfg: &HopConfig, stage: &[StageTensor], cap: Option<usize>) -> Result<Hop> {
    let channels = stage[0].channels;
    let window = cfg.window;
    let mut groups: Vec<ChannelGroup> = if index == 0 {
        let spec = BlockSpec::new(window, channels)?;
        let blocks = collect_blocks(stage, window, None);
        vec![ChannelGroup {
            parent: 0,
            kernel: fit_saab(spec, &blocks, AcKeep::All)?,
        }]
    } else {
        let spec = BlockSpec::new(window, 1)?;
        (0..channels)
            .into_par_iter()
            .map(|k| {
                let blocks = collect_blocks(stage, window, Some(k));
                let kernel = fit_saab(spec, &blocks, AcKeep::All)
                    .map_err(|e| Error::Fit(format!("hop {index}, channel {k}: {e}")))?;
                Ok(ChannelGroup { parent: k, kernel })
            })
            .collect::<Result<_>>()?
    };

    let spectra: Vec<&[f64]> = groups
        .iter()
        .map(|g| &g.kernel.eigenvalues()[..g.kernel.kept_ac()])
        .collect();
    let counts = allocate_channels(index, &spectra, &cfg.keep, cfg.keep_total_band, cap)?;
    for (g, &n) in groups.iter_mut().zip(&counts) {
        g.kernel.set_kept_ac(n - 1)?;
    }
    Ok(Hop { window, groups })
}

/// Chooses per-group channel counts (DC included) from each group's
/// available AC spectrum.
fn allocate_channels(
    hop: usize,
    spectra: &[&[f64]],
    keep: &KeepPolicy,
    band: Option<(usize, usize)>,
    cap: Option<usize>,
) -> Result<Vec<usize>> {
    let groups = spectra.len();
    let capacity: usize = spectra.iter().map(|s| 1 + s.len()).sum();
    let mut counts = match keep {
        KeepPolicy::PerChannel(list) => {
            ensure!(
                list.len() == groups,
                Config,
                "hops.{hop}.keep lists {} counts but the hop has {groups} channel groups",
                list.len()
            );
            for (k, (&n, s)) in list.iter().zip(spectra).enumerate() {
                ensure!(
                    n >= 1 && n <= 1 + s.len(),
                    Config,
                    "hops.{hop}.keep[{k}]={n} outside 1..={}",
                    1 + s.len()
                );
            }
            return Ok(list.clone());
        }
        KeepPolicy::Total(total) => {
            ensure!(
                *total >= groups && *total <= capacity,
                Config,
                "hops.{hop}.keep={total} outside the feasible range {groups}..={capacity}"
            );
            let mut counts = vec![1; groups];
            grow_to(&mut counts, spectra, *total);
            return Ok(counts);
        }
        KeepPolicy::Auto => spectra
            .iter()
            .map(|s| if s.is_empty() { Ok(1) } else { select_knee(s, (0, s.len())).map(|k| 1 + k) })
            .collect::<Result<Vec<_>>>()?,
    };
    if let Some((lo, hi)) = band {
        ensure!(lo <= hi, Config, "hops.{hop}.keep_total_band has lo {lo} > hi {hi}");
        ensure!(
            lo <= capacity && hi >= groups,
            Config,
            "hops.{hop}.keep_total_band ({lo}, {hi}) infeasible: totals must lie in {groups}..={capacity}"
        );
        let total: usize = counts.iter().sum();
        if total < lo {
            grow_to(&mut counts, spectra, lo);
        } else if total > hi {
            shrink_to(&mut counts, spectra, hi);
        }
    }
    if let Some(cap) = cap {
        let total: usize = counts.iter().sum();
        if total > cap {
            log::info!("hop {hop}: automatic keep of {total} channels reduced to {cap} so stage dimensions decrease");
            shrink_to(&mut counts, spectra, cap);
        }
    }
    Ok(counts)
}

/// Adds channels, largest next eigenvalue first, until `target` total.
fn grow_to(counts: &mut [usize], spectra: &[&[f64]], target: usize) {
    while counts.iter().sum::<usize>() < target {
        let next = (0..counts.len())
            .filter(|&g| counts[g] - 1 < spectra[g].len())
            .max_by(|&a, &b| spectra[a][counts[a] - 1].total_cmp(&spectra[b][counts[b] - 1]).then(b.cmp(&a)));
        match next {
            Some(g) => counts[g] += 1,
            None => break,
        }
    }
}

/// Drops channels, smallest kept AC eigenvalue first, until `target` total.
fn shrink_to(counts: &mut [usize], spectra: &[&[f64]], target: usize) {
    while counts.iter().sum::<usize>() > target {
        let next = (0..counts.len())
            .filter(|&g| counts[g] > 1)
            .min_by(|&a, &b| spectra[a][counts[a] - 2].total_cmp(&spectra[b][counts[b] - 2]).then(a.cmp(&b)));
        match next {
            Some(g) => counts[g] -= 1,
            None => break,
        }
    }
}

/// All non-overlapping `window`-blocks of every tensor, flattened and
/// concatenated. `channel` selects one channel; `None` takes all jointly.
fn collect_blocks(stage: &[StageTensor], window: usize, channel: Option<usize>) -> Vec<f64> {
    let t0 = &stage[0];
    let width = channel.map_or(t0.channels, |_| 1);
    let per_tensor = t0.side * t0.side * width;
    let mut out = vec![0.0; per_tensor * stage.len()];
    let dim = window * window * width;
    let blocks_per_row = t0.side / window;
    out.par_chunks_mut(per_tensor).zip(stage).for_each(|(dst, t)| {
        for (b, block) in dst.chunks_exact_mut(dim).enumerate() {
            gather_block(t, b / blocks_per_row, b % blocks_per_row, window, channel, block);
        }
    });
    out
}

fn gather_block(t: &StageTensor, by: usize, bx: usize, window: usize, channel: Option<usize>, out: &mut [f64]) {
    for dy in 0..window {
        let row = by * window + dy;
        for dx in 0..window {
            let base = (row * t.side + bx * window + dx) * t.channels;
            match channel {
                Some(k) => out[dy * window + dx] = t.data[base + k],
                None => {
                    let dst = (dy * window + dx) * t.channels;
                    out[dst..dst + t.channels].copy_from_slice(&t.data[base..base + t.channels]);
                }
            }
        }
    }
}

fn scatter_block(t: &mut StageTensor, by: usize, bx: usize, window: usize, channel: Option<usize>, block: &[f64]) {
    for dy in 0..window {
        let row = by * window + dy;
        for dx in 0..window {
            let base = (row * t.side + bx * window + dx) * t.channels;
            match channel {
                Some(k) => t.data[base + k] = block[dy * window + dx],
                None => {
                    let src = (dy * window + dx) * t.channels;
                    t.data[base..base + t.channels].copy_from_slice(&block[src..src + t.channels]);
                }
            }
        }
    }
}

fn forward_hop(hop: &Hop, index: usize, t: &StageTensor) -> StageTensor {
    let out_side = t.side / hop.window;
    let out_channels = hop.out_channels();
    let mut out = vec![0.0; out_side * out_side * out_channels];
    let mut block = Vec::new();
    for by in 0..out_side {
        for bx in 0..out_side {
            let mut offset = (by * out_side + bx) * out_channels;
            for g in &hop.groups {
                block.resize(g.kernel.block_dim(), 0.0);
                let channel = (index > 0).then_some(g.parent);
                gather_block(t, by, bx, hop.window, channel, &mut block);
                let len = g.kept();
                g.kernel.forward_into(&block, &mut out[offset..offset + len]);
                offset += len;
            }
        }
    }
    StageTensor {
        side: out_side,
        channels: out_channels,
        data: out,
    }
}

fn inverse_hop(hop: &Hop, index: usize, t: &StageTensor, out_channels: usize) -> StageTensor {
    let out_side = t.side * hop.window;
    let mut out = StageTensor {
        side: out_side,
        channels: out_channels,
        data: vec![0.0; out_side * out_side * out_channels],
    };
    let mut block = Vec::new();
    for by in 0..t.side {
        for bx in 0..t.side {
            let mut offset = (by * t.side + bx) * t.channels;
            for g in &hop.groups {
                block.resize(g.kernel.block_dim(), 0.0);
                let len = g.kept();
                g.kernel.inverse_into(&t.data[offset..offset + len], &mut block);
                let channel = (index > 0).then_some(g.parent);
                scatter_block(&mut out, by, bx, hop.window, channel, &block);
                offset += len;
            }
        }
    }
    out
}

impl PipelineModel {
    /// Assembles a model from fitted hops, validating shapes.
    pub fn from_hops(hops: Vec<Hop>, patch_side: usize, options: PipelineOptions) -> Result<Self> {
        ensure!(!hops.is_empty(), Config, "pipeline needs at least one hop");
        let mut spatial_sides = vec![patch_side];
        let mut stage_channels = vec![CHANNELS];
        for (i, hop) in hops.iter().enumerate() {
            let side = *spatial_sides.last().unwrap();
            let channels = *stage_channels.last().unwrap();
            ensure!(hop.window >= 1 && side % hop.window == 0, Config, "hop {i} window {} does not divide side {side}", hop.window);
            if i == 0 {
                ensure!(hop.groups.len() == 1, Config, "hop 0 must have exactly one joint group");
                ensure!(
                    hop.groups[0].kernel.spec() == BlockSpec { window: hop.window, in_channels: channels },
                    Config,
                    "hop 0 kernel shape does not match a {}x{}x{channels} block",
                    hop.window,
                    hop.window
                );
            } else {
                ensure!(
                    hop.groups.len() == channels,
                    Config,
                    "hop {i} has {} groups for {channels} incoming channels",
                    hop.groups.len()
                );
                for (k, g) in hop.groups.iter().enumerate() {
                    ensure!(g.parent == k, Config, "hop {i} group {k} has parent {}", g.parent);
                    ensure!(
                        g.kernel.spec() == BlockSpec { window: hop.window, in_channels: 1 },
                        Config,
                        "hop {i} group {k} kernel shape mismatch"
                    );
                }
            }
            spatial_sides.push(side / hop.window);
            stage_channels.push(hop.out_channels());
        }
        let model = Self {
            hops,
            spatial_sides,
            stage_channels,
        };
        if options.enforce_strict_decrease {
            let dims = model.stage_dims();
            if let Some(w) = dims.windows(2).find(|w| w[1] >= w[0]) {
                return Err(Error::Config(format!(
                    "stage dimensions {dims:?} must strictly decrease ({} -> {} does not)",
                    w[0], w[1]
                )));
            }
        }
        Ok(model)
    }

    pub fn hops(&self) -> &[Hop] {
        &self.hops
    }

    pub fn patch_side(&self) -> usize {
        self.spatial_sides[0]
    }

    pub fn spatial_sides(&self) -> &[usize] {
        &self.spatial_sides
    }

    pub fn stage_channels(&self) -> &[usize] {
        &self.stage_channels
    }

    /// Flattened dimension of each stage, source first.
    pub fn stage_dims(&self) -> Vec<usize> {
        self.spatial_sides
            .iter()
            .zip(&self.stage_channels)
            .map(|(s, c)| s * s * c)
            .collect()
    }

    /// Core dimension over source dimension.
    pub fn reduction_ratio(&self) -> f64 {
        let dims = self.stage_dims();
        *dims.last().unwrap() as f64 / dims[0] as f64
    }

    pub fn core_dim(&self) -> usize {
        *self.stage_dims().last().unwrap()
    }

    /// Index of the core stage.
    pub fn depth(&self) -> usize {
        self.hops.len()
    }

    pub fn embed(&self, patch: &Patch) -> Result<StageTensor> {
        Ok(self.embed_stages(patch)?.pop().unwrap())
    }

    /// Every stage of the forward chain, source first.
    pub fn embed_stages(&self, patch: &Patch) -> Result<Vec<StageTensor>> {
        ensure!(
            patch.side() == self.patch_side(),
            Argument,
            "patch side {} does not match model side {}",
            patch.side(),
            self.patch_side()
        );
        let mut stages = vec![StageTensor::from(patch)];
        for (i, hop) in self.hops.iter().enumerate() {
            let next = forward_hop(hop, i, stages.last().unwrap());
            stages.push(next);
        }
        Ok(stages)
    }

    fn check_stage(&self, stage: usize, t: &StageTensor) -> Result<()> {
        ensure!(stage <= self.depth(), Argument, "stage {stage} out of range 0..={}", self.depth());
        ensure!(
            t.side == self.spatial_sides[stage] && t.channels == self.stage_channels[stage],
            Argument,
            "tensor is {}x{}x{}, stage {stage} expects {}x{}x{}",
            t.side,
            t.side,
            t.channels,
            self.spatial_sides[stage],
            self.spatial_sides[stage],
            self.stage_channels[stage]
        );
        Ok(())
    }

    /// Maps a tensor at stage `stage` back to stage `stage − 1`.
    pub fn invert_stage(&self, stage: usize, t: &StageTensor) -> Result<StageTensor> {
        ensure!(stage >= 1, Argument, "stage 0 has no inverse step");
        self.check_stage(stage, t)?;
        let i = stage - 1;
        Ok(inverse_hop(&self.hops[i], i, t, self.stage_channels[i]))
    }

    /// Inverts a core-stage tensor all the way to the source stage,
    /// returning every intermediate stage, core first.
    pub fn invert_stages(&self, core: StageTensor) -> Result<Vec<StageTensor>> {
        self.check_stage(self.depth(), &core)?;
        let mut stages = vec![core];
        for stage in (1..=self.depth()).rev() {
            let prev = self.invert_stage(stage, stages.last().unwrap())?;
            stages.push(prev);
        }
        Ok(stages)
    }

    /// Core tensor to source-stage tensor.
    pub fn invert_full(&self, core: StageTensor) -> Result<StageTensor> {
        Ok(self.invert_stages(core)?.pop().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchio::RgbImage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn textured_patches(side: usize, count: usize, seed: u64) -> ExemplarPatchSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = RgbImage::from_fn(side * 3, side * 3, |x, y| {
            let s = ((x / 4 + y / 4) % 2) as f64;
            let w = ((x as f64) * 0.7).sin() * 0.1;
            [
                0.3 + 0.4 * s + w + 0.05 * rng.random::<f64>(),
                0.5 - 0.2 * s + 0.05 * rng.random::<f64>(),
                0.4 + w + 0.05 * rng.random::<f64>(),
            ]
        })
        .unwrap();
        crate::patchio::random_crops(&img, side, count, seed).unwrap()
    }

    fn default_hops() -> Vec<HopConfig> {
        vec![
            HopConfig::new(2, KeepPolicy::Total(10)),
            HopConfig::new(2, KeepPolicy::Total(27)),
        ]
    }

    #[test]
    fn default_dimension_chain() {
        let set = textured_patches(32, 60, 1);
        let model = fit_pipeline(&set, &default_hops()).unwrap();
        assert_eq!(model.stage_dims(), vec![3072, 2560, 1728]);
        assert_eq!(model.reduction_ratio(), 0.5625);
        let core = model.embed(&set.patches()[0]).unwrap();
        assert_eq!((core.side(), core.channels()), (8, 27));
        let s1 = model.invert_stage(2, &core).unwrap();
        assert_eq!((s1.side(), s1.channels()), (16, 10));
    }

    #[test]
    fn reduced_settings() {
        let set = textured_patches(32, 40, 2);
        for (k1, k2, d1, d2) in [(10, 32, 2560, 2048), (6, 12, 1536, 768), (5, 8, 1280, 512), (3, 3, 768, 192)] {
            let hops = [HopConfig::new(2, KeepPolicy::Total(k1)), HopConfig::new(2, KeepPolicy::Total(k2))];
            let model = fit_pipeline(&set, &hops).unwrap();
            assert_eq!(model.stage_dims(), vec![3072, d1, d2]);
        }
    }

    #[test]
    fn full_rank_is_rejected_by_strict_decrease() {
        let set = textured_patches(32, 20, 3);
        let hops = [HopConfig::new(2, KeepPolicy::Total(12)), HopConfig::new(2, KeepPolicy::Total(48))];
        assert!(matches!(fit_pipeline(&set, &hops), Err(Error::Config(_))));
        let model = fit_pipeline_with(&set, &hops, PipelineOptions { enforce_strict_decrease: false }).unwrap();
        assert_eq!(model.stage_dims(), vec![3072, 3072, 3072]);
    }

    #[test]
    fn full_rank_roundtrip_is_lossless() {
        let set = textured_patches(16, 30, 4);
        let hops = [HopConfig::new(2, KeepPolicy::Total(12)), HopConfig::new(2, KeepPolicy::Total(48))];
        let model = fit_pipeline_with(&set, &hops, PipelineOptions { enforce_strict_decrease: false }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = Patch::new(16, (0..16 * 16 * 3).map(|_| rng.random()).collect()).unwrap();
            let back = model.invert_full(model.embed(&p).unwrap()).unwrap();
            let err = p.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-9, "{err}");
        }
    }

    #[test]
    fn stepwise_inverse_equals_full_inverse() {
        let set = textured_patches(32, 30, 6);
        let model = fit_pipeline(&set, &default_hops()).unwrap();
        let core = model.embed(&set.patches()[3]).unwrap();
        let s1 = model.invert_stage(2, &core).unwrap();
        let s0 = model.invert_stage(1, &s1).unwrap();
        assert_eq!(s0, model.invert_full(core).unwrap());
    }

    #[test]
    fn constant_patch_has_only_dc_of_dc() {
        let set = textured_patches(32, 30, 7);
        let model = fit_pipeline(&set, &default_hops()).unwrap();
        let gray = Patch::new(32, vec![0.5; 3072]).unwrap();
        let core = model.embed(&gray).unwrap();
        let hop0 = &model.hops()[0].groups[0].kernel;
        let hop1 = &model.hops()[1];
        for site in core.data().chunks_exact(core.channels()) {
            let mut offset = 0;
            for g in &hop1.groups {
                let k = &g.kernel;
                // Each 2x2 block in channel g.parent is constant: DC channel
                // equals the hop-0 DC value, AC channels equal the hop-0 bias.
                let parent_value = if g.parent == 0 { 0.5 * 12f64.sqrt() } else { hop0.bias() };
                assert!((site[offset] - parent_value * 2.0).abs() < 1e-9);
                for j in 1..g.kept() {
                    assert!((site[offset + j] - k.bias()).abs() < 1e-9);
                }
                offset += g.kept();
            }
        }
    }

    #[test]
    fn biases_invert_to_discarded_means() {
        let set = textured_patches(32, 30, 8);
        let model = fit_pipeline(&set, &default_hops()).unwrap();
        let hop1 = &model.hops()[1];
        let mut data = Vec::with_capacity(model.core_dim());
        for _ in 0..64 {
            for g in &hop1.groups {
                data.push(0.0);
                data.extend(std::iter::repeat_n(g.kernel.bias(), g.kept() - 1));
            }
        }
        let core = StageTensor::new(8, 27, data).unwrap();
        let s1 = model.invert_stage(2, &core).unwrap();
        // Every 2x2 block of channel k equals the kernel's discarded mean.
        for g in &hop1.groups {
            let expected = g.kernel.inverse(&{
                let mut r = vec![g.kernel.bias(); g.kept()];
                r[0] = 0.0;
                r
            }).unwrap();
            let plane = s1.plane(g.parent);
            for y in 0..16 {
                for x in 0..16 {
                    assert!((plane[y * 16 + x] - expected[(y % 2) * 2 + x % 2]).abs() < 1e-12);
                }
            }
            let full_rank = g.kept() == 4;
            if full_rank {
                assert!(expected.iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn channel_fits_are_order_independent() {
        let set = textured_patches(16, 30, 9);
        let model = fit_pipeline(&set, &[HopConfig::new(2, KeepPolicy::Total(8)), HopConfig::new(2, KeepPolicy::Total(12))]).unwrap();
        let stage1: Vec<StageTensor> = set
            .patches()
            .iter()
            .map(|p| model.embed_stages(p).unwrap().swap_remove(1))
            .collect();
        let spec = BlockSpec::new(2, 1).unwrap();
        for k in (0..8).rev() {
            let blocks = collect_blocks(&stage1, 2, Some(k));
            let kernel = fit_saab(spec, &blocks, AcKeep::All).unwrap();
            let fitted = &model.hops()[1].groups[k].kernel;
            assert_eq!(kernel.eigenvalues(), fitted.eigenvalues());
            assert_eq!(kernel.ac_basis(), fitted.ac_basis());
        }
    }

    #[test]
    fn auto_keep_respects_bands() {
        let set = textured_patches(32, 40, 10);
        let hops = [
            HopConfig::new(2, KeepPolicy::Auto).with_band(6, 10),
            HopConfig::new(2, KeepPolicy::Auto).with_band(20, 30),
        ];
        let model = fit_pipeline(&set, &hops).unwrap();
        let ch = model.stage_channels();
        assert!((6..=10).contains(&ch[1]), "{ch:?}");
        assert!((20..=30).contains(&ch[2]), "{ch:?}");
    }

    #[test]
    fn explicit_per_channel_keep() {
        let set = textured_patches(16, 30, 11);
        let hops = [
            HopConfig::new(2, KeepPolicy::PerChannel(vec![4])),
            HopConfig::new(2, KeepPolicy::PerChannel(vec![3, 2, 1, 1])),
        ];
        let model = fit_pipeline(&set, &hops).unwrap();
        assert_eq!(model.stage_channels(), &[3, 4, 7]);
        let bad = [HopConfig::new(2, KeepPolicy::PerChannel(vec![4])), HopConfig::new(2, KeepPolicy::PerChannel(vec![3, 2]))];
        assert!(matches!(fit_pipeline(&set, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn three_hop_64_reaches_4032() {
        let set = textured_patches(64, 12, 12);
        let hops = [
            HopConfig::new(2, KeepPolicy::Total(10)),
            HopConfig::new(2, KeepPolicy::Total(27)),
            HopConfig::new(2, KeepPolicy::Total(63)),
        ];
        let model = fit_pipeline(&set, &hops).unwrap();
        assert_eq!(model.stage_dims(), vec![12288, 10240, 6912, 4032]);
    }

    #[test]
    fn single_hop_has_two_stage_dims() {
        let set = textured_patches(8, 10, 13);
        let model = fit_pipeline(&set, &[HopConfig::new(2, KeepPolicy::Total(6))]).unwrap();
        assert_eq!(model.stage_dims().len(), 2);
    }

    #[test]
    fn window_must_divide_side() {
        let set = textured_patches(12, 10, 14);
        let hops = [HopConfig::new(2, KeepPolicy::Total(6)), HopConfig::new(4, KeepPolicy::Total(6))];
        assert!(matches!(fit_pipeline(&set, &hops), Err(Error::Config(_))));
    }

    #[test]
    fn truncation_energy_per_stage() {
        let set = textured_patches(32, 40, 15);
        let model = fit_pipeline(&set, &default_hops()).unwrap();
        // Reconstruction deficit of stage 1 from the core, over the fitting
        // patches, equals the discarded hop-1 eigenvalue mass per block.
        let mut err = 0.0;
        let mut blocks = 0usize;
        for p in set.patches() {
            let stages = model.embed_stages(p).unwrap();
            let back = model.invert_stage(2, &stages[2]).unwrap();
            err += stages[1].data().iter().zip(back.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            blocks += 64;
        }
        let per_site: f64 = model.hops()[1].groups.iter().map(|g| g.kernel.discarded_energy()).sum();
        let measured = err / blocks as f64;
        assert!(((measured - per_site) / per_site).abs() < 0.01, "{measured} vs {per_site}");
    }
}
