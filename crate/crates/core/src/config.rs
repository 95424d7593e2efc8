//! Run configuration as flat `key=value` text with dotted keys.
//!
//! ```text
//! patch_size=32
//! hops.0.window=2
//! hops.0.keep=10
//! hops.1.window=2
//! hops.1.keep=auto
//! hops.1.keep_total_band=20,30
//! quilt.size=256
//! ```
//!
//! Any `hops.*` key replaces the whole default hop list. `keep` accepts a
//! total channel count, a comma list of per-group counts, or `auto`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::coregen::GeneratorConfig;
use crate::cwsaab::{HopConfig, KeepPolicy};
use crate::error::{ensure, Error, Result};
use crate::quilt::QuiltSpec;

pub const PRESETS: &[&str] = &["default", "auto", "a", "b", "c", "d", "three-hop-64"];

#[derive(Debug, Clone, PartialEq)]
pub struct NitesConfig {
    pub patch_size: usize,
    pub num_crops: usize,
    pub hops: Vec<HopConfig>,
    pub generator: GeneratorConfig,
    pub quilt_size: usize,
    pub quilt_overlap: usize,
    pub quilt_tolerance: f64,
}

impl Default for NitesConfig {
    fn default() -> Self {
        Self::with_keeps(32, &[10, 27])
    }
}

impl NitesConfig {
    fn with_keeps(patch_size: usize, keeps: &[usize]) -> Self {
        Self {
            patch_size,
            num_crops: 5000,
            hops: keeps.iter().map(|&k| HopConfig::new(2, KeepPolicy::Total(k))).collect(),
            generator: GeneratorConfig::default(),
            quilt_size: 256,
            quilt_overlap: 4,
            quilt_tolerance: 0.1,
        }
    }

    /// Named configurations: `default`, `auto` (knee selection within
    /// bands), the reduced settings `a` to `d`, and `three-hop-64`.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "default" => Self::default(),
            "auto" => Self {
                hops: vec![
                    HopConfig::new(2, KeepPolicy::Auto).with_band(6, 10),
                    HopConfig::new(2, KeepPolicy::Auto).with_band(20, 30),
                ],
                ..Self::default()
            },
            "a" => Self::with_keeps(32, &[10, 32]),
            "b" => Self::with_keeps(32, &[6, 12]),
            "c" => Self::with_keeps(32, &[5, 8]),
            "d" => Self::with_keeps(32, &[3, 3]),
            "three-hop-64" => Self {
                quilt_size: 256,
                quilt_overlap: 16,
                ..Self::with_keeps(64, &[10, 27, 63])
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}', expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn quilt_spec(&self) -> QuiltSpec {
        QuiltSpec {
            out_side: self.quilt_size,
            patch_side: self.patch_size,
            overlap: self.quilt_overlap,
            candidate_tolerance: self.quilt_tolerance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.patch_size >= 1, Config, "patch_size must be positive");
        ensure!(self.num_crops >= 2, Config, "num_crops must be at least 2");
        ensure!(!self.hops.is_empty(), Config, "at least one hop is required");
        let mut side = self.patch_size;
        for (i, hop) in self.hops.iter().enumerate() {
            ensure!(
                hop.window >= 1 && side.is_multiple_of(hop.window),
                Config,
                "hops.{i}.window={} does not divide the stage side {side}",
                hop.window
            );
            side /= hop.window;
            if let Some((lo, hi)) = hop.keep_total_band {
                ensure!(lo >= 1 && lo <= hi, Config, "hops.{i}.keep_total_band must satisfy 1 <= lo <= hi");
            }
        }
        let g = &self.generator;
        ensure!(g.clusters >= 1, Config, "clusters must be at least 1");
        ensure!(g.cdf_bins >= 2, Config, "cdf_bins must be at least 2");
        ensure!(
            g.retain_energy > 0.0 && g.retain_energy <= 1.0,
            Config,
            "retain_energy must lie in (0, 1]"
        );
        ensure!(
            g.reject_threshold >= 0.0 && g.reject_threshold.is_finite(),
            Config,
            "reject_threshold must be a nonnegative number"
        );
        self.quilt_spec().validate()
    }

    /// Serializes every field; `from_kv` of the result reproduces `self`.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        line("patch_size", self.patch_size.to_string());
        line("num_crops", self.num_crops.to_string());
        for (i, hop) in self.hops.iter().enumerate() {
            line(&format!("hops.{i}.window"), hop.window.to_string());
            line(&format!("hops.{i}.keep"), keep_to_string(&hop.keep));
            if let Some((lo, hi)) = hop.keep_total_band {
                line(&format!("hops.{i}.keep_total_band"), format!("{lo},{hi}"));
            }
        }
        let g = &self.generator;
        line("clusters", g.clusters.to_string());
        line("cdf_bins", g.cdf_bins.to_string());
        line("vq_codebook", g.vq_codebook.to_string());
        line("reject_threshold", g.reject_threshold.to_string());
        line("retain_energy", g.retain_energy.to_string());
        line(
            "max_components",
            g.max_components.map_or_else(|| "none".to_string(), |m| m.to_string()),
        );
        line("quilt.size", self.quilt_size.to_string());
        line("quilt.overlap", self.quilt_overlap.to_string());
        line("quilt.tolerance", self.quilt_tolerance.to_string());
        out
    }

    /// Parses `text` on top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_kv(text)?;
        Ok(config)
    }

    /// Overrides fields named in `text`. Blank lines and `#` comments are
    /// ignored; unknown keys are errors.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        let mut hop_keys: BTreeMap<usize, BTreeMap<String, String>> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(rest) = key.strip_prefix("hops.") {
                let (index, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("malformed hop key '{key}'")))?;
                let index: usize = parse(key, index)?;
                hop_keys.entry(index).or_default().insert(field.to_string(), value.to_string());
                continue;
            }
            let g = &mut self.generator;
            match key {
                "patch_size" => self.patch_size = parse(key, value)?,
                "num_crops" => self.num_crops = parse(key, value)?,
                "clusters" => g.clusters = parse(key, value)?,
                "cdf_bins" => g.cdf_bins = parse(key, value)?,
                "vq_codebook" => g.vq_codebook = parse(key, value)?,
                "reject_threshold" => g.reject_threshold = parse(key, value)?,
                "retain_energy" => g.retain_energy = parse(key, value)?,
                "max_components" => {
                    g.max_components = match value {
                        "none" => None,
                        v => Some(parse(key, v)?),
                    }
                }
                "quilt.size" => self.quilt_size = parse(key, value)?,
                "quilt.overlap" => self.quilt_overlap = parse(key, value)?,
                "quilt.tolerance" => self.quilt_tolerance = parse(key, value)?,
                _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
            }
        }
        if !hop_keys.is_empty() {
            self.hops = parse_hops(hop_keys)?;
        }
        Ok(())
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn keep_to_string(keep: &KeepPolicy) -> String {
    match keep {
        KeepPolicy::Total(n) => n.to_string(),
        KeepPolicy::PerChannel(v) => {
            let parts: Vec<String> = v.iter().map(usize::to_string).collect();
            // A single count would read back as a total; the trailing comma
            // marks it as a list.
            if v.len() == 1 {
                format!("{},", parts[0])
            } else {
                parts.join(",")
            }
        }
        KeepPolicy::Auto => "auto".to_string(),
    }
}

fn parse_keep(key: &str, value: &str) -> Result<KeepPolicy> {
    if value == "auto" {
        return Ok(KeepPolicy::Auto);
    }
    if value.contains(',') {
        let list: Vec<usize> = value
            .split(',')
            .filter(|v| !v.trim().is_empty())
            .map(|v| parse(key, v.trim()))
            .collect::<Result<_>>()?;
        ensure!(!list.is_empty(), Config, "empty keep list for '{key}'");
        return Ok(KeepPolicy::PerChannel(list));
    }
    Ok(KeepPolicy::Total(parse(key, value)?))
}

fn parse_hops(keys: BTreeMap<usize, BTreeMap<String, String>>) -> Result<Vec<HopConfig>> {
    let mut hops = Vec::with_capacity(keys.len());
    for (expected, (index, fields)) in keys.into_iter().enumerate() {
        ensure!(index == expected, Config, "hop indices must be contiguous from 0, missing hops.{expected}");
        let mut window = None;
        let mut keep = KeepPolicy::Auto;
        let mut band = None;
        for (field, value) in &fields {
            let key = format!("hops.{index}.{field}");
            match field.as_str() {
                "window" => window = Some(parse(&key, value)?),
                "keep" => keep = parse_keep(&key, value)?,
                "keep_total_band" => {
                    let v = parse_list(&key, value)?;
                    ensure!(v.len() == 2, Config, "'{key}' expects two values lo,hi");
                    band = Some((v[0], v[1]));
                }
                _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
            }
        }
        let window = window.ok_or_else(|| Error::Config(format!("hops.{index}.window is required")))?;
        hops.push(HopConfig {
            window,
            keep,
            keep_total_band: band,
        });
    }
    Ok(hops)
}
