//! The `.nites` model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "NITESMDL" | u32 version | u32 section count
//! per section: u16 name length | name | u64 payload length | payload
//! ```
//!
//! Sections appear in the order `MANIFEST`, `PIPELINE`, `GENERATOR`. The
//! manifest is UTF-8 `key=value` text. The other two hold named arrays:
//! `u16 name length | name | u32 ndim | u64 dims… | f64 data…`, row-major.
//! Floats are stored bit-exactly.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::config::NitesConfig;
use crate::coregen::{CdfCodebook, CdfTable, ClusterModel, GeneratorModel};
use crate::cwsaab::{ChannelGroup, Hop, PipelineModel, PipelineOptions};
use crate::error::{Error, Result};
use crate::patchio::write_atomic;
use crate::saab::{BlockSpec, SaabKernel};
use crate::synth::{NitesModel, FORMAT_VERSION};

const MAGIC: &[u8; 8] = b"NITESMDL";
const SECTIONS: [&str; 3] = ["MANIFEST", "PIPELINE", "GENERATOR"];

struct Array {
    dims: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Default)]
struct ArrayWriter {
    buf: Vec<u8>,
}

impl ArrayWriter {
    fn put(&mut self, name: &str, dims: &[usize], data: impl IntoIterator<Item = f64>) {
        self.buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            self.buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let mut n = 0;
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
            n += 1;
        }
        debug_assert_eq!(n, dims.iter().product::<usize>());
    }

    fn scalar(&mut self, name: &str, v: f64) {
        self.put(name, &[1], [v]);
    }

    fn count(&mut self, name: &str, v: usize) {
        self.scalar(name, v as f64);
    }

    fn vector(&mut self, name: &str, v: &[f64]) {
        self.put(name, &[v.len()], v.iter().copied());
    }

    /// Row-major.
    fn matrix(&mut self, name: &str, m: &DMatrix<f64>) {
        let (r, c) = m.shape();
        self.put(name, &[r, c], (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])));
    }
}

struct ArrayReader<'a> {
    section: &'static str,
    bytes: &'a [u8],
}

impl<'a> ArrayReader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::load(self.section, reason)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn next(&mut self, expected: &str) -> Result<Array> {
        let len = u16::from_le_bytes(self.take(2, expected)?.try_into().unwrap()) as usize;
        let name = self.take(len, expected)?;
        if name != expected.as_bytes() {
            return Err(self.fail(format!(
                "expected array '{expected}', found '{}'",
                String::from_utf8_lossy(name)
            )));
        }
        let ndim = u32::from_le_bytes(self.take(4, expected)?.try_into().unwrap()) as usize;
        if ndim > 8 {
            return Err(self.fail(format!("array '{expected}' has implausible rank {ndim}")));
        }
        let dims = (0..ndim)
            .map(|_| self.u64(expected).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| self.fail(format!("truncated while reading {expected}")))?;
        let raw = self.take(count * 8, expected)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Array { dims, data })
    }

    fn shaped(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
        let a = self.next(name)?;
        if a.dims != dims {
            return Err(self.fail(format!("array '{name}' has shape {:?}, expected {dims:?}", a.dims)));
        }
        Ok(a.data)
    }

    fn scalar(&mut self, name: &str) -> Result<f64> {
        Ok(self.shaped(name, &[1])?[0])
    }

    fn count(&mut self, name: &str) -> Result<usize> {
        let v = self.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 || v > (1u64 << 52) as f64 {
            return Err(self.fail(format!("'{name}' is not a valid count: {v}")));
        }
        Ok(v as usize)
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        self.shaped(name, &[len])
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_row_slice(rows, cols, &self.shaped(name, &[rows, cols])?))
    }

    fn finish(&self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(self.fail(format!("{} trailing bytes", self.bytes.len())))
        }
    }
}

fn manifest(model: &NitesModel) -> String {
    let dims: Vec<String> = model.pipeline.stage_dims().iter().map(usize::to_string).collect();
    format!(
        "model.format_version={FORMAT_VERSION}\nmodel.seed={}\nmodel.stage_dims={}\nmodel.core_dim={}\nmodel.clusters={}\n{}",
        model.seed,
        dims.join(","),
        model.pipeline.core_dim(),
        model.generator.clusters().len(),
        model.config.to_kv()
    )
}

fn encode_pipeline(p: &PipelineModel) -> Vec<u8> {
    let mut w = ArrayWriter::default();
    w.count("patch_side", p.patch_side());
    w.count("hops", p.hops().len());
    for (h, hop) in p.hops().iter().enumerate() {
        w.count(&format!("hop{h}.window"), hop.window);
        w.count(&format!("hop{h}.groups"), hop.groups.len());
        for (g, group) in hop.groups.iter().enumerate() {
            let k = &group.kernel;
            let prefix = format!("hop{h}.g{g}");
            w.count(&format!("{prefix}.parent"), group.parent);
            w.put(
                &format!("{prefix}.block"),
                &[2],
                [k.spec().window as f64, k.spec().in_channels as f64],
            );
            w.scalar(&format!("{prefix}.dc_weight"), k.dc_weight());
            w.matrix(&format!("{prefix}.ac_basis"), k.ac_basis());
            w.vector(&format!("{prefix}.eigenvalues"), k.eigenvalues());
            w.vector(&format!("{prefix}.mean"), k.mean().as_slice());
            w.scalar(&format!("{prefix}.bias"), k.bias());
            w.count(&format!("{prefix}.kept_ac"), k.kept_ac());
        }
    }
    w.buf
}

fn decode_pipeline(r: &mut ArrayReader) -> Result<PipelineModel> {
    let patch_side = r.count("patch_side")?;
    let hop_count = r.count("hops")?;
    let mut hops = Vec::with_capacity(hop_count);
    for h in 0..hop_count {
        let window = r.count(&format!("hop{h}.window"))?;
        let group_count = r.count(&format!("hop{h}.groups"))?;
        let mut groups = Vec::with_capacity(group_count);
        for g in 0..group_count {
            let prefix = format!("hop{h}.g{g}");
            let parent = r.count(&format!("{prefix}.parent"))?;
            let block = r.shaped(&format!("{prefix}.block"), &[2])?;
            let spec = BlockSpec::new(block[0] as usize, block[1] as usize).map_err(|e| r.fail(e.to_string()))?;
            let d = spec.block_dim();
            let dc_weight = r.scalar(&format!("{prefix}.dc_weight"))?;
            let ac_basis = r.matrix(&format!("{prefix}.ac_basis"), d - 1, d)?;
            let eigenvalues = r.vector(&format!("{prefix}.eigenvalues"), d - 1)?;
            let mean = DVector::from_vec(r.vector(&format!("{prefix}.mean"), d)?);
            let bias = r.scalar(&format!("{prefix}.bias"))?;
            let kept_ac = r.count(&format!("{prefix}.kept_ac"))?;
            let kernel = SaabKernel::from_parts(spec, ac_basis, eigenvalues, mean, bias, kept_ac)
                .map_err(|e| r.fail(format!("{prefix}: {e}")))?;
            if kernel.dc_weight().to_bits() != dc_weight.to_bits() {
                return Err(r.fail(format!("{prefix}: stored DC weight does not match the block size")));
            }
            groups.push(ChannelGroup { parent, kernel });
        }
        hops.push(Hop { window, groups });
    }
    let options = PipelineOptions {
        enforce_strict_decrease: false,
    };
    PipelineModel::from_hops(hops, patch_side, options).map_err(|e| r.fail(e.to_string()))
}

fn encode_generator(gen: &GeneratorModel) -> Vec<u8> {
    let mut w = ArrayWriter::default();
    w.count("dim", gen.dim());
    w.count("clusters", gen.clusters().len());
    w.scalar("rejection_threshold", gen.rejection_threshold());
    w.vector("boundaries", gen.boundaries());
    let bins = gen
        .clusters()
        .iter()
        .flat_map(|c| c.cdfs())
        .next()
        .map_or(0, CdfTable::bins);
    w.count("cdf_bins", bins);
    match gen.codebook() {
        Some(cb) => {
            w.put(
                "codebook",
                &[cb.codewords.len(), bins],
                cb.codewords.iter().flat_map(|t| t.quantiles().iter().copied()),
            );
            w.vector("codes", &cb.codes.iter().map(|&c| c as f64).collect::<Vec<_>>());
            w.scalar("distortion", cb.distortion);
        }
        None => w.put("codebook", &[0, bins], []),
    }
    for (i, c) in gen.clusters().iter().enumerate() {
        let r = c.components();
        w.scalar(&format!("c{i}.weight"), c.weight());
        w.count(&format!("c{i}.components"), r);
        w.vector(&format!("c{i}.mean"), c.mean().as_slice());
        w.matrix(&format!("c{i}.pca_basis"), c.pca_basis());
        w.vector(&format!("c{i}.pca_scales"), c.pca_scales().as_slice());
        w.matrix(&format!("c{i}.unmixing"), c.unmixing());
        w.count(&format!("c{i}.ica_converged"), c.ica_converged() as usize);
        if gen.codebook().is_none() {
            w.put(
                &format!("c{i}.cdfs"),
                &[r, bins],
                c.cdfs().iter().flat_map(|t| t.quantiles().iter().copied()),
            );
        }
    }
    w.buf
}

fn tables(r: &ArrayReader, flat: &[f64], bins: usize) -> Result<Vec<CdfTable>> {
    if bins == 0 {
        return Ok(Vec::new());
    }
    flat.chunks(bins)
        .map(|q| CdfTable::from_quantiles(q.to_vec()).map_err(|e| r.fail(e.to_string())))
        .collect()
}

fn decode_generator(r: &mut ArrayReader) -> Result<GeneratorModel> {
    let dim = r.count("dim")?;
    let cluster_count = r.count("clusters")?;
    let threshold = r.scalar("rejection_threshold")?;
    let boundaries = r.vector("boundaries", cluster_count)?;
    let bins = r.count("cdf_bins")?;
    let codebook_array = r.next("codebook")?;
    if codebook_array.dims.len() != 2 || codebook_array.dims[1] != bins {
        return Err(r.fail("codebook shape does not match the bin count"));
    }
    let codebook = if codebook_array.dims[0] > 0 {
        let codewords = tables(r, &codebook_array.data, bins)?;
        let codes = r.next("codes")?;
        let codes: Vec<usize> = codes.data.iter().map(|&c| c as usize).collect();
        if codes.iter().any(|&c| c >= codewords.len()) {
            return Err(r.fail("codebook index out of range"));
        }
        let distortion = r.scalar("distortion")?;
        Some(CdfCodebook {
            codewords,
            codes,
            distortion,
        })
    } else {
        None
    };

    let mut next_code = 0;
    let mut clusters = Vec::with_capacity(cluster_count);
    for i in 0..cluster_count {
        let weight = r.scalar(&format!("c{i}.weight"))?;
        let comps = r.count(&format!("c{i}.components"))?;
        let mean = DVector::from_vec(r.vector(&format!("c{i}.mean"), dim)?);
        let pca_basis = r.matrix(&format!("c{i}.pca_basis"), dim, comps)?;
        let pca_scales = DVector::from_vec(r.vector(&format!("c{i}.pca_scales"), comps)?);
        let unmixing = r.matrix(&format!("c{i}.unmixing"), comps, comps)?;
        let ica_converged = r.count(&format!("c{i}.ica_converged"))? != 0;
        let cdfs = match &codebook {
            Some(cb) => {
                let slice = cb
                    .codes
                    .get(next_code..next_code + comps)
                    .ok_or_else(|| r.fail("fewer codebook indices than components"))?;
                next_code += comps;
                slice.iter().map(|&c| cb.codewords[c].clone()).collect()
            }
            None => {
                let flat = r.shaped(&format!("c{i}.cdfs"), &[comps, bins])?;
                tables(r, &flat, bins)?
            }
        };
        clusters.push(ClusterModel {
            weight,
            mean,
            pca_basis,
            pca_scales,
            unmixing,
            cdfs,
            ica_converged,
        });
    }
    if codebook.as_ref().is_some_and(|cb| cb.codes.len() != next_code) {
        return Err(r.fail("codebook indices do not match the component count"));
    }
    let gen = GeneratorModel::from_parts(dim, clusters, threshold, codebook).map_err(|e| r.fail(e.to_string()))?;
    if gen.boundaries().iter().zip(&boundaries).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(r.fail("stored interval boundaries do not match the cluster weights"));
    }
    Ok(gen)
}

fn write_section(out: &mut impl Write, name: &str, payload: &[u8]) -> std::io::Result<()> {
    out.write_all(&(name.len() as u16).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(payload.len() as u64).to_le_bytes())?;
    out.write_all(payload)
}

/// Serializes `model` to bytes.
pub fn encode_model(model: &NitesModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(SECTIONS.len() as u32).to_le_bytes());
    let payloads = [
        manifest(model).into_bytes(),
        encode_pipeline(&model.pipeline),
        encode_generator(&model.generator),
    ];
    for (name, payload) in SECTIONS.iter().zip(&payloads) {
        write_section(&mut out, name, payload).expect("writing to a Vec cannot fail");
    }
    out
}

/// Parses a model from bytes.
pub fn decode_model(bytes: &[u8]) -> Result<NitesModel> {
    let mut header = ArrayReader { section: "HEADER", bytes };
    if header.take(8, "magic")? != MAGIC {
        return Err(header.fail("not a NITES model file"));
    }
    let version = u32::from_le_bytes(header.take(4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = u32::from_le_bytes(header.take(4, "section count")?.try_into().unwrap());
    if count as usize != SECTIONS.len() {
        return Err(header.fail(format!("expected {} sections, found {count}", SECTIONS.len())));
    }
    let mut payloads = Vec::with_capacity(SECTIONS.len());
    for name in SECTIONS {
        header.section = name;
        let len = u16::from_le_bytes(header.take(2, "section name")?.try_into().unwrap()) as usize;
        let found = header.take(len, "section name")?;
        if found != name.as_bytes() {
            return Err(header.fail(format!("found section '{}'", String::from_utf8_lossy(found))));
        }
        let size = header.u64("section length")?;
        let size = usize::try_from(size).map_err(|_| header.fail("section length overflows"))?;
        payloads.push(header.take(size, "section payload")?);
    }
    header.section = "HEADER";
    header.finish()?;

    let text = std::str::from_utf8(payloads[0]).map_err(|_| Error::load("MANIFEST", "not valid UTF-8"))?;
    let mut seed = None;
    let mut config_lines = String::new();
    for line in text.lines() {
        match line.split_once('=') {
            Some(("model.seed", v)) => {
                seed = Some(v.parse().map_err(|_| Error::load("MANIFEST", "invalid seed"))?);
            }
            Some((k, _)) if k.starts_with("model.") => {}
            _ => {
                config_lines.push_str(line);
                config_lines.push('\n');
            }
        }
    }
    let seed = seed.ok_or_else(|| Error::load("MANIFEST", "missing model.seed"))?;
    let config = NitesConfig::from_kv(&config_lines).map_err(|e| Error::load("MANIFEST", e.to_string()))?;

    let mut r = ArrayReader {
        section: "PIPELINE",
        bytes: payloads[1],
    };
    let pipeline = decode_pipeline(&mut r)?;
    r.finish()?;
    let mut r = ArrayReader {
        section: "GENERATOR",
        bytes: payloads[2],
    };
    let generator = decode_generator(&mut r)?;
    r.finish()?;
    if generator.dim() != pipeline.core_dim() {
        return Err(Error::load("GENERATOR", "dimension does not match the pipeline core stage"));
    }
    Ok(NitesModel {
        pipeline,
        generator,
        config,
        seed,
    })
}

/// Writes the model atomically: a partially written file never replaces an
/// existing one.
pub fn save_model(model: &NitesModel, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_model(model);
    write_atomic(path.as_ref(), |w| w.write_all(&bytes))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NitesModel> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// The manifest text of a model file.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<String> {
    let model = load_model(path)?;
    Ok(manifest(&model))
}
