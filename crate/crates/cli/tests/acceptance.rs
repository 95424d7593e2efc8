//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use nites_core::coregen::{fastica, fit_generator, GeneratorConfig};
use nites_core::cwsaab::{fit_pipeline, fit_pipeline_with, PipelineOptions};
use nites_core::patchio::{load_image, random_crops, save_image, ExemplarPatchSet, Patch, RgbImage};
use nites_core::quilt::{min_cut_seam, quilt, QuiltSpec};
use nites_core::{HopConfig, KeepPolicy, NitesConfig, StageTensor};

type Check = Result<String, String>;

fn nites(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nites"))
        .args(args)
        .output()
        .expect("failed to launch the nites binary")
}

fn stdout_value(out: &Output, key: &str) -> Option<String> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
}

/// 256×256 colored checkerboard with period 32 plus Gaussian pixel noise.
fn noisy_checkerboard(path: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let img = RgbImage::from_fn(256, 256, |x, y| {
        let on = (x / 16 + y / 16) % 2 == 0;
        let base = if on { [0.8, 0.6, 0.3] } else { [0.2, 0.3, 0.5] };
        base.map(|b| {
            let n: f64 = rng.sample(StandardNormal);
            (b + 0.05 * n).clamp(0.0, 1.0)
        })
    })
    .unwrap();
    save_image(&img, path).unwrap();
}

fn random_patches(count: usize, side: usize, seed: u64) -> ExemplarPatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches = (0..count)
        .map(|_| Patch::new(side, (0..side * side * 3).map(|_| rng.random::<f64>()).collect()).unwrap())
        .collect();
    ExemplarPatchSet::new(patches).unwrap()
}

fn criterion_1(dir: &Path) -> Check {
    let exemplar = dir.join("exemplar.png");
    let cases: [(&str, [usize; 3]); 5] = [
        ("default", [3072, 2560, 1728]),
        ("a", [3072, 2560, 2048]),
        ("b", [3072, 1536, 768]),
        ("c", [3072, 1280, 512]),
        ("d", [3072, 768, 192]),
    ];
    let mut notes = Vec::new();
    for (preset, dims) in cases {
        let model = dir.join(format!("{preset}.nites"));
        let start = Instant::now();
        let fit = nites(&["fit", "--exemplar", exemplar.to_str().unwrap(), "--out", model.to_str().unwrap(), "--preset", preset]);
        if !fit.status.success() {
            return Err(format!("fit {preset} failed: {}", String::from_utf8_lossy(&fit.stderr)));
        }
        let out = nites(&["inspect", "--model", model.to_str().unwrap()]);
        let elapsed = start.elapsed();
        let expected = dims.map(|d| d.to_string()).join(" -> ");
        let got = stdout_value(&out, "stage_dims").unwrap_or_default();
        if got != expected {
            return Err(format!("{preset}: stage_dims '{got}', expected '{expected}'"));
        }
        if elapsed > Duration::from_secs(60) {
            return Err(format!("{preset}: took {:.1}s", elapsed.as_secs_f64()));
        }
        if preset == "default" {
            let ratio = stdout_value(&out, "reduction_ratio").unwrap_or_default();
            if !ratio.starts_with("0.5625 ") {
                return Err(format!("default: reduction_ratio '{ratio}', expected 0.5625"));
            }
        }
        notes.push(format!("{preset} {:.1}s", elapsed.as_secs_f64()));
    }
    Ok(format!("default chain 3072 -> 2560 -> 1728, ratio 0.5625; {}", notes.join(", ")))
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let train = random_patches(1000, 32, 1);
    let hops = [
        HopConfig::new(2, KeepPolicy::Total(12)),
        HopConfig::new(2, KeepPolicy::PerChannel(vec![4; 12])),
    ];
    let options = PipelineOptions {
        enforce_strict_decrease: false,
    };
    let model = fit_pipeline_with(&train, &hops, options).map_err(|e| e.to_string())?;
    let test = random_patches(1000, 32, 2);
    let mut worst = 0.0_f64;
    for p in test.patches() {
        let back = model.invert_full(model.embed(p).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(p.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let detail = format!("dims {:?}, max abs error {worst:.3e}, {elapsed:.1}s", model.stage_dims());
    if worst <= 1e-9 && elapsed < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_3(dir: &Path) -> Check {
    let image = load_image(dir.join("exemplar.png")).map_err(|e| e.to_string())?;
    // 157 patches give 157·64 > 10⁴ blocks per channel group at the second hop.
    let patches = random_crops(&image, 32, 157, 3).map_err(|e| e.to_string())?;
    let hops = [HopConfig::new(2, KeepPolicy::Total(6)), HopConfig::new(2, KeepPolicy::Total(12))];
    let model = fit_pipeline(&patches, &hops).map_err(|e| e.to_string())?;
    let stages: Vec<Vec<StageTensor>> = patches.patches().iter().map(|p| model.embed_stages(p).unwrap()).collect();
    let mut notes = Vec::new();
    let mut ok = true;
    for (h, hop) in model.hops().iter().enumerate() {
        let sites = model.spatial_sides()[h + 1].pow(2);
        let blocks = sites * patches.len();
        let mut error = 0.0;
        for s in &stages {
            let back = model.invert_stage(h + 1, &s[h + 1]).unwrap();
            error += back.data().iter().zip(s[h].data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        let measured = error / blocks as f64;
        let predicted: f64 = hop.groups.iter().map(|g| g.kernel.discarded_energy()).sum();
        let rel = (measured - predicted).abs() / predicted;
        ok &= rel <= 0.01 && blocks >= 10_000;
        notes.push(format!(
            "hop {h}: {blocks} blocks, error {measured:.6e} vs discarded {predicted:.6e} (rel {rel:.2e})"
        ));
    }
    if ok {
        Ok(notes.join("; "))
    } else {
        Err(notes.join("; "))
    }
}

fn core_samples(dir: &Path, crops: usize) -> DMatrix<f64> {
    let image = load_image(dir.join("exemplar.png")).unwrap();
    let patches = random_crops(&image, 32, crops, 4).unwrap();
    let model = fit_pipeline(&patches, &NitesConfig::default().hops).unwrap();
    let cols: Vec<f64> = patches
        .patches()
        .iter()
        .flat_map(|p| model.embed(p).unwrap().into_data())
        .collect();
    DMatrix::from_vec(model.core_dim(), patches.len(), cols)
}

fn criterion_4(samples: &DMatrix<f64>) -> Check {
    let config = GeneratorConfig {
        clusters: 8,
        vq_codebook: 0,
        ..GeneratorConfig::default()
    };
    let gen = fit_generator(samples, &config, 5).map_err(|e| e.to_string())?;
    let weights = gen.weights();
    if weights.len() != 8 {
        return Err(format!("formed {} clusters, expected 8", weights.len()));
    }
    let n = 1_000_000;
    let mut counts = [0usize; 8];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..n {
        counts[gen.sample_cluster_index(rng.random::<f64>()).unwrap()] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&weights)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let critical = ChiSquared::new(7.0).unwrap().inverse_cdf(0.99);
    let detail = format!("chi2 {chi2:.3} vs critical {critical:.3} (7 dof, alpha 0.01)");
    if chi2 < critical {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ks_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0_f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

fn criterion_5(samples: &DMatrix<f64>) -> Check {
    let config = GeneratorConfig {
        clusters: 1,
        vq_codebook: 0,
        reject_threshold: 0.0,
        // One cluster over every sample would otherwise retain ~1000 components.
        max_components: Some(128),
        ..GeneratorConfig::default()
    };
    let gen = fit_generator(samples, &config, 7).map_err(|e| e.to_string())?;
    let cluster = &gen.clusters()[0];
    let r = cluster.components();
    let training: Vec<_> = samples.column_iter().map(|c| cluster.analyze(&c.into_owned())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let generated: Vec<_> = (0..10_000).map(|_| gen.draw_components(&mut rng).unwrap().1).collect();
    let mut worst = (0.0_f64, 0);
    for k in 0..r {
        let mut a: Vec<f64> = training.iter().map(|v| v[k]).collect();
        let mut b: Vec<f64> = generated.iter().map(|v| v[k]).collect();
        let d = ks_statistic(&mut a, &mut b);
        if d > worst.0 {
            worst = (d, k);
        }
    }
    let detail = format!("{r} components, worst KS {:.4} at component {}", worst.0, worst.1);
    if r > 0 && worst.0 <= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Amari distance of `p`, scaled to lie in [0, 1].
fn amari(p: &DMatrix<f64>) -> f64 {
    let n = p.nrows();
    let a = p.abs();
    let rows: f64 = a.row_iter().map(|r| r.sum() / r.max() - 1.0).sum();
    let cols: f64 = a.column_iter().map(|c| c.sum() / c.max() - 1.0).sum();
    (rows + cols) / (2.0 * n as f64 * (n as f64 - 1.0))
}

fn criterion_6() -> Check {
    let (n, m) = (4, 100_000);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sources = DMatrix::from_fn(n, m, |_, _| rng.random_range(-3f64.sqrt()..3f64.sqrt()));
    let mixing = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = &mixing * &sources;
    let mean = x.column_mean();
    let centered = DMatrix::from_fn(n, m, |i, j| x[(i, j)] - mean[i]);
    let cov = &centered * centered.transpose() / m as f64;
    let eig = SymmetricEigen::new(cov);
    let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    let whitening = &scale * eig.eigenvectors.transpose();
    let white = &whitening * &centered;
    let fit = fastica(&white, 10).map_err(|e| e.to_string())?;
    let d = amari(&(&fit.unmixing * &whitening * &mixing));
    let detail = format!("Amari distance {d:.4}, {} iterations", fit.iterations);
    if d <= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn exhaustive_seam(band: &DMatrix<f64>) -> f64 {
    fn walk(band: &DMatrix<f64>, r: usize, c: usize, acc: f64) -> f64 {
        let acc = acc + band[(r, c)];
        if r + 1 == band.nrows() {
            return acc;
        }
        let hi = (c + 1).min(band.ncols() - 1);
        (c.saturating_sub(1)..=hi)
            .map(|k| walk(band, r + 1, k, acc))
            .fold(f64::INFINITY, f64::min)
    }
    (0..band.ncols()).map(|c| walk(band, 0, c, 0.0)).fold(f64::INFINITY, f64::min)
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in 0..200 {
        let (rows, cols) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let band = DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>());
        let dp = min_cut_seam(&band).map_err(|e| e.to_string())?.cost;
        let brute = exhaustive_seam(&band);
        if dp != brute {
            return Err(format!("band {t} ({rows}x{cols}): DP {dp} vs exhaustive {brute}"));
        }
    }
    Ok("200 bands up to 8x8, DP cost equals exhaustive minimum exactly".into())
}

fn criterion_8() -> Check {
    let spec = QuiltSpec::default();
    let patches = random_patches(20, 32, 12);
    let q = quilt(patches.patches(), &spec, 13).map_err(|e| e.to_string())?;
    let (declared, placed) = (spec.placements(), q.layout.placements.len());
    let detail = format!("256/32/4 grid: {declared} declared, {placed} placed");
    if declared == 81 && placed == 81 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn channel_stats(patches: impl Iterator<Item = Vec<f64>>) -> ([f64; 3], [f64; 3]) {
    let (mut sum, mut sq, mut n) = ([0.0; 3], [0.0; 3], 0usize);
    for data in patches {
        for px in data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c];
                sq[c] += px[c] * px[c];
            }
            n += 1;
        }
    }
    let mean = sum.map(|s| s / n as f64);
    let var = [0, 1, 2].map(|c| sq[c] / n as f64 - mean[c] * mean[c]);
    (mean, var)
}

fn bench(dir: &Path, out: &Path, threads: &str) -> Result<(Output, Duration), String> {
    let start = Instant::now();
    let out = nites(&[
        "bench",
        "--threads",
        threads,
        "--exemplar",
        dir.join("exemplar.png").to_str().unwrap(),
        "--count",
        "250",
        "--quilt-size",
        "128",
        "--overlap",
        "8",
        "--seed",
        "42",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    let elapsed = start.elapsed();
    if !out.status.success() {
        return Err(format!("bench failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok((out, elapsed))
}

fn criterion_9(dir: &Path) -> Check {
    let run = dir.join("bench_a");
    let (out, elapsed) = bench(dir, &run, "4")?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    let keys: Vec<&str> = stdout.lines().filter_map(|l| l.split('=').next()).collect();
    if keys != ["embed_seconds", "generate_seconds", "quilt_seconds", "patches", "placements"] {
        return Err(format!("unexpected report keys {keys:?}"));
    }
    let stderr = String::from_utf8_lossy(&out.stderr);
    if !stderr.contains("embed phase executed 1 time(s) across 2 generate call(s)") {
        return Err(format!("embed count not confirmed: {stderr}"));
    }
    let patches = stdout_value(&out, "patches");
    let placements = stdout_value(&out, "placements");
    if patches.as_deref() != Some("500") || placements.as_deref() != Some("25") {
        return Err(format!("patches {patches:?}, placements {placements:?}"));
    }

    let image = load_image(dir.join("exemplar.png")).unwrap();
    let training = nites_core::synth::training_patches(&image, &NitesConfig::default(), 42).unwrap();
    let (tm, tv) = channel_stats(training.patches().iter().map(|p| p.data().to_vec()));
    let mut files: Vec<_> = std::fs::read_dir(run.join("patches"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let (gm, gv) = channel_stats(files.iter().map(|f| load_image(f).unwrap().data().to_vec()));
    let mean_rel = [0, 1, 2].map(|c| (gm[c] - tm[c]).abs() / tm[c]);
    let var_rel = [0, 1, 2].map(|c| (gv[c] - tv[c]).abs() / tv[c]);
    let detail = format!(
        "{:.1}s, {} patch files, mean rel err {:.3?}, variance rel err {:.3?}, embed runs 1",
        elapsed.as_secs_f64(),
        files.len(),
        mean_rel,
        var_rel
    );
    let ok = elapsed < Duration::from_secs(300)
        && files.len() == 500
        && mean_rel.iter().all(|&e| e <= 0.05)
        && var_rel.iter().all(|&e| e <= 0.20);
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_10(dir: &Path) -> Check {
    let first = dir.join("bench_a");
    if !first.join("model.nites").is_file() {
        bench(dir, &first, "4")?;
    }
    let second = dir.join("bench_b");
    bench(dir, &second, "1")?;
    let (a, b) = (tree_bytes(&first), tree_bytes(&second));
    if a.len() != b.len() {
        return Err(format!("{} files vs {} files", a.len(), b.len()));
    }
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        if na != nb || ba != bb {
            return Err(format!("'{na}' differs from '{nb}'"));
        }
    }
    Ok(format!(
        "{} files identical across runs with 4 and 1 threads (model, patches, quilt)",
        a.len()
    ))
}

fn run(name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let ok = result.is_ok();
    match result {
        Ok(d) => println!("PASS criterion {name}: {d} [{secs:.1}s]"),
        Err(d) => println!("FAIL criterion {name}: {d} [{secs:.1}s]"),
    }
    std::io::Write::flush(&mut std::io::stdout()).ok();
    ok
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let dir = tmp.path();
    noisy_checkerboard(&dir.join("exemplar.png"));
    let samples = core_samples(dir, 3000);
    let results = [
        run("1 dimension chain", || criterion_1(dir)),
        run("2 lossless roundtrip", criterion_2),
        run("3 truncation energy", || criterion_3(dir)),
        run("4 cluster selection chi-square", || criterion_4(&samples)),
        run("5 marginal matching", || criterion_5(&samples)),
        run("6 FastICA recovery", criterion_6),
        run("7 seam optimality", criterion_7),
        run("8 quilting grid", criterion_8),
        run("9 desk-scale bench", || criterion_9(dir)),
        run("10 determinism", || criterion_10(dir)),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed} of {} criteria passed", results.len());
    if passed < results.len() {
        std::process::exit(1);
    }
}
