use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nites_core::format::read_manifest;
use nites_core::synth::{generate_stages, patch_rng};
use nites_core::{
    load_image, load_model, quilt, save_image, save_model, Error, NitesConfig, NitesModel, Patch, QuiltSpec,
    RgbImage, Session,
};

#[derive(Parser)]
#[command(name = "nites", version, about = "Non-parametric texture synthesis")]
struct Cli {
    /// Worker threads; defaults to the machine's parallelism. NITES_THREADS overrides.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to an exemplar image.
    Fit(FitArgs),
    /// Generate patches from a fitted model.
    Generate(GenerateArgs),
    /// Quilt a directory of patches into one image.
    Quilt(QuiltArgs),
    /// Fit once, generate twice and quilt once, reporting phase timings.
    Bench(BenchArgs),
    /// Print a model's manifest and stage dimensions.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of key=value lines, applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base configuration: default, auto, a, b, c, d, three-hop-64.
    #[arg(long, default_value = "default")]
    preset: String,
    /// Extra key=value overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    num_crops: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<NitesConfig> {
        let mut config = NitesConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            config.apply_kv(&text)?;
        }
        config.apply_kv(&self.overrides.join("\n"))?;
        if let Some(p) = self.patch_size {
            config.patch_size = p;
        }
        if let Some(n) = self.num_crops {
            config.num_crops = n;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    exemplar: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Also write the DC plane of every intermediate stage of the first patch.
    #[arg(long)]
    dump_stages: bool,
}

#[derive(Args)]
struct QuiltArgs {
    /// Directory of square PNG/PPM patches, used in file-name order.
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 32)]
    patch_size: usize,
    #[arg(long, default_value_t = 4)]
    overlap: usize,
    #[arg(long, default_value_t = 0.1)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    exemplar: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Patches per generate call; the report counts both calls.
    #[arg(long, default_value_t = 250)]
    count: usize,
    #[arg(long)]
    quilt_size: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Write the model, patches and quilt here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Argument(msg.into()).into()
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} '{}' does not exist", path.display())));
    }
    Ok(())
}

fn format_dims(model: &NitesModel) -> String {
    let dims: Vec<String> = model.pipeline.stage_dims().iter().map(usize::to_string).collect();
    dims.join(" -> ")
}

fn print_dims(model: &NitesModel) {
    let ratio = model.pipeline.reduction_ratio();
    println!("stage_dims={}", format_dims(model));
    println!("reduction_ratio={ratio} ({:.2}%)", ratio * 100.0);
}

fn patch_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("patch_{index:05}.png"))
}

fn write_patches(dir: &Path, patches: &[Patch], offset: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, p) in patches.iter().enumerate() {
        save_image(&p.clone().into_image(), patch_path(dir, offset + i))?;
    }
    Ok(())
}

/// Min-max normalized gray image of one channel plane.
fn plane_image(side: usize, plane: &[f64]) -> Result<RgbImage> {
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(RgbImage::from_fn(side, side, |x, y| [(plane[y * side + x] - lo) / span; 3])?)
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    require_file(&args.exemplar, "exemplar")?;
    let config = args.config.resolve()?;
    let exemplar = load_image(&args.exemplar)?;
    let start = Instant::now();
    let model = nites_core::fit(&exemplar, &config, args.seed)?;
    let seconds = start.elapsed().as_secs_f64();
    save_model(&model, &args.out)?;
    print_dims(&model);
    println!("clusters={}", model.generator.clusters().len());
    println!("embed_seconds={seconds:.6}");
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    if args.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    require_file(&args.model, "model")?;
    let model = load_model(&args.model)?;
    let mut session = Session::from_model(model);
    let patches = session.generate(args.count, args.seed)?;
    write_patches(&args.out, &patches, 0)?;
    if args.dump_stages {
        let stages = generate_stages(session.model(), &mut patch_rng(args.seed, 0))?;
        for (s, t) in stages.iter().enumerate() {
            let path = args.out.join(format!("stages_00000_{s}_dc.png"));
            save_image(&plane_image(t.side(), &t.plane(0))?, path)?;
        }
    }
    let r = session.report();
    println!("generate_seconds={:.6}", r.generate_seconds);
    println!("patches={}", r.patches);
    Ok(())
}

fn read_patch_dir(dir: &Path, side: usize) -> Result<Vec<Patch>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("no PNG or PPM patches in '{}'", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let patch = Patch::from_image(load_image(p)?)?;
            if patch.side() != side {
                return Err(usage(format!(
                    "patch '{}' has side {}, expected {side}",
                    p.display(),
                    patch.side()
                )));
            }
            Ok(patch)
        })
        .collect()
}

fn cmd_quilt(args: &QuiltArgs) -> Result<()> {
    let spec = QuiltSpec {
        out_side: args.size,
        patch_side: args.patch_size,
        overlap: args.overlap,
        candidate_tolerance: args.tolerance,
    };
    spec.validate()?;
    if !args.patches.is_dir() {
        return Err(usage(format!("patch directory '{}' does not exist", args.patches.display())));
    }
    let patches = read_patch_dir(&args.patches, args.patch_size)?;
    let start = Instant::now();
    let q = quilt(&patches, &spec, args.seed)?;
    let seconds = start.elapsed().as_secs_f64();
    save_image(&q.image, &args.out)?;
    println!("quilt_seconds={seconds:.6}");
    println!("placements={}", q.layout.placements.len());
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    require_file(&args.exemplar, "exemplar")?;
    if args.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let mut config = args.config.resolve()?;
    if let Some(s) = args.quilt_size {
        config.quilt_size = s;
    }
    if let Some(o) = args.overlap {
        config.quilt_overlap = o;
    }
    if let Some(t) = args.tolerance {
        config.quilt_tolerance = t;
    }
    config.validate()?;
    let exemplar = load_image(&args.exemplar)?;

    let mut session = Session::fit(&exemplar, &config, args.seed)?;
    let mut patches = session.generate(args.count, args.seed.wrapping_add(1))?;
    patches.extend(session.generate(args.count, args.seed.wrapping_add(2))?);
    let q = session.quilt(&patches, &config.quilt_spec(), args.seed.wrapping_add(3))?;

    let report = session.report();
    if report.embed_runs != 1 {
        bail!("embed phase ran {} times, expected once", report.embed_runs);
    }
    eprintln!(
        "embed phase executed {} time(s) across {} generate call(s)",
        report.embed_runs, report.generate_runs
    );
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_model(session.model(), dir.join("model.nites"))?;
        write_patches(&dir.join("patches"), &patches, 0)?;
        save_image(&q.image, dir.join("quilt.png"))?;
    }
    print!("{}", report.to_kv());
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    require_file(&args.model, "model")?;
    print!("{}", read_manifest(&args.model)?);
    let model = load_model(&args.model)?;
    print_dims(&model);
    let (side, channels) = model.core_shape();
    println!("core_shape={side}x{side}x{channels}");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Argument(_) | Error::Config(_)) => 2,
        Some(Error::Io { .. } | Error::Format(_) | Error::Load { .. } | Error::Version { .. }) => 3,
        Some(Error::Fit(_) | Error::Sampling(_)) => 4,
        None => 4,
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var("NITES_THREADS") {
        Ok(v) if !v.trim().is_empty() => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("NITES_THREADS='{v}' is not a thread count"))
                .map_err(|e| usage(format!("{e:#}")))?;
            Ok(Some(n))
        }
        _ => Ok(flag),
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(usage("thread count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Quilt(a) => cmd_quilt(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
