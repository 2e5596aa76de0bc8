//! Argument definitions and the body of every subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use seedpc::codec::{self, DEFAULT_COLOR_BITS, DEFAULT_GEOMETRY_BITS};
use seedpc::diffusion::{SeedKernelDenoiser, DEFAULT_STEPS};
use seedpc::metrics::{
    bd_psnr, bpp, chamfer_geometry, psnr_color, psnr_geometry, GeometryMode, PsnrFormula, RdCurve,
};
use seedpc::patching::DEFAULT_TARGET_POINTS;
use seedpc::pipeline::{self, CompressConfig, DecompressConfig, DenoiserChoice};
use seedpc::pointset::{load_ply, save_ply, ColoredPointCloud, PlyLoad};
use seedpc::toydenoiser::{self, Coloring, ShapeKind, ToyDenoiser, TrainConfig};
use seedpc::tuning::{self, LossKind, TuneConfig};

use crate::report::{number, text};

#[derive(Debug, Parser)]
#[command(name = "seedpc", version, about = "Point cloud compression with prompt-tuned diffusion seeds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a PLY file into a .spcz stream.
    Compress(CompressArgs),
    /// Regrow a point cloud from a .spcz stream.
    Decompress(DecompressArgs),
    /// Compare a reconstruction with its ground truth.
    Eval(EvalArgs),
    /// Train the small learned denoiser on synthetic shapes.
    TrainDenoiser(TrainArgs),
    /// Sweep grid levels over a directory of PLY files.
    Bench(BenchArgs),
}

/// `oracle`, `seed-kernel`, or the path of a trained checkpoint.
fn parse_denoiser(name: &str) -> Result<DenoiserChoice> {
    Ok(match name {
        "oracle" => DenoiserChoice::Oracle,
        "seed-kernel" => DenoiserChoice::SeedKernel(SeedKernelDenoiser::default()),
        path => DenoiserChoice::Toy(Arc::new(
            ToyDenoiser::load(Path::new(path))
                .with_context(|| format!("loading denoiser checkpoint {path}"))?,
        )),
    })
}

#[derive(Debug, Args, Clone)]
pub struct TuneArgs {
    /// Grid level; chosen from the point count when omitted.
    #[arg(long)]
    pub level: Option<usize>,
    #[arg(long, default_value_t = tuning::DEFAULT_ITERATIONS)]
    pub iterations: usize,
    #[arg(long, default_value_t = tuning::DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value = "cdm", value_parser = clap::value_parser!(LossKind))]
    pub loss: LossKind,
    /// Diffusion steps.
    #[arg(long = "steps", short = 'T', default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    /// Geometry quantization bits.
    #[arg(long, short = 'q', default_value_t = DEFAULT_GEOMETRY_BITS)]
    pub q: u8,
    #[arg(long, default_value_t = DEFAULT_COLOR_BITS)]
    pub color_bits: u8,
    /// Drop seed colors from the stream.
    #[arg(long)]
    pub no_colors: bool,
    #[arg(long, default_value_t = tuning::DEFAULT_SEEDS)]
    pub seeds_per_patch: usize,
    #[arg(long, default_value_t = tuning::DEFAULT_NEIGHBORS)]
    pub neighbors: usize,
    #[arg(long, default_value_t = tuning::DEFAULT_RADIUS)]
    pub radius: f64,
    /// Points per patch used to pick the level when `--level` is absent.
    #[arg(long, default_value_t = DEFAULT_TARGET_POINTS)]
    pub target_points: usize,
    /// `oracle`, `seed-kernel` or a checkpoint path.
    #[arg(long, default_value = "oracle")]
    pub denoiser: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parallel patch workers.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

impl TuneArgs {
    fn config(&self, level: Option<usize>, iterations: usize) -> CompressConfig {
        CompressConfig {
            level,
            target_points: self.target_points,
            steps: self.steps,
            geometry_bits: self.q,
            color_bits: self.color_bits,
            with_colors: !self.no_colors,
            tune: TuneConfig {
                iterations,
                lr: self.lr,
                loss: self.loss,
                seeds_per_patch: self.seeds_per_patch,
                neighbors: self.neighbors,
                radius: self.radius,
                seed: self.seed,
                jobs: self.jobs,
                ..TuneConfig::default()
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    #[command(flatten)]
    pub tune: TuneArgs,
    /// JSON report path; printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-iteration tuning loss CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn load(path: &Path) -> Result<PlyLoad> {
    load_ply(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(value: &Value, path: Option<&Path>) -> Result<()> {
    let body = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

pub fn compress(args: CompressArgs) -> Result<()> {
    let cloud = load(&args.input)?.cloud;
    let choice = parse_denoiser(&args.tune.denoiser)?;
    let cfg = args.tune.config(args.tune.level, args.tune.iterations);
    let out = pipeline::compress(&cloud, &choice, &cfg).context("compressing")?;
    fs::write(&args.output, &out.bytes)
        .with_context(|| format!("writing {}", args.output.display()))?;
    if let Some(p) = &args.log {
        fs::write(p, tuning::log_csv(&out.report.log))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    let r = &out.report;
    let report = json!({
        "input": args.input.display().to_string(),
        "output": args.output.display().to_string(),
        "points": r.points,
        "level": r.level,
        "seeds": r.seeds,
        "bytes": r.bytes,
        "bits": r.bits,
        "bpp": number(r.bpp),
        "denoiser": choice.name(),
        "loss": cfg.tune.loss.name(),
        "iterations": cfg.tune.iterations,
        "lr": cfg.tune.lr,
        "steps": cfg.steps,
        "q": cfg.geometry_bits,
        "seed": cfg.tune.seed,
        "jobs": cfg.tune.jobs,
        "tune_ms": r.tune_ms,
        "wall_ms": r.total_ms,
        "loss_history": r.log.iter().map(|e| number(e.loss)).collect::<Vec<_>>(),
    });
    emit(&report, args.report.as_deref())
}

#[derive(Debug, Args)]
pub struct DecompressArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    /// `oracle`, `seed-kernel` or a checkpoint path.
    #[arg(long, default_value = "oracle")]
    pub denoiser: String,
    /// Original cloud, required by the oracle denoiser.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Write ASCII instead of binary PLY.
    #[arg(long)]
    pub ascii: bool,
}

pub fn decompress(args: DecompressArgs) -> Result<()> {
    let bytes = fs::read(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let choice = parse_denoiser(&args.denoiser)?;
    let reference = args.reference.as_deref().map(load).transpose()?.map(|l| l.cloud);
    let cfg = DecompressConfig {
        seed: args.seed,
        jobs: args.jobs,
    };
    let cloud = pipeline::decompress(&bytes, &choice, reference.as_ref(), &cfg)
        .with_context(|| format!("decompressing {}", args.input.display()))?;
    save_ply(&cloud, &args.output, !args.ascii)
        .with_context(|| format!("writing {}", args.output.display()))?;
    eprintln!("wrote {} points to {}", cloud.len(), args.output.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub rec: PathBuf,
    /// Compressed stream, for the rate.
    #[arg(long)]
    pub stream: Option<PathBuf>,
    #[arg(long, default_value = "mpeg", value_parser = clap::value_parser!(PsnrFormula))]
    pub psnr_formula: PsnrFormula,
    /// JSON report path; printed to stdout when omitted.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Also write the report as a one-row CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// One line of an evaluation report.
pub struct Metrics {
    pub file: String,
    pub bpp: Option<f64>,
    pub d1: f64,
    pub d2: f64,
    pub d3: Option<f64>,
    pub cd: f64,
    pub runtime_ms: f64,
}

pub const METRICS_HEADER: &str = "file,bpp,d1,d2,d3,cd,runtime_ms";

impl Metrics {
    fn json(&self, formula: PsnrFormula) -> Value {
        json!({
            "file": self.file,
            "bpp": self.bpp.map(number),
            "d1": number(self.d1),
            "d2": number(self.d2),
            "d3": self.d3.map(number),
            "cd": number(self.cd),
            "runtime_ms": self.runtime_ms,
            "psnr_formula": formula.name(),
        })
    }

    fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(text).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.file,
            opt(self.bpp),
            text(self.d1),
            text(self.d2),
            opt(self.d3),
            text(self.cd),
            self.runtime_ms
        )
    }
}

/// All distortion measures of `rec` against `gt`. Color PSNR is skipped when
/// the ground truth carried no colors.
pub fn measure(
    file: String,
    gt: &PlyLoad,
    rec: &ColoredPointCloud,
    bits: Option<u64>,
    formula: PsnrFormula,
) -> Result<Metrics> {
    let start = Instant::now();
    let (g, r) = (gt.cloud.positions(), rec.positions());
    let d1 = psnr_geometry(g, r, GeometryMode::D1, formula)?;
    let d2 = psnr_geometry(g, r, GeometryMode::D2, formula)?;
    let d3 = (!gt.colors_filled).then(|| psnr_color(&gt.cloud, rec));
    let cd = chamfer_geometry(&gt.cloud, rec);
    let bpp = bits.map(|b| bpp(b, gt.cloud.len())).transpose()?;
    Ok(Metrics {
        file,
        bpp,
        d1,
        d2,
        d3,
        cd,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let gt = load(&args.gt)?;
    let rec = load(&args.rec)?.cloud;
    let bits = match &args.stream {
        Some(p) => Some(codec::measure_bits(
            &fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        )),
        None => None,
    };
    let m = measure(args.rec.display().to_string(), &gt, &rec, bits, args.psnr_formula)?;
    if let Some(p) = &args.csv {
        fs::write(p, format!("{METRICS_HEADER}\n{}\n", m.csv_row()))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    emit(&m.json(args.psnr_formula), args.json.as_deref())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, short)]
    pub output: PathBuf,
    /// Loss CSV path; defaults to the checkpoint path with a `.losses.csv` suffix.
    #[arg(long)]
    pub losses: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub seeds: usize,
    #[arg(long, default_value_t = 1024)]
    pub shape_points: usize,
    #[arg(long, value_delimiter = ',', default_value = "sphere,box,torus")]
    pub shapes: Vec<ShapeKind>,
    #[arg(long, value_delimiter = ',', default_value = "gradient,checker")]
    pub colorings: Vec<Coloring>,
    #[arg(long, default_value_t = toydenoiser::DEFAULT_HIDDEN)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        steps: args.steps,
        lr: args.lr,
        batch: args.batch,
        seeds: args.seeds,
        shape_points: args.shape_points,
        shapes: args.shapes,
        colorings: args.colorings,
        hidden: args.hidden,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let out = toydenoiser::train(&cfg).context("training")?;
    out.model.save(&args.output)?;
    let losses = args.losses.unwrap_or_else(|| {
        let mut name = args.output.clone().into_os_string();
        name.push(".losses.csv");
        PathBuf::from(name)
    });
    fs::write(&losses, toydenoiser::losses_csv(&out.losses))
        .with_context(|| format!("writing {}", losses.display()))?;
    if !out.losses.is_empty() {
        let window = (out.losses.len() / 10).clamp(1, 100);
        let (first, last) = toydenoiser::smoothed_ends(&out.losses, window);
        eprintln!("loss {first:.4} -> {last:.4} over {} steps", out.losses.len());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Directory of PLY files.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub levels: Vec<usize>,
    /// Output directory for the per-file curves and the BD-PSNR table.
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tune: TuneArgs,
    #[arg(long, default_value = "mpeg", value_parser = clap::value_parser!(PsnrFormula))]
    pub psnr_formula: PsnrFormula,
}

/// BD-PSNR of `test` over `reference` for one metric column, or the reason
/// it could not be computed.
fn bd_entry(reference: &[(f64, f64)], test: &[(f64, f64)]) -> String {
    let curve = |pts: &[(f64, f64)]| {
        let mut pts = pts.to_vec();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        RdCurve::new(pts)
    };
    match (curve(reference), curve(test)) {
        (Ok(r), Ok(t)) => match bd_psnr(&r, &t) {
            Ok(v) => text(v),
            Err(e) => format!("n/a ({e})"),
        },
        (Err(e), _) | (_, Err(e)) => format!("n/a ({e})"),
    }
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(&args.corpus)
        .with_context(|| format!("listing {}", args.corpus.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .ply files in {}", args.corpus.display());
    }
    fs::create_dir_all(&args.out)?;
    let choice = parse_denoiser(&args.tune.denoiser)?;
    let dcfg = DecompressConfig {
        seed: args.tune.seed,
        jobs: args.tune.jobs,
    };
    let mut table = String::from("file,metric,bd_psnr\n");
    for path in &files {
        let gt = load(path)?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let mut csv = format!("variant,level,{METRICS_HEADER}\n");
        let mut curves: [Vec<Vec<(f64, f64)>>; 2] = [vec![Vec::new(); 3], vec![Vec::new(); 3]];
        for &level in &args.levels {
            for (v, (variant, iterations)) in [("tuned", args.tune.iterations), ("untuned", 0)].into_iter().enumerate() {
                let cfg = args.tune.config(Some(level), iterations);
                let out = pipeline::compress(&gt.cloud, &choice, &cfg)
                    .with_context(|| format!("compressing {} at level {level}", path.display()))?;
                let rec = pipeline::decompress(&out.bytes, &choice, Some(&gt.cloud), &dcfg)?;
                let m = measure(stem.clone(), &gt, &rec, Some(out.report.bits), args.psnr_formula)?;
                let rate = m.bpp.unwrap_or(f64::NAN);
                for (k, d) in [Some(m.d1), Some(m.d2), m.d3].into_iter().enumerate() {
                    if let Some(d) = d {
                        curves[v][k].push((rate, d));
                    }
                }
                csv.push_str(&format!("{variant},{level},{}\n", m.csv_row()));
            }
        }
        let curve_path = args.out.join(format!("{stem}_rd.csv"));
        fs::write(&curve_path, csv).with_context(|| format!("writing {}", curve_path.display()))?;
        for (k, name) in ["d1", "d2", "d3"].into_iter().enumerate() {
            if curves[0][k].is_empty() {
                continue;
            }
            table.push_str(&format!("{stem},{name},{}\n", bd_entry(&curves[1][k], &curves[0][k])));
        }
    }
    let table_path = args.out.join("bd_psnr.csv");
    fs::write(&table_path, &table).with_context(|| format!("writing {}", table_path.display()))?;
    print!("{table}");
    Ok(())
}
