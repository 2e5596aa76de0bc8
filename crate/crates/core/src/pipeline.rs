//! End-to-end compression and decompression of a colored point cloud.
//!
//! Compression: normalize → divide into cells → select and tune seeds per
//! cell → quantize → entropy code. Decompression: decode → regroup seeds by
//! cell → regrow every occupied cell with the diffusion sampler →
//! concatenate → denormalize.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{
    self, dequantize_position, quantize_seeds, CodecError, SeedStream, DEFAULT_COLOR_BITS,
    DEFAULT_GEOMETRY_BITS,
};
use crate::diffusion::{
    num_rounds, sample_patch, Denoiser, DiffusionError, NoiseSchedule, DEFAULT_STEPS,
};
use crate::diffusion::{OracleDenoiser, SeedKernelDenoiser};
use crate::patching::{axis_cell, cell_coords, cell_index, divide, select_level, PatchError, DEFAULT_TARGET_POINTS};
use crate::pointset::{denormalize, normalize_with, CloudError, ColoredPointCloud, NormalizationScale};
use crate::tensor::Mat;
use crate::toydenoiser::ToyDenoiser;
use crate::tuning::{tune, TuneConfig, TuneLogEntry, TuningError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Tuning(#[from] TuningError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("the oracle denoiser needs the reference cloud")]
    MissingReference,
    #[error("inconsistent stream: {0}")]
    Inconsistent(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Which frozen noise predictor drives tuning and sampling.
#[derive(Clone, Debug)]
pub enum DenoiserChoice {
    /// Built from the (normalized) reference cloud; ignores the seeds.
    Oracle,
    SeedKernel(SeedKernelDenoiser),
    Toy(Arc<ToyDenoiser>),
}

impl DenoiserChoice {
    /// Instantiates the predictor. `reference` must already be normalized
    /// and is required only by [`DenoiserChoice::Oracle`].
    pub fn build(
        &self,
        reference: Option<&ColoredPointCloud>,
    ) -> Result<Box<dyn Denoiser>, PipelineError> {
        Ok(match self {
            DenoiserChoice::Oracle => Box::new(OracleDenoiser::new(
                reference.ok_or(PipelineError::MissingReference)?,
            )),
            DenoiserChoice::SeedKernel(k) => Box::new(*k),
            DenoiserChoice::Toy(m) => Box::new(Arc::clone(m)),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DenoiserChoice::Oracle => "oracle",
            DenoiserChoice::SeedKernel(_) => "seed-kernel",
            DenoiserChoice::Toy(_) => "checkpoint",
        }
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn predict<'t>(
        &self,
        x_t: crate::autodiff::Var<'t>,
        cond: crate::autodiff::Var<'t>,
        t: usize,
        sched: &NoiseSchedule,
    ) -> crate::autodiff::Var<'t> {
        (**self).predict(x_t, cond, t, sched)
    }

    fn eps(&self, x_t: &Mat, cond: &Mat, t: usize, sched: &NoiseSchedule) -> Mat {
        (**self).eps(x_t, cond, t, sched)
    }
}

#[derive(Clone, Debug)]
pub struct CompressConfig {
    /// Grid level; `None` picks the smallest level with at most
    /// `target_points` points per cell on average.
    pub level: Option<usize>,
    pub target_points: usize,
    /// Diffusion steps `T`.
    pub steps: usize,
    pub geometry_bits: u8,
    pub color_bits: u8,
    pub with_colors: bool,
    pub tune: TuneConfig,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            level: None,
            target_points: DEFAULT_TARGET_POINTS,
            steps: DEFAULT_STEPS,
            geometry_bits: DEFAULT_GEOMETRY_BITS,
            color_bits: DEFAULT_COLOR_BITS,
            with_colors: true,
            tune: TuneConfig::default(),
        }
    }
}

/// Summary of one compression run.
#[derive(Clone, Debug)]
pub struct CompressReport {
    pub points: usize,
    pub level: usize,
    pub seeds: usize,
    pub bytes: usize,
    pub bits: u64,
    pub bpp: f64,
    pub log: Vec<TuneLogEntry>,
    pub tune_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug)]
pub struct Compressed {
    pub bytes: Vec<u8>,
    pub stream: SeedStream,
    pub report: CompressReport,
}

/// Moves a quantized coordinate the least amount needed for its
/// dequantized value to fall in grid cell `cell` along that axis.
fn nudge_into_cell(mut i: u32, cell: usize, level: usize, q: u8) -> u32 {
    let max = (1u32 << q) - 1;
    while axis_cell(dequantize_position(i, q), level) < cell && i < max {
        i += 1;
    }
    while axis_cell(dequantize_position(i, q), level) > cell && i > 0 {
        i -= 1;
    }
    i
}

pub fn compress(
    cloud: &ColoredPointCloud,
    denoiser: &DenoiserChoice,
    cfg: &CompressConfig,
) -> Result<Compressed, PipelineError> {
    let start = Instant::now();
    if cloud.is_empty() {
        return Err(PipelineError::InvalidArgument("cloud has no points".into()));
    }
    if !(1..=255).contains(&cfg.steps) {
        return Err(PipelineError::InvalidArgument(format!(
            "step count {} outside [1, 255]",
            cfg.steps
        )));
    }
    let scale = NormalizationScale::fit_f32(cloud);
    let normalized = normalize_with(cloud, scale)?;
    let level = cfg
        .level
        .unwrap_or_else(|| select_level(cloud.len(), cfg.target_points));
    if (1usize << cfg.geometry_bits.min(31)) < level {
        return Err(PipelineError::InvalidArgument(format!(
            "{} geometry bits cannot resolve level {level}",
            cfg.geometry_bits
        )));
    }
    let (grid, patches) = divide(&normalized, level)?;
    let sched = NoiseSchedule::cosine(cfg.steps)?;
    let model = denoiser.build(Some(&normalized))?;

    let tune_start = Instant::now();
    let tuned = tune(&patches, grid.cell_edge(), &model, &sched, &cfg.tune)?;
    let tune_ms = tune_start.elapsed().as_secs_f64() * 1e3;

    let seeds = Mat::vstack(&tuned.seeds);
    let mut quantized = quantize_seeds(&seeds, cfg.geometry_bits, cfg.color_bits, cfg.with_colors)?;
    // keep every seed inside the cell it was tuned for after rounding
    let mut row = 0;
    for (patch, &cell) in tuned.seeds.iter().zip(&grid.occupied) {
        let coords = cell_coords(cell, level);
        for _ in 0..patch.rows() {
            let p = &mut quantized.positions[row];
            for a in 0..3 {
                p[a] = nudge_into_cell(p[a], coords[a], level, cfg.geometry_bits);
            }
            row += 1;
        }
    }
    let cell_rounds = grid
        .counts
        .iter()
        .map(|&n| if n == 0 { 0 } else { num_rounds(n).clamp(1, 255) as u8 })
        .collect();
    let stream = SeedStream {
        level: level as u8,
        cell_rounds,
        scale: scale.to_f32(),
        steps: cfg.steps as u8,
        geometry_bits: cfg.geometry_bits,
        color_bits: cfg.color_bits,
        seeds: quantized,
    };
    let bytes = codec::encode(&stream)?;
    let bits = codec::measure_bits(&bytes);
    let report = CompressReport {
        points: cloud.len(),
        level,
        seeds: seeds.rows(),
        bytes: bytes.len(),
        bits,
        bpp: bits as f64 / cloud.len() as f64,
        log: tuned.log,
        tune_ms,
        total_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(Compressed {
        bytes,
        stream,
        report,
    })
}

/// Seeds of every occupied cell, in ascending cell order, paired with the
/// cell index. Seeds are assigned to the cell containing their dequantized
/// position.
pub fn seeds_by_cell(stream: &SeedStream) -> Result<Vec<(usize, Mat)>, PipelineError> {
    let level = stream.level as usize;
    let rows = stream.seed_rows();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); level.pow(3)];
    for (i, r) in rows.iter_rows().enumerate() {
        members[cell_index(&[r[0], r[1], r[2]], level)].push(i);
    }
    let mut out = Vec::new();
    for (cell, (m, &rounds)) in members.iter().zip(&stream.cell_rounds).enumerate() {
        match (m.is_empty(), rounds == 0) {
            (true, true) => {}
            (false, false) => out.push((cell, rows.select_rows(m))),
            (true, false) => {
                return Err(PipelineError::Inconsistent(format!(
                    "cell {cell} is occupied but holds no seeds"
                )))
            }
            (false, true) => {
                return Err(PipelineError::Inconsistent(format!(
                    "cell {cell} holds seeds but is marked empty"
                )))
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DecompressConfig {
    pub seed: u64,
    /// Worker threads for per-cell sampling; results do not depend on it.
    pub jobs: usize,
}

impl Default for DecompressConfig {
    fn default() -> Self {
        Self { seed: 0, jobs: 1 }
    }
}

/// Regrows the cloud from a stream. `reference` is the original (world
/// space) cloud and is needed only by the oracle denoiser.
pub fn decompress(
    bytes: &[u8],
    denoiser: &DenoiserChoice,
    reference: Option<&ColoredPointCloud>,
    cfg: &DecompressConfig,
) -> Result<ColoredPointCloud, PipelineError> {
    let stream = codec::decode(bytes)?;
    decompress_stream(&stream, denoiser, reference, cfg)
}

pub fn decompress_stream(
    stream: &SeedStream,
    denoiser: &DenoiserChoice,
    reference: Option<&ColoredPointCloud>,
    cfg: &DecompressConfig,
) -> Result<ColoredPointCloud, PipelineError> {
    if cfg.jobs == 0 {
        return Err(PipelineError::InvalidArgument("jobs must be >= 1".into()));
    }
    let scale = stream.normalization();
    let normalized_ref = reference.map(|r| normalize_with(r, scale)).transpose()?;
    let model = denoiser.build(normalized_ref.as_ref())?;
    let sched = NoiseSchedule::cosine(stream.steps as usize)?;
    let cells = seeds_by_cell(stream)?;
    let sample = |(cell, seeds): &(usize, Mat)| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(*cell as u64);
        let rounds = stream.cell_rounds[*cell] as usize;
        // the round count is what the stream stores; any count in its rounding bucket works
        sample_patch(&model, seeds, rounds * crate::diffusion::ROUND_POINTS, &sched, &mut rng)
    };
    let parts: Vec<ColoredPointCloud> = if cfg.jobs == 1 {
        cells.iter().map(sample).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| PipelineError::InvalidArgument(e.to_string()))?;
        pool.install(|| cells.par_iter().map(sample).collect::<Result<_, _>>())?
    };
    let cloud = ColoredPointCloud::concat(&parts)?;
    Ok(denormalize(&cloud, scale))
}

/// Points a stream will regrow: `3072 · Σ rounds`.
pub fn output_points(stream: &SeedStream) -> usize {
    stream
        .cell_rounds
        .iter()
        .map(|&r| r as usize * crate::diffusion::ROUND_POINTS)
        .sum()
}
