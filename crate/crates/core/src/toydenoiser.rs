//! A small trainable conditional noise predictor, procedural training shapes
//! and the training loop.
//!
//! Architecture, with hidden width `h`:
//!
//! * seed features `F = relu(cond·Wc + bc)` (K×h);
//! * for every noisy row, inverse-distance weights over its 8 nearest seeds
//!   (6-D, measured from `x_t/√ᾱ_t`) give a blended seed feature `agg` and a
//!   blended seed row `s̄`; the offset `(x_t − √ᾱ_t·s̄)/√(1−ᾱ_t)` is an input;
//! * `H0 = relu(x_t·Wx + offset·Wo + agg + (emb(t)·Wt + b0))` with a
//!   sinusoidal step embedding;
//! * two `h×h` relu layers and a linear `h×6` output.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{sinusoidal_embedding, Tape, Var};
use crate::diffusion::{
    add_noise, gaussian, idw_blend, nearest_seed_rows, Denoiser, NoiseSchedule, ScheduleConfig,
    FULL_STEPS,
};
use crate::pointset::{sample_indices, ColoredPointCloud};
use crate::spatial::farthest_point_sample;
use crate::tensor::Mat;
use crate::tuning::Adam;

pub const DEFAULT_HIDDEN: usize = 64;
pub const SEED_NEIGHBORS: usize = 8;
/// Softening length of the inverse-distance weights.
pub const KERNEL_TAU: f64 = 0.05;

const MAGIC: &[u8; 4] = b"SPTD";
const VERSION: u32 = 1;
const DIVERGENCE: f64 = 1e6;

const NAMES: [&str; 12] = [
    "seed.w", "seed.b", "point.w", "offset.w", "time.w", "in.b", "h1.w", "h1.b", "h2.w", "h2.b",
    "out.w", "out.b",
];

fn shapes(h: usize) -> [(usize, usize); 12] {
    [
        (6, h),
        (1, h),
        (6, h),
        (6, h),
        (h, h),
        (1, h),
        (h, h),
        (1, h),
        (h, h),
        (1, h),
        (h, 6),
        (1, 6),
    ]
}

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Parameters of the toy denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser {
    hidden: usize,
    params: Vec<Mat>,
}

impl ToyDenoiser {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn random<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        assert!(hidden >= 2, "hidden width must be >= 2");
        let params = shapes(hidden)
            .iter()
            .map(|&(r, c)| {
                if r == 1 {
                    Mat::zeros(r, c)
                } else {
                    let bound = 1.0 / (r as f64).sqrt();
                    Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-bound..bound)).collect())
                }
            })
            .collect();
        Self { hidden, params }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    /// Forward pass with the parameters given as tape values, in
    /// [`params`](Self::params) order.
    pub fn forward<'t>(
        &self,
        p: &[Var<'t>],
        x_t: Var<'t>,
        cond: Var<'t>,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Var<'t> {
        let tape = x_t.tape();
        let rows = x_t.rows();
        let ab = sched.alpha_bar(t);
        let feats = cond.matmul(p[0]).add_row(p[1]).relu();
        let query = x_t.scale(1.0 / ab.sqrt());
        let (idx, m) = nearest_seed_rows(&query.value(), &cond.value(), SEED_NEIGHBORS);
        let w = idw_blend(query, cond, &idx, m, KERNEL_TAU * KERNEL_TAU);
        let agg = feats.gather_rows(&idx).mul_col(w).group_sum_rows(m);
        let blend = cond.gather_rows(&idx).mul_col(w).group_sum_rows(m);
        let offset = (x_t - blend.scale(ab.sqrt())).scale(1.0 / (1.0 - ab).sqrt());
        let temb = tape.constant(sinusoidal_embedding(t as f64, self.hidden));
        let bias = temb.matmul(p[4]) + p[5];
        let h0 = (x_t.matmul(p[2]) + offset.matmul(p[3]) + agg + bias.broadcast_rows(rows)).relu();
        let h1 = h0.matmul(p[6]).add_row(p[7]).relu();
        let h2 = h1.matmul(p[8]).add_row(p[9]).relu();
        h2.matmul(p[10]).add_row(p[11])
    }

    /// Checkpoint bytes: magic, version, tensor count, a `(name, rows, cols)`
    /// table, then every value as a little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, m) in NAMES.iter().zip(&self.params) {
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        }
        for m in &self.params {
            for &v in m.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, ToyError> {
        let bad = |m: &str| ToyError::Format(m.to_string());
        let mut take = |n: usize| -> Result<Vec<u8>, ToyError> {
            let mut buf = vec![0; n];
            bytes
                .read_exact(&mut buf)
                .map_err(|_| ToyError::Format("truncated checkpoint".into()))?;
            Ok(buf)
        };
        let u32_at = |b: Vec<u8>| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if take(4)? != MAGIC {
            return Err(bad("missing SPTD magic"));
        }
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(ToyError::Format(format!("unsupported version {version}")));
        }
        let count = u32_at(take(4)?) as usize;
        if count != NAMES.len() {
            return Err(ToyError::Format(format!("expected {} tensors, found {count}", NAMES.len())));
        }
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = take(1)?[0] as usize;
            let name = String::from_utf8(take(len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rows = u32_at(take(4)?) as usize;
            let cols = u32_at(take(4)?) as usize;
            table.push((name, rows, cols));
        }
        let hidden = table[0].2;
        let expect = shapes(hidden);
        for (i, (name, r, c)) in table.iter().enumerate() {
            if name != NAMES[i] || (*r, *c) != expect[i] {
                return Err(ToyError::Format(format!(
                    "tensor {i} is {name} {r}x{c}, expected {} {}x{}",
                    NAMES[i], expect[i].0, expect[i].1
                )));
            }
        }
        let mut params = Vec::with_capacity(count);
        for &(r, c) in &expect {
            let raw = take(4 * r * c)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect::<Vec<_>>();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite parameter"));
            }
            params.push(Mat::from_vec(r, c, data));
        }
        if !bytes.is_empty() {
            return Err(bad("trailing bytes after parameters"));
        }
        Ok(Self { hidden, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), ToyError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ToyError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl Denoiser for ToyDenoiser {
    fn predict<'t>(&self, x_t: Var<'t>, cond: Var<'t>, t: usize, sched: &NoiseSchedule) -> Var<'t> {
        let tape = x_t.tape();
        let p: Vec<Var<'t>> = self.params.iter().map(|m| tape.constant(m.clone())).collect();
        self.forward(&p, x_t, cond, t, sched)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Box,
    Torus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Coloring {
    /// `rgb = ((x+1)/2, (y+1)/2, (z+1)/2)`, clamped to `[0, 1]`.
    Gradient,
    /// Two colors alternating over a lattice of 0.5-wide cubes.
    Checker,
}

impl FromStr for ShapeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sphere" => Ok(ShapeKind::Sphere),
            "box" => Ok(ShapeKind::Box),
            "torus" => Ok(ShapeKind::Torus),
            _ => Err(format!("unknown shape '{s}' (expected sphere, box or torus)")),
        }
    }
}

impl FromStr for Coloring {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gradient" => Ok(Coloring::Gradient),
            "checker" => Ok(Coloring::Checker),
            _ => Err(format!("unknown coloring '{s}' (expected gradient or checker)")),
        }
    }
}

pub const SPHERE_RADIUS: f64 = 0.8;
pub const BOX_EXTENT: f64 = 0.6;
pub const TORUS_MAJOR: f64 = 0.6;
pub const TORUS_MINOR: f64 = 0.2;

/// `n` points uniformly distributed over the surface of a centered shape
/// (sphere of radius 0.8, cube of half-extent 0.6, or torus with radii 0.6
/// and 0.2 around the z axis), colored by `coloring`.
pub fn synth_shape<R: Rng + ?Sized>(
    kind: ShapeKind,
    n: usize,
    coloring: Coloring,
    rng: &mut R,
) -> Result<ColoredPointCloud, ToyError> {
    if n == 0 {
        return Err(ToyError::InvalidArgument("point count must be >= 1".into()));
    }
    let mut positions = Vec::with_capacity(n);
    while positions.len() < n {
        let p = match kind {
            ShapeKind::Sphere => {
                let g = gaussian(1, 3, rng);
                let v = g.as_slice();
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len < 1e-12 {
                    continue;
                }
                [SPHERE_RADIUS * v[0] / len, SPHERE_RADIUS * v[1] / len, SPHERE_RADIUS * v[2] / len]
            }
            ShapeKind::Box => {
                let face = rng.random_range(0..6);
                let e = BOX_EXTENT;
                let (u, v) = (rng.random_range(-e..=e), rng.random_range(-e..=e));
                let s = if face % 2 == 0 { -e } else { e };
                match face / 2 {
                    0 => [s, u, v],
                    1 => [u, s, v],
                    _ => [u, v, s],
                }
            }
            ShapeKind::Torus => {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                // area element is proportional to R + r·cos φ
                let accept = (TORUS_MAJOR + TORUS_MINOR * phi.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                if rng.random::<f64>() > accept {
                    continue;
                }
                let ring = TORUS_MAJOR + TORUS_MINOR * phi.cos();
                [ring * theta.cos(), ring * theta.sin(), TORUS_MINOR * phi.sin()]
            }
        };
        positions.push(p);
    }
    let colors = positions.iter().map(|p| color_of(p, coloring)).collect();
    ColoredPointCloud::new(positions, colors).map_err(|e| ToyError::InvalidArgument(e.to_string()))
}

fn color_of(p: &[f64; 3], coloring: Coloring) -> [f64; 3] {
    match coloring {
        Coloring::Gradient => p.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)),
        Coloring::Checker => {
            let parity: i64 = p.iter().map(|v| ((v + 1.0) * 2.0).floor() as i64).sum();
            if parity.rem_euclid(2) == 0 {
                [0.9, 0.2, 0.2]
            } else {
                [0.2, 0.3, 0.9]
            }
        }
    }
}

/// Settings of [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Noisy rows per step.
    pub batch: usize,
    /// Seed rows per step, chosen by farthest point sampling.
    pub seeds: usize,
    /// Points per generated shape.
    pub shape_points: usize,
    pub shapes: Vec<ShapeKind>,
    pub colorings: Vec<Coloring>,
    /// Length of the cosine schedule whose steps are drawn uniformly.
    pub schedule_steps: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch: 256,
            seeds: 64,
            shape_points: 1024,
            shapes: vec![ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Torus],
            colorings: vec![Coloring::Gradient, Coloring::Checker],
            schedule_steps: FULL_STEPS,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: ToyDenoiser,
    /// Loss of every step.
    pub losses: Vec<f64>,
}

/// Adam on the mean squared noise-prediction error over generated shapes.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput, ToyError> {
    if cfg.shapes.is_empty() || cfg.colorings.is_empty() {
        return Err(ToyError::InvalidArgument("no shapes or colorings to train on".into()));
    }
    if cfg.batch == 0 || cfg.seeds == 0 || cfg.seeds > cfg.shape_points {
        return Err(ToyError::InvalidArgument(format!(
            "need batch >= 1 and 1 <= seeds <= shape points, got batch {}, seeds {}, shape points {}",
            cfg.batch, cfg.seeds, cfg.shape_points
        )));
    }
    let sched = NoiseSchedule::new(cfg.schedule_steps, ScheduleConfig::Cosine)
        .map_err(|e| ToyError::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ToyDenoiser::random(cfg.hidden, &mut rng);
    let mut adams: Vec<Adam> = model.params.iter().map(|m| Adam::new(m.rows(), m.cols())).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let kind = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
        let coloring = cfg.colorings[rng.random_range(0..cfg.colorings.len())];
        let shape = synth_shape(kind, cfg.shape_points, coloring, &mut rng)?;
        let start = rng.random_range(0..shape.len());
        let seed_rows = farthest_point_sample(shape.positions(), cfg.seeds, start)
            .map_err(|e| ToyError::InvalidArgument(e.to_string()))?;
        let rows6 = shape.rows6();
        let cond = rows6.select_rows(&seed_rows);
        let batch = sample_indices(shape.len(), cfg.batch, &mut rng)
            .map_err(|e| ToyError::InvalidArgument(e.to_string()))?;
        let x0 = rows6.select_rows(&batch);
        let t = rng.random_range(1..=sched.steps());
        let eps = gaussian(x0.rows(), 6, &mut rng);
        let x_t = add_noise(&x0, t, &eps, &sched);

        let tape = Tape::new();
        let p: Vec<Var> = model.params.iter().map(|m| tape.param(m.clone())).collect();
        let pred = model.forward(&p, tape.constant(x_t), tape.constant(cond), t, &sched);
        let loss = (tape.constant(eps) - pred).square().mean();
        let value = loss.value().item();
        if !(value.is_finite() && value <= DIVERGENCE) {
            return Err(ToyError::Diverged { step, loss: value });
        }
        let grads = tape.backward(loss).expect("fresh tape, scalar loss");
        for ((param, adam), v) in model.params.iter_mut().zip(&mut adams).zip(&p) {
            adam.step(param, &grads.wrt(*v), cfg.lr, &[]);
        }
        losses.push(value);
    }
    Ok(TrainOutput { model, losses })
}

/// Training log as CSV with header `step,loss`.
pub fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

/// Mean of the first and last `window` losses.
pub fn smoothed_ends(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.clamp(1, losses.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&losses[..w.min(losses.len())]), mean(&losses[losses.len().saturating_sub(w)..]))
}
