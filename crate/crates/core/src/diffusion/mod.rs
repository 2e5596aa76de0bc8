//! Noise schedules, the forward/reverse diffusion algebra, conditional
//! denoisers and the patch sampler used at decompression.
//!
//! Points are 6-D rows `(x, y, z, r, g, b)` throughout.

mod denoisers;

pub use denoisers::{
    idw_blend, nearest_seed_rows, Denoiser, OracleDenoiser, SeedKernelDenoiser, ZeroDenoiser,
};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::Var;
use crate::pointset::ColoredPointCloud;
use crate::tensor::Mat;

/// Length of the reference schedule whose head is used.
pub const FULL_STEPS: usize = 1024;
/// Rows generated per sampling round.
pub const ROUND_POINTS: usize = 3072;
/// Default number of reverse steps.
pub const DEFAULT_STEPS: usize = 8;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sampler produced non-finite values at step {t}")]
    NonFinite { t: usize },
}

/// How β is laid out over the reference schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleConfig {
    /// Squared-cosine ᾱ over 1024 steps with offset 0.008, β clamped to 0.999.
    Cosine,
    /// β linear from 1e-4 to 0.02 over 1024 steps.
    Linear,
    /// The same β at every step (for tests).
    ConstantBeta(f64),
}

/// Per-step coefficients, indexed by step `t ∈ 1..=T`; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, config: ScheduleConfig) -> Result<Self, DiffusionError> {
        if !(1..=FULL_STEPS).contains(&steps) {
            return Err(DiffusionError::InvalidArgument(format!(
                "step count {steps} outside [1, {FULL_STEPS}]"
            )));
        }
        let beta: Vec<f64> = match config {
            ScheduleConfig::Cosine => {
                let f = |t: usize| {
                    let s = (t as f64 / FULL_STEPS as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (s * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA))
                    .collect()
            }
            ScheduleConfig::Linear => (1..=steps)
                .map(|t| 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / (FULL_STEPS - 1) as f64)
                .collect(),
            ScheduleConfig::ConstantBeta(b) => {
                if !(b > 0.0 && b < 1.0) {
                    return Err(DiffusionError::InvalidArgument(format!(
                        "beta {b} outside (0, 1)"
                    )));
                }
                vec![b; steps]
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &beta {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        let sigma = (1..=steps)
            .map(|t| {
                (beta[t - 1] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])).sqrt()
            })
            .collect();
        Ok(Self {
            beta,
            alpha_bar,
            sigma,
        })
    }

    /// Default schedule: the first `steps` entries of the cosine schedule.
    pub fn cosine(steps: usize) -> Result<Self, DiffusionError> {
        Self::new(steps, ScheduleConfig::Cosine)
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    fn check_step(&self, t: usize) {
        assert!(
            (1..=self.steps()).contains(&t),
            "step {t} outside [1, {}]",
            self.steps()
        );
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`. Step 0 returns `x0`.
pub fn add_noise(x0: &Mat, t: usize, eps: &Mat, sched: &NoiseSchedule) -> Mat {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Mean of the reverse step: `(x_t − (1−α_t)/√(1−ᾱ_t)·ε̂) / √α_t`.
pub fn posterior_mean(x_t: &Mat, eps_hat: &Mat, t: usize, sched: &NoiseSchedule) -> Mat {
    sched.check_step(t);
    let (inv, k) = posterior_coefficients(t, sched);
    x_t.zip_map(eps_hat, |x, e| inv * (x - k * e))
}

/// Single-shot clean estimate: `(x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &Mat, eps_hat: &Mat, t: usize, sched: &NoiseSchedule) -> Mat {
    sched.check_step(t);
    let ab = sched.alpha_bar(t);
    let (inv, b) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| inv * (x - b * e))
}

fn posterior_coefficients(t: usize, sched: &NoiseSchedule) -> (f64, f64) {
    let alpha = sched.alpha(t);
    (
        1.0 / alpha.sqrt(),
        (1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt(),
    )
}

/// [`add_noise`] on the tape.
pub fn add_noise_traced<'t>(x0: Var<'t>, t: usize, eps: Var<'t>, sched: &NoiseSchedule) -> Var<'t> {
    let ab = sched.alpha_bar(t);
    x0.scale(ab.sqrt()) + eps.scale((1.0 - ab).sqrt())
}

/// [`posterior_mean`] on the tape.
pub fn posterior_mean_traced<'t>(
    x_t: Var<'t>,
    eps_hat: Var<'t>,
    t: usize,
    sched: &NoiseSchedule,
) -> Var<'t> {
    sched.check_step(t);
    let (inv, k) = posterior_coefficients(t, sched);
    (x_t - eps_hat.scale(k)).scale(inv)
}

/// [`predict_x0`] on the tape.
pub fn predict_x0_traced<'t>(
    x_t: Var<'t>,
    eps_hat: Var<'t>,
    t: usize,
    sched: &NoiseSchedule,
) -> Var<'t> {
    sched.check_step(t);
    let ab = sched.alpha_bar(t);
    (x_t - eps_hat.scale((1.0 - ab).sqrt())).scale(1.0 / ab.sqrt())
}

/// Standard-normal matrix.
pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
    )
}

/// Sampling rounds for a cell that held `num_points` points: the nearest
/// integer to `num_points / 3072` (halves round up), at least 1.
pub fn num_rounds(num_points: usize) -> usize {
    ((num_points + ROUND_POINTS / 2) / ROUND_POINTS).max(1)
}

/// Regrows a patch from its seeds: [`num_rounds`]`(num_points)` independent
/// reverse-diffusion runs of [`ROUND_POINTS`] rows each, concatenated, with
/// colors clamped to `[0, 1]`.
pub fn sample_patch<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    seeds: &Mat,
    num_points: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ColoredPointCloud, DiffusionError> {
    if num_points == 0 {
        return Err(DiffusionError::InvalidArgument(
            "point count must be >= 1".into(),
        ));
    }
    sample_rounds(denoiser, seeds, num_rounds(num_points), ROUND_POINTS, sched, rng)
}

/// [`sample_patch`] with an explicit round count and round size.
pub fn sample_rounds<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    seeds: &Mat,
    rounds: usize,
    round_points: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ColoredPointCloud, DiffusionError> {
    if seeds.is_empty() || seeds.cols() != 6 {
        return Err(DiffusionError::InvalidArgument(format!(
            "seeds must be a non-empty K×6 matrix, got {:?}",
            seeds.shape()
        )));
    }
    if rounds == 0 || round_points == 0 {
        return Err(DiffusionError::InvalidArgument(
            "rounds and round size must be >= 1".into(),
        ));
    }
    let steps = sched.steps();
    let mut parts = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let rows: Vec<usize> = (0..round_points)
            .map(|_| rng.random_range(0..seeds.rows()))
            .collect();
        let start = seeds.select_rows(&rows);
        let noise = gaussian(round_points, 6, rng);
        let mut x = add_noise(&start, steps, &noise, sched);
        for t in (1..=steps).rev() {
            let eps = denoiser.eps(&x, seeds, t, sched);
            x = posterior_mean(&x, &eps, t, sched);
            if t > 1 {
                let z = gaussian(round_points, 6, rng);
                let s = sched.sigma(t);
                x = x.zip_map(&z, |v, e| v + s * e);
            }
            if !x.all_finite() {
                return Err(DiffusionError::NonFinite { t });
            }
        }
        parts.push(x);
    }
    let rows = Mat::vstack(&parts);
    Ok(ColoredPointCloud::from_rows6(&rows).expect("finite rows with clamped colors"))
}
