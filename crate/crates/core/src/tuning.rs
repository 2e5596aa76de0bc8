//! Seed selection, weight aggregation, the tuning losses and the prompt-tuning
//! loop that optimizes seed weights against a frozen denoiser.
//!
//! Each seed is a convex recombination of `k` nearby source rows,
//! `seed = Σ_j |w_j| / Σ_j |w_j| · neighbor_j`, and only the weights `w` are
//! optimized. Seeds on the patch boundary keep their initial weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::diffusion::{
    add_noise, add_noise_traced, gaussian, posterior_mean_traced, predict_x0_traced, Denoiser,
    NoiseSchedule, ROUND_POINTS,
};
use crate::pointset::{sample_indices, ColoredPointCloud};
use crate::spatial::{farthest_point_sample_from, KdIndex, KdTree, SpatialError};
use crate::tensor::Mat;

pub const DEFAULT_SEEDS: usize = 1024;
pub const DEFAULT_NEIGHBORS: usize = 32;
pub const DEFAULT_RADIUS: f64 = 0.004;
pub const DEFAULT_ITERATIONS: usize = 1000;
/// Default Adam learning rate for tuning.
pub const DEFAULT_LR: f64 = 5e-5;
/// Larger rate suited to short tuning runs.
pub const FAST_LR: f64 = 1e-3;
/// Weight given to a seed's own row at initialization.
pub const CENTER_WEIGHT: f64 = 1.0;
/// Weight given to every other neighbor at initialization.
pub const NEIGHBOR_WEIGHT: f64 = 1e-4;
/// Boundary shell thickness as a fraction of the cell edge.
pub const SHELL_FRACTION: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum TuningError {
    #[error("patch has no points")]
    EmptyPatch,
    #[error("weight row {row} is all zero")]
    DegenerateWeights { row: usize },
    #[error("loss became non-finite at iteration {iteration} (patch {patch}, t = {t})")]
    NonFinite {
        iteration: usize,
        patch: usize,
        t: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Initial seed rows of a patch and which of them lie on its boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedSelection {
    pub rows: Vec<usize>,
    pub boundary: Vec<bool>,
}

/// Boundary-preserving downsampling to `m` rows.
///
/// Rows within `0.02·cell_edge` of a face of the patch bounding box form the
/// boundary set. It is capped at `m/4` rows by farthest point sampling that
/// starts from the rows closest to the box corners, and the remaining budget
/// is filled by farthest point sampling seeded with the boundary set. A patch
/// of at most `m` rows is returned whole, with its boundary rows marked.
pub fn bdsam(patch: &ColoredPointCloud, m: usize, cell_edge: f64) -> Result<SeedSelection, TuningError> {
    if patch.is_empty() {
        return Err(TuningError::EmptyPatch);
    }
    if m == 0 {
        return Err(TuningError::InvalidArgument("seed budget must be >= 1".into()));
    }
    let pos = patch.positions();
    let (lo, hi) = patch.aabb();
    let delta = SHELL_FRACTION * cell_edge;
    let on_shell = |p: &[f64; 3]| (0..3).any(|a| p[a] - lo[a] <= delta || hi[a] - p[a] <= delta);
    let shell: Vec<usize> = (0..pos.len()).filter(|&i| on_shell(&pos[i])).collect();
    if pos.len() <= m {
        let boundary = pos.iter().map(on_shell).collect();
        return Ok(SeedSelection {
            rows: (0..pos.len()).collect(),
            boundary,
        });
    }

    let cap = m / 4;
    let mut boundary_rows = shell.clone();
    if shell.len() > cap {
        boundary_rows = if cap == 0 {
            Vec::new()
        } else {
            let shell_pos: Vec<[f64; 3]> = shell.iter().map(|&i| pos[i]).collect();
            let anchors = corner_anchors(&shell_pos, lo, hi);
            farthest_point_sample_from(&shell_pos, &anchors, cap)?
                .into_iter()
                .map(|j| shell[j])
                .collect()
        };
    }
    let n_boundary = boundary_rows.len();
    let start = if boundary_rows.is_empty() {
        vec![0]
    } else {
        boundary_rows
    };
    let rows = farthest_point_sample_from(pos, &start, m)?;
    let boundary = (0..rows.len()).map(|i| i < n_boundary).collect();
    Ok(SeedSelection { rows, boundary })
}

/// Rows nearest to each of the 8 box corners, deduplicated, in corner order.
fn corner_anchors(points: &[[f64; 3]], lo: [f64; 3], hi: [f64; 3]) -> Vec<usize> {
    let index = KdIndex::build(points.to_vec());
    let mut out: Vec<usize> = Vec::with_capacity(8);
    for c in 0..8 {
        let corner = [
            if c & 1 == 0 { lo[0] } else { hi[0] },
            if c & 2 == 0 { lo[1] } else { hi[1] },
            if c & 4 == 0 { lo[2] } else { hi[2] },
        ];
        let (row, _) = index.nearest_sq(&corner).expect("non-empty shell");
        if !out.contains(&row) {
            out.push(row);
        }
    }
    out
}

/// Seed weights `W_c` with their neighbor lists.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedWeights {
    /// `S·k` source row indices, row-major; entry 0 of each row is the seed's own row.
    pub neighbors: Vec<usize>,
    /// S×k weights.
    pub weights: Mat,
    pub frozen: Vec<bool>,
}

impl SeedWeights {
    pub fn seeds(&self) -> usize {
        self.weights.rows()
    }

    pub fn k(&self) -> usize {
        self.weights.cols()
    }
}

/// Near one-hot weights over each seed's ball-query neighborhood in `source`.
pub fn init_weights(
    source: &ColoredPointCloud,
    selection: &SeedSelection,
    k: usize,
    radius: f64,
) -> Result<SeedWeights, TuningError> {
    if k == 0 {
        return Err(TuningError::InvalidArgument("k must be >= 1".into()));
    }
    let index = KdIndex::build(source.positions().to_vec());
    let mut neighbors = Vec::with_capacity(selection.rows.len() * k);
    for &row in &selection.rows {
        let found = index.ball_query(&source.positions()[row], k, radius)?;
        neighbors.push(row);
        neighbors.extend(found.into_iter().filter(|&r| r != row).take(k - 1));
        while neighbors.len() % k != 0 {
            neighbors.push(row);
        }
    }
    let mut weights = Mat::filled(selection.rows.len(), k, NEIGHBOR_WEIGHT);
    for i in 0..selection.rows.len() {
        weights[(i, 0)] = CENTER_WEIGHT;
    }
    Ok(SeedWeights {
        neighbors,
        weights,
        frozen: selection.boundary.clone(),
    })
}

fn check_rows(weights: &Mat) -> Result<(), TuningError> {
    match weights
        .iter_rows()
        .position(|r| r.iter().all(|w| *w == 0.0))
    {
        Some(row) => Err(TuningError::DegenerateWeights { row }),
        None => Ok(()),
    }
}

/// Seeds (S×6) from weights over the 6-D `source` rows.
pub fn aggregate(weights: &SeedWeights, source: &Mat) -> Result<Mat, TuningError> {
    check_rows(&weights.weights)?;
    let tape = Tape::new();
    let w = tape.constant(weights.weights.clone());
    let out = aggregate_traced(w, &weights.neighbors, source);
    let value = out.value().clone();
    Ok(value)
}

/// Aggregation on the tape, differentiable in the S×k weights.
pub fn aggregate_traced<'t>(weights: Var<'t>, neighbors: &[usize], source: &Mat) -> Var<'t> {
    let (s, k) = weights.shape();
    let abs = weights.abs();
    let norm = abs / abs.sum_cols().broadcast_cols(k);
    let gathered = weights.tape().constant(source.select_rows(neighbors));
    gathered.mul_col(norm.reshape(s * k, 1)).group_sum_rows(k)
}

/// Index of the nearest row of `b` for every row of `a`, in their shared dimension.
pub fn nearest_indices(a: &Mat, b: &Mat) -> Vec<usize> {
    assert_eq!(a.cols(), b.cols(), "dimension mismatch");
    fn with_tree<const D: usize>(a: &Mat, b: &Mat) -> Vec<usize> {
        let tree: KdTree<D> = KdTree::from_rows(b.iter_rows());
        a.iter_rows()
            .map(|r| {
                let q: [f64; D] = r.try_into().expect("row width");
                tree.nearest_sq(&q).expect("non-empty").0
            })
            .collect()
    }
    match a.cols() {
        3 => with_tree::<3>(a, b),
        6 => with_tree::<6>(a, b),
        _ => a
            .iter_rows()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (j, q) in b.iter_rows().enumerate() {
                    let d: f64 = p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            })
            .collect(),
    }
}

/// Symmetric Chamfer distance with unsquared nearest-neighbor distances:
/// `½(mean_a min_b ‖a−b‖ + mean_b min_a ‖a−b‖)`.
pub fn chamfer(a: &Mat, b: &Mat) -> f64 {
    let one = |a: &Mat, b: &Mat| {
        let idx = nearest_indices(a, b);
        a.iter_rows()
            .zip(&idx)
            .map(|(p, &j)| {
                p.iter()
                    .zip(b.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / a.rows() as f64
    };
    0.5 * (one(a, b) + one(b, a))
}

/// [`chamfer`] on the tape. Nearest-neighbor assignments are taken from the
/// forward values and held fixed.
pub fn loss_cd<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let (ia, ib) = {
        let (av, bv) = (a.value(), b.value());
        (nearest_indices(&av, &bv), nearest_indices(&bv, &av))
    };
    let da = (a - b.gather_rows(&ia)).square().sum_cols().sqrt().mean();
    let db = (b - a.gather_rows(&ib)).square().sum_cols().sqrt().mean();
    (da + db).scale(0.5)
}

/// Which objective drives tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Chamfer distance between the forward-noised `x_{t−1}` and the one-step denoised estimate.
    Cdm,
    /// Mean squared noise-prediction error.
    Dm,
    /// Chamfer distance between `x0` and the single-shot clean estimate.
    Inver,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Cdm => "cdm",
            LossKind::Dm => "dm",
            LossKind::Inver => "inver",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cdm" => Ok(LossKind::Cdm),
            "dm" => Ok(LossKind::Dm),
            "inver" => Ok(LossKind::Inver),
            _ => Err(format!("unknown loss '{s}' (expected cdm, dm or inver)")),
        }
    }
}

/// `mean((ε − ε_θ(x_t, seeds, t))²)`.
pub fn loss_dm<'t, D: Denoiser + ?Sized>(
    x0: &Mat,
    seeds: Var<'t>,
    t: usize,
    eps: &Mat,
    denoiser: &D,
    sched: &NoiseSchedule,
) -> Var<'t> {
    let tape = seeds.tape();
    let e = tape.constant(eps.clone());
    let x_t = tape.constant(add_noise(x0, t, eps, sched));
    (e - denoiser.predict(x_t, seeds, t, sched)).square().mean()
}

/// Chamfer distance between `add_noise(x0, t−1, ε)` and the posterior mean
/// computed from `add_noise(x0, t, ε)`.
pub fn loss_cdm<'t, D: Denoiser + ?Sized>(
    x0: &Mat,
    seeds: Var<'t>,
    t: usize,
    eps: &Mat,
    denoiser: &D,
    sched: &NoiseSchedule,
) -> Var<'t> {
    let tape = seeds.tape();
    let x_prev = tape.constant(add_noise(x0, t - 1, eps, sched));
    let x_t = tape.constant(add_noise(x0, t, eps, sched));
    let eps_hat = denoiser.predict(x_t, seeds, t, sched);
    loss_cd(x_prev, posterior_mean_traced(x_t, eps_hat, t, sched))
}

/// Chamfer distance between `x0` and the single-shot clean estimate.
pub fn loss_inver<'t, D: Denoiser + ?Sized>(
    x0: &Mat,
    seeds: Var<'t>,
    t: usize,
    eps: &Mat,
    denoiser: &D,
    sched: &NoiseSchedule,
) -> Var<'t> {
    let tape = seeds.tape();
    let x_t = add_noise_traced(tape.constant(x0.clone()), t, tape.constant(eps.clone()), sched);
    let eps_hat = denoiser.predict(x_t, seeds, t, sched);
    loss_cd(tape.constant(x0.clone()), predict_x0_traced(x_t, eps_hat, t, sched))
}

/// Dispatches to the loss named by `kind`.
pub fn loss<'t, D: Denoiser + ?Sized>(
    kind: LossKind,
    x0: &Mat,
    seeds: Var<'t>,
    t: usize,
    eps: &Mat,
    denoiser: &D,
    sched: &NoiseSchedule,
) -> Var<'t> {
    match kind {
        LossKind::Cdm => loss_cdm(x0, seeds, t, eps, denoiser, sched),
        LossKind::Dm => loss_dm(x0, seeds, t, eps, denoiser, sched),
        LossKind::Inver => loss_inver(x0, seeds, t, eps, denoiser, sched),
    }
}

/// Bias-corrected Adam state for one parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Mat,
    v: Mat,
    steps: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Mat::zeros(rows, cols),
            v: Mat::zeros(rows, cols),
            steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of `params` from `grads`; rows flagged in `frozen` are
    /// left untouched, moments included.
    pub fn step(&mut self, params: &mut Mat, grads: &Mat, lr: f64, frozen: &[bool]) {
        assert_eq!(params.shape(), grads.shape(), "gradient shape mismatch");
        assert_eq!(params.shape(), self.m.shape(), "optimizer shape mismatch");
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for r in 0..params.rows() {
            if frozen.get(r).copied().unwrap_or(false) {
                continue;
            }
            for c in 0..params.cols() {
                let g = grads[(r, c)];
                let m = self.beta1 * self.m[(r, c)] + (1.0 - self.beta1) * g;
                let v = self.beta2 * self.v[(r, c)] + (1.0 - self.beta2) * g * g;
                self.m[(r, c)] = m;
                self.v[(r, c)] = v;
                params[(r, c)] -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Settings of the tuning loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TuneConfig {
    pub iterations: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub seeds_per_patch: usize,
    pub neighbors: usize,
    pub radius: f64,
    /// Rows of each `x0` draw.
    pub sample_points: usize,
    pub seed: u64,
    /// 1 runs the literal sequential loop; more splits patches into that many
    /// independent groups tuned in parallel.
    pub jobs: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            lr: DEFAULT_LR,
            loss: LossKind::Cdm,
            seeds_per_patch: DEFAULT_SEEDS,
            neighbors: DEFAULT_NEIGHBORS,
            radius: DEFAULT_RADIUS,
            sample_points: ROUND_POINTS,
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TuneLogEntry {
    pub iteration: usize,
    pub patch: usize,
    pub t: usize,
    pub loss: f64,
}

/// Tuning state of one patch.
#[derive(Clone, Debug)]
pub struct PatchState {
    pub source: Mat,
    pub weights: SeedWeights,
    adam: Adam,
}

impl PatchState {
    pub fn new(patch: &ColoredPointCloud, cell_edge: f64, cfg: &TuneConfig) -> Result<Self, TuningError> {
        let selection = bdsam(patch, cfg.seeds_per_patch, cell_edge)?;
        let weights = init_weights(patch, &selection, cfg.neighbors, cfg.radius)?;
        let adam = Adam::new(weights.seeds(), weights.k());
        Ok(Self {
            source: patch.rows6(),
            weights,
            adam,
        })
    }

    pub fn seeds(&self) -> Result<Mat, TuningError> {
        aggregate(&self.weights, &self.source)
    }

    /// Evaluates the loss at one `(t, x0, ε)` draw and applies one Adam step.
    #[allow(clippy::too_many_arguments)]
    pub fn step<D: Denoiser + ?Sized>(
        &mut self,
        kind: LossKind,
        x0: &Mat,
        t: usize,
        eps: &Mat,
        denoiser: &D,
        sched: &NoiseSchedule,
        lr: f64,
    ) -> Result<f64, TuningError> {
        check_rows(&self.weights.weights)?;
        let tape = Tape::new();
        let w = tape.param(self.weights.weights.clone());
        let seeds = aggregate_traced(w, &self.weights.neighbors, &self.source);
        let out = loss(kind, x0, seeds, t, eps, denoiser, sched);
        let value = out.value().item();
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = tape.backward(out)?.wrt(w);
        self.adam
            .step(&mut self.weights.weights, &grads, lr, &self.weights.frozen);
        Ok(value)
    }
}

/// Result of [`tune`].
#[derive(Clone, Debug)]
pub struct TuneOutput {
    /// Tuned seeds (S×6) of every patch, in the order given.
    pub seeds: Vec<Mat>,
    pub states: Vec<PatchState>,
    pub log: Vec<TuneLogEntry>,
}

/// Prompt tuning over all patches.
///
/// Every iteration draws a patch uniformly, a step `t ∈ 1..=T`, a fresh
/// `x0` subsample and a fresh ε, and takes one Adam step on that patch's
/// weights. Each patch keeps its own optimizer state.
pub fn tune<D: Denoiser + ?Sized>(
    patches: &[ColoredPointCloud],
    cell_edge: f64,
    denoiser: &D,
    sched: &NoiseSchedule,
    cfg: &TuneConfig,
) -> Result<TuneOutput, TuningError> {
    if patches.is_empty() {
        return Err(TuningError::InvalidArgument("no patches to tune".into()));
    }
    if cfg.jobs == 0 || cfg.sample_points == 0 {
        return Err(TuningError::InvalidArgument(
            "jobs and sample size must be >= 1".into(),
        ));
    }
    let states = patches
        .par_iter()
        .map(|p| PatchState::new(p, cell_edge, cfg))
        .collect::<Result<Vec<_>, _>>()?;

    let jobs = cfg.jobs.min(patches.len());
    let (states, log) = if jobs == 1 {
        let ids: Vec<usize> = (0..patches.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (states, log) = run_group(&ids, states, cfg.iterations, patches, denoiser, sched, cfg, &mut rng)?;
        (states, log)
    } else {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); jobs];
        for i in 0..patches.len() {
            groups[i % jobs].push(i);
        }
        let mut slots: Vec<Option<PatchState>> = states.into_iter().map(Some).collect();
        let work: Vec<(usize, Vec<usize>, Vec<PatchState>)> = groups
            .into_iter()
            .enumerate()
            .map(|(g, ids)| {
                let st = ids.iter().map(|&i| slots[i].take().unwrap()).collect();
                (g, ids, st)
            })
            .collect();
        let results = work
            .into_par_iter()
            .map(|(g, ids, st)| {
                // iterations split in proportion to group size
                let share = cfg.iterations * ids.len() / patches.len()
                    + usize::from(g < cfg.iterations * ids.len() % patches.len());
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(g as u64 + 1);
                run_group(&ids, st, share, patches, denoiser, sched, cfg, &mut rng)
                    .map(|(st, log)| (ids, st, log))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut log = Vec::new();
        for (ids, st, l) in results {
            for (i, s) in ids.into_iter().zip(st) {
                slots[i] = Some(s);
            }
            log.extend(l);
        }
        log.sort_by_key(|e| (e.iteration, e.patch));
        (slots.into_iter().map(Option::unwrap).collect(), log)
    };
    let seeds = states
        .iter()
        .map(PatchState::seeds)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TuneOutput { seeds, states, log })
}

#[allow(clippy::too_many_arguments)]
fn run_group<D: Denoiser + ?Sized, R: Rng>(
    ids: &[usize],
    mut states: Vec<PatchState>,
    iterations: usize,
    patches: &[ColoredPointCloud],
    denoiser: &D,
    sched: &NoiseSchedule,
    cfg: &TuneConfig,
    rng: &mut R,
) -> Result<(Vec<PatchState>, Vec<TuneLogEntry>), TuningError> {
    let mut log = Vec::with_capacity(iterations);
    for iteration in 0..iterations {
        let local = rng.random_range(0..ids.len());
        let patch = ids[local];
        let t = rng.random_range(1..=sched.steps());
        let rows = sample_indices(patches[patch].len(), cfg.sample_points, rng)
            .map_err(|e| TuningError::InvalidArgument(e.to_string()))?;
        let x0 = states[local].source.select_rows(&rows);
        let eps = gaussian(x0.rows(), 6, rng);
        let value = states[local].step(cfg.loss, &x0, t, &eps, denoiser, sched, cfg.lr)?;
        if !value.is_finite() {
            return Err(TuningError::NonFinite {
                iteration,
                patch,
                t,
            });
        }
        log.push(TuneLogEntry {
            iteration,
            patch,
            t,
            loss: value,
        });
    }
    Ok((states, log))
}

/// Tuning log as CSV with header `iteration,patch,t,loss`.
pub fn log_csv(log: &[TuneLogEntry]) -> String {
    let mut s = String::from("iteration,patch,t,loss\n");
    for e in log {
        s.push_str(&format!("{},{},{},{}\n", e.iteration, e.patch, e.t, e.loss));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{OracleDenoiser, ScheduleConfig, SeedKernelDenoiser, ZeroDenoiser};

    fn cloud(rows: &[[f64; 3]]) -> ColoredPointCloud {
        ColoredPointCloud::white(rows.to_vec()).unwrap()
    }

    fn grid_cube(n: usize) -> ColoredPointCloud {
        // points on the surface of [-0.5, 0.5]³ on an n×n lattice per face
        let mut pts = Vec::new();
        let step = 1.0 / (n - 1) as f64;
        for i in 0..n {
            for j in 0..n {
                let (u, v) = (-0.5 + i as f64 * step, -0.5 + j as f64 * step);
                for s in [-0.5, 0.5] {
                    pts.push([s, u, v]);
                    pts.push([u, s, v]);
                    pts.push([u, v, s]);
                }
            }
        }
        cloud(&pts)
    }

    fn brute_cd(a: &Mat, b: &Mat) -> f64 {
        let one = |a: &Mat, b: &Mat| {
            a.iter_rows()
                .map(|p| {
                    b.iter_rows()
                        .map(|q| p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / a.rows() as f64
        };
        0.5 * (one(a, b) + one(b, a))
    }

    #[test]
    fn bdsam_small_patch_keeps_everything() {
        let mut pts = Vec::new();
        for i in 0..500 {
            let f = i as f64 / 500.0;
            pts.push([f, (f * 7.0).sin(), (f * 3.0).cos()]);
        }
        let s = bdsam(&cloud(&pts), 1024, 2.0).unwrap();
        assert_eq!(s.rows, (0..500).collect::<Vec<_>>());
        assert!(matches!(
            bdsam(&cloud(&pts), 0, 2.0),
            Err(TuningError::InvalidArgument(_))
        ));
    }

    #[test]
    fn bdsam_keeps_cube_corners() {
        let c = grid_cube(21);
        let s = bdsam(&c, 200, 2.0).unwrap();
        assert_eq!(s.rows.len(), 200);
        let mut uniq = s.rows.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 200);
        for corner in 0..8 {
            let want = [
                if corner & 1 == 0 { -0.5 } else { 0.5 },
                if corner & 2 == 0 { -0.5 } else { 0.5 },
                if corner & 4 == 0 { -0.5 } else { 0.5 },
            ];
            assert!(
                s.rows.iter().any(|&r| c.positions()[r] == want),
                "corner {want:?} missing"
            );
        }
        // everything lies on a face, so the boundary share is exactly the cap
        assert_eq!(s.boundary.iter().filter(|&&b| b).count(), 50);
    }

    #[test]
    fn init_weights_are_near_one_hot() {
        let pts: Vec<[f64; 3]> = (0..40).map(|i| [i as f64 * 0.001, 0.0, 0.0]).collect();
        let c = cloud(&pts);
        let sel = SeedSelection {
            rows: vec![5, 20],
            boundary: vec![true, false],
        };
        let w = init_weights(&c, &sel, 32, 0.004).unwrap();
        assert_eq!(w.weights.shape(), (2, 32));
        assert_eq!(w.frozen, vec![true, false]);
        for (s, &row) in sel.rows.iter().enumerate() {
            assert_eq!(w.neighbors[s * 32], row);
            let r = w.weights.row(s);
            assert_eq!(r.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(r.iter().filter(|&&v| v == 1e-4).count(), 31);
            // ball of radius 0.004 around the seed holds itself and 4 neighbors on each side
            let nb = &w.neighbors[s * 32..(s + 1) * 32];
            assert!(nb.iter().all(|&n| (n as i64 - row as i64).abs() <= 4));
        }
    }

    #[test]
    fn aggregate_examples() {
        let src = Mat::from_rows(&[[0.0; 6], [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        let mk = |w: [f64; 2]| SeedWeights {
            neighbors: vec![0, 1],
            weights: Mat::from_rows(&[w]),
            frozen: vec![false],
        };
        let mid = [0.5, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(aggregate(&mk([1.0, 1.0]), &src).unwrap().row(0), &mid);
        assert_eq!(aggregate(&mk([-1.0, 1.0]), &src).unwrap().row(0), &mid);
        assert_eq!(aggregate(&mk([0.0, 2.0]), &src).unwrap().row(0), src.row(1));
        assert_eq!(
            aggregate(&mk([0.0, 0.0]), &src).unwrap_err(),
            TuningError::DegenerateWeights { row: 0 }
        );
    }

    #[test]
    fn chamfer_examples() {
        let a = Mat::from_rows(&[[0.0, 0.0, 0.0]]);
        let b = Mat::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!((chamfer(&a, &b) - 1.0).abs() < 1e-15);
        assert_eq!(chamfer(&b, &b), 0.0);
        let tape = Tape::new();
        let v = loss_cd(tape.constant(a.clone()), tape.constant(b.clone()));
        assert!((v.value().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cols in [3, 6, 4] {
            let a = gaussian(70, cols, &mut rng);
            let b = gaussian(55, cols, &mut rng);
            let cd = chamfer(&a, &b);
            assert!((cd - brute_cd(&a, &b)).abs() < 1e-12);
            assert!((cd - chamfer(&b, &a)).abs() < 1e-12);
        }
    }

    #[test]
    fn dm_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sched = NoiseSchedule::cosine(8).unwrap();
        let target = ColoredPointCloud::from_rows6(&gaussian(30, 6, &mut rng).map(|v| v * 0.5 + 0.5)).unwrap();
        let x0 = target.rows6();
        let eps = gaussian(30, 6, &mut rng);
        let tape = Tape::new();
        let seeds = tape.constant(x0.clone());
        let oracle = OracleDenoiser::new(&target);
        let v = loss_dm(&x0, seeds, 1, &eps, &oracle, &sched).value().item();
        assert!(v < 1e-18, "{v}");
        let z = loss_dm(&x0, seeds, 3, &eps, &ZeroDenoiser, &sched).value().item();
        assert!((z - eps.map(|e| e * e).mean()).abs() < 1e-15);
    }

    #[test]
    fn cdm_and_inver_vanish_for_the_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sched = NoiseSchedule::cosine(8).unwrap();
        let target = ColoredPointCloud::from_rows6(&gaussian(30, 6, &mut rng).map(|v| v * 0.5 + 0.5)).unwrap();
        let x0 = target.rows6();
        let eps = gaussian(30, 6, &mut rng);
        let tape = Tape::new();
        let seeds = tape.constant(x0.clone());
        let oracle = OracleDenoiser::new(&target);
        assert!(loss_cdm(&x0, seeds, 1, &eps, &oracle, &sched).value().item() < 1e-12);
        assert!(loss_inver(&x0, seeds, 1, &eps, &oracle, &sched).value().item() < 1e-12);
        // ε̂ ≡ 0 turns the clean estimate into x_t/√ᾱ_t
        let inv = loss_inver(&x0, seeds, 4, &eps, &ZeroDenoiser, &sched).value().item();
        let xt = add_noise(&x0, 4, &eps, &sched).scale(1.0 / sched.alpha_bar(4).sqrt());
        assert!((inv - brute_cd(&x0, &xt)).abs() < 1e-12);
    }

    #[test]
    fn cdm_with_oracle_matches_closed_form_shift() {
        // sparse rows so the oracle recovers every source row at t = 2
        let sched = NoiseSchedule::new(2, ScheduleConfig::ConstantBeta(0.1)).unwrap();
        let x0 = Mat::from_rows(&[[0.0; 6], [5.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 5.0, 0.0, 0.0, 0.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = gaussian(3, 6, &mut rng).scale(0.3);
        let target = ColoredPointCloud::new(
            x0.iter_rows().map(|r| [r[0], r[1], r[2]]).collect(),
            vec![[0.0; 3]; 3],
        )
        .unwrap();
        let oracle = OracleDenoiser::new(&target);
        let tape = Tape::new();
        let got = loss_cdm(&x0, tape.constant(x0.clone()), 2, &eps, &oracle, &sched).value().item();
        // each denoised row is its x_{t−1} row shifted by the closed-form residual
        let (a2, ab1, ab2) = (0.9f64, 0.9f64, 0.81f64);
        let k = (1.0 - ab1).sqrt() * ((a2 * (1.0 - ab1)).sqrt() - (1.0 - ab2).sqrt()) / (1.0 - ab2).sqrt();
        let x1 = add_noise(&x0, 1, &eps, &sched);
        let shifted = x1.zip_map(&eps, |x, e| x + k * e);
        assert!((got - brute_cd(&x1, &shifted)).abs() < 1e-12);
    }

    #[test]
    fn permutation_separates_cdm_from_dm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sched = NoiseSchedule::cosine(8).unwrap();
        let x0 = gaussian(40, 6, &mut rng).scale(0.3);
        let eps = gaussian(40, 6, &mut rng);
        let seeds = gaussian(10, 6, &mut rng).scale(0.3);
        let d = SeedKernelDenoiser::default();
        let perm: Vec<usize> = (0..40).rev().collect();
        let eval = |kind: LossKind, x0: &Mat, eps: &Mat| {
            let tape = Tape::new();
            let v = loss(kind, x0, tape.constant(seeds.clone()), 5, eps, &d, &sched).value().item();
            v
        };
        let (xp, ep) = (x0.select_rows(&perm), eps.select_rows(&perm));
        // permuting the (x0, ε) pairs together reorders every compared set
        assert!((eval(LossKind::Cdm, &x0, &eps) - eval(LossKind::Cdm, &xp, &ep)).abs() < 1e-12);
        assert!((eval(LossKind::Inver, &x0, &eps) - eval(LossKind::Inver, &xp, &ep)).abs() < 1e-12);
        // permuting ε alone leaves the noised set's geometry untouched for DM's
        // target but pairs it with different rows
        let dm = eval(LossKind::Dm, &x0, &eps);
        let dm_perm = eval(LossKind::Dm, &x0, &ep);
        assert!((dm - dm_perm).abs() > 1e-3);
    }

    #[test]
    fn adam_examples() {
        let mut p = Mat::scalar(0.0);
        let mut a = Adam::new(1, 1);
        a.step(&mut p, &Mat::scalar(1.0), 1e-3, &[false]);
        assert!((p.item() + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        let mut q = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let before = q.clone();
        let mut a = Adam::new(2, 2);
        a.step(&mut q, &Mat::zeros(2, 2), 0.1, &[false, false]);
        assert_eq!(q, before);
        a.step(&mut q, &Mat::filled(2, 2, 5.0), 0.1, &[true, false]);
        assert_eq!(q.row(0), before.row(0));
        assert_ne!(q.row(1), before.row(1));
    }

    fn small_patch(rng: &mut ChaCha8Rng) -> ColoredPointCloud {
        let g = gaussian(300, 3, rng);
        let pos = g
            .iter_rows()
            .map(|r| {
                let l = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                [0.5 * r[0] / l, 0.5 * r[1] / l, 0.5 * r[2] / l]
            })
            .collect::<Vec<_>>();
        let col = pos.iter().map(|p| [p[0] + 0.5, 0.5, 0.5 - p[2]]).collect();
        ColoredPointCloud::new(pos, col).unwrap()
    }

    fn small_cfg() -> TuneConfig {
        TuneConfig {
            iterations: 0,
            lr: FAST_LR,
            seeds_per_patch: 40,
            neighbors: 8,
            radius: 0.2,
            sample_points: 128,
            ..TuneConfig::default()
        }
    }

    #[test]
    fn zero_iterations_return_initial_aggregation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = small_patch(&mut rng);
        let sched = NoiseSchedule::cosine(8).unwrap();
        let out = tune(std::slice::from_ref(&p), 2.0, &SeedKernelDenoiser::default(), &sched, &small_cfg()).unwrap();
        let sel = bdsam(&p, 40, 2.0).unwrap();
        let init = p.rows6().select_rows(&sel.rows);
        assert_eq!(out.seeds[0].shape(), (40, 6));
        assert!(out.seeds[0].max_abs_diff(&init) < 1e-2);
        assert!(out.log.is_empty());
    }

    #[test]
    fn tuning_keeps_frozen_rows_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let patches = [small_patch(&mut rng), small_patch(&mut rng)];
        let sched = NoiseSchedule::cosine(8).unwrap();
        let cfg = TuneConfig {
            iterations: 12,
            ..small_cfg()
        };
        let d = SeedKernelDenoiser::default();
        let before: Vec<PatchState> = patches
            .iter()
            .map(|p| PatchState::new(p, 2.0, &cfg).unwrap())
            .collect();
        let a = tune(&patches, 2.0, &d, &sched, &cfg).unwrap();
        let b = tune(&patches, 2.0, &d, &sched, &cfg).unwrap();
        assert_eq!(a.seeds, b.seeds);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 12);
        let mut moved = false;
        for (st, init) in a.states.iter().zip(&before) {
            for (r, &f) in st.weights.frozen.iter().enumerate() {
                if f {
                    assert_eq!(st.weights.weights.row(r), init.weights.weights.row(r));
                } else {
                    moved |= st.weights.weights.row(r) != init.weights.weights.row(r);
                }
            }
        }
        assert!(moved);
        let par = tune(&patches, 2.0, &d, &sched, &TuneConfig { jobs: 2, ..cfg.clone() }).unwrap();
        assert_eq!(par.log.len(), 12);
        let again = tune(&patches, 2.0, &d, &sched, &TuneConfig { jobs: 2, ..cfg }).unwrap();
        assert_eq!(par.seeds, again.seeds);
    }

    #[test]
    fn log_csv_format() {
        let csv = log_csv(&[TuneLogEntry {
            iteration: 0,
            patch: 2,
            t: 3,
            loss: 0.5,
        }]);
        assert_eq!(csv, "iteration,patch,t,loss\n0,2,3,0.5\n");
    }
}
