use crate::autodiff::{Tape, Var};
use crate::pointset::ColoredPointCloud;
use crate::spatial::KdTree;
use crate::tensor::Mat;

use super::NoiseSchedule;

/// A conditional noise predictor `ε_θ(x_t, cond, t)`.
///
/// `x_t` is M×6, `cond` is K×6 seed rows and the result is M×6. Implementations
/// must be pure and must record their computation on the tape of `x_t` so
/// that gradients reach `cond`.
pub trait Denoiser: Send + Sync {
    fn predict<'t>(&self, x_t: Var<'t>, cond: Var<'t>, t: usize, sched: &NoiseSchedule) -> Var<'t>;

    /// Plain evaluation on a throwaway tape.
    fn eps(&self, x_t: &Mat, cond: &Mat, t: usize, sched: &NoiseSchedule) -> Mat {
        let tape = Tape::new();
        let out = self.predict(tape.constant(x_t.clone()), tape.constant(cond.clone()), t, sched);
        let value = out.value().clone();
        value
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict<'t>(&self, x_t: Var<'t>, cond: Var<'t>, t: usize, sched: &NoiseSchedule) -> Var<'t> {
        (**self).predict(x_t, cond, t, sched)
    }

    fn eps(&self, x_t: &Mat, cond: &Mat, t: usize, sched: &NoiseSchedule) -> Mat {
        (**self).eps(x_t, cond, t, sched)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict<'t>(&self, x_t: Var<'t>, cond: Var<'t>, t: usize, sched: &NoiseSchedule) -> Var<'t> {
        (**self).predict(x_t, cond, t, sched)
    }

    fn eps(&self, x_t: &Mat, cond: &Mat, t: usize, sched: &NoiseSchedule) -> Mat {
        (**self).eps(x_t, cond, t, sched)
    }
}

/// Predicts zero noise everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict<'t>(&self, x_t: Var<'t>, _cond: Var<'t>, _t: usize, _sched: &NoiseSchedule) -> Var<'t> {
        let (r, c) = x_t.shape();
        x_t.tape().constant(Mat::zeros(r, c))
    }
}

/// Knows the clean patch: each noisy row is explained by its nearest target
/// row in 6-D, so `ε̂ = (x_t − √ᾱ_t·nearest) / √(1−ᾱ_t)`. The seeds are ignored.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    target: Mat,
    index: KdTree<6>,
}

impl OracleDenoiser {
    pub fn new(target: &ColoredPointCloud) -> Self {
        let target = target.rows6();
        let index = KdTree::from_rows(target.iter_rows());
        Self { target, index }
    }

    fn nearest_rows(&self, x: &Mat) -> Mat {
        let idx: Vec<usize> = x
            .iter_rows()
            .map(|r| {
                let q: [f64; 6] = r.try_into().expect("6-D rows");
                self.index.nearest_sq(&q).expect("target is non-empty").0
            })
            .collect();
        self.target.select_rows(&idx)
    }
}

impl Denoiser for OracleDenoiser {
    fn predict<'t>(&self, x_t: Var<'t>, _cond: Var<'t>, t: usize, sched: &NoiseSchedule) -> Var<'t> {
        let nearest = self.nearest_rows(&x_t.value());
        let ab = sched.alpha_bar(t);
        let n = x_t.tape().constant(nearest);
        (x_t - n.scale(ab.sqrt())).scale(1.0 / (1.0 - ab).sqrt())
    }

    fn eps(&self, x_t: &Mat, _cond: &Mat, t: usize, sched: &NoiseSchedule) -> Mat {
        let nearest = self.nearest_rows(x_t);
        let ab = sched.alpha_bar(t);
        let (a, inv) = (ab.sqrt(), 1.0 / (1.0 - ab).sqrt());
        x_t.zip_map(&nearest, |x, n| (x - a * n) * inv)
    }
}

/// Analytic stand-in that is differentiable in the seeds: the clean estimate
/// of each row is the inverse-distance-weighted mean of its `m` nearest seeds
/// (weights `1 / (d² + τ²)` in 6-D), and `ε̂` follows from it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedKernelDenoiser {
    pub neighbors: usize,
    pub tau: f64,
}

impl Default for SeedKernelDenoiser {
    fn default() -> Self {
        Self {
            neighbors: 8,
            tau: 0.02,
        }
    }
}

impl Denoiser for SeedKernelDenoiser {
    fn predict<'t>(&self, x_t: Var<'t>, cond: Var<'t>, t: usize, sched: &NoiseSchedule) -> Var<'t> {
        let ab = sched.alpha_bar(t);
        let query = x_t.scale(1.0 / ab.sqrt());
        let (idx, m) = nearest_seed_rows(&query.value(), &cond.value(), self.neighbors);
        let w = idw_blend(query, cond, &idx, m, self.tau * self.tau);
        let x0 = cond.gather_rows(&idx).mul_col(w).group_sum_rows(m);
        (x_t - x0.scale(ab.sqrt())).scale(1.0 / (1.0 - ab).sqrt())
    }
}

/// Indices of the `min(m, K)` nearest seed rows (6-D) of every query row,
/// flattened row-major, plus the neighbor count used.
pub fn nearest_seed_rows(query: &Mat, seeds: &Mat, m: usize) -> (Vec<usize>, usize) {
    let index: KdTree<6> = KdTree::from_rows(seeds.iter_rows());
    let m = m.clamp(1, seeds.rows().max(1));
    let mut idx = Vec::with_capacity(query.rows() * m);
    for r in query.iter_rows() {
        let q: [f64; 6] = r.try_into().expect("6-D rows");
        idx.extend(index.nearest_k_sq(&q, m).into_iter().map(|(i, _)| i));
    }
    (idx, m)
}

/// Normalized inverse-distance weights `(M·m)×1` between each query row and
/// its listed seeds (`idx` from [`nearest_seed_rows`]). The neighbor choice is
/// fixed; the distances, and so the weights, are differentiable in both inputs.
pub fn idw_blend<'t>(query: Var<'t>, seeds: Var<'t>, idx: &[usize], m: usize, tau2: f64) -> Var<'t> {
    let rep: Vec<usize> = (0..query.rows())
        .flat_map(|i| std::iter::repeat_n(i, m))
        .collect();
    let diff = query.gather_rows(&rep) - seeds.gather_rows(idx);
    let w = diff.square().sum_cols().add_scalar(tau2).recip();
    let total = w.group_sum_rows(m).gather_rows(&rep);
    w / total
}
