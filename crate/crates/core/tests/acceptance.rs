//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each with the measured value and its tolerance, and exits non-zero if any
//! criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seedpc::autodiff::Tape;
use seedpc::codec::arith::{BitModel, Encoder};
use seedpc::codec::{self, QuantizedSeeds, SeedStream};
use seedpc::diffusion::{
    add_noise, gaussian, num_rounds, posterior_mean, posterior_mean_traced, predict_x0, sample_patch,
    Denoiser, NoiseSchedule, SeedKernelDenoiser, ROUND_POINTS,
};
use seedpc::metrics::{bd_psnr, bpp, chamfer, psnr_from_color_distortion, RdCurve};
use seedpc::pipeline::{compress, decompress, CompressConfig, DecompressConfig, DenoiserChoice};
use seedpc::pointset::{normalize_with, ColoredPointCloud};
use seedpc::tensor::Mat;
use seedpc::toydenoiser::{synth_shape, Coloring, ShapeKind, ToyDenoiser};
use seedpc::tuning::{
    aggregate_traced, bdsam, init_weights, loss, loss_cd, tune, LossKind, TuneConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within_budget(elapsed: Duration, budget: Duration) -> bool {
    elapsed <= budget
}

fn random_stream(rng: &mut ChaCha8Rng) -> SeedStream {
    let level = rng.random_range(1..=4u8);
    let cells = (level as usize).pow(3);
    let n = rng.random_range(1..=10_000usize);
    let with_colors = rng.random_bool(0.5);
    let q = 12u8;
    // coarse lattice of positions so that duplicates occur
    let spread = if rng.random_bool(0.3) { 64 } else { 1 << q };
    let positions: Vec<[u32; 3]> = (0..n)
        .map(|_| [0; 3].map(|_: u32| rng.random_range(0..spread)))
        .collect();
    let colors = with_colors.then(|| (0..n).map(|_| [0; 3].map(|_: u32| rng.random_range(0..256))).collect());
    let mut cell_rounds: Vec<u8> = (0..cells).map(|_| rng.random_range(0..=255u8)).collect();
    cell_rounds[0] = cell_rounds[0].max(1);
    SeedStream {
        level,
        cell_rounds,
        scale: [0; 4].map(|_: u32| rng.random_range(-10.0f32..10.0)).map(|v| v.abs().max(1e-3)),
        steps: rng.random_range(1..=64),
        geometry_bits: q,
        color_bits: 8,
        seeds: QuantizedSeeds { positions, colors },
    }
}

fn codec_losslessness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = 0;
    for _ in 0..200 {
        let stream = random_stream(&mut rng);
        let decoded = codec::decode(&codec::encode(&stream).unwrap()).unwrap();
        let same = decoded.level == stream.level
            && decoded.cell_rounds == stream.cell_rounds
            && decoded.scale == stream.scale
            && decoded.steps == stream.steps
            && decoded.seeds.sorted() == stream.seeds.sorted()
            && decoded.has_colors() == stream.has_colors();
        failures += usize::from(!same);
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && within_budget(elapsed, Duration::from_secs(5)),
        format!("{failures}/200 mismatched streams in {elapsed:.2?} (budget 5s)"),
    )
}

fn gradient_check() -> Outcome {
    const TOL: f64 = 1e-4;
    const H: f64 = 1e-6;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let patch = synth_shape(ShapeKind::Sphere, 256, Coloring::Gradient, &mut rng).unwrap();
    let selection = bdsam(&patch, 32, 2.0).unwrap();
    let mut weights = init_weights(&patch, &selection, 8, 0.3).unwrap();
    // away from the kink of |w| at zero
    for w in weights.weights.as_mut_slice() {
        *w = rng.random_range(0.2..1.0);
    }
    let source = patch.rows6();
    let model = ToyDenoiser::random(64, &mut rng);
    let sched = NoiseSchedule::cosine(8).unwrap();
    let eps = gaussian(256, 6, &mut rng);
    let t = 5;

    let mut worst: Vec<(LossKind, f64)> = Vec::new();
    for kind in [LossKind::Dm, LossKind::Inver, LossKind::Cdm] {
        let value_at = |w: &Mat| {
            let tape = Tape::new();
            let seeds = aggregate_traced(tape.constant(w.clone()), &weights.neighbors, &source);
            let value = loss(kind, &source, seeds, t, &eps, &model, &sched).value().item();
            value
        };
        let tape = Tape::new();
        let w = tape.param(weights.weights.clone());
        let seeds = aggregate_traced(w, &weights.neighbors, &source);
        let out = loss(kind, &source, seeds, t, &eps, &model, &sched);
        let grad = tape.backward(out).unwrap().wrt(w);
        let mut fd = Mat::zeros(grad.rows(), grad.cols());
        for i in 0..fd.len() {
            let mut plus = weights.weights.clone();
            plus.as_mut_slice()[i] += H;
            let mut minus = weights.weights.clone();
            minus.as_mut_slice()[i] -= H;
            fd.as_mut_slice()[i] = (value_at(&plus) - value_at(&minus)) / (2.0 * H);
        }
        let diff: f64 = grad.as_slice().iter().zip(fd.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        worst.push((kind, diff / norm.max(1e-300)));
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|w| w.1 <= TOL) && within_budget(elapsed, Duration::from_secs(60));
    let listing: Vec<String> = worst.iter().map(|(k, e)| format!("{} {e:.2e}", k.name())).collect();
    outcome(
        pass,
        format!("relative error {} (tol {TOL:.0e}) in {elapsed:.2?} (budget 60s)", listing.join(", ")),
    )
}

fn diffusion_identities() -> Outcome {
    const TOL: f64 = 1e-9;
    let sched = NoiseSchedule::cosine(8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = gaussian(500, 6, &mut rng);
    let eps = gaussian(500, 6, &mut rng);
    let mut inverse: f64 = 0.0;
    let mut residual: f64 = 0.0;
    for t in 1..=8 {
        let x_t = add_noise(&x0, t, &eps, &sched);
        inverse = inverse.max(predict_x0(&x_t, &eps, t, &sched).max_abs_diff(&x0));
        // closed form of the posterior mean with the true noise
        let (ab, a, b) = (sched.alpha_bar(t), sched.alpha(t), sched.beta(t));
        let expected = x_t.zip_map(&eps, |x, e| (x - b / (1.0 - ab).sqrt() * e) / a.sqrt());
        residual = residual.max(posterior_mean(&x_t, &eps, t, &sched).max_abs_diff(&expected));
    }
    let x1 = add_noise(&x0, 1, &eps, &sched);
    let step_one = posterior_mean(&x1, &eps, 1, &sched).max_abs_diff(&x0);
    outcome(
        inverse <= TOL && step_one <= TOL && residual <= TOL,
        format!(
            "inverse {inverse:.1e}, step-one {step_one:.1e}, residual {residual:.1e} (tol {TOL:.0e})"
        ),
    )
}

fn permutation_argument() -> Outcome {
    let sched = NoiseSchedule::cosine(8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = synth_shape(ShapeKind::Torus, 512, Coloring::Checker, &mut rng).unwrap().rows6();
    let seeds = x0.select_rows(&(0..512).step_by(8).collect::<Vec<_>>());
    let eps = gaussian(512, 6, &mut rng);
    let t = 4;
    let perm: Vec<usize> = (0..512).rev().collect();
    let denoiser = SeedKernelDenoiser::default();
    let x_t = add_noise(&x0, t, &eps, &sched);
    let x_prev = add_noise(&x0, t - 1, &eps, &sched);
    let eps_hat = denoiser.eps(&x_t, &seeds, t, &sched);

    let tape = Tape::new();
    let estimate = posterior_mean_traced(tape.constant(x_t.clone()), tape.constant(eps_hat.clone()), t, &sched);
    let cdm = loss_cd(tape.constant(x_prev.clone()), estimate).value().item();
    let cdm_perm = loss_cd(tape.constant(x_prev.select_rows(&perm)), estimate).value().item();
    let dm = eps.sub(&eps_hat).map(|v| v * v).mean();
    let dm_perm = eps.select_rows(&perm).sub(&eps_hat).map(|v| v * v).mean();
    let (d_cdm, d_dm) = ((cdm - cdm_perm).abs(), (dm - dm_perm).abs());
    outcome(
        d_cdm <= 1e-12 && d_dm > 1e-3,
        format!("CDM change {d_cdm:.1e} (max 1e-12), DM change {d_dm:.3} (min 1e-3)"),
    )
}

fn oracle_end_to_end() -> Outcome {
    const MAX_CD: f64 = 0.05;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cloud = synth_shape(ShapeKind::Sphere, 24_576, Coloring::Gradient, &mut rng).unwrap();
    let cfg = CompressConfig {
        level: Some(1),
        steps: 8,
        ..CompressConfig::default()
    };
    let a = compress(&cloud, &DenoiserChoice::Oracle, &cfg).unwrap();
    let b = compress(&cloud, &DenoiserChoice::Oracle, &cfg).unwrap();
    let dcfg = DecompressConfig { seed: 1, jobs: 1 };
    let rec = decompress(&a.bytes, &DenoiserChoice::Oracle, Some(&cloud), &dcfg).unwrap();
    let again = decompress(&a.bytes, &DenoiserChoice::Oracle, Some(&cloud), &dcfg).unwrap();
    let scale = a.stream.normalization();
    let gt_n = normalize_with(&cloud, scale).unwrap();
    let rec_n = normalize_with(&rec, scale).unwrap();
    let cd = chamfer(&gt_n.positions_mat(), &rec_n.positions_mat());
    let deterministic = a.bytes == b.bytes && rec == again;
    let elapsed = start.elapsed();
    outcome(
        cd <= MAX_CD && deterministic && within_budget(elapsed, Duration::from_secs(120)),
        format!(
            "CD {cd:.4} (max {MAX_CD}), {} points, {:.3} bpp, deterministic {deterministic}, {elapsed:.2?} (budget 120s)",
            rec.len(),
            a.report.bpp
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Final 6-D Chamfer distance after tuning one patch with `kind` for
/// `iterations` steps and regrowing it from the tuned seeds.
fn ablation_run(patch: &ColoredPointCloud, kind: LossKind, iterations: usize, seed: u64) -> f64 {
    let sched = NoiseSchedule::cosine(8).unwrap();
    let denoiser = SeedKernelDenoiser::default();
    let cfg = TuneConfig {
        iterations,
        lr: 1e-3,
        loss: kind,
        seeds_per_patch: 256,
        neighbors: 16,
        radius: 0.15,
        sample_points: 1024,
        seed,
        jobs: 1,
    };
    let out = tune(std::slice::from_ref(patch), 2.0, &denoiser, &sched, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rec = sample_patch(&denoiser, &out.seeds[0], patch.len(), &sched, &mut rng).unwrap();
    chamfer(&patch.rows6(), &rec.rows6())
}

fn ablation_directions() -> Outcome {
    const ITERATIONS: usize = 200;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let patch = synth_shape(ShapeKind::Torus, 3072, Coloring::Checker, &mut rng).unwrap();
    let (mut untuned, mut cdm, mut dm) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5 {
        untuned.push(ablation_run(&patch, LossKind::Cdm, 0, seed));
        cdm.push(ablation_run(&patch, LossKind::Cdm, ITERATIONS, seed));
        dm.push(ablation_run(&patch, LossKind::Dm, ITERATIONS, seed));
    }
    let (u, c, d) = (median(untuned), median(cdm), median(dm));
    let elapsed = start.elapsed();
    outcome(
        c < u && c <= d && within_budget(elapsed, Duration::from_secs(900)),
        format!(
            "median CD untuned {u:.5}, tuned CDM {c:.5}, tuned DM {d:.5} (need CDM < untuned and CDM <= DM), {elapsed:.2?} (budget 900s)"
        ),
    )
}

fn metric_checks() -> Outcome {
    let rates = [0.1, 0.2, 0.4, 0.8, 1.6];
    let base: Vec<(f64, f64)> = rates.iter().map(|&r: &f64| (r, 28.0 + 7.0 * r.log10() - 0.8 * r.log10().powi(2))).collect();
    let reference = RdCurve::new(base.clone()).unwrap();
    let shifted = RdCurve::new(base.iter().map(|&(r, p)| (r, p + 2.0)).collect()).unwrap();
    let other = RdCurve::new(
        [0.15, 0.3, 0.6, 1.2, 2.4]
            .iter()
            .map(|&r: &f64| (r, 27.0 + 9.0 * r.log10() + 0.3 * r.log10().powi(3)))
            .collect(),
    )
    .unwrap();
    let same = bd_psnr(&reference, &reference).unwrap();
    let offset = bd_psnr(&reference, &shifted).unwrap();
    let anti = (bd_psnr(&reference, &other).unwrap() + bd_psnr(&other, &reference).unwrap()).abs();
    let rate_ok = bpp(248, 100).unwrap() == 2.48 && bpp(160_000, 160_000).unwrap() == 1.0;
    let color = psnr_from_color_distortion(1.0);
    let pass = same == 0.0
        && (offset - 2.0).abs() <= 1e-6
        && anti <= 1e-9
        && rate_ok
        && (color - 48.1308).abs() <= 1e-3;
    outcome(
        pass,
        format!(
            "identical {same}, offset {offset:.9} (2 ± 1e-6), antisymmetry {anti:.1e} (max 1e-9), bpp exact {rate_ok}, color {color:.4} (48.1308 ± 1e-3)"
        ),
    )
}

fn round_arithmetic() -> Outcome {
    let cases = [(1000, 1), (4000, 1), (6144, 2), (30720, 10)];
    let sched = NoiseSchedule::cosine(2).unwrap();
    let seeds = Mat::from_rows(&[[0.0, 0.0, 0.0, 0.5, 0.5, 0.5], [0.1, 0.0, 0.0, 0.5, 0.5, 0.5]]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut details = Vec::new();
    let mut pass = true;
    for (n, expected) in cases {
        let rounds = num_rounds(n);
        let points = sample_patch(&SeedKernelDenoiser::default(), &seeds, n, &sched, &mut rng)
            .unwrap()
            .len();
        pass &= rounds == expected && points == ROUND_POINTS * expected;
        details.push(format!("{n}→{rounds}/{points}"));
    }
    outcome(pass, format!("rounds/points {}", details.join(", ")))
}

fn coder_efficiency() -> Outcome {
    let p: f64 = 0.99;
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut enc = Encoder::new();
    let mut model = BitModel::default();
    for _ in 0..n {
        enc.encode_with(rng.random_bool(p), &mut model);
    }
    let bits = 8.0 * enc.finish().len() as f64;
    let entropy = -p * p.log2() - (1.0 - p) * (1.0 - p).log2();
    let bound = n as f64 * entropy;
    let limit = 1.25 * bound + 64.0;
    outcome(
        bits <= limit,
        format!("{bits} bits vs Shannon bound {bound:.1} (limit {limit:.1})"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("codec losslessness", codec_losslessness),
        ("gradient correctness", gradient_check),
        ("diffusion identities", diffusion_identities),
        ("permutation invariance", permutation_argument),
        ("oracle end-to-end", oracle_end_to_end),
        ("ablation directions", ablation_directions),
        ("metrics", metric_checks),
        ("sampling-round arithmetic", round_arithmetic),
        ("entropy coder efficiency", coder_efficiency),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = run();
        failed += usize::from(!result.pass);
        println!(
            "{} criterion {}: {name}: {}",
            if result.pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
