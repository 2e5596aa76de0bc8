//! Rate and distortion measures: bits per point, geometry PSNR (D1/D2), color
//! PSNR (D3), Chamfer distance and Bjøntegaard delta PSNR.
//!
//! A PSNR of `f64::INFINITY` means zero distortion.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::pointset::ColoredPointCloud;
use crate::spatial::{estimate_normals, KdIndex};
use crate::tensor::Mat;

pub use crate::tuning::chamfer;

/// Neighbors used for normal estimation in D2.
pub const NORMAL_NEIGHBORS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("rate ranges of the two curves do not overlap")]
    NoOverlap,
}

/// Bits per point `L / N`.
pub fn bpp(bits: u64, points: usize) -> Result<f64, MetricsError> {
    if points == 0 {
        return Err(MetricsError::InvalidArgument("point count must be >= 1".into()));
    }
    Ok(bits as f64 / points as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeometryMode {
    /// Point to point.
    D1,
    /// Point to plane.
    D2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PsnrFormula {
    /// Squared errors over a peak of `3·r²`, `r` the largest nearest-neighbor
    /// spacing inside the ground truth.
    Mpeg,
    /// Unsquared errors over the unsquared spacing `r`.
    Unsquared,
}

impl std::str::FromStr for PsnrFormula {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mpeg" => Ok(PsnrFormula::Mpeg),
            "unsquared" => Ok(PsnrFormula::Unsquared),
            _ => Err(format!("unknown PSNR formula '{s}' (expected mpeg or unsquared)")),
        }
    }
}

impl PsnrFormula {
    pub fn name(self) -> &'static str {
        match self {
            PsnrFormula::Mpeg => "mpeg",
            PsnrFormula::Unsquared => "unsquared",
        }
    }
}

/// Largest distance from a point to its nearest other point.
pub fn intrinsic_resolution(points: &[[f64; 3]]) -> Result<f64, MetricsError> {
    if points.len() < 2 {
        return Err(MetricsError::InvalidArgument(
            "resolution needs at least 2 points".into(),
        ));
    }
    let index = KdIndex::build(points.to_vec());
    Ok(points
        .iter()
        .map(|p| index.nearest_k_sq(p, 2)[1].1.sqrt())
        .fold(0.0, f64::max))
}

fn nearest_rows(from: &[[f64; 3]], to: &KdIndex) -> Vec<usize> {
    from.iter()
        .map(|p| to.nearest_sq(p).expect("non-empty").0)
        .collect()
}

/// Two-way average geometry error: the mean of both directions' mean
/// per-point error. `squared` picks squared or plain distances.
pub fn geometry_distortion(
    gt: &[[f64; 3]],
    rec: &[[f64; 3]],
    mode: GeometryMode,
    squared: bool,
) -> Result<f64, MetricsError> {
    if gt.is_empty() || rec.is_empty() {
        return Err(MetricsError::InvalidArgument("clouds must be non-empty".into()));
    }
    let normals = |pts: &[[f64; 3]]| -> Result<Option<Vec<[f64; 3]>>, MetricsError> {
        match mode {
            GeometryMode::D1 => Ok(None),
            GeometryMode::D2 => estimate_normals(pts, NORMAL_NEIGHBORS)
                .map(|n| Some(n.normals))
                .map_err(|e| MetricsError::InvalidArgument(e.to_string())),
        }
    };
    let (n_gt, n_rec) = (normals(gt)?, normals(rec)?);
    let (t_gt, t_rec) = (KdIndex::build(gt.to_vec()), KdIndex::build(rec.to_vec()));
    // error of each `from` point against its match in `to`, projected on the match's normal for D2
    let one_way = |from: &[[f64; 3]], to: &[[f64; 3]], tree: &KdIndex, normals: &Option<Vec<[f64; 3]>>| {
        let idx = nearest_rows(from, tree);
        let total: f64 = from
            .iter()
            .zip(&idx)
            .map(|(p, &j)| {
                let d = [p[0] - to[j][0], p[1] - to[j][1], p[2] - to[j][2]];
                let e2 = match normals {
                    None => d[0] * d[0] + d[1] * d[1] + d[2] * d[2],
                    Some(n) => {
                        let proj = d[0] * n[j][0] + d[1] * n[j][1] + d[2] * n[j][2];
                        proj * proj
                    }
                };
                if squared {
                    e2
                } else {
                    e2.sqrt()
                }
            })
            .sum();
        total / from.len() as f64
    };
    Ok(0.5 * (one_way(rec, gt, &t_gt, &n_gt) + one_way(gt, rec, &t_rec, &n_rec)))
}

/// Geometry PSNR in dB; `f64::INFINITY` when the distortion is zero.
pub fn psnr_geometry(
    gt: &[[f64; 3]],
    rec: &[[f64; 3]],
    mode: GeometryMode,
    formula: PsnrFormula,
) -> Result<f64, MetricsError> {
    let r = intrinsic_resolution(gt)?;
    let (peak, dis) = match formula {
        PsnrFormula::Mpeg => (3.0 * r * r, geometry_distortion(gt, rec, mode, true)?),
        PsnrFormula::Unsquared => (r, geometry_distortion(gt, rec, mode, false)?),
    };
    Ok(psnr(peak, dis))
}

fn psnr(peak: f64, dis: f64) -> f64 {
    if dis == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak / dis).log10()
    }
}

/// Full-range BT.601 YUV of an 8-bit-scale RGB triple, chroma offset by 128.
pub fn rgb_to_yuv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0,
        0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0,
    ]
}

/// Two-way mean squared YUV error between geometric nearest neighbors, on
/// the 0–255 scale, averaged over the three channels.
pub fn color_distortion(gt: &ColoredPointCloud, rec: &ColoredPointCloud) -> f64 {
    let yuv = |c: &ColoredPointCloud| -> Vec<[f64; 3]> {
        c.colors().iter().map(|v| rgb_to_yuv(v.map(|x| x * 255.0))).collect()
    };
    let (y_gt, y_rec) = (yuv(gt), yuv(rec));
    let (t_gt, t_rec) = (
        KdIndex::build(gt.positions().to_vec()),
        KdIndex::build(rec.positions().to_vec()),
    );
    let one_way = |from: &ColoredPointCloud, from_yuv: &[[f64; 3]], tree: &KdIndex, to_yuv: &[[f64; 3]]| {
        let idx = nearest_rows(from.positions(), tree);
        idx.iter()
            .zip(from_yuv)
            .map(|(&j, a)| (0..3).map(|c| (a[c] - to_yuv[j][c]).powi(2)).sum::<f64>() / 3.0)
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (one_way(rec, &y_rec, &t_gt, &y_gt) + one_way(gt, &y_gt, &t_rec, &y_rec))
}

/// Color PSNR over a peak of 255².
pub fn psnr_color(gt: &ColoredPointCloud, rec: &ColoredPointCloud) -> f64 {
    psnr_from_color_distortion(color_distortion(gt, rec))
}

pub fn psnr_from_color_distortion(dis: f64) -> f64 {
    psnr(255.0 * 255.0, dis)
}

/// Geometry-only Chamfer distance between two clouds.
pub fn chamfer_geometry(a: &ColoredPointCloud, b: &ColoredPointCloud) -> f64 {
    chamfer(&a.positions_mat(), &b.positions_mat())
}

/// Rate-distortion samples `(bpp, psnr)` with strictly increasing rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    points: Vec<(f64, f64)>,
}

impl RdCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, MetricsError> {
        if points.len() < 4 {
            return Err(MetricsError::InvalidArgument(format!(
                "a curve needs at least 4 samples, got {}",
                points.len()
            )));
        }
        if points.iter().any(|&(r, d)| !(r > 0.0 && r.is_finite() && d.is_finite())) {
            return Err(MetricsError::InvalidArgument(
                "rates must be positive and PSNR values finite".into(),
            ));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(MetricsError::InvalidArgument(
                "rates must be strictly increasing".into(),
            ));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    fn log_range(&self) -> (f64, f64) {
        (
            self.points[0].0.log10(),
            self.points[self.points.len() - 1].0.log10(),
        )
    }

    /// Least-squares cubic `psnr ≈ c0 + c1·x + c2·x² + c3·x³` in `x = log10(bpp)`.
    pub fn cubic_fit(&self) -> [f64; 4] {
        let n = self.points.len();
        let a = DMatrix::from_fn(n, 4, |i, j| self.points[i].0.log10().powi(j as i32));
        let b = DVector::from_iterator(n, self.points.iter().map(|p| p.1));
        let svd = a.svd(true, true);
        let c = svd.solve(&b, 1e-12).expect("SVD with both factors");
        [c[0], c[1], c[2], c[3]]
    }
}

/// Definite integral of a cubic over `[lo, hi]`.
pub fn integrate_cubic(c: [f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

/// Average PSNR gap of `test` over `reference` on their shared log-rate
/// interval; positive means `test` is better.
pub fn bd_psnr(reference: &RdCurve, test: &RdCurve) -> Result<f64, MetricsError> {
    let (a0, a1) = reference.log_range();
    let (b0, b1) = test.log_range();
    let (lo, hi) = (a0.max(b0), a1.min(b1));
    if !(hi > lo) {
        return Err(MetricsError::NoOverlap);
    }
    let r = integrate_cubic(reference.cubic_fit(), lo, hi);
    let t = integrate_cubic(test.cubic_fit(), lo, hi);
    Ok((t - r) / (hi - lo))
}

/// Positions of an N×k matrix's leading three columns.
pub fn positions_of(m: &Mat) -> Vec<[f64; 3]> {
    m.iter_rows().map(|r| [r[0], r[1], r[2]]).collect()
}
