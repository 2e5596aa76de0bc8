//! Colored point clouds, unit-ball normalization and random subsampling.

mod ply;

pub use ply::{load_ply, read_ply, save_ply, write_ply, PlyError, PlyLoad};

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::tensor::Mat;

/// Smallest radius a normalization may use; degenerate clouds clamp to it.
pub const MIN_RADIUS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum CloudError {
    #[error("invalid cloud: {0}")]
    InvalidCloud(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// N points, each with a position and an RGB color in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColoredPointCloud {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
}

impl ColoredPointCloud {
    pub fn new(positions: Vec<[f64; 3]>, colors: Vec<[f64; 3]>) -> Result<Self, CloudError> {
        if positions.is_empty() {
            return Err(CloudError::InvalidCloud("cloud has no points".into()));
        }
        if positions.len() != colors.len() {
            return Err(CloudError::InvalidCloud(format!(
                "{} positions but {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if let Some(i) = positions
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(CloudError::InvalidCloud(format!(
                "non-finite position at row {i}"
            )));
        }
        if let Some(i) = colors
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(CloudError::InvalidCloud(format!(
                "color outside [0, 1] at row {i}"
            )));
        }
        Ok(Self { positions, colors })
    }

    /// Geometry-only cloud, painted white.
    pub fn white(positions: Vec<[f64; 3]>) -> Result<Self, CloudError> {
        let colors = vec![[1.0; 3]; positions.len()];
        Self::new(positions, colors)
    }

    /// Builds a cloud from N×6 rows `(x, y, z, r, g, b)`, clamping colors to `[0, 1]`.
    pub fn from_rows6(rows: &Mat) -> Result<Self, CloudError> {
        if rows.cols() != 6 {
            return Err(CloudError::InvalidArgument(format!(
                "expected 6 columns, got {}",
                rows.cols()
            )));
        }
        let mut positions = Vec::with_capacity(rows.rows());
        let mut colors = Vec::with_capacity(rows.rows());
        for r in rows.iter_rows() {
            positions.push([r[0], r[1], r[2]]);
            colors.push([
                clamp_unit(r[3]),
                clamp_unit(r[4]),
                clamp_unit(r[5]),
            ]);
        }
        Self::new(positions, colors)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Always false: a valid cloud holds at least one point.
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    /// N×6 rows with colors after positions.
    pub fn rows6(&self) -> Mat {
        let mut data = Vec::with_capacity(self.len() * 6);
        for (p, c) in self.positions.iter().zip(&self.colors) {
            data.extend_from_slice(p);
            data.extend_from_slice(c);
        }
        Mat::from_vec(self.len(), 6, data)
    }

    /// N×3 position rows.
    pub fn positions_mat(&self) -> Mat {
        Mat::from_rows(&self.positions)
    }

    pub fn select(&self, rows: &[usize]) -> ColoredPointCloud {
        ColoredPointCloud {
            positions: rows.iter().map(|&i| self.positions[i]).collect(),
            colors: rows.iter().map(|&i| self.colors[i]).collect(),
        }
    }

    /// Stacks the rows of all parts in order.
    pub fn concat(parts: &[ColoredPointCloud]) -> Result<ColoredPointCloud, CloudError> {
        let positions = parts.iter().flat_map(|c| c.positions.iter().copied()).collect();
        let colors = parts.iter().flat_map(|c| c.colors.iter().copied()).collect();
        ColoredPointCloud::new(positions, colors)
    }

    /// Axis-aligned bounding box as `(min, max)` corners.
    pub fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Maps world coordinates into the unit ball and back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationScale {
    pub center: [f64; 3],
    pub radius: f64,
}

impl NormalizationScale {
    /// Center at the AABB midpoint, radius the farthest point from it.
    pub fn fit(cloud: &ColoredPointCloud) -> Self {
        let (lo, hi) = cloud.aabb();
        let center = [
            0.5 * (lo[0] + hi[0]),
            0.5 * (lo[1] + hi[1]),
            0.5 * (lo[2] + hi[2]),
        ];
        let radius = max_distance(cloud, center).max(MIN_RADIUS);
        Self { center, radius }
    }

    /// Like [`fit`](Self::fit), but with center and radius exactly representable as
    /// `f32`, and the radius rounded up so the cloud still fits the unit ball.
    pub fn fit_f32(cloud: &ColoredPointCloud) -> Self {
        let (lo, hi) = cloud.aabb();
        let center = [
            (0.5 * (lo[0] + hi[0])) as f32 as f64,
            (0.5 * (lo[1] + hi[1])) as f32 as f64,
            (0.5 * (lo[2] + hi[2])) as f32 as f64,
        ];
        let exact = max_distance(cloud, center).max(MIN_RADIUS);
        let mut r = exact as f32;
        while (r as f64) < exact {
            r = f32::from_bits(r.to_bits() + 1);
        }
        Self {
            center,
            radius: r as f64,
        }
    }

    pub fn to_f32(self) -> [f32; 4] {
        [
            self.center[0] as f32,
            self.center[1] as f32,
            self.center[2] as f32,
            self.radius as f32,
        ]
    }

    pub fn from_f32(v: [f32; 4]) -> Self {
        Self {
            center: [v[0] as f64, v[1] as f64, v[2] as f64],
            radius: v[3] as f64,
        }
    }
}

fn max_distance(cloud: &ColoredPointCloud, center: [f64; 3]) -> f64 {
    cloud
        .positions
        .iter()
        .map(|p| {
            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Centers the cloud on its AABB midpoint and scales it into the unit ball.
pub fn normalize(
    cloud: &ColoredPointCloud,
) -> Result<(ColoredPointCloud, NormalizationScale), CloudError> {
    let scale = NormalizationScale::fit(cloud);
    Ok((normalize_with(cloud, scale)?, scale))
}

/// Applies a precomputed scale: `(p - center) / radius`.
pub fn normalize_with(
    cloud: &ColoredPointCloud,
    scale: NormalizationScale,
) -> Result<ColoredPointCloud, CloudError> {
    if !(scale.radius > 0.0) || !scale.radius.is_finite() {
        return Err(CloudError::InvalidArgument(format!(
            "radius must be positive, got {}",
            scale.radius
        )));
    }
    let c = scale.center;
    let positions = cloud
        .positions
        .iter()
        .map(|p| {
            [
                (p[0] - c[0]) / scale.radius,
                (p[1] - c[1]) / scale.radius,
                (p[2] - c[2]) / scale.radius,
            ]
        })
        .collect();
    ColoredPointCloud::new(positions, cloud.colors.clone())
}

/// Inverse of [`normalize_with`]: `p * radius + center`, colors untouched.
pub fn denormalize(cloud: &ColoredPointCloud, scale: NormalizationScale) -> ColoredPointCloud {
    let c = scale.center;
    let r = scale.radius;
    ColoredPointCloud {
        positions: cloud
            .positions
            .iter()
            .map(|p| [p[0] * r + c[0], p[1] * r + c[1], p[2] * r + c[2]])
            .collect(),
        colors: cloud.colors.clone(),
    }
}

/// Row indices for a uniform subsample of size `m`.
///
/// Without replacement when `m <= n`, with replacement otherwise.
pub fn sample_indices<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>, CloudError> {
    if m == 0 {
        return Err(CloudError::InvalidArgument("sample size must be >= 1".into()));
    }
    if n == 0 {
        return Err(CloudError::InvalidArgument("cannot sample from nothing".into()));
    }
    if m <= n {
        Ok(index::sample(rng, n, m).into_vec())
    } else {
        Ok((0..m).map(|_| rng.random_range(0..n)).collect())
    }
}

pub fn random_sample<R: Rng + ?Sized>(
    cloud: &ColoredPointCloud,
    m: usize,
    rng: &mut R,
) -> Result<ColoredPointCloud, CloudError> {
    let idx = sample_indices(cloud.len(), m, rng)?;
    Ok(cloud.select(&idx))
}

/// 8-bit channel value, rounding half up.
pub fn color_to_u8(c: f64) -> u8 {
    (clamp_unit(c) * 255.0 + 0.5).floor().min(255.0) as u8
}

pub fn color_from_u8(v: u8) -> f64 {
    v as f64 / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: &[[f64; 3]]) -> ColoredPointCloud {
        ColoredPointCloud::white(points.to_vec()).unwrap()
    }

    #[test]
    fn normalize_two_points() {
        let (n, s) = normalize(&cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])).unwrap();
        assert_eq!(s.center, [1.0, 0.0, 0.0]);
        assert_eq!(s.radius, 1.0);
        assert_eq!(n.positions(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_single_point_clamps_radius() {
        let (n, s) = normalize(&cloud(&[[5.0, 5.0, 5.0]])).unwrap();
        assert_eq!(s.center, [5.0, 5.0, 5.0]);
        assert_eq!(s.radius, MIN_RADIUS);
        assert_eq!(n.positions(), &[[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_cube_corners() {
        let mut corners = Vec::new();
        for i in 0..8 {
            corners.push([
                if i & 1 == 0 { -1.0 } else { 1.0 },
                if i & 2 == 0 { -1.0 } else { 1.0 },
                if i & 4 == 0 { -1.0 } else { 1.0 },
            ]);
        }
        // brute-force radius: largest corner norm
        let brute = corners
            .iter()
            .map(|p: &[f64; 3]| p.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let (n, s) = normalize(&cloud(&corners)).unwrap();
        assert_eq!(s.center, [0.0; 3]);
        assert!((s.radius - brute).abs() < 1e-15);
        assert!((s.radius - 3f64.sqrt()).abs() < 1e-15);
        for p in n.positions() {
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let err = ColoredPointCloud::white(vec![[f64::NAN, 0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, CloudError::InvalidCloud(_)));
        assert!(ColoredPointCloud::new(vec![[0.0; 3]], vec![[1.5, 0.0, 0.0]]).is_err());
        assert!(ColoredPointCloud::new(vec![], vec![]).is_err());
    }

    #[test]
    fn denormalize_examples() {
        let s = NormalizationScale {
            center: [1.0, 2.0, 3.0],
            radius: 2.0,
        };
        let out = denormalize(&cloud(&[[0.0, 0.0, 0.0]]), s);
        assert_eq!(out.positions(), &[[1.0, 2.0, 3.0]]);
        let s = NormalizationScale {
            center: [0.0; 3],
            radius: 3.0,
        };
        let out = denormalize(&cloud(&[[1.0, 0.0, 0.0]]), s);
        assert_eq!(out.positions(), &[[3.0, 0.0, 0.0]]);
    }

    #[test]
    fn fit_f32_covers_cloud() {
        let c = cloud(&[[0.1, 0.2, 0.3], [10.7, -3.3, 1e3], [5.5, 5.5, 5.5]]);
        let s = NormalizationScale::fit_f32(&c);
        assert_eq!(NormalizationScale::from_f32(s.to_f32()), s);
        let n = normalize_with(&c, s).unwrap();
        for p in n.positions() {
            assert!(p.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1.0);
        }
    }

    #[test]
    fn sample_full_is_permutation() {
        let c = cloud(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut idx = sample_indices(c.len(), c.len(), &mut rng).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn sample_large_distinct_and_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let x = sample_indices(160_000, 3072, &mut a).unwrap();
        let y = sample_indices(160_000, 3072, &mut b).unwrap();
        assert_eq!(x, y);
        let mut s = x.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 3072);
    }

    #[test]
    fn sample_with_replacement_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = sample_indices(3, 10, &mut rng).unwrap();
        assert_eq!(idx.len(), 10);
        assert!(idx.iter().all(|&i| i < 3));
        assert!(matches!(
            sample_indices(3, 0, &mut rng),
            Err(CloudError::InvalidArgument(_))
        ));
    }

    #[test]
    fn color_quantization_rounds_half_up() {
        assert_eq!(color_to_u8(0.0), 0);
        assert_eq!(color_to_u8(1.0), 255);
        assert_eq!(color_to_u8(0.5), 128);
        for v in 0..=255u8 {
            assert_eq!(color_to_u8(color_from_u8(v)), v);
        }
    }
}
