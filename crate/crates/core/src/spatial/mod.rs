//! Nearest-neighbor search, ball queries, farthest point sampling and normals.

mod kdtree;

pub use kdtree::{KdIndex, KdTree};

use nalgebra::{Matrix3, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpatialError {
    #[error("index holds no points")]
    EmptyIndex,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Greedy max-min sampling of `m` rows, starting from `start`.
pub fn farthest_point_sample<const D: usize>(
    points: &[[f64; D]],
    m: usize,
    start: usize,
) -> Result<Vec<usize>, SpatialError> {
    if start >= points.len() {
        return Err(SpatialError::InvalidArgument(format!(
            "start row {start} out of range for {} points",
            points.len()
        )));
    }
    farthest_point_sample_from(points, &[start], m)
}

/// Greedy max-min sampling that keeps `initial` and adds rows until `m` are chosen.
///
/// Ties go to the lower row. `initial` must be non-empty and hold distinct rows;
/// if it already has `m` or more rows, it is returned truncated to `m`.
pub fn farthest_point_sample_from<const D: usize>(
    points: &[[f64; D]],
    initial: &[usize],
    m: usize,
) -> Result<Vec<usize>, SpatialError> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(SpatialError::InvalidArgument(format!(
            "cannot pick {m} of {n} points"
        )));
    }
    if initial.is_empty() {
        return Err(SpatialError::InvalidArgument("no starting rows".into()));
    }
    if initial.len() >= m {
        return Ok(initial[..m].to_vec());
    }
    let mut chosen = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let relax = |row: usize, min_d2: &mut [f64]| {
        let p = &points[row];
        for (d, q) in min_d2.iter_mut().zip(points) {
            let mut s = 0.0;
            for a in 0..D {
                let t = p[a] - q[a];
                s += t * t;
            }
            if s < *d {
                *d = s;
            }
        }
    };
    for &r in initial {
        if r >= n || taken[r] {
            return Err(SpatialError::InvalidArgument(format!(
                "bad or repeated starting row {r}"
            )));
        }
        taken[r] = true;
        chosen.push(r);
        relax(r, &mut min_d2);
    }
    while chosen.len() < m {
        let mut best = None;
        for (i, &d) in min_d2.iter().enumerate() {
            if taken[i] {
                continue;
            }
            match best {
                Some((_, bd)) if d <= bd => {}
                _ => best = Some((i, d)),
            }
        }
        let (row, _) = best.expect("m <= n leaves an untaken row");
        taken[row] = true;
        chosen.push(row);
        relax(row, &mut min_d2);
    }
    Ok(chosen)
}

/// Unit normals from k-NN covariance, plus a per-point degeneracy flag.
#[derive(Clone, Debug)]
pub struct Normals {
    pub normals: Vec<[f64; 3]>,
    /// The neighborhood had rank < 2; the normal is the `(0, 0, 1)` fallback.
    pub degenerate: Vec<bool>,
}

pub const FALLBACK_NORMAL: [f64; 3] = [0.0, 0.0, 1.0];

/// Normal of each point: eigenvector of the smallest eigenvalue of the
/// covariance of its `k` nearest neighbors (itself included). Sign is arbitrary.
pub fn estimate_normals(positions: &[[f64; 3]], k: usize) -> Result<Normals, SpatialError> {
    if positions.len() < 3 || k < 3 {
        return Err(SpatialError::InvalidArgument(format!(
            "normals need >= 3 points and k >= 3, got {} points, k = {k}",
            positions.len()
        )));
    }
    let index = KdIndex::build(positions.to_vec());
    let k = k.min(positions.len());
    let mut normals = Vec::with_capacity(positions.len());
    let mut degenerate = Vec::with_capacity(positions.len());
    for p in positions {
        let nb = index.nearest_k_sq(p, k);
        let mut mean = [0.0; 3];
        for &(r, _) in &nb {
            for a in 0..3 {
                mean[a] += positions[r][a];
            }
        }
        mean.iter_mut().for_each(|v| *v /= nb.len() as f64);
        let mut cov = Matrix3::<f64>::zeros();
        for &(r, _) in &nb {
            let d = [
                positions[r][0] - mean[0],
                positions[r][1] - mean[1],
                positions[r][2] - mean[2],
            ];
            for i in 0..3 {
                for j in 0..3 {
                    cov[(i, j)] += d[i] * d[j];
                }
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let (l1, l2) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
        if l2 <= 0.0 || l1 <= 1e-12 * l2 {
            normals.push(FALLBACK_NORMAL);
            degenerate.push(true);
            continue;
        }
        let v = eig.eigenvectors.column(order[0]);
        let norm = v.norm();
        normals.push([v[0] / norm, v[1] / norm, v[2] / norm]);
        degenerate.push(false);
    }
    Ok(Normals {
        normals,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_on_a_line() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 2]);
        let mut all = farthest_point_sample(&pts, 3, 1).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(farthest_point_sample(&pts, 4, 0).is_err());
    }

    #[test]
    fn fps_is_deterministic_with_ties() {
        let pts = [[0.0; 3], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let a = farthest_point_sample(&pts, 3, 0).unwrap();
        assert_eq!(a, farthest_point_sample(&pts, 3, 0).unwrap());
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn planar_normals() {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push([i as f64 * 0.1, j as f64 * 0.13, 0.0]);
            }
        }
        let n = estimate_normals(&pts, 8).unwrap();
        for (v, d) in n.normals.iter().zip(&n.degenerate) {
            assert!(!d);
            assert!((v[2].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_normals_fall_back() {
        let pts: Vec<[f64; 3]> = (0..20).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        let n = estimate_normals(&pts, 5).unwrap();
        assert!(n.degenerate.iter().all(|&d| d));
        assert!(n.normals.iter().all(|v| *v == FALLBACK_NORMAL));
    }

    #[test]
    fn normals_reject_tiny_inputs() {
        assert!(estimate_normals(&[[0.0; 3], [1.0; 3]], 3).is_err());
        assert!(estimate_normals(&[[0.0; 3], [1.0; 3], [2.0; 3]], 2).is_err());
    }
}
