use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::SpatialError;

const LEAF_SIZE: usize = 8;

/// Immutable balanced k-d tree over `D`-dimensional points.
///
/// Distances are Euclidean. Equal distances are ordered by lower row index, so
/// every query returns exactly what a brute-force scan sorted by
/// `(distance, row)` would.
#[derive(Clone, Debug)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    order: Vec<usize>,
    axes: Vec<u8>,
}

/// Three-dimensional index over point positions.
pub type KdIndex = KdTree<3>;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    d2: f64,
    row: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.row.cmp(&other.row))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[inline]
fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for i in 0..D {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

impl<const D: usize> KdTree<D> {
    pub fn build(points: Vec<[f64; D]>) -> Self {
        let n = points.len();
        let mut tree = Self {
            order: (0..n).collect(),
            axes: vec![0; n],
            points,
        };
        tree.build_range(0, n);
        tree
    }

    /// Builds from the leading `D` columns of each row.
    pub fn from_rows<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Self {
        Self::build(
            rows.map(|r| {
                let mut p = [0.0; D];
                p.copy_from_slice(&r[..D]);
                p
            })
            .collect(),
        )
    }

    fn build_range(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF_SIZE {
            return;
        }
        let axis = self.widest_axis(lo, hi);
        let mid = (lo + hi) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        self.axes[mid] = axis as u8;
        self.build_range(lo, mid);
        self.build_range(mid + 1, hi);
    }

    fn widest_axis(&self, lo: usize, hi: usize) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for axis in 0..D {
            let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[lo..hi] {
                let v = self.points[i][axis];
                mn = mn.min(v);
                mx = mx.max(v);
            }
            if mx - mn > best.1 {
                best = (axis, mx - mn);
            }
        }
        best.0
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, row: usize) -> &[f64; D] {
        &self.points[row]
    }

    /// The `k` nearest rows as `(row, squared distance)`, ascending, without padding.
    /// Returns fewer than `k` entries only when the tree holds fewer points.
    pub fn nearest_k_sq(&self, query: &[f64; D], k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(query, k, 0, self.points.len(), &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort_unstable();
        out.into_iter().map(|c| (c.row, c.d2)).collect()
    }

    /// Nearest row and its squared distance.
    pub fn nearest_sq(&self, query: &[f64; D]) -> Option<(usize, f64)> {
        self.nearest_k_sq(query, 1).into_iter().next()
    }

    fn offer(&self, heap: &mut BinaryHeap<Candidate>, k: usize, c: Candidate) {
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().unwrap() {
            heap.pop();
            heap.push(c);
        }
    }

    fn search(
        &self,
        q: &[f64; D],
        k: usize,
        lo: usize,
        hi: usize,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        if hi - lo <= LEAF_SIZE {
            for &row in &self.order[lo..hi] {
                let c = Candidate {
                    d2: dist2(q, &self.points[row]),
                    row,
                };
                self.offer(heap, k, c);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let row = self.order[mid];
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.points[row][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, k, near.0, near.1, heap);
        self.offer(
            heap,
            k,
            Candidate {
                d2: dist2(q, &self.points[row]),
                row,
            },
        );
        // `<=` keeps equal-distance, lower-index rows on the far side reachable.
        if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
            self.search(q, k, far.0, far.1, heap);
        }
    }

    /// `k` nearest rows with Euclidean distances, ascending.
    ///
    /// When the tree holds fewer than `k` points, the nearest row is repeated
    /// to fill the list.
    pub fn knn(&self, query: &[f64; D], k: usize) -> Result<Vec<(usize, f64)>, SpatialError> {
        if self.points.is_empty() {
            return Err(SpatialError::EmptyIndex);
        }
        if k == 0 {
            return Err(SpatialError::InvalidArgument("k must be >= 1".into()));
        }
        let mut out: Vec<(usize, f64)> = self
            .nearest_k_sq(query, k)
            .into_iter()
            .map(|(r, d2)| (r, d2.sqrt()))
            .collect();
        let first = out[0];
        out.resize(k, first);
        Ok(out)
    }

    /// Up to `k` rows within `radius`, ascending, padded to exactly `k` by
    /// repeating the nearest one. An empty ball falls back to [`knn`](Self::knn).
    pub fn ball_query(
        &self,
        query: &[f64; D],
        k: usize,
        radius: f64,
    ) -> Result<Vec<usize>, SpatialError> {
        if !(radius > 0.0) {
            return Err(SpatialError::InvalidArgument(format!(
                "radius must be positive, got {radius}"
            )));
        }
        let nearest = self.knn(query, k)?;
        let mut inside: Vec<usize> = nearest
            .iter()
            .take_while(|(_, d)| *d <= radius)
            .map(|(r, _)| *r)
            .collect();
        // `knn` pads with the nearest row, so a short tree can list it twice.
        inside.truncate(self.points.len().min(k));
        if inside.is_empty() {
            return Ok(nearest.into_iter().map(|(r, _)| r).collect());
        }
        let first = inside[0];
        inside.resize(k, first);
        Ok(inside)
    }
}
