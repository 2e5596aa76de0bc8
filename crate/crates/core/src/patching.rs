//! Voxel-grid patch division over the fixed `[-1, 1]³` box.
//!
//! A level-`l` grid has `l³` cells. Cell `(ix, iy, iz)` has index
//! `ix + iy·l + iz·l²`, and cells are always visited in ascending index order,
//! so compressor and decompressor agree on patch order without side data.

use thiserror::Error;

use crate::pointset::ColoredPointCloud;

pub const MAX_LEVEL: usize = 10;
/// Default points-per-patch target for [`select_level`]: eight up-sampling rounds.
pub const DEFAULT_TARGET_POINTS: usize = 8 * 3072;

const BOX_SLACK: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PatchError {
    #[error("level {0} outside [1, {MAX_LEVEL}]")]
    InvalidLevel(usize),
    #[error("point {row} at {pos:?} lies outside the normalized box")]
    OutOfBox { row: usize, pos: [f64; 3] },
}

/// Grid coordinate of `x ∈ [-1, 1]` along one axis.
pub fn axis_cell(x: f64, level: usize) -> usize {
    let v = ((x + 1.0) / 2.0 * level as f64).floor();
    if v < 0.0 {
        0
    } else {
        (v as usize).min(level - 1)
    }
}

pub fn cell_index(p: &[f64; 3], level: usize) -> usize {
    axis_cell(p[0], level) + axis_cell(p[1], level) * level + axis_cell(p[2], level) * level * level
}

/// `(ix, iy, iz)` of a cell index.
pub fn cell_coords(cell: usize, level: usize) -> [usize; 3] {
    [cell % level, (cell / level) % level, cell / (level * level)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub level: usize,
    pub cell_of_point: Vec<usize>,
    /// Point count of every cell, empty ones included (`l³` entries).
    pub counts: Vec<usize>,
    /// Occupied cells, ascending.
    pub occupied: Vec<usize>,
}

impl PatchGrid {
    pub fn num_cells(&self) -> usize {
        self.level.pow(3)
    }

    /// Row indices of each occupied cell, in canonical order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut slot = vec![usize::MAX; self.num_cells()];
        for (i, &c) in self.occupied.iter().enumerate() {
            slot[c] = i;
        }
        let mut out = vec![Vec::new(); self.occupied.len()];
        for (row, &c) in self.cell_of_point.iter().enumerate() {
            out[slot[c]].push(row);
        }
        out
    }

    /// Edge length of one cell in normalized units.
    pub fn cell_edge(&self) -> f64 {
        2.0 / self.level as f64
    }
}

pub fn check_level(level: usize) -> Result<(), PatchError> {
    if (1..=MAX_LEVEL).contains(&level) {
        Ok(())
    } else {
        Err(PatchError::InvalidLevel(level))
    }
}

/// Assigns every point of a normalized cloud to its grid cell.
pub fn assign(positions: &[[f64; 3]], level: usize) -> Result<PatchGrid, PatchError> {
    check_level(level)?;
    let mut counts = vec![0; level.pow(3)];
    let mut cell_of_point = Vec::with_capacity(positions.len());
    for (row, p) in positions.iter().enumerate() {
        if p.iter().any(|v| !(v.abs() <= 1.0 + BOX_SLACK)) {
            return Err(PatchError::OutOfBox { row, pos: *p });
        }
        let c = cell_index(p, level);
        counts[c] += 1;
        cell_of_point.push(c);
    }
    let occupied = counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(c, _)| c)
        .collect();
    Ok(PatchGrid {
        level,
        cell_of_point,
        counts,
        occupied,
    })
}

/// Splits a normalized cloud into per-cell patches, occupied cells only, in
/// canonical order.
pub fn divide(
    cloud: &ColoredPointCloud,
    level: usize,
) -> Result<(PatchGrid, Vec<ColoredPointCloud>), PatchError> {
    let grid = assign(cloud.positions(), level)?;
    let patches = grid.members().iter().map(|rows| cloud.select(rows)).collect();
    Ok((grid, patches))
}

/// Smallest level whose average cell load is at most `target` points.
pub fn select_level(n_points: usize, target: usize) -> usize {
    let target = target.max(1);
    (1..=MAX_LEVEL)
        .find(|&l| n_points as u128 <= target as u128 * l.pow(3) as u128)
        .unwrap_or(MAX_LEVEL)
}
