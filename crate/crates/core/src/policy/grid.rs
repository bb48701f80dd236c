//! Target-centred occupancy grid used by the social pooling blocks.
//!
//! Rows run along the direction of travel (row index grows with `x`), columns
//! across lanes (column index grows with `y`). The target sits in the centre
//! cell.

use std::collections::BTreeMap;

use crate::policy::config::CspConfig;
use crate::scene::{AgentId, Point};

/// Grid cell `(row, col)` of an offset from the target, if it falls inside the grid.
pub fn cell_for_offset(dx: f64, dy: f64, config: &CspConfig) -> Option<(usize, usize)> {
    let half_rows = (config.grid_rows / 2) as f64;
    let half_cols = (config.grid_cols / 2) as f64;
    let row = ((dx + config.cell_length / 2.0) / config.cell_length).floor();
    let col = ((dy + config.cell_width / 2.0) / config.cell_width).floor();
    if row.abs() > half_rows || col.abs() > half_cols {
        return None;
    }
    Some(((row + half_rows) as usize, (col + half_cols) as usize))
}

/// Offset of a cell centre from the target.
pub fn cell_center(row: usize, col: usize, config: &CspConfig) -> Point {
    let r = row as f64 - (config.grid_rows / 2) as f64;
    let c = col as f64 - (config.grid_cols / 2) as f64;
    [r * config.cell_length, c * config.cell_width]
}

/// Assigns neighbors to cells; when several share a cell the one nearest its
/// centre wins (lowest id on exact ties). Keys are flat `row * cols + col`.
pub fn assign_cells(
    target_position: Point,
    neighbors: impl IntoIterator<Item = (AgentId, Point)>,
    config: &CspConfig,
) -> BTreeMap<usize, AgentId> {
    let mut best: BTreeMap<usize, (f64, AgentId)> = BTreeMap::new();
    for (id, p) in neighbors {
        let dx = p[0] - target_position[0];
        let dy = p[1] - target_position[1];
        let Some((row, col)) = cell_for_offset(dx, dy, config) else {
            continue;
        };
        let c = cell_center(row, col, config);
        let dist = (dx - c[0]).hypot(dy - c[1]);
        let cell = row * config.grid_cols + col;
        let replace = match best.get(&cell) {
            None => true,
            Some((d, other)) => dist < *d || (dist == *d && id < *other),
        };
        if replace {
            best.insert(cell, (dist, id));
        }
    }
    best.into_iter().map(|(cell, (_, id))| (cell, id)).collect()
}

/// Pooled encodings laid out `[channels, rows, cols]` with per-cell occupancy.
#[derive(Clone, Debug, PartialEq)]
pub struct SocialGrid {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub occupancy: Vec<Option<AgentId>>,
}

/// Grid of encoded neighbor histories.
pub type SocialGridTensor = SocialGrid;
/// Grid of encoded predicted neighbor futures.
pub type FutureGridTensor = SocialGrid;

impl SocialGrid {
    pub fn cell(&self, row: usize, col: usize) -> Vec<f64> {
        let cells = self.rows * self.cols;
        let idx = row * self.cols + col;
        (0..self.channels).map(|ch| self.values[ch * cells + idx]).collect()
    }

    pub fn occupied_cells(&self) -> Vec<(usize, usize, AgentId)> {
        self.occupancy
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.map(|id| (i / self.cols, i % self.cols, id)))
            .collect()
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_cell(dx: f64, dy: f64, c: &CspConfig) -> Option<(usize, usize)> {
        // nearest centre among all cells, accepted only if within half a cell on both axes
        let mut found = None;
        for row in 0..c.grid_rows {
            for col in 0..c.grid_cols {
                let ctr = cell_center(row, col, c);
                let in_row = dx >= ctr[0] - c.cell_length / 2.0 && dx < ctr[0] + c.cell_length / 2.0;
                let in_col = dy >= ctr[1] - c.cell_width / 2.0 && dy < ctr[1] + c.cell_width / 2.0;
                if in_row && in_col {
                    assert!(found.is_none(), "cells overlap");
                    found = Some((row, col));
                }
            }
        }
        found
    }

    #[test]
    fn one_cell_ahead() {
        let c = CspConfig::default();
        assert_eq!(cell_for_offset(0.0, 0.0, &c), Some((6, 1)));
        assert_eq!(cell_for_offset(c.cell_length, 0.0, &c), Some((7, 1)));
        assert_eq!(cell_for_offset(-c.cell_length, c.cell_width, &c), Some((5, 2)));
        assert_eq!(cell_for_offset(7.0 * c.cell_length, 0.0, &c), None);
        assert_eq!(cell_for_offset(0.0, -2.0 * c.cell_width, &c), None);
    }

    #[test]
    fn matches_brute_force_over_offsets() {
        let c = CspConfig::default();
        let mut dx = -35.0;
        while dx < 35.0 {
            let mut dy = -7.0;
            while dy < 7.0 {
                assert_eq!(cell_for_offset(dx, dy, &c), brute_force_cell(dx, dy, &c), "offset ({dx}, {dy})");
                dy += 0.37;
            }
            dx += 0.29;
        }
    }

    #[test]
    fn nearest_to_centre_wins() {
        let c = CspConfig::default();
        let cells = assign_cells(
            [0.0, 0.0],
            [(AgentId(3), [c.cell_length + 1.0, 0.0]), (AgentId(4), [c.cell_length + 0.2, 0.0])],
            &c,
        );
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[&(7 * 3 + 1)], AgentId(4));
    }
}
