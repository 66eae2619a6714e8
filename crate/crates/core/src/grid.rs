//! Patch-grid geometry: token coordinates, cross-grid coordinate mapping and
//! radius neighborhoods.
//!
//! Tokens are enumerated in raster order, so token `u` of a `rows x cols`
//! grid sits at `(u / cols, u % cols)`. A neighborhood of radius `r` around a
//! query token contains every key token whose coordinate lies within
//! Euclidean distance `r` of the query's coordinate mapped onto the key grid.
//! Keys outside the grid simply do not exist, so border neighborhoods are
//! truncated rather than padded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

pub type Coord = (usize, usize);

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid extents must be positive, got {rows}x{cols}"
            )));
        }
        Ok(Self { rows, cols })
    }

    /// Grid of `patch x patch` tiles covering a `height x width` image.
    pub fn from_image(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::InvalidArgument("patch size must be positive".into()));
        }
        let (rem_h, rem_w) = (height % patch, width % patch);
        if rem_h != 0 || rem_w != 0 {
            return Err(Error::NotDivisible {
                height,
                width,
                patch,
                rem_h,
                rem_w,
            });
        }
        Self::new(height / patch, width / patch)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coord(&self, index: usize) -> Coord {
        (index / self.cols, index % self.cols)
    }

    pub fn index(&self, (row, col): Coord) -> usize {
        row * self.cols + col
    }

    pub fn coords(&self) -> impl Iterator<Item = Coord> + '_ {
        (0..self.len()).map(|u| self.coord(u))
    }

    pub fn contains(&self, (row, col): Coord) -> bool {
        row < self.rows && col < self.cols
    }

    /// Euclidean length of the grid diagonal, in patch units.
    pub fn diameter(&self) -> f64 {
        let (r, c) = ((self.rows - 1) as f64, (self.cols - 1) as f64);
        (r * r + c * c).sqrt()
    }
}

fn scale_axis(p: usize, src: usize, dst: usize) -> usize {
    if src == dst {
        return p;
    }
    let x = (p as f64 + 0.5) * dst as f64 / src as f64 - 0.5;
    (x.round().max(0.0) as usize).min(dst - 1)
}

/// Maps a coordinate on `src` to the nearest patch center on `dst`.
///
/// Patch centers are matched in normalized image space and rounded half away
/// from zero, then clamped to the destination grid. Equal grids map every
/// coordinate to itself.
pub fn map_coords(p: Coord, src: &PatchGrid, dst: &PatchGrid) -> Result<Coord> {
    if !src.contains(p) {
        return Err(Error::OffGrid {
            row: p.0,
            col: p.1,
            rows: src.rows,
            cols: src.cols,
        });
    }
    Ok((scale_axis(p.0, src.rows, dst.rows), scale_axis(p.1, src.cols, dst.cols)))
}

/// Per-query sorted key index lists for a fixed radius.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodTable {
    radius: f64,
    query: PatchGrid,
    key: PatchGrid,
    neighbors: Vec<Vec<usize>>,
}

impl NeighborhoodTable {
    pub fn build(query: PatchGrid, key: PatchGrid, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "radius must be a nonnegative number, got {radius}"
            )));
        }
        // Largest integer offset that can satisfy the predicate on this grid.
        let reach = radius.floor().min(key.rows.max(key.cols) as f64) as i64;
        let mut neighbors = Vec::with_capacity(query.len());
        for u in 0..query.len() {
            let (cr, cc) = map_coords(query.coord(u), &query, &key)?;
            let (cr, cc) = (cr as i64, cc as i64);
            let mut list = Vec::new();
            let r_lo = (cr - reach).max(0);
            let r_hi = (cr + reach).min(key.rows as i64 - 1);
            let c_lo = (cc - reach).max(0);
            let c_hi = (cc + reach).min(key.cols as i64 - 1);
            for kr in r_lo..=r_hi {
                for kc in c_lo..=c_hi {
                    let (dr, dc) = (kr - cr, kc - cc);
                    if ((dr * dr + dc * dc) as f64).sqrt() <= radius {
                        list.push(key.index((kr as usize, kc as usize)));
                    }
                }
            }
            neighbors.push(list);
        }
        Ok(Self {
            radius,
            query,
            key,
            neighbors,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn query_grid(&self) -> &PatchGrid {
        &self.query
    }

    pub fn key_grid(&self) -> &PatchGrid {
        &self.key
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[u]
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Total number of (query, key) pairs, i.e. the attention score count.
    pub fn total_pairs(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}
