//! Observation region (omega) and measurable control window (E).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Spatial shape generating a region mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionShape {
    Rect { x0: f64, x1: f64, y0: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
}

impl RegionShape {
    pub fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> RegionShape {
        RegionShape::Rect { x0, x1, y0, y1 }
    }

    pub fn disk(cx: f64, cy: f64, r: f64) -> RegionShape {
        RegionShape::Disk { cx, cy, r }
    }

    pub fn full_square() -> RegionShape {
        RegionShape::rect(0.0, 1.0, 0.0, 1.0)
    }

    /// Closed-set membership test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            RegionShape::Rect { x0, x1, y0, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            RegionShape::Disk { cx, cy, r } => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r,
        }
    }
}

/// Node and edge masks realizing an observation region on a grid.
///
/// A dof belongs to the mask iff its node coordinate / edge midpoint lies in
/// the generating shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    grid: Grid,
    nodes: Vec<bool>,
    edges1: Vec<bool>,
    edges2: Vec<bool>,
    shape: Option<RegionShape>,
}

impl RegionMask {
    pub fn build(grid: Grid, shape: RegionShape) -> Result<RegionMask> {
        let n = grid.n();
        let mut nodes = vec![false; grid.node_count()];
        for iy in 0..n {
            for ix in 0..n {
                let (x, y) = grid.node_coord(ix, iy);
                nodes[grid.node_index(ix, iy)] = shape.contains(x, y);
            }
        }
        let mut edges1 = vec![false; grid.edge_count()];
        for ix in 0..n {
            for ey in 0..n + 1 {
                let (x, y) = grid.comp1_midpoint(ix, ey);
                edges1[grid.comp1_index(ix, ey)] = shape.contains(x, y);
            }
        }
        let mut edges2 = vec![false; grid.edge_count()];
        for ex in 0..n + 1 {
            for iy in 0..n {
                let (x, y) = grid.comp2_midpoint(ex, iy);
                edges2[grid.comp2_index(ex, iy)] = shape.contains(x, y);
            }
        }
        let mask = RegionMask {
            grid,
            nodes,
            edges1,
            edges2,
            shape: Some(shape),
        };
        if mask.node_count() == 0 || mask.edge_count() == 0 {
            return Err(Error::DegenerateRegion(format!(
                "{shape:?} contains no grid dofs at n={n}"
            )));
        }
        Ok(mask)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn nodes(&self) -> &[bool] {
        &self.nodes
    }

    pub fn edges1(&self) -> &[bool] {
        &self.edges1
    }

    pub fn edges2(&self) -> &[bool] {
        &self.edges2
    }

    pub fn shape(&self) -> Option<RegionShape> {
        self.shape
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().filter(|b| **b).count()
    }

    pub fn edge_count(&self) -> usize {
        self.edges1
            .iter()
            .chain(&self.edges2)
            .filter(|b| **b)
            .count()
    }

    /// Set complement; useful for partition-of-norm checks. Carries no shape.
    pub fn complement(&self) -> RegionMask {
        RegionMask {
            grid: self.grid,
            nodes: self.nodes.iter().map(|b| !b).collect(),
            edges1: self.edges1.iter().map(|b| !b).collect(),
            edges2: self.edges2.iter().map(|b| !b).collect(),
            shape: None,
        }
    }

    /// True if every dof of `self` is also in `other`.
    pub fn subset_of(&self, other: &RegionMask) -> bool {
        self.grid == other.grid
            && self.nodes.iter().zip(&other.nodes).all(|(a, b)| !a || *b)
            && self.edges1.iter().zip(&other.edges1).all(|(a, b)| !a || *b)
            && self.edges2.iter().zip(&other.edges2).all(|(a, b)| !a || *b)
    }
}

/// Finite union of disjoint closed intervals inside `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSet {
    intervals: Vec<(f64, f64)>,
    horizon: f64,
}

impl TimeSet {
    /// Merges and sorts the input pairs. Overlap is merged, not an error;
    /// zero total measure is.
    pub fn build(pairs: &[(f64, f64)], horizon: f64) -> Result<TimeSet> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidInput(format!(
                "horizon T={horizon} must be positive"
            )));
        }
        let mut sorted: Vec<(f64, f64)> = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            if !(a.is_finite() && b.is_finite()) {
                return Err(Error::NonFinite("time set"));
            }
            if a > b {
                return Err(Error::InvalidInput(format!(
                    "interval [{a}, {b}] has a > b"
                )));
            }
            if a < 0.0 || b > horizon {
                return Err(Error::IntervalOutOfRange(a, b, horizon));
            }
            if a < b {
                sorted.push((a, b));
            }
        }
        sorted.sort_by(|p, q| p.partial_cmp(q).expect("finite"));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
        for (a, b) in sorted {
            match merged.last_mut() {
                Some((_, prev_b)) if a <= *prev_b => *prev_b = prev_b.max(b),
                _ => merged.push((a, b)),
            }
        }
        if merged.is_empty() {
            return Err(Error::DegenerateTimeSet);
        }
        Ok(TimeSet {
            intervals: merged,
            horizon,
        })
    }

    /// The full window `(0, T)`.
    pub fn full(horizon: f64) -> Result<TimeSet> {
        TimeSet::build(&[(0.0, horizon)], horizon)
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn measure(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    pub fn contains(&self, t: f64) -> bool {
        self.intervals.iter().any(|&(a, b)| t >= a && t <= b)
    }
}
