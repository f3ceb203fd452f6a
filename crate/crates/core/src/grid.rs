//! Discrete domain and field containers.
//!
//! The domain is the open unit square discretized by a uniform tensor grid
//! with `n` interior nodes per axis and spacing `h = 1/(n+1)`. Scalars
//! (stream function, vorticity) live on interior nodes with implicit zero
//! boundary values. Velocities carry two staggered edge components so that
//! the discrete curl has an exactly divergence-free range:
//!
//! * component 1 (`u1 ~ d_y psi`) on y-staggered edges, `n x (n+1)` values,
//!   midpoint `((ix+1)h, (ey+1/2)h)`;
//! * component 2 (`u2 ~ -d_x psi`) on x-staggered edges, `(n+1) x n` values,
//!   midpoint `((ex+1/2)h, (iy+1)h)`.
//!
//! Every inner product in the crate is the uniformly `h^2`-weighted one, for
//! node and edge dofs alike, so adjointness identities hold exactly.

use crate::error::{Error, Result};
use crate::numeric::{cdot, csum};
use crate::region::RegionMask;

pub const MIN_GRID_N: usize = 2;
pub const MAX_GRID_N: usize = 256;

/// Uniform tensor grid on the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    n: usize,
}

impl Grid {
    /// Builds a grid with `n` interior nodes per axis, spacing `1/(n+1)`.
    pub fn new(n: usize) -> Result<Grid> {
        if !(MIN_GRID_N..=MAX_GRID_N).contains(&n) {
            return Err(Error::GridSize(n));
        }
        Ok(Grid { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.n as f64 + 1.0)
    }

    pub fn node_count(&self) -> usize {
        self.n * self.n
    }

    /// Dof count of each staggered velocity component.
    pub fn edge_count(&self) -> usize {
        self.n * (self.n + 1)
    }

    pub fn node_index(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.n && iy < self.n);
        ix + self.n * iy
    }

    /// Interior node coordinate; computed as `(i+1)/(n+1)` so that the
    /// boundary lands on 0 and 1 exactly.
    pub fn node_coord(&self, ix: usize, iy: usize) -> (f64, f64) {
        let d = self.n as f64 + 1.0;
        ((ix as f64 + 1.0) / d, (iy as f64 + 1.0) / d)
    }

    pub fn comp1_index(&self, ix: usize, ey: usize) -> usize {
        debug_assert!(ix < self.n && ey < self.n + 1);
        ix * (self.n + 1) + ey
    }

    pub fn comp1_midpoint(&self, ix: usize, ey: usize) -> (f64, f64) {
        let d = self.n as f64 + 1.0;
        ((ix as f64 + 1.0) / d, (ey as f64 + 0.5) / d)
    }

    pub fn comp2_index(&self, ex: usize, iy: usize) -> usize {
        debug_assert!(ex < self.n + 1 && iy < self.n);
        ex * self.n + iy
    }

    pub fn comp2_midpoint(&self, ex: usize, iy: usize) -> (f64, f64) {
        let d = self.n as f64 + 1.0;
        ((ex as f64 + 0.5) / d, (iy as f64 + 1.0) / d)
    }
}

/// Scalar field on interior nodes; boundary values are implicitly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeField {
    grid: Grid,
    values: Vec<f64>,
}

impl NodeField {
    pub fn zeros(grid: Grid) -> NodeField {
        NodeField {
            grid,
            values: vec![0.0; grid.node_count()],
        }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<NodeField> {
        if values.len() != grid.node_count() {
            return Err(Error::ShapeMismatch {
                expected: grid.node_count(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("node field"));
        }
        Ok(NodeField { grid, values })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[self.grid.node_index(ix, iy)]
    }

    /// `h^2`-weighted inner product.
    pub fn dot(&self, other: &NodeField) -> Result<f64> {
        check_same_grid(self.grid, other.grid)?;
        let h = self.grid.spacing();
        Ok(h * h * cdot(&self.values, &other.values))
    }

    /// `h^2`-weighted L2 norm, optionally restricted to a node mask.
    pub fn norm_l2(&self, mask: Option<&RegionMask>) -> Result<f64> {
        let h = self.grid.spacing();
        let sq = match mask {
            None => csum(self.values.iter().map(|v| v * v)),
            Some(m) => {
                check_same_grid(self.grid, m.grid())?;
                csum(
                    self.values
                        .iter()
                        .zip(m.nodes())
                        .filter_map(|(v, keep)| keep.then(|| v * v)),
                )
            }
        };
        Ok((h * h * sq).sqrt())
    }

    pub fn scaled(&self, factor: f64) -> NodeField {
        NodeField {
            grid: self.grid,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &NodeField) -> Result<()> {
        check_same_grid(self.grid, other.grid)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }
}

/// Velocity field as two staggered edge components.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    grid: Grid,
    comp1: Vec<f64>,
    comp2: Vec<f64>,
}

impl VelocityField {
    pub fn zeros(grid: Grid) -> VelocityField {
        let e = grid.edge_count();
        VelocityField {
            grid,
            comp1: vec![0.0; e],
            comp2: vec![0.0; e],
        }
    }

    pub fn from_components(grid: Grid, comp1: Vec<f64>, comp2: Vec<f64>) -> Result<VelocityField> {
        let e = grid.edge_count();
        if comp1.len() != e || comp2.len() != e {
            return Err(Error::ShapeMismatch {
                expected: e,
                got: comp1.len().max(comp2.len()),
            });
        }
        if comp1.iter().chain(&comp2).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("velocity field"));
        }
        Ok(VelocityField { grid, comp1, comp2 })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn comp1(&self) -> &[f64] {
        &self.comp1
    }

    pub fn comp2(&self) -> &[f64] {
        &self.comp2
    }

    pub(crate) fn comps_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.comp1, &mut self.comp2)
    }

    /// `h^2`-weighted inner product over both components.
    pub fn dot(&self, other: &VelocityField) -> Result<f64> {
        check_same_grid(self.grid, other.grid)?;
        let h = self.grid.spacing();
        Ok(h * h * (cdot(&self.comp1, &other.comp1) + cdot(&self.comp2, &other.comp2)))
    }

    /// `h^2`-weighted L2 norm over both components, optionally masked.
    pub fn norm_l2(&self, mask: Option<&RegionMask>) -> Result<f64> {
        let h = self.grid.spacing();
        let sq = match mask {
            None => csum(self.comp1.iter().map(|v| v * v)) + csum(self.comp2.iter().map(|v| v * v)),
            Some(m) => {
                check_same_grid(self.grid, m.grid())?;
                csum(
                    self.comp1
                        .iter()
                        .zip(m.edges1())
                        .filter_map(|(v, keep)| keep.then(|| v * v)),
                ) + csum(
                    self.comp2
                        .iter()
                        .zip(m.edges2())
                        .filter_map(|(v, keep)| keep.then(|| v * v)),
                )
            }
        };
        Ok((h * h * sq).sqrt())
    }

    /// Zeroes every dof outside the mask.
    pub fn restricted_to(&self, mask: &RegionMask) -> Result<VelocityField> {
        check_same_grid(self.grid, mask.grid())?;
        let comp1 = self
            .comp1
            .iter()
            .zip(mask.edges1())
            .map(|(v, keep)| if *keep { *v } else { 0.0 })
            .collect();
        let comp2 = self
            .comp2
            .iter()
            .zip(mask.edges2())
            .map(|(v, keep)| if *keep { *v } else { 0.0 })
            .collect();
        Ok(VelocityField {
            grid: self.grid,
            comp1,
            comp2,
        })
    }

    /// Number of nonzero dofs outside the mask (support violations).
    pub fn support_violations(&self, mask: &RegionMask) -> Result<usize> {
        check_same_grid(self.grid, mask.grid())?;
        let c1 = self
            .comp1
            .iter()
            .zip(mask.edges1())
            .filter(|(v, keep)| !**keep && **v != 0.0)
            .count();
        let c2 = self
            .comp2
            .iter()
            .zip(mask.edges2())
            .filter(|(v, keep)| !**keep && **v != 0.0)
            .count();
        Ok(c1 + c2)
    }

    pub fn scaled(&self, factor: f64) -> VelocityField {
        VelocityField {
            grid: self.grid,
            comp1: self.comp1.iter().map(|v| v * factor).collect(),
            comp2: self.comp2.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &VelocityField) -> Result<()> {
        check_same_grid(self.grid, other.grid)?;
        for (a, b) in self.comp1.iter_mut().zip(&other.comp1) {
            *a += alpha * b;
        }
        for (a, b) in self.comp2.iter_mut().zip(&other.comp2) {
            *a += alpha * b;
        }
        Ok(())
    }
}

pub(crate) fn check_same_grid(a: Grid, b: Grid) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(a.n(), b.n()));
    }
    Ok(())
}
