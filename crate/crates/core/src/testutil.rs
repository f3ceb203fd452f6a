//! Shared helpers for unit tests: closed-form Dirichlet eigenpairs of the
//! five-point stencil and a tiny deterministic RNG so oracles stay
//! independent of the crate's production sampling code.

use crate::grid::{Grid, NodeField, VelocityField};

/// Closed-form eigenvalue of the five-point Dirichlet Laplacian,
/// `lambda_{jk} = (4/h^2) (sin^2(j pi h / 2) + sin^2(k pi h / 2))`,
/// with 1-based mode numbers `j, k`.
pub(crate) fn lambda_mode(grid: Grid, j: usize, k: usize) -> f64 {
    let h = grid.spacing();
    let s = |m: usize| {
        let t = (m as f64 * std::f64::consts::PI * h / 2.0).sin();
        t * t
    };
    4.0 / (h * h) * (s(j) + s(k))
}

/// Closed-form `h^2`-normalized eigenvector `2 sin(j pi x) sin(k pi y)`.
pub(crate) fn sine_mode(grid: Grid, j: usize, k: usize) -> NodeField {
    let n = grid.n();
    let mut vals = vec![0.0; grid.node_count()];
    for iy in 0..n {
        for ix in 0..n {
            let (x, y) = grid.node_coord(ix, iy);
            vals[grid.node_index(ix, iy)] = 2.0
                * (j as f64 * std::f64::consts::PI * x).sin()
                * (k as f64 * std::f64::consts::PI * y).sin();
        }
    }
    NodeField::from_values(grid, vals).expect("sine mode is finite")
}

/// SplitMix64; deterministic and independent of the production RNG.
pub(crate) struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> TestRng {
        TestRng(seed.wrapping_add(0x9e3779b97f4a7c15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in (-1, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }
}

pub(crate) fn rand_node_field(grid: Grid, rng: &mut TestRng) -> NodeField {
    let vals = (0..grid.node_count()).map(|_| rng.unit()).collect();
    NodeField::from_values(grid, vals).expect("finite")
}

pub(crate) fn rand_velocity_field(grid: Grid, rng: &mut TestRng) -> VelocityField {
    let c1 = (0..grid.edge_count()).map(|_| rng.unit()).collect();
    let c2 = (0..grid.edge_count()).map(|_| rng.unit()).collect();
    VelocityField::from_components(grid, c1, c2).expect("finite")
}
