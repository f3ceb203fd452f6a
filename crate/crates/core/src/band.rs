//! Banded Cholesky factorization for the five-point Laplacian.
//!
//! The interior-node Laplacian in lexicographic order is SPD with bandwidth
//! `n`, so a dense-band factor (dim x (bw+1) storage) is exact and cheap at
//! the grid sizes this crate targets.

use crate::error::{Error, Result};

pub(crate) struct BandCholesky {
    dim: usize,
    bw: usize,
    /// Lower factor, column-major: column `j` holds rows `j..=j+bw`.
    data: Vec<f64>,
}

impl BandCholesky {
    /// Factors the SPD band matrix whose entries are produced by `entry(i, j)`
    /// for `|i - j| <= bw` (only `i >= j` is queried).
    pub fn factor(dim: usize, bw: usize, entry: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let stride = bw + 1;
        let mut data = vec![0.0; dim * stride];
        for j in 0..dim {
            let i_max = (j + bw).min(dim - 1);
            for i in j..=i_max {
                let mut s = entry(i, j);
                let k0 = i.saturating_sub(bw);
                for k in k0..j {
                    s -= data[k * stride + (i - k)] * data[k * stride + (j - k)];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::Internal(format!(
                            "band Cholesky pivot {s:.3e} at column {j}; matrix not SPD"
                        )));
                    }
                    data[j * stride] = s.sqrt();
                } else {
                    data[j * stride + (i - j)] = s / data[j * stride];
                }
            }
        }
        Ok(BandCholesky { dim, bw, data })
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        let stride = self.bw + 1;
        // Forward: L y = b.
        for i in 0..self.dim {
            let j0 = i.saturating_sub(self.bw);
            let mut s = x[i];
            for j in j0..i {
                s -= self.data[j * stride + (i - j)] * x[j];
            }
            x[i] = s / self.data[i * stride];
        }
        // Backward: L^T x = y.
        for i in (0..self.dim).rev() {
            let i_max = (i + self.bw).min(self.dim - 1);
            let mut s = x[i];
            for j in i + 1..=i_max {
                s -= self.data[i * stride + (j - i)] * x[j];
            }
            x[i] = s / self.data[i * stride];
        }
    }
}
