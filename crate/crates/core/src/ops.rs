//! Discrete curl / rot calculus and the Poisson solver.
//!
//! `curl` maps node scalars to staggered edge velocities by forward
//! differences of the zero-extended stream function; `rot` is its exact
//! adjoint under the uniform `h^2` inner products (a plain transpose). Their
//! composition `rot . curl` is the five-point Dirichlet Laplacian, and the
//! corner-grid divergence annihilates the curl range identically by
//! commutation of the two one-dimensional difference factors. These exact
//! algebraic identities - not tolerances - are what the downstream energy and
//! observability measurements rely on.

use crate::band::BandCholesky;
use crate::error::{Error, Result};
use crate::grid::{check_same_grid, Grid, NodeField, VelocityField};
use crate::numeric::guarded_div;

/// Residual tolerance of `stream_from_velocity` in strict mode.
pub const STREAM_STRICT_TOL: f64 = 1e-8;

/// Relative residual above which a Poisson solve gets one round of
/// iterative refinement.
pub const POISSON_REFINE_TOL: f64 = 1e-12;

/// Strictness of the curl-range check in [`OperatorSet::stream_from_velocity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    /// Error out if the input is not in the discrete curl range.
    Strict,
    /// Return the curl-range projection together with its residual.
    Lax,
}

/// Stream function recovered from a velocity, with the relative residual
/// `|curl(psi) - u| / |u|` of the reconstruction.
#[derive(Debug, Clone)]
pub struct StreamRecovery {
    pub stream: NodeField,
    pub residual: f64,
}

/// Curl, rot, Laplacian and a cached factorization for Poisson solves.
pub struct OperatorSet {
    grid: Grid,
    chol: BandCholesky,
}

impl OperatorSet {
    /// Builds the operators and factors the (SPD) Laplacian.
    pub fn new(grid: Grid) -> Result<OperatorSet> {
        let n = grid.n();
        let h = grid.spacing();
        let diag = 4.0 / (h * h);
        let off = -1.0 / (h * h);
        let chol = BandCholesky::factor(grid.node_count(), n, |i, j| {
            if i == j {
                diag
            } else if i == j + n || (i == j + 1 && i % n != 0) {
                off
            } else {
                0.0
            }
        })?;
        Ok(OperatorSet { grid, chol })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// `u = curl psi = (d_y psi, -d_x psi)` by forward differences of the
    /// zero-extended stream function. The result is discretely
    /// divergence-free and tangential at the boundary by construction.
    pub fn curl(&self, stream: &NodeField) -> Result<VelocityField> {
        check_same_grid(self.grid, stream.grid())?;
        let n = self.grid.n();
        let h = self.grid.spacing();
        let psi = stream.values();
        let mut u = VelocityField::zeros(self.grid);
        {
            let (c1, c2) = u.comps_mut();
            for ix in 0..n {
                for ey in 0..n + 1 {
                    let above = if ey < n { psi[ix + n * ey] } else { 0.0 };
                    let below = if ey > 0 { psi[ix + n * (ey - 1)] } else { 0.0 };
                    c1[ix * (n + 1) + ey] = (above - below) / h;
                }
            }
            for ex in 0..n + 1 {
                for iy in 0..n {
                    let right = if ex < n { psi[ex + n * iy] } else { 0.0 };
                    let left = if ex > 0 { psi[(ex - 1) + n * iy] } else { 0.0 };
                    c2[ex * n + iy] = -(right - left) / h;
                }
            }
        }
        Ok(u)
    }

    /// `w = rot u = d_x u2 - d_y u1`, the exact transpose of [`Self::curl`].
    pub fn rot(&self, u: &VelocityField) -> Result<NodeField> {
        check_same_grid(self.grid, u.grid())?;
        let n = self.grid.n();
        let h = self.grid.spacing();
        let c1 = u.comp1();
        let c2 = u.comp2();
        let mut w = NodeField::zeros(self.grid);
        let vals = w.values_mut();
        for iy in 0..n {
            for ix in 0..n {
                let dxu2 = (c2[(ix + 1) * n + iy] - c2[ix * n + iy]) / h;
                let dyu1 = (c1[ix * (n + 1) + (iy + 1)] - c1[ix * (n + 1) + iy]) / h;
                vals[ix + n * iy] = dxu2 - dyu1;
            }
        }
        Ok(w)
    }

    /// Five-point negative Laplacian with zero Dirichlet data, applied as a
    /// stencil. Tests verify entrywise that `rot . curl` reproduces it.
    pub fn laplacian(&self, stream: &NodeField) -> Result<NodeField> {
        check_same_grid(self.grid, stream.grid())?;
        let n = self.grid.n();
        let h2 = self.grid.spacing() * self.grid.spacing();
        let psi = stream.values();
        let mut out = NodeField::zeros(self.grid);
        let vals = out.values_mut();
        for iy in 0..n {
            for ix in 0..n {
                let c = psi[ix + n * iy];
                let l = if ix > 0 { psi[ix - 1 + n * iy] } else { 0.0 };
                let r = if ix + 1 < n {
                    psi[ix + 1 + n * iy]
                } else {
                    0.0
                };
                let b = if iy > 0 { psi[ix + n * (iy - 1)] } else { 0.0 };
                let t = if iy + 1 < n {
                    psi[ix + n * (iy + 1)]
                } else {
                    0.0
                };
                vals[ix + n * iy] = (4.0 * c - l - r - b - t) / h2;
            }
        }
        Ok(out)
    }

    /// Corner-grid divergence of an edge velocity (zero extension outside the
    /// component's own dof range). Identically zero on the curl range.
    pub fn divergence(&self, u: &VelocityField) -> Result<Vec<f64>> {
        check_same_grid(self.grid, u.grid())?;
        let n = self.grid.n();
        let h = self.grid.spacing();
        let c1 = u.comp1();
        let c2 = u.comp2();
        let mut div = vec![0.0; (n + 1) * (n + 1)];
        for ey in 0..n + 1 {
            for ex in 0..n + 1 {
                let right = if ex < n { c1[ex * (n + 1) + ey] } else { 0.0 };
                let left = if ex > 0 {
                    c1[(ex - 1) * (n + 1) + ey]
                } else {
                    0.0
                };
                let top = if ey < n { c2[ex * n + ey] } else { 0.0 };
                let bottom = if ey > 0 { c2[ex * n + (ey - 1)] } else { 0.0 };
                div[ex + (n + 1) * ey] = (right - left) / h + (top - bottom) / h;
            }
        }
        Ok(div)
    }

    /// Dimensionless divergence residual: `h * |div u| / |u|` in the
    /// `h^2`-weighted norms. Zero (to roundoff) for curl-range inputs.
    pub fn div_residual(&self, u: &VelocityField) -> Result<f64> {
        let div = self.divergence(u)?;
        let h = self.grid.spacing();
        let div_norm = (h * h * crate::numeric::csum(div.iter().map(|v| v * v))).sqrt();
        let u_norm = u.norm_l2(None)?;
        Ok(guarded_div(h * div_norm, u_norm))
    }

    /// Solves `L psi = rhs` against the cached factorization, with one round
    /// of iterative refinement if the relative residual exceeds
    /// [`POISSON_REFINE_TOL`].
    pub fn poisson_solve(&self, rhs: &NodeField) -> Result<NodeField> {
        check_same_grid(self.grid, rhs.grid())?;
        let mut x = rhs.values().to_vec();
        self.chol.solve_in_place(&mut x);
        let mut sol = NodeField::from_values(self.grid, x)?;
        let rhs_norm = rhs.norm_l2(None)?;
        if rhs_norm > 0.0 {
            let residual = self.poisson_residual(&sol, rhs)?;
            if residual > POISSON_REFINE_TOL {
                let mut r = rhs.clone();
                r.axpy(-1.0, &self.laplacian(&sol)?)?;
                let mut d = r.values().to_vec();
                self.chol.solve_in_place(&mut d);
                let delta = NodeField::from_values(self.grid, d)?;
                sol.axpy(1.0, &delta)?;
            }
        }
        Ok(sol)
    }

    fn poisson_residual(&self, sol: &NodeField, rhs: &NodeField) -> Result<f64> {
        let mut r = rhs.clone();
        r.axpy(-1.0, &self.laplacian(sol)?)?;
        Ok(guarded_div(r.norm_l2(None)?, rhs.norm_l2(None)?))
    }

    /// Recovers the unique stream function with `curl psi = u` by solving
    /// `L psi = rot u` (the normal equations of the curl-fit, so in lax mode
    /// the result is the curl-range projection of `u`).
    pub fn stream_from_velocity(
        &self,
        u: &VelocityField,
        mode: StreamMode,
    ) -> Result<StreamRecovery> {
        let w = self.rot(u)?;
        let stream = self.poisson_solve(&w)?;
        let mut diff = self.curl(&stream)?;
        diff.axpy(-1.0, u)?;
        let residual = guarded_div(diff.norm_l2(None)?, u.norm_l2(None)?);
        if mode == StreamMode::Strict && residual > STREAM_STRICT_TOL {
            return Err(Error::NotDivergenceFree {
                residual,
                tol: STREAM_STRICT_TOL,
            });
        }
        Ok(StreamRecovery { stream, residual })
    }
}

/// Residual of the rot/curl Green formula `<curl rot u, v> = <rot u, rot v>`
/// for curl-range `u` (the boundary term vanishes discretely).
pub fn green_formula_residual(
    ops: &OperatorSet,
    u: &VelocityField,
    v: &VelocityField,
) -> Result<f64> {
    let w = ops.rot(u)?;
    let lhs = ops.curl(&w)?.dot(v)?;
    let rhs = w.dot(&ops.rot(v)?)?;
    Ok(lhs - rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{lambda_mode, rand_node_field, rand_velocity_field, sine_mode, TestRng};

    fn ops(n: usize) -> OperatorSet {
        OperatorSet::new(Grid::new(n).unwrap()).unwrap()
    }

    /// Dense matrix of the Laplacian reconstructed through rot . curl.
    fn dense_rot_curl(ops: &OperatorSet) -> Vec<Vec<f64>> {
        let g = ops.grid();
        let dim = g.node_count();
        let mut cols = Vec::with_capacity(dim);
        for j in 0..dim {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            let psi = NodeField::from_values(g, e).unwrap();
            let col = ops.rot(&ops.curl(&psi).unwrap()).unwrap();
            cols.push(col.values().to_vec());
        }
        // cols[j][i] = A[i][j]; return row-major.
        (0..dim)
            .map(|i| (0..dim).map(|j| cols[j][i]).collect())
            .collect()
    }

    #[test]
    fn rot_curl_is_the_five_point_stencil_n3() {
        // Hand-assembled 9x9 five-point matrix, diagonal 4/h^2 = 64.
        let ops = ops(3);
        let a = dense_rot_curl(&ops);
        let n = 3usize;
        for iy in 0..n {
            for ix in 0..n {
                let i = ix + n * iy;
                for jy in 0..n {
                    for jx in 0..n {
                        let j = jx + n * jy;
                        let expected = if i == j {
                            64.0
                        } else if (ix == jx && iy.abs_diff(jy) == 1)
                            || (iy == jy && ix.abs_diff(jx) == 1)
                        {
                            -16.0
                        } else {
                            0.0
                        };
                        assert!(
                            (a[i][j] - expected).abs() < 1e-12,
                            "entry ({i},{j}): got {} want {expected}",
                            a[i][j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn rot_is_the_adjoint_of_curl() {
        let ops = ops(3);
        let mut rng = TestRng::new(7);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let psi = rand_node_field(ops.grid(), &mut rng);
            let v = rand_velocity_field(ops.grid(), &mut rng);
            let lhs = ops.curl(&psi).unwrap().dot(&v).unwrap();
            let rhs = psi.dot(&ops.rot(&v).unwrap()).unwrap();
            let scale = lhs.abs().max(rhs.abs()).max(1e-30);
            worst = worst.max((lhs - rhs).abs() / scale);
        }
        assert!(worst <= 1e-13, "adjointness residual {worst:.3e}");
    }

    #[test]
    fn divergence_annihilates_the_curl_range() {
        for n in [3, 8, 16] {
            let ops = ops(n);
            let mut rng = TestRng::new(n as u64);
            for _ in 0..10 {
                let psi = rand_node_field(ops.grid(), &mut rng);
                let u = ops.curl(&psi).unwrap();
                let h = ops.grid().spacing();
                let div = ops.divergence(&u).unwrap();
                let max_abs = div.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                // Pointwise cancellation of the mixed differences; scale by
                // the stencil magnitude |psi|/h^2 to keep an absolute check.
                let psi_max = psi.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(max_abs * h * h <= 1e-14 * psi_max.max(1.0));
                assert!(ops.div_residual(&u).unwrap() <= 1e-13);
            }
        }
    }

    #[test]
    fn poisson_zero_rhs() {
        let ops = ops(8);
        let sol = ops.poisson_solve(&NodeField::zeros(ops.grid())).unwrap();
        assert_eq!(sol.norm_l2(None).unwrap(), 0.0);
    }

    #[test]
    fn poisson_eigenpair_oracle() {
        // rhs = lambda_1 e_1  =>  psi = e_1 (closed-form sine mode).
        let ops = ops(8);
        let e1 = sine_mode(ops.grid(), 1, 1);
        let lam = lambda_mode(ops.grid(), 1, 1);
        let sol = ops.poisson_solve(&e1.scaled(lam)).unwrap();
        let mut diff = sol.clone();
        diff.axpy(-1.0, &e1).unwrap();
        let rel = diff.norm_l2(None).unwrap() / e1.norm_l2(None).unwrap();
        assert!(rel <= 1e-11, "eigenpair solve residual {rel:.3e}");
    }

    #[test]
    fn poisson_random_rhs_residual() {
        let ops = ops(16);
        let mut rng = TestRng::new(3);
        for _ in 0..10 {
            let rhs = rand_node_field(ops.grid(), &mut rng);
            let sol = ops.poisson_solve(&rhs).unwrap();
            let mut r = rhs.clone();
            r.axpy(-1.0, &ops.laplacian(&sol).unwrap()).unwrap();
            let rel = r.norm_l2(None).unwrap() / rhs.norm_l2(None).unwrap();
            assert!(rel <= 1e-12, "poisson residual {rel:.3e}");
        }
    }

    #[test]
    fn curl_of_eigenmode_has_quadratic_form_norm() {
        // |curl e_1|^2 = <e_1, L e_1> = lambda_1.
        let ops = ops(8);
        let e1 = sine_mode(ops.grid(), 1, 1);
        let lam = lambda_mode(ops.grid(), 1, 1);
        let u = ops.curl(&e1).unwrap();
        let got = u.norm_l2(None).unwrap().powi(2);
        assert!((got - lam).abs() <= 1e-12 * lam);
    }

    #[test]
    fn rot_curl_matches_laplacian_on_random_input() {
        let ops = ops(8);
        let mut rng = TestRng::new(11);
        let psi = rand_node_field(ops.grid(), &mut rng);
        let a = ops.rot(&ops.curl(&psi).unwrap()).unwrap();
        let b = ops.laplacian(&psi).unwrap();
        let scale = b.norm_l2(None).unwrap();
        let mut diff = a;
        diff.axpy(-1.0, &b).unwrap();
        assert!(diff.norm_l2(None).unwrap() <= 1e-13 * scale);
    }

    #[test]
    fn rot_of_curled_eigenmode_is_eigenvalue_times_mode() {
        let ops = ops(8);
        let e1 = sine_mode(ops.grid(), 1, 1);
        let lam = lambda_mode(ops.grid(), 1, 1);
        let w = ops.rot(&ops.curl(&e1).unwrap()).unwrap();
        let mut diff = w;
        diff.axpy(-lam, &e1).unwrap();
        assert!(diff.norm_l2(None).unwrap() <= 1e-12 * lam);
    }

    #[test]
    fn stream_round_trip_recovers_the_stream() {
        let ops = ops(16);
        let mut rng = TestRng::new(5);
        let psi0 = rand_node_field(ops.grid(), &mut rng);
        let u = ops.curl(&psi0).unwrap();
        let rec = ops.stream_from_velocity(&u, StreamMode::Strict).unwrap();
        let mut diff = rec.stream.clone();
        diff.axpy(-1.0, &psi0).unwrap();
        let rel = diff.norm_l2(None).unwrap() / psi0.norm_l2(None).unwrap();
        assert!(rel <= 1e-10, "stream recovery error {rel:.3e}");
        assert!(rec.residual <= 1e-10);
    }

    #[test]
    fn zero_velocity_gives_zero_stream() {
        let ops = ops(8);
        let rec = ops
            .stream_from_velocity(&VelocityField::zeros(ops.grid()), StreamMode::Strict)
            .unwrap();
        assert_eq!(rec.stream.norm_l2(None).unwrap(), 0.0);
        assert_eq!(rec.residual, 0.0);
    }

    #[test]
    fn non_curl_data_errors_in_strict_mode_projects_in_lax() {
        let ops = ops(8);
        let mut rng = TestRng::new(9);
        let u = rand_velocity_field(ops.grid(), &mut rng);
        match ops.stream_from_velocity(&u, StreamMode::Strict) {
            Err(Error::NotDivergenceFree { residual, .. }) => assert!(residual > STREAM_STRICT_TOL),
            other => panic!("expected NotDivergenceFree, got {other:?}"),
        }
        let rec = ops.stream_from_velocity(&u, StreamMode::Lax).unwrap();
        assert!(rec.residual > 0.0 && rec.residual < 1.0 + 1e-9);
        // Normal-equations oracle: the defect u - curl(psi) is rot-free,
        // i.e. orthogonal to the curl range.
        let mut defect = u.clone();
        defect.axpy(-1.0, &ops.curl(&rec.stream).unwrap()).unwrap();
        let w = ops.rot(&defect).unwrap();
        let scale = ops.rot(&u).unwrap().norm_l2(None).unwrap();
        assert!(w.norm_l2(None).unwrap() <= 1e-10 * scale);
    }

    #[test]
    fn green_formula_on_eigenmode() {
        let ops = ops(8);
        let e1 = sine_mode(ops.grid(), 1, 1);
        let lam = lambda_mode(ops.grid(), 1, 1);
        let u = ops.curl(&e1).unwrap();
        let r = green_formula_residual(&ops, &u, &u).unwrap();
        assert!(r.abs() <= 1e-12 * lam * lam);
    }

    #[test]
    fn green_formula_zero_input() {
        let ops = ops(8);
        let z = VelocityField::zeros(ops.grid());
        assert_eq!(green_formula_residual(&ops, &z, &z).unwrap(), 0.0);
    }

    #[test]
    fn green_formula_random_curl_pairs() {
        let ops = ops(8);
        let mut rng = TestRng::new(13);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let u = ops.curl(&rand_node_field(ops.grid(), &mut rng)).unwrap();
            let v = ops.curl(&rand_node_field(ops.grid(), &mut rng)).unwrap();
            let r = green_formula_residual(&ops, &u, &v).unwrap();
            let scale = ops.rot(&u).unwrap().norm_l2(None).unwrap()
                * ops.rot(&v).unwrap().norm_l2(None).unwrap();
            worst = worst.max(r.abs() / scale.max(1e-30));
        }
        assert!(worst <= 1e-12, "green residual {worst:.3e}");
    }

    #[test]
    fn poincare_with_the_smallest_eigenvalue() {
        let ops = ops(8);
        let lam1 = lambda_mode(ops.grid(), 1, 1);
        let mut rng = TestRng::new(17);
        for _ in 0..20 {
            let psi = rand_node_field(ops.grid(), &mut rng);
            let quad = psi.dot(&ops.laplacian(&psi).unwrap()).unwrap();
            let nsq = psi.norm_l2(None).unwrap().powi(2);
            assert!(quad >= lam1 * nsq * (1.0 - 1e-12));
        }
    }
}
