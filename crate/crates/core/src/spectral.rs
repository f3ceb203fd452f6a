//! Eigenbasis of the discrete Dirichlet Laplacian and exact-in-time Stokes
//! evolution.
//!
//! The five-point Laplacian on the tensor grid separates into a Kronecker sum
//! of two one-dimensional Dirichlet matrices, so its full eigendecomposition
//! is assembled from a single dense symmetric `n x n` solve. Vorticity
//! propagates by the exact heat semigroup in that basis; the stream function
//! and velocity follow by modal division and curl. Forced solves evaluate the
//! Duhamel integrals in closed form against piecewise-constant-in-time
//! forcing, so the only time-discretization error in the crate is the
//! piecewise-constant representation of the control itself.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{check_same_grid, Grid, NodeField, VelocityField};
use crate::numeric::{csum, guarded_div, TINY};
use crate::ops::{OperatorSet, StreamMode};
use crate::region::{RegionMask, TimeSet};

/// Largest grid for which the dense eigendecomposition path is allowed.
pub const MAX_EIGEN_N: usize = 64;

/// Uniformly spaced sample times `0 = t_0 < ... < t_{count-1} = t_end`.
pub fn uniform_times(t_end: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2 && t_end > 0.0);
    (0..count)
        .map(|k| t_end * k as f64 / (count - 1) as f64)
        .collect()
}

/// Full eigendecomposition of the discrete Dirichlet Laplacian with
/// `h^2`-orthonormal eigenvectors, sorted by ascending eigenvalue.
pub struct EigenBasis {
    grid: Grid,
    /// 1-D eigenvectors, column-major `v1d[j*n + i]`, h-orthonormal.
    v1d: Vec<f64>,
    /// (lambda, j, k) with 0-based 1-D indices, sorted by (lambda, j, k).
    modes: Vec<(f64, usize, usize)>,
    max_residual: f64,
    method: &'static str,
}

impl EigenBasis {
    /// Eigendecomposes the Laplacian of `ops`. Errors for `n > 64`, where the
    /// Crank-Nicolson stepping path should be used instead.
    pub fn new(ops: &OperatorSet) -> Result<EigenBasis> {
        let grid = ops.grid();
        let n = grid.n();
        if n > MAX_EIGEN_N {
            return Err(Error::EigenSize(n));
        }
        let h = grid.spacing();
        let diag = 2.0 / (h * h);
        let off = -1.0 / (h * h);
        let a = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                diag
            } else if i.abs_diff(j) == 1 {
                off
            } else {
                0.0
            }
        });
        let eig = a.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&p, &q| eig.eigenvalues[p].partial_cmp(&eig.eigenvalues[q]).unwrap());

        let mut mu = Vec::with_capacity(n);
        let mut v1d = vec![0.0; n * n];
        let inv_sqrt_h = 1.0 / h.sqrt();
        for (j, &src) in order.iter().enumerate() {
            mu.push(eig.eigenvalues[src]);
            let col = eig.eigenvectors.column(src);
            // Fix the sign so the first component is positive; for the
            // Dirichlet sine modes it always is.
            let sign = if col[0] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..n {
                v1d[j * n + i] = sign * col[i] * inv_sqrt_h;
            }
        }
        if mu[0] <= 0.0 {
            return Err(Error::Internal(format!(
                "nonpositive smallest eigenvalue {}",
                mu[0]
            )));
        }

        let mut modes: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
        for j in 0..n {
            for k in 0..n {
                modes.push((mu[j] + mu[k], j, k));
            }
        }
        modes.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        let mut basis = EigenBasis {
            grid,
            v1d,
            modes,
            max_residual: 0.0,
            method: "tensor-1d-symmetric-eigen",
        };
        basis.max_residual = basis.validate(ops)?;
        Ok(basis)
    }

    /// Eigen-residual and orthonormality checks; returns the worst relative
    /// eigen residual.
    fn validate(&self, ops: &OperatorSet) -> Result<f64> {
        let n = self.grid.n();
        let h = self.grid.spacing();
        // 1-D Gram must be the identity in the h-weighted inner product.
        let mut gram_residual: f64 = 0.0;
        for j in 0..n {
            for k in j..n {
                let g = h * csum((0..n).map(|i| self.v1d[j * n + i] * self.v1d[k * n + i]));
                let target = if j == k { 1.0 } else { 0.0 };
                gram_residual = gram_residual.max((g - target).abs());
            }
        }
        if gram_residual > 1e-12 {
            return Err(Error::Internal(format!(
                "eigenvector Gram residual {gram_residual:.3e}"
            )));
        }
        let mut worst: f64 = 0.0;
        for idx in 0..self.modes.len() {
            let (lambda, _, _) = self.modes[idx];
            let e = self.eigenvector(idx);
            let mut r = ops.laplacian(&e)?;
            r.axpy(-lambda, &e)?;
            let rel = r.norm_l2(None)? / lambda;
            worst = worst.max(rel);
            if rel > 1e-10 {
                return Err(Error::Internal(format!(
                    "eigen residual {rel:.3e} for mode {idx} (lambda={lambda:.6e})"
                )));
            }
        }
        Ok(worst)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    /// Eigenvalues sorted ascending.
    pub fn eigenvalue(&self, idx: usize) -> f64 {
        self.modes[idx].0
    }

    pub fn eigenvalues(&self) -> impl Iterator<Item = f64> + '_ {
        self.modes.iter().map(|m| m.0)
    }

    pub fn lambda_min(&self) -> f64 {
        self.modes[0].0
    }

    /// 1-based tensor mode numbers (j, k) of the sorted mode `idx`.
    pub fn mode_numbers(&self, idx: usize) -> (usize, usize) {
        let (_, j, k) = self.modes[idx];
        (j + 1, k + 1)
    }

    /// Sorted index of the tensor mode with 1-based numbers (j, k).
    pub fn mode_index(&self, j: usize, k: usize) -> Option<usize> {
        if j == 0 || k == 0 {
            return None;
        }
        self.modes
            .iter()
            .position(|&(_, mj, mk)| mj == j - 1 && mk == k - 1)
    }

    /// Worst relative eigen residual observed at assembly.
    pub fn max_residual(&self) -> f64 {
        self.max_residual
    }

    pub fn method(&self) -> &'static str {
        self.method
    }

    /// The `h^2`-orthonormal eigenvector of sorted mode `idx`.
    pub fn eigenvector(&self, idx: usize) -> NodeField {
        let n = self.grid.n();
        let (_, j, k) = self.modes[idx];
        let mut vals = vec![0.0; n * n];
        for iy in 0..n {
            let vk = self.v1d[k * n + iy];
            for ix in 0..n {
                vals[ix + n * iy] = self.v1d[j * n + ix] * vk;
            }
        }
        NodeField::from_values(self.grid, vals).expect("eigenvector is finite")
    }

    /// Modal coefficients of `field` in sorted-mode order.
    pub fn analyze(&self, field: &NodeField) -> Result<Vec<f64>> {
        check_same_grid(self.grid, field.grid())?;
        let n = self.grid.n();
        let h2 = self.grid.spacing() * self.grid.spacing();
        let vals = field.values();
        // t[j][iy] = sum_ix v_j[ix] psi[ix, iy]
        let mut t = vec![0.0; n * n];
        for j in 0..n {
            for iy in 0..n {
                let mut s = 0.0;
                for ix in 0..n {
                    s += self.v1d[j * n + ix] * vals[ix + n * iy];
                }
                t[j * n + iy] = s;
            }
        }
        let mut coeffs = vec![0.0; n * n];
        for (idx, &(_, j, k)) in self.modes.iter().enumerate() {
            let mut s = 0.0;
            for iy in 0..n {
                s += t[j * n + iy] * self.v1d[k * n + iy];
            }
            coeffs[idx] = h2 * s;
        }
        Ok(coeffs)
    }

    /// Field with the given sorted-mode coefficients; shorter slices leave the
    /// remaining modes at zero.
    pub fn synthesize(&self, coeffs: &[f64]) -> Result<NodeField> {
        if coeffs.len() > self.modes.len() {
            return Err(Error::ShapeMismatch {
                expected: self.modes.len(),
                got: coeffs.len(),
            });
        }
        let n = self.grid.n();
        // Scatter into the (j, k) coefficient matrix.
        let mut a = vec![0.0; n * n];
        for (idx, &c) in coeffs.iter().enumerate() {
            let (_, j, k) = self.modes[idx];
            a[j * n + k] = c;
        }
        // t[j][iy] = sum_k a[j,k] v_k[iy]
        let mut t = vec![0.0; n * n];
        for j in 0..n {
            for iy in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += a[j * n + k] * self.v1d[k * n + iy];
                }
                t[j * n + iy] = s;
            }
        }
        let mut vals = vec![0.0; n * n];
        for iy in 0..n {
            for ix in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    s += self.v1d[j * n + ix] * t[j * n + iy];
                }
                vals[ix + n * iy] = s;
            }
        }
        NodeField::from_values(self.grid, vals)
    }

    /// Exact heat propagation `w(dt) = sum_i e^{-lambda_i dt} <w0, e_i> e_i`.
    pub fn heat_propagate(&self, w0: &NodeField, dt: f64) -> Result<NodeField> {
        if dt < 0.0 {
            return Err(Error::NegativeDt(dt));
        }
        let mut coeffs = self.analyze(w0)?;
        for (c, m) in coeffs.iter_mut().zip(&self.modes) {
            *c *= (-m.0 * dt).exp();
        }
        self.synthesize(&coeffs)
    }
}

/// Closed-form eigenpair of the five-point stencil on the tensor grid:
/// `lambda_{jk} = (4/h^2)(sin^2(j pi h/2) + sin^2(k pi h/2))` with the
/// `h^2`-normalized eigenvector `2 sin(j pi x) sin(k pi y)` (1-based modes).
/// These are exact for the discrete operator and serve the stepping path on
/// grids too large for the dense eigendecomposition.
pub fn sine_eigenvalue(grid: Grid, j: usize, k: usize) -> f64 {
    let h = grid.spacing();
    let s = |m: usize| (m as f64 * std::f64::consts::PI * h / 2.0).sin().powi(2);
    4.0 / (h * h) * (s(j) + s(k))
}

pub fn sine_mode_field(grid: Grid, j: usize, k: usize) -> NodeField {
    let n = grid.n();
    let mut vals = vec![0.0; grid.node_count()];
    for iy in 0..n {
        for ix in 0..n {
            let (x, y) = grid.node_coord(ix, iy);
            vals[ix + n * iy] = 2.0
                * (j as f64 * std::f64::consts::PI * x).sin()
                * (k as f64 * std::f64::consts::PI * y).sin();
        }
    }
    NodeField::from_values(grid, vals).expect("sine mode is finite")
}

/// The `m` smallest closed-form modes as `(lambda, j, k)`, 1-based.
pub fn sine_modes_sorted(grid: Grid, m: usize) -> Vec<(f64, usize, usize)> {
    let n = grid.n();
    let mut modes: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for j in 1..=n {
        for k in 1..=n {
            modes.push((sine_eigenvalue(grid, j, k), j, k));
        }
    }
    modes.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    modes.truncate(m.min(n * n));
    modes
}

/// What kind of evolution a trace records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Free,
    Forced,
    Adjoint,
}

/// Piecewise-constant-in-time forcing supported on `omega x E`.
#[derive(Debug, Clone)]
pub struct ForcingSpec {
    region: RegionMask,
    times: TimeSet,
    steps: Vec<ForcingStep>,
}

#[derive(Debug, Clone)]
pub struct ForcingStep {
    pub t0: f64,
    pub t1: f64,
    pub value: VelocityField,
}

impl ForcingSpec {
    /// Validates ordering, containment in `E`, and the support invariant
    /// (values must vanish bit-exactly outside the region's edges).
    pub fn new(region: RegionMask, times: TimeSet, steps: Vec<ForcingStep>) -> Result<ForcingSpec> {
        let mut violations = 0usize;
        let mut prev_end = f64::NEG_INFINITY;
        for step in &steps {
            if !(step.t0.is_finite() && step.t1.is_finite()) || step.t0 >= step.t1 {
                return Err(Error::InvalidInput(format!(
                    "forcing step [{}, {}] is not a forward interval",
                    step.t0, step.t1
                )));
            }
            if step.t0 < prev_end - 1e-15 {
                return Err(Error::InvalidInput("forcing steps overlap".into()));
            }
            prev_end = step.t1;
            let eps = 1e-12 * times.horizon();
            if !times
                .intervals()
                .iter()
                .any(|&(a, b)| step.t0 >= a - eps && step.t1 <= b + eps)
            {
                violations += 1;
                continue;
            }
            check_same_grid(region.grid(), step.value.grid())?;
            violations += step.value.support_violations(&region)?;
        }
        if violations > 0 {
            return Err(Error::ForcingSupport(violations));
        }
        Ok(ForcingSpec {
            region,
            times,
            steps,
        })
    }

    /// Zero forcing on a uniform per-interval schedule (`steps_per_interval`
    /// constant steps on every interval of `E`).
    pub fn zero_on_schedule(
        region: RegionMask,
        times: TimeSet,
        steps_per_interval: usize,
    ) -> Result<ForcingSpec> {
        let grid = region.grid();
        let bounds = step_bounds(&times, steps_per_interval);
        let steps = bounds
            .into_iter()
            .map(|(t0, t1)| ForcingStep {
                t0,
                t1,
                value: VelocityField::zeros(grid),
            })
            .collect();
        ForcingSpec::new(region, times, steps)
    }

    pub fn region(&self) -> &RegionMask {
        &self.region
    }

    pub fn times(&self) -> &TimeSet {
        &self.times
    }

    pub fn steps(&self) -> &[ForcingStep] {
        &self.steps
    }

    /// Uniform-in-time bound `max_k |f_k|_{L^2}` over the steps.
    pub fn sup_step_norm(&self) -> Result<f64> {
        let mut m = 0.0f64;
        for s in &self.steps {
            m = m.max(s.value.norm_l2(None)?);
        }
        Ok(m)
    }
}

/// Uniform step boundaries, `steps_per_interval` per interval of `E`.
pub fn step_bounds(times: &TimeSet, steps_per_interval: usize) -> Vec<(f64, f64)> {
    assert!(steps_per_interval >= 1);
    let mut out = Vec::new();
    for &(a, b) in times.intervals() {
        for s in 0..steps_per_interval {
            let t0 = a + (b - a) * s as f64 / steps_per_interval as f64;
            let t1 = a + (b - a) * (s + 1) as f64 / steps_per_interval as f64;
            out.push((t0, t1));
        }
    }
    out
}

/// Sampled evolution: stream, vorticity and velocity norms per sample time.
pub struct SolveTrace {
    kind: TraceKind,
    horizon: f64,
    times: Vec<f64>,
    streams: Vec<NodeField>,
    vorticities: Vec<NodeField>,
    velocity_norms: Vec<f64>,
    region_norms: Option<Vec<f64>>,
    initial_vorticity_modes: Vec<f64>,
    forcing: Option<ForcingSpec>,
}

impl SolveTrace {
    pub fn kind(&self) -> TraceKind {
        self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn stream(&self, k: usize) -> &NodeField {
        &self.streams[k]
    }

    pub fn vorticity(&self, k: usize) -> &NodeField {
        &self.vorticities[k]
    }

    pub fn velocity_norms(&self) -> &[f64] {
        &self.velocity_norms
    }

    pub fn region_norms(&self) -> Option<&[f64]> {
        self.region_norms.as_deref()
    }

    pub fn initial_vorticity_modes(&self) -> &[f64] {
        &self.initial_vorticity_modes
    }

    pub fn forcing(&self) -> Option<&ForcingSpec> {
        self.forcing.as_ref()
    }

    /// Velocity at sample `k`, reconstructed through the curl.
    pub fn velocity(&self, ops: &OperatorSet, k: usize) -> Result<VelocityField> {
        ops.curl(&self.streams[k])
    }
}

fn validate_times(times: &[f64], horizon: f64) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidInput("empty sample schedule".into()));
    }
    let slack = 1e-12 * horizon.max(1.0);
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(
            "sample times must be strictly increasing".into(),
        ));
    }
    if times[0] < -slack || *times.last().unwrap() > horizon + slack {
        return Err(Error::InvalidInput(format!(
            "sample times must lie in [0, {horizon}]"
        )));
    }
    Ok(())
}

/// Builds a trace from the modal coefficient evaluator `modes_at(t)`.
fn trace_from_modal(
    basis: &EigenBasis,
    ops: &OperatorSet,
    kind: TraceKind,
    horizon: f64,
    times: &[f64],
    region: Option<&RegionMask>,
    initial_vorticity_modes: Vec<f64>,
    forcing: Option<ForcingSpec>,
    modes_at: impl Fn(f64) -> Vec<f64>,
) -> Result<SolveTrace> {
    validate_times(times, horizon)?;
    let mut streams = Vec::with_capacity(times.len());
    let mut vorticities = Vec::with_capacity(times.len());
    let mut velocity_norms = Vec::with_capacity(times.len());
    let mut region_norms = region.map(|_| Vec::with_capacity(times.len()));
    for &t in times {
        let w_modes = modes_at(t);
        let mut psi_modes = w_modes.clone();
        for (c, m) in psi_modes.iter_mut().zip(basis.eigenvalues()) {
            *c /= m;
        }
        let w = basis.synthesize(&w_modes)?;
        let psi = basis.synthesize(&psi_modes)?;
        let u = ops.curl(&psi)?;
        velocity_norms.push(u.norm_l2(None)?);
        if let (Some(norms), Some(mask)) = (region_norms.as_mut(), region) {
            norms.push(u.norm_l2(Some(mask))?);
        }
        streams.push(psi);
        vorticities.push(w);
    }
    Ok(SolveTrace {
        kind,
        horizon,
        times: times.to_vec(),
        streams,
        vorticities,
        velocity_norms,
        region_norms,
        initial_vorticity_modes,
        forcing,
    })
}

/// Free Stokes evolution from divergence-free `u0`, sampled at `times`.
pub fn solve_stokes_free(
    basis: &EigenBasis,
    ops: &OperatorSet,
    u0: &VelocityField,
    horizon: f64,
    times: &[f64],
    region: Option<&RegionMask>,
) -> Result<SolveTrace> {
    let rec = ops.stream_from_velocity(u0, StreamMode::Strict)?;
    let w0 = ops.laplacian(&rec.stream)?;
    let a = basis.analyze(&w0)?;
    let lambdas: Vec<f64> = basis.eigenvalues().collect();
    trace_from_modal(
        basis,
        ops,
        TraceKind::Free,
        horizon,
        times,
        region,
        a.clone(),
        None,
        |t| {
            a.iter()
                .zip(&lambdas)
                .map(|(c, l)| c * (-l * t).exp())
                .collect()
        },
    )
}

/// Adjoint evolution: `v(t)` equals the free solution at `horizon - t` from
/// terminal data `v_T` (the evolution is self-adjoint).
pub fn solve_adjoint(
    basis: &EigenBasis,
    ops: &OperatorSet,
    v_terminal: &VelocityField,
    horizon: f64,
    times: &[f64],
    region: Option<&RegionMask>,
) -> Result<SolveTrace> {
    let rec = ops.stream_from_velocity(v_terminal, StreamMode::Strict)?;
    let w_t = ops.laplacian(&rec.stream)?;
    let b = basis.analyze(&w_t)?;
    let lambdas: Vec<f64> = basis.eigenvalues().collect();
    trace_from_modal(
        basis,
        ops,
        TraceKind::Adjoint,
        horizon,
        times,
        region,
        b.clone(),
        None,
        |t| {
            b.iter()
                .zip(&lambdas)
                .map(|(c, l)| c * (-l * (horizon - t)).exp())
                .collect()
        },
    )
}

/// Modal loads of the forcing: coefficients of `rot f_k` per step.
fn forcing_modal_loads(
    basis: &EigenBasis,
    ops: &OperatorSet,
    forcing: &ForcingSpec,
) -> Result<Vec<Vec<f64>>> {
    forcing
        .steps()
        .iter()
        .map(|s| basis.analyze(&ops.rot(&s.value)?))
        .collect()
}

/// Exact Duhamel contribution of one constant step to mode `lambda` at time
/// `t`: `int_{t0}^{min(t1,t)} e^{-lambda (t-s)} ds`.
fn step_weight(lambda: f64, t0: f64, t1: f64, t: f64) -> f64 {
    if t <= t0 {
        return 0.0;
    }
    let upper = t1.min(t);
    // e^{-lambda (t-upper)} (1 - e^{-lambda (upper-t0)}) / lambda
    (-lambda * (t - upper)).exp() * (-(-lambda * (upper - t0)).exp_m1()) / lambda
}

/// Forced Stokes evolution; the vorticity solves `w' = -L w + rot f` with
/// piecewise-constant `f`, evaluated mode-by-mode in closed form.
pub fn solve_stokes_forced(
    basis: &EigenBasis,
    ops: &OperatorSet,
    u0: &VelocityField,
    forcing: &ForcingSpec,
    horizon: f64,
    times: &[f64],
    region: Option<&RegionMask>,
) -> Result<SolveTrace> {
    check_same_grid(basis.grid(), forcing.region().grid())?;
    if forcing.times().horizon() > horizon + 1e-12 * horizon.max(1.0) {
        return Err(Error::HorizonMismatch(forcing.times().horizon(), horizon));
    }
    let rec = ops.stream_from_velocity(u0, StreamMode::Strict)?;
    let w0 = ops.laplacian(&rec.stream)?;
    let a = basis.analyze(&w0)?;
    let lambdas: Vec<f64> = basis.eigenvalues().collect();
    let loads = forcing_modal_loads(basis, ops, forcing)?;
    let bounds: Vec<(f64, f64)> = forcing.steps().iter().map(|s| (s.t0, s.t1)).collect();
    trace_from_modal(
        basis,
        ops,
        TraceKind::Forced,
        horizon,
        times,
        region,
        a.clone(),
        Some(forcing.clone()),
        |t| {
            let mut modes: Vec<f64> = a
                .iter()
                .zip(&lambdas)
                .map(|(c, l)| c * (-l * t).exp())
                .collect();
            for (load, &(t0, t1)) in loads.iter().zip(&bounds) {
                if t <= t0 {
                    continue;
                }
                for ((m, g), &l) in modes.iter_mut().zip(load).zip(&lambdas) {
                    *m += g * step_weight(l, t0, t1, t);
                }
            }
            modes
        },
    )
}

/// Max relative defect of the energy identity
/// `|u(s)|^2 + 2 int_0^s |w|^2 dt = |u0|^2` over the trace samples, with the
/// time integral in closed modal form.
pub fn energy_identity_residual(basis: &EigenBasis, trace: &SolveTrace) -> Result<f64> {
    if trace.kind() != TraceKind::Free {
        return Err(Error::InvalidInput(
            "energy identity requires a free-evolution trace".into(),
        ));
    }
    let a = trace.initial_vorticity_modes();
    let lambdas: Vec<f64> = basis.eigenvalues().collect();
    // |u0|^2 = sum a_i^2 / lambda_i  (Parseval through the stream function).
    let u0_sq = csum(a.iter().zip(&lambdas).map(|(c, l)| c * c / l));
    if u0_sq < TINY {
        return Ok(0.0);
    }
    let mut worst: f64 = 0.0;
    for (k, &s) in trace.times().iter().enumerate() {
        let u_sq = trace.velocity_norms()[k].powi(2);
        // 2 int_0^s |w|^2 = sum a_i^2 (1 - e^{-2 lambda_i s}) / lambda_i
        let dissipated = csum(
            a.iter()
                .zip(&lambdas)
                .map(|(c, l)| c * c * (-(-2.0 * l * s).exp_m1()) / l),
        );
        worst = worst.max((u_sq + dissipated - u0_sq).abs() / u0_sq);
    }
    Ok(worst)
}

/// Relative defect of the duality pairing
/// `<u(T), v_T> - <u0, v(0)> = int_0^T <f chi, v(t)> dt`,
/// with the forcing integral in closed modal form. Free forward traces use
/// `f = 0` and the identity reduces to semigroup self-adjointness.
pub fn duality_pairing_residual(
    basis: &EigenBasis,
    ops: &OperatorSet,
    forward: &SolveTrace,
    adjoint: &SolveTrace,
) -> Result<f64> {
    if adjoint.kind() != TraceKind::Adjoint {
        return Err(Error::InvalidInput(
            "second trace must be an adjoint solve".into(),
        ));
    }
    if forward.kind() == TraceKind::Adjoint {
        return Err(Error::InvalidInput(
            "first trace must be a forward solve".into(),
        ));
    }
    let horizon = forward.horizon();
    if (horizon - adjoint.horizon()).abs() > 1e-12 * horizon.max(1.0) {
        return Err(Error::HorizonMismatch(horizon, adjoint.horizon()));
    }
    let slack = 1e-12 * horizon.max(1.0);
    let last_fwd = *forward.times().last().unwrap();
    if (last_fwd - horizon).abs() > slack || forward.times()[0].abs() > slack {
        return Err(Error::InvalidInput(
            "forward trace must sample t=0 and t=T".into(),
        ));
    }
    let last_adj = *adjoint.times().last().unwrap();
    if (last_adj - horizon).abs() > slack || adjoint.times()[0].abs() > slack {
        return Err(Error::InvalidInput(
            "adjoint trace must sample t=0 and t=T".into(),
        ));
    }

    let k_t = forward.times().len() - 1;
    let u_terminal = forward.velocity(ops, k_t)?;
    let u_initial = forward.velocity(ops, 0)?;
    let v_terminal = adjoint.velocity(ops, adjoint.times().len() - 1)?;
    let v_initial = adjoint.velocity(ops, 0)?;

    let terminal_pairing = u_terminal.dot(&v_terminal)?;
    let initial_pairing = u_initial.dot(&v_initial)?;

    // int_0^T <f_k, v(t)> dt = sum_k sum_i g_ik b_i / lambda_i *
    //                          int_{t0}^{t1} e^{-lambda_i (T-t)} dt
    let b = adjoint.initial_vorticity_modes();
    let lambdas: Vec<f64> = basis.eigenvalues().collect();
    let mut forcing_pairing = 0.0;
    if let Some(forcing) = forward.forcing() {
        let loads = forcing_modal_loads(basis, ops, forcing)?;
        for (load, step) in loads.iter().zip(forcing.steps()) {
            forcing_pairing += csum(load.iter().zip(b).zip(&lambdas).map(|((g, bi), l)| {
                let window =
                    (-l * (horizon - step.t1)).exp() * (-(-l * (step.t1 - step.t0)).exp_m1()) / l;
                g * bi / l * window
            }));
        }
    }

    let defect = (terminal_pairing - initial_pairing - forcing_pairing).abs();
    let scale = terminal_pairing.abs() + initial_pairing.abs() + forcing_pairing.abs();
    Ok(guarded_div(defect, scale))
}

/// Crank-Nicolson fallback for grids too large for the dense eigenbasis.
/// Fixed-step free evolution of the vorticity; O(dt^2) accurate, excluded
/// from the machine-precision identities.
pub fn solve_stokes_free_cn(
    ops: &OperatorSet,
    u0: &VelocityField,
    horizon: f64,
    step_count: usize,
) -> Result<Vec<(f64, NodeField)>> {
    if step_count == 0 {
        return Err(Error::InvalidInput("step_count must be positive".into()));
    }
    let grid = ops.grid();
    let rec = ops.stream_from_velocity(u0, StreamMode::Strict)?;
    let mut w = ops.laplacian(&rec.stream)?;
    let dt = horizon / step_count as f64;
    let n = grid.n();
    let h = grid.spacing();
    let diag = 1.0 + dt / 2.0 * 4.0 / (h * h);
    let off = -dt / 2.0 / (h * h);
    let implicit = crate::band::BandCholesky::factor(grid.node_count(), n, |i, j| {
        if i == j {
            diag
        } else if i == j + n || (i == j + 1 && i % n != 0) {
            off
        } else {
            0.0
        }
    })?;
    let mut out = Vec::with_capacity(step_count + 1);
    out.push((0.0, rec.stream.clone()));
    for k in 0..step_count {
        // (I + dt/2 L) w1 = (I - dt/2 L) w0
        let mut rhs = w.clone();
        rhs.axpy(-dt / 2.0, &ops.laplacian(&w)?)?;
        let mut x = rhs.values().to_vec();
        implicit.solve_in_place(&mut x);
        w = NodeField::from_values(grid, x)?;
        let psi = ops.poisson_solve(&w)?;
        out.push((dt * (k + 1) as f64, psi));
    }
    Ok(out)
}
