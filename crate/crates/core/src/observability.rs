//! Quantitative unique-continuation and observability measurements.
//!
//! Everything here evaluates an inequality on actual discrete solutions:
//! gradient-energy log-convexity, the interpolation chain with its spectral
//! smoothing bounds, three-ball quotients, the `(N, alpha)` fit of the
//! unique-continuation estimate, and lower bounds for the observability
//! constant over a measurable time window.

use crate::error::{Error, Result};
use crate::grid::{NodeField, VelocityField};
use crate::numeric::{csum, guarded_div, TINY};
use crate::ops::{OperatorSet, StreamMode};
use crate::region::{RegionMask, TimeSet};
use crate::sample::{normal_mode_coefficients, stream_rng};
use crate::spectral::EigenBasis;

use rand::Rng;
use rand_distr::StandardNormal;

/// Gradient energy `e(t) = <psi, L psi>` and its first two time derivatives,
/// all in closed spectral form (never finite differences).
#[derive(Debug, Clone)]
pub struct EnergySeries {
    pub times: Vec<f64>,
    /// `e(t) = sum_i lambda_i c_i^2 e^{-2 lambda_i t}`
    pub energy: Vec<f64>,
    /// `e'(t) = -2 |w(t)|^2`
    pub first_derivative: Vec<f64>,
    /// `e''(t) = 4 <L w(t), w(t)>`
    pub second_derivative: Vec<f64>,
}

/// Spectral gradient-energy diagnostics for the stream evolution from `psi0`.
pub fn energy_series(basis: &EigenBasis, psi0: &NodeField, times: &[f64]) -> Result<EnergySeries> {
    if times.is_empty() {
        return Err(Error::InvalidInput("empty sample schedule".into()));
    }
    let c = basis.analyze(psi0)?;
    let lambdas: Vec<f64> = basis.eigenvalues().collect();
    let mut energy = Vec::with_capacity(times.len());
    let mut d1 = Vec::with_capacity(times.len());
    let mut d2 = Vec::with_capacity(times.len());
    for &t in times {
        let decayed: Vec<f64> = c
            .iter()
            .zip(&lambdas)
            .map(|(ci, l)| ci * ci * (-2.0 * l * t).exp())
            .collect();
        energy.push(csum(decayed.iter().zip(&lambdas).map(|(d, l)| l * d)));
        d1.push(-2.0 * csum(decayed.iter().zip(&lambdas).map(|(d, l)| l * l * d)));
        d2.push(4.0 * csum(decayed.iter().zip(&lambdas).map(|(d, l)| l * l * l * d)));
    }
    Ok(EnergySeries {
        times: times.to_vec(),
        energy,
        first_derivative: d1,
        second_derivative: d2,
    })
}

/// Minimum over samples of `(e'' e - (e')^2) / (e'' e)` - nonnegative up to
/// roundoff by Cauchy-Schwarz in the `L`-weighted inner product, zero exactly
/// for a single mode.
pub fn log_convexity_margin(series: &EnergySeries) -> Result<f64> {
    let peak = series.energy.iter().fold(0.0f64, |m, &e| m.max(e));
    if peak < TINY {
        return Err(Error::InvalidInput("zero-energy series".into()));
    }
    let mut margin = f64::INFINITY;
    for k in 0..series.times.len() {
        let e = series.energy[k];
        let d1 = series.first_derivative[k];
        let d2 = series.second_derivative[k];
        let prod = d2 * e;
        margin = margin.min((prod - d1 * d1) / (prod + TINY));
    }
    Ok(margin)
}

/// True iff the gradient energy is nonincreasing (to 1e-12 relative) and the
/// backward-uniqueness implication `e(T) = 0 => e(0) = 0` holds on the series.
pub fn gradient_energy_monotonicity(series: &EnergySeries) -> bool {
    let nonincreasing = series
        .energy
        .windows(2)
        .all(|w| w[1] <= w[0] * (1.0 + 1e-12) + TINY);
    let backward_unique = *series.energy.last().unwrap_or(&0.0) >= TINY
        || series.energy.first().map_or(true, |e| *e < TINY);
    nonincreasing && backward_unique
}

/// One verified inequality of the interpolation chain.
#[derive(Debug, Clone, Copy)]
pub struct ChainInequality {
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

impl ChainInequality {
    fn check(lhs: f64, rhs: f64) -> ChainInequality {
        ChainInequality {
            lhs,
            rhs,
            satisfied: lhs <= rhs * (1.0 + 1e-12) + TINY,
        }
    }
}

/// Report of the discrete interpolation chain at `t3 = (t1+t2)/2`.
#[derive(Debug, Clone, Copy)]
pub struct ChainReport {
    pub t3: f64,
    /// Heat-smoothing bound `|grad(D psi)(t3)| <= |grad psi(t1)| / (t3 - t1)`,
    /// strict because `sup_x x e^{-x} = 1/e < 1`.
    pub smoothing: ChainInequality,
    /// Integration by parts + Cauchy-Schwarz:
    /// `|D psi(t3)|^2 <= |grad(D psi)(t3)| |grad psi(t3)|`.
    pub cauchy_schwarz: ChainInequality,
    /// Elliptic bound with the sharp constant:
    /// `|grad psi(t2)|^2 <= |D psi(t2)|^2 / lambda_1`.
    pub elliptic: ChainInequality,
}

impl ChainReport {
    pub fn all_satisfied(&self) -> bool {
        self.smoothing.satisfied && self.cauchy_schwarz.satisfied && self.elliptic.satisfied
    }
}

/// Evaluates the three spectral inequalities behind the interpolation
/// argument on the evolution from `psi0`.
pub fn interpolation_chain_check(
    basis: &EigenBasis,
    psi0: &NodeField,
    t1: f64,
    t2: f64,
) -> Result<ChainReport> {
    if !(t1 >= 0.0 && t2 > t1) {
        return Err(Error::InvalidInput(format!(
            "need 0 <= t1 < t2, got t1={t1}, t2={t2}"
        )));
    }
    let t3 = 0.5 * (t1 + t2);
    let c = basis.analyze(psi0)?;
    let lambdas: Vec<f64> = basis.eigenvalues().collect();
    let moment = |time: f64, power: i32| -> f64 {
        csum(
            c.iter()
                .zip(&lambdas)
                .map(|(ci, l)| l.powi(power) * ci * ci * (-2.0 * l * time).exp()),
        )
    };
    // I1 = |grad(D psi)(t3)| = <L w, w>^(1/2), I2 = |grad psi(t3)|.
    let i1 = moment(t3, 3).sqrt();
    let i2 = moment(t3, 1).sqrt();
    let grad_t1 = moment(t1, 1).sqrt();
    let smoothing = ChainInequality::check(i1, grad_t1 / (t3 - t1));
    let lap_t3_sq = moment(t3, 2);
    let cauchy_schwarz = ChainInequality::check(lap_t3_sq, i1 * i2);
    let grad_t2_sq = moment(t2, 1);
    let lap_t2_sq = moment(t2, 2);
    let elliptic = ChainInequality::check(grad_t2_sq, lap_t2_sq / basis.lambda_min());
    Ok(ChainReport {
        t3,
        smoothing,
        cauchy_schwarz,
        elliptic,
    })
}

/// Three-ball quotient `Q = |u(t2)|_Omega / (|u(t2)|_omega^alpha |u(t1)|_Omega^(1-alpha))`.
pub fn three_ball_quotient(
    basis: &EigenBasis,
    ops: &OperatorSet,
    u0: &VelocityField,
    t1: f64,
    t2: f64,
    omega: &RegionMask,
    alpha: f64,
) -> Result<f64> {
    if !(t1 >= 0.0 && t2 > t1) {
        return Err(Error::InvalidInput(format!(
            "need 0 <= t1 < t2, got t1={t1}, t2={t2}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "alpha={alpha} must be in (0,1)"
        )));
    }
    let rec = ops.stream_from_velocity(u0, StreamMode::Strict)?;
    let c = basis.analyze(&rec.stream)?;
    let lambdas: Vec<f64> = basis.eigenvalues().collect();
    let norm_at = |t: f64| -> f64 {
        csum(
            c.iter()
                .zip(&lambdas)
                .map(|(ci, l)| l * ci * ci * (-2.0 * l * t).exp()),
        )
        .sqrt()
    };
    let decayed: Vec<f64> = c
        .iter()
        .zip(&lambdas)
        .map(|(ci, l)| ci * (-l * t2).exp())
        .collect();
    let u_t2 = ops.curl(&basis.synthesize(&decayed)?)?;
    let obs = u_t2.norm_l2(Some(omega))?;
    if obs < TINY {
        return Err(Error::DegenerateObservation);
    }
    Ok(norm_at(t2) / (obs.powf(alpha) * norm_at(t1).powf(1.0 - alpha)))
}

/// One unique-continuation sample: norms of the solution from a seeded `u0`
/// at two times, with the observation norm over omega.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct UcSample {
    pub seed: u64,
    pub stream: u64,
    pub t1: f64,
    pub t2: f64,
    /// `|u(t1)|_Omega`
    pub norm_t1: f64,
    /// `|u(t2)|_Omega`
    pub norm_t2: f64,
    /// `|u(t2)|_omega`
    pub obs_t2: f64,
}

/// Draws a unique-continuation sample: random `u0` over the first `m` modes,
/// `t1 ~ U(0, T/2)`, `t2 - t1 ~ U(0.05 T, 0.5 T)`.
pub fn draw_uc_sample(
    basis: &EigenBasis,
    ops: &OperatorSet,
    omega: &RegionMask,
    horizon: f64,
    m: usize,
    seed: u64,
    stream: u64,
) -> Result<UcSample> {
    let m = m.min(basis.mode_count());
    let mut rng = stream_rng(seed, stream);
    let coeffs: Vec<f64> = (0..m)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let t1 = 0.5 * horizon * rng.random::<f64>();
    let t2 = t1 + (0.05 + 0.45 * rng.random::<f64>()) * horizon;
    let lambdas: Vec<f64> = basis.eigenvalues().collect();
    let norm_at = |t: f64| -> f64 {
        csum(
            coeffs
                .iter()
                .zip(&lambdas)
                .map(|(ci, l)| l * ci * ci * (-2.0 * l * t).exp()),
        )
        .sqrt()
    };
    let decayed: Vec<f64> = coeffs
        .iter()
        .zip(&lambdas)
        .map(|(ci, l)| ci * (-l * t2).exp())
        .collect();
    let u_t2 = ops.curl(&basis.synthesize(&decayed)?)?;
    Ok(UcSample {
        seed,
        stream,
        t1,
        t2,
        norm_t1: norm_at(t1),
        norm_t2: norm_at(t2),
        obs_t2: u_t2.norm_l2(Some(omega))?,
    })
}

/// Fitted constants of the unique-continuation inequality
/// `|u(t2)| <= (N e^{N/(t2-t1)} |u(t2)|_omega)^alpha |u(t1)|^(1-alpha)`.
#[derive(Debug, Clone)]
pub struct UcFit {
    pub alpha: f64,
    pub n_const: f64,
    pub samples: Vec<UcSample>,
    pub excluded: usize,
    pub method: &'static str,
}

impl UcFit {
    /// Whether the fitted constants satisfy the inequality on `sample`
    /// (log-space check with 1e-9 slack).
    pub fn satisfies(&self, sample: &UcSample) -> bool {
        uc_log_defect(self.alpha, self.n_const, sample) <= 1e-9
    }
}

/// `log q - alpha (log N + N/dt + log r) - (1-alpha) log p`; the inequality
/// holds iff this is <= 0.
fn uc_log_defect(alpha: f64, n_const: f64, s: &UcSample) -> f64 {
    if s.norm_t2 < TINY {
        return f64::NEG_INFINITY;
    }
    let dt = s.t2 - s.t1;
    s.norm_t2.ln()
        - alpha * (n_const.ln() + n_const / dt + s.obs_t2.ln())
        - (1.0 - alpha) * s.norm_t1.ln()
}

/// Minimal `N` for fixed `alpha` on one sample: the unique root of the
/// strictly increasing `alpha (log N + N/dt)` hitting the sample's defect.
fn minimal_n_for(alpha: f64, s: &UcSample) -> f64 {
    if s.norm_t2 < TINY {
        return 0.0;
    }
    let dt = s.t2 - s.t1;
    let target = (s.norm_t2.ln() - alpha * s.obs_t2.ln() - (1.0 - alpha) * s.norm_t1.ln()) / alpha;
    let g = |n: f64| n.ln() + n / dt;
    let mut lo = 1e-12;
    if g(lo) >= target {
        return lo;
    }
    let mut hi = 1.0;
    while g(hi) < target {
        hi *= 2.0;
        if hi > 1e300 {
            return hi;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    hi
}

/// Fits `(alpha, N)` over the grid `alpha in {0.05, 0.10, ..., 0.95}`,
/// taking for each alpha the smallest `N` satisfying every sample and then
/// the pair minimizing `N`. Samples with zero observation norm are excluded;
/// an empty valid set is an error.
pub fn fit_uc_constants(samples: &[UcSample]) -> Result<UcFit> {
    let valid: Vec<UcSample> = samples
        .iter()
        .filter(|s| s.obs_t2 >= TINY)
        .copied()
        .collect();
    let excluded = samples.len() - valid.len();
    if valid.is_empty() {
        return Err(Error::DegenerateObservation);
    }
    let mut best: Option<(f64, f64)> = None;
    for step in 1..=19 {
        let alpha = step as f64 * 0.05;
        let mut n_needed = 1e-12f64;
        for s in &valid {
            n_needed = n_needed.max(minimal_n_for(alpha, s));
        }
        match best {
            Some((_, n)) if n <= n_needed => {}
            _ => best = Some((alpha, n_needed)),
        }
    }
    let (alpha, n_const) = best.expect("grid is nonempty");
    let fit = UcFit {
        alpha,
        n_const,
        samples: valid,
        excluded,
        method: "alpha-grid+N-bisection",
    };
    debug_assert!(fit.samples.iter().all(|s| fit.satisfies(s)));
    Ok(fit)
}

/// Indices of holdout samples violating the fitted inequality.
pub fn validate_uc_fit(fit: &UcFit, holdout: &[UcSample]) -> Vec<usize> {
    holdout
        .iter()
        .enumerate()
        .filter(|(_, s)| s.obs_t2 >= TINY && !fit.satisfies(s))
        .map(|(i, _)| i)
        .collect()
}

/// Adaptive Simpson on `[a, b]` with absolute tolerance `tol`.
fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let fa = f(a);
    let fb = f(b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(f, a, fa, b, fb, m, fm, whole, tol, 40)
}

/// `int_E g(t) dt` by adaptive Simpson per interval, 1e-9 relative.
pub fn integrate_over_time_set(times: &TimeSet, g: impl Fn(f64) -> f64) -> f64 {
    let mut total = 0.0;
    for &(a, b) in times.intervals() {
        // Coarse composite estimate to turn the relative tolerance absolute.
        let coarse: f64 = (0..=8)
            .map(|k| {
                let t = a + (b - a) * k as f64 / 8.0;
                let w = if k == 0 || k == 8 { 0.5 } else { 1.0 };
                w * g(t)
            })
            .sum::<f64>()
            * (b - a)
            / 8.0;
        let tol = 1e-9 * coarse.abs().max(TINY);
        total += adaptive_simpson(&g, a, b, tol);
    }
    total
}

/// Observability quotient `|v(0)| / int_E |v(t)|_omega dt` for the adjoint
/// trajectory from terminal data `v_terminal`.
pub fn observability_ratio(
    basis: &EigenBasis,
    ops: &OperatorSet,
    v_terminal: &VelocityField,
    horizon: f64,
    omega: &RegionMask,
    window: &TimeSet,
) -> Result<f64> {
    let rec = ops.stream_from_velocity(v_terminal, StreamMode::Strict)?;
    let b = basis.analyze(&rec.stream)?;
    ratio_from_coefficients(basis, ops, &b, horizon, omega, window)
}

fn ratio_from_coefficients(
    basis: &EigenBasis,
    ops: &OperatorSet,
    coeffs: &[f64],
    horizon: f64,
    omega: &RegionMask,
    window: &TimeSet,
) -> Result<f64> {
    let lambdas: Vec<f64> = basis.eigenvalues().collect();
    let numerator = csum(
        coeffs
            .iter()
            .zip(&lambdas)
            .map(|(c, l)| l * c * c * (-2.0 * l * horizon).exp()),
    )
    .sqrt();
    let observed_norm = |t: f64| -> f64 {
        let decayed: Vec<f64> = coeffs
            .iter()
            .zip(&lambdas)
            .map(|(c, l)| c * (-l * (horizon - t)).exp())
            .collect();
        let u = basis
            .synthesize(&decayed)
            .and_then(|psi| ops.curl(&psi))
            .expect("synthesis of finite coefficients");
        u.norm_l2(Some(omega)).expect("same grid")
    };
    let denominator = integrate_over_time_set(window, observed_norm);
    if denominator < TINY {
        return Err(Error::DegenerateObservation);
    }
    Ok(numerator / denominator)
}

/// Result of the multi-start observability-constant search.
#[derive(Debug, Clone)]
pub struct ObsEstimate {
    /// Best ratio found: a certified lower bound for the discrete constant.
    pub best_ratio: f64,
    /// Stream-modal coefficients of the maximizing terminal data.
    pub best_coefficients: Vec<f64>,
    /// Final ratio of every start.
    pub start_ratios: Vec<f64>,
    /// best / median over starts.
    pub dispersion: f64,
    /// Mode carrying the largest coefficient magnitude in the maximizer.
    pub dominant_mode: usize,
}

/// Settings for [`estimate_observability_constant`].
#[derive(Debug, Clone, Copy)]
pub struct ObsSearchSettings {
    pub starts: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for ObsSearchSettings {
    fn default() -> Self {
        ObsSearchSettings {
            starts: 20,
            max_iterations: 500,
            seed: 0,
        }
    }
}

/// Maximizes the observability ratio over terminal data in the span of the
/// first `m` stream modes by multi-start projected gradient ascent. The
/// returned best ratio is a lower bound for the discrete observability
/// constant; no global-optimality claim is made.
pub fn estimate_observability_constant(
    basis: &EigenBasis,
    ops: &OperatorSet,
    horizon: f64,
    omega: &RegionMask,
    window: &TimeSet,
    m: usize,
    settings: ObsSearchSettings,
) -> Result<ObsEstimate> {
    let m = m.min(basis.mode_count());
    if m == 0 || settings.starts == 0 {
        return Err(Error::InvalidInput(
            "need m >= 1 and at least one start".into(),
        ));
    }
    let lambdas: Vec<f64> = basis.eigenvalues().take(m).collect();
    // Masked Gram of the mode velocities V_i = (curl e_i) restricted to omega.
    let mode_velocities: Vec<VelocityField> = (0..m)
        .map(|i| ops.curl(&basis.eigenvector(i))?.restricted_to(omega))
        .collect::<Result<_>>()?;
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v = mode_velocities[i].dot(&mode_velocities[j])?;
            gram[i * m + j] = v;
            gram[j * m + i] = v;
        }
    }

    // Fixed quadrature nodes for the search phase (composite Simpson).
    const PANELS: usize = 64;
    let mut nodes: Vec<(f64, f64)> = Vec::new();
    for &(a, b) in window.intervals() {
        let dt = (b - a) / PANELS as f64;
        for p in 0..PANELS {
            let t0 = a + p as f64 * dt;
            nodes.push((t0, dt / 6.0));
            nodes.push((t0 + 0.5 * dt, 4.0 * dt / 6.0));
            nodes.push((t0 + dt, dt / 6.0));
        }
    }

    let value_and_grad = |c: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let num_sq = csum(
            c.iter()
                .zip(&lambdas)
                .map(|(ci, l)| l * ci * ci * (-2.0 * l * horizon).exp()),
        );
        let num = num_sq.sqrt();
        let mut den = 0.0;
        let mut dden = vec![0.0; if want_grad { m } else { 0 }];
        let mut d = vec![0.0; m];
        let mut gd = vec![0.0; m];
        for &(t, weight) in &nodes {
            for i in 0..m {
                d[i] = c[i] * (-lambdas[i] * (horizon - t)).exp();
            }
            for i in 0..m {
                let mut s = 0.0;
                for j in 0..m {
                    s += gram[i * m + j] * d[j];
                }
                gd[i] = s;
            }
            let nrm = cdotv(&d, &gd).max(0.0).sqrt();
            den += weight * nrm;
            if want_grad && nrm > TINY {
                for i in 0..m {
                    dden[i] += weight * (-lambdas[i] * (horizon - t)).exp() * gd[i] / nrm;
                }
            }
        }
        if den < TINY || num < TINY {
            return (0.0, vec![0.0; m]);
        }
        let ratio = num / den;
        if !want_grad {
            return (ratio, Vec::new());
        }
        // Gradient of log(ratio).
        let mut grad = vec![0.0; m];
        for i in 0..m {
            let dnum = lambdas[i] * c[i] * (-2.0 * lambdas[i] * horizon).exp() / num_sq.max(TINY);
            grad[i] = dnum - dden[i] / den;
        }
        (ratio, grad)
    };

    let normalize = |c: &mut [f64]| {
        let n = cdotv(c, c).sqrt();
        if n > TINY {
            for x in c.iter_mut() {
                *x /= n;
            }
        }
    };

    let mut start_ratios = Vec::with_capacity(settings.starts);
    let mut best_ratio = f64::NEG_INFINITY;
    let mut best_c = vec![0.0; m];
    for start in 0..settings.starts {
        let mut c = normal_mode_coefficients(settings.seed, start as u64, m);
        normalize(&mut c);
        let (mut ratio, mut grad) = value_and_grad(&c, true);
        let mut step = 1.0;
        for _ in 0..settings.max_iterations {
            let gnorm = cdotv(&grad, &grad).sqrt();
            if gnorm <= 1e-12 * (1.0 + ratio.abs()) {
                break;
            }
            let mut improved = false;
            for _ in 0..40 {
                let mut trial: Vec<f64> = c.iter().zip(&grad).map(|(x, g)| x + step * g).collect();
                normalize(&mut trial);
                let (trial_ratio, _) = value_and_grad(&trial, false);
                if trial_ratio > ratio * (1.0 + 1e-14) {
                    c = trial;
                    let (r, g) = value_and_grad(&c, true);
                    ratio = r;
                    grad = g;
                    step *= 1.5;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        start_ratios.push(ratio);
        if ratio > best_ratio {
            best_ratio = ratio;
            best_c = c;
        }
    }

    // Report the best ratio with the tight adaptive quadrature.
    let refined = ratio_from_coefficients(basis, ops, &best_c, horizon, omega, window)?;
    let mut sorted = start_ratios.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let dominant_mode = best_c
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(ObsEstimate {
        best_ratio: refined,
        best_coefficients: best_c,
        start_ratios,
        dispersion: guarded_div(refined, median).max(1.0),
        dominant_mode,
    })
}

fn cdotv(a: &[f64], b: &[f64]) -> f64 {
    csum(a.iter().zip(b).map(|(x, y)| x * y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::region::RegionShape;
    use crate::spectral::uniform_times;
    use crate::testutil::{rand_node_field, TestRng};

    fn setup(n: usize) -> (OperatorSet, EigenBasis) {
        let ops = OperatorSet::new(Grid::new(n).unwrap()).unwrap();
        let basis = EigenBasis::new(&ops).unwrap();
        (ops, basis)
    }

    #[test]
    fn energy_series_single_mode_closed_form() {
        let (_, basis) = setup(8);
        let e1 = basis.eigenvector(0);
        let lam = basis.lambda_min();
        let times = uniform_times(0.5, 6);
        let s = energy_series(&basis, &e1, &times).unwrap();
        for (k, &t) in times.iter().enumerate() {
            let decay = (-2.0 * lam * t).exp();
            assert!((s.energy[k] - lam * decay).abs() <= 1e-12 * lam);
            assert!((s.first_derivative[k] + 2.0 * lam * lam * decay).abs() <= 1e-12 * lam * lam);
            assert!(
                (s.second_derivative[k] - 4.0 * lam.powi(3) * decay).abs() <= 1e-11 * lam.powi(3)
            );
        }
    }

    #[test]
    fn energy_series_two_mode_closed_form() {
        let (_, basis) = setup(8);
        let l0 = basis.eigenvalue(0);
        let l1 = basis.eigenvalue(1);
        let mut psi0 = basis.eigenvector(0);
        psi0.axpy(1.0, &basis.eigenvector(1)).unwrap();
        let times = [0.0, 0.05, 0.2];
        let s = energy_series(&basis, &psi0, &times).unwrap();
        for (k, &t) in times.iter().enumerate() {
            let e = l0 * (-2.0 * l0 * t).exp() + l1 * (-2.0 * l1 * t).exp();
            let d1 = -2.0 * (l0 * l0 * (-2.0 * l0 * t).exp() + l1 * l1 * (-2.0 * l1 * t).exp());
            let d2 =
                4.0 * (l0.powi(3) * (-2.0 * l0 * t).exp() + l1.powi(3) * (-2.0 * l1 * t).exp());
            assert!((s.energy[k] - e).abs() <= 1e-12 * e.abs());
            assert!((s.first_derivative[k] - d1).abs() <= 1e-12 * d1.abs());
            assert!((s.second_derivative[k] - d2).abs() <= 1e-12 * d2.abs());
        }
    }

    #[test]
    fn energy_series_signs_on_random_data() {
        let (_, basis) = setup(16);
        let mut rng = TestRng::new(21);
        let psi0 = rand_node_field(basis.grid(), &mut rng);
        let s = energy_series(&basis, &psi0, &uniform_times(1.0, 17)).unwrap();
        assert!(s.energy.iter().all(|&e| e > 0.0));
        assert!(s.first_derivative.iter().all(|&d| d <= 0.0));
        assert!(s.second_derivative.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn log_convexity_single_mode_is_equality() {
        let (_, basis) = setup(8);
        let s = energy_series(&basis, &basis.eigenvector(0), &uniform_times(0.4, 9)).unwrap();
        let margin = log_convexity_margin(&s).unwrap();
        assert!(margin.abs() <= 1e-14, "single-mode margin {margin:.3e}");
    }

    #[test]
    fn log_convexity_random_trials() {
        let (_, basis) = setup(16);
        let mut rng = TestRng::new(22);
        let times = uniform_times(1.0, 33);
        let mut min_margin = f64::INFINITY;
        for _ in 0..100 {
            let psi0 = rand_node_field(basis.grid(), &mut rng);
            let s = energy_series(&basis, &psi0, &times).unwrap();
            min_margin = min_margin.min(log_convexity_margin(&s).unwrap());
        }
        assert!(min_margin >= -1e-12, "min margin {min_margin:.3e}");
    }

    #[test]
    fn log_convexity_two_separated_modes_strictly_positive() {
        let (_, basis) = setup(8);
        let mut psi0 = basis.eigenvector(0);
        psi0.axpy(10.0, &basis.eigenvector(4)).unwrap();
        let s = energy_series(&basis, &psi0, &[0.0, 0.01, 0.05]).unwrap();
        let margin = log_convexity_margin(&s).unwrap();
        // Closed form: margin > 0 strictly for distinct modes.
        let l0 = basis.eigenvalue(0);
        let l4 = basis.eigenvalue(4);
        assert!(l4 > l0 * 1.5);
        assert!(margin > 1e-6, "two-mode margin {margin:.3e}");
    }

    #[test]
    fn log_convexity_rejects_zero_energy() {
        let (_, basis) = setup(8);
        let s = energy_series(&basis, &NodeField::zeros(basis.grid()), &[0.0, 0.1]).unwrap();
        assert!(log_convexity_margin(&s).is_err());
    }

    #[test]
    fn monotonicity_holds_for_solutions_and_zero() {
        let (_, basis) = setup(16);
        let mut rng = TestRng::new(23);
        let psi0 = rand_node_field(basis.grid(), &mut rng);
        let s = energy_series(&basis, &psi0, &uniform_times(1.0, 9)).unwrap();
        assert!(gradient_energy_monotonicity(&s));
        let z = energy_series(&basis, &NodeField::zeros(basis.grid()), &[0.0, 1.0]).unwrap();
        assert!(gradient_energy_monotonicity(&z));
    }

    #[test]
    fn monotonicity_detects_a_fake_increasing_series() {
        let fake = EnergySeries {
            times: vec![0.0, 1.0],
            energy: vec![1.0, 2.0],
            first_derivative: vec![0.0, 0.0],
            second_derivative: vec![0.0, 0.0],
        };
        assert!(!gradient_energy_monotonicity(&fake));
    }

    #[test]
    fn chain_single_mode_scalar_substitution() {
        let (_, basis) = setup(8);
        let lam = basis.lambda_min();
        let report = interpolation_chain_check(&basis, &basis.eigenvector(0), 0.0, 0.2).unwrap();
        assert_eq!(report.t3, 0.1);
        // (a) reads lam^(3/2) e^{-lam*0.1} <= lam^(1/2) / 0.1.
        let lhs = lam.powf(1.5) * (-lam * 0.1f64).exp();
        let rhs = lam.sqrt() / 0.1;
        assert!((report.smoothing.lhs - lhs).abs() <= 1e-10 * lhs);
        assert!((report.smoothing.rhs - rhs).abs() <= 1e-10 * rhs);
        assert!(report.all_satisfied());
    }

    #[test]
    fn chain_zero_state_vacuously_satisfied() {
        let (_, basis) = setup(8);
        let report =
            interpolation_chain_check(&basis, &NodeField::zeros(basis.grid()), 0.1, 0.4).unwrap();
        assert!(report.all_satisfied());
    }

    #[test]
    fn chain_random_cases_all_hold() {
        let (_, basis) = setup(16);
        let mut rng = TestRng::new(24);
        for trial in 0..50 {
            let psi0 = rand_node_field(basis.grid(), &mut rng);
            let t1 = 0.3 * (trial as f64 / 50.0);
            let t2 = t1 + 0.05 + 0.4 * ((trial * 7 % 50) as f64 / 50.0);
            let report = interpolation_chain_check(&basis, &psi0, t1, t2).unwrap();
            assert!(report.all_satisfied(), "violation at trial {trial}");
        }
    }

    #[test]
    fn chain_rejects_bad_interval() {
        let (_, basis) = setup(8);
        assert!(interpolation_chain_check(&basis, &basis.eigenvector(0), 0.3, 0.3).is_err());
    }

    #[test]
    fn three_ball_full_region_below_one() {
        let (ops, basis) = setup(16);
        let omega = RegionMask::build(basis.grid(), RegionShape::full_square()).unwrap();
        let mut rng = TestRng::new(25);
        for &alpha in &[0.2, 0.5, 0.8] {
            let u0 = ops.curl(&rand_node_field(basis.grid(), &mut rng)).unwrap();
            let q = three_ball_quotient(&basis, &ops, &u0, 0.1, 0.5, &omega, alpha).unwrap();
            assert!(q <= 1.0 + 1e-12, "Q = {q} for alpha = {alpha}");
        }
    }

    #[test]
    fn three_ball_single_mode_closed_form() {
        let (ops, basis) = setup(8);
        let omega = RegionMask::build(basis.grid(), RegionShape::rect(0.0, 0.5, 0.0, 0.5)).unwrap();
        let lam = basis.lambda_min();
        let u0 = ops.curl(&basis.eigenvector(0)).unwrap();
        let (t1, t2, alpha) = (0.05, 0.3, 0.4);
        let q = three_ball_quotient(&basis, &ops, &u0, t1, t2, &omega, alpha).unwrap();
        let u0_norm = u0.norm_l2(None).unwrap();
        let r = u0.norm_l2(Some(&omega)).unwrap();
        let expected = ((-lam * t2).exp() * u0_norm)
            / (((-lam * t2).exp() * r).powf(alpha)
                * ((-lam * t1).exp() * u0_norm).powf(1.0 - alpha));
        assert!((q - expected).abs() <= 1e-10 * expected);
    }

    #[test]
    fn three_ball_high_modes_away_from_omega_large_but_finite() {
        let (ops, basis) = setup(16);
        // omega in a corner; data on high modes -> weak observation.
        let omega = RegionMask::build(basis.grid(), RegionShape::rect(0.0, 0.2, 0.0, 0.2)).unwrap();
        let m = basis.mode_count();
        let mut coeffs = vec![0.0; m];
        for c in coeffs.iter_mut().skip(m - 12) {
            *c = 1.0;
        }
        let u0 = ops.curl(&basis.synthesize(&coeffs).unwrap()).unwrap();
        let q = three_ball_quotient(&basis, &ops, &u0, 0.0, 0.001, &omega, 0.5).unwrap();
        assert!(q.is_finite() && q > 0.0);
    }

    #[test]
    fn nested_region_monotonicity_of_quotient() {
        let (ops, basis) = setup(16);
        let small = RegionMask::build(basis.grid(), RegionShape::rect(0.0, 0.4, 0.0, 0.4)).unwrap();
        let big = RegionMask::build(basis.grid(), RegionShape::rect(0.0, 0.8, 0.0, 0.8)).unwrap();
        assert!(small.subset_of(&big));
        let mut rng = TestRng::new(26);
        for _ in 0..10 {
            let u0 = ops.curl(&rand_node_field(basis.grid(), &mut rng)).unwrap();
            let q_small = three_ball_quotient(&basis, &ops, &u0, 0.1, 0.4, &small, 0.5).unwrap();
            let q_big = three_ball_quotient(&basis, &ops, &u0, 0.1, 0.4, &big, 0.5).unwrap();
            assert!(q_big <= q_small * (1.0 + 1e-12));
        }
    }

    #[test]
    fn uc_fit_full_region_gives_small_n() {
        let (ops, basis) = setup(16);
        let omega = RegionMask::build(basis.grid(), RegionShape::full_square()).unwrap();
        let samples: Vec<UcSample> = (0..40)
            .map(|k| draw_uc_sample(&basis, &ops, &omega, 1.0, 64, 11, k).unwrap())
            .collect();
        let fit = fit_uc_constants(&samples).unwrap();
        assert!(fit.n_const <= std::f64::consts::E, "N = {}", fit.n_const);
        assert!(fit.alpha > 0.0 && fit.alpha < 1.0);
        assert!(samples.iter().all(|s| fit.satisfies(s)));
    }

    #[test]
    fn uc_fit_single_sample_matches_hand_bisection() {
        let (ops, basis) = setup(8);
        let omega = RegionMask::build(basis.grid(), RegionShape::rect(0.0, 0.5, 0.0, 0.5)).unwrap();
        let lam = basis.lambda_min();
        let u0 = ops.curl(&basis.eigenvector(0)).unwrap();
        let (t1, t2) = (0.1, 0.6);
        let u0_norm = u0.norm_l2(None).unwrap();
        let r_omega = u0.norm_l2(Some(&omega)).unwrap();
        let sample = UcSample {
            seed: 0,
            stream: 0,
            t1,
            t2,
            norm_t1: (-lam * t1).exp() * u0_norm,
            norm_t2: (-lam * t2).exp() * u0_norm,
            obs_t2: (-lam * t2).exp() * r_omega,
        };
        let fit = fit_uc_constants(&[sample]).unwrap();
        // Hand bisection against the same inequality, written directly.
        let holds = |n: f64, alpha: f64| -> bool {
            sample.norm_t2
                <= (n * (n / (t2 - t1)).exp() * sample.obs_t2).powf(alpha)
                    * sample.norm_t1.powf(1.0 - alpha)
        };
        let mut best = f64::INFINITY;
        for step in 1..=19 {
            let alpha = step as f64 * 0.05;
            let (mut lo, mut hi) = (1e-12, 1e6);
            if !holds(hi, alpha) {
                continue;
            }
            if holds(lo, alpha) {
                best = best.min(lo);
                continue;
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if holds(mid, alpha) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            best = best.min(hi);
        }
        assert!(
            (fit.n_const - best).abs() <= 1e-6 * best.max(1e-12),
            "fit N = {} vs hand bisection {}",
            fit.n_const,
            best
        );
    }

    #[test]
    fn uc_fit_excludes_degenerate_samples() {
        let sample = UcSample {
            seed: 0,
            stream: 0,
            t1: 0.0,
            t2: 0.5,
            norm_t1: 1.0,
            norm_t2: 0.5,
            obs_t2: 0.0,
        };
        assert!(matches!(
            fit_uc_constants(&[sample]),
            Err(Error::DegenerateObservation)
        ));
    }

    #[test]
    fn observability_ratio_single_mode_closed_form() {
        let (ops, basis) = setup(8);
        let lam = basis.lambda_min();
        let horizon = 0.8;
        let window = TimeSet::full(horizon).unwrap();
        for shape in [
            RegionShape::rect(0.0, 0.5, 0.0, 0.5),
            RegionShape::full_square(),
        ] {
            let omega = RegionMask::build(basis.grid(), shape).unwrap();
            let v_t = ops.curl(&basis.eigenvector(0)).unwrap();
            let got = observability_ratio(&basis, &ops, &v_t, horizon, &omega, &window).unwrap();
            let r = v_t.norm_l2(Some(&omega)).unwrap();
            let expected = (-lam * horizon).exp() * v_t.norm_l2(None).unwrap()
                / (r * (1.0 - (-lam * horizon).exp()) / lam);
            assert!(
                (got - expected).abs() <= 1e-8 * expected,
                "{got} vs {expected}"
            );
        }
    }

    #[test]
    fn observability_ratio_random_data_is_finite_positive() {
        let (ops, basis) = setup(16);
        let omega = RegionMask::build(basis.grid(), RegionShape::rect(0.2, 0.9, 0.1, 0.7)).unwrap();
        let window = TimeSet::build(&[(0.1, 0.3), (0.5, 0.9)], 1.0).unwrap();
        let mut rng = TestRng::new(27);
        let v_t = ops.curl(&rand_node_field(basis.grid(), &mut rng)).unwrap();
        let ratio = observability_ratio(&basis, &ops, &v_t, 1.0, &omega, &window).unwrap();
        assert!(ratio.is_finite() && ratio > 0.0);
    }

    #[test]
    fn observability_ratio_rejects_zero_terminal_data() {
        let (ops, basis) = setup(8);
        let omega = RegionMask::build(basis.grid(), RegionShape::full_square()).unwrap();
        let window = TimeSet::full(1.0).unwrap();
        let z = VelocityField::zeros(basis.grid());
        assert!(matches!(
            observability_ratio(&basis, &ops, &z, 1.0, &omega, &window),
            Err(Error::DegenerateObservation)
        ));
    }

    #[test]
    fn estimator_m1_matches_single_mode_ratio() {
        let (ops, basis) = setup(8);
        let omega = RegionMask::build(basis.grid(), RegionShape::rect(0.0, 0.6, 0.0, 0.6)).unwrap();
        let window = TimeSet::full(0.5).unwrap();
        let est = estimate_observability_constant(
            &basis,
            &ops,
            0.5,
            &omega,
            &window,
            1,
            ObsSearchSettings {
                starts: 3,
                max_iterations: 50,
                seed: 1,
            },
        )
        .unwrap();
        let v_t = ops.curl(&basis.eigenvector(0)).unwrap();
        let direct = observability_ratio(&basis, &ops, &v_t, 0.5, &omega, &window).unwrap();
        assert!((est.best_ratio - direct).abs() <= 1e-8 * direct);
    }

    #[test]
    fn estimator_full_region_matches_per_mode_maximum() {
        // For omega = Omega the modes decouple; the best single-mode ratio is
        // a floor for the estimate, and the search should land on it.
        let (ops, basis) = setup(8);
        let omega = RegionMask::build(basis.grid(), RegionShape::full_square()).unwrap();
        let horizon = 0.5;
        let window = TimeSet::full(horizon).unwrap();
        let m = 16;
        let mut best_mode = 0.0f64;
        for i in 0..m {
            let v_t = ops.curl(&basis.eigenvector(i)).unwrap();
            let r = observability_ratio(&basis, &ops, &v_t, horizon, &omega, &window).unwrap();
            best_mode = best_mode.max(r);
        }
        let est = estimate_observability_constant(
            &basis,
            &ops,
            horizon,
            &omega,
            &window,
            m,
            ObsSearchSettings {
                starts: 6,
                max_iterations: 200,
                seed: 2,
            },
        )
        .unwrap();
        assert!(
            est.best_ratio >= best_mode * (1.0 - 1e-6),
            "{} < {}",
            est.best_ratio,
            best_mode
        );
    }

    #[test]
    fn ratio_grows_as_window_shrinks_for_fixed_data() {
        let (ops, basis) = setup(8);
        let omega = RegionMask::build(basis.grid(), RegionShape::rect(0.0, 0.5, 0.0, 0.5)).unwrap();
        let mut rng = TestRng::new(28);
        let v_t = ops.curl(&rand_node_field(basis.grid(), &mut rng)).unwrap();
        let mut prev = 0.0;
        for window in [
            TimeSet::build(&[(0.2, 0.9)], 1.0).unwrap(),
            TimeSet::build(&[(0.4, 0.9)], 1.0).unwrap(),
            TimeSet::build(&[(0.6, 0.9)], 1.0).unwrap(),
        ] {
            let r = observability_ratio(&basis, &ops, &v_t, 1.0, &omega, &window).unwrap();
            assert!(r >= prev, "{r} < {prev}");
            prev = r;
        }
    }

    #[test]
    fn estimator_ratio_grows_as_window_shrinks() {
        let (ops, basis) = setup(8);
        let omega = RegionMask::build(basis.grid(), RegionShape::rect(0.0, 0.5, 0.0, 0.5)).unwrap();
        let horizon = 1.0;
        let windows = [
            TimeSet::build(&[(0.5, 0.9)], horizon).unwrap(),
            TimeSet::build(&[(0.6, 0.9)], horizon).unwrap(),
            TimeSet::build(&[(0.7, 0.9)], horizon).unwrap(),
        ];
        let settings = ObsSearchSettings {
            starts: 4,
            max_iterations: 100,
            seed: 3,
        };
        let mut prev = 0.0;
        for w in &windows {
            let est =
                estimate_observability_constant(&basis, &ops, horizon, &omega, w, 8, settings)
                    .unwrap();
            assert!(
                est.best_ratio >= prev * (1.0 - 1e-9),
                "{} < {}",
                est.best_ratio,
                prev
            );
            prev = est.best_ratio;
        }
    }
}
