//! Small numeric helpers shared across modules.

/// Neumaier-compensated sum. Deterministic (fixed order) and accurate enough
/// that roundoff in the discrete identities stays near machine precision.
pub(crate) fn csum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Compensated dot product of equal-length slices.
pub(crate) fn cdot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    csum(a.iter().zip(b).map(|(x, y)| x * y))
}

/// Scale guard for relative residuals: anything below this is treated as an
/// exact zero so degenerate cases report 0 instead of 0/0 noise.
pub(crate) const TINY: f64 = 1e-300;

/// `num / den`, or 0 when the denominator is below the degenerate-scale guard.
pub(crate) fn guarded_div(num: f64, den: f64) -> f64 {
    if den.abs() < TINY {
        0.0
    } else {
        num / den
    }
}
