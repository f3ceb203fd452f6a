//! Seeded random data for experiments.
//!
//! Every sample gets its own counter-derived RNG stream, so batches produce
//! identical data whether they are evaluated serially or in parallel and
//! regardless of evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::grid::{NodeField, VelocityField};
use crate::ops::OperatorSet;
use crate::spectral::EigenBasis;

/// RNG for stream `stream` of master seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// I.i.d. standard-normal coefficients over the first `m` modes.
pub fn normal_mode_coefficients(seed: u64, stream: u64, m: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, stream);
    (0..m).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random stream function spanned by the first `m` eigenmodes.
pub fn random_stream_field(
    basis: &EigenBasis,
    seed: u64,
    stream: u64,
    m: usize,
) -> Result<NodeField> {
    let m = m.min(basis.mode_count());
    let coeffs = normal_mode_coefficients(seed, stream, m);
    basis.synthesize(&coeffs)
}

/// Random divergence-free velocity spanned by the first `m` stream modes.
pub fn random_velocity(
    basis: &EigenBasis,
    ops: &OperatorSet,
    seed: u64,
    stream: u64,
    m: usize,
) -> Result<VelocityField> {
    ops.curl(&random_stream_field(basis, seed, stream, m)?)
}

/// Default mode cutoff for random initial data.
pub fn default_mode_cutoff(basis: &EigenBasis) -> usize {
    basis.mode_count().min(64)
}
