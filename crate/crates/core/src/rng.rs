//! Seeded random streams used by treatment assignment and the simulation
//! engine.
//!
//! Streams are ChaCha8 counter-based: a 64-bit master seed expands to the
//! cipher key and the 64-bit stream id selects an independent substream, so
//! per-replication streams can be opened in any order by parallel workers
//! without sharing state.
//!
//! Variates are derived from the stream so that other implementations can
//! match distributions (not bit streams):
//!
//! * `uniform` maps the next 64-bit word to `(w >> 11 + 0.5) * 2^-53`,
//!   a uniform draw strictly inside (0, 1);
//! * `standard_normal` applies the inverse normal CDF to `uniform`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::normal::normal_quantile;

/// Opens substream `stream` of the generator keyed by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw on the open interval (0, 1), 53-bit resolution.
#[inline]
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    const SCALE: f64 = 1.0 / 9007199254740992.0; // 2^-53
    ((rng.next_u64() >> 11) as f64 + 0.5) * SCALE
}

/// Standard normal draw via the inverse-CDF method.
#[inline]
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    normal_quantile(uniform(rng))
}
