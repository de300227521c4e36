//! Deterministic seed derivation, so every random stream in a run is a pure
//! function of the run seed and the stream's coordinates.

use crate::pyramid::splitmix;

/// Mixes `parts` into `base`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}
