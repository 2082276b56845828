//! Named deterministic random substreams.
//!
//! Every random draw in a run comes from a ChaCha8 stream keyed by
//! `(seed, purpose, actor, round)`. The key is written verbatim into the
//! 32-byte ChaCha seed, so distinct keys never share a stream and the order in
//! which clients execute cannot change what any of them draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a substream is used for. The discriminant is part of the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    /// Model choice `I_{i,t}` from the selection PMF.
    Select = 1,
    /// Uniform cluster choice `J_{i,t}`.
    Cluster = 2,
    /// Server draw of the uploading group.
    Group = 3,
    /// Synthetic data samples.
    Sample = 4,
    /// Per-client partition schedules (label skew, row orders).
    Partition = 5,
    /// Random subsets drawn by baselines.
    Subset = 6,
    /// Synthetic model dictionaries and generator parameters.
    Dictionary = 7,
}

/// Actor index used for streams that belong to the server or the run as a whole.
pub const SERVER_ACTOR: u64 = u64::MAX;

pub fn substream(seed: u64, purpose: Purpose, actor: u64, round: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&actor.to_le_bytes());
    key[24..32].copy_from_slice(&round.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Handle for one actor's family of substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NamedStream {
    pub seed: u64,
    pub actor: u64,
}

impl NamedStream {
    pub fn new(seed: u64, actor: u64) -> Self {
        Self { seed, actor }
    }

    pub fn at(&self, purpose: Purpose, round: u64) -> ChaCha8Rng {
        substream(self.seed, purpose, self.actor, round)
    }
}

/// Inverse-CDF draw from a probability vector.
///
/// Falls back to the last index with positive mass when rounding leaves the
/// cumulative sum just below the uniform draw.
pub fn draw_index<R: Rng + ?Sized>(pmf: &[f64], rng: &mut R) -> usize {
    debug_assert!(!pmf.is_empty());
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    pmf.iter().rposition(|&p| p > 0.0).unwrap_or(pmf.len() - 1)
}
