//! Deterministic RNG substream derivation.
//!
//! All randomness in the crate flows from a single master seed. Independent
//! tasks (chains, simulated cycles, patient-by-draw prediction cells,
//! bootstrap resamples) get their own ChaCha stream derived from the master
//! seed and a task label, so results do not depend on execution order or
//! thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Fixed labels separating the RNG domains of the pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamLabel {
    Simulate,
    Chain,
    Predict,
    Bootstrap,
    Init,
}

impl StreamLabel {
    fn tag(self) -> u64 {
        match self {
            StreamLabel::Simulate => 0x01,
            StreamLabel::Chain => 0x02,
            StreamLabel::Predict => 0x03,
            StreamLabel::Bootstrap => 0x04,
            StreamLabel::Init => 0x05,
        }
    }
}

/// RNG for substream `index` of the given label.
pub fn substream(seed: u64, label: StreamLabel, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // ChaCha exposes 2^64 independent streams per key; partition them by label.
    rng.set_stream(label.tag().wrapping_shl(56) ^ index);
    rng
}

/// Substream keyed by two indices (e.g. patient x draw).
pub fn substream2(seed: u64, label: StreamLabel, a: u64, b: u64) -> ChaCha12Rng {
    // splitmix-style mix so (a, b) pairs never collide for realistic sizes
    let mut x = a.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(b);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    substream(seed, label, x ^ (x >> 31))
}

/// Derive an independent master seed for a tagged sub-task (submodel
/// fits, pipeline stages). Kept within i64 range so seeds survive a
/// round-trip through TOML metadata.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut x = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    (x ^ (x >> 31)) & (i64::MAX as u64)
}
