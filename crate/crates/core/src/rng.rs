//! Counter-based random streams.
//!
//! Every random decision in a run is drawn from a ChaCha stream addressed by
//! a `(domain, key, stream)` triple derived from the master seed. Work items
//! never share a stream, so results do not depend on how the work is split
//! across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams for different purposes disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Normalization-subset draws, keyed by detector iteration.
    Subsets,
    /// Synthetic count generation, keyed by replicate.
    Counts,
    /// Per-replicate detector seeds inside experiments.
    Replicates,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Subsets => 0x5375_6273_6574_7321,
            Domain::Counts => 0x436f_756e_7473_2121,
            Domain::Replicates => 0x5265_706c_6963_6174,
        }
    }
}

/// SplitMix64 finalizer, used only to spread seed material.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from a master seed and an index.
pub fn derive_seed(master: u64, domain: Domain, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ domain.tag()).wrapping_add(splitmix64(index)))
}

/// Open the stream `stream` of the key `(master, domain, key)`.
pub fn stream(master: u64, domain: Domain, key: u64, stream: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    let mut state = derive_seed(master, domain, key);
    for chunk in seed.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng
}
