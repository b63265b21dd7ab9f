//! Counter-derived random substreams.
//!
//! Every random stream used by the engine is identified by a path of
//! integers (run seed, domain tag, cell coordinates, replication indices).
//! The path is folded through a SplitMix64 finaliser into a 256-bit ChaCha8
//! key, so a stream depends only on its path and never on the order in
//! which worker threads happen to request it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator type handed to every sampling routine.
pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A position in the tree of substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(splitmix64(seed ^ 0x6A09_E667_F3BC_C908))
    }

    /// Child key for one more path component.
    pub fn child(self, index: u64) -> Self {
        StreamKey(splitmix64(self.0 ^ splitmix64(index.wrapping_add(0x3C6E_F372_FE94_F82B))))
    }

    pub fn path(self, indices: &[u64]) -> Self {
        indices.iter().fold(self, |k, &i| k.child(i))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> StreamRng {
        let mut seed = [0u8; 32];
        let mut state = self.0;
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
