//! Seeded, hierarchically derived random streams.
//!
//! Every stochastic choice in the crate (initialization, dropout, masking,
//! data generation) draws from a [`Stream`] derived from one master seed by
//! a path of labels and indices, so results never depend on call order
//! across unrelated consumers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A named position in the seed tree. Cheap to copy; call [`Stream::rng`]
/// to obtain the underlying counter-based generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Stream {
    key: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream {
            key: splitmix64(seed),
        }
    }

    /// Child stream identified by a label.
    pub fn derive(&self, label: &str) -> Self {
        Stream {
            key: splitmix64(self.key ^ fnv1a(label.as_bytes()).rotate_left(17)),
        }
    }

    /// Child stream identified by an integer (exemplar index, step, ...).
    pub fn index(&self, i: u64) -> Self {
        Stream {
            key: splitmix64(self.key.wrapping_add(splitmix64(i ^ 0xA5A5_5A5A_C3C3_3C3C))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut k = self.key;
        for chunk in seed.chunks_mut(8) {
            k = splitmix64(k);
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
