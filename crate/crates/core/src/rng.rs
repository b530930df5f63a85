//! Seeded, splittable random streams.
//!
//! Every consumer of randomness asks a [`SeedTree`] for a stream by name (and
//! optionally an index). A stream's state depends only on the master seed and
//! the path of names that led to it, so consuming one stream never perturbs
//! another and results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A node in a tree of derived seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedTree {
    key: u64,
}

impl SeedTree {
    pub fn new(master_seed: u64) -> Self {
        SeedTree {
            key: splitmix64(master_seed),
        }
    }

    pub fn child(&self, name: &str) -> SeedTree {
        SeedTree {
            key: splitmix64(self.key ^ splitmix64(fnv1a(name.as_bytes()))),
        }
    }

    pub fn indexed(&self, name: &str, index: u64) -> SeedTree {
        let c = self.child(name);
        SeedTree {
            key: splitmix64(c.key ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    pub fn rng(&self) -> StreamRng {
        let mut seed = [0u8; 32];
        let mut k = self.key;
        for chunk in seed.chunks_mut(8) {
            k = splitmix64(k);
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        self.child(name).rng()
    }

    pub fn indexed_stream(&self, name: &str, index: u64) -> StreamRng {
        self.indexed(name, index).rng()
    }

    /// 64-bit hash value of this node; useful for stable hash-based splits.
    pub fn key(&self) -> u64 {
        self.key
    }
}

/// Stable 64-bit mixing of a seed and an index.
pub fn hash_index(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}
