//! Deterministic seed hierarchy.
//!
//! Every stochastic source (weight init, phantom generation, augmentation
//! draws, shuffling) asks a [`SeedTree`] for a child stream keyed by a label
//! and optional indices. Child seeds are pure functions of the path from the
//! root, so adding a new consumer never shifts the streams of existing ones,
//! and parallel workers can derive their streams without coordination.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

static GLOBAL_ROOT: AtomicU64 = AtomicU64::new(0);

/// Set the process-wide root seed returned by [`SeedTree::global`].
///
/// Call once before any parallel work starts.
pub fn seed_all(seed: u64) {
    GLOBAL_ROOT.store(seed, Ordering::SeqCst);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree {
    state: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self {
            state: splitmix64(seed),
        }
    }

    /// Root derived from the value passed to [`seed_all`].
    pub fn global() -> Self {
        Self::new(GLOBAL_ROOT.load(Ordering::SeqCst))
    }

    pub fn child(&self, label: &str) -> Self {
        Self {
            state: splitmix64(self.state ^ fnv1a(label).rotate_left(17)),
        }
    }

    pub fn index(&self, i: u64) -> Self {
        Self {
            state: splitmix64(self.state.wrapping_add(splitmix64(i ^ 0xA5A5_A5A5_5A5A_5A5A))),
        }
    }

    pub fn seed(&self) -> u64 {
        self.state
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.state)
    }
}
