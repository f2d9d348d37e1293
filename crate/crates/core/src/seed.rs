//! Reproducible random streams.
//!
//! A [`SeedStream`] is a (master seed, stream index) pair. The two are mixed
//! through the splitmix64 finalizer and the result seeds a ChaCha8 generator,
//! so every purpose-scoped stream is independent of the order in which other
//! streams are consumed. Nested streams are built with [`SeedStream::child`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedStream {
    pub master: u64,
    pub index: u64,
}

impl SeedStream {
    pub fn new(master: u64, index: u64) -> Self {
        Self { master, index }
    }

    /// Derives a sub-stream; the child's master is the mixed key of `self`.
    pub fn child(&self, index: u64) -> Self {
        Self {
            master: self.key(),
            index,
        }
    }

    pub fn key(&self) -> u64 {
        splitmix64(splitmix64(self.master) ^ self.index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key())
    }
}

/// Fixed stream indices for the top-level purposes of a run.
pub mod purpose {
    pub const TASK_POOL: u64 = 1;
    pub const INIT: u64 = 2;
    pub const MIXUP: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const TEST: u64 = 5;
    pub const MONITOR: u64 = 6;
    pub const RADEMACHER: u64 = 7;
    pub const SYNTH: u64 = 8;
}
