//! Seeded random streams.
//!
//! Every augmented item owns one `(seed, stream_id)` pair so items can be
//! produced in any order, or in parallel, with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Child stream keyed by two indices; distinct `(a, b)` give distinct ids.
    pub fn derive(&self, a: u64, b: u64) -> RngStream {
        let id = splitmix(splitmix(self.stream_id ^ 0xA5A5_5A5A_C3C3_3C3C) ^ a);
        let id = splitmix(id ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        RngStream::new(self.seed, id)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
