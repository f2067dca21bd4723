//! Named, reproducible random streams.

use alloc::format;
use alloc::string::String;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A `(seed, stream_id)` pair. The same pair always yields the same draws;
/// different labels select different ChaCha streams under the same key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: String,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: impl Into<String>) -> Self {
        RngStream {
            seed,
            stream_id: stream_id.into(),
        }
    }

    /// Stream for worker `index` under label `label`, e.g. `data/agent-3`.
    pub fn indexed(seed: u64, label: &str, index: usize) -> Self {
        RngStream::new(seed, format!("{label}/agent-{index}"))
    }

    pub fn child(&self, suffix: &str) -> Self {
        RngStream::new(self.seed, format!("{}/{suffix}", self.stream_id))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a64(self.stream_id.as_bytes()));
        rng
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
