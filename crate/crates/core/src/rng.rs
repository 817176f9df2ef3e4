//! Seedable random streams.
//!
//! Every stochastic routine takes a [`SeedStream`] rather than a live
//! generator. Independent sub-tasks (one partition, one projection, one
//! column block) derive their own child stream by index, so results do not
//! depend on the order in which sub-tasks are executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    key: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self {
            key: splitmix64(seed),
        }
    }

    /// Child stream `index`; distinct indices give statistically independent streams.
    pub fn child(&self, index: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019))),
        }
    }

    /// Child stream keyed by a label, for named sub-tasks.
    pub fn named(&self, label: &str) -> Self {
        let h = label
            .bytes()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3));
        self.child(h)
    }

    pub fn rng(&self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
