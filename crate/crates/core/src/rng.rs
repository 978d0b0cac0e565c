//! Seed derivation. Every random draw in the crate comes from a ChaCha stream keyed by
//! `(root seed, purpose tag, coordinates)`, so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep streams for different consumers disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Scene,
    ModelInit,
    BatchOrder,
    Sampler,
    Gradcheck,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Scene => 0x5343_454e,
            Purpose::ModelInit => 0x4d4f_444c,
            Purpose::BatchOrder => 0x4241_5443,
            Purpose::Sampler => 0x5341_4d50,
            Purpose::Gradcheck => 0x4752_4144,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, purpose: Purpose, coords: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ splitmix64(purpose.tag()));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x2545_f491_4f6c_dd1d)));
    }
    h
}

pub fn stream(root: u64, purpose: Purpose, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, purpose, coords))
}

/// RNG coordinates for one invocation of the negative sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerRng {
    pub seed: u64,
    pub scene: u64,
    pub iteration: u64,
    pub branch: u64,
    pub class: u64,
}

impl SamplerRng {
    pub fn rng(&self) -> ChaCha8Rng {
        stream(
            self.seed,
            Purpose::Sampler,
            &[self.scene, self.iteration, self.branch, self.class],
        )
    }
}
