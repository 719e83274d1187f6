//! Counter-based random streams.
//!
//! Every random draw in a run is addressed by `(seed, purpose, step, index, block)`.
//! A fresh ChaCha8 generator is keyed from that tuple, so a draw never depends
//! on how work is split across threads or on the order particles are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Prior = 1,
    StepNoise = 2,
    Renoise = 3,
    EpsilonNoise = 4,
    Trajectory = 5,
    Proposal = 6,
    Projection = 7,
    Sample = 8,
    Test = 9,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub step: u64,
    pub index: u64,
    pub block: u32,
    pub sub: u32,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose, step: u64, index: u64) -> Self {
        Self {
            seed,
            purpose,
            step,
            index,
            block: 0,
            sub: 0,
        }
    }

    pub fn with_block(mut self, block: u32) -> Self {
        self.block = block;
        self
    }

    pub fn with_sub(mut self, sub: u32) -> Self {
        self.sub = sub;
        self
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let words = [
            splitmix64(self.seed ^ 0x5DEE_CE66_D1CE_4E5B),
            splitmix64((self.purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ self.step),
            splitmix64(self.index ^ 0xD6E8_FEB8_6659_FD93),
            splitmix64(
                (u64::from(self.block) | (u64::from(self.sub) << 32))
                    ^ self.step.rotate_left(29)
                    ^ self.seed.rotate_left(17),
            ),
        ];
        let mut bytes = [0u8; 32];
        for (chunk, w) in bytes.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        ChaCha8Rng::from_seed(bytes)
    }

    /// Fills `out` with independent standard normal draws.
    pub fn fill_normal(&self, out: &mut [f64]) {
        let mut rng = self.rng();
        for v in out.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
    }

    pub fn normal_vec(&self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        self.fill_normal(&mut v);
        v
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
