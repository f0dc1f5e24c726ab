//! Counter-based random streams keyed by (seed, run index, draw index).
//!
//! Each (seed, run) pair selects a ChaCha stream; each draw starts at its own
//! fixed word offset, so a draw's randomness does not depend on how many words
//! earlier draws consumed or on how runs were scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Words reserved per draw; a 256-voxel noise draw uses well under this.
const WORDS_PER_DRAW_LOG2: u32 = 32;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent 64-bit seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ label.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

#[derive(Clone, Debug)]
pub struct RunRng {
    rng: ChaCha8Rng,
}

impl RunRng {
    pub fn new(seed: u64, run: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(run);
        Self { rng }
    }

    /// Generator positioned at the start of draw `draw` of this run.
    pub fn draw(&mut self, draw: u64) -> &mut ChaCha8Rng {
        self.rng
            .set_word_pos(u128::from(draw) << WORDS_PER_DRAW_LOG2);
        &mut self.rng
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn draws_are_position_independent() {
        let mut a = RunRng::new(7, 3);
        let mut b = RunRng::new(7, 3);
        let _: [f64; 17] = a.draw(0).random();
        let x: f64 = a.draw(5).random();
        let y: f64 = b.draw(5).random();
        assert_eq!(x.to_bits(), y.to_bits());
        let z: f64 = RunRng::new(7, 4).draw(5).random();
        assert_ne!(x, z);
    }
}
