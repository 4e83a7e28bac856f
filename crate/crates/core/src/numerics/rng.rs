use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded, portable random stream. The position is the ChaCha word counter,
/// so a stream can be re-opened exactly where it left off.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Re-open a stream at a previously recorded position.
    pub fn at_position(seed: u64, position: u128) -> Self {
        let mut s = Self::new(seed);
        s.rng.set_word_pos(position);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Independent child stream keyed by `tag`; does not advance `self`.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(tag)))
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Uniform integer in [lo, hi].
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Geometric count on {0, 1, ...} with success probability `p`.
    pub fn geometric(&mut self, p: f64) -> u64 {
        let u = 1.0 - self.uniform();
        (u.ln() / (1.0 - p).ln()).floor() as u64
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let mut a = RngStream::new(7);
        let mut b = RngStream::new(7);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn position_resumes_stream() {
        let mut a = RngStream::new(11);
        for _ in 0..37 {
            a.uniform();
        }
        let mut b = RngStream::at_position(11, a.position());
        for _ in 0..20 {
            assert_eq!(a.below(1000), b.below(1000));
        }
    }

    #[test]
    fn derived_streams_differ() {
        let root = RngStream::new(3);
        let mut x = root.derive(1);
        let mut y = root.derive(2);
        assert_ne!(x.uniform(), y.uniform());
    }
}
