//! Seedable xoshiro256** generator used for all initialization and sampling.
//!
//! Hand-rolled so that streams are bit-stable across platforms and crate
//! upgrades; reproducibility of checkpoints depends on it.

/// xoshiro256** by Blackman and Vigna, seeded through splitmix64.
#[derive(Clone, Debug)]
pub struct Rng {
    state: [u64; 4],
}

fn splitmix64(seed: &mut u64) -> u64 {
    *seed = seed.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *seed;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut s = seed;
        Rng {
            state: [
                splitmix64(&mut s),
                splitmix64(&mut s),
                splitmix64(&mut s),
                splitmix64(&mut s),
            ],
        }
    }

    /// Derives an independent named stream from a root seed. Streams with
    /// different tags never collide for practical purposes, which lets every
    /// subsystem (corpus, init, batching, probes) own its own generator.
    pub fn stream(root_seed: u64, tags: &[u64]) -> Self {
        let mut s = root_seed;
        let mut acc = splitmix64(&mut s);
        for &t in tags {
            let mut mixer = acc ^ t.wrapping_mul(0x9e3779b97f4a7c15);
            acc = splitmix64(&mut mixer);
        }
        Rng::seed_from_u64(acc)
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1); safe as a log/Box-Muller argument.
    pub fn open_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) via 128-bit multiply.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch only, kept stateless).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.open_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fills a buffer with N(0, std^2) samples.
    pub fn fill_normal(&mut self, out: &mut [f64], std: f64) {
        for v in out.iter_mut() {
            *v = self.normal() * std;
        }
    }
}
