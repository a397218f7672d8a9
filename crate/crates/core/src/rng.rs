//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, stream, counter)`, so noise fields
//! can be generated voxel-by-voxel in any order, on any number of threads, and
//! still be bitwise reproducible.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of a (seed, stream, counter) triple.
#[inline]
pub fn hash3(seed: u64, stream: u64, counter: u64) -> u64 {
    let a = mix64(seed.wrapping_add(GOLDEN));
    let b = mix64(a ^ stream.wrapping_mul(GOLDEN).wrapping_add(0x632B_E59B_D9B4_E019));
    mix64(b ^ counter.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(GOLDEN))
}

/// Uniform in the open interval (0, 1).
#[inline]
pub fn uniform(seed: u64, stream: u64, counter: u64) -> f64 {
    ((hash3(seed, stream, counter) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw via Box-Muller on two keyed uniforms.
#[inline]
pub fn normal(seed: u64, stream: u64, counter: u64) -> f64 {
    let u1 = uniform(seed, stream, counter.wrapping_mul(2));
    let u2 = uniform(seed, stream, counter.wrapping_mul(2).wrapping_add(1));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Sequential stream over a fixed key; `next_*` advances the counter.
#[derive(Clone, Debug)]
pub struct CounterRng {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let x = hash3(self.seed, self.stream, self.counter);
        self.counter += 1;
        x
    }

    pub fn next_f64(&mut self) -> f64 {
        let x = uniform(self.seed, self.stream, self.counter);
        self.counter += 1;
        x
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn below(&mut self, n: u64) -> u64 {
        // rejection-free multiply-shift; bias is negligible for n << 2^64
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }
}
