//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, counter)`, so a stream can be
//! reconstructed from its state alone and independent streams never perturb
//! each other. Streams are derived from a root seed plus a name, which keeps
//! data loading, noise, and dropout decoupled: drawing more from one stream
//! does not shift any other.

/// A seekable random stream. Identical `(seed, counter)` produce identical
/// draws on every platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub counter: u64,
}

const GOLDEN: u64 = 0x9e3779b97f4a7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    /// Derive a named substream. The name is folded into the seed so
    /// `derive("noise")` and `derive("sigma")` are decorrelated.
    pub fn derive(root_seed: u64, name: &str) -> Self {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in name.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        RngStream::new(mix(root_seed ^ h.wrapping_mul(GOLDEN)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let z = mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)).wrapping_add(GOLDEN));
        self.counter += 1;
        z
    }

    /// Uniform draw in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        // 53 high bits -> [0,1) with full double precision.
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller. Consumes exactly two uniforms per
    /// draw so the counter advances by a fixed amount.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }
}
