//! Splittable counter-based random number generator.
//!
//! Every command in this workspace funnels its randomness through a single
//! seed, expanded into independent substreams with [`Rng::split`]. A stream is
//! a pure function of `(key, counter)`, so results never depend on thread
//! scheduling or on how much randomness a sibling stream consumed: give the
//! dataset builder, the trainer, and each sampling draw their own stream and
//! each is reproducible in isolation.
//!
//! The generator is the SplitMix64 finalizer applied to a keyed counter. That
//! is plenty for simulation-grade use here (it passes basic equidistribution
//! smoke tests); it is not a cryptographic generator.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: a bijective avalanche mix on 64 bits.
#[inline]
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator with cheap, collision-resistant splitting.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    ctr: u64,
}

impl Rng {
    /// Root stream for a seed.
    pub fn new(seed: u64) -> Self {
        Rng { key: mix(seed ^ GOLDEN), ctr: 0 }
    }

    /// Derives an independent child stream.
    ///
    /// Splitting depends only on the parent's key and the stream id — not on
    /// how many values the parent has produced — so `split` can be called on
    /// a shared `&Rng` from anywhere (including in parallel) and the result
    /// is always the same stream.
    pub fn split(&self, stream: u64) -> Rng {
        Rng { key: mix(self.key ^ mix(stream.wrapping_add(GOLDEN))), ctr: 0 }
    }

    /// Next raw 64-bit value.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.ctr = self.ctr.wrapping_add(1);
        mix(self.key.wrapping_add(self.ctr.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, n)` without modulo bias. `n` must be nonzero.
    pub fn gen_range(&mut self, n: u64) -> u64 {
        assert!(n > 0, "gen_range requires n > 0");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn range_u32(&mut self, lo: u32, hi: u32) -> u32 {
        assert!(lo <= hi, "range_u32 requires lo <= hi");
        lo + self.gen_range(u64::from(hi - lo) + 1) as u32
    }

    /// Uniform float in `[lo, hi)`.
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box–Muller (two uniforms per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.gen_range(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
