//! Seedable PRNG used by every randomized operation in the crate.
//!
//! The generator is SplitMix64: `state += 0x9E3779B97F4A7C15`, then two
//! xor-shift-multiply mixing rounds. It is a handful of integer ops that any
//! language can reproduce bit-for-bit, so masks, shuffles, and trials are
//! reproducible across platforms given the same seed. Derived quantities are
//! pinned here too: floats take the top 53 bits, bounded integers use the
//! multiply-shift reduction, Gaussians come from Box-Muller.

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` via the multiply-shift reduction.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller; one draw consumes two uniforms.
    pub fn gaussian(&mut self) -> f64 {
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Unit-rate exponential.
    pub fn exponential(&mut self) -> f64 {
        let u = 1.0 - self.next_f64();
        -u.ln()
    }

    /// Symmetric Dirichlet(1) draw: normalized unit exponentials.
    pub fn dirichlet(&mut self, n: usize) -> Vec<f64> {
        let mut draws: Vec<f64> = (0..n).map(|_| self.exponential()).collect();
        let total: f64 = draws.iter().sum();
        for d in &mut draws {
            *d /= total;
        }
        draws
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct elements of `pool`, sampled uniformly without
    /// replacement (partial Fisher-Yates), returned in ascending order.
    pub fn sample_without_replacement(&mut self, pool: &[usize], k: usize) -> Vec<usize> {
        assert!(k <= pool.len(), "sample size exceeds pool");
        let mut pool = pool.to_vec();
        for i in 0..k {
            let j = i + self.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool.sort_unstable();
        pool
    }

    /// Child generator with a state decorrelated from the parent stream.
    pub fn split(&mut self) -> SplitMix64 {
        SplitMix64::new(self.next_u64())
    }
}
