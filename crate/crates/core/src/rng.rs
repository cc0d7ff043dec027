//! Counter-based noise.
//!
//! Every Gaussian variate is a pure function of `(seed, index)`: the index is
//! pushed through the splitmix64 finalizer and the resulting uniform is mapped
//! through the inverse normal CDF. Paths therefore never share generator
//! state, and an ensemble is bitwise identical whatever the thread count.

use statrs::distribution::{ContinuousCDF, Normal};

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// The splitmix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of path `k` in an ensemble with base seed `base`.
pub fn derive_seed(base: u64, k: u64) -> u64 {
    mix64(base.wrapping_add(GOLDEN_GAMMA.wrapping_mul(k.wrapping_add(1))))
}

/// A stream of standard normals addressed by index.
#[derive(Debug, Clone, Copy)]
pub struct NormalStream {
    key: u64,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self { key: mix64(seed ^ 0x5851_f42d_4c95_7f2d) }
    }

    /// Uniform in the open interval (0, 1) with 53 random bits.
    pub fn uniform_at(&self, index: u64) -> f64 {
        let bits = mix64(self.key.wrapping_add(GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1))));
        ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal_at(&self, index: u64) -> f64 {
        standard_normal().inverse_cdf(self.uniform_at(index))
    }
}

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Sequential uniform draws from a counter stream, for sampling points.
#[derive(Debug, Clone)]
pub struct UniformSampler {
    stream: NormalStream,
    counter: u64,
}

impl UniformSampler {
    pub fn new(seed: u64) -> Self {
        Self { stream: NormalStream::new(seed), counter: 0 }
    }

    pub fn next_f64(&mut self) -> f64 {
        let v = self.stream.uniform_at(self.counter);
        self.counter += 1;
        v
    }

    pub fn in_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

/// Wiener increments, row-major `steps x d`, each N(0, dt).
pub fn wiener_increments(seed: u64, steps: usize, d: usize, dt: f64) -> Vec<f64> {
    assert!(dt > 0.0, "dt must be positive");
    let stream = NormalStream::new(seed);
    let scale = dt.sqrt();
    (0..steps * d).map(|i| scale * stream.normal_at(i as u64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increments_are_deterministic() {
        let a = wiener_increments(7, 4, 2, 0.01);
        let b = wiener_increments(7, 4, 2, 0.01);
        assert_eq!(a.len(), 8);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a, wiener_increments(8, 4, 2, 0.01));
    }

    #[test]
    fn increment_moments() {
        let dt = 1e-3;
        let n = 1_000_000;
        let w = wiener_increments(2024, n, 1, dt);
        let mean = w.iter().sum::<f64>() / n as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // 4-sigma CLT bound on the mean
        assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt(), "mean {mean}");
        assert!((var / dt - 1.0).abs() < 0.01, "variance ratio {}", var / dt);
    }

    #[test]
    fn uniforms_stay_open() {
        let s = NormalStream::new(0);
        for i in 0..10_000 {
            let u = s.uniform_at(i);
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|k| derive_seed(42, k)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
