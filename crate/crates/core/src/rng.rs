//! Deterministic random streams.
//!
//! All randomness in the crate flows through [`StreamRng`]: a seedable
//! counter-based generator (ChaCha8) with standard-normal variates produced
//! by Box–Muller on its uniforms. The generator name is recorded in
//! checkpoints so a run can be reproduced bit-for-bit on any platform.
//!
//! Concurrent workers never share a stream; derive one per work item with
//! [`StreamRng::substream`].

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::Real;

/// Identifier stored in checkpoint metadata.
pub const RNG_NAME: &str = "chacha8-boxmuller";

/// Seedable stream of uniforms, normals and Bernoulli masks.
#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
    seed: u64,
    cached_normal: Option<f64>,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        StreamRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
            cached_normal: None,
        }
    }

    /// The seed this stream was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream for work item `index`, independent of any
    /// draws already made from `self`.
    pub fn substream(&self, index: u64) -> StreamRng {
        StreamRng::new(splitmix64(self.seed ^ splitmix64(index.wrapping_add(0x9e37_79b9))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform01(&mut self) -> f64 {
        // 53 high bits -> [0,1) with full double precision.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    /// Standard normal via Box–Muller; pairs are cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // 1 - u in (0, 1] keeps the log argument positive.
        let u1 = 1.0 - self.uniform01();
        let u2 = self.uniform01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_vec<T: Real>(&mut self, n: usize) -> Vec<T> {
        (0..n).map(|_| T::lit(self.normal())).collect()
    }

    /// Bernoulli keep-mask: entries are 1 with probability `keep`, else 0.
    pub fn bernoulli_mask<T: Real>(&mut self, keep: f64, n: usize) -> Vec<T> {
        (0..n)
            .map(|_| if self.uniform01() < keep { T::one() } else { T::zero() })
            .collect()
    }

    /// Uniform in (-bound, bound), used for weight initialisation.
    pub fn uniform_symmetric<T: Real>(&mut self, bound: f64, n: usize) -> Vec<T> {
        (0..n).map(|_| T::lit(self.uniform(-bound, bound))).collect()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
