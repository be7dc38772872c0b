//! splitmix64 stream and the derived uniform / Gaussian draws.
//!
//! Every random quantity in the simulator (weights, initial noise, condition
//! vectors, stress-mode jitter) comes from this generator so runs are portable
//! and reproducible.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Stream for parameter `param` of layer `layer` under a model seed.
    pub fn for_param(seed: u64, layer: usize, param: usize) -> Self {
        let key = ((layer as u64) << 32) | (param as u64 & 0xFFFF_FFFF);
        Self::new(mix64(seed ^ key))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [-scale, scale).
    pub fn next_symmetric(&mut self, scale: f64) -> f64 {
        (2.0 * self.next_f64() - 1.0) * scale
    }

    /// A pair of independent standard normals (Box-Muller).
    pub fn next_gaussian_pair(&mut self) -> (f64, f64) {
        // (0, 1] keeps the logarithm finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// `count` standard normals, consuming pairs in order.
    pub fn gaussians(&mut self, count: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(count + 1);
        while out.len() < count {
            let (a, b) = self.next_gaussian_pair();
            out.push(a);
            out.push(b);
        }
        out.truncate(count);
        out
    }
}
