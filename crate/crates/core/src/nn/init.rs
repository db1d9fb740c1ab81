//! Seeded, platform-independent parameter initialization.
//!
//! All random draws come from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with a
//! 64-bit seed. Normal deviates use the Box–Muller transform on 53-bit
//! uniforms, producing values in pairs and filling arrays in row-major order.
//! The sequence is therefore fully specified by (seed, shape) and can be
//! reproduced by any implementation of ChaCha8.

use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mat::Mat;
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// `N(0, 1/fan_in)` where `fan_in` is the row count.
    NormalScaled,
    Zeros,
    Ones,
}

impl FromStr for InitScheme {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal_scaled" => Ok(InitScheme::NormalScaled),
            "zeros" => Ok(InitScheme::Zeros),
            "ones" => Ok(InitScheme::Ones),
            other => Err(NnError::UnknownInitScheme(other.to_string())),
        }
    }
}

pub fn seeded_init(rows: usize, cols: usize, seed: u64, scheme: InitScheme) -> Mat {
    match scheme {
        InitScheme::Zeros => Mat::zeros(rows, cols),
        InitScheme::Ones => Mat::from_vec(rows, cols, vec![1.0; rows * cols]),
        InitScheme::NormalScaled => seeded_normal(rows, cols, seed, 1.0 / (rows.max(1) as f64).sqrt()),
    }
}

/// `N(0, std²)` entries.
pub fn seeded_normal(rows: usize, cols: usize, seed: u64, std: f64) -> Mat {
    let mut rng = NormalStream::new(seed);
    let data = (0..rows * cols).map(|_| rng.next() * std).collect();
    Mat::from_vec(rows, cols, data)
}

/// Box–Muller standard normals over ChaCha8.
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        unit_uniform(&mut self.rng)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - unit_uniform(&mut self.rng);
        let u2 = unit_uniform(&mut self.rng);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Uniform in `[0, 1)` with 53 random bits.
pub fn unit_uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Mixes a base seed with a parameter path so every parameter gets an
/// independent stream that does not shift when other parameters are added.
pub fn derive_seed(base: u64, name: &str) -> u64 {
    // FNV-1a over the name, then splitmix64 finalization.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h ^ splitmix64(base))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_scheme() {
        assert!(seeded_init(3, 4, 9, InitScheme::Zeros).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = seeded_init(5, 7, 42, InitScheme::NormalScaled);
        let b = seeded_init(5, 7, 42, InitScheme::NormalScaled);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn different_seeds_differ() {
        let a = seeded_init(5, 7, 1, InitScheme::NormalScaled);
        let b = seeded_init(5, 7, 2, InitScheme::NormalScaled);
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn unknown_scheme_is_rejected() {
        assert!(matches!("xavier".parse::<InitScheme>(), Err(NnError::UnknownInitScheme(_))));
        assert_eq!("ones".parse::<InitScheme>().unwrap(), InitScheme::Ones);
    }

    #[test]
    fn normal_moments_are_plausible() {
        let m = seeded_normal(1, 20000, 7, 1.0);
        let n = m.len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn derived_seeds_are_name_sensitive() {
        assert_ne!(derive_seed(0, "a.w"), derive_seed(0, "a.b"));
        assert_ne!(derive_seed(0, "a.w"), derive_seed(1, "a.w"));
    }
}
