//! Seedable, stream-splittable random sources and the samplers the Gibbs
//! engine draws from: truncated normals, Polya-Gamma variates, gamma/beta,
//! and precision-parameterized Gaussians.

mod mvn;
mod polya_gamma;
pub mod reference;
mod truncnorm;

pub use mvn::{sample_mvn_precision, PrecisionSampler, MAX_MVN_DIM};
pub use polya_gamma::sample_polya_gamma;
pub use truncnorm::{sample_truncated_normal, std_normal_cdf, std_normal_quantile, std_normal_sf, TAIL_SWITCH};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DistError {
    #[error("empty truncation interval [{lower}, {upper})")]
    EmptyInterval { lower: String, upper: String },
    #[error("precision matrix of dimension {dim} is not positive definite")]
    NotPositiveDefinite { dim: usize },
    #[error("dimension {dim} exceeds the sampler cap {cap}")]
    DimTooLarge { dim: usize, cap: usize },
}

/// One logical random stream. Identical `(seed, stream_id)` pairs reproduce
/// identical draw sequences on every platform with IEEE-754 doubles, and
/// distinct stream ids are independent, so parallel workers may each own one.
#[derive(Debug, Clone)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut state = seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random(self)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a tag; used to give each
/// scenario/replicate/method its own independent seed space.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut t = tag.wrapping_add(0xA076_1D64_78BD_642F);
    let mut state = seed ^ splitmix64(&mut t);
    splitmix64(&mut state)
}

/// Half-open interval for truncated sampling; either endpoint may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncInterval {
    pub lower: f64,
    pub upper: f64,
}

impl TruncInterval {
    pub fn new(lower: f64, upper: f64) -> Result<Self, DistError> {
        if !(lower < upper) {
            return Err(DistError::EmptyInterval {
                lower: lower.to_string(),
                upper: upper.to_string(),
            });
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded() -> Self {
        Self {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }
}

/// Gamma draw parameterized by shape and *rate* (mean shape/rate).
pub fn sample_gamma(shape: f64, rate: f64, rng: &mut RngStream) -> f64 {
    debug_assert!(shape > 0.0 && rate > 0.0);
    rand_distr::Gamma::new(shape, 1.0 / rate)
        .expect("valid gamma parameters")
        .sample(rng)
}

/// Beta draw with mean a/(a+b).
pub fn sample_beta(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    debug_assert!(a > 0.0 && b > 0.0);
    rand_distr::Beta::new(a, b)
        .expect("valid beta parameters")
        .sample(rng)
}
