//! Truncated normal sampling.
//!
//! Central intervals go through the inverse CDF; one-sided truncation beyond
//! [`TAIL_SWITCH`] standard deviations uses the shifted-exponential rejection
//! of the tail-sampling literature, and far two-sided intervals switch between
//! that and a uniform proposal depending on their width. All acceptance tests
//! run in log space, so intervals dozens of deviations out remain exact.

use super::{DistError, RngStream, TruncInterval};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};
use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

/// Standardized bound beyond which one-sided sampling switches from the
/// inverse CDF to tail rejection.
pub const TAIL_SWITCH: f64 = 3.0;

/// For a two-sided tail interval (a, b), `a * (b - a)` below this constant
/// selects the uniform proposal instead of the shifted exponential.
const NARROW_TAIL: f64 = 1.0;

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal survival function, accurate in the upper tail.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Standard normal quantile function.
pub fn std_normal_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Draws from N(mean, variance) restricted to `iv`. The result lies strictly
/// inside the interval.
pub fn sample_truncated_normal(
    mean: f64,
    variance: f64,
    iv: TruncInterval,
    rng: &mut RngStream,
) -> Result<f64, DistError> {
    assert!(variance > 0.0, "variance must be positive");
    if !(iv.lower < iv.upper) {
        return Err(DistError::EmptyInterval {
            lower: iv.lower.to_string(),
            upper: iv.upper.to_string(),
        });
    }
    let sd = variance.sqrt();
    let a = (iv.lower - mean) / sd;
    let b = (iv.upper - mean) / sd;
    let z = sample_standard(a, b, rng);
    let x = mean + sd * z;
    Ok(clamp_strict(x, iv.lower, iv.upper))
}

/// Nudges x strictly inside (lower, upper); the interval is non-empty so at
/// least one representable value separates the bounds or the midpoint does.
fn clamp_strict(x: f64, lower: f64, upper: f64) -> f64 {
    let mut x = x;
    if x <= lower {
        x = if lower.is_finite() {
            f64::from_bits(lower.to_bits() + 1)
        } else {
            upper - 1.0
        };
    }
    if x >= upper {
        x = if upper.is_finite() {
            next_down(upper)
        } else {
            lower + 1.0
        };
    }
    if x <= lower {
        // Bounds are adjacent representables; return the midpoint side closest
        // to mass. Degenerate but non-empty by construction.
        x = lower.max(next_down(upper));
    }
    x
}

fn next_down(x: f64) -> f64 {
    if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else if x < 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        -f64::MIN_POSITIVE
    }
}

/// Plain rejection attempts before falling back to the exact routers; the
/// fallback conditional on rejection leaves the distribution exact.
const REJECTION_ATTEMPTS: usize = 4;

fn sample_standard(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    match (a == f64::NEG_INFINITY, b == f64::INFINITY) {
        (true, true) => rng.sample(StandardNormal),
        (false, true) => {
            if a <= 0.5 {
                for _ in 0..REJECTION_ATTEMPTS {
                    let g: f64 = rng.sample(StandardNormal);
                    if g > a {
                        return g;
                    }
                }
            }
            sample_above(a, rng)
        }
        (true, false) => {
            if b >= -0.5 {
                for _ in 0..REJECTION_ATTEMPTS {
                    let g: f64 = rng.sample(StandardNormal);
                    if g < b {
                        return g;
                    }
                }
            }
            -sample_above(-b, rng)
        }
        (false, false) => {
            if b - a >= 0.35 && a <= 2.0 && b >= -2.0 {
                for _ in 0..REJECTION_ATTEMPTS {
                    let g: f64 = rng.sample(StandardNormal);
                    if g > a && g < b {
                        return g;
                    }
                }
            }
            if a >= TAIL_SWITCH {
                sample_two_sided_tail(a, b, rng)
            } else if b <= -TAIL_SWITCH {
                -sample_two_sided_tail(-b, -a, rng)
            } else {
                sample_central(a, b, rng)
            }
        }
    }
}

/// One-sided truncation to (a, inf).
fn sample_above(a: f64, rng: &mut RngStream) -> f64 {
    if a <= TAIL_SWITCH {
        // Upper-tail parameterization keeps the quantile argument away from 1.
        let w = 1.0 - rng.uniform(); // (0, 1]
        -std_normal_quantile(std_normal_sf(a) * w)
    } else {
        robert_tail(a, rng)
    }
}

/// Shifted-exponential rejection for the upper tail (a > 0).
fn robert_tail(a: f64, rng: &mut RngStream) -> f64 {
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e: f64 = Exp1.sample(rng);
        let x = a + e / rate;
        let diff = x - rate;
        if rng.uniform().ln() <= -0.5 * diff * diff {
            return x;
        }
    }
}

/// Two-sided interval entirely in the upper tail (a >= TAIL_SWITCH).
fn sample_two_sided_tail(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    if a * (b - a) < NARROW_TAIL {
        // Narrow: uniform proposal, accept with exp((a^2 - x^2)/2).
        loop {
            let x = a + (b - a) * rng.uniform();
            if 2.0 * rng.uniform().ln() <= a * a - x * x {
                return x;
            }
        }
    } else {
        loop {
            let x = robert_tail(a, rng);
            if x < b {
                return x;
            }
        }
    }
}

/// Inverse-CDF sampling for intervals overlapping the central region.
fn sample_central(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    let pl = std_normal_cdf(a);
    let pu = std_normal_cdf(b);
    if pu <= pl {
        return 0.5 * (a + b);
    }
    let u = pl + (pu - pl) * rng.uniform();
    std_normal_quantile(u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}
