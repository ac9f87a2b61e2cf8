//! Exact PG(1, c) sampling by the alternating-series rejection method used in
//! the logistic data-augmentation literature: a mixture proposal of a
//! truncated inverse Gaussian and a shifted exponential, with series
//! termination deciding acceptance. E[PG(1, c)] = tanh(c/2) / (2c).

use super::RngStream;
use rand_distr::{Distribution, Exp1, StandardNormal};
use std::f64::consts::PI;

/// Proposal switch point of the Jacobi-series kernel.
const TRUNC: f64 = 0.64;

/// Draws omega ~ PG(1, c). The distribution is even in `c`.
pub fn sample_polya_gamma(c: f64, rng: &mut RngStream) -> f64 {
    debug_assert!(c.is_finite());
    let z = c.abs() * 0.5;
    let fz = PI * PI * 0.125 + z * z * 0.5;

    // Mass of the exponential right piece vs the inverse-Gaussian left piece.
    let p = PI / (2.0 * fz) * (-fz * TRUNC).exp();
    let q = 2.0 * (-z).exp() * inverse_gaussian_cdf_trunc(z);
    let ratio = p / (p + q);

    loop {
        let x = if rng.uniform() < ratio {
            let e: f64 = Exp1.sample(rng);
            TRUNC + e / fz
        } else {
            sample_truncated_inverse_gaussian(z, rng)
        };

        // Alternating series: partial sums bracket the target density.
        let mut s = series_coef(0, x);
        let y = rng.uniform() * s;
        let mut n = 0usize;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= series_coef(n, x);
                if y <= s {
                    return 0.25 * x;
                }
            } else {
                s += series_coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
}

/// Piecewise kernel coefficient a_n(x); the x <= TRUNC branch is the
/// small-x (theta-function) form, the other the large-x cosine-series form.
fn series_coef(n: usize, x: f64) -> f64 {
    let k = n as f64 + 0.5;
    if x > TRUNC {
        PI * k * (-k * k * PI * PI * x * 0.5).exp()
    } else {
        (2.0 / (PI * x)).powf(1.5) * PI * k * (-2.0 * k * k / x).exp()
    }
}

/// CDF at TRUNC of the inverse Gaussian IG(1/z, 1); z = 0 is the Levy limit.
fn inverse_gaussian_cdf_trunc(z: f64) -> f64 {
    let t = TRUNC;
    let rt = 1.0 / t.sqrt();
    let b = rt * (t * z - 1.0);
    let a = -rt * (t * z + 1.0);
    super::std_normal_cdf(b) + (2.0 * z).exp() * super::std_normal_cdf(a)
}

/// IG(1/z, 1) restricted to (0, TRUNC].
fn sample_truncated_inverse_gaussian(z: f64, rng: &mut RngStream) -> f64 {
    let t = TRUNC;
    let mu = 1.0 / z; // +inf at z = 0
    if mu > t {
        // Rejection from the scaled reciprocal-chi-square restricted to (0, t].
        loop {
            let (e1, e2) = loop {
                let e1: f64 = Exp1.sample(rng);
                let e2: f64 = Exp1.sample(rng);
                if e1 * e1 <= 2.0 * e2 / t {
                    break (e1, e2);
                }
            };
            let _ = e2;
            let denom = 1.0 + t * e1;
            let x = t / (denom * denom);
            if rng.uniform().ln() <= -0.5 * z * z * x {
                return x;
            }
        }
    } else {
        // Standard IG transform, retried until it lands inside (0, t].
        loop {
            let g: f64 = StandardNormal.sample(rng);
            let y = g * g;
            let mu_y = mu * y;
            let mut x = mu + 0.5 * mu * mu_y - 0.5 * mu * (4.0 * mu_y + mu_y * mu_y).sqrt();
            if rng.uniform() > mu / (mu + x) {
                x = mu * mu / x;
            }
            if x > 0.0 && x <= t {
                return x;
            }
        }
    }
}
