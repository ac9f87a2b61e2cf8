//! Reference implementations used only for verification: slow independent
//! routes to the same distributions the samplers draw from, plus
//! Kolmogorov-Smirnov helpers. Nothing here is called by the samplers.

use super::RngStream;
use rand_distr::{Distribution, Exp1};
use std::f64::consts::PI;

/// PG(1, c) draw via the truncated infinite-sum-of-gammas representation,
/// with the truncated tail replaced by its expectation.
pub fn pg_gamma_sum_draw(c: f64, rng: &mut RngStream) -> f64 {
    const TERMS: usize = 200;
    let t = c * c / (4.0 * PI * PI);
    let mut sum = 0.0;
    for k in 0..TERMS {
        let kf = k as f64 + 0.5;
        let g: f64 = Exp1.sample(rng);
        sum += g / (kf * kf + t);
    }
    // Euler-Maclaurin tail of sum_{k>=TERMS} 1/((k+1/2)^2 + t).
    let u = TERMS as f64 + 0.5;
    let tail = if t > 0.0 {
        (PI / 2.0 - (u / t.sqrt()).atan()) / t.sqrt() + 0.5 / (u * u + t)
    } else {
        1.0 / u + 0.5 / (u * u)
    };
    (sum + tail) / (2.0 * PI * PI)
}

/// PG(1, c) density evaluated through the tilted Jacobi series. Both
/// theta-function representations are summed and the better-conditioned one
/// is kept, so this shares no code with the sampler's kernel.
pub fn pg_density(y: f64, c: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    let z = c.abs() * 0.5;
    let x = 4.0 * y;
    // Large-x form: sum_n (-1)^n pi (n+1/2) exp(-(n+1/2)^2 pi^2 x / 2).
    let mut large = 0.0;
    // Small-x form: (2/(pi x))^{3/2} sum_n (-1)^n pi (n+1/2) exp(-2 (n+1/2)^2 / x).
    let mut small = 0.0;
    let mut sign = 1.0;
    for n in 0..400 {
        let k = n as f64 + 0.5;
        let tl = PI * k * (-0.5 * k * k * PI * PI * x).exp();
        let ts = PI * k * (-2.0 * k * k / x).exp();
        large += sign * tl;
        small += sign * ts;
        sign = -sign;
        if tl < 1e-18 && ts < 1e-18 && n > 2 {
            break;
        }
    }
    small *= (2.0 / (PI * x)).powf(1.5);
    let series = if x > 0.7 { large } else { small };
    let tilt = z.cosh() * (-0.5 * z * z * x).exp();
    4.0 * tilt * series.max(0.0)
}

/// CDF of PG(1, c) tabulated by composite Simpson quadrature of [`pg_density`].
pub struct PgCdf {
    step: f64,
    cum: Vec<f64>,
}

impl PgCdf {
    pub fn new(c: f64) -> Self {
        let y_max = 6.0;
        let steps = 60_000usize; // even
        let step = y_max / steps as f64;
        let dens: Vec<f64> = (0..=steps).map(|i| pg_density(i as f64 * step, c)).collect();
        let mut cum = vec![0.0; steps + 1];
        // Simpson on consecutive pairs of panels; odd index by trapezoid catch-up.
        for i in (2..=steps).step_by(2) {
            cum[i] = cum[i - 2] + step / 3.0 * (dens[i - 2] + 4.0 * dens[i - 1] + dens[i]);
            cum[i - 1] = 0.5 * (cum[i - 2] + cum[i]);
        }
        let total = cum[steps];
        for v in &mut cum {
            *v = (*v / total).clamp(0.0, 1.0);
        }
        Self { step, cum }
    }

    pub fn eval(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        let pos = y / self.step;
        let idx = pos.floor() as usize;
        if idx + 1 >= self.cum.len() {
            return 1.0;
        }
        let frac = pos - idx as f64;
        self.cum[idx] * (1.0 - frac) + self.cum[idx + 1] * frac
    }
}

/// Mean of N(mean, variance) truncated to the finite interval (lo, hi),
/// by composite Simpson quadrature of the raw density.
pub fn truncnorm_mean_quadrature(mean: f64, variance: f64, lo: f64, hi: f64) -> f64 {
    assert!(lo.is_finite() && hi.is_finite() && lo < hi);
    let steps = 20_000usize;
    let h = (hi - lo) / steps as f64;
    let dens = |x: f64| (-(x - mean) * (x - mean) / (2.0 * variance)).exp();
    let (mut mass, mut moment) = (0.0, 0.0);
    for i in (2..=steps).step_by(2) {
        let (x0, x1, x2) = (
            lo + (i - 2) as f64 * h,
            lo + (i - 1) as f64 * h,
            lo + i as f64 * h,
        );
        mass += h / 3.0 * (dens(x0) + 4.0 * dens(x1) + dens(x2));
        moment += h / 3.0 * (x0 * dens(x0) + 4.0 * x1 * dens(x1) + x2 * dens(x2));
    }
    moment / mass
}

/// One-sample Kolmogorov-Smirnov statistic; `sorted` must be ascending.
pub fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Critical one-sample KS value at the given significance level.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-0.5 * (alpha / 2.0).ln()).sqrt() / (n as f64).sqrt()
}

/// Two-sample KS statistic over two ascending samples.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (mut i, mut j) = (0usize, 0usize);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Critical two-sample KS value at the given significance level.
pub fn ks_critical_two_sample(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}
