//! Data model shared by the sampler, post-processing, and benchmark layers:
//! count matrices with optional holdout masks, covariate bundles, the
//! rounded-exponential link, hyperparameters, and input validation.

use ndarray::{Array1, Array2};
use thiserror::Error;

/// Largest count representable exactly as an f64; `apply_link` saturates here.
pub const MAX_COUNT: u64 = (1u64 << 53) - 1;

/// Default cap on the number of factor columns, `k_max = min(n, p, K_MAX_CAP)`.
pub const K_MAX_CAP: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{name} has {got} rows, expected {expected}")]
    RowMismatch {
        name: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{name} must have at least one column")]
    EmptyMatrix { name: &'static str },
    #[error("mask is {got_n}x{got_p}, expected {n}x{p}")]
    MaskShape {
        got_n: usize,
        got_p: usize,
        n: usize,
        p: usize,
    },
    #[error("count matrix is empty (n={n}, p={p})")]
    EmptyCounts { n: usize, p: usize },
    #[error("non-finite value in {name} at ({row}, {col})")]
    NonFinite {
        name: &'static str,
        row: usize,
        col: usize,
    },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("mask index ({row}, {col}) out of bounds for {n}x{p} counts")]
    MaskIndex {
        row: usize,
        col: usize,
        n: usize,
        p: usize,
    },
}

/// n x p matrix of observed counts with an optional holdout mask
/// (`true` marks entries treated as missing).
#[derive(Debug, Clone)]
pub struct CountMatrix {
    pub values: Array2<u64>,
    pub mask: Option<Array2<bool>>,
}

impl CountMatrix {
    pub fn new(values: Array2<u64>) -> Result<Self, ModelError> {
        let (n, p) = values.dim();
        if n == 0 || p == 0 {
            return Err(ModelError::EmptyCounts { n, p });
        }
        Ok(Self { values, mask: None })
    }

    pub fn with_mask(values: Array2<u64>, mask: Array2<bool>) -> Result<Self, ModelError> {
        let mut m = Self::new(values)?;
        let (n, p) = m.values.dim();
        let (gn, gp) = mask.dim();
        if (gn, gp) != (n, p) {
            return Err(ModelError::MaskShape {
                got_n: gn,
                got_p: gp,
                n,
                p,
            });
        }
        m.mask = Some(mask);
        Ok(m)
    }

    /// Builds the mask from zero-based `(i, j)` index pairs.
    pub fn with_mask_pairs(values: Array2<u64>, pairs: &[(usize, usize)]) -> Result<Self, ModelError> {
        let (n, p) = values.dim();
        let mut mask = Array2::from_elem((n, p), false);
        for &(i, j) in pairs {
            if i >= n || j >= p {
                return Err(ModelError::MaskIndex {
                    row: i,
                    col: j,
                    n,
                    p,
                });
            }
            mask[(i, j)] = true;
        }
        Self::with_mask(values, mask)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m[(i, j)])
    }

    pub fn masked_count(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&b| b).count())
    }

    /// Zero-based `(i, j)` coordinates of masked entries in row-major order.
    pub fn masked_pairs(&self) -> Vec<(usize, usize)> {
        match &self.mask {
            None => Vec::new(),
            Some(m) => m
                .indexed_iter()
                .filter(|(_, &b)| b)
                .map(|((i, j), _)| (i, j))
                .collect(),
        }
    }
}

/// Cell covariates `x` (n x d) together with technical (`w_t`, p x q_t) and
/// biological (`w_b`, p x q_b) meta-covariates. Missing meta-covariate blocks
/// default to a single intercept column of ones.
#[derive(Debug, Clone)]
pub struct Covariates {
    pub x: Array2<f64>,
    pub w_t: Array2<f64>,
    pub w_b: Array2<f64>,
}

impl Covariates {
    /// `p` is the gene count, used to size default intercept columns when a
    /// meta-covariate block is absent.
    pub fn new(x: Array2<f64>, p: usize, w_t: Option<Array2<f64>>, w_b: Option<Array2<f64>>) -> Self {
        let ones = |rows: usize| Array2::from_elem((rows, 1), 1.0);
        let w_t = w_t.unwrap_or_else(|| ones(p));
        let w_b = w_b.unwrap_or_else(|| ones(p));
        Self { x, w_t, w_b }
    }

    /// Intercept-only covariates for a matrix of the given shape.
    pub fn intercept_only(n: usize, p: usize) -> Self {
        Self {
            x: Array2::from_elem((n, 1), 1.0),
            w_t: Array2::from_elem((p, 1), 1.0),
            w_b: Array2::from_elem((p, 1), 1.0),
        }
    }

    /// Same cell covariates and technical block, biological block replaced by
    /// an intercept column (the meta-covariate-free model variant).
    pub fn without_meta(&self) -> Self {
        Self {
            x: self.x.clone(),
            w_t: self.w_t.clone(),
            w_b: Array2::from_elem((self.w_t.nrows(), 1), 1.0),
        }
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn q_t(&self) -> usize {
        self.w_t.ncols()
    }

    pub fn q_b(&self) -> usize {
        self.w_b.ncols()
    }
}

/// Prior and sampler settings. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HyperParams {
    /// Stick-breaking concentration; prior expected number of active factors.
    pub alpha: f64,
    pub sigma_beta2: f64,
    pub sigma_gamma2: f64,
    pub a_theta: f64,
    pub b_theta: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    /// Offset of the local-scale Bernoulli mean, in (0, 1).
    pub c_p: f64,
    pub k_init: usize,
    pub k_max: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// First iteration at which truncation adaptation may fire.
    pub adapt_start: usize,
    /// Adaptation probability at iteration t is `exp(adapt_c0 + adapt_c1 * t)`.
    pub adapt_c0: f64,
    pub adapt_c1: f64,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            sigma_beta2: 1.0,
            sigma_gamma2: 1.0,
            a_theta: 1.0,
            b_theta: 1.0,
            a_sigma: 1.0,
            b_sigma: 1.0,
            c_p: 0.5,
            k_init: 15,
            k_max: K_MAX_CAP,
            iterations: 20_000,
            burn_in: 5_000,
            thin: 2,
            adapt_start: 100,
            adapt_c0: -1.0,
            adapt_c1: -5e-4,
            seed: 42,
        }
    }
}

impl HyperParams {
    /// Defaults with the truncation limits resolved against the data size:
    /// `k_max = min(n, p, 64)` and `k_init = min(ceil(3 * alpha), k_max)`.
    pub fn defaults_for(n: usize, p: usize) -> Self {
        let mut hp = Self::default();
        hp.resolve_truncation(n, p);
        hp
    }

    pub fn resolve_truncation(&mut self, n: usize, p: usize) {
        self.k_max = K_MAX_CAP.min(n).min(p).max(1);
        self.k_init = ((3.0 * self.alpha).ceil() as usize).clamp(1, self.k_max);
    }

    /// Short chain profile for smoke tests and CI.
    pub fn fast_profile(mut self) -> Self {
        self.iterations = 4_000;
        self.burn_in = 1_000;
        self.thin = 2;
        self
    }

    /// Probability that truncation adaptation fires at iteration `t`.
    pub fn adapt_probability(&self, t: usize) -> f64 {
        (self.adapt_c0 + self.adapt_c1 * t as f64).exp()
    }

    pub fn retained_draws(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("alpha", self.alpha),
            ("sigma_beta2", self.sigma_beta2),
            ("sigma_gamma2", self.sigma_gamma2),
            ("a_theta", self.a_theta),
            ("b_theta", self.b_theta),
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidHyper(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.c_p > 0.0 && self.c_p < 1.0) {
            return Err(ModelError::InvalidHyper(format!(
                "c_p must lie in (0, 1), got {}",
                self.c_p
            )));
        }
        if self.iterations == 0 {
            return Err(ModelError::InvalidHyper("iterations must be positive".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(ModelError::InvalidHyper(format!(
                "burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(ModelError::InvalidHyper("thin must be positive".into()));
        }
        if self.k_init == 0 || self.k_max == 0 || self.k_init > self.k_max {
            return Err(ModelError::InvalidHyper(format!(
                "need 1 <= k_init <= k_max, got k_init={} k_max={}",
                self.k_init, self.k_max
            )));
        }
        if self.adapt_start == 0 {
            return Err(ModelError::InvalidHyper("adapt_start must be positive".into()));
        }
        // exp(c0 + c1 t) must stay a probability for every t >= adapt_start.
        if self.adapt_c1 > 0.0
            || self.adapt_c0 + self.adapt_c1 * self.adapt_start as f64 > 0.0
        {
            return Err(ModelError::InvalidHyper(format!(
                "adaptation probability exp({} + {} t) exceeds 1 for some t >= {}",
                self.adapt_c0, self.adapt_c1, self.adapt_start
            )));
        }
        Ok(())
    }
}

/// All latent quantities carried across one Gibbs iteration.
///
/// The effective loading is `lambda[j][h] = phi[j][h] * rho[h] * lambda_tilde[j][h]`
/// and is kept materialized (and consistent) after every update step, together
/// with the residual `eps = z - x * beta`.
#[derive(Debug, Clone)]
pub struct ChainState {
    /// Latent continuous matrix, n x p.
    pub z: Array2<f64>,
    /// Regression coefficients, d x p (column j is beta_j).
    pub beta: Array2<f64>,
    /// Technical meta-covariate coefficients, d x q_t (row l is gamma_lT).
    pub gamma_t: Array2<f64>,
    /// Factor scores, n x k.
    pub eta: Array2<f64>,
    /// Unshrunk loadings, p x k.
    pub lambda_tilde: Array2<f64>,
    /// Effective loadings phi * rho * lambda_tilde, p x k.
    pub lambda: Array2<f64>,
    /// Local scale indicators, p x k.
    pub phi: Array2<u8>,
    /// Augmented slab indicators of the local-scale decomposition, p x k.
    pub varphi: Array2<u8>,
    /// Column slab indicators, length k.
    pub rho: Vec<u8>,
    /// Column scales (variance of lambda_tilde entries), length k.
    pub vartheta: Vec<f64>,
    /// Stick fractions, length k, with the last entry pinned to 1.
    pub v: Vec<f64>,
    /// Stick weights u_l = v_l prod_{m<l}(1 - v_m), length k.
    pub u: Vec<f64>,
    /// Biological meta-covariate logit coefficients, q_b x k (column h is gamma_hB).
    pub gamma_b: Array2<f64>,
    /// Idiosyncratic variances, length p.
    pub sigma2: Vec<f64>,
    /// Residual z - x * beta, n x p.
    pub eps: Array2<f64>,
    /// Current truncation (number of factor columns).
    pub k_star: usize,
}

impl ChainState {
    pub fn n_active(&self) -> usize {
        self.rho.iter().filter(|&&r| r == 1).count()
    }

    /// Cumulative spike probabilities pi_h = sum_{l<=h} u_l.
    pub fn pi(&self) -> Array1<f64> {
        let mut acc = 0.0;
        Array1::from_iter(self.u.iter().map(|&ul| {
            acc += ul;
            acc
        }))
    }

    /// Recomputes `u` from `v` by stick-breaking.
    pub fn refresh_sticks(&mut self) {
        let mut remaining = 1.0;
        for l in 0..self.k_star {
            self.u[l] = self.v[l] * remaining;
            remaining *= 1.0 - self.v[l];
        }
    }

    /// Panics if structural invariants are violated; used by tests and
    /// debug builds after every sampler step.
    pub fn check_consistency(&self) {
        let k = self.k_star;
        assert_eq!(self.eta.ncols(), k);
        assert_eq!(self.lambda_tilde.ncols(), k);
        assert_eq!(self.lambda.ncols(), k);
        assert_eq!(self.phi.ncols(), k);
        assert_eq!(self.varphi.ncols(), k);
        assert_eq!(self.rho.len(), k);
        assert_eq!(self.vartheta.len(), k);
        assert_eq!(self.v.len(), k);
        assert_eq!(self.u.len(), k);
        assert_eq!(self.gamma_b.ncols(), k);
        for j in 0..self.lambda.nrows() {
            for h in 0..k {
                let expect =
                    self.phi[(j, h)] as f64 * self.rho[h] as f64 * self.lambda_tilde[(j, h)];
                assert!(
                    (self.lambda[(j, h)] - expect).abs() <= 1e-12 * expect.abs().max(1.0),
                    "lambda[{j},{h}] = {} != phi*rho*lambda_tilde = {expect}",
                    self.lambda[(j, h)]
                );
            }
        }
        for (j, &s2) in self.sigma2.iter().enumerate() {
            assert!(s2 > 0.0, "sigma2[{j}] = {s2} not positive");
        }
        let mut cum = 0.0;
        let mut prev = 0.0;
        for (l, &ul) in self.u.iter().enumerate() {
            assert!(ul >= 0.0, "u[{l}] = {ul} negative");
            cum += ul;
            assert!(cum >= prev - 1e-12 && cum <= 1.0 + 1e-9, "pi not monotone in [0,1]");
            prev = cum;
        }
    }
}

/// Interval of latent values mapping to the count `y` under the link:
/// `[ln y, ln(y+1))`, with lower bound -inf at y = 0.
///
/// For counts so large that the two logarithms collapse to the same f64, the
/// upper bound is widened to the next representable value so the interval
/// stays non-empty.
pub fn link_bounds(y: u64) -> (f64, f64) {
    let lower = if y == 0 { f64::NEG_INFINITY } else { (y as f64).ln() };
    let mut upper = ((y + 1) as f64).ln();
    if upper <= lower {
        upper = f64::from_bits(lower.to_bits() + 1);
    }
    (lower, upper)
}

/// Maps a latent value to its count: the unique y with `ln y <= z < ln(y+1)`.
///
/// Overflow saturates at [`MAX_COUNT`]; use [`apply_link_reporting`] to detect it.
pub fn apply_link(z: f64) -> u64 {
    apply_link_reporting(z).0
}

/// As [`apply_link`], additionally reporting whether the result saturated.
pub fn apply_link_reporting(z: f64) -> (u64, bool) {
    debug_assert!(!z.is_nan());
    if z >= (MAX_COUNT as f64).ln() {
        return (MAX_COUNT, true);
    }
    let e = z.exp();
    let mut y = e.floor() as u64;
    // exp() rounding can land one count off near cell boundaries; snap using
    // the same thresholds link_bounds uses so the round-trip is exact.
    if ((y + 1) as f64).ln() <= z {
        y += 1;
    } else if y > 0 && z < (y as f64).ln() {
        y -= 1;
    }
    (y, false)
}

/// Validation summary for a (counts, covariates, hyperparameters) bundle.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub q_t: usize,
    pub q_b: usize,
    /// Fraction of entries held out by the mask.
    pub mask_fraction: f64,
    /// Indices of constant `w_b` columns (logit coefficients unidentifiable
    /// up to the intercept); flagged, not rejected.
    pub constant_wb_columns: Vec<usize>,
}

/// Checks dimension agreement and finiteness of one model input bundle.
pub fn validate_inputs(
    y: &CountMatrix,
    cov: &Covariates,
    hp: &HyperParams,
) -> Result<ValidationReport, ModelError> {
    hp.validate()?;
    let (n, p) = y.values.dim();
    if n == 0 || p == 0 {
        return Err(ModelError::EmptyCounts { n, p });
    }
    if cov.x.nrows() != n {
        return Err(ModelError::RowMismatch {
            name: "x",
            got: cov.x.nrows(),
            expected: n,
        });
    }
    if cov.x.ncols() == 0 {
        return Err(ModelError::EmptyMatrix { name: "x" });
    }
    for (name, m) in [("wT", &cov.w_t), ("wB", &cov.w_b)] {
        if m.nrows() != p {
            return Err(ModelError::RowMismatch {
                name,
                got: m.nrows(),
                expected: p,
            });
        }
        if m.ncols() == 0 {
            return Err(ModelError::EmptyMatrix { name });
        }
    }
    for (name, m) in [("x", &cov.x), ("wT", &cov.w_t), ("wB", &cov.w_b)] {
        for ((i, j), &v) in m.indexed_iter() {
            if !v.is_finite() {
                return Err(ModelError::NonFinite { name, row: i, col: j });
            }
        }
    }
    if let Some(mask) = &y.mask {
        let (gn, gp) = mask.dim();
        if (gn, gp) != (n, p) {
            return Err(ModelError::MaskShape {
                got_n: gn,
                got_p: gp,
                n,
                p,
            });
        }
    }
    let mut constant_wb_columns = Vec::new();
    for c in 0..cov.w_b.ncols() {
        let col = cov.w_b.column(c);
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            constant_wb_columns.push(c);
        }
    }
    if !constant_wb_columns.is_empty() {
        log::warn!(
            "wB columns {:?} are constant; their logit coefficients are identifiable only up to an intercept",
            constant_wb_columns
        );
    }
    let mask_fraction = y.masked_count() as f64 / (n * p) as f64;
    log::info!("validated inputs: n={n} p={p} d={} q_t={} q_b={} mask fraction {mask_fraction:.4}",
        cov.d(), cov.q_t(), cov.q_b());
    Ok(ValidationReport {
        n,
        p,
        d: cov.d(),
        q_t: cov.q_t(),
        q_b: cov.q_b(),
        mask_fraction,
        constant_wb_columns,
    })
}
