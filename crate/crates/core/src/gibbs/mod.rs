//! Adaptive Gibbs sampler over [`ChainState`].
//!
//! One iteration performs, in order: the latent-matrix update (truncated
//! normals against the link intervals), the technical meta-covariate rows,
//! the regression coefficients, the factor scores, the idiosyncratic
//! variances, the local-scale augmentation (Bernoulli decomposition plus
//! Polya-Gamma logistic step), the unshrunk loadings, the column slab
//! indicators with their scales and stick weights, and the local scale
//! indicators. Truncation adaptation fires on an exponentially decaying
//! schedule and resizes every per-column quantity coherently.
//!
//! Every parallel unit draws from its own counter-derived random stream, so
//! results are independent of the worker count and reproducible by seed.

mod steps;
mod store;
#[cfg(test)]
mod tests;

pub use store::{AdaptEvent, Draw, DrawStore, StoreError, StoreMeta};

use crate::model::{
    apply_link, link_bounds, validate_inputs, ChainState, CountMatrix, Covariates, HyperParams,
    ModelError,
};
use crate::rng::{sample_beta, sample_gamma, DistError, PrecisionSampler, RngStream};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error(transparent)]
    Validation(#[from] ModelError),
    #[error("iteration {iteration}, {step}: {source}")]
    Numeric {
        iteration: usize,
        step: &'static str,
        source: DistError,
    },
}

/// How the local-scale prior mean is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PhiPrior {
    /// Logistic regression on the biological meta-covariates (the model).
    #[default]
    MetaCovariates,
    /// Drop the logistic regression and fix E(phi) = c_p / 2.
    FixedHalf,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions {
    pub phi_mode: PhiPrior,
}

/// Random-stream step tags; packed with the iteration and unit index into a
/// unique stream id.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub(crate) enum Step {
    Init = 0,
    Z,
    GammaT,
    Beta,
    Eta,
    Sigma,
    Varphi,
    GammaB,
    Lambda,
    Xi,
    Theta,
    Sticks,
    Phi,
    PhiActive,
    Adapt,
}

/// Precomputed, immutable context for one chain.
pub struct Engine<'a> {
    pub(crate) y: &'a CountMatrix,
    pub(crate) cov: &'a Covariates,
    pub(crate) hp: &'a HyperParams,
    pub(crate) opts: FitOptions,
    pub(crate) n: usize,
    pub(crate) p: usize,
    pub(crate) d: usize,
    pub(crate) xtx: Array2<f64>,
    pub(crate) gamma_t_sampler: PrecisionSampler,
    /// Link-interval bounds per cell; masked cells keep placeholder values.
    pub(crate) lower: Array2<f64>,
    pub(crate) upper: Array2<f64>,
}

impl<'a> Engine<'a> {
    pub fn new(
        y: &'a CountMatrix,
        cov: &'a Covariates,
        hp: &'a HyperParams,
    ) -> Result<Self, ModelError> {
        Self::with_options(y, cov, hp, FitOptions::default())
    }

    pub fn with_options(
        y: &'a CountMatrix,
        cov: &'a Covariates,
        hp: &'a HyperParams,
        opts: FitOptions,
    ) -> Result<Self, ModelError> {
        validate_inputs(y, cov, hp)?;
        if hp.iterations >= (1 << 26) {
            return Err(ModelError::InvalidHyper(
                "iterations must be below 2^26 for stream derivation".into(),
            ));
        }
        let (n, p) = (y.n(), y.p());
        let d = cov.d();
        let xtx = cov.x.t().dot(&cov.x);
        // Precision of the gamma_T rows is iteration-independent.
        let prec = Array2::eye(cov.q_t()) + &(cov.w_t.t().dot(&cov.w_t) / hp.sigma_beta2);
        let gamma_t_sampler = PrecisionSampler::new(&prec)
            .expect("identity-plus-PSD precision is positive definite");
        let mut lower = Array2::zeros((n, p));
        let mut upper = Array2::zeros((n, p));
        for ((i, j), &v) in y.values.indexed_iter() {
            let (lo, hi) = link_bounds(v);
            lower[(i, j)] = lo;
            upper[(i, j)] = hi;
        }
        Ok(Self {
            y,
            cov,
            hp,
            opts,
            n,
            p,
            d,
            xtx,
            gamma_t_sampler,
            lower,
            upper,
        })
    }

    pub(crate) fn stream(&self, iter: usize, step: Step, unit: usize) -> RngStream {
        debug_assert!(iter < (1 << 26) && unit < (1 << 32));
        let id = ((iter as u64) << 38) | ((step as u64) << 32) | unit as u64;
        RngStream::new(self.hp.seed, id)
    }

    /// Initial state: z at the log-scale midpoint of its link interval
    /// (z = -1 for zero counts, z = 0 for masked entries), everything else
    /// drawn from its prior with all `k_init` columns active.
    pub fn init_state(&self) -> ChainState {
        let hp = self.hp;
        let (n, p, d) = (self.n, self.p, self.d);
        let (q_t, q_b) = (self.cov.q_t(), self.cov.q_b());
        let k = hp.k_init;

        let mut rng = self.stream(0, Step::Init, 0);
        let mut gamma_t = Array2::zeros((d, q_t));
        for v in gamma_t.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }

        let mut rng = self.stream(0, Step::Init, 1);
        let prior_mean = gamma_t.dot(&self.cov.w_t.t());
        let sb = hp.sigma_beta2.sqrt();
        let mut beta = Array2::zeros((d, p));
        for (b, m) in beta.iter_mut().zip(prior_mean.iter()) {
            let g: f64 = StandardNormal.sample(&mut rng);
            *b = m + sb * g;
        }

        let mut rng = self.stream(0, Step::Init, 2);
        let mut eta = Array2::zeros((n, k));
        for v in eta.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }

        let mut rng = self.stream(0, Step::Init, 3);
        let vartheta: Vec<f64> = (0..k)
            .map(|_| 1.0 / sample_gamma(hp.a_theta, hp.b_theta, &mut rng))
            .collect();

        let mut rng = self.stream(0, Step::Init, 4);
        let mut gamma_b = Array2::zeros((q_b, k));
        if self.opts.phi_mode == PhiPrior::MetaCovariates {
            let sg = hp.sigma_gamma2.sqrt();
            for v in gamma_b.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v = sg * g;
            }
        }

        let mut rng = self.stream(0, Step::Init, 5);
        let mut lambda_tilde = Array2::zeros((p, k));
        for h in 0..k {
            let sd = vartheta[h].sqrt();
            for j in 0..p {
                let g: f64 = StandardNormal.sample(&mut rng);
                lambda_tilde[(j, h)] = sd * g;
            }
        }

        let mut rng = self.stream(0, Step::Init, 6);
        let linpred = self.cov.w_b.dot(&gamma_b);
        let mut phi = Array2::zeros((p, k));
        let mut varphi = Array2::zeros((p, k));
        for j in 0..p {
            for h in 0..k {
                let s = logit_inv(linpred[(j, h)]);
                let ph = (rng.uniform() < hp.c_p * s) as u8;
                phi[(j, h)] = ph;
                varphi[(j, h)] = if ph == 1 {
                    1
                } else {
                    let p1 = s * (1.0 - hp.c_p) / (1.0 - s * hp.c_p);
                    (rng.uniform() < p1) as u8
                };
            }
        }

        let mut rng = self.stream(0, Step::Init, 7);
        let mut v: Vec<f64> = (0..k).map(|_| sample_beta(1.0, hp.alpha, &mut rng)).collect();
        v[k - 1] = 1.0;

        let rho = vec![1u8; k];
        let mut lambda = lambda_tilde.clone();
        for ((j, h), l) in lambda.indexed_iter_mut() {
            *l *= phi[(j, h)] as f64 * rho[h] as f64;
        }

        let mut z = Array2::zeros((n, p));
        for ((i, j), zv) in z.indexed_iter_mut() {
            *zv = if self.y.is_masked(i, j) {
                0.0
            } else {
                let yv = self.y.values[(i, j)];
                if yv == 0 {
                    -1.0
                } else {
                    (yv as f64 + 0.5).ln()
                }
            };
        }
        let eps = &z - &self.cov.x.dot(&beta);

        let mut state = ChainState {
            z,
            beta,
            gamma_t,
            eta,
            lambda_tilde,
            lambda,
            phi,
            varphi,
            rho,
            vartheta,
            v,
            u: vec![0.0; k],
            gamma_b,
            sigma2: vec![1.0; p],
            eps,
            k_star: k,
        };
        state.refresh_sticks();
        state
    }

    /// One full Gibbs scan (steps in the dissertation order).
    pub fn scan(&self, state: &mut ChainState, iter: usize) -> Result<(), ChainError> {
        self.update_z(state, iter);
        self.update_gamma_t(state, iter);
        self.update_beta(state, iter)?;
        self.update_eta(state, iter)?;
        self.update_sigma(state, iter);
        self.update_local_scales(state, iter)?;
        self.update_lambda(state, iter)?;
        self.update_rho_theta_sticks(state, iter);
        self.update_phi(state, iter);
        if cfg!(debug_assertions) {
            state.check_consistency();
        }
        Ok(())
    }

    /// Truncation adaptation. With probability `exp(c0 + c1 * iter)` the
    /// truncation is reset to one more than the number of active columns
    /// (never below 2, capped at `k_max`): inactive columns are dropped and
    /// fresh prior-drawn inactive columns appended. Returns the event if the
    /// coin fired and the state changed shape or content.
    pub fn maybe_adapt(&self, state: &mut ChainState, iter: usize) -> Option<AdaptEvent> {
        if iter < self.hp.adapt_start {
            return None;
        }
        let mut rng = self.stream(iter, Step::Adapt, 0);
        if rng.uniform() >= self.hp.adapt_probability(iter) {
            return None;
        }
        Some(self.adapt_truncation(state, iter))
    }

    /// Unconditional truncation reset (the action taken when the adaptation
    /// coin fires).
    pub fn adapt_truncation(&self, state: &mut ChainState, iter: usize) -> AdaptEvent {
        let k_before = state.k_star;
        let keep: Vec<usize> = (0..k_before).filter(|&h| state.rho[h] == 1).collect();
        let dropped: Vec<usize> = (0..k_before).filter(|&h| state.rho[h] == 0).collect();
        // Target: one inactive buffer column beyond the active set, floored at
        // two (a single column can never activate under the truncated sticks)
        // and capped at k_max.
        let floor = 2.min(self.hp.k_max);
        let k_after = (keep.len() + 1)
            .min(self.hp.k_max)
            .max(floor)
            .max(keep.len());
        let appended = k_after.saturating_sub(keep.len());

        let (n, p, q_b) = (self.n, self.p, self.cov.q_b());
        let hp = self.hp;
        let mut eta = Array2::zeros((n, k_after));
        let mut lambda_tilde = Array2::zeros((p, k_after));
        let mut phi = Array2::zeros((p, k_after));
        let mut varphi = Array2::zeros((p, k_after));
        let mut gamma_b = Array2::zeros((q_b, k_after));
        let mut rho = vec![0u8; k_after];
        let mut vartheta = vec![0.0; k_after];
        let mut v = vec![0.0; k_after];

        for (new_h, &old_h) in keep.iter().enumerate() {
            eta.column_mut(new_h).assign(&state.eta.column(old_h));
            lambda_tilde
                .column_mut(new_h)
                .assign(&state.lambda_tilde.column(old_h));
            for j in 0..p {
                phi[(j, new_h)] = state.phi[(j, old_h)];
                varphi[(j, new_h)] = state.varphi[(j, old_h)];
            }
            gamma_b.column_mut(new_h).assign(&state.gamma_b.column(old_h));
            rho[new_h] = 1;
            vartheta[new_h] = state.vartheta[old_h];
            v[new_h] = state.v[old_h];
        }

        for c in 0..appended {
            let h = keep.len() + c;
            let mut rng = self.stream(iter, Step::Adapt, 1 + c);
            vartheta[h] = 1.0 / sample_gamma(hp.a_theta, hp.b_theta, &mut rng);
            if self.opts.phi_mode == PhiPrior::MetaCovariates {
                let sg = hp.sigma_gamma2.sqrt();
                for r in 0..q_b {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    gamma_b[(r, h)] = sg * g;
                }
            }
            let sd = vartheta[h].sqrt();
            for i in 0..n {
                let g: f64 = StandardNormal.sample(&mut rng);
                eta[(i, h)] = g;
            }
            for j in 0..p {
                let g: f64 = StandardNormal.sample(&mut rng);
                lambda_tilde[(j, h)] = sd * g;
                let lp: f64 = self
                    .cov
                    .w_b
                    .row(j)
                    .iter()
                    .zip(gamma_b.column(h).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let s = logit_inv(lp);
                let ph = (rng.uniform() < hp.c_p * s) as u8;
                phi[(j, h)] = ph;
                varphi[(j, h)] = if ph == 1 {
                    1
                } else {
                    let p1 = s * (1.0 - hp.c_p) / (1.0 - s * hp.c_p);
                    (rng.uniform() < p1) as u8
                };
            }
            v[h] = sample_beta(1.0, hp.alpha, &mut rng);
        }
        v[k_after - 1] = 1.0;

        let mut lambda = lambda_tilde.clone();
        for ((j, h), l) in lambda.indexed_iter_mut() {
            *l *= phi[(j, h)] as f64 * rho[h] as f64;
        }

        state.eta = eta;
        state.lambda_tilde = lambda_tilde;
        state.lambda = lambda;
        state.phi = phi;
        state.varphi = varphi;
        state.gamma_b = gamma_b;
        state.rho = rho;
        state.vartheta = vartheta;
        state.v = v;
        state.u = vec![0.0; k_after];
        state.k_star = k_after;
        state.refresh_sticks();

        log::debug!("adaptation at iteration {iter}: k {k_before} -> {k_after} (dropped {dropped:?})");
        AdaptEvent {
            iteration: iter,
            k_before,
            k_after,
            dropped,
            appended,
        }
    }
}

pub(crate) fn logit_inv(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws an index from unnormalized log weights (log-sum-exp normalized).
pub(crate) fn sample_categorical_log(log_w: &[f64], rng: &mut RngStream) -> usize {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(m.is_finite(), "all categorical weights vanished");
    let mut total = 0.0;
    let weights: Vec<f64> = log_w
        .iter()
        .map(|&lw| {
            let w = (lw - m).exp();
            total += w;
            w
        })
        .collect();
    let target = rng.uniform() * total;
    let mut acc = 0.0;
    for (idx, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return idx;
        }
    }
    weights.len() - 1
}

/// Factors a precision matrix, retrying once with a small diagonal jitter
/// (1e-8 of the mean diagonal) before giving up.
pub(crate) fn factor_with_jitter(prec: &Array2<f64>) -> Result<PrecisionSampler, DistError> {
    match PrecisionSampler::new(prec) {
        Err(DistError::NotPositiveDefinite { .. }) => {
            let dim = prec.nrows();
            let mean_diag = prec.diag().sum() / dim as f64;
            let mut jittered = prec.clone();
            for i in 0..dim {
                jittered[(i, i)] += 1e-8 * mean_diag.abs().max(1e-300);
            }
            PrecisionSampler::new(&jittered)
        }
        other => other,
    }
}

/// Runs the full adaptive chain and retains thinned post-burn-in draws.
pub fn run_chain(
    y: &CountMatrix,
    cov: &Covariates,
    hp: &HyperParams,
) -> Result<DrawStore, ChainError> {
    run_chain_with_options(y, cov, hp, FitOptions::default())
}

pub fn run_chain_with_options(
    y: &CountMatrix,
    cov: &Covariates,
    hp: &HyperParams,
    opts: FitOptions,
) -> Result<DrawStore, ChainError> {
    let engine = Engine::with_options(y, cov, hp, opts)?;
    let mut state = engine.init_state();
    let mut draws = Vec::with_capacity(hp.retained_draws());
    let mut events = Vec::new();
    for iter in 1..=hp.iterations {
        engine.scan(&mut state, iter)?;
        if let Some(event) = engine.maybe_adapt(&mut state, iter) {
            events.push(event);
        }
        if iter > hp.burn_in && (iter - hp.burn_in) % hp.thin == 0 {
            draws.push(Draw::from_state(&state));
        }
        if iter % 1000 == 0 {
            log::debug!(
                "iteration {iter}/{}: k*={} active={}",
                hp.iterations,
                state.k_star,
                state.n_active()
            );
        }
    }
    Ok(DrawStore {
        meta: StoreMeta {
            n: y.n(),
            p: y.p(),
            d: cov.d(),
            q_t: cov.q_t(),
            q_b: cov.q_b(),
            hyperparams: hp.clone(),
            adaptation_events: events,
        },
        draws,
    })
}

/// Replaces the data layer `(z, y)` with a fresh simulation from the current
/// parameters: z ~ N(x beta + eta Lambda^T, Sigma), y = floor(exp(z)).
/// This is the forward move of joint-distribution (Geweke-style) checks.
pub fn refresh_data_layer(
    state: &mut ChainState,
    y: &mut CountMatrix,
    cov: &Covariates,
    rng: &mut RngStream,
) {
    let mean = cov.x.dot(&state.beta) + state.eta.dot(&state.lambda.t());
    for ((i, j), m) in mean.indexed_iter() {
        let g: f64 = StandardNormal.sample(rng);
        let z = m + state.sigma2[j].sqrt() * g;
        state.z[(i, j)] = z;
        y.values[(i, j)] = apply_link(z);
    }
    state.eps = &state.z - &cov.x.dot(&state.beta);
}
