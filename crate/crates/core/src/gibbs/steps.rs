//! Full-conditional updates of the Gibbs scan. Each "update in parallel"
//! axis runs over a rayon pool with one random stream per unit, so draws do
//! not depend on scheduling. The idiosyncratic variances enter every
//! conditional; the unit-variance special case recovers the textbook forms.

use super::{factor_with_jitter, logit_inv, sample_categorical_log, ChainError, Engine, PhiPrior, Step};
use crate::model::ChainState;
use crate::rng::{sample_beta, sample_gamma, sample_polya_gamma, sample_truncated_normal, TruncInterval};
use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};

impl<'a> Engine<'a> {
    /// Step i: latent matrix. Observed entries draw from the normal
    /// truncated to their link interval; masked entries draw unconstrained.
    pub fn update_z(&self, state: &mut ChainState, iter: usize) {
        let mean = self.cov.x.dot(&state.beta) + state.eta.dot(&state.lambda.t());
        let sigma2 = &state.sigma2;
        let mask = self.y.mask.as_ref();
        state
            .z
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut z_row)| {
                let mut rng = self.stream(iter, Step::Z, i);
                for (j, z) in z_row.iter_mut().enumerate() {
                    let m = mean[(i, j)];
                    let s2 = sigma2[j];
                    if mask.is_some_and(|mk| mk[(i, j)]) {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        *z = m + s2.sqrt() * g;
                    } else {
                        let iv = TruncInterval {
                            lower: self.lower[(i, j)],
                            upper: self.upper[(i, j)],
                        };
                        *z = sample_truncated_normal(m, s2, iv, &mut rng)
                            .expect("link intervals are non-empty");
                    }
                }
            });
    }

    /// Step ii: rows of the technical meta-covariate coefficient matrix.
    pub fn update_gamma_t(&self, state: &mut ChainState, iter: usize) {
        // b_l = sigma_beta^-2 wT^T beta_l, assembled for all rows at once.
        let b_all = state.beta.dot(&self.cov.w_t) / self.hp.sigma_beta2;
        for l in 0..self.d {
            let mut rng = self.stream(iter, Step::GammaT, l);
            let row = self.gamma_t_sampler.sample(b_all.row(l), &mut rng);
            state.gamma_t.row_mut(l).assign(&row);
        }
    }

    /// Step iii: regression coefficients, then the residual refresh
    /// eps = z - x beta.
    pub fn update_beta(&self, state: &mut ChainState, iter: usize) -> Result<(), ChainError> {
        let fitted = state.eta.dot(&state.lambda.t());
        let prior_mean = state.gamma_t.dot(&self.cov.w_t.t());
        let sb2_inv = 1.0 / self.hp.sigma_beta2;
        let d = self.d;

        let cols: Result<Vec<Array1<f64>>, ChainError> = (0..self.p)
            .into_par_iter()
            .map(|j| {
                let mut rng = self.stream(iter, Step::Beta, j);
                let s2_inv = 1.0 / state.sigma2[j];
                let mut prec = &self.xtx * s2_inv;
                for a in 0..d {
                    prec[(a, a)] += sb2_inv;
                }
                let resid = &state.z.column(j) - &fitted.column(j);
                let mut b = self.cov.x.t().dot(&resid) * s2_inv;
                b += &(&prior_mean.column(j) * sb2_inv);
                let sampler = factor_with_jitter(&prec).map_err(|source| ChainError::Numeric {
                    iteration: iter,
                    step: "beta",
                    source,
                })?;
                Ok(sampler.sample(b.view(), &mut rng))
            })
            .collect();
        for (j, col) in cols?.into_iter().enumerate() {
            state.beta.column_mut(j).assign(&col);
        }
        state.eps = &state.z - &self.cov.x.dot(&state.beta);
        Ok(())
    }

    /// Step iv: factor scores. The precision is shared by every cell, so it
    /// is factored once.
    pub fn update_eta(&self, state: &mut ChainState, iter: usize) -> Result<(), ChainError> {
        let k = state.k_star;
        let mut lam_half = state.lambda.clone();
        let mut lam_prec = state.lambda.clone();
        for (j, mut row) in lam_half.axis_iter_mut(Axis(0)).enumerate() {
            row *= 1.0 / state.sigma2[j].sqrt();
        }
        for (j, mut row) in lam_prec.axis_iter_mut(Axis(0)).enumerate() {
            row *= 1.0 / state.sigma2[j];
        }
        let mut prec = lam_half.t().dot(&lam_half);
        for a in 0..k {
            prec[(a, a)] += 1.0;
        }
        let sampler = factor_with_jitter(&prec).map_err(|source| ChainError::Numeric {
            iteration: iter,
            step: "eta",
            source,
        })?;
        let rhs = state.eps.dot(&lam_prec); // row i = Lambda^T Sigma^-1 eps_i
        let rows: Vec<Array1<f64>> = (0..self.n)
            .into_par_iter()
            .map(|i| {
                let mut rng = self.stream(iter, Step::Eta, i);
                sampler.sample(rhs.row(i), &mut rng)
            })
            .collect();
        for (i, row) in rows.into_iter().enumerate() {
            state.eta.row_mut(i).assign(&row);
        }
        Ok(())
    }

    /// Step v: idiosyncratic precisions.
    pub fn update_sigma(&self, state: &mut ChainState, iter: usize) {
        let resid = &state.eps - &state.eta.dot(&state.lambda.t());
        let a_post = self.hp.a_sigma + 0.5 * self.n as f64;
        let new: Vec<f64> = (0..self.p)
            .into_par_iter()
            .map(|j| {
                let mut rng = self.stream(iter, Step::Sigma, j);
                let ssq: f64 = resid.column(j).iter().map(|r| r * r).sum();
                let rate = self.hp.b_sigma + 0.5 * ssq;
                1.0 / sample_gamma(a_post, rate, &mut rng)
            })
            .collect();
        state.sigma2 = new;
    }

    /// Step vi: local-scale augmentation. First the slab indicators of the
    /// Bernoulli decomposition (forced to one wherever phi is one), then the
    /// logistic coefficients via Polya-Gamma auxiliaries drawn at the
    /// pre-update linear predictor.
    pub fn update_local_scales(&self, state: &mut ChainState, iter: usize) -> Result<(), ChainError> {
        if self.opts.phi_mode == PhiPrior::FixedHalf {
            // Logistic layer disabled: keep gamma_b at zero and varphi = phi.
            state.varphi.assign(&state.phi);
            return Ok(());
        }
        let c_p = self.hp.c_p;
        let linpred = self.cov.w_b.dot(&state.gamma_b);

        Zip::indexed(state.varphi.axis_iter_mut(Axis(0)))
            .and(state.phi.axis_iter(Axis(0)))
            .par_for_each(|j, mut vrow, prow| {
                let mut rng = self.stream(iter, Step::Varphi, j);
                for (h, v) in vrow.iter_mut().enumerate() {
                    if prow[h] == 1 {
                        *v = 1;
                    } else {
                        let s = logit_inv(linpred[(j, h)]);
                        let p1 = s * (1.0 - c_p) / (1.0 - s * c_p);
                        *v = (rng.uniform() < p1) as u8;
                    }
                }
            });

        let q_b = self.cov.q_b();
        let sg2_inv = 1.0 / self.hp.sigma_gamma2;
        let cols: Result<Vec<Array1<f64>>, ChainError> = (0..state.k_star)
            .into_par_iter()
            .map(|h| {
                let mut rng = self.stream(iter, Step::GammaB, h);
                // wB^T D(h) wB + sigma_gamma^-2 I with D(h) the PG draws.
                let mut prec = Array2::zeros((q_b, q_b));
                let mut b = Array1::zeros(q_b);
                for j in 0..self.p {
                    let dj = sample_polya_gamma(linpred[(j, h)], &mut rng);
                    let wj = self.cov.w_b.row(j);
                    for a in 0..q_b {
                        b[a] += wj[a] * (state.varphi[(j, h)] as f64 - 0.5);
                        for c in 0..q_b {
                            prec[(a, c)] += dj * wj[a] * wj[c];
                        }
                    }
                }
                for a in 0..q_b {
                    prec[(a, a)] += sg2_inv;
                }
                let sampler = factor_with_jitter(&prec).map_err(|source| ChainError::Numeric {
                    iteration: iter,
                    step: "gamma_b",
                    source,
                })?;
                Ok(sampler.sample(b.view(), &mut rng))
            })
            .collect();
        for (h, col) in cols?.into_iter().enumerate() {
            state.gamma_b.column_mut(h).assign(&col);
        }
        Ok(())
    }

    /// Step vii: unshrunk loadings rows, then the effective-loading refresh.
    pub fn update_lambda(&self, state: &mut ChainState, iter: usize) -> Result<(), ChainError> {
        let k = state.k_star;
        let ete = state.eta.t().dot(&state.eta); // k x k
        let et_eps = state.eta.t().dot(&state.eps); // k x p
        let vartheta_inv: Vec<f64> = state.vartheta.iter().map(|t| 1.0 / t).collect();

        let rows: Result<Vec<Array1<f64>>, ChainError> = (0..self.p)
            .into_par_iter()
            .map(|j| {
                let mut rng = self.stream(iter, Step::Lambda, j);
                let s2_inv = 1.0 / state.sigma2[j];
                let mut prec = Array2::zeros((k, k));
                let mut b = Array1::zeros(k);
                for a in 0..k {
                    let fa = (state.rho[a] * state.phi[(j, a)]) as f64;
                    if fa != 0.0 {
                        b[a] = s2_inv * et_eps[(a, j)];
                        for c in 0..k {
                            let fc = (state.rho[c] * state.phi[(j, c)]) as f64;
                            if fc != 0.0 {
                                prec[(a, c)] = s2_inv * ete[(a, c)];
                            }
                        }
                    }
                    prec[(a, a)] += vartheta_inv[a];
                }
                let sampler = factor_with_jitter(&prec).map_err(|source| ChainError::Numeric {
                    iteration: iter,
                    step: "lambda",
                    source,
                })?;
                Ok(sampler.sample(b.view(), &mut rng))
            })
            .collect();
        for (j, row) in rows?.into_iter().enumerate() {
            state.lambda_tilde.row_mut(j).assign(&row);
            for h in 0..k {
                state.lambda[(j, h)] =
                    (state.phi[(j, h)] * state.rho[h]) as f64 * state.lambda_tilde[(j, h)];
            }
        }
        Ok(())
    }

    /// Log weights of the slab-assignment indicator for column `h`, given the
    /// current residual R = eps - eta Lambda^T. Exposed to the unit tests,
    /// which compare them against brute-force density evaluation.
    pub(crate) fn xi_log_weights(&self, state: &ChainState, resid: &Array2<f64>, h: usize) -> Vec<f64> {
        let k = state.k_star;
        let eta_h = state.eta.column(h);
        let s_eta: f64 = eta_h.iter().map(|e| e * e).sum();
        // t1_j = sum_i R_ij eta_ih
        let t1 = resid.t().dot(&eta_h);
        let mut delta_excl = 0.0;
        let mut delta_incl = 0.0;
        if state.rho[h] == 1 {
            for j in 0..self.p {
                let l = state.lambda[(j, h)];
                if l != 0.0 {
                    delta_excl -= 0.5 / state.sigma2[j] * (2.0 * l * t1[j] + l * l * s_eta);
                }
            }
        } else {
            for j in 0..self.p {
                let l = state.phi[(j, h)] as f64 * state.lambda_tilde[(j, h)];
                if l != 0.0 {
                    delta_incl -= 0.5 / state.sigma2[j] * (-2.0 * l * t1[j] + l * l * s_eta);
                }
            }
        }
        (0..k)
            .map(|l| {
                let prior = if state.u[l] > 0.0 {
                    state.u[l].ln()
                } else {
                    f64::NEG_INFINITY
                };
                prior + if l <= h { delta_excl } else { delta_incl }
            })
            .collect()
    }

    /// Step viii: slab indicators (sequential in h, with the loading column
    /// and residual patched immediately), then column scales, then sticks.
    pub fn update_rho_theta_sticks(&self, state: &mut ChainState, iter: usize) {
        let k = state.k_star;
        let mut resid = &state.eps - &state.eta.dot(&state.lambda.t());
        let mut xi = vec![0usize; k];

        for h in 0..k {
            let mut rng = self.stream(iter, Step::Xi, h);
            let log_w = self.xi_log_weights(state, &resid, h);
            let pick = sample_categorical_log(&log_w, &mut rng);
            xi[h] = pick;
            let rho_new = (pick > h) as u8;
            if rho_new != state.rho[h] {
                state.rho[h] = rho_new;
                // flip the effective column and patch R = eps - eta Lambda^T
                let eta_h = state.eta.column(h).to_owned();
                for j in 0..self.p {
                    let new_l = (state.phi[(j, h)] * rho_new) as f64 * state.lambda_tilde[(j, h)];
                    let delta = new_l - state.lambda[(j, h)];
                    if delta != 0.0 {
                        state.lambda[(j, h)] = new_l;
                        for i in 0..self.n {
                            resid[(i, j)] -= eta_h[i] * delta;
                        }
                    }
                }
            }
        }

        for h in 0..k {
            let mut rng = self.stream(iter, Step::Theta, h);
            let ssq: f64 = state.lambda_tilde.column(h).iter().map(|l| l * l).sum();
            let draw = sample_gamma(
                self.hp.a_theta + 0.5 * self.p as f64,
                self.hp.b_theta + 0.5 * ssq,
                &mut rng,
            );
            state.vartheta[h] = 1.0 / draw;
        }

        for l in 0..k {
            if l + 1 == k {
                state.v[l] = 1.0;
            } else {
                let mut rng = self.stream(iter, Step::Sticks, l);
                let hits = xi.iter().filter(|&&x| x == l).count() as f64;
                let above = xi.iter().filter(|&&x| x > l).count() as f64;
                state.v[l] = sample_beta(1.0 + hits, self.hp.alpha + above, &mut rng);
            }
        }
        state.refresh_sticks();
    }

    /// Log odds (lw1 - lw0) for phi_jh of an active column given the current
    /// residual column; exposed to the unit tests.
    pub(crate) fn phi_log_odds(
        &self,
        state: &ChainState,
        resid_col_dot_eta: f64,
        s_eta: f64,
        j: usize,
        h: usize,
        s: f64,
    ) -> f64 {
        let c_p = self.hp.c_p;
        let s2_inv = 1.0 / state.sigma2[j];
        let old = state.phi[(j, h)] as f64;
        let lt = state.lambda_tilde[(j, h)];
        let t0 = old * lt;
        let t1 = (1.0 - old) * lt;
        let lw0 = (1.0 - s * c_p).ln() - 0.5 * s2_inv * (2.0 * t0 * resid_col_dot_eta + t0 * t0 * s_eta);
        let lw1 = (s * c_p).ln() - 0.5 * s2_inv * (-2.0 * t1 * resid_col_dot_eta + t1 * t1 * s_eta);
        lw1 - lw0
    }

    /// Step ix: local scale indicators. Shrunk columns draw from the prior
    /// form; active columns use the likelihood-adjusted form, sequential in h
    /// and parallel over genes, refreshing the loading after each draw.
    pub fn update_phi(&self, state: &mut ChainState, iter: usize) {
        let k = state.k_star;
        let c_p = self.hp.c_p;
        let linpred = if self.opts.phi_mode == PhiPrior::FixedHalf {
            Array2::zeros((self.p, k))
        } else {
            self.cov.w_b.dot(&state.gamma_b)
        };

        let shrunk: Vec<usize> = (0..k).filter(|&h| state.rho[h] == 0).collect();
        if !shrunk.is_empty() {
            state
                .phi
                .axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(j, mut phi_row)| {
                    let mut rng = self.stream(iter, Step::Phi, j);
                    for &h in &shrunk {
                        let s = logit_inv(linpred[(j, h)]);
                        phi_row[h] = (rng.uniform() < c_p * s) as u8;
                        // rho is zero, so the effective loading stays zero
                    }
                });
        }

        let active: Vec<usize> = (0..k).filter(|&h| state.rho[h] == 1).collect();
        if active.is_empty() {
            return;
        }
        let mut resid = &state.eps - &state.eta.dot(&state.lambda.t());
        let p = self.p;
        for &h in &active {
            let eta_h = state.eta.column(h).to_owned();
            let s_eta: f64 = eta_h.iter().map(|e| e * e).sum();
            // split-borrow views so the parallel loop owns disjoint columns
            let phi_col_snapshot: Vec<u8> = (0..p).map(|j| state.phi[(j, h)]) .collect();
            let sigma2 = &state.sigma2;
            let lambda_tilde = &state.lambda_tilde;
            let hp_cp = c_p;
            let results: Vec<(u8, f64)> = resid
                .axis_iter_mut(Axis(1))
                .into_par_iter()
                .enumerate()
                .map(|(j, mut r_col)| {
                    let mut rng = self.stream(iter, Step::PhiActive, h * p + j);
                    let s = logit_inv(linpred[(j, h)]);
                    let a: f64 = r_col.iter().zip(eta_h.iter()).map(|(r, e)| r * e).sum();
                    let s2_inv = 1.0 / sigma2[j];
                    let old = phi_col_snapshot[j] as f64;
                    let lt = lambda_tilde[(j, h)];
                    let t0 = old * lt;
                    let t1 = (1.0 - old) * lt;
                    let lw0 =
                        (1.0 - s * hp_cp).ln() - 0.5 * s2_inv * (2.0 * t0 * a + t0 * t0 * s_eta);
                    let lw1 =
                        (s * hp_cp).ln() - 0.5 * s2_inv * (-2.0 * t1 * a + t1 * t1 * s_eta);
                    let p1 = 1.0 / (1.0 + (lw0 - lw1).exp());
                    let new = (rng.uniform() < p1) as u8;
                    let new_l = new as f64 * lt;
                    let delta = new_l - old * lt;
                    if delta != 0.0 {
                        for (r, e) in r_col.iter_mut().zip(eta_h.iter()) {
                            *r -= e * delta;
                        }
                    }
                    (new, new_l)
                })
                .collect();
            for (j, (new, new_l)) in results.into_iter().enumerate() {
                state.phi[(j, h)] = new;
                state.lambda[(j, h)] = new_l;
            }
        }
    }
}
