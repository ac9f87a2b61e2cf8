//! Posterior post-processing: identifiable point estimates from a
//! [`DrawStore`]. Factor loadings and scores are only identified up to column
//! permutations, so draws are aligned to the final iteration's contributions
//! (sorted by decreasing Frobenius norm) by greedy nearest matching before
//! averaging. Also: coefficient summary tables, partial-correlation gene
//! graphs from the low-rank-plus-diagonal covariance, and holdout prediction.

use crate::gibbs::DrawStore;
use crate::model::{apply_link_reporting, CountMatrix, Covariates};
use crate::rng::RngStream;
use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PostError {
    #[error("draw store is empty")]
    EmptyStore,
    #[error("no masked entries to predict")]
    EmptyMask,
    #[error("quantile level {0} outside (0, 1)")]
    BadLevel(f64),
}

/// Draw-aligned rank-one contributions.
#[derive(Debug, Clone)]
pub struct AlignedContributions {
    /// Column order applied to the final draw (reference), by descending
    /// Frobenius norm.
    pub reference_order: Vec<usize>,
    /// Frobenius norms of the reference contributions, nonincreasing.
    pub frobenius_norms: Vec<f64>,
    /// For each draw, the draw column matched to each reference slot
    /// (`None` when the draw has fewer columns than the reference).
    pub per_draw_permutations: Vec<Vec<Option<usize>>>,
    /// Per-slot mean contribution over all draws (unmatched slots count as
    /// zero matrices).
    pub mean_contributions: Vec<Array2<f64>>,
    /// Mean of surplus draw columns that had no reference slot; a diagnostic,
    /// not part of the estimate.
    pub residual_mean: Option<Array2<f64>>,
    /// Number of surplus columns folded into `residual_mean`.
    pub surplus_columns: usize,
}

/// Frobenius norm of the rank-one matrix u v^T.
fn rank_one_norm(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    nu * nv
}

/// Squared Frobenius distance between rank-one matrices a b^T and c d^T.
fn rank_one_dist2(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    c: ArrayView1<f64>,
    d: ArrayView1<f64>,
) -> f64 {
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    let cc: f64 = c.iter().map(|x| x * x).sum();
    let dd: f64 = d.iter().map(|x| x * x).sum();
    let ac: f64 = a.iter().zip(c.iter()).map(|(x, y)| x * y).sum();
    let bd: f64 = b.iter().zip(d.iter()).map(|(x, y)| x * y).sum();
    (aa * bb - 2.0 * ac * bd + cc * dd).max(0.0)
}

/// Aligns every draw's contributions to the final draw's, sorted by
/// decreasing Frobenius norm, and averages per slot.
pub fn align_contributions(store: &DrawStore) -> Result<AlignedContributions, PostError> {
    let last = store.draws.last().ok_or(PostError::EmptyStore)?;
    let (n, p) = (store.meta.n, store.meta.p);

    let mut order: Vec<usize> = (0..last.k_star).collect();
    let mut norms: Vec<f64> = (0..last.k_star)
        .map(|h| rank_one_norm(last.eta.column(h), last.lambda.column(h)))
        .collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));
    let reference_order = order;
    norms.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k_ref = reference_order.len();

    let mut means: Vec<Array2<f64>> = (0..k_ref).map(|_| Array2::zeros((n, p))).collect();
    let mut residual = Array2::<f64>::zeros((n, p));
    let mut surplus_columns = 0usize;
    let mut per_draw = Vec::with_capacity(store.draws.len());

    for draw in &store.draws {
        let k_t = draw.k_star;
        let mut taken = vec![false; k_t];
        let mut perm: Vec<Option<usize>> = Vec::with_capacity(k_ref);
        for slot in 0..k_ref {
            let ref_col = reference_order[slot];
            let ru = last.eta.column(ref_col);
            let rv = last.lambda.column(ref_col);
            let mut best: Option<(usize, f64)> = None;
            for l in 0..k_t {
                if taken[l] {
                    continue;
                }
                let d2 = rank_one_dist2(ru, rv, draw.eta.column(l), draw.lambda.column(l));
                if best.is_none_or(|(_, bd)| d2 < bd) {
                    best = Some((l, d2));
                }
            }
            match best {
                Some((l, _)) => {
                    taken[l] = true;
                    perm.push(Some(l));
                    accumulate_outer(&mut means[slot], draw.eta.column(l), draw.lambda.column(l));
                }
                None => perm.push(None),
            }
        }
        for l in 0..k_t {
            if !taken[l] {
                surplus_columns += 1;
                accumulate_outer(&mut residual, draw.eta.column(l), draw.lambda.column(l));
            }
        }
        per_draw.push(perm);
    }

    let t = store.draws.len() as f64;
    for m in &mut means {
        *m /= t;
    }
    let residual_mean = if surplus_columns > 0 {
        let r = residual / surplus_columns as f64;
        log::info!(
            "alignment: {surplus_columns} surplus columns folded into a residual diagnostic (|residual| = {:.4})",
            r.iter().map(|x| x * x).sum::<f64>().sqrt()
        );
        Some(r)
    } else {
        None
    };

    Ok(AlignedContributions {
        reference_order,
        frobenius_norms: norms,
        per_draw_permutations: per_draw,
        mean_contributions: means,
        residual_mean,
        surplus_columns,
    })
}

fn accumulate_outer(target: &mut Array2<f64>, u: ArrayView1<f64>, v: ArrayView1<f64>) {
    for (i, &ui) in u.iter().enumerate() {
        if ui != 0.0 {
            let mut row = target.row_mut(i);
            for (j, &vj) in v.iter().enumerate() {
                row[j] += ui * vj;
            }
        }
    }
}

/// The retained draw whose aligned contributions are closest (in summed
/// Frobenius distance) to the aligned means; ties go to the earliest draw.
/// Returns the draw index with its factor scores and loadings.
pub fn representative_draw(
    store: &DrawStore,
    aligned: &AlignedContributions,
) -> Result<(usize, Array2<f64>, Array2<f64>), PostError> {
    if store.draws.is_empty() {
        return Err(PostError::EmptyStore);
    }
    let k_ref = aligned.mean_contributions.len();
    let mean_norm2: Vec<f64> = aligned
        .mean_contributions
        .iter()
        .map(|m| m.iter().map(|x| x * x).sum())
        .collect();

    let scores: Vec<f64> = store
        .draws
        .par_iter()
        .enumerate()
        .map(|(t, draw)| {
            let mut total = 0.0;
            for slot in 0..k_ref {
                let d2 = match aligned.per_draw_permutations[t][slot] {
                    Some(l) => {
                        let u = draw.eta.column(l);
                        let v = draw.lambda.column(l);
                        let uu: f64 = u.iter().map(|x| x * x).sum();
                        let vv: f64 = v.iter().map(|x| x * x).sum();
                        // u^T M v
                        let mv = aligned.mean_contributions[slot].dot(&v);
                        let umv: f64 = u.iter().zip(mv.iter()).map(|(a, b)| a * b).sum();
                        (uu * vv - 2.0 * umv + mean_norm2[slot]).max(0.0)
                    }
                    None => mean_norm2[slot],
                };
                total += d2.sqrt();
            }
            total
        })
        .collect();

    let mut best = 0usize;
    for (t, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = t;
        }
    }
    let draw = &store.draws[best];
    Ok((best, draw.eta.clone(), draw.lambda.clone()))
}

/// Linear-interpolation quantile of a sorted slice.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// One row of the coefficient summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaSummaryRow {
    pub covariate: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Genes whose equal-tailed credible interval at the requested level
    /// excludes zero.
    pub excluding_zero: usize,
}

/// Quantiles of the per-gene posterior-mean coefficients for each covariate,
/// plus the count of genes whose credible interval excludes zero.
pub fn summarize_beta(store: &DrawStore, level: f64) -> Result<Vec<BetaSummaryRow>, PostError> {
    if store.draws.is_empty() {
        return Err(PostError::EmptyStore);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(PostError::BadLevel(level));
    }
    let (d, p) = (store.meta.d, store.meta.p);
    let t = store.draws.len();
    let tail = 0.5 * (1.0 - level);
    let mut rows = Vec::with_capacity(d);
    for l in 0..d {
        let mut means = Vec::with_capacity(p);
        let mut excluding = 0usize;
        for j in 0..p {
            let mut draws: Vec<f64> = (0..t).map(|s| store.draws[s].beta[(l, j)]).collect();
            means.push(draws.iter().sum::<f64>() / t as f64);
            draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let lo = quantile_sorted(&draws, tail);
            let hi = quantile_sorted(&draws, 1.0 - tail);
            if lo > 0.0 || hi < 0.0 {
                excluding += 1;
            }
        }
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(BetaSummaryRow {
            covariate: l,
            min: means[0],
            q1: quantile_sorted(&means, 0.25),
            median: quantile_sorted(&means, 0.5),
            q3: quantile_sorted(&means, 0.75),
            max: means[p - 1],
            excluding_zero: excluding,
        });
    }
    Ok(rows)
}

/// Which matrix gets inverted for the gene graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GraphForm {
    /// Invert the correlation matrix of Omega = Lambda Lambda^T + Sigma.
    #[default]
    Correlation,
    /// Invert Omega itself.
    Covariance,
}

/// Thresholded partial-correlation graph over genes.
#[derive(Debug, Clone)]
pub struct GeneGraph {
    pub p: usize,
    pub threshold: f64,
    /// Edges (j, j') with j < j' and |weight| >= threshold, sorted by (j, j').
    pub edges: Vec<(usize, usize, f64)>,
    /// Draws skipped because their covariance could not be factored.
    pub flagged_draws: usize,
}

/// Posterior-mean partial correlations of Omega = Lambda Lambda^T + Sigma,
/// inverted in correlation form by default. The low-rank-plus-diagonal
/// structure is inverted by the Woodbury identity, so no p x p factorization
/// is formed.
pub fn covariance_graph(
    store: &DrawStore,
    threshold: f64,
    form: GraphForm,
) -> Result<GeneGraph, PostError> {
    if store.draws.is_empty() {
        return Err(PostError::EmptyStore);
    }
    assert!(threshold >= 0.0, "threshold must be nonnegative");
    let p = store.meta.p;

    let per_chunk: Vec<(Array2<f64>, usize)> = store
        .draws
        .par_chunks(64)
        .map(|chunk| {
            let mut acc = Array2::<f64>::zeros((p, p));
            let mut flagged = 0usize;
            for draw in chunk {
                match draw_partial_correlations(draw, p, form) {
                    Some(pc) => acc += &pc,
                    None => flagged += 1,
                }
            }
            (acc, flagged)
        })
        .collect();

    let mut acc = Array2::<f64>::zeros((p, p));
    let mut flagged = 0usize;
    for (a, f) in per_chunk {
        acc += &a;
        flagged += f;
    }
    let used = store.draws.len() - flagged;
    if used == 0 {
        return Err(PostError::EmptyStore);
    }
    acc /= used as f64;

    let mut edges = Vec::new();
    for j in 0..p {
        for j2 in (j + 1)..p {
            let w = acc[(j, j2)];
            if w.abs() >= threshold {
                edges.push((j, j2, w));
            }
        }
    }
    Ok(GeneGraph {
        p,
        threshold,
        edges,
        flagged_draws: flagged,
    })
}

/// Partial correlations of one draw: -inv_ij / sqrt(inv_ii inv_jj) of the
/// (correlation- or covariance-form) precision via Woodbury.
fn draw_partial_correlations(
    draw: &crate::gibbs::Draw,
    p: usize,
    form: GraphForm,
) -> Option<Array2<f64>> {
    let k = draw.k_star;
    // diag(Omega)
    let mut omega_diag = Array1::<f64>::zeros(p);
    for j in 0..p {
        let lam_ssq: f64 = (0..k).map(|h| draw.lambda[(j, h)].powi(2)).sum();
        omega_diag[j] = lam_ssq + draw.sigma2[j];
    }
    // scaled loadings and diagonal for the requested form
    let mut lam = draw.lambda.clone();
    let mut dia = draw.sigma2.to_owned();
    if form == GraphForm::Correlation {
        for j in 0..p {
            let s = omega_diag[j].sqrt();
            if !(s > 0.0) {
                return None;
            }
            for h in 0..k {
                lam[(j, h)] /= s;
            }
            dia[j] /= omega_diag[j];
        }
    }
    if dia.iter().any(|&v| !(v > 0.0)) {
        return None;
    }
    // Woodbury: inv = D^-1 - D^-1 L (I + L^T D^-1 L)^-1 L^T D^-1
    let mut dinv_l = lam.clone();
    for j in 0..p {
        let di = 1.0 / dia[j];
        for h in 0..k {
            dinv_l[(j, h)] *= di;
        }
    }
    let mut small = lam.t().dot(&dinv_l); // k x k
    for h in 0..k {
        small[(h, h)] += 1.0;
    }
    let na = nalgebra::DMatrix::from_row_iterator(k, k, small.iter().cloned());
    let chol = match nalgebra::Cholesky::new(na) {
        Some(c) => c,
        None => {
            // jitter once, mirroring the sampler policy, then flag
            let mut jit = small.clone();
            let md = jit.diag().sum() / k.max(1) as f64;
            for h in 0..k {
                jit[(h, h)] += 1e-8 * md.abs().max(1e-300);
            }
            let na2 = nalgebra::DMatrix::from_row_iterator(k, k, jit.iter().cloned());
            nalgebra::Cholesky::new(na2)?
        }
    };
    let inv_small = chol.inverse();
    let mut inv_small_nd = Array2::<f64>::zeros((k, k));
    for a in 0..k {
        for b in 0..k {
            inv_small_nd[(a, b)] = inv_small[(a, b)];
        }
    }
    // correction = (D^-1 L) inv_small (D^-1 L)^T
    let half = dinv_l.dot(&inv_small_nd); // p x k
    let mut inv = Array2::<f64>::zeros((p, p));
    for j in 0..p {
        for j2 in 0..p {
            let mut corr = 0.0;
            for h in 0..k {
                corr += half[(j, h)] * dinv_l[(j2, h)];
            }
            inv[(j, j2)] = -corr;
        }
        inv[(j, j)] += 1.0 / dia[j];
    }
    // partial correlations
    let mut pc = Array2::<f64>::zeros((p, p));
    for j in 0..p {
        for j2 in 0..p {
            if j != j2 {
                pc[(j, j2)] = -inv[(j, j2)] / (inv[(j, j)] * inv[(j2, j2)]).sqrt();
            }
        }
    }
    Some(pc)
}

/// Holdout predictions and error.
#[derive(Debug, Clone)]
pub struct HoldoutPrediction {
    /// Masked coordinates, row-major order.
    pub pairs: Vec<(usize, usize)>,
    /// Entrywise average of the per-draw predicted counts.
    pub mean_prediction: Vec<f64>,
    /// Mean absolute error per retained draw.
    pub per_draw_mae: Vec<f64>,
    /// Average of the per-draw errors.
    pub mae: f64,
    /// Count of saturated link applications across draws and entries.
    pub saturated: usize,
}

/// Plug-in conditional-mean holdout prediction: per draw,
/// `y_hat = floor(exp(x beta + eta lambda^T))` at the masked entries, scored
/// against the held-out counts and averaged over draws. `noise_seed` adds the
/// idiosyncratic Gaussian noise to the predictor before rounding (a
/// sensitivity variant, off by default).
pub fn predict_holdout(
    store: &DrawStore,
    cov: &Covariates,
    y: &CountMatrix,
    noise_seed: Option<u64>,
) -> Result<HoldoutPrediction, PostError> {
    if store.draws.is_empty() {
        return Err(PostError::EmptyStore);
    }
    let pairs = y.masked_pairs();
    if pairs.is_empty() {
        return Err(PostError::EmptyMask);
    }
    let t = store.draws.len();
    let mut mean_prediction = vec![0.0; pairs.len()];
    let mut per_draw_mae = Vec::with_capacity(t);
    let mut saturated = 0usize;
    for (ti, draw) in store.draws.iter().enumerate() {
        let mut rng = noise_seed.map(|s| RngStream::new(s, ti as u64));
        let mut abs_err = 0.0;
        for (idx, &(i, j)) in pairs.iter().enumerate() {
            let mut m = draw.predictor_at(&cov.x, i, j);
            if let Some(r) = rng.as_mut() {
                let g: f64 = StandardNormal.sample(r);
                m += draw.sigma2[j].sqrt() * g;
            }
            let (pred, sat) = apply_link_reporting(m);
            saturated += sat as usize;
            mean_prediction[idx] += pred as f64;
            abs_err += (pred as f64 - y.values[(i, j)] as f64).abs();
        }
        per_draw_mae.push(abs_err / pairs.len() as f64);
    }
    for v in &mut mean_prediction {
        *v /= t as f64;
    }
    let mae = per_draw_mae.iter().sum::<f64>() / t as f64;
    Ok(HoldoutPrediction {
        pairs,
        mean_prediction,
        per_draw_mae,
        mae,
        saturated,
    })
}
