//! Dimension-reduction baseline: principal component analysis on Pearson
//! residuals of the null Poisson model (independent row and column effects),
//! with masked entries imputed at the null model. The truncated SVD is
//! computed from the Gram matrix of the smaller side.

use crate::model::CountMatrix;
use ndarray::{Array1, Array2};

/// Floor applied to null-model means when a row or column total vanishes.
const MU_FLOOR: f64 = 1e-8;

/// Rank-k Pearson-residual PCA fit.
#[derive(Debug, Clone)]
pub struct PcaFit {
    /// Null-model means mu_ij = row_i * col_j / grand (observed entries only).
    pub mu: Array2<f64>,
    /// Real-valued reconstruction mu + sqrt(mu) * residual_k, clamped at 0.
    pub reconstruction: Array2<f64>,
    /// Score vectors u_i * s_i, n x k.
    pub scores: Array2<f64>,
    /// Loading vectors v_i, p x k.
    pub loadings: Array2<f64>,
    pub singular_values: Vec<f64>,
}

impl PcaFit {
    pub fn k(&self) -> usize {
        self.singular_values.len()
    }

    /// Rank-one layer s_h u_h v_h^T of the residual SVD.
    pub fn contribution_factors(&self, h: usize) -> (Array1<f64>, Array1<f64>) {
        (self.scores.column(h).to_owned(), self.loadings.column(h).to_owned())
    }

    /// Reconstruction rounded to the nearest nonnegative count.
    pub fn predicted_counts(&self) -> Array2<f64> {
        self.reconstruction.mapv(|v| v.max(0.0).round())
    }
}

/// Fits the rank-k Pearson-residual PCA to the observed entries of `y`.
pub fn baseline_pearson_pca(y: &CountMatrix, k: usize) -> PcaFit {
    let (n, p) = (y.n(), y.p());
    assert!(k >= 1 && k <= n.min(p), "rank k must lie in 1..=min(n,p)");

    let mut row_tot = vec![0.0f64; n];
    let mut col_tot = vec![0.0f64; p];
    let mut grand = 0.0f64;
    for ((i, j), &v) in y.values.indexed_iter() {
        if !y.is_masked(i, j) {
            let v = v as f64;
            row_tot[i] += v;
            col_tot[j] += v;
            grand += v;
        }
    }

    let mut mu = Array2::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            let m = if grand > 0.0 {
                row_tot[i] * col_tot[j] / grand
            } else {
                0.0
            };
            mu[(i, j)] = m.max(MU_FLOOR);
        }
    }

    // Pearson residuals; masked entries imputed at the null model (residual 0).
    let mut resid = Array2::zeros((n, p));
    for ((i, j), &v) in y.values.indexed_iter() {
        if !y.is_masked(i, j) {
            resid[(i, j)] = (v as f64 - mu[(i, j)]) / mu[(i, j)].sqrt();
        }
    }

    let (scores, loadings, singular_values) = truncated_svd(&resid, k);

    // residual_k = scores * loadings^T  (scores already carry the singular values)
    let resid_k = scores.dot(&loadings.t());
    let mut reconstruction = Array2::zeros((n, p));
    for ((i, j), r) in resid_k.indexed_iter() {
        reconstruction[(i, j)] = (mu[(i, j)] + mu[(i, j)].sqrt() * r).max(0.0);
    }

    PcaFit {
        mu,
        reconstruction,
        scores,
        loadings,
        singular_values,
    }
}

/// Top-k SVD of `m` via the symmetric eigendecomposition of the smaller Gram
/// matrix. Returns (u * s as n x k, v as p x k, singular values desc).
fn truncated_svd(m: &Array2<f64>, k: usize) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let (n, p) = m.dim();
    let by_rows = n <= p;
    let dim = n.min(p);
    let gram = if by_rows {
        m.dot(&m.t())
    } else {
        m.t().dot(m)
    };
    let na = nalgebra::DMatrix::from_row_iterator(dim, dim, gram.iter().cloned());
    let eig = na.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut scores = Array2::zeros((n, k));
    let mut loadings = Array2::zeros((p, k));
    let mut singular_values = Vec::with_capacity(k);
    for (slot, &idx) in order.iter().take(k).enumerate() {
        let s = eig.eigenvalues[idx].max(0.0).sqrt();
        singular_values.push(s);
        let w: Vec<f64> = eig.eigenvectors.column(idx).iter().cloned().collect();
        if by_rows {
            // u = eigenvector, v = M^T u / s
            for i in 0..n {
                scores[(i, slot)] = s * w[i];
            }
            if s > 0.0 {
                for j in 0..p {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += m[(i, j)] * w[i];
                    }
                    loadings[(j, slot)] = acc / s;
                }
            }
        } else {
            // v = eigenvector, u = M v / s
            for j in 0..p {
                loadings[(j, slot)] = w[j];
            }
            if s > 0.0 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..p {
                        acc += m[(i, j)] * w[j];
                    }
                    scores[(i, slot)] = acc;
                }
                // scores currently hold u * s since M v = s u
            }
        }
    }
    (scores, loadings, singular_values)
}
