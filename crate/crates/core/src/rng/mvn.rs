//! Gaussian sampling in the precision parameterization N(P^-1 b, P^-1),
//! factored once per precision matrix so conjugate updates that share a
//! precision can reuse the Cholesky factor.

use super::{DistError, RngStream};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};

/// Guard against accidentally routing huge systems through the dense sampler.
pub const MAX_MVN_DIM: usize = 512;

/// Cholesky-factored precision matrix.
#[derive(Debug)]
pub struct PrecisionSampler {
    chol: Cholesky<f64, Dyn>,
    lower: DMatrix<f64>,
    dim: usize,
}

impl PrecisionSampler {
    pub fn new(precision: &Array2<f64>) -> Result<Self, DistError> {
        let dim = precision.nrows();
        assert_eq!(dim, precision.ncols(), "precision matrix must be square");
        if dim > MAX_MVN_DIM {
            return Err(DistError::DimTooLarge { dim, cap: MAX_MVN_DIM });
        }
        // ndarray is row-major; the matrix is symmetric so the order is moot.
        let m = DMatrix::from_row_iterator(dim, dim, precision.iter().cloned());
        let chol = Cholesky::new(m).ok_or(DistError::NotPositiveDefinite { dim })?;
        let lower = chol.l();
        Ok(Self { chol, lower, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Posterior mean P^-1 b.
    pub fn mean(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let bv = DVector::from_column_slice(b.as_slice().expect("contiguous vector"));
        let m = self.chol.solve(&bv);
        Array1::from_iter(m.iter().cloned())
    }

    /// One draw from N(P^-1 b, P^-1).
    pub fn sample(&self, b: ArrayView1<f64>, rng: &mut RngStream) -> Array1<f64> {
        let mean = self.mean(b);
        let w = DVector::from_iterator(self.dim, (0..self.dim).map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g
        }));
        // Solve L^T s = w, so cov(s) = (L L^T)^-1 = P^-1.
        let s = self
            .lower
            .tr_solve_lower_triangular(&w)
            .expect("Cholesky factor is invertible");
        let mut out = mean;
        for (o, si) in out.iter_mut().zip(s.iter()) {
            *o += si;
        }
        out
    }
}

/// One-shot draw from N(P^-1 b, P^-1); factors `precision` internally.
pub fn sample_mvn_precision(
    b: ArrayView1<f64>,
    precision: &Array2<f64>,
    rng: &mut RngStream,
) -> Result<Array1<f64>, DistError> {
    Ok(PrecisionSampler::new(precision)?.sample(b, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_precision_gives_standard_normal() {
        let prec = Array2::eye(3);
        let b = Array1::zeros(3);
        let mut rng = RngStream::new(41, 0);
        let sampler = PrecisionSampler::new(&prec).unwrap();
        let n = 100_000;
        let draws: Vec<Array1<f64>> = (0..n).map(|_| sampler.sample(b.view(), &mut rng)).collect();
        let mut mean = Array1::<f64>::zeros(3);
        for d in &draws {
            mean += d;
        }
        mean /= n as f64;
        let mut cov = Array2::<f64>::zeros((3, 3));
        for d in &draws {
            let c = d - &mean;
            for i in 0..3 {
                for j in 0..3 {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        cov /= (n - 1) as f64;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (cov[(i, j)] - expect).abs() < 0.02,
                    "cov[{i},{j}] = {}",
                    cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn diagonal_solve_mean() {
        let prec = array![[4.0, 0.0], [0.0, 1.0]];
        let b = array![1.0, 0.0];
        let mut rng = RngStream::new(42, 0);
        let sampler = PrecisionSampler::new(&prec).unwrap();
        let exact = sampler.mean(b.view());
        assert!((exact[0] - 0.25).abs() < 1e-12 && exact[1].abs() < 1e-12);
        let n = 100_000;
        let mut mean = Array1::<f64>::zeros(2);
        for _ in 0..n {
            mean += &sampler.sample(b.view(), &mut rng);
        }
        mean /= n as f64;
        assert!((mean[0] - 0.25).abs() < 0.01, "mean {mean}");
        assert!(mean[1].abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn random_system_matches_lu_oracle() {
        // fixed arbitrary PD system
        let mut rng = RngStream::new(43, 0);
        let dim = 5;
        let mut m = Array2::<f64>::zeros((dim, dim));
        for v in m.iter_mut() {
            *v = rng.uniform() * 2.0 - 1.0;
        }
        let prec = m.t().dot(&m) + Array2::<f64>::eye(dim) * 2.0;
        let b = Array1::from_iter((0..dim).map(|_| rng.uniform() * 4.0 - 2.0));

        // oracle: dense LU solve, a different factorization path
        let na = DMatrix::from_row_iterator(dim, dim, prec.iter().cloned());
        let bv = DVector::from_column_slice(b.as_slice().unwrap());
        let oracle = na.lu().solve(&bv).unwrap();

        let sampler = PrecisionSampler::new(&prec).unwrap();
        let n = 100_000;
        let mut mean = Array1::<f64>::zeros(dim);
        for _ in 0..n {
            mean += &sampler.sample(b.view(), &mut rng);
        }
        mean /= n as f64;
        for i in 0..dim {
            assert!(
                (mean[i] - oracle[i]).abs() < 0.01,
                "component {i}: {} vs oracle {}",
                mean[i],
                oracle[i]
            );
        }
    }

    #[test]
    fn non_positive_definite_reports_dimension() {
        let prec = array![[1.0, 2.0], [2.0, 1.0]]; // indefinite
        match PrecisionSampler::new(&prec) {
            Err(DistError::NotPositiveDefinite { dim }) => assert_eq!(dim, 2),
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn dimension_cap_enforced() {
        let prec = Array2::<f64>::eye(MAX_MVN_DIM + 1);
        assert!(matches!(
            PrecisionSampler::new(&prec),
            Err(DistError::DimTooLarge { .. })
        ));
    }
}
