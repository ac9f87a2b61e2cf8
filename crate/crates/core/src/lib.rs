//! COSIN: Bayesian structured infinite factorization of count matrices.
//!
//! A count matrix is linked to a latent Gaussian matrix through the
//! rounded-exponential operator `y = floor(exp(z))`; the latent mean combines
//! cell-covariate regression with a sparse factor decomposition whose loadings
//! carry a structured increasing shrinkage prior informed by gene-level
//! meta-covariates. The crate provides the adaptive Gibbs sampler, posterior
//! post-processing (contribution alignment, coefficient summaries, partial
//! correlation graphs, holdout prediction), the synthetic benchmark harness
//! with a Pearson-residual PCA baseline, and the CSV/CLI layer around them.

pub mod baseline;
pub mod bench;
pub mod gibbs;
pub mod model;
pub mod postprocess;
pub mod rng;
pub mod sim;
