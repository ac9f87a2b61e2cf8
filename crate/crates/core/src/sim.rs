//! Synthetic data generation for the benchmark scenarios: a zero-mean
//! three-contribution truth with row-sparse and column-sparse layers, counts
//! through the rounded-exponential link, and uniform random holdout masks.

use crate::model::{apply_link, CountMatrix};
use crate::rng::{derive_seed, RngStream};
use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};

/// Stream tags of the per-replicate seed space.
const DGP_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;

/// One synthetic-benchmark cell: data dimensions, idiosyncratic standard
/// deviation, replicate seed, and holdout fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimScenario {
    pub n: usize,
    pub p: usize,
    pub sigma: f64,
    pub replicate_seed: u64,
    pub holdout_fraction: f64,
}

impl SimScenario {
    pub fn new(n: usize, p: usize, sigma: f64, replicate_seed: u64) -> Self {
        assert!(sigma > 0.0);
        Self {
            n,
            p,
            sigma,
            replicate_seed,
            holdout_fraction: 0.25,
        }
    }
}

/// Ground truth of one synthetic replicate.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub z_true: Array2<f64>,
    /// The three rank-one contributions; the second is row-sparse (rows past
    /// n/2 are near zero) and the third column-sparse (columns past p/2).
    pub contributions: [Array2<f64>; 3],
    /// Score and loading factors behind the contributions.
    pub eta: Array2<f64>,
    pub lambda: Array2<f64>,
    /// Biological meta-covariate: 1 for the first p/2 genes, else 0.
    pub w_b: Array2<f64>,
    pub y: CountMatrix,
}

/// Draws one replicate of the data generating process:
/// eta_1, eta_3 ~ N(0, I_n); lambda_1, lambda_2 ~ N(0, I_p);
/// eta_i2 = 1 for i <= n/2, else N(0, 0.05^2);
/// lambda_j3 = 1 for j <= p/2, else N(0, 0.05^2);
/// z = C1 + C2 + C3 + eps with eps ~ N(0, sigma^2), y = floor(exp(z)).
pub fn generate(scenario: &SimScenario) -> SimTruth {
    let (n, p) = (scenario.n, scenario.p);
    let mut rng = RngStream::new(scenario.replicate_seed, DGP_STREAM);
    let mut gauss = |len: usize, sd: f64| -> Array1<f64> {
        Array1::from_iter((0..len).map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            sd * g
        }))
    };

    let eta1 = gauss(n, 1.0);
    let eta3 = gauss(n, 1.0);
    let lam1 = gauss(p, 1.0);
    let lam2 = gauss(p, 1.0);
    let mut eta2 = Array1::from_elem(n, 1.0);
    for i in (n / 2)..n {
        let g: f64 = StandardNormal.sample(&mut rng);
        eta2[i] = 0.05 * g;
    }
    let mut lam3 = Array1::from_elem(p, 1.0);
    for j in (p / 2)..p {
        let g: f64 = StandardNormal.sample(&mut rng);
        lam3[j] = 0.05 * g;
    }

    let outer = |u: &Array1<f64>, v: &Array1<f64>| -> Array2<f64> {
        let mut c = Array2::zeros((n, p));
        for (i, &ui) in u.iter().enumerate() {
            for (j, &vj) in v.iter().enumerate() {
                c[(i, j)] = ui * vj;
            }
        }
        c
    };
    let c1 = outer(&eta1, &lam1);
    let c2 = outer(&eta2, &lam2);
    let c3 = outer(&eta3, &lam3);

    let mut z = &(&c1 + &c2) + &c3;
    for v in z.iter_mut() {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v += scenario.sigma * g;
    }
    let mut counts = Array2::zeros((n, p));
    for (c, &zv) in counts.iter_mut().zip(z.iter()) {
        *c = apply_link(zv);
    }

    let mut eta = Array2::zeros((n, 3));
    let mut lambda = Array2::zeros((p, 3));
    for i in 0..n {
        eta[(i, 0)] = eta1[i];
        eta[(i, 1)] = eta2[i];
        eta[(i, 2)] = eta3[i];
    }
    for j in 0..p {
        lambda[(j, 0)] = lam1[j];
        lambda[(j, 1)] = lam2[j];
        lambda[(j, 2)] = lam3[j];
    }
    let mut w_b = Array2::zeros((p, 1));
    for j in 0..(p / 2) {
        w_b[(j, 0)] = 1.0;
    }

    SimTruth {
        z_true: z,
        contributions: [c1, c2, c3],
        eta,
        lambda,
        w_b,
        y: CountMatrix::new(counts).expect("non-empty count matrix"),
    }
}

/// Masks `floor(fraction * n * p)` entries uniformly at random without
/// replacement (partial Fisher-Yates on the flat index space).
pub fn mask_holdout(y: &CountMatrix, fraction: f64, rng: &mut RngStream) -> CountMatrix {
    assert!((0.0..1.0).contains(&fraction));
    let (n, p) = (y.n(), y.p());
    let total = n * p;
    let count = (fraction * total as f64).floor() as usize;
    let mut indices: Vec<usize> = (0..total).collect();
    let mut mask = Array2::from_elem((n, p), false);
    for s in 0..count {
        let r = s + (rng.uniform() * (total - s) as f64) as usize;
        indices.swap(s, r.min(total - 1));
        let idx = indices[s];
        mask[(idx / p, idx % p)] = true;
    }
    CountMatrix::with_mask(y.values.clone(), mask).expect("mask dims match")
}

/// Convenience: generate + mask with the scenario's own streams.
pub fn generate_masked(scenario: &SimScenario) -> (SimTruth, CountMatrix) {
    let truth = generate(scenario);
    let mut rng = RngStream::new(scenario.replicate_seed, MASK_STREAM);
    let masked = mask_holdout(&truth.y, scenario.holdout_fraction, &mut rng);
    (truth, masked)
}

/// Per-replicate seed for a (scenario index, replicate index) pair under one
/// master seed.
pub fn replicate_seed(master: u64, scenario_index: usize, replicate: usize) -> u64 {
    derive_seed(derive_seed(master, scenario_index as u64), replicate as u64)
}
