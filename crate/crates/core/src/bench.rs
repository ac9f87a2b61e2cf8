//! Benchmark harness: fits the factorization model (with and without
//! meta-covariates) and the Pearson-residual PCA baseline on synthetic
//! replicates, scores held-out mean absolute error and per-contribution
//! RMSE under optimal matching, and aggregates medians and interquartile
//! ranges per scenario.

use crate::baseline::baseline_pearson_pca;
use crate::gibbs::{run_chain_with_options, ChainError, DrawStore, FitOptions};
use crate::model::{CountMatrix, Covariates, HyperParams};
use crate::postprocess::{predict_holdout, quantile_sorted};
use crate::rng::derive_seed;
use crate::sim::{generate_masked, replicate_seed, SimScenario, SimTruth};
use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Seed tags separating the two chain variants inside one replicate.
const SEED_TAG_META: u64 = 101;
const SEED_TAG_NOMETA: u64 = 102;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    CosinMeta,
    CosinNoMeta,
    BaselinePca,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::CosinMeta => "cosin",
            Method::CosinNoMeta => "cosin_nometa",
            Method::BaselinePca => "baseline_ppca",
        }
    }
}

/// Mean absolute error over the masked entries of `y`, with arbitrary
/// real-valued predictions.
pub fn mae(y: &CountMatrix, predictions: &Array2<f64>) -> f64 {
    let pairs = y.masked_pairs();
    assert!(!pairs.is_empty(), "mae needs a nonempty mask");
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| (y.values[(i, j)] as f64 - predictions[(i, j)]).abs())
        .sum();
    total / pairs.len() as f64
}

/// RMSE between a dense truth matrix and the rank-one estimate u v^T without
/// forming the outer product.
fn rank_one_rmse(truth: &Array2<f64>, truth_norm2: f64, u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    let uu: f64 = u.iter().map(|x| x * x).sum();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let tv = truth.dot(&v);
    let utv: f64 = u.iter().zip(tv.iter()).map(|(a, b)| a * b).sum();
    let frob2 = (truth_norm2 - 2.0 * utv + uu * vv).max(0.0);
    (frob2 / truth.len() as f64).sqrt()
}

/// Per-contribution RMSE of rank-one estimates against the three true
/// contributions, with the assignment chosen by exhaustive search over
/// injections of {1,2,3} into the estimate set minimizing the total. With
/// fewer than three estimates the missing slots score against zero matrices.
pub fn rmse_contributions(
    truth: &[Array2<f64>; 3],
    estimates: &[(ArrayView1<f64>, ArrayView1<f64>)],
) -> [f64; 3] {
    let truth_norm2: Vec<f64> = truth.iter().map(|c| c.iter().map(|x| x * x).sum()).collect();
    let zero_rmse: Vec<f64> = truth
        .iter()
        .zip(&truth_norm2)
        .map(|(c, &n2)| (n2 / c.len() as f64).sqrt())
        .collect();
    let m = estimates.len();
    // cost[h][l]: truth h against estimate l
    let cost: Vec<Vec<f64>> = (0..3)
        .map(|h| {
            (0..m)
                .map(|l| rank_one_rmse(&truth[h], truth_norm2[h], estimates[l].0, estimates[l].1))
                .collect()
        })
        .collect();

    let mut best = [0usize; 3].map(|_| None::<usize>);
    let mut best_total = f64::INFINITY;
    // options per slot: Some(l) or (only when m < 3) None = zero matrix
    let slots: Vec<Option<usize>> = (0..m)
        .map(Some)
        .chain(if m < 3 { Some(None) } else { None })
        .collect();
    for &a in &slots {
        for &b in &slots {
            if a.is_some() && a == b {
                continue;
            }
            for &c in &slots {
                if c.is_some() && (c == a || c == b) {
                    continue;
                }
                let pick = [a, b, c];
                if m >= 3 && pick.iter().any(|s| s.is_none()) {
                    continue;
                }
                let total: f64 = pick
                    .iter()
                    .enumerate()
                    .map(|(h, s)| match s {
                        Some(l) => cost[h][*l],
                        None => zero_rmse[h],
                    })
                    .sum();
                if total < best_total {
                    best_total = total;
                    best = pick;
                }
            }
        }
    }
    let mut out = [0.0; 3];
    for h in 0..3 {
        out[h] = match best[h] {
            Some(l) => cost[h][l],
            None => zero_rmse[h],
        };
    }
    out
}

/// Average over retained draws of the per-draw matched contribution RMSE.
pub fn cosin_rmse_over_draws(truth: &SimTruth, store: &DrawStore) -> [f64; 3] {
    let sums: Vec<[f64; 3]> = store
        .draws
        .par_iter()
        .map(|draw| {
            let estimates: Vec<(ArrayView1<f64>, ArrayView1<f64>)> = (0..draw.k_star)
                .map(|h| (draw.eta.column(h), draw.lambda.column(h)))
                .collect();
            rmse_contributions(&truth.contributions, &estimates)
        })
        .collect();
    let t = sums.len() as f64;
    let mut out = [0.0; 3];
    for s in sums {
        for h in 0..3 {
            out[h] += s[h] / t;
        }
    }
    out
}

/// Outcome of one (scenario, replicate, method) fit.
#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub scenario_index: usize,
    pub replicate: usize,
    pub method: Method,
    pub mae: f64,
    pub rmse: [f64; 3],
    /// Rank selected by the baseline (lowest MAE over its grid).
    pub baseline_k: Option<usize>,
    /// Mode over retained draws of the number of active factors.
    pub modal_active: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ScenarioSummary {
    pub scenario_index: usize,
    pub n: usize,
    pub p: usize,
    pub sigma: f64,
    pub method: Method,
    pub mae_median: f64,
    pub mae_iqr: f64,
    pub rmse_median: [f64; 3],
    pub rmse_iqr: [f64; 3],
    pub replicates_ok: usize,
    pub replicates_failed: usize,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub scenarios: Vec<(usize, usize, f64)>,
    pub methods: Vec<Method>,
    pub replicates: Vec<ReplicateResult>,
    pub summaries: Vec<ScenarioSummary>,
    pub failures: Vec<(usize, usize, Method, String)>,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// (n, p, sigma) grid.
    pub scenarios: Vec<(usize, usize, f64)>,
    pub replicates: usize,
    pub methods: Vec<Method>,
    /// Ranks scanned by the baseline; the per-replicate best MAE is reported.
    pub baseline_ks: Vec<usize>,
    /// Chain settings template (iterations/burn-in/thinning and priors); the
    /// truncation limits and seed are resolved per replicate.
    pub hyper: HyperParams,
    pub master_seed: u64,
    pub holdout_fraction: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![(50, 100, 1.0)],
            replicates: 10,
            methods: vec![Method::CosinMeta, Method::CosinNoMeta, Method::BaselinePca],
            baseline_ks: (2..=8).collect(),
            hyper: HyperParams::default(),
            master_seed: 20_240_101,
            holdout_fraction: 0.25,
        }
    }
}

/// The full Table-style grid: (n, p) over {(50,100), (200,100), (200,1000)}
/// and sigma over {0.1, 1.0}.
pub fn full_grid() -> Vec<(usize, usize, f64)> {
    let mut grid = Vec::new();
    for &(n, p) in &[(50usize, 100usize), (200, 100), (200, 1000)] {
        for &s in &[0.1, 1.0] {
            grid.push((n, p, s));
        }
    }
    grid
}

fn fit_cosin(
    truth: &SimTruth,
    masked: &CountMatrix,
    hp: &HyperParams,
    with_meta: bool,
    chain_seed: u64,
) -> Result<(f64, [f64; 3], usize, DrawStore), ChainError> {
    let (n, p) = (masked.n(), masked.p());
    let w_b = if with_meta {
        Some(truth.w_b.clone())
    } else {
        None
    };
    let cov = Covariates::new(Array2::from_elem((n, 1), 1.0), p, None, w_b);
    let mut hp = hp.clone();
    hp.resolve_truncation(n, p);
    hp.seed = chain_seed;
    let store = run_chain_with_options(masked, &cov, &hp, FitOptions::default())?;
    let pred = predict_holdout(&store, &cov, masked, None).expect("benchmark mask is nonempty");
    let rmse = cosin_rmse_over_draws(truth, &store);
    let modal = modal_active(&store);
    Ok((pred.mae, rmse, modal, store))
}

fn modal_active(store: &DrawStore) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for d in &store.draws {
        *counts.entry(d.n_active).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .max_by_key(|&(value, count)| (count, std::cmp::Reverse(value)))
        .map(|(value, _)| value)
        .unwrap_or(0)
}

fn fit_baseline(truth: &SimTruth, masked: &CountMatrix, ks: &[usize]) -> (f64, [f64; 3], usize) {
    let mut best: Option<(f64, usize)> = None;
    for &k in ks {
        if k > masked.n().min(masked.p()) {
            continue;
        }
        let fit = baseline_pearson_pca(masked, k);
        let err = mae(masked, &fit.predicted_counts());
        if best.is_none_or(|(b, _)| err < b) {
            best = Some((err, k));
        }
    }
    let (best_mae, best_k) = best.expect("baseline k grid must not be empty");
    let fit = baseline_pearson_pca(masked, best_k);
    let factors: Vec<_> = (0..best_k).map(|h| fit.contribution_factors(h)).collect();
    let estimates: Vec<(ArrayView1<f64>, ArrayView1<f64>)> =
        factors.iter().map(|(u, v)| (u.view(), v.view())).collect();
    let rmse = rmse_contributions(&truth.contributions, &estimates);
    (best_mae, rmse, best_k)
}

/// Runs the benchmark grid. Replicates are independent jobs; aggregation
/// order is fixed by (scenario, replicate, method) index.
pub fn run_benchmark(config: &BenchConfig) -> BenchReport {
    let jobs: Vec<(usize, usize)> = (0..config.scenarios.len())
        .flat_map(|s| (0..config.replicates).map(move |r| (s, r)))
        .collect();

    type JobOutcome = (usize, usize, Vec<Result<ReplicateResult, (Method, String)>>);
    let outcomes: Vec<JobOutcome> = jobs
        .par_iter()
        .map(|&(si, rep)| {
            let (n, p, sigma) = config.scenarios[si];
            let seed = replicate_seed(config.master_seed, si, rep);
            let mut scenario = SimScenario::new(n, p, sigma, seed);
            scenario.holdout_fraction = config.holdout_fraction;
            let (truth, masked) = generate_masked(&scenario);
            let mut results = Vec::new();
            for &method in &config.methods {
                let outcome = match method {
                    Method::CosinMeta | Method::CosinNoMeta => {
                        let with_meta = method == Method::CosinMeta;
                        let tag = if with_meta { SEED_TAG_META } else { SEED_TAG_NOMETA };
                        fit_cosin(&truth, &masked, &config.hyper, with_meta, derive_seed(seed, tag))
                            .map(|(m, rmse, modal, _)| ReplicateResult {
                                scenario_index: si,
                                replicate: rep,
                                method,
                                mae: m,
                                rmse,
                                baseline_k: None,
                                modal_active: Some(modal),
                            })
                            .map_err(|e| (method, e.to_string()))
                    }
                    Method::BaselinePca => {
                        let (m, rmse, k) = fit_baseline(&truth, &masked, &config.baseline_ks);
                        Ok(ReplicateResult {
                            scenario_index: si,
                            replicate: rep,
                            method,
                            mae: m,
                            rmse,
                            baseline_k: Some(k),
                            modal_active: None,
                        })
                    }
                };
                results.push(outcome);
            }
            (si, rep, results)
        })
        .collect();

    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (si, rep, results) in outcomes {
        for r in results {
            match r {
                Ok(res) => replicates.push(res),
                Err((method, msg)) => failures.push((si, rep, method, msg)),
            }
        }
    }

    let mut summaries = Vec::new();
    for si in 0..config.scenarios.len() {
        let (n, p, sigma) = config.scenarios[si];
        for &method in &config.methods {
            let rows: Vec<&ReplicateResult> = replicates
                .iter()
                .filter(|r| r.scenario_index == si && r.method == method)
                .collect();
            let failed = failures
                .iter()
                .filter(|(s, _, m, _)| *s == si && *m == method)
                .count();
            if rows.is_empty() {
                continue;
            }
            let med = |vals: &mut Vec<f64>| {
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                (
                    quantile_sorted(vals, 0.5),
                    quantile_sorted(vals, 0.75) - quantile_sorted(vals, 0.25),
                )
            };
            let (mae_median, mae_iqr) = med(&mut rows.iter().map(|r| r.mae).collect());
            let mut rmse_median = [0.0; 3];
            let mut rmse_iqr = [0.0; 3];
            for h in 0..3 {
                let (m, i) = med(&mut rows.iter().map(|r| r.rmse[h]).collect());
                rmse_median[h] = m;
                rmse_iqr[h] = i;
            }
            summaries.push(ScenarioSummary {
                scenario_index: si,
                n,
                p,
                sigma,
                method,
                mae_median,
                mae_iqr,
                rmse_median,
                rmse_iqr,
                replicates_ok: rows.len(),
                replicates_failed: failed,
            });
        }
    }

    BenchReport {
        scenarios: config.scenarios.clone(),
        methods: config.methods.clone(),
        replicates,
        summaries,
        failures,
    }
}

impl BenchReport {
    pub fn summary(&self, scenario_index: usize, method: Method) -> Option<&ScenarioSummary> {
        self.summaries
            .iter()
            .find(|s| s.scenario_index == scenario_index && s.method == method)
    }

    /// One row per scenario x method x metric with median and IQR.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,p,sigma,method,metric,median,iqr,replicates,failed\n");
        for s in &self.summaries {
            let base = format!("{},{},{},{}", s.n, s.p, s.sigma, s.method.label());
            let _ = writeln!(
                out,
                "{base},mae,{},{},{},{}",
                s.mae_median, s.mae_iqr, s.replicates_ok, s.replicates_failed
            );
            for h in 0..3 {
                let _ = writeln!(
                    out,
                    "{base},rmse_c{},{},{},{},{}",
                    h + 1,
                    s.rmse_median[h],
                    s.rmse_iqr[h],
                    s.replicates_ok,
                    s.replicates_failed
                );
            }
        }
        out
    }

    /// Raw per-replicate rows.
    pub fn replicates_csv(&self) -> String {
        let mut out =
            String::from("n,p,sigma,replicate,method,mae,rmse_c1,rmse_c2,rmse_c3,baseline_k,modal_active\n");
        for r in &self.replicates {
            let (n, p, sigma) = self.scenarios[r.scenario_index];
            let _ = writeln!(
                out,
                "{n},{p},{sigma},{},{},{},{},{},{},{},{}",
                r.replicate,
                r.method.label(),
                r.mae,
                r.rmse[0],
                r.rmse[1],
                r.rmse[2],
                r.baseline_k.map_or(String::new(), |k| k.to_string()),
                r.modal_active.map_or(String::new(), |m| m.to_string()),
            );
        }
        out
    }

    /// Text table of held-out MAE medians (IQR in parentheses), one scenario
    /// per row and one method per column.
    pub fn mae_table(&self) -> String {
        let mut out = String::from(format!(
            "{:<18}{}\n",
            "(n,p,sigma)",
            self.methods
                .iter()
                .map(|m| format!("{:>22}", m.label()))
                .collect::<String>()
        ));
        for si in 0..self.scenarios.len() {
            let (n, p, sigma) = self.scenarios[si];
            let mut line = format!("{:<18}", format!("({n},{p},{sigma:.2})"));
            let mut sub = String::from(" ".repeat(18));
            for &m in &self.methods {
                match self.summary(si, m) {
                    Some(s) => {
                        let _ = write!(line, "{:>22.4}", s.mae_median);
                        let _ = write!(sub, "{:>22}", format!("({:.4})", s.mae_iqr));
                    }
                    None => {
                        let _ = write!(line, "{:>22}", "-");
                        let _ = write!(sub, "{:>22}", "");
                    }
                }
            }
            let _ = writeln!(out, "{line}");
            let _ = writeln!(out, "{sub}");
        }
        if !self.failures.is_empty() {
            let _ = writeln!(out, "excluded replicates: {}", self.failures.len());
        }
        out
    }

    /// Text table of contribution RMSE medians (IQR beneath), one scenario
    /// per row and C1..C3 per method.
    pub fn rmse_table(&self) -> String {
        let mut header = format!("{:<18}", "(n,p,sigma)");
        for m in &self.methods {
            for h in 1..=3 {
                let _ = write!(header, "{:>16}", format!("{} C{h}", m.label()));
            }
        }
        let mut out = format!("{header}\n");
        for si in 0..self.scenarios.len() {
            let (n, p, sigma) = self.scenarios[si];
            let mut line = format!("{:<18}", format!("({n},{p},{sigma:.2})"));
            let mut sub = String::from(" ".repeat(18));
            for &m in &self.methods {
                match self.summary(si, m) {
                    Some(s) => {
                        for h in 0..3 {
                            let _ = write!(line, "{:>16.2}", s.rmse_median[h]);
                            let _ = write!(sub, "{:>16}", format!("({:.2})", s.rmse_iqr[h]));
                        }
                    }
                    None => {
                        for _ in 0..3 {
                            let _ = write!(line, "{:>16}", "-");
                            let _ = write!(sub, "{:>16}", "");
                        }
                    }
                }
            }
            let _ = writeln!(out, "{line}");
            let _ = writeln!(out, "{sub}");
        }
        out
    }
}
