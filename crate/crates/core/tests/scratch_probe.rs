// temporary probe, removed before finalizing
use cosin::bench::cosin_rmse_over_draws;
use cosin::gibbs::run_chain;
use cosin::model::{Covariates, HyperParams};
use cosin::postprocess::predict_holdout;
use cosin::sim::{generate_masked, SimScenario};
use ndarray::Array2;
use std::time::Instant;

#[test]
#[ignore]
fn probe_recovery() {
    let sc = SimScenario::new(50, 100, 0.1, 424242);
    let (truth, masked) = generate_masked(&sc);
    let cov = Covariates::new(
        Array2::from_elem((50, 1), 1.0),
        100,
        None,
        Some(truth.w_b.clone()),
    );
    let mut hp = HyperParams::defaults_for(50, 100).fast_profile();
    hp.seed = 7;
    let t0 = Instant::now();
    let store = run_chain(&masked, &cov, &hp).unwrap();
    let fit_time = t0.elapsed();
    let t1 = Instant::now();
    let pred = predict_holdout(&store, &cov, &masked, None).unwrap();
    let rmse = cosin_rmse_over_draws(&truth, &store);
    let score_time = t1.elapsed();

    let mut counts = std::collections::BTreeMap::new();
    for d in &store.draws {
        *counts.entry(d.n_active).or_insert(0usize) += 1;
    }
    let modal = counts.iter().max_by_key(|(_, &c)| c).map(|(&k, _)| k).unwrap();
    let ks: Vec<usize> = store.draws.iter().map(|d| d.k_star).collect();
    println!("fit {fit_time:?} score {score_time:?}");
    println!("active counts {counts:?} modal {modal}");
    println!("k_star last {} draws {}", ks.last().unwrap(), store.len());
    println!("MAE {:.4} rmse {rmse:?}", pred.mae);
    println!("adapt events: {}", store.meta.adaptation_events.len());

    // baseline for comparison
    let t2 = Instant::now();
    let fitb = cosin::baseline::baseline_pearson_pca(&masked, 4);
    let maeb = cosin::bench::mae(&masked, &fitb.predicted_counts());
    println!("baseline k=4 MAE {maeb:.4} in {:?}", t2.elapsed());
}

#[test]
#[ignore]
fn probe_step_times() {
    use cosin::gibbs::Engine;
    let sc = SimScenario::new(200, 100, 0.1, 424242);
    let (truth, masked) = generate_masked(&sc);
    let cov = Covariates::new(
        Array2::from_elem((200, 1), 1.0),
        100,
        None,
        Some(truth.w_b.clone()),
    );
    let mut hp = HyperParams::defaults_for(200, 100);
    hp.seed = 7;
    let engine = Engine::new(&masked, &cov, &hp).unwrap();
    let mut state = engine.init_state();
    // settle k via some scans + adaptations
    for iter in 1..=300 {
        engine.scan(&mut state, iter).unwrap();
        engine.maybe_adapt(&mut state, iter);
    }
    println!("k after settle: {} active {}", state.k_star, state.n_active());
    let reps = 200;
    let mut times = vec![0.0f64; 9];
    for iter in 301..=(300 + reps) {
        let mut t = Instant::now();
        let mut lap = |slot: usize, times: &mut Vec<f64>| {
            times[slot] += t.elapsed().as_secs_f64();
            t = Instant::now();
        };
        engine.update_z(&mut state, iter);
        lap(0, &mut times);
        engine.update_gamma_t(&mut state, iter);
        lap(1, &mut times);
        engine.update_beta(&mut state, iter).unwrap();
        lap(2, &mut times);
        engine.update_eta(&mut state, iter).unwrap();
        lap(3, &mut times);
        engine.update_sigma(&mut state, iter);
        lap(4, &mut times);
        engine.update_local_scales(&mut state, iter).unwrap();
        lap(5, &mut times);
        engine.update_lambda(&mut state, iter).unwrap();
        lap(6, &mut times);
        engine.update_rho_theta_sticks(&mut state, iter);
        lap(7, &mut times);
        engine.update_phi(&mut state, iter);
        lap(8, &mut times);
    }
    let names = ["z", "gamma_t", "beta", "eta", "sigma", "local", "lambda", "rho", "phi"];
    for (n, t) in names.iter().zip(times.iter()) {
        println!("{n:>8}: {:.3} ms/iter", 1e3 * t / reps as f64);
    }
}
