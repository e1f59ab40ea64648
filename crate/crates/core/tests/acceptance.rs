//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use holdlqg::io::{schedule_to_json, write_results_csv, write_trace_csv};
use holdlqg::netsim::{applied_age_histogram, episode_cost, monte_carlo, run_episode, Baseline, Noise, PolicySpec};
use holdlqg::oracle::{oracle_check, DEFAULT_BUDGET, STATIONARITY_TOL};
use holdlqg::{riccati_reference, synthesize, DelayPmf, SystemModel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn run(id: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = f();
    Outcome { id, pass, detail, elapsed: start.elapsed() }
}

fn random_model(rng: &mut ChaCha8Rng, n: usize, m: usize, horizon: usize) -> SystemModel {
    let mut mat = |r: usize, c: usize, lo: f64, hi: f64| DMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi));
    let a = mat(n, n, -1.2, 1.2);
    let b = mat(n, m, -1.5, 1.5);
    let gq = mat(n, n, -1.0, 1.0);
    let gr = mat(m, m, -1.0, 1.0);
    let gs = mat(n, n, -1.0, 1.0);
    let q = &gq * gq.transpose();
    let r = &gr * gr.transpose() + DMatrix::identity(m, m) * 0.2;
    let s = &gs * gs.transpose();
    SystemModel::new(a, b, q, r, s, horizon).expect("random model is valid")
}

fn scalar_instance() -> (SystemModel, DelayPmf) {
    (
        SystemModel::scalar(1.2, 1.0, 1.0, 1.0, 1.0, 3).unwrap(),
        DelayPmf::new(vec![0.5, 0.3]).unwrap(),
    )
}

fn two_state_instance() -> (SystemModel, DelayPmf) {
    let model = SystemModel::new(
        DMatrix::from_row_slice(2, 2, &[1.1, 0.2, 0.0, 0.9]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::identity(2, 2),
        DMatrix::from_element(1, 1, 0.5),
        DMatrix::identity(2, 2),
        2,
    )
    .unwrap();
    (model, DelayPmf::new(vec![0.6, 0.3]).unwrap())
}

/// Zero-delay reduction to classical LQR.
fn ac1() -> (bool, String) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xac1);
    let mut worst: f64 = 0.0;
    let mut blocks_zero = true;
    for _ in 0..20 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=4);
        let horizon = rng.random_range(0..=50);
        let model = random_model(&mut rng, n, m, horizon);
        let schedule = synthesize(&model, &DelayPmf::zero_delay()).unwrap();
        let lqr = riccati_reference(&model);
        for st in &schedule.stages {
            for row in &st.gains {
                worst = worst.max((&row.state_block + &lqr.gains[st.t]).amax());
                blocks_zero &= row.control_block.iter().all(|&c| c == 0.0);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-9 && blocks_zero && secs < 10.0,
        format!("max |Δ|∞ = {worst:.3e} (tol 1e-9), control blocks zero: {blocks_zero}, {secs:.2} s"),
    )
}

/// Applied-age identities on random pmfs.
fn ac2() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xac2);
    let (mut forms, mut unity): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let len = rng.random_range(1..=8);
        let mut w: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let loss = if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() };
        let total = w.iter().sum::<f64>() + loss;
        w.iter_mut().for_each(|x| *x /= total);
        let pmf = DelayPmf::new(w).unwrap();
        let mut acc = 0.0;
        for i in 0..40i64 {
            let product: f64 = (0..i).map(|j| pmf.tail(j)).product();
            let product_form = pmf.cum(i).unwrap() * product;
            let telescoped = pmf.cum(i).unwrap() * pmf.comp_cum_applied(i - 1).unwrap();
            forms = forms.max((product_form - telescoped).abs()).max((pmf.applied_age_pmf(i).unwrap() - product_form).abs());
            acc += pmf.applied_age_pmf(i).unwrap();
            unity = unity.max((acc + pmf.comp_cum_applied(i).unwrap() - 1.0).abs());
        }
    }
    (
        forms <= 1e-12 && unity <= 1e-12,
        format!("product vs telescoped {forms:.3e}, Σp_d + P̄_d − 1 = {unity:.3e} (tol 1e-12)"),
    )
}

/// Gains against the brute-force oracle.
fn ac3() -> (bool, String) {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, (model, pmf)) in [("scalar N=3", scalar_instance()), ("2-state N=2", two_state_instance())] {
        let schedule = synthesize(&model, &pmf).unwrap();
        let report = oracle_check(&model, &pmf, &schedule, 1e-6, DEFAULT_BUDGET).unwrap();
        pass &= report.gains.max_deviation <= 1e-6 && report.stationarity <= STATIONARITY_TOL;
        parts.push(format!("{name}: |Δ|∞ = {:.3e}, stationarity {:.3e}", report.gains.max_deviation, report.stationarity));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    (pass, format!("{} (tol 1e-6 / 1e-8), {secs:.2} s", parts.join("; ")))
}

/// Closed-loop cost against the Riccati value and the open-loop closed form.
fn ac4() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xac4);
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for _ in 0..20 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=3);
        let horizon = rng.random_range(0..=30);
        let model = random_model(&mut rng, n, m, horizon);
        let x0 = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));

        let pmf = DelayPmf::zero_delay();
        let policy = PolicySpec::optimal(synthesize(&model, &pmf).unwrap());
        let cost = episode_cost(&model, &pmf, &policy, &x0, 1, 0, &Noise::off()).unwrap();
        let value = riccati_reference(&model).value(&x0);
        worst = worst.max((cost - value).abs() / value.abs().max(1.0));

        let lost = DelayPmf::total_loss();
        let policy = PolicySpec::optimal(synthesize(&model, &lost).unwrap());
        let cost = episode_cost(&model, &lost, &policy, &x0, 1, 0, &Noise::off()).unwrap();
        let mut x = x0.clone();
        let mut open = 0.0;
        for _ in 0..=horizon {
            open += x.dot(&(&model.q * &x));
            x = &model.a * &x;
        }
        open += x.dot(&(&model.s_terminal * &x));
        exact &= cost == open;
    }
    (
        worst <= 1e-9 && exact,
        format!("zero-delay |J − x0ᵀS0x0| / max(1, |x0ᵀS0x0|) = {worst:.3e} (tol 1e-9), total-loss cost exact: {exact}"),
    )
}

/// Monte Carlo ordering against the baselines.
fn ac5() -> (bool, String) {
    let start = Instant::now();
    let (model, pmf) = scalar_instance();
    let noise = Noise::gaussian(&DMatrix::from_element(1, 1, 1.0)).unwrap();
    let x0 = DVector::from_element(1, 1.0);
    let policies = vec![
        PolicySpec::optimal(synthesize(&model, &pmf).unwrap()),
        PolicySpec::baseline(Baseline::LqrHold, &model),
        PolicySpec::baseline(Baseline::ZeroInput, &model),
    ];
    let res = monte_carlo(&model, &pmf, &policies, &x0, 100_000, 2024, &noise).unwrap();
    let opt = &res[0];
    let mut pass = true;
    let mut parts = vec![format!("{} {:.4} [{:.4}, {:.4}]", opt.policy, opt.mean_cost, opt.ci99_lo, opt.ci99_hi)];
    for b in &res[1..] {
        pass &= opt.mean_cost <= b.mean_cost;
        pass &= opt.mean_cost - b.mean_cost <= opt.ci_width() + b.ci_width();
        parts.push(format!("{} {:.4} [{:.4}, {:.4}]", b.policy, b.mean_cost, b.ci99_lo, b.ci99_hi));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    (pass, format!("means with 99% CI: {}; {secs:.2} s", parts.join(", ")))
}

/// Empirical applied age against p_d.
fn ac6() -> (bool, String) {
    let (_, pmf) = scalar_instance();
    let samples = 1_000_000usize;
    let (burn_in, max_age) = (60usize, 12usize);
    let hist = applied_age_histogram(&pmf, burn_in, samples, max_age, 0xac6);
    let total = samples as f64;
    let mut worst_z: f64 = 0.0;
    let mut pass = true;
    for (i, &count) in hist.iter().enumerate() {
        let p = if i < max_age {
            pmf.applied_age_pmf(i as i64).unwrap()
        } else if i == max_age {
            pmf.comp_cum_applied(max_age as i64 - 1).unwrap() - pmf.comp_cum_applied(burn_in as i64).unwrap()
        } else {
            pmf.comp_cum_applied(burn_in as i64).unwrap()
        };
        let freq = count as f64 / total;
        let sigma = (p * (1.0 - p) / total).sqrt();
        let dev = (freq - p).abs();
        if sigma > 0.0 {
            worst_z = worst_z.max(dev / sigma);
        }
        pass &= dev <= 3.0 * sigma || (p == 0.0 && count == 0);
    }
    (pass, format!("{samples} samples, worst |f − p_d| = {worst_z:.2}σ (bound 3σ)"))
}

fn artifacts() -> (String, Vec<u8>, Vec<u8>) {
    let (model, pmf) = scalar_instance();
    let schedule = synthesize(&model, &pmf).unwrap();
    let json = schedule_to_json(&schedule).unwrap();
    let noise = Noise::gaussian(&DMatrix::from_element(1, 1, 0.5)).unwrap();
    let x0 = DVector::from_element(1, 1.0);
    let policies = vec![
        PolicySpec::optimal(schedule),
        PolicySpec::baseline(Baseline::LqrHold, &model),
        PolicySpec::baseline(Baseline::ZeroInput, &model),
        PolicySpec::baseline(Baseline::OpenLoop, &model),
    ];
    let res = monte_carlo(&model, &pmf, &policies, &x0, 20_000, 99, &noise).unwrap();
    let mut results = Vec::new();
    write_results_csv(&res, &mut results).unwrap();
    let trace = run_episode(&model, &pmf, &policies[0], &x0, 99, &noise).unwrap();
    let mut trace_csv = Vec::new();
    write_trace_csv(&trace, 1, 1, &mut trace_csv).unwrap();
    (json, results, trace_csv)
}

/// Byte-identical outputs across runs and thread counts.
fn ac7() -> (bool, String) {
    let first = artifacts();
    let second = artifacts();
    let mut pass = first == second;
    for threads in [1, 3, 8] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pass &= pool.install(artifacts) == first;
    }
    let (json, results, trace) = first;
    (
        pass,
        format!(
            "schedule {} B, results {} B, trace {} B identical across 2 runs and 1/3/8 threads: {pass}",
            json.len(),
            results.len(),
            trace.len()
        ),
    )
}

fn main() -> ExitCode {
    let outcomes = [
        run("AC1 zero-delay reduction", ac1),
        run("AC2 probability identities", ac2),
        run("AC3 oracle equivalence", ac3),
        run("AC4 closed-loop value consistency", ac4),
        run("AC5 Monte Carlo ordering", ac5),
        run("AC6 applied-age statistics", ac6),
        run("AC7 determinism", ac7),
    ];
    let mut ok = true;
    for o in &outcomes {
        ok &= o.pass;
        println!(
            "{} {}: {} [{:.2} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.detail,
            o.elapsed.as_secs_f64()
        );
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
