//! Plant, lossy delaying channel, hold-input actuator and Monte Carlo evaluation.
//!
//! Within sample `t` the controller computes and sends `v_t` (knowing `τ_{t-1}`),
//! packets due at `t` reach the actuator (a zero-delay `v_t` included), their
//! acknowledgments reach the controller, and the plant steps with the held input.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::delay::DelayPmf;
use crate::error::{Error, Result};
use crate::linalg::{asymmetry, max_abs};
use crate::linform::Stamp;
use crate::model::SystemModel;
use crate::runtime::ControllerState;
use crate::synth::{riccati_reference, GainSchedule};

/// Two-sided 99% standard normal quantile.
pub const Z99: f64 = 2.5758293035489004;

#[derive(Clone, Debug, PartialEq)]
pub struct Packet {
    pub send_time: Stamp,
    pub payload: DVector<f64>,
    /// `None` when lost.
    pub delay: Option<usize>,
}

impl Packet {
    pub fn arrival(&self) -> Option<Stamp> {
        self.delay.map(|d| self.send_time + d as Stamp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActuatorState {
    pub applied: DVector<f64>,
    pub applied_send_time: Stamp,
}

impl ActuatorState {
    pub fn new(m: usize) -> Self {
        ActuatorState { applied: DVector::zeros(m), applied_send_time: -1 }
    }

    /// Holds the newest-sent arrival if it is newer than the current input.
    pub fn step(&mut self, arrivals: &[Packet]) {
        if let Some(p) = arrivals.iter().max_by_key(|p| p.send_time) {
            if p.send_time > self.applied_send_time {
                self.applied = p.payload.clone();
                self.applied_send_time = p.send_time;
            }
        }
    }
}

pub fn plant_step(model: &SystemModel, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    &model.a * x + &model.b * u + w
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Baseline {
    /// Riccati gains, actuator holds the newest arrival.
    LqrHold,
    /// Riccati gains, actuator applies zero unless the newest control arrived on time.
    ZeroInput,
    /// No control at all.
    OpenLoop,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::LqrHold => "lqr-hold",
            Baseline::ZeroInput => "zero-input",
            Baseline::OpenLoop => "open-loop",
        }
    }

    pub fn parse(s: &str) -> Result<Baseline> {
        match s {
            "lqr-hold" => Ok(Baseline::LqrHold),
            "zero-input" => Ok(Baseline::ZeroInput),
            "open-loop" => Ok(Baseline::OpenLoop),
            other => Err(Error::Parse(format!("unknown baseline '{other}'"))),
        }
    }
}

/// A policy that can be instantiated once per episode.
#[derive(Clone, Debug)]
pub enum PolicySpec {
    Optimal(Arc<GainSchedule>),
    Baseline(Baseline, Arc<Vec<DMatrix<f64>>>),
}

impl PolicySpec {
    pub fn optimal(schedule: GainSchedule) -> Self {
        PolicySpec::Optimal(Arc::new(schedule))
    }

    pub fn baseline(kind: Baseline, model: &SystemModel) -> Self {
        PolicySpec::Baseline(kind, Arc::new(riccati_reference(model).gains))
    }

    pub fn name(&self) -> &str {
        match self {
            PolicySpec::Optimal(_) => "optimal",
            PolicySpec::Baseline(b, _) => b.name(),
        }
    }
}

/// Optional process noise `w ~ N(0, Σ)`.
#[derive(Clone, Debug, Default)]
pub struct Noise {
    factor: Option<DMatrix<f64>>,
}

impl Noise {
    pub fn off() -> Self {
        Noise { factor: None }
    }

    /// Accepts any symmetric positive semidefinite covariance.
    pub fn gaussian(cov: &DMatrix<f64>) -> Result<Self> {
        let scale = max_abs(cov).max(f64::MIN_POSITIVE);
        if !cov.is_square() || asymmetry(cov) > 1e-9 * scale {
            return Err(Error::InvalidModel("noise covariance must be square and symmetric".into()));
        }
        let eig = SymmetricEigen::new(cov.clone());
        if eig.eigenvalues.iter().any(|&l| l < -1e-9 * scale) {
            return Err(Error::InvalidModel("noise covariance must be positive semidefinite".into()));
        }
        let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        Ok(Noise { factor: Some(&eig.eigenvectors * root) })
    }

    pub fn is_off(&self) -> bool {
        self.factor.is_none()
    }
}

const ROLE_DELAY: u64 = 0;
const ROLE_NOISE: u64 = 1;

/// Independent stream for `(seed, trial, role)`.
pub fn stream(seed: u64, trial: u64, role: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial.wrapping_mul(2).wrapping_add(role));
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    /// `t - applied_send_time`, `None` while nothing has arrived.
    pub applied_age: Option<usize>,
    pub tau: Stamp,
    pub acks: Vec<Stamp>,
    pub step_cost: f64,
    pub cum_cost: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimTrace {
    pub policy: String,
    pub rows: Vec<TraceRow>,
    pub x_final: Vec<f64>,
    pub terminal_cost: f64,
    pub total_cost: f64,
}

enum Controller<'a> {
    Optimal(&'a GainSchedule, ControllerState),
    Baseline(Baseline, &'a [DMatrix<f64>]),
}

fn simulate(
    model: &SystemModel,
    pmf: &DelayPmf,
    policy: &PolicySpec,
    x0: &DVector<f64>,
    seed: u64,
    trial: u64,
    noise: &Noise,
    record: bool,
) -> Result<(f64, Option<SimTrace>)> {
    let (n, m, big_n) = (model.n(), model.m(), model.horizon);
    if x0.len() != n {
        return Err(Error::Dimension(format!("x0 has length {}, expected {n}", x0.len())));
    }
    let mut ctrl = match policy {
        PolicySpec::Optimal(s) => {
            if s.n != n || s.m != m || s.horizon != big_n {
                return Err(Error::Dimension("schedule does not match the model".into()));
            }
            Controller::Optimal(s, ControllerState::new(x0.clone()))
        }
        PolicySpec::Baseline(b, gains) => Controller::Baseline(*b, gains),
    };
    let mut delay_rng = stream(seed, trial, ROLE_DELAY);
    let mut noise_rng = stream(seed, trial, ROLE_NOISE);
    let mut in_flight: Vec<Packet> = Vec::new();
    let mut act = ActuatorState::new(m);
    let mut x = x0.clone();
    let mut cum = 0.0;
    let mut rows = Vec::new();
    for t in 0..=big_n {
        let v = match &mut ctrl {
            Controller::Optimal(s, st) => {
                st.observe(x.clone());
                st.control(s)?
            }
            Controller::Baseline(Baseline::OpenLoop, _) => DVector::zeros(m),
            Controller::Baseline(_, gains) => -(&gains[t] * &x),
        };
        let delay = pmf.sample_delay(delay_rng.random::<f64>());
        in_flight.push(Packet { send_time: t as Stamp, payload: v.clone(), delay });
        let now = t as Stamp;
        let arrivals: Vec<Packet> = in_flight.iter().filter(|p| p.arrival() == Some(now)).cloned().collect();
        in_flight.retain(|p| p.arrival().is_some_and(|a| a > now));
        act.step(&arrivals);
        let acks: Vec<Stamp> = arrivals.iter().map(|p| p.send_time).collect();
        if let Controller::Optimal(_, st) = &mut ctrl {
            st.on_ack(&acks)?;
            if st.tau() != act.applied_send_time {
                return Err(Error::Protocol(format!(
                    "controller τ = {} but actuator holds v_{}",
                    st.tau(),
                    act.applied_send_time
                )));
            }
        }
        let u = match &ctrl {
            Controller::Baseline(Baseline::ZeroInput, _) => {
                if act.applied_send_time == now {
                    act.applied.clone()
                } else {
                    DVector::zeros(m)
                }
            }
            _ => act.applied.clone(),
        };
        let step_cost = x.dot(&(&model.q * &x)) + u.dot(&(&model.r * &u));
        cum += step_cost;
        let w = match &noise.factor {
            Some(f) => {
                let z = DVector::from_fn(n, |_, _| noise_rng.sample::<f64, _>(StandardNormal));
                f * z
            }
            None => DVector::zeros(n),
        };
        if record {
            rows.push(TraceRow {
                t,
                x: x.iter().cloned().collect(),
                v: v.iter().cloned().collect(),
                u: u.iter().cloned().collect(),
                applied_age: (act.applied_send_time >= 0).then(|| (now - act.applied_send_time) as usize),
                tau: act.applied_send_time,
                acks,
                step_cost,
                cum_cost: cum,
            });
        }
        x = plant_step(model, &x, &u, &w);
    }
    let terminal = x.dot(&(&model.s_terminal * &x));
    cum += terminal;
    let trace = record.then(|| SimTrace {
        policy: policy.name().to_string(),
        rows,
        x_final: x.iter().cloned().collect(),
        terminal_cost: terminal,
        total_cost: cum,
    });
    Ok((cum, trace))
}

/// One episode with full trace. Trial index 0 of `seed`.
pub fn run_episode(
    model: &SystemModel,
    pmf: &DelayPmf,
    policy: &PolicySpec,
    x0: &DVector<f64>,
    seed: u64,
    noise: &Noise,
) -> Result<SimTrace> {
    Ok(simulate(model, pmf, policy, x0, seed, 0, noise, true)?.1.expect("recorded"))
}

/// Realized cost of trial `trial`.
pub fn episode_cost(
    model: &SystemModel,
    pmf: &DelayPmf,
    policy: &PolicySpec,
    x0: &DVector<f64>,
    seed: u64,
    trial: u64,
    noise: &Noise,
) -> Result<f64> {
    Ok(simulate(model, pmf, policy, x0, seed, trial, noise, false)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McResult {
    pub policy: String,
    pub trials: usize,
    pub mean_cost: f64,
    pub std: f64,
    pub ci99_lo: f64,
    pub ci99_hi: f64,
    pub seed: u64,
}

impl McResult {
    fn from_costs(policy: &str, costs: &[f64], seed: u64) -> Self {
        let n = costs.len() as f64;
        let mean = costs.iter().sum::<f64>() / n;
        let var = if costs.len() > 1 {
            costs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std = var.sqrt();
        let half = Z99 * std / n.sqrt();
        McResult {
            policy: policy.to_string(),
            trials: costs.len(),
            mean_cost: mean,
            std,
            ci99_lo: mean - half,
            ci99_hi: mean + half,
            seed,
        }
    }

    pub fn ci_width(&self) -> f64 {
        self.ci99_hi - self.ci99_lo
    }
}

/// Per-trial costs, `[trial][policy]`, with common random numbers across policies.
pub fn trial_costs(
    model: &SystemModel,
    pmf: &DelayPmf,
    policies: &[PolicySpec],
    x0: &DVector<f64>,
    trials: usize,
    seed: u64,
    noise: &Noise,
) -> Result<Vec<Vec<f64>>> {
    (0..trials as u64)
        .into_par_iter()
        .map(|i| policies.iter().map(|p| episode_cost(model, pmf, p, x0, seed, i, noise)).collect())
        .collect()
}

pub fn monte_carlo(
    model: &SystemModel,
    pmf: &DelayPmf,
    policies: &[PolicySpec],
    x0: &DVector<f64>,
    trials: usize,
    seed: u64,
    noise: &Noise,
) -> Result<Vec<McResult>> {
    if trials == 0 {
        return Err(Error::Domain("at least one trial is required".into()));
    }
    let costs = trial_costs(model, pmf, policies, x0, trials, seed, noise)?;
    Ok(policies
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let column: Vec<f64> = costs.iter().map(|row| row[k]).collect();
            McResult::from_costs(p.name(), &column, seed)
        })
        .collect())
}

/// Histogram of the held input's age after `burn_in` samples, over independent
/// channel runs. The last bucket counts runs where nothing has arrived yet.
pub fn applied_age_histogram(pmf: &DelayPmf, burn_in: usize, samples: usize, max_age: usize, seed: u64) -> Vec<u64> {
    let run = |i: u64| -> usize {
        let mut rng = stream(seed, i, ROLE_DELAY);
        let mut arrivals: Vec<Option<Stamp>> = Vec::with_capacity(burn_in + 1);
        for t in 0..=burn_in {
            arrivals.push(pmf.sample_delay(rng.random::<f64>()).map(|d| (t + d) as Stamp));
        }
        let now = burn_in as Stamp;
        let newest = (0..=burn_in).rev().find(|&s| arrivals[s].is_some_and(|a| a <= now));
        match newest {
            Some(s) => (burn_in - s).min(max_age),
            None => max_age + 1,
        }
    };
    (0..samples as u64)
        .into_par_iter()
        .fold(|| vec![0u64; max_age + 2], |mut h, i| {
            h[run(i)] += 1;
            h
        })
        .reduce(|| vec![0u64; max_age + 2], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkt(send: Stamp, val: f64) -> Packet {
        Packet { send_time: send, payload: DVector::from_element(1, val), delay: Some(0) }
    }

    #[test]
    fn actuator_examples() {
        let mut a = ActuatorState { applied: DVector::from_element(1, 5.0), applied_send_time: 5 };
        let before = a.clone();
        a.step(&[]);
        assert_eq!(a, before);
        a.step(&[pkt(3, 3.0)]);
        assert_eq!(a, before);
        let mut a = ActuatorState { applied: DVector::from_element(1, 2.0), applied_send_time: 2 };
        a.step(&[pkt(3, 3.0), pkt(5, 5.0)]);
        assert_eq!(a.applied_send_time, 5);
        assert_eq!(a.applied[0], 5.0);
    }

    #[test]
    fn plant_examples() {
        let model = SystemModel::scalar(1.2, 1.0, 1.0, 1.0, 1.0, 0).unwrap();
        let v = |x| DVector::from_element(1, x);
        assert_eq!(plant_step(&model, &v(2.0), &v(0.0), &v(0.0))[0], 2.4);
        assert_eq!(plant_step(&model, &v(0.0), &v(3.0), &v(0.0))[0], 3.0);
        assert!((plant_step(&model, &v(1.0), &v(-0.6), &v(0.0))[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn baseline_names_roundtrip() {
        for b in [Baseline::LqrHold, Baseline::ZeroInput, Baseline::OpenLoop] {
            assert_eq!(Baseline::parse(b.name()).unwrap(), b);
        }
        assert!(Baseline::parse("pid").is_err());
    }

    #[test]
    fn single_trial_has_degenerate_interval() {
        let r = McResult::from_costs("x", &[3.0], 1);
        assert_eq!((r.mean_cost, r.std, r.ci99_lo, r.ci99_hi), (3.0, 0.0, 3.0, 3.0));
    }
}
