//! Brute-force ground truth at desk scale.
//!
//! Expected costs are computed by enumerating every joint delay realization of
//! the packets `0..=N`. The optimal policy is found without any of the machinery
//! in [`crate::synth`]: the expected cost is probed as a quadratic form over the
//! initial state and one decision per information state (the full history of
//! acknowledgment timestamps), and decisions are eliminated backward in time.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::delay::DelayPmf;
use crate::error::{Error, Result};
use crate::linalg::{max_abs, min_eigenvalue, sym, sym_inverse, SymInverse};
use crate::linform::{StackedGainRow, Stamp};
use crate::model::SystemModel;
use crate::synth::GainSchedule;

pub const DEFAULT_BUDGET: u128 = 1 << 20;

/// Delay of every packet `0..=N` (`None` = lost) and its probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    pub delays: Vec<Option<usize>>,
    pub prob: f64,
}

impl Realization {
    /// Acknowledged timestamps `τ_0 … τ_N`.
    pub fn taus(&self) -> Vec<Stamp> {
        let mut out = Vec::with_capacity(self.delays.len());
        let mut tau: Stamp = -1;
        for t in 0..self.delays.len() {
            for s in 0..=t {
                if self.delays[s] == Some(t - s) {
                    tau = tau.max(s as Stamp);
                }
            }
            out.push(tau);
        }
        out
    }
}

pub fn enumerate_realizations(pmf: &DelayPmf, horizon: usize, budget: u128) -> Result<Vec<Realization>> {
    let support = pmf.support();
    let count = (support.len() as u128).checked_pow(horizon as u32 + 1).unwrap_or(u128::MAX);
    if count > budget {
        return Err(Error::Budget { count, budget });
    }
    let mut out = vec![Realization { delays: Vec::new(), prob: 1.0 }];
    for _ in 0..=horizon {
        let mut next = Vec::with_capacity(out.len() * support.len());
        for r in &out {
            for &(d, p) in &support {
                let mut delays = r.delays.clone();
                delays.push(d);
                next.push(Realization { delays, prob: r.prob * p });
            }
        }
        out = next;
    }
    Ok(out)
}

/// A decision rule evaluated by the oracle: `taus` are `τ_0 … τ_{t-1}`, `controls`
/// are `v_0 … v_{t-1}`.
pub trait OraclePolicy {
    fn decide(&self, t: usize, taus: &[Stamp], controls: &[DVector<f64>], x: &DVector<f64>) -> DVector<f64>;
}

/// The synthesized schedule applied to `ζ`.
pub struct SchedulePolicy<'a>(pub &'a GainSchedule);

impl OraclePolicy for SchedulePolicy<'_> {
    fn decide(&self, t: usize, taus: &[Stamp], controls: &[DVector<f64>], x: &DVector<f64>) -> DVector<f64> {
        let tau = taus.last().copied().unwrap_or(-1);
        let pending: Vec<DVector<f64>> = (tau.max(0) as usize..t).rev().map(|j| controls[j].clone()).collect();
        self.0.gain(t, tau).and_then(|g| g.apply(&pending, x)).expect("schedule covers every reachable state")
    }
}

/// `v_t = -L_t x_t`.
pub struct StateFeedback(pub Vec<DMatrix<f64>>);

impl OraclePolicy for StateFeedback {
    fn decide(&self, t: usize, _: &[Stamp], _: &[DVector<f64>], x: &DVector<f64>) -> DVector<f64> {
        -(&self.0[t] * x)
    }
}

/// Fixed decision per information state; missing entries decide zero.
pub struct TablePolicy {
    pub m: usize,
    pub table: BTreeMap<Vec<Stamp>, DVector<f64>>,
}

impl OraclePolicy for TablePolicy {
    fn decide(&self, _: usize, taus: &[Stamp], _: &[DVector<f64>], _: &DVector<f64>) -> DVector<f64> {
        self.table.get(taus).cloned().unwrap_or_else(|| DVector::zeros(self.m))
    }
}

/// Replays one realization. Within sample `t` the controller sends `v_t` knowing
/// `τ_{t-1}`, then packets arriving at `t` (including `v_t` itself when its delay
/// is zero) update the held input, the acknowledgment yields `τ_t`, and the plant
/// steps with the held input.
pub fn replay(
    model: &SystemModel,
    real: &Realization,
    policy: &dyn OraclePolicy,
    x0: &DVector<f64>,
) -> (f64, Vec<Stamp>, Vec<DVector<f64>>) {
    let m = model.m();
    let mut x = x0.clone();
    let mut taus: Vec<Stamp> = Vec::with_capacity(real.delays.len());
    let mut controls: Vec<DVector<f64>> = Vec::with_capacity(real.delays.len());
    let mut held: Stamp = -1;
    let mut cost = 0.0;
    for t in 0..real.delays.len() {
        let v = policy.decide(t, &taus, &controls, &x);
        controls.push(v);
        for s in 0..=t {
            if real.delays[s] == Some(t - s) && s as Stamp > held {
                held = s as Stamp;
            }
        }
        taus.push(held);
        let u = if held >= 0 { controls[held as usize].clone() } else { DVector::zeros(m) };
        cost += x.dot(&(&model.q * &x)) + u.dot(&(&model.r * &u));
        x = &model.a * &x + &model.b * &u;
    }
    cost += x.dot(&(&model.s_terminal * &x));
    (cost, taus, controls)
}

fn expected_cost(model: &SystemModel, reals: &[Realization], policy: &dyn OraclePolicy, x0: &DVector<f64>) -> f64 {
    reals.iter().map(|r| r.prob * replay(model, r, policy, x0).0).sum()
}

/// Exact expected cost of `policy` from `x0`.
pub fn exact_cost(
    model: &SystemModel,
    pmf: &DelayPmf,
    policy: &dyn OraclePolicy,
    x0: &DVector<f64>,
    budget: u128,
) -> Result<f64> {
    let reals = enumerate_realizations(pmf, model.horizon, budget)?;
    Ok(expected_cost(model, &reals, policy, x0))
}

/// Reachable information states per time, with their probabilities.
pub fn information_states(reals: &[Realization], horizon: usize) -> Vec<BTreeMap<Vec<Stamp>, f64>> {
    let mut out = vec![BTreeMap::new(); horizon + 1];
    for r in reals {
        if r.prob <= 0.0 {
            continue;
        }
        let taus = r.taus();
        for (t, slot) in out.iter_mut().enumerate() {
            *slot.entry(taus[..t].to_vec()).or_insert(0.0) += r.prob;
        }
    }
    out
}

/// Oracle-optimal feedback.
#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    /// Feedback on `ζ` for every reachable history.
    pub history_gains: BTreeMap<Vec<Stamp>, DMatrix<f64>>,
    /// One row per `(t, τ)`, taken from the first history with that state.
    pub gains: BTreeMap<(usize, Stamp), DMatrix<f64>>,
    /// Largest difference between histories that share `(t, τ)`.
    pub spread: f64,
    /// Largest residual of writing a history's optimal law as a function of `ζ`.
    pub residual: f64,
    /// Largest weight an optimal decision puts on decisions outside its own history.
    pub leak: f64,
    /// `J* = x0ᵀ V x0`.
    pub value: DMatrix<f64>,
}

impl OraclePolicy for OracleSolution {
    fn decide(&self, t: usize, taus: &[Stamp], controls: &[DVector<f64>], x: &DVector<f64>) -> DVector<f64> {
        let tau = taus.last().copied().unwrap_or(-1);
        let g = &self.history_gains[taus];
        let pending: Vec<DVector<f64>> = (tau.max(0) as usize..t).rev().map(|j| controls[j].clone()).collect();
        StackedGainRow::from_dense(t as Stamp, tau, self.m, self.n, g)
            .and_then(|row| row.apply(&pending, x))
            .expect("oracle gain has ζ width")
    }
}

/// Quadratic probing: `H_ii = J(e_i)`, `H_ij = (J(e_i + e_j) - J(e_i) - J(e_j)) / 2`.
fn probe_hessian(dim: usize, cost: impl Fn(&DVector<f64>) -> f64) -> DMatrix<f64> {
    let mut diag = vec![0.0; dim];
    for (i, d) in diag.iter_mut().enumerate() {
        let mut e = DVector::zeros(dim);
        e[i] = 1.0;
        *d = cost(&e);
    }
    let mut h = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        h[(i, i)] = diag[i];
        for j in 0..i {
            let mut e = DVector::zeros(dim);
            e[i] = 1.0;
            e[j] = 1.0;
            let v = (cost(&e) - diag[i] - diag[j]) * 0.5;
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Var {
    X(usize),
    V { t: usize, info: usize, comp: usize },
}

/// `ζ` as a linear map of `y = (x0, v_0(h_0), …, v_{t-1}(h_{t-1}))` along history `h`.
fn zeta_map(model: &SystemModel, h: &[Stamp], apow: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (n, m) = (model.n(), model.m());
    let t = h.len();
    let tau = h.last().copied().unwrap_or(-1);
    let k = StackedGainRow::stored_controls(t as Stamp, tau);
    let mut z = DMatrix::zeros(m * k + n, n + m * t);
    for i in 0..k {
        let s = t - 1 - i;
        z.view_mut((i * m, n + s * m), (m, m)).fill_with_identity();
    }
    let xr = m * k;
    z.view_mut((xr, 0), (n, n)).copy_from(&apow[t]);
    for (s, &ts) in h.iter().enumerate() {
        if ts >= 0 {
            let blk = &apow[t - 1 - s] * &model.b;
            let mut view = z.view_mut((xr, n + ts as usize * m), (n, m));
            view += blk;
        }
    }
    z
}

/// Exact optimal feedback by backward elimination over information states.
pub fn optimal_policy_dp(model: &SystemModel, pmf: &DelayPmf, budget: u128) -> Result<OracleSolution> {
    model.validate()?;
    let (n, m, big_n) = (model.n(), model.m(), model.horizon);
    let reals = enumerate_realizations(pmf, big_n, budget)?;
    let infos: Vec<Vec<Vec<Stamp>>> =
        information_states(&reals, big_n).into_iter().map(|mp| mp.into_keys().collect()).collect();

    let mut vars: Vec<Var> = (0..n).map(Var::X).collect();
    for (t, hs) in infos.iter().enumerate() {
        for info in 0..hs.len() {
            for comp in 0..m {
                vars.push(Var::V { t, info, comp });
            }
        }
    }
    let index: BTreeMap<Var, usize> = vars.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let dim = vars.len();
    let cost = |z: &DVector<f64>| -> f64 {
        let x0 = z.rows(0, n).into_owned();
        let mut table = BTreeMap::new();
        for (t, hs) in infos.iter().enumerate() {
            for (info, h) in hs.iter().enumerate() {
                let at = index[&Var::V { t, info, comp: 0 }];
                table.insert(h.clone(), z.rows(at, m).into_owned());
            }
        }
        expected_cost(model, &reals, &TablePolicy { m, table }, &x0)
    };
    let mut hess = probe_hessian(dim, cost);
    let scale = max_abs(&hess).max(f64::MIN_POSITIVE);

    // Backward elimination, one time at a time.
    let mut active: Vec<usize> = (0..dim).collect();
    let mut decision_rows: BTreeMap<(usize, usize), (DMatrix<f64>, Vec<usize>)> = BTreeMap::new();
    for t in (0..=big_n).rev() {
        let d_pos: Vec<usize> = (0..active.len())
            .filter(|&p| matches!(vars[active[p]], Var::V { t: tt, .. } if tt == t))
            .collect();
        let r_pos: Vec<usize> = (0..active.len()).filter(|p| !d_pos.contains(p)).collect();
        let pick = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |i, j| hess[(rows[i], cols[j])])
        };
        let hdd = pick(&d_pos, &d_pos);
        let hdr = pick(&d_pos, &r_pos);
        let hrr = pick(&r_pos, &r_pos);
        let inv = match sym_inverse(&hdd, scale, 1e-10) {
            SymInverse::Definite(x) | SymInverse::Pseudo(x) => x,
            SymInverse::Indefinite(lam) => {
                return Err(Error::Oracle(format!("indefinite decision Hessian at t = {t} (eigenvalue {lam:e})")))
            }
        };
        let f = -(&inv * &hdr);
        let r_ids: Vec<usize> = r_pos.iter().map(|&p| active[p]).collect();
        for info in 0..infos[t].len() {
            let first = d_pos
                .iter()
                .position(|&p| vars[active[p]] == Var::V { t, info, comp: 0 })
                .expect("decision present");
            decision_rows.insert((t, info), (f.rows(first, m).into_owned(), r_ids.clone()));
        }
        hess = sym(&(hrr - hdr.transpose() * &inv * &hdr));
        active = r_ids;
    }
    let value = hess;
    if min_eigenvalue(&value) < -1e-9 * scale {
        return Err(Error::Oracle("optimal value is not positive semidefinite".into()));
    }

    let apow = crate::linalg::powers(&model.a, big_n + 1);
    let mut history_gains = BTreeMap::new();
    let mut gains: BTreeMap<(usize, Stamp), DMatrix<f64>> = BTreeMap::new();
    let (mut spread, mut residual, mut leak) = (0.0_f64, 0.0_f64, 0.0_f64);
    for t in 0..=big_n {
        for (info, h) in infos[t].iter().enumerate() {
            let (row, ids) = &decision_rows[&(t, info)];
            let mut g = DMatrix::zeros(m, n + m * t);
            for (c, &id) in ids.iter().enumerate() {
                match vars[id] {
                    Var::X(i) => g.set_column(i, &row.column(c)),
                    Var::V { t: s, info: hi, comp } => {
                        if infos[s][hi][..] == h[..s] {
                            g.set_column(n + s * m + comp, &row.column(c));
                        } else {
                            leak = leak.max(row.column(c).amax());
                        }
                    }
                }
            }
            let z = zeta_map(model, h, &apow);
            let zp = z.clone().pseudo_inverse(1e-12).map_err(|e| Error::Oracle(e.to_string()))?;
            let kz = &g * zp;
            residual = residual.max(max_abs(&(&kz * &z - &g)));
            let tau = h.last().copied().unwrap_or(-1);
            match gains.get(&(t, tau)) {
                Some(first) => spread = spread.max(max_abs(&(first - &kz))),
                None => {
                    gains.insert((t, tau), kz.clone());
                }
            }
            history_gains.insert(h.clone(), kz);
        }
    }
    Ok(OracleSolution { n, m, horizon: big_n, history_gains, gains, spread, residual, leak, value })
}

#[derive(Clone, Debug, Serialize)]
pub struct GainDeviation {
    pub t: usize,
    pub tau: Stamp,
    pub max_abs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GainReport {
    pub entries: Vec<GainDeviation>,
    pub max_deviation: f64,
}

/// Per-`(t, τ)` deviation between a schedule and oracle gains.
pub fn compare_gains(schedule: &GainSchedule, oracle: &BTreeMap<(usize, Stamp), DMatrix<f64>>) -> Result<GainReport> {
    let mut entries = Vec::with_capacity(oracle.len());
    let mut max_deviation: f64 = 0.0;
    for (&(t, tau), g) in oracle {
        let row = schedule
            .gain(t, tau)
            .map_err(|_| Error::Oracle(format!("schedule has no gain for t = {t}, τ = {tau}")))?
            .dense();
        if row.shape() != g.shape() {
            return Err(Error::Oracle(format!("gain shapes differ at t = {t}, τ = {tau}")));
        }
        let dev = max_abs(&(row - g));
        max_deviation = max_deviation.max(dev);
        entries.push(GainDeviation { t, tau, max_abs: dev });
    }
    Ok(GainReport { entries, max_deviation })
}

/// Largest `|∂J/∂v_t(h)|` at the decisions the schedule makes, over every reachable
/// history and every unit initial state. Zero at an optimum.
pub fn stationarity_certificate(model: &SystemModel, pmf: &DelayPmf, schedule: &GainSchedule, budget: u128) -> Result<f64> {
    let (n, m) = (model.n(), model.m());
    let reals = enumerate_realizations(pmf, model.horizon, budget)?;
    let policy = SchedulePolicy(schedule);
    let eps = 1e-3;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut x0 = DVector::zeros(n);
        x0[i] = 1.0;
        let mut table = BTreeMap::new();
        for r in &reals {
            let (_, taus, controls) = replay(model, r, &policy, &x0);
            for t in 0..controls.len() {
                table.entry(taus[..t].to_vec()).or_insert_with(|| controls[t].clone());
            }
        }
        let keys: Vec<Vec<Stamp>> = table.keys().cloned().collect();
        let mut tp = TablePolicy { m, table };
        for key in keys {
            for c in 0..m {
                let base = tp.table[&key][c];
                tp.table.get_mut(&key).expect("key")[c] = base + eps;
                let up = expected_cost(model, &reals, &tp, &x0);
                tp.table.get_mut(&key).expect("key")[c] = base - eps;
                let down = expected_cost(model, &reals, &tp, &x0);
                tp.table.get_mut(&key).expect("key")[c] = base;
                worst = worst.max(((up - down) / (2.0 * eps)).abs());
            }
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub gains: GainReport,
    pub stationarity: f64,
    pub history_spread: f64,
    pub sufficiency_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Stationarity threshold for the certificate.
pub const STATIONARITY_TOL: f64 = 1e-8;

/// Full check of a schedule against the oracle.
pub fn oracle_check(model: &SystemModel, pmf: &DelayPmf, schedule: &GainSchedule, tol: f64, budget: u128) -> Result<OracleReport> {
    if schedule.n != model.n() || schedule.m != model.m() || schedule.horizon != model.horizon {
        return Err(Error::Dimension("schedule does not match the model".into()));
    }
    let sol = optimal_policy_dp(model, pmf, budget)?;
    let gains = compare_gains(schedule, &sol.gains)?;
    let stationarity = stationarity_certificate(model, pmf, schedule, budget)?;
    let passed = gains.max_deviation <= tol && stationarity <= STATIONARITY_TOL;
    Ok(OracleReport {
        gains,
        stationarity,
        history_spread: sol.spread,
        sufficiency_residual: sol.residual,
        tolerance: tol,
        passed,
    })
}

/// Comparison of a zero-delay synthesis with classical LQR.
#[derive(Clone, Debug, Serialize)]
pub struct ReductionReport {
    pub max_deviation: f64,
    /// Every stored-control block is exactly zero.
    pub control_blocks_zero: bool,
    pub tolerance: f64,
    pub passed: bool,
}

/// Synthesizes `model` under zero delay and checks every stage against `u = -L_t x`.
pub fn lqr_reduction(model: &SystemModel, tol: f64) -> Result<ReductionReport> {
    let schedule = crate::synth::synthesize(model, &DelayPmf::zero_delay())?;
    let lqr = crate::synth::riccati_reference(model);
    let mut max_deviation: f64 = 0.0;
    let mut control_blocks_zero = true;
    for st in &schedule.stages {
        for row in &st.gains {
            let d = &row.state_block + &lqr.gains[st.t];
            max_deviation = max_deviation.max(d.amax());
            control_blocks_zero &= row.control_block.iter().all(|&c| c == 0.0);
        }
    }
    Ok(ReductionReport { max_deviation, control_blocks_zero, tolerance: tol, passed: max_deviation <= tol && control_blocks_zero })
}
