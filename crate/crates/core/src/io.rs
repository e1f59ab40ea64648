//! JSON configuration and schedule documents, CSV outputs.
//!
//! Matrices are row-major arrays with explicit dimensions. Floats are written in
//! shortest round-trip form.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::delay::DelayPmf;
use crate::error::{Error, Result};
use crate::linalg::{from_row_major, max_abs, sym_inverse, to_row_major, SymInverse};
use crate::linform::{StackedGainRow, Stamp};
use crate::model::SystemModel;
use crate::netsim::{Baseline, McResult, Noise, SimTrace};
use crate::synth::{A11Flag, GainSchedule, StageGains};

/// Largest state or input dimension accepted from a document.
pub const MAX_DIM: usize = 64;
/// Largest horizon accepted from a document.
pub const MAX_HORIZON: usize = 4096;

fn default_trials() -> usize {
    1000
}

/// Experiment description as written on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
    #[serde(rename = "Q")]
    pub q: Vec<f64>,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    #[serde(rename = "S_terminal")]
    pub s_terminal: Vec<f64>,
    pub horizon: usize,
    pub pmf: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_cov: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub baselines: Vec<String>,
}

/// A validated experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub model: SystemModel,
    pub pmf: DelayPmf,
    pub seed: u64,
    pub trials: usize,
    pub noise: Noise,
    pub x0: DVector<f64>,
    pub baselines: Vec<Baseline>,
}

fn matrix(name: &str, data: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Dimension(format!("{name} has {} entries, expected {rows}x{cols}", data.len())));
    }
    Ok(from_row_major(rows, cols, data))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self) -> Result<Experiment> {
        let (n, m) = (self.n, self.m);
        if n == 0 || m == 0 || n > MAX_DIM || m > MAX_DIM {
            return Err(Error::Dimension(format!("n = {n}, m = {m} must lie in 1..={MAX_DIM}")));
        }
        if self.horizon > MAX_HORIZON {
            return Err(Error::Domain(format!("horizon {} exceeds {MAX_HORIZON}", self.horizon)));
        }
        if self.trials == 0 {
            return Err(Error::Domain("trials must be positive".into()));
        }
        let model = SystemModel::new(
            matrix("A", &self.a, n, n)?,
            matrix("B", &self.b, n, m)?,
            matrix("Q", &self.q, n, n)?,
            matrix("R", &self.r, m, m)?,
            matrix("S_terminal", &self.s_terminal, n, n)?,
            self.horizon,
        )?;
        let pmf = DelayPmf::new(self.pmf.clone())?;
        let noise = match &self.noise_cov {
            Some(c) => Noise::gaussian(&matrix("noise_cov", c, n, n)?)?,
            None => Noise::off(),
        };
        let x0 = match &self.x0 {
            Some(v) if v.len() != n => {
                return Err(Error::Dimension(format!("x0 has {} entries, expected {n}", v.len())))
            }
            Some(v) if v.iter().any(|x| !x.is_finite()) => {
                return Err(Error::InvalidModel("x0 has non-finite entries".into()))
            }
            Some(v) => DVector::from_column_slice(v),
            None => DVector::from_element(n, 1.0),
        };
        let baselines = self.baselines.iter().map(|b| Baseline::parse(b)).collect::<Result<Vec<_>>>()?;
        Ok(Experiment { model, pmf, seed: self.seed, trials: self.trials, noise, x0, baselines })
    }
}

/// Parses and validates an experiment configuration.
pub fn parse_config(text: &str) -> Result<Experiment> {
    ExperimentConfig::from_json(text)?.validate()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GainDoc {
    tau: Stamp,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageDoc {
    t: usize,
    #[serde(rename = "A11")]
    a11: Vec<f64>,
    #[serde(rename = "A11_flags")]
    a11_flags: A11Flag,
    gains: Vec<GainDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleDoc {
    n: usize,
    m: usize,
    horizon: usize,
    stages: Vec<StageDoc>,
}

fn finite(name: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Schedule(format!("{name} has non-finite entries")))
    }
}

pub fn schedule_to_json(schedule: &GainSchedule) -> Result<String> {
    let mut stages = Vec::with_capacity(schedule.stages.len());
    for st in &schedule.stages {
        let a11 = to_row_major(&st.a11);
        finite("A11", &a11)?;
        let mut gains = Vec::with_capacity(st.gains.len());
        for row in &st.gains {
            let dense = row.dense();
            let data = to_row_major(&dense);
            finite("gain", &data)?;
            gains.push(GainDoc { tau: row.tau, shape: [dense.nrows(), dense.ncols()], data });
        }
        stages.push(StageDoc { t: st.t, a11, a11_flags: st.flag, gains });
    }
    let doc = ScheduleDoc { n: schedule.n, m: schedule.m, horizon: schedule.horizon, stages };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(text)
}

/// Parses a schedule document and checks every shape before building matrices.
pub fn parse_schedule(text: &str) -> Result<GainSchedule> {
    let doc: ScheduleDoc = serde_json::from_str(text)?;
    let (n, m) = (doc.n, doc.m);
    if n == 0 || m == 0 || n > MAX_DIM || m > MAX_DIM || doc.horizon > MAX_HORIZON {
        return Err(Error::Schedule(format!("dimensions n = {n}, m = {m}, horizon = {} out of range", doc.horizon)));
    }
    if doc.stages.len() != doc.horizon + 1 {
        return Err(Error::Schedule(format!("{} stages for horizon {}", doc.stages.len(), doc.horizon)));
    }
    let mut stages = Vec::with_capacity(doc.stages.len());
    for (t, st) in doc.stages.into_iter().enumerate() {
        if st.t != t {
            return Err(Error::Schedule(format!("stage {t} labelled {}", st.t)));
        }
        if st.a11.len() != m * m {
            return Err(Error::Schedule(format!("A11 at t = {t} has {} entries", st.a11.len())));
        }
        finite("A11", &st.a11)?;
        if st.gains.len() != t + 1 {
            return Err(Error::Schedule(format!("stage {t} has {} gains, expected {}", st.gains.len(), t + 1)));
        }
        let a11 = from_row_major(m, m, &st.a11);
        let a11_inv = match sym_inverse(&a11, max_abs(&a11), 1e-10) {
            SymInverse::Definite(x) | SymInverse::Pseudo(x) => x,
            SymInverse::Indefinite(_) => return Err(Error::Schedule(format!("A11 at t = {t} is indefinite"))),
        };
        let mut gains = Vec::with_capacity(t + 1);
        for (i, g) in st.gains.into_iter().enumerate() {
            let tau = i as Stamp - 1;
            let width = m * StackedGainRow::stored_controls(t as Stamp, tau) + n;
            if g.tau != tau || g.shape != [m, width] || g.data.len() != m * width {
                return Err(Error::Schedule(format!("gain t = {t}, τ = {} must have τ = {tau} and shape [{m}, {width}]", g.tau)));
            }
            finite("gain", &g.data)?;
            gains.push(StackedGainRow::from_dense(t as Stamp, tau, m, n, &from_row_major(m, width, &g.data))?);
        }
        stages.push(StageGains { t, a11, a11_inv, flag: st.a11_flags, gains });
    }
    let schedule = GainSchedule { n, m, horizon: doc.horizon, stages };
    schedule.validate()?;
    Ok(schedule)
}

/// Flat `t,tau,row,col,value` listing of every gain entry.
pub fn write_gains_csv<W: Write>(schedule: &GainSchedule, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "tau", "row", "col", "value"])?;
    for st in &schedule.stages {
        for row in &st.gains {
            let d = row.dense();
            for r in 0..d.nrows() {
                for c in 0..d.ncols() {
                    w.write_record([st.t.to_string(), row.tau.to_string(), r.to_string(), c.to_string(), d[(r, c)].to_string()])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_csv<W: Write>(trace: &SimTrace, n: usize, m: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("v{i}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    header.extend(["applied_age", "tau", "step_cost", "cum_cost"].map(String::from));
    w.write_record(&header)?;
    for r in &trace.rows {
        let mut rec = vec![r.t.to_string()];
        rec.extend(r.x.iter().map(f64::to_string));
        rec.extend(r.v.iter().map(f64::to_string));
        rec.extend(r.u.iter().map(f64::to_string));
        rec.push(r.applied_age.map(|a| a.to_string()).unwrap_or_default());
        rec.push(r.tau.to_string());
        rec.push(r.step_cost.to_string());
        rec.push(r.cum_cost.to_string());
        w.write_record(&rec)?;
    }
    // terminal row: state x_{N+1} and its terminal cost
    let last_tau = trace.rows.last().map(|r| r.tau).unwrap_or(-1);
    let mut rec = vec![trace.rows.len().to_string()];
    rec.extend(trace.x_final.iter().map(f64::to_string));
    rec.extend(std::iter::repeat_n(String::new(), 2 * m + 1));
    rec.push(last_tau.to_string());
    rec.push(trace.terminal_cost.to_string());
    rec.push(trace.total_cost.to_string());
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}

pub fn write_results_csv<W: Write>(results: &[McResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["policy", "trials", "mean_cost", "std", "ci99_lo", "ci99_hi", "seed"])?;
    for r in results {
        w.write_record([
            r.policy.clone(),
            r.trials.to_string(),
            r.mean_cost.to_string(),
            r.std.to_string(),
            r.ci99_lo.to_string(),
            r.ci99_hi.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = r#"{"n":1,"m":1,"A":[1.2],"B":[1],"Q":[1],"R":[1],"S_terminal":[1],
        "horizon":3,"pmf":[0.5,0.3],"seed":7,"trials":10,"baselines":["lqr-hold","zero-input"]}"#;

    #[test]
    fn parses_scalar_config() {
        let e = parse_config(SCALAR).unwrap();
        assert_eq!(e.model.horizon, 3);
        assert_eq!(e.baselines, vec![Baseline::LqrHold, Baseline::ZeroInput]);
        assert!((e.pmf.loss_mass() - 0.2).abs() < 1e-15);
        assert_eq!(e.x0[0], 1.0);
    }

    #[test]
    fn config_errors() {
        let bad_r = SCALAR.replace("\"R\":[1]", "\"R\":[-1]");
        assert!(matches!(parse_config(&bad_r), Err(Error::InvalidModel(_))));
        let bad_dim = SCALAR.replace("\"A\":[1.2]", "\"A\":[1.2, 3]");
        assert!(matches!(parse_config(&bad_dim), Err(Error::Dimension(_))));
        let bad_base = SCALAR.replace("zero-input", "pid");
        assert!(matches!(parse_config(&bad_base), Err(Error::Parse(_))));
        assert!(parse_config("{").is_err());
    }

    #[test]
    fn schedule_roundtrip() {
        let e = parse_config(SCALAR).unwrap();
        let s = crate::synth::synthesize(&e.model, &e.pmf).unwrap();
        let text = schedule_to_json(&s).unwrap();
        let back = parse_schedule(&text).unwrap();
        assert_eq!(schedule_to_json(&back).unwrap(), text);
        for (a, b) in s.stages.iter().zip(&back.stages) {
            assert_eq!(a.gains, b.gains);
            assert_eq!(a.a11, b.a11);
        }
    }

    #[test]
    fn schedule_shape_errors() {
        let e = parse_config(SCALAR).unwrap();
        let s = crate::synth::synthesize(&e.model, &e.pmf).unwrap();
        let text = schedule_to_json(&s).unwrap();
        let broken = text.replacen("\"horizon\": 3", "\"horizon\": 2", 1);
        assert!(parse_schedule(&broken).is_err());
        assert!(parse_schedule("{\"n\":1,\"m\":1,\"horizon\":0,\"stages\":[]}").is_err());
    }
}
