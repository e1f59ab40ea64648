//! Offline synthesis of the optimal gain schedule.

mod recursion;
mod riccati;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use recursion::{r_weight, LinFamily, LinTables, QuadFamily, QuadTables, StageCache, Synthesizer};
pub use riccati::{riccati_reference, RiccatiSchedule};

use crate::delay::DelayPmf;
use crate::error::{Error, Result};
use crate::linform::{StackedGainRow, Stamp};
use crate::model::SystemModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum A11Flag {
    #[serde(rename = "pd")]
    Pd,
    #[serde(rename = "psd-pseudoinverse")]
    PsdPseudoInverse,
}

/// Feedback for stage time `t`: one row per acknowledgment timestamp `τ ∈ {-1, …, t-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageGains {
    pub t: usize,
    pub a11: DMatrix<f64>,
    pub a11_inv: DMatrix<f64>,
    pub flag: A11Flag,
    /// Indexed by `τ + 1`.
    pub gains: Vec<StackedGainRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainSchedule {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    /// Indexed by stage time `t`.
    pub stages: Vec<StageGains>,
}

impl GainSchedule {
    pub fn gain(&self, t: usize, tau: Stamp) -> Result<&StackedGainRow> {
        let stage = self
            .stages
            .get(t)
            .ok_or_else(|| Error::Schedule(format!("no stage for t = {t}")))?;
        if tau < -1 {
            return Err(Error::Schedule(format!("τ = {tau} is not a timestamp")));
        }
        stage
            .gains
            .get((tau + 1) as usize)
            .ok_or_else(|| Error::Schedule(format!("no gain for t = {t}, τ = {tau}")))
    }

    /// Checks the structural invariants: one stage per time, one row per `τ`,
    /// row widths `m·(t - max(τ, 0)) + n`, finite entries.
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != self.horizon + 1 {
            return Err(Error::Schedule(format!("{} stages for horizon {}", self.stages.len(), self.horizon)));
        }
        for (t, st) in self.stages.iter().enumerate() {
            if st.t != t {
                return Err(Error::Schedule(format!("stage {t} labelled {}", st.t)));
            }
            if st.a11.shape() != (self.m, self.m) {
                return Err(Error::Schedule(format!("A11 at t = {t} is not {}x{}", self.m, self.m)));
            }
            if st.gains.len() != t + 1 {
                return Err(Error::Schedule(format!("stage {t} has {} rows, expected {}", st.gains.len(), t + 1)));
            }
            for (i, row) in st.gains.iter().enumerate() {
                let tau = i as Stamp - 1;
                let want = self.m * StackedGainRow::stored_controls(t as Stamp, tau) + self.n;
                if row.t != t as Stamp || row.tau != tau || row.width() != want || row.control_block.nrows() != self.m {
                    return Err(Error::Schedule(format!("row t = {t}, τ = {tau} has width {} (expected {want})", row.width())));
                }
                if row.dense().iter().any(|x| !x.is_finite()) {
                    return Err(Error::Schedule(format!("row t = {t}, τ = {tau} is not finite")));
                }
            }
        }
        Ok(())
    }
}

/// Runs the full backward recursion.
pub fn synthesize(model: &SystemModel, pmf: &DelayPmf) -> Result<GainSchedule> {
    let schedule = Synthesizer::new(model, pmf, false)?.finish()?.0;
    schedule.validate()?;
    Ok(schedule)
}

/// Like [`synthesize`], also returning the τ-independent tables.
pub fn synthesize_with_cache(model: &SystemModel, pmf: &DelayPmf) -> Result<(GainSchedule, StageCache)> {
    let (schedule, cache) = Synthesizer::new(model, pmf, true)?.finish()?;
    schedule.validate()?;
    Ok((schedule, cache))
}
