//! Online controller driven by a precomputed [`GainSchedule`].

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linform::Stamp;
use crate::synth::GainSchedule;

/// `ζ` and `τ` as the controller sees them.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    t: usize,
    tau: Stamp,
    /// `(j, v_j)` for `j = max(τ, 0) … t-1`, oldest first.
    pending: Vec<(Stamp, DVector<f64>)>,
    x: DVector<f64>,
}

impl ControllerState {
    pub fn new(x0: DVector<f64>) -> Self {
        ControllerState { t: 0, tau: -1, pending: Vec::new(), x: x0 }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn tau(&self) -> Stamp {
        self.tau
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    /// Stored controls, newest first.
    pub fn pending(&self) -> Vec<DVector<f64>> {
        self.pending.iter().rev().map(|(_, v)| v.clone()).collect()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Records the measured state `x_t`.
    pub fn observe(&mut self, x: DVector<f64>) {
        self.x = x;
    }

    /// Computes and records `v_t`, then advances to `t + 1`.
    pub fn control(&mut self, schedule: &GainSchedule) -> Result<DVector<f64>> {
        if self.t > schedule.horizon {
            return Err(Error::Schedule(format!("t = {} beyond horizon {}", self.t, schedule.horizon)));
        }
        let gain = schedule.gain(self.t, self.tau)?;
        let v = gain.apply(&self.pending(), &self.x)?;
        self.pending.push((self.t as Stamp, v.clone()));
        self.t += 1;
        Ok(v)
    }

    /// Applies the acknowledgments delivered in this sample. Stale ones are ignored.
    pub fn on_ack(&mut self, acked: &[Stamp]) -> Result<()> {
        if let Some(&bad) = acked.iter().find(|&&j| j < 0 || j >= self.t as Stamp) {
            return Err(Error::Protocol(format!("acknowledgment for v_{bad}, which was never sent")));
        }
        if let Some(&newest) = acked.iter().max() {
            if newest > self.tau {
                self.tau = newest;
                self.pending.retain(|(j, _)| *j >= newest);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(n: usize) -> ControllerState {
        let mut s = ControllerState::new(DVector::zeros(1));
        for j in 0..n {
            s.pending.push((j as Stamp, DVector::from_element(1, j as f64)));
            s.t += 1;
        }
        s
    }

    #[test]
    fn ack_examples() {
        let mut s = sent(4);
        s.on_ack(&[1]).unwrap();
        let before = s.clone();
        s.on_ack(&[]).unwrap();
        assert_eq!(s, before);
        s.on_ack(&[0]).unwrap();
        assert_eq!(s.tau(), 1);
        assert_eq!(s.pending_len(), 3);
        s.on_ack(&[0, 3]).unwrap();
        assert_eq!(s.tau(), 3);
        assert_eq!(s.pending_len(), 1);
        assert!(s.on_ack(&[4]).is_err());
    }
}
