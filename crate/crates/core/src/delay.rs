//! Delay and loss probability algebra.
//!
//! `p(d)` is the probability that a packet takes exactly `d` samples to reach the
//! actuator; the mass not covered by `p(0..=d_max)` is packet loss. From it follow
//! the cumulative `P(i)`, its complement `P̄(i)`, and the distribution of the age of
//! the control currently held by the actuator: `p_d(i)`, `P_d(i)`, `P̄_d(i)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for validating probabilities.
pub const EPS_NUM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DelayPmf {
    probs: Vec<f64>,
    loss: f64,
}

impl TryFrom<Vec<f64>> for DelayPmf {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        DelayPmf::new(v)
    }
}

impl From<DelayPmf> for Vec<f64> {
    fn from(p: DelayPmf) -> Self {
        p.probs
    }
}

impl DelayPmf {
    /// Builds a pmf from `p(0..=d_max)`. The residual mass is loss.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let mut clamped = Vec::with_capacity(probs.len());
        for (d, &p) in probs.iter().enumerate() {
            if !p.is_finite() || !(-EPS_NUM..=1.0 + EPS_NUM).contains(&p) {
                return Err(Error::InvalidPmf(format!("p({d}) = {p} outside [0, 1]")));
            }
            clamped.push(p.clamp(0.0, 1.0));
        }
        let total: f64 = clamped.iter().sum();
        if total > 1.0 + EPS_NUM {
            return Err(Error::InvalidPmf(format!("probabilities sum to {total} > 1")));
        }
        let mut loss = (1.0 - total).clamp(0.0, 1.0);
        if loss <= EPS_NUM {
            loss = 0.0;
        }
        Ok(DelayPmf { probs: clamped, loss })
    }

    pub fn zero_delay() -> Self {
        DelayPmf { probs: vec![1.0], loss: 0.0 }
    }

    pub fn total_loss() -> Self {
        DelayPmf { probs: Vec::new(), loss: 1.0 }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Largest finite delay with a declared probability, `None` for total loss.
    pub fn d_max(&self) -> Option<usize> {
        self.probs.len().checked_sub(1)
    }

    pub fn loss_mass(&self) -> f64 {
        self.loss
    }

    /// `p(d)`, zero outside `0..=d_max`.
    pub fn p(&self, d: i64) -> f64 {
        if d < 0 {
            return 0.0;
        }
        self.probs.get(d as usize).copied().unwrap_or(0.0)
    }

    /// `P(i)`; zero for negative arguments.
    pub fn cdf(&self, i: i64) -> f64 {
        if i < 0 {
            return 0.0;
        }
        let hi = (i as usize + 1).min(self.probs.len());
        self.probs[..hi].iter().sum()
    }

    /// `P̄(i) = 1 - P(i)`, summed from the tail so that it is exactly the loss mass
    /// beyond `d_max`. One for negative arguments.
    pub fn tail(&self, i: i64) -> f64 {
        if i < 0 {
            return 1.0;
        }
        let lo = (i as usize + 1).min(self.probs.len());
        self.loss + self.probs[lo..].iter().sum::<f64>()
    }

    /// `P(i)` with a domain check.
    pub fn cum(&self, i: i64) -> Result<f64> {
        if i < 0 {
            return Err(Error::Domain(format!("P({i}) requires i >= 0")));
        }
        Ok(self.cdf(i))
    }

    /// `P̄_d(i)`: probability that none of the last `i + 1` controls has arrived.
    /// One for `i = -1`.
    pub fn age_tail(&self, i: i64) -> f64 {
        (0..=i).map(|j| self.tail(j)).product()
    }

    /// `p_d(i)`: probability that the held control was sent `i` samples ago.
    pub fn age_pmf(&self, i: i64) -> f64 {
        if i < 0 {
            return 0.0;
        }
        self.cdf(i) * self.age_tail(i - 1)
    }

    /// `P_d(i) = Σ_{k≤i} p_d(k)`.
    pub fn age_cdf(&self, i: i64) -> f64 {
        (0..=i).map(|k| self.age_pmf(k)).sum()
    }

    /// `p_d(i)` with a domain check.
    pub fn applied_age_pmf(&self, i: i64) -> Result<f64> {
        if i < 0 {
            return Err(Error::Domain(format!("p_d({i}) requires i >= 0")));
        }
        Ok(self.age_pmf(i))
    }

    /// `P̄_d(i)` with a domain check (`i ≥ -1`).
    pub fn comp_cum_applied(&self, i: i64) -> Result<f64> {
        if i < -1 {
            return Err(Error::Domain(format!("P̄_d({i}) requires i >= -1")));
        }
        Ok(self.age_tail(i))
    }

    /// Maps a uniform draw in `[0, 1)` to a delay, `None` meaning lost.
    pub fn sample_delay(&self, u: f64) -> Option<usize> {
        let mut acc = 0.0;
        for (d, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Some(d);
            }
        }
        None
    }

    /// Outcomes with positive mass: finite delays then loss.
    pub fn support(&self) -> Vec<(Option<usize>, f64)> {
        let mut out: Vec<(Option<usize>, f64)> = self
            .probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(d, &p)| (Some(d), p))
            .collect();
        if self.loss > 0.0 {
            out.push((None, self.loss));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> DelayPmf {
        DelayPmf::new(vec![0.5, 0.3]).unwrap()
    }

    #[test]
    fn cum_examples() {
        assert_eq!(DelayPmf::zero_delay().cum(5).unwrap(), 1.0);
        assert!((example().cum(1).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(DelayPmf::total_loss().cum(3).unwrap(), 0.0);
        assert!(example().cum(-1).is_err());
    }

    #[test]
    fn applied_age_examples() {
        let z = DelayPmf::zero_delay();
        assert_eq!(z.applied_age_pmf(0).unwrap(), 1.0);
        assert_eq!(z.applied_age_pmf(1).unwrap(), 0.0);
        let e = example();
        // independent partial sums: P = .5, .8, .8, ...; P̄ = .5, .2, .2, ...
        let expected = [0.5, 0.8 * 0.5, 0.8 * 0.5 * 0.2, 0.8 * 0.5 * 0.2 * 0.2];
        for (i, want) in expected.iter().enumerate() {
            assert!((e.applied_age_pmf(i as i64).unwrap() - want).abs() < 1e-15);
        }
        assert!((expected[2] - 0.08).abs() < 1e-15 && (expected[3] - 0.016).abs() < 1e-15);
        let l = DelayPmf::total_loss();
        for i in 0..6 {
            assert_eq!(l.applied_age_pmf(i).unwrap(), 0.0);
        }
    }

    #[test]
    fn comp_cum_applied_examples() {
        assert_eq!(DelayPmf::zero_delay().comp_cum_applied(0).unwrap(), 0.0);
        assert!((example().comp_cum_applied(1).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(example().comp_cum_applied(-1).unwrap(), 1.0);
        assert!(example().comp_cum_applied(-2).is_err());
    }

    #[test]
    fn construction_rejects_bad_mass() {
        assert!(DelayPmf::new(vec![0.7, 0.4]).is_err());
        assert!(DelayPmf::new(vec![-0.1]).is_err());
        assert!(DelayPmf::new(vec![f64::NAN]).is_err());
        let p = DelayPmf::new(vec![0.5, 0.5 + 1e-13]).unwrap();
        assert_eq!(p.loss_mass(), 0.0);
    }

    #[test]
    fn sampling_follows_cumulative() {
        let e = example();
        assert_eq!(e.sample_delay(0.0), Some(0));
        assert_eq!(e.sample_delay(0.49), Some(0));
        assert_eq!(e.sample_delay(0.5), Some(1));
        assert_eq!(e.sample_delay(0.79), Some(1));
        assert_eq!(e.sample_delay(0.81), None);
    }
}
