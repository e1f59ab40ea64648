use nalgebra::DMatrix;

use crate::linalg::sym;
use crate::model::SystemModel;

/// Classical finite-horizon LQR: `u_t = -L_t x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSchedule {
    /// `L_0 … L_N`.
    pub gains: Vec<DMatrix<f64>>,
    /// `S_0 … S_{N+1}`.
    pub s: Vec<DMatrix<f64>>,
}

impl RiccatiSchedule {
    /// Optimal cost from `x0`, `x0ᵀ S_0 x0`.
    pub fn value(&self, x0: &nalgebra::DVector<f64>) -> f64 {
        x0.dot(&(&self.s[0] * x0))
    }
}

pub fn riccati_reference(model: &SystemModel) -> RiccatiSchedule {
    let (a, b) = (&model.a, &model.b);
    let n = model.horizon;
    let mut s = vec![DMatrix::zeros(model.n(), model.n()); n + 2];
    let mut gains = vec![DMatrix::zeros(model.m(), model.n()); n + 1];
    s[n + 1] = model.s_terminal.clone();
    for t in (0..=n).rev() {
        let sn = &s[t + 1];
        let bts = b.transpose() * sn;
        let h = &model.r + &bts * b;
        let l = h.clone().cholesky().expect("R + BᵀSB is positive definite").solve(&(&bts * a));
        let next = &model.q + a.transpose() * sn * a - a.transpose() * sn * b * &l;
        s[t] = sym(&next);
        gains[t] = l;
    }
    RiccatiSchedule { gains, s }
}
