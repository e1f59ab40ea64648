use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, max_abs, min_eigenvalue};

/// Plant `x_{k+1} = A x_k + B u_k + w_k` with cost
/// `Σ_{i=0}^{N} (u_iᵀ R u_i + x_iᵀ Q x_i) + x_{N+1}ᵀ S x_{N+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s_terminal: DMatrix<f64>,
    pub horizon: usize,
}

const SYM_TOL: f64 = 1e-9;

impl SystemModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        s_terminal: DMatrix<f64>,
        horizon: usize,
    ) -> Result<Self> {
        let model = SystemModel { a, b, q, r, s_terminal, horizon };
        model.validate()?;
        Ok(model)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.a.nrows(), self.b.ncols());
        if n == 0 || m == 0 {
            return Err(Error::Dimension("n and m must be positive".into()));
        }
        let shapes = [
            ("A", &self.a, n, n),
            ("B", &self.b, n, m),
            ("Q", &self.q, n, n),
            ("R", &self.r, m, m),
            ("S_terminal", &self.s_terminal, n, n),
        ];
        for (name, mat, r, c) in shapes {
            if mat.nrows() != r || mat.ncols() != c {
                return Err(Error::Dimension(format!("{name} is {}x{}, expected {r}x{c}", mat.nrows(), mat.ncols())));
            }
            if mat.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidModel(format!("{name} has non-finite entries")));
            }
        }
        for (name, mat, definite) in [("R", &self.r, true), ("Q", &self.q, false), ("S_terminal", &self.s_terminal, false)] {
            let scale = max_abs(mat).max(f64::MIN_POSITIVE);
            if asymmetry(mat) > SYM_TOL * scale {
                return Err(Error::InvalidModel(format!("{name} must be symmetric")));
            }
            let lam = min_eigenvalue(mat);
            if definite && lam <= 0.0 {
                return Err(Error::InvalidModel(format!("{name} must be positive definite (min eigenvalue {lam:e})")));
            }
            if !definite && lam < -SYM_TOL * scale {
                return Err(Error::InvalidModel(format!("{name} must be positive semidefinite (min eigenvalue {lam:e})")));
            }
        }
        Ok(())
    }

    /// Same plant and weights with cost matrices scaled by `c`.
    pub fn scaled_cost(&self, c: f64) -> SystemModel {
        SystemModel {
            q: &self.q * c,
            r: &self.r * c,
            s_terminal: &self.s_terminal * c,
            ..self.clone()
        }
    }

    pub fn with_horizon(&self, horizon: usize) -> SystemModel {
        SystemModel { horizon, ..self.clone() }
    }

    /// Scalar plant helper.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64, s: f64, horizon: usize) -> Result<Self> {
        let e = |x| DMatrix::from_element(1, 1, x);
        SystemModel::new(e(a), e(b), e(q), e(r), e(s), horizon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_weights() {
        assert!(SystemModel::scalar(1.0, 1.0, 1.0, 0.0, 1.0, 2).is_err());
        assert!(SystemModel::scalar(1.0, 1.0, -1.0, 1.0, 1.0, 2).is_err());
        assert!(SystemModel::scalar(1.0, 1.0, 1.0, 1.0, 1.0, 2).is_ok());
        let e = DMatrix::identity(2, 2);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(SystemModel::new(e.clone(), DMatrix::from_element(2, 1, 1.0), asym, DMatrix::identity(1, 1), e, 1).is_err());
    }
}
