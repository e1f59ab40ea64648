//! Small dense helpers shared by synthesis, simulation and the oracle.

use nalgebra::{DMatrix, SymmetricEigen};

pub fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    max_abs(&(a - a.transpose()))
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    if a.iter().any(|x| !x.is_finite()) {
        return f64::NAN;
    }
    SymmetricEigen::new(sym(a)).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Outcome of inverting a symmetric positive semidefinite matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum SymInverse {
    /// Positive definite; exact inverse.
    Definite(DMatrix<f64>),
    /// Singular; Moore-Penrose pseudo-inverse.
    Pseudo(DMatrix<f64>),
    /// A significantly negative eigenvalue was found.
    Indefinite(f64),
}

/// Eigenvalues at or below `rtol·scale` count as zero, and below `-rtol·scale` as
/// negative. `scale` should carry the magnitude of the problem so that the test is
/// invariant to uniform rescaling of the cost.
pub fn sym_inverse(a: &DMatrix<f64>, scale: f64, rtol: f64) -> SymInverse {
    let n = a.nrows();
    if a.iter().any(|x| !x.is_finite()) {
        return SymInverse::Indefinite(f64::NAN);
    }
    let eig = SymmetricEigen::new(sym(a));
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let thresh = rtol * scale.max(top);
    let mut inv = DMatrix::zeros(n, n);
    let mut singular = false;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -thresh {
            return SymInverse::Indefinite(lam);
        }
        if lam <= thresh {
            singular = true;
            continue;
        }
        let v = eig.eigenvectors.column(k);
        inv += (v * v.transpose()) / lam;
    }
    let inv = sym(&inv);
    if singular {
        SymInverse::Pseudo(inv)
    } else {
        SymInverse::Definite(inv)
    }
}

/// `A^0 … A^k`.
pub fn powers(a: &DMatrix<f64>, k: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(DMatrix::identity(a.nrows(), a.ncols()));
    for i in 0..k {
        let next = &out[i] * a;
        out.push(next);
    }
    out
}

/// Matrix from a row-major slice.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

pub fn to_row_major(a: &DMatrix<f64>) -> Vec<f64> {
    a.transpose().iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_inverse_of_zero() {
        let z = DMatrix::zeros(2, 2);
        assert_eq!(sym_inverse(&z, 1.0, 1e-11), SymInverse::Pseudo(DMatrix::zeros(2, 2)));
    }

    #[test]
    fn definite_inverse() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        match sym_inverse(&a, 1.0, 1e-11) {
            SymInverse::Definite(inv) => assert!(max_abs(&(inv * &a - DMatrix::identity(2, 2))) < 1e-14),
            other => panic!("{other:?}"),
        }
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(sym_inverse(&b, 1.0, 1e-11), SymInverse::Indefinite(_)));
    }

    #[test]
    fn row_major_roundtrip() {
        let a = from_row_major(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a[(0, 2)], 3.0);
        assert_eq!(to_row_major(&a), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
