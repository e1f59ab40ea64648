//! Expressions in timestamped past controls.
//!
//! Every τ-dependent quantity of the gain recursion is either linear in the
//! stored controls `v_j` ([`ControlLinForm`]) or quadratic in them ([`QuadForm`]).
//! Coefficients are keyed by the absolute send time `j`. Timestamp `-1` denotes
//! the virtual control sent before the horizon, which is identically zero.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Stamp = i64;

/// Controls sent so far, `v_0, v_1, ...`; `v_{-1}` reads as zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ControlHistory {
    m: usize,
    controls: Vec<DVector<f64>>,
}

impl ControlHistory {
    pub fn new(m: usize) -> Self {
        ControlHistory { m, controls: Vec::new() }
    }

    pub fn from_controls(m: usize, controls: Vec<DVector<f64>>) -> Result<Self> {
        if let Some(v) = controls.iter().find(|v| v.len() != m) {
            return Err(Error::Dimension(format!("control of length {} in history of width {m}", v.len())));
        }
        Ok(ControlHistory { m, controls })
    }

    pub fn push(&mut self, v: DVector<f64>) -> Result<()> {
        if v.len() != self.m {
            return Err(Error::Dimension(format!("control of length {} pushed to width {}", v.len(), self.m)));
        }
        self.controls.push(v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn get(&self, j: Stamp) -> Result<DVector<f64>> {
        if j == -1 {
            return Ok(DVector::zeros(self.m));
        }
        if j < -1 {
            return Err(Error::MissingControl(j));
        }
        self.controls.get(j as usize).cloned().ok_or(Error::MissingControl(j))
    }
}

/// `Σ_j C_j v_j` with `rows × m` coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlLinForm {
    rows: usize,
    m: usize,
    span: Option<(Stamp, Stamp)>,
    coeffs: BTreeMap<Stamp, DMatrix<f64>>,
}

fn is_zero(a: &DMatrix<f64>) -> bool {
    a.iter().all(|&x| x == 0.0)
}

fn union(a: Option<(Stamp, Stamp)>, b: Option<(Stamp, Stamp)>) -> Option<(Stamp, Stamp)> {
    match (a, b) {
        (Some((a0, a1)), Some((b0, b1))) => Some((a0.min(b0), a1.max(b1))),
        (x, None) | (None, x) => x,
    }
}

impl ControlLinForm {
    pub fn new(rows: usize, m: usize) -> Self {
        ControlLinForm { rows, m, span: None, coeffs: BTreeMap::new() }
    }

    /// Empty form that declares the timestamp range `[lo, hi]`.
    pub fn with_span(rows: usize, m: usize, lo: Stamp, hi: Stamp) -> Self {
        ControlLinForm { rows, m, span: Some((lo, hi)), coeffs: BTreeMap::new() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn span(&self) -> Option<(Stamp, Stamp)> {
        self.span
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeff(&self, j: Stamp) -> Option<&DMatrix<f64>> {
        self.coeffs.get(&j)
    }

    pub fn terms(&self) -> impl Iterator<Item = (Stamp, &DMatrix<f64>)> {
        self.coeffs.iter().map(|(&j, c)| (j, c))
    }

    /// Adds `c·v_j`. Exactly zero coefficients are not stored.
    pub fn add_term(&mut self, j: Stamp, c: &DMatrix<f64>) -> Result<()> {
        if c.nrows() != self.rows || c.ncols() != self.m {
            return Err(Error::Dimension(format!(
                "coefficient {}x{} added to {}x{} form",
                c.nrows(),
                c.ncols(),
                self.rows,
                self.m
            )));
        }
        self.span = union(self.span, Some((j, j)));
        match self.coeffs.get_mut(&j) {
            Some(e) => *e += c,
            None if is_zero(c) => {}
            None => {
                self.coeffs.insert(j, c.clone());
            }
        }
        Ok(())
    }

    fn add_scaled_unchecked(&mut self, s: f64, other: &ControlLinForm) {
        self.span = union(self.span, other.span);
        for (&j, c) in &other.coeffs {
            match self.coeffs.get_mut(&j) {
                Some(e) => *e += c * s,
                None => {
                    let v = c * s;
                    if !is_zero(&v) {
                        self.coeffs.insert(j, v);
                    }
                }
            }
        }
    }

    /// `self += s·other`.
    pub fn add_scaled(&mut self, s: f64, other: &ControlLinForm) -> Result<()> {
        if other.rows != self.rows || other.m != self.m {
            return Err(Error::Dimension("forms of different shape".into()));
        }
        self.add_scaled_unchecked(s, other);
        Ok(())
    }

    /// Coefficient-wise `a·C_j`.
    pub fn left_mul(&self, a: &DMatrix<f64>) -> Result<ControlLinForm> {
        if a.ncols() != self.rows {
            return Err(Error::Dimension(format!("{}x{} times form with {} rows", a.nrows(), a.ncols(), self.rows)));
        }
        let mut out = ControlLinForm { rows: a.nrows(), m: self.m, span: self.span, coeffs: BTreeMap::new() };
        for (&j, c) in &self.coeffs {
            let v = a * c;
            if !is_zero(&v) {
                out.coeffs.insert(j, v);
            }
        }
        Ok(out)
    }

    /// `a·x + y`, coefficient-wise.
    pub fn axpy(a: &DMatrix<f64>, x: &ControlLinForm, y: &ControlLinForm) -> Result<ControlLinForm> {
        if x.m != y.m || a.nrows() != y.rows {
            return Err(Error::Dimension("axpy operands disagree".into()));
        }
        let mut out = x.left_mul(a)?;
        out.add_scaled_unchecked(1.0, y);
        Ok(out)
    }

    /// Drops every term newer than `max`.
    pub fn restrict(&self, max: Stamp) -> ControlLinForm {
        let coeffs: BTreeMap<_, _> = self.coeffs.range(..=max).map(|(&j, c)| (j, c.clone())).collect();
        let span = self.span.and_then(|(lo, hi)| (lo <= max).then_some((lo, hi.min(max))));
        ControlLinForm { rows: self.rows, m: self.m, span, coeffs }
    }

    /// Splits off the coefficient of `v_w` (zero if absent); the rest is restricted
    /// to timestamps before `w`.
    pub fn split_newest(&self, w: Stamp) -> (DMatrix<f64>, ControlLinForm) {
        let c = self.coeffs.get(&w).cloned().unwrap_or_else(|| DMatrix::zeros(self.rows, self.m));
        (c, self.restrict(w - 1))
    }

    pub fn eval(&self, history: &ControlHistory) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.rows);
        for (&j, c) in &self.coeffs {
            out += c * history.get(j)?;
        }
        Ok(out)
    }

    /// Dense row over `[v_{t-1}; …; v_τ; x_t]` (the `v_{-1}` column is dropped).
    pub fn to_stacked_row(&self, state_coeff: &DMatrix<f64>, tau: Stamp, t: Stamp) -> Result<StackedGainRow> {
        if tau < -1 || tau > t - 1 {
            return Err(Error::Domain(format!("τ = {tau} outside [-1, {}]", t - 1)));
        }
        if state_coeff.nrows() != self.rows {
            return Err(Error::Dimension("state coefficient rows differ from form rows".into()));
        }
        if let Some((lo, hi)) = self.span {
            if !self.coeffs.is_empty() && (lo < tau || hi > t - 1) {
                return Err(Error::Domain(format!("form span [{lo}, {hi}] outside [{tau}, {}]", t - 1)));
            }
        }
        let oldest = tau.max(0);
        let blocks = (t - oldest).max(0) as usize;
        let mut control_block = DMatrix::zeros(self.rows, self.m * blocks);
        for (&j, c) in &self.coeffs {
            if j < 0 {
                continue;
            }
            let col = (t - 1 - j) as usize * self.m;
            control_block.view_mut((0, col), (self.rows, self.m)).copy_from(c);
        }
        Ok(StackedGainRow { t, tau, control_block, state_block: state_coeff.clone() })
    }
}

/// One feedback row `[control_block | state_block]` acting on `ζ`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedGainRow {
    pub t: Stamp,
    pub tau: Stamp,
    /// Acts on `[v_{t-1}; …; v_{max(τ,0)}]`, newest first.
    pub control_block: DMatrix<f64>,
    pub state_block: DMatrix<f64>,
}

impl StackedGainRow {
    /// Number of stored controls the row expects.
    pub fn stored_controls(t: Stamp, tau: Stamp) -> usize {
        (t - tau.max(0)).max(0) as usize
    }

    pub fn width(&self) -> usize {
        self.control_block.ncols() + self.state_block.ncols()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let (r, c1, c2) = (self.state_block.nrows(), self.control_block.ncols(), self.state_block.ncols());
        let mut out = DMatrix::zeros(r, c1 + c2);
        out.view_mut((0, 0), (r, c1)).copy_from(&self.control_block);
        out.view_mut((0, c1), (r, c2)).copy_from(&self.state_block);
        out
    }

    pub fn from_dense(t: Stamp, tau: Stamp, m: usize, n: usize, dense: &DMatrix<f64>) -> Result<Self> {
        let k = Self::stored_controls(t, tau);
        if dense.ncols() != m * k + n {
            return Err(Error::Dimension(format!(
                "gain at t={t}, τ={tau} has width {} (expected {})",
                dense.ncols(),
                m * k + n
            )));
        }
        Ok(StackedGainRow {
            t,
            tau,
            control_block: dense.columns(0, m * k).into_owned(),
            state_block: dense.columns(m * k, n).into_owned(),
        })
    }

    /// Applies the row to `pending` (newest first) and `x`.
    pub fn apply(&self, pending: &[DVector<f64>], x: &DVector<f64>) -> Result<DVector<f64>> {
        let m = if pending.is_empty() { 0 } else { pending[0].len() };
        if m * pending.len() != self.control_block.ncols() || x.len() != self.state_block.ncols() {
            return Err(Error::Dimension(format!(
                "ζ of width {} fed to gain of width {}",
                m * pending.len() + x.len(),
                self.width()
            )));
        }
        let mut out = &self.state_block * x;
        for (i, v) in pending.iter().enumerate() {
            out += self.control_block.columns(i * m, m) * v;
        }
        Ok(out)
    }
}

/// `Σ_{i,j} v_iᵀ B_{ij} v_j`, stored with `i ≥ j`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadForm {
    m: usize,
    blocks: BTreeMap<(Stamp, Stamp), DMatrix<f64>>,
}

impl QuadForm {
    pub fn new(m: usize) -> Self {
        QuadForm { m, blocks: BTreeMap::new() }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> impl Iterator<Item = ((Stamp, Stamp), &DMatrix<f64>)> {
        self.blocks.iter().map(|(&k, b)| (k, b))
    }

    fn accumulate(&mut self, i: Stamp, j: Stamp, b: DMatrix<f64>) {
        let (key, b) = if i >= j { ((i, j), b) } else { ((j, i), b.transpose()) };
        match self.blocks.get_mut(&key) {
            Some(e) => *e += b,
            None if is_zero(&b) => {}
            None => {
                self.blocks.insert(key, b);
            }
        }
    }

    /// Adds `v_iᵀ b v_j`.
    pub fn add_block(&mut self, i: Stamp, j: Stamp, b: &DMatrix<f64>) -> Result<()> {
        if b.nrows() != self.m || b.ncols() != self.m {
            return Err(Error::Dimension("quadratic block must be m×m".into()));
        }
        self.accumulate(i, j, b.clone());
        Ok(())
    }

    /// Adds `s·fᵀ W f` for a linear form `f`.
    pub fn add_gram(&mut self, s: f64, f: &ControlLinForm, w: &DMatrix<f64>) -> Result<()> {
        if f.m != self.m || w.nrows() != f.rows || w.ncols() != f.rows {
            return Err(Error::Dimension("gram weight does not match form".into()));
        }
        let w2 = w + w.transpose();
        let terms: Vec<(Stamp, &DMatrix<f64>)> = f.terms().collect();
        for (a, &(i, ci)) in terms.iter().enumerate() {
            let cit = ci.transpose() * s;
            self.accumulate(i, i, &cit * w * ci);
            for &(j, cj) in &terms[..a] {
                self.accumulate(i, j, &cit * &w2 * cj);
            }
        }
        Ok(())
    }

    /// Adds `s·fᵀ G v_j` where `f` is a linear form and `G` is `rows × m`.
    pub fn add_bilinear(&mut self, s: f64, f: &ControlLinForm, g: &DMatrix<f64>, j: Stamp) -> Result<()> {
        if f.m != self.m || g.nrows() != f.rows || g.ncols() != self.m {
            return Err(Error::Dimension("bilinear weight does not match form".into()));
        }
        for (i, c) in f.terms() {
            self.accumulate(i, j, (c.transpose() * g) * s);
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, s: f64, other: &QuadForm) -> Result<()> {
        if other.m != self.m {
            return Err(Error::Dimension("quadratic forms of different width".into()));
        }
        for (&(i, j), b) in &other.blocks {
            self.accumulate(i, j, b * s);
        }
        Ok(())
    }

    pub fn restrict(&self, max: Stamp) -> QuadForm {
        let blocks = self.blocks.iter().filter(|((i, _), _)| *i <= max).map(|(&k, b)| (k, b.clone())).collect();
        QuadForm { m: self.m, blocks }
    }

    /// Writes the part involving `v_w` as `v_wᵀ D v_w + 2 v_wᵀ c` with `D` symmetric and
    /// `c` a linear form in older controls; returns `(D, c, rest)`. Terms newer than `w`
    /// must not be present.
    pub fn split_newest(&self, w: Stamp) -> Result<(DMatrix<f64>, ControlLinForm, QuadForm)> {
        let mut diag = DMatrix::zeros(self.m, self.m);
        let mut cross = ControlLinForm::new(self.m, self.m);
        let mut rest = QuadForm::new(self.m);
        for (&(i, j), b) in &self.blocks {
            if i > w {
                return Err(Error::Domain(format!("quadratic form references v_{i} beyond v_{w}")));
            }
            if i == w && j == w {
                diag += (b + b.transpose()) * 0.5;
            } else if i == w {
                cross.add_term(j, &(b * 0.5))?;
            } else {
                rest.blocks.insert((i, j), b.clone());
            }
        }
        Ok((diag, cross, rest))
    }

    pub fn eval(&self, history: &ControlHistory) -> Result<f64> {
        let mut out = 0.0;
        for (&(i, j), b) in &self.blocks {
            out += history.get(i)?.dot(&(b * history.get(j)?));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn hist(vals: &[f64]) -> ControlHistory {
        ControlHistory::from_controls(1, vals.iter().map(|&v| DVector::from_element(1, v)).collect()).unwrap()
    }

    #[test]
    fn eval_examples() {
        let h = hist(&[1.0, 1.0, 0.0, 2.0]);
        assert_eq!(ControlLinForm::new(1, 1).eval(&h).unwrap()[0], 0.0);
        let mut f = ControlLinForm::new(1, 1);
        f.add_term(3, &s(1.0)).unwrap();
        assert_eq!(f.eval(&h).unwrap()[0], 2.0);
        let mut g = ControlLinForm::new(1, 1);
        g.add_term(1, &s(2.0)).unwrap();
        g.add_term(0, &s(3.0)).unwrap();
        assert_eq!(g.eval(&h).unwrap()[0], 5.0);
        let mut far = ControlLinForm::new(1, 1);
        far.add_term(7, &s(1.0)).unwrap();
        assert_eq!(far.eval(&h), Err(Error::MissingControl(7)));
    }

    #[test]
    fn axpy_examples() {
        let mut f = ControlLinForm::new(1, 1);
        f.add_term(2, &s(1.0)).unwrap();
        let empty = ControlLinForm::new(1, 1);
        assert_eq!(ControlLinForm::axpy(&s(1.0), &empty, &f).unwrap().coeff(2), Some(&s(1.0)));
        let mut x = ControlLinForm::new(1, 1);
        x.add_term(5, &s(4.0)).unwrap();
        let r = ControlLinForm::axpy(&s(0.0), &x, &f).unwrap();
        assert_eq!(r.terms().count(), 1);
        assert_eq!(r.coeff(2), Some(&s(1.0)));
        let r = ControlLinForm::axpy(&s(2.0), &f, &f).unwrap();
        assert_eq!(r.coeff(2), Some(&s(3.0)));
        let wide = ControlLinForm::new(1, 2);
        assert!(ControlLinForm::axpy(&s(1.0), &wide, &f).is_err());
    }

    #[test]
    fn stacked_row_layout() {
        let m = DMatrix::from_element(1, 1, 9.0);
        let row = ControlLinForm::new(1, 1).to_stacked_row(&m, 2, 5).unwrap();
        assert_eq!(row.dense(), DMatrix::from_row_slice(1, 4, &[0.0, 0.0, 0.0, 9.0]));

        let mut f = ControlLinForm::new(1, 1);
        f.add_term(4, &s(7.0)).unwrap();
        let row = f.to_stacked_row(&m, 4, 5).unwrap();
        assert_eq!(row.dense(), DMatrix::from_row_slice(1, 2, &[7.0, 9.0]));

        let mut f = ControlLinForm::new(1, 1);
        f.add_term(4, &s(1.0)).unwrap();
        f.add_term(3, &s(2.0)).unwrap();
        f.add_term(1, &s(3.0)).unwrap();
        let row = f.to_stacked_row(&m, 1, 5).unwrap();
        assert_eq!(row.dense(), DMatrix::from_row_slice(1, 5, &[1.0, 2.0, 0.0, 3.0, 9.0]));

        let mut g = ControlLinForm::new(1, 1);
        g.add_term(0, &s(1.0)).unwrap();
        assert!(g.to_stacked_row(&m, 1, 5).is_err());
    }

    #[test]
    fn virtual_control_column_is_dropped() {
        let mut f = ControlLinForm::new(1, 1);
        f.add_term(-1, &s(5.0)).unwrap();
        f.add_term(0, &s(1.0)).unwrap();
        let row = f.to_stacked_row(&s(2.0), -1, 2).unwrap();
        assert_eq!(row.dense(), DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0]));
        assert_eq!(ControlLinForm::new(1, 1).to_stacked_row(&s(2.0), -1, 0).unwrap().width(), 1);
    }

    #[test]
    fn quad_split_reassembles() {
        let mut q = QuadForm::new(1);
        q.add_block(2, 2, &s(3.0)).unwrap();
        q.add_block(2, 0, &s(1.0)).unwrap();
        q.add_block(0, 2, &s(0.5)).unwrap();
        q.add_block(1, 0, &s(4.0)).unwrap();
        let h = hist(&[1.5, -2.0, 0.7]);
        let (d, c, rest) = q.split_newest(2).unwrap();
        let v = 0.7;
        let total = v * d[(0, 0)] * v + 2.0 * v * c.eval(&h).unwrap()[0] + rest.eval(&h).unwrap();
        assert!((total - q.eval(&h).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn gram_matches_direct_product() {
        let mut f = ControlLinForm::new(2, 1);
        f.add_term(0, &DMatrix::from_row_slice(2, 1, &[1.0, 2.0])).unwrap();
        f.add_term(3, &DMatrix::from_row_slice(2, 1, &[-1.0, 0.5])).unwrap();
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let mut q = QuadForm::new(1);
        q.add_gram(1.5, &f, &w).unwrap();
        let h = hist(&[0.4, 9.0, 9.0, -1.3]);
        let e = f.eval(&h).unwrap();
        let want = 1.5 * e.dot(&(&w * &e));
        assert!((q.eval(&h).unwrap() - want).abs() < 1e-13);
    }
}
