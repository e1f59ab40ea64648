//! Backward recursion over stage offsets `k = 0..=N` (stage time `t = N - k`).
//!
//! Each stage carries, for every acknowledgment timestamp `τ`, the forms produced
//! by the previous stage (`K_η`, `K_θ`, `K_uu`, `K_r`) and folds them into the
//! expectation over the next acknowledgment state. The coefficient of the newest
//! control in those forms is τ-independent, which yields the C (`τ` older than the
//! control) and RL (`τ` equal to the control) sub-function tables.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::{A11Flag, GainSchedule, StageGains};
use crate::delay::DelayPmf;
use crate::error::{Error, Result};
use crate::linalg::{max_abs, powers, sym, sym_inverse, SymInverse};
use crate::linform::{ControlLinForm, QuadForm, StackedGainRow, Stamp};
use crate::model::SystemModel;

/// Eigenvalue threshold, relative to the stage scale, below which `A11` is singular.
const A11_RTOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LinFamily {
    Zeta,
    Eta,
    /// Stored as `m×n` so that the term reads `vᵀ K x`.
    Theta,
    /// Stored as `m×n` so that the term reads `vᵀ K x`.
    Ux,
    Gu,
    Beta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum QuadFamily {
    Alpha,
    R,
    Uu,
}

/// Coefficient of `v_{N-k-b}` in a linear family at stage `k`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinTables {
    /// `τ < N-k-b`, keyed `(k, b)`.
    pub c: BTreeMap<(usize, usize), DMatrix<f64>>,
    /// `τ = N-k-b`, keyed `(k, b)`.
    pub rl: BTreeMap<(usize, usize), DMatrix<f64>>,
}

/// Blocks of a quadratic family at stage `k`. Diagonal blocks are symmetrized;
/// cross blocks are the raw `v_{N-k-h}ᵀ X v_{N-k-b}` coefficient with `h < b`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuadTables {
    pub cs: BTreeMap<(usize, usize), DMatrix<f64>>,
    pub rl: BTreeMap<(usize, usize), DMatrix<f64>>,
    pub cd_c: BTreeMap<(usize, usize, usize), DMatrix<f64>>,
    pub cd_rl: BTreeMap<(usize, usize, usize), DMatrix<f64>>,
}

/// Everything the recursion computes that does not depend on `τ`, plus the
/// sub-function tables when requested.
#[derive(Clone, Debug)]
pub struct StageCache {
    pub horizon: usize,
    /// `S_t` by time `t = 0..=N+1`.
    pub s: Vec<Option<DMatrix<f64>>>,
    /// `M(t)` by time.
    pub m: Vec<Option<DMatrix<f64>>>,
    /// `T_c(k, b)`.
    pub tc: BTreeMap<(usize, usize), DMatrix<f64>>,
    /// `K_e(k)`, `K_gg(k)`, `K_gx(k, 1)`, symmetrized `A11(N-k)`, indexed by `k`.
    pub ke: Vec<DMatrix<f64>>,
    pub kgg: Vec<DMatrix<f64>>,
    pub kgx: Vec<DMatrix<f64>>,
    pub a11: Vec<DMatrix<f64>>,
    pub linear: BTreeMap<LinFamily, LinTables>,
    pub quad: BTreeMap<QuadFamily, QuadTables>,
    /// Largest disagreement seen between entries that must not depend on `τ`.
    pub tau_independence: f64,
    next_k: usize,
}

impl StageCache {
    fn new(horizon: usize) -> Self {
        StageCache {
            horizon,
            s: vec![None; horizon + 2],
            m: vec![None; horizon + 1],
            tc: BTreeMap::new(),
            ke: Vec::new(),
            kgg: Vec::new(),
            kgx: Vec::new(),
            a11: Vec::new(),
            linear: BTreeMap::new(),
            quad: BTreeMap::new(),
            tau_independence: 0.0,
            next_k: 0,
        }
    }

    /// Number of completed stages.
    pub fn stages_done(&self) -> usize {
        self.next_k
    }

    fn sequencing(what: &str) -> Error {
        Error::Domain(format!("sequencing error: {what} not computed yet"))
    }

    pub fn s_at(&self, t: usize) -> Result<&DMatrix<f64>> {
        self.s.get(t).and_then(|s| s.as_ref()).ok_or_else(|| Self::sequencing(&format!("S_{t}")))
    }

    /// `M(N-k)`.
    pub fn m_matrix(&self, k: usize) -> Result<&DMatrix<f64>> {
        let t = self.horizon.checked_sub(k).ok_or_else(|| Error::Domain(format!("k = {k} beyond horizon")))?;
        self.m[t].as_ref().ok_or_else(|| Self::sequencing(&format!("M({t})")))
    }

    /// `T_c(k, b)`.
    pub fn tc(&self, k: usize, b: usize) -> Result<&DMatrix<f64>> {
        if b == 0 || k + b > self.horizon + 1 {
            return Err(Error::Domain(format!("T_c({k}, {b}) requires b >= 1 and k + b <= N + 1")));
        }
        self.tc.get(&(k, b)).ok_or_else(|| Self::sequencing(&format!("T_c({k}, {b})")))
    }

    /// `K_ζ(k, τ, b)` assembled from its C and RL tables.
    pub fn k_zeta(&self, k: usize, tau: Stamp, b: usize) -> Result<ControlLinForm> {
        if k > self.horizon || b == 0 {
            return Err(Error::Domain(format!("K_ζ({k}, ·, {b}) out of range")));
        }
        let t = (self.horizon - k) as Stamp;
        if tau < -1 || tau > t - b as Stamp {
            return Err(Error::Domain(format!("τ = {tau} > N-k-b = {}", t - b as Stamp)));
        }
        let tables = self.linear.get(&LinFamily::Zeta).ok_or_else(|| Self::sequencing("K_ζ tables"))?;
        let rl = tables.rl.get(&(k, (t - tau) as usize)).ok_or_else(|| Self::sequencing("K_ζRL"))?;
        let mut f = ControlLinForm::with_span(rl.nrows(), rl.ncols(), tau, t - b as Stamp);
        f.add_term(tau, rl)?;
        for s in (tau + 1)..=(t - b as Stamp) {
            let c = tables.c.get(&(k, (t - s) as usize)).ok_or_else(|| Self::sequencing("K_ζC"))?;
            f.add_term(s, c)?;
        }
        Ok(f)
    }
}

/// `R_i = P_d(N - i) R`.
pub fn r_weight(model: &SystemModel, pmf: &DelayPmf, i: usize) -> Result<DMatrix<f64>> {
    if i > model.horizon {
        return Err(Error::Domain(format!("R_{i} requires i <= N")));
    }
    Ok(&model.r * pmf.age_cdf((model.horizon - i) as i64))
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Probability quantities at the arguments the recursion needs.
struct Probs {
    p: Vec<f64>,
    tail: Vec<f64>,
    age_pmf: Vec<f64>,
    /// `P̄_d(i)` at index `i + 1`.
    age_tail: Vec<f64>,
    /// `ρ_b(c)` at `[b][c]`: conditional weight of `v_{N-k-b}` given that `τ` is older.
    rho: Vec<Vec<f64>>,
    /// `π_g(c)` at `[g][c]`: weight of `v_τ` when `τ = N-k-g-1`.
    pi: Vec<Vec<f64>>,
}

impl Probs {
    fn new(pmf: &DelayPmf, horizon: usize) -> Self {
        let len = 2 * horizon + 4;
        let p: Vec<f64> = (0..len).map(|d| pmf.p(d as i64)).collect();
        let tail: Vec<f64> = (0..len).map(|i| pmf.tail(i as i64)).collect();
        let age_pmf: Vec<f64> = (0..=horizon + 1).map(|i| pmf.age_pmf(i as i64)).collect();
        let age_tail: Vec<f64> = (-1..=horizon as i64 + 1).map(|i| pmf.age_tail(i)).collect();
        let tail_at = |i: i64| if i < 0 { 1.0 } else { tail[i as usize] };
        let window = |lo: usize, hi: usize| -> f64 { p[lo..=hi].iter().sum() };
        let cmax = horizon + 1;
        let mut rho = vec![vec![0.0; cmax + 1]; cmax + 1];
        let mut pi = vec![vec![0.0; cmax + 1]; cmax + 1];
        for c in 1..=cmax {
            let mut prod = 1.0;
            for b in 1..=cmax {
                if b >= 2 {
                    prod *= ratio(tail_at((c + b) as i64 - 2), tail_at(b as i64 - 2));
                }
                rho[b][c] = ratio(window(b, c - 1 + b), tail_at(b as i64 - 1)) * prod;
            }
            let mut prod = 1.0;
            pi[0][c] = 1.0;
            for g in 1..=cmax {
                prod *= ratio(tail_at((c + g) as i64 - 1), tail_at(g as i64 - 1));
                pi[g][c] = prod;
            }
        }
        Probs { p, tail, age_pmf, age_tail, rho, pi }
    }

    fn p(&self, d: i64) -> f64 {
        if d < 0 {
            0.0
        } else {
            self.p[d as usize]
        }
    }

    fn tail(&self, i: i64) -> f64 {
        if i < 0 {
            1.0
        } else {
            self.tail[i as usize]
        }
    }

    fn age_tail(&self, i: i64) -> f64 {
        self.age_tail[(i + 1) as usize]
    }

    /// `P(hi) - P(lo - 1)`.
    fn window(&self, lo: usize, hi: usize) -> f64 {
        if hi < lo {
            0.0
        } else {
            self.p[lo..=hi].iter().sum()
        }
    }

    /// `P(i)`.
    fn cdf(&self, i: i64) -> f64 {
        if i < 0 {
            0.0
        } else {
            self.window(0, i as usize)
        }
    }
}

/// Forms left behind by a stage, indexed by `τ + 1`.
struct Carried {
    ainv: DMatrix<f64>,
    eta: Vec<ControlLinForm>,
    theta: Vec<ControlLinForm>,
    uu: Vec<QuadForm>,
    r: Vec<QuadForm>,
}

/// Per-`τ'` contributions of the previous stage with the newest control removed.
struct Part {
    gu: ControlLinForm,
    beta: ControlLinForm,
    alpha: QuadForm,
    uu: QuadForm,
    r: QuadForm,
    ux: ControlLinForm,
}

impl Part {
    fn zero(n: usize, m: usize) -> Part {
        Part {
            gu: ControlLinForm::new(m, m),
            beta: ControlLinForm::new(m, m),
            alpha: QuadForm::new(m),
            uu: QuadForm::new(m),
            r: QuadForm::new(m),
            ux: ControlLinForm::new(n, m),
        }
    }

    fn add_scaled(&mut self, s: f64, o: &Part) -> Result<()> {
        if s == 0.0 {
            return Ok(());
        }
        self.gu.add_scaled(s, &o.gu)?;
        self.beta.add_scaled(s, &o.beta)?;
        self.alpha.add_scaled(s, &o.alpha)?;
        self.uu.add_scaled(s, &o.uu)?;
        self.r.add_scaled(s, &o.r)?;
        self.ux.add_scaled(s, &o.ux)?;
        Ok(())
    }

    fn clone_scaled_sum(&self, s: f64, o: &Part) -> Result<Part> {
        let mut out = Part {
            gu: self.gu.clone(),
            beta: self.beta.clone(),
            alpha: self.alpha.clone(),
            uu: self.uu.clone(),
            r: self.r.clone(),
            ux: self.ux.clone(),
        };
        out.add_scaled(s, o)?;
        Ok(out)
    }
}

pub struct Synthesizer<'a> {
    model: &'a SystemModel,
    probs: Probs,
    keep_tables: bool,
    cache: StageCache,
    apow: Vec<DMatrix<f64>>,
    /// `Bᵀ S_{i+1} A^p B` at `[i][p]`, filled as `S_{i+1}` becomes available.
    bsab: Vec<Vec<DMatrix<f64>>>,
    /// `Bᵀ S_{i+1} A^p` at `[i][p]`.
    bsa: Vec<Vec<DMatrix<f64>>>,
    carried: Carried,
    stages: Vec<StageGains>,
}

impl<'a> Synthesizer<'a> {
    pub fn new(model: &'a SystemModel, pmf: &DelayPmf, keep_tables: bool) -> Result<Self> {
        model.validate()?;
        let (n, m, big_n) = (model.n(), model.m(), model.horizon);
        let mut cache = StageCache::new(big_n);
        cache.s[big_n + 1] = Some(sym(&model.s_terminal));
        let empty_lin = |rows| vec![ControlLinForm::new(rows, m); big_n + 2];
        Ok(Synthesizer {
            model,
            probs: Probs::new(pmf, big_n),
            keep_tables,
            cache,
            apow: powers(&model.a, big_n + 2),
            bsab: vec![Vec::new(); big_n + 1],
            bsa: vec![Vec::new(); big_n + 1],
            carried: Carried {
                ainv: DMatrix::zeros(m, m),
                eta: empty_lin(m),
                theta: empty_lin(n),
                uu: vec![QuadForm::new(m); big_n + 2],
                r: vec![QuadForm::new(m); big_n + 2],
            },
            stages: Vec::with_capacity(big_n + 1),
        })
    }

    pub fn cache(&self) -> &StageCache {
        &self.cache
    }

    /// Products with `S_{i+1}` for the newly available `i`.
    fn load_products(&mut self, i: usize) -> Result<()> {
        let s = self.cache.s_at(i + 1)?.clone();
        let bt = self.model.b.transpose();
        let bts = &bt * &s;
        let kmax = self.model.horizon + 1;
        self.bsa[i] = (0..=kmax).map(|p| &bts * &self.apow[p]).collect();
        self.bsab[i] = self.bsa[i].iter().map(|x| x * &self.model.b).collect();
        Ok(())
    }

    /// Runs stage `k = stages_done()`.
    pub fn step(&mut self) -> Result<()> {
        let k = self.cache.next_k;
        let big_n = self.model.horizon;
        if k > big_n {
            return Err(Error::Domain("sequencing error: all stages already computed".into()));
        }
        let (n, m) = (self.model.n(), self.model.m());
        let t = big_n - k;
        let nt = t as Stamp;
        let (a, b) = (&self.model.a, &self.model.b);
        self.load_products(t)?;
        let pr = &self.probs;

        // T_c(k, b) for every admissible b.
        let btsb = &self.bsab[t][0];
        for bb in 1..=(big_n + 1 - k) {
            let base = if k == 0 {
                &self.model.r * pr.age_cdf_at(big_n + 1 - bb, big_n)
            } else {
                self.cache.tc[&(k - 1, bb + 1)].clone()
            };
            self.cache.tc.insert((k, bb), sym(&(base + btsb * pr.age_pmf[bb - 1])));
        }

        // M(N-k).
        let mut mm = DMatrix::zeros(m, n);
        for i in t..=big_n {
            mm += &self.bsa[i][i - t + 1] * pr.age_pmf[i - t];
        }
        self.cache.m[t] = Some(mm.clone());

        // K_e(k) and the per-offset sums V_c feeding K_ζ.
        let mut ke = DMatrix::zeros(m, m);
        let mut vc = vec![DMatrix::zeros(m, m); k + 1];
        for ip in 0..k {
            let w_i = &self.bsab[t + 1 + ip];
            let pdt = pr.age_tail(ip as Stamp);
            if pdt == 0.0 {
                continue;
            }
            for c in 1..=ip + 1 {
                let w = &w_i[ip + 2 - c];
                ke += w * (pdt * pr.cdf(c as Stamp - 1));
                vc[c] += w * (pdt * pr.window(c, ip + 1));
            }
        }
        let mut zeta = LinTables::default();
        for bb in 1..=(t + 1) {
            let mut rl = DMatrix::zeros(m, m);
            let mut cc = DMatrix::zeros(m, m);
            for c in 1..=k {
                rl += &vc[c] * pr.pi[bb - 1][c];
                cc += &vc[c] * pr.rho[bb][c];
            }
            zeta.rl.insert((k, bb), rl);
            if bb <= t {
                zeta.c.insert((k, bb), cc);
            }
        }

        // Newest-control parts of the carried forms: RL from τ' = t, C from τ' < t.
        let ainv_prev = self.carried.ainv.clone();
        let rl_idx = (nt + 1) as usize;
        let rl_eta = self.carried.eta[rl_idx].split_newest(nt).0;
        let rl_theta = self.carried.theta[rl_idx].split_newest(nt).0;
        let rl_uu = self.carried.uu[rl_idx].split_newest(nt)?.0;
        let rl_r = self.carried.r[rl_idx].split_newest(nt)?.0;

        struct Split {
            eta_rest: ControlLinForm,
            theta_rest: ControlLinForm,
            cd_uu: ControlLinForm,
            uu_rest: QuadForm,
            cd_r: ControlLinForm,
            r_rest: QuadForm,
        }
        let mut c_parts: Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = None;
        let mut splits = Vec::with_capacity(t + 1);
        let mut drift: f64 = 0.0;
        for tp in -1..nt {
            let idx = (tp + 1) as usize;
            let (ce, eta_rest) = self.carried.eta[idx].split_newest(nt);
            let (ct, theta_rest) = self.carried.theta[idx].split_newest(nt);
            let (cu, cd_uu, uu_rest) = self.carried.uu[idx].split_newest(nt)?;
            let (cr, cd_r, r_rest) = self.carried.r[idx].split_newest(nt)?;
            match &c_parts {
                None => c_parts = Some((ce, ct, cu, cr)),
                Some((e0, t0, u0, r0)) => {
                    drift = drift
                        .max(max_abs(&(e0 - ce)))
                        .max(max_abs(&(t0 - ct)))
                        .max(max_abs(&(u0 - cu)))
                        .max(max_abs(&(r0 - cr)));
                }
            }
            splits.push(Split { eta_rest, theta_rest, cd_uu, uu_rest, cd_r, r_rest });
        }
        self.cache.tau_independence = self.cache.tau_independence.max(drift);
        let (c_eta, c_theta, c_uu, c_r) = c_parts.expect("τ' = t-1 always exists");

        let p0 = pr.p(0);
        let pb0 = pr.tail(0);
        let kgg = sym(
            &((rl_eta.transpose() * &ainv_prev * &rl_eta + &rl_uu * 2.0 + &rl_r) * p0
                + (c_eta.transpose() * &ainv_prev * &c_eta + &c_uu * 2.0 + &c_r) * pb0),
        );
        let theta_rl = rl_theta.transpose();
        let theta_c = c_theta.transpose();
        let kgx = (&theta_c * pb0 + &theta_rl * p0) * a;
        let tc1 = self.cache.tc[&(k, 1)].clone();
        let a11_raw = &tc1 + &ke + ke.transpose() - &kgg - (&theta_rl * b + b.transpose() * theta_rl.transpose()) * p0;
        let a11 = sym(&a11_raw);
        if a11.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("A11 at t = {t} overflowed; rescale the model")));
        }
        let scale = max_abs(&tc1).max(max_abs(&kgg)).max(max_abs(&ke)).max(max_abs(&self.model.r));
        let (ainv, flag) = match sym_inverse(&a11, scale, A11_RTOL) {
            SymInverse::Definite(x) => (x, A11Flag::Pd),
            SymInverse::Pseudo(x) => (x, A11Flag::PsdPseudoInverse),
            SymInverse::Indefinite(min_eig) => return Err(Error::Indefinite { stage: t, min_eig }),
        };
        let g = &mm - &kgx;
        let s_t = sym(&(a.transpose() * self.cache.s_at(t + 1)? * a + &self.model.q - g.transpose() * &ainv * &g));
        self.cache.s[t] = Some(s_t);

        // Expectation over the next acknowledgment state, accumulated from the
        // newest τ downwards: weight p(t - τ') for τ' > τ and P̄(t - 1 - τ) for τ' = τ.
        let ct_b = &theta_c * b;
        let ce_t_ainv = c_eta.transpose() * &ainv_prev;
        let at = a.transpose();
        let make_part = |tp: Stamp, sp: &Split| -> Result<Part> {
            let mut gu = ControlLinForm::new(m, m);
            gu.add_term(tp, &ct_b)?;
            gu.add_scaled(2.0, &sp.cd_uu)?;
            gu.add_scaled(1.0, &sp.cd_r)?;
            let beta = sp.eta_rest.left_mul(&ce_t_ainv)?;
            let mut alpha = QuadForm::new(m);
            alpha.add_gram(1.0, &sp.eta_rest, &ainv_prev)?;
            let mut uu = sp.uu_rest.clone();
            uu.add_bilinear(1.0, &sp.theta_rest, b, tp)?;
            let ux = sp.theta_rest.left_mul(&at)?;
            Ok(Part { gu, beta, alpha, uu, r: sp.r_rest.clone(), ux })
        };

        let gt_ainv = g.transpose() * &ainv;
        let neg_ainv = -&ainv;
        let state_gain = &neg_ainv * &g;
        let mut acc = Part::zero(n, m);
        let mut newer: Option<Part> = None;
        let mut rows = vec![None; t + 1];
        let mut next = Carried {
            ainv: ainv.clone(),
            eta: vec![ControlLinForm::new(m, m); t + 1],
            theta: vec![ControlLinForm::new(n, m); t + 1],
            uu: vec![QuadForm::new(m); t + 1],
            r: vec![QuadForm::new(m); t + 1],
        };
        let mut per_tau: Vec<(Stamp, Part, ControlLinForm)> = Vec::new();
        for tau in (-1..nt).rev() {
            if let Some(prev) = newer.take() {
                acc.add_scaled(pr.p(nt - (tau + 1)), &prev)?;
            }
            let own = make_part(tau, &splits[(tau + 1) as usize])?;
            let cur = acc.clone_scaled_sum(pr.tail(nt - 1 - tau), &own)?;
            newer = Some(own);

            let mut zeta_form = ControlLinForm::with_span(m, m, tau, nt - 1);
            zeta_form.add_term(tau, &zeta.rl[&(k, (nt - tau) as usize)])?;
            for s in (tau + 1)..nt {
                zeta_form.add_term(s, &zeta.c[&(k, (nt - s) as usize)])?;
            }
            let mut gu = cur.gu.clone();
            gu.add_scaled(1.0, &cur.beta)?;
            let mut eta = zeta_form;
            eta.add_scaled(-1.0, &gu)?;
            let mut theta = eta.left_mul(&gt_ainv)?;
            theta.add_scaled(1.0, &cur.ux)?;
            let mut r = cur.r.clone();
            r.add_scaled(1.0, &cur.alpha)?;

            let row = eta.left_mul(&neg_ainv)?.to_stacked_row(&state_gain, tau, nt)?;
            rows[(tau + 1) as usize] = Some(row);
            let idx = (tau + 1) as usize;
            next.eta[idx] = eta.clone();
            next.theta[idx] = theta;
            next.uu[idx] = cur.uu.clone();
            next.r[idx] = r;
            if self.keep_tables {
                per_tau.push((tau, cur, gu));
            }
        }

        if self.keep_tables {
            self.cache.linear.entry(LinFamily::Zeta).or_default().merge(zeta);
            let mut lin: BTreeMap<LinFamily, LinTables> = BTreeMap::new();
            let mut quad: BTreeMap<QuadFamily, QuadTables> = BTreeMap::new();
            let mut drift: f64 = 0.0;
            for (tau, cur, gu) in &per_tau {
                let idx = (tau + 1) as usize;
                let trans = |f: &ControlLinForm| -> ControlLinForm {
                    let mut o = ControlLinForm::new(f.m(), f.rows());
                    for (j, c) in f.terms() {
                        o.add_term(j, &c.transpose()).expect("shape");
                    }
                    o
                };
                let entries = [
                    (LinFamily::Eta, next.eta[idx].clone()),
                    (LinFamily::Theta, trans(&next.theta[idx])),
                    (LinFamily::Ux, trans(&cur.ux)),
                    (LinFamily::Gu, gu.clone()),
                    (LinFamily::Beta, cur.beta.clone()),
                ];
                for (fam, f) in entries.iter() {
                    drift = drift.max(lin.entry(*fam).or_default().record(k, nt, *tau, f));
                }
                let mut r = cur.r.clone();
                r.add_scaled(1.0, &cur.alpha)?;
                for (fam, q) in [(QuadFamily::Alpha, &cur.alpha), (QuadFamily::R, &r), (QuadFamily::Uu, &cur.uu)] {
                    drift = drift.max(quad.entry(fam).or_default().record(k, nt, *tau, q));
                }
            }
            self.cache.tau_independence = self.cache.tau_independence.max(drift);
            for (fam, tab) in lin {
                self.cache.linear.entry(fam).or_default().merge(tab);
            }
            for (fam, tab) in quad {
                self.cache.quad.entry(fam).or_default().merge(tab);
            }
        } else {
            self.cache.linear.entry(LinFamily::Zeta).or_default().merge(zeta);
        }

        self.cache.ke.push(ke);
        self.cache.kgg.push(kgg);
        self.cache.kgx.push(kgx);
        self.cache.a11.push(a11.clone());
        self.carried = next;
        self.stages.push(StageGains {
            t,
            a11,
            a11_inv: ainv,
            flag,
            gains: rows.into_iter().map(|r: Option<StackedGainRow>| r.expect("every τ assembled")).collect(),
        });
        self.cache.next_k += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(GainSchedule, StageCache)> {
        while self.cache.next_k <= self.model.horizon {
            self.step()?;
        }
        self.stages.reverse();
        let schedule = GainSchedule { n: self.model.n(), m: self.model.m(), horizon: self.model.horizon, stages: self.stages };
        Ok((schedule, self.cache))
    }
}

impl Probs {
    /// `P_d(N - i)` for stage index `i`.
    fn age_cdf_at(&self, i: usize, horizon: usize) -> f64 {
        self.age_pmf[..=(horizon - i)].iter().sum()
    }
}

fn record_entry<K: Ord + Copy>(map: &mut BTreeMap<K, DMatrix<f64>>, key: K, val: &DMatrix<f64>) -> f64 {
    match map.get(&key) {
        Some(old) => max_abs(&(old - val)),
        None => {
            map.insert(key, val.clone());
            0.0
        }
    }
}

impl LinTables {
    fn record(&mut self, k: usize, t: Stamp, tau: Stamp, f: &ControlLinForm) -> f64 {
        let mut drift: f64 = 0.0;
        for (s, c) in f.terms() {
            let b = (t - s) as usize;
            let map = if s > tau { &mut self.c } else { &mut self.rl };
            drift = drift.max(record_entry(map, (k, b), c));
        }
        drift
    }

    fn merge(&mut self, o: LinTables) {
        self.c.extend(o.c);
        self.rl.extend(o.rl);
    }
}

impl QuadTables {
    fn record(&mut self, k: usize, t: Stamp, tau: Stamp, q: &QuadForm) -> f64 {
        let mut drift: f64 = 0.0;
        for ((i, j), blk) in q.blocks() {
            let b = (t - j) as usize;
            if i == j {
                let map = if j > tau { &mut self.cs } else { &mut self.rl };
                drift = drift.max(record_entry(map, (k, b), &sym(blk)));
            } else {
                let h = (t - i) as usize;
                let map = if j > tau { &mut self.cd_c } else { &mut self.cd_rl };
                drift = drift.max(record_entry(map, (k, b, h), blk));
            }
        }
        drift
    }

    fn merge(&mut self, o: QuadTables) {
        self.cs.extend(o.cs);
        self.rl.extend(o.rl);
        self.cd_c.extend(o.cd_c);
        self.cd_rl.extend(o.cd_rl);
    }
}
