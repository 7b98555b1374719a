//! Pre-resonance expansion of the driven field.
//!
//! Away from the resonance curve the driven solution is a two-timing series
//!
//! ```text
//!   u ~ sum_{n>=2} eps^n sum_{k in Omega_n} U^n_k(t2, x2, x1) e^{i k S / eps^2}
//! ```
//!
//! whose coefficients obey an algebraic recurrence: each harmonic balance
//! divides by the harmonic symbol `mu_k = k^2 l + k^2 - 1` (which reduces to
//! the resonance function `l` for `k = +-1`), and higher orders consume slow
//! derivatives of lower ones plus a cubic convolution from the nonlinearity.
//!
//! The leading order is `U^2_1 = -f / l`; the amplitude blows up like
//! `l^{-(n-k)}` as the resonance `l -> 0^-` is approached, which is the
//! scaling law verified by [`singularity_exponent`].
//!
//! Implementation notes:
//!
//! * Slow `(t2, x2)`-derivatives are exact, not discretized: every
//!   coefficient is carried as a truncated bivariate Taylor jet around the
//!   evaluation point, so differentiation is a shift on jet coefficients.
//! * Fast-space dependence enters only through `f(x1)` and its derivatives.
//!   Coefficients are stored as sums of terms `c(t2,x2) * prod_j f^(d_j)(x1)`
//!   with the multiset of derivative orders kept symbolic, so `d/dx1` is an
//!   exact product rule and any real force profile can be substituted at
//!   evaluation time.
//! * The recurrence is memoized per `(n, k)`; negative harmonics are complex
//!   conjugates of positive ones (real force required).

use std::collections::HashMap;

use num_complex::Complex64;

use crate::force::ForceProfile;
use crate::phase::{PhaseSpec, SlowPoint};
use crate::{Error, Result};

/// Guard on the harmonic-symbol magnitude: evaluation closer to a resonance
/// (of the fundamental or of a higher harmonic) than this is refused, since
/// the Laurent blow-up dominates rounding below it.
pub const L_MIN: f64 = 1e-3;

/// Default validity margin for field assembly: the expansion is trusted only
/// where `-l > margin * eps`.
pub const DEFAULT_MARGIN: f64 = 5.0;

/// Highest supported truncation order.
pub const MAX_ORDER: usize = 8;

// ---------------------------------------------------------------------------
// Harmonic sets
// ---------------------------------------------------------------------------

/// The set of harmonics `Omega_n` present at expansion order `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarmonicSet {
    pub n: usize,
    /// Sorted, symmetric list of odd harmonics.
    pub harmonics: Vec<i64>,
}

impl HarmonicSet {
    pub fn contains(&self, k: i64) -> bool {
        self.harmonics.contains(&k)
    }

    /// Positive members only (the field is assembled from `k > 0` pairs).
    pub fn positive(&self) -> impl Iterator<Item = i64> + '_ {
        self.harmonics.iter().copied().filter(|&k| k > 0)
    }
}

/// Harmonics present at order `n`: only the fundamental through order 5,
/// then a ladder of odd harmonics growing by one rung every four orders
/// (the first cubic interactions `2+2+2 -> 6` create the third harmonic).
pub fn omega_set(n: usize) -> Result<HarmonicSet> {
    if n < 2 {
        return Err(Error::Validation(format!(
            "expansion orders start at 2; requested n = {n}"
        )));
    }
    let k_max = if n <= 5 {
        1
    } else {
        let rung = (n - 6) / 4;
        2 * rung as i64 + 3
    };
    let mut harmonics = Vec::new();
    let mut k = -k_max;
    while k <= k_max {
        harmonics.push(k);
        k += 2;
    }
    Ok(HarmonicSet { n, harmonics })
}

// ---------------------------------------------------------------------------
// Bivariate jets (truncated Taylor expansions in (t2, x2) around a point)
// ---------------------------------------------------------------------------

fn jet_len(deg: usize) -> usize {
    (deg + 1) * (deg + 2) / 2
}

/// Index of the coefficient of `dt^i dx^j / (i! j!)` in the flat layout.
fn jet_idx(deg: usize, i: usize, j: usize) -> usize {
    debug_assert!(i + j <= deg);
    i * (deg + 1) - i * (i.saturating_sub(1)) / 2 + j
}

/// Truncated bivariate Taylor series: `a[idx(i,j)]` holds the coefficient of
/// `(t2 - t2_0)^i (x2 - x2_0)^j` (factorials absorbed). Arithmetic on jets is
/// exact through total degree `deg`, so derivatives of recurrence
/// coefficients carry no discretization error.
#[derive(Debug, Clone)]
struct Jet {
    deg: usize,
    a: Vec<Complex64>,
}

impl Jet {
    fn zero(deg: usize) -> Self {
        Jet {
            deg,
            a: vec![Complex64::new(0.0, 0.0); jet_len(deg)],
        }
    }

    fn constant(deg: usize, value: Complex64) -> Self {
        let mut j = Jet::zero(deg);
        j.a[0] = value;
        j
    }

    fn value(&self) -> Complex64 {
        self.a[0]
    }

    fn is_zero(&self) -> bool {
        self.a.iter().all(|c| c.re == 0.0 && c.im == 0.0)
    }

    fn get(&self, i: usize, j: usize) -> Complex64 {
        self.a[jet_idx(self.deg, i, j)]
    }

    fn truncate(&self, deg: usize) -> Jet {
        if deg >= self.deg {
            return self.clone();
        }
        let mut out = Jet::zero(deg);
        for i in 0..=deg {
            for j in 0..=(deg - i) {
                out.a[jet_idx(deg, i, j)] = self.get(i, j);
            }
        }
        out
    }

    fn add(&self, other: &Jet) -> Jet {
        let deg = self.deg.min(other.deg);
        let mut out = Jet::zero(deg);
        for i in 0..=deg {
            for j in 0..=(deg - i) {
                out.a[jet_idx(deg, i, j)] = self.get(i, j) + other.get(i, j);
            }
        }
        out
    }

    fn scale(&self, c: Complex64) -> Jet {
        let mut out = self.clone();
        for a in &mut out.a {
            *a *= c;
        }
        out
    }

    fn mul(&self, other: &Jet) -> Jet {
        let deg = self.deg.min(other.deg);
        let mut out = Jet::zero(deg);
        for i1 in 0..=self.deg.min(deg) {
            for j1 in 0..=(self.deg.min(deg) - i1) {
                let a = self.get(i1, j1);
                if a.re == 0.0 && a.im == 0.0 {
                    continue;
                }
                for i2 in 0..=(deg - i1).min(other.deg) {
                    for j2 in 0..=((deg - i1).min(other.deg) - i2) {
                        if i1 + j1 + i2 + j2 > deg {
                            continue;
                        }
                        let b = other.get(i2, j2);
                        if b.re == 0.0 && b.im == 0.0 {
                            continue;
                        }
                        out.a[jet_idx(deg, i1 + i2, j1 + j2)] += a * b;
                    }
                }
            }
        }
        out
    }

    /// Multiplicative inverse as a power series; requires a nonzero value at
    /// the expansion point.
    fn recip(&self) -> Jet {
        let deg = self.deg;
        let mut out = Jet::zero(deg);
        let b0 = Complex64::new(1.0, 0.0) / self.a[0];
        out.a[0] = b0;
        for d in 1..=deg {
            for i in 0..=d {
                let j = d - i;
                // sum over (p,q) != (0,0) of a_{pq} b_{(i-p)(j-q)}
                let mut s = Complex64::new(0.0, 0.0);
                for p in 0..=i {
                    for q in 0..=j {
                        if p == 0 && q == 0 {
                            continue;
                        }
                        s += self.get(p, q) * out.get(i - p, j - q);
                    }
                }
                out.a[jet_idx(deg, i, j)] = -b0 * s;
            }
        }
        out
    }

    /// Derivative with respect to the first (t2) variable; loses one degree
    /// of guaranteed accuracy.
    fn deriv_t(&self) -> Jet {
        assert!(self.deg >= 1, "jet too shallow to differentiate");
        let deg = self.deg - 1;
        let mut out = Jet::zero(deg);
        for i in 0..=deg {
            for j in 0..=(deg - i) {
                out.a[jet_idx(deg, i, j)] = (i as f64 + 1.0) * self.get(i + 1, j);
            }
        }
        out
    }

    fn deriv_x(&self) -> Jet {
        assert!(self.deg >= 1, "jet too shallow to differentiate");
        let deg = self.deg - 1;
        let mut out = Jet::zero(deg);
        for i in 0..=deg {
            for j in 0..=(deg - i) {
                out.a[jet_idx(deg, i, j)] = (j as f64 + 1.0) * self.get(i, j + 1);
            }
        }
        out
    }

    fn conj(&self) -> Jet {
        let mut out = self.clone();
        for a in &mut out.a {
            *a = a.conj();
        }
        out
    }
}

/// Taylor jet of the phase `S` around `p`, to total degree `deg`.
///
/// Coefficients through degree 3 come from the phase's analytic derivative
/// methods. Both built-in phases are quadratic polynomials in `(t2, x2)`, so
/// their higher coefficients are exactly zero; a custom phase only supplies
/// derivatives through order 3, so deeper jets are refused for it.
fn phase_jet(phase: &PhaseSpec, p: SlowPoint, deg: usize) -> Result<Jet> {
    if deg > 3 {
        if let PhaseSpec::Custom { src, .. } = phase {
            return Err(Error::Validation(format!(
                "custom phase '{src}' supplies derivatives only through order 3; \
                 the requested truncation order needs phase jets of degree {deg} \
                 (use a built-in phase or lower the truncation order)"
            )));
        }
    }
    let (t2, x2) = (p.t2, p.x2);
    let mut jet = Jet::zero(deg);
    let mut set = |i: usize, j: usize, v: f64| {
        if i + j <= deg {
            jet.a[jet_idx(deg, i, j)] = Complex64::new(v, 0.0);
        }
    };
    set(0, 0, phase.s(t2, x2));
    set(1, 0, phase.s_t(t2, x2));
    set(0, 1, phase.s_x(t2, x2));
    set(2, 0, phase.s_tt(t2, x2) / 2.0);
    set(1, 1, phase.s_tx(t2, x2));
    set(0, 2, phase.s_xx(t2, x2) / 2.0);
    set(3, 0, phase.s_ttt(t2, x2) / 6.0);
    set(2, 1, phase.s_ttx(t2, x2) / 2.0);
    set(1, 2, phase.s_txx(t2, x2) / 2.0);
    set(0, 3, phase.s_xxx(t2, x2) / 6.0);
    Ok(jet)
}

// ---------------------------------------------------------------------------
// Term lists: coefficients as sums of c(t2,x2) * prod f^(d)(x1)
// ---------------------------------------------------------------------------

/// One term `coeff(t2, x2) * prod_{d in fder} f^(d)(x1)`.
#[derive(Debug, Clone)]
struct Term {
    /// Sorted multiset of force-derivative orders.
    fder: Vec<u8>,
    coeff: Jet,
}

/// A coefficient `U^n_k` at a slow point: a normalized sum of terms, all
/// jets at the same guaranteed degree.
#[derive(Debug, Clone)]
struct TermList {
    deg: usize,
    terms: Vec<Term>,
}

impl TermList {
    fn zero(deg: usize) -> Self {
        TermList {
            deg,
            terms: Vec::new(),
        }
    }

    fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Sort, merge equal force-derivative multisets, drop exact zeros, and
    /// truncate every jet to the common degree.
    fn normalize(mut self) -> Self {
        for t in &mut self.terms {
            t.fder.sort_unstable();
        }
        self.terms.sort_by(|a, b| a.fder.cmp(&b.fder));
        let mut merged: Vec<Term> = Vec::with_capacity(self.terms.len());
        for t in self.terms {
            let coeff = t.coeff.truncate(self.deg);
            match merged.last_mut() {
                Some(last) if last.fder == t.fder => {
                    last.coeff = last.coeff.add(&coeff);
                }
                _ => merged.push(Term {
                    fder: t.fder,
                    coeff,
                }),
            }
        }
        merged.retain(|t| !t.coeff.is_zero());
        TermList {
            deg: self.deg,
            terms: merged,
        }
    }

    fn truncate(&self, deg: usize) -> TermList {
        TermList {
            deg,
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    fder: t.fder.clone(),
                    coeff: t.coeff.truncate(deg),
                })
                .collect(),
        }
    }

    fn add(mut self, other: &TermList) -> TermList {
        let deg = self.deg.min(other.deg);
        self.terms.extend(other.terms.iter().cloned());
        TermList {
            deg,
            terms: self.terms,
        }
        .normalize()
    }

    /// Multiply every term by `c * jet`.
    fn mul_jet(&self, jet: &Jet, c: Complex64) -> TermList {
        let deg = self.deg.min(jet.deg);
        TermList {
            deg,
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    fder: t.fder.clone(),
                    coeff: t.coeff.mul(jet).scale(c),
                })
                .collect(),
        }
        .normalize()
    }

    fn scale(&self, c: Complex64) -> TermList {
        TermList {
            deg: self.deg,
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    fder: t.fder.clone(),
                    coeff: t.coeff.scale(c),
                })
                .collect(),
        }
        .normalize()
    }

    fn deriv_t2(&self) -> TermList {
        TermList {
            deg: self.deg - 1,
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    fder: t.fder.clone(),
                    coeff: t.coeff.deriv_t(),
                })
                .collect(),
        }
        .normalize()
    }

    fn deriv_x2(&self) -> TermList {
        TermList {
            deg: self.deg - 1,
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    fder: t.fder.clone(),
                    coeff: t.coeff.deriv_x(),
                })
                .collect(),
        }
        .normalize()
    }

    /// Exact product rule in the fast variable: bump one derivative order in
    /// each term, once per factor.
    fn deriv_x1(&self) -> TermList {
        let mut terms = Vec::new();
        for t in &self.terms {
            for pos in 0..t.fder.len() {
                let mut fder = t.fder.clone();
                fder[pos] += 1;
                terms.push(Term {
                    fder,
                    coeff: t.coeff.clone(),
                });
            }
        }
        TermList {
            deg: self.deg,
            terms,
        }
        .normalize()
    }

    fn mul(&self, other: &TermList) -> TermList {
        let deg = self.deg.min(other.deg);
        let mut terms = Vec::new();
        for a in &self.terms {
            for b in &other.terms {
                let mut fder = a.fder.clone();
                fder.extend_from_slice(&b.fder);
                terms.push(Term {
                    fder,
                    coeff: a.coeff.mul(&b.coeff),
                });
            }
        }
        TermList { deg, terms }.normalize()
    }

    fn conj(&self) -> TermList {
        TermList {
            deg: self.deg,
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    fder: t.fder.clone(),
                    coeff: t.coeff.conj(),
                })
                .collect(),
        }
    }

    fn max_fder(&self) -> usize {
        self.terms
            .iter()
            .flat_map(|t| t.fder.iter())
            .copied()
            .max()
            .unwrap_or(0) as usize
    }

    fn eval(&self, x1: f64, force: &ForceProfile) -> Complex64 {
        let mut sum = Complex64::new(0.0, 0.0);
        for t in &self.terms {
            let mut prod = t.coeff.value();
            for &d in &t.fder {
                prod *= force.derivative(d as usize, x1);
            }
            sum += prod;
        }
        sum
    }

    /// Value of the t2-derivative of the coefficient (needs depth >= 1).
    fn eval_dt2(&self, x1: f64, force: &ForceProfile) -> Complex64 {
        let mut sum = Complex64::new(0.0, 0.0);
        for t in &self.terms {
            let mut prod = t.coeff.deriv_t().value();
            for &d in &t.fder {
                prod *= force.derivative(d as usize, x1);
            }
            sum += prod;
        }
        sum
    }
}

// ---------------------------------------------------------------------------
// Recurrence builder
// ---------------------------------------------------------------------------

/// Jet depth each order must carry so that a top-level order `n_top` can be
/// assembled at depth `d_top`: stepping down two orders consumes one slow
/// derivative, four orders consume two, and cubic factors need the depth of
/// their product.
fn depth_requirements(n_top: usize, d_top: usize) -> Vec<usize> {
    let mut req = vec![0usize; n_top + 1];
    req[n_top] = d_top;
    let bump = |req: &mut Vec<usize>, m: i64, v: usize| {
        if m >= 2 {
            let m = m as usize;
            if req[m] < v {
                req[m] = v;
            }
        }
    };
    for n in (2..=n_top).rev() {
        let r = req[n];
        let n_i = n as i64;
        bump(&mut req, n_i - 1, r);
        bump(&mut req, n_i - 2, r + 1);
        bump(&mut req, n_i - 3, r + 1);
        bump(&mut req, n_i - 4, r + 2);
        if n >= 6 {
            for m in 2..=(n - 4) {
                bump(&mut req, m as i64, r);
            }
        }
    }
    req
}

/// Memoized evaluation of the coefficient recurrence at one slow point.
struct Builder {
    point: SlowPoint,
    gamma: f64,
    req: Vec<usize>,
    /// S-jet at the deepest degree any order needs.
    s_jet: Jet,
    memo: HashMap<(usize, i64), TermList>,
}

impl Builder {
    fn new(phase: &PhaseSpec, point: SlowPoint, gamma: f64, n_top: usize, d_top: usize) -> Result<Self> {
        if !(2..=MAX_ORDER).contains(&n_top) {
            return Err(Error::Validation(format!(
                "truncation order must lie in 2..={MAX_ORDER}; requested {n_top}"
            )));
        }
        let req = depth_requirements(n_top, d_top);
        let max_depth = *req.iter().max().unwrap();
        // S itself must reach two degrees deeper than the deepest
        // coefficient: one for first derivatives (S_t, S_x), one more for
        // curvature factors (S_tt, ...).
        let s_jet = phase_jet(phase, point, max_depth + 2)?;
        Ok(Builder {
            point,
            gamma,
            req,
            s_jet,
            memo: HashMap::new(),
        })
    }

    fn depth(&self, n: usize) -> usize {
        self.req[n]
    }

    /// The resonance function `l = S_t^2 - S_x^2 - 1` as a jet at `deg`.
    fn l_jet(&self, deg: usize) -> Jet {
        let st = self.s_jet.deriv_t().truncate(deg);
        let sx = self.s_jet.deriv_x().truncate(deg);
        st.mul(&st)
            .add(&sx.mul(&sx).scale(Complex64::new(-1.0, 0.0)))
            .add(&Jet::constant(deg, Complex64::new(-1.0, 0.0)))
    }

    /// `U^n_k` as a term list at depth `req[n]`.
    fn compute(&mut self, n: i64, k: i64) -> Result<TermList> {
        if n < 2 {
            return Ok(TermList::zero(0));
        }
        let n = n as usize;
        let deg = self.depth(n);
        if let Some(hit) = self.memo.get(&(n, k)) {
            return Ok(hit.clone());
        }
        let omega = omega_set(n)?;
        if !omega.contains(k) {
            let z = TermList::zero(deg);
            self.memo.insert((n, k), z.clone());
            return Ok(z);
        }
        if k < 0 {
            let pos = self.compute(n as i64, -k)?;
            let c = pos.conj();
            self.memo.insert((n, k), c.clone());
            return Ok(c);
        }

        // Harmonic symbol mu_k = k^2 l + k^2 - 1 (= l for the fundamental).
        let kf = k as f64;
        let mu = self
            .l_jet(deg)
            .scale(Complex64::new(kf * kf, 0.0))
            .add(&Jet::constant(deg, Complex64::new(kf * kf - 1.0, 0.0)));
        let mu0 = mu.value().norm();
        if mu0 < L_MIN {
            return Err(Error::ValidityMargin(format!(
                "harmonic symbol |{}^2 l + {}^2 - 1| = {:.3e} at (t2, x2) = ({:.6}, {:.6}) \
                 is inside the guard {:.0e}; the expansion is not valid this close to a \
                 resonance of harmonic {}",
                k, k, mu0, self.point.t2, self.point.x2, L_MIN, k
            )));
        }

        let st = self.s_jet.deriv_t().truncate(deg);
        let sx = self.s_jet.deriv_x().truncate(deg);
        let stt = self.s_jet.deriv_t().deriv_t().truncate(deg);
        let sxx = self.s_jet.deriv_x().deriv_x().truncate(deg);
        let i_unit = Complex64::new(0.0, 1.0);

        let mut numerator = TermList::zero(deg);

        // Terms consuming U^{n-2}: 2ik S_t d_t2 + ik S_tt - 2ik S_x d_x2
        //                          - ik S_xx - d_x1 d_x1.
        let a = self.compute(n as i64 - 2, k)?;
        if !a.is_zero() {
            numerator = numerator.add(&a.deriv_t2().mul_jet(&st, 2.0 * kf * i_unit));
            numerator = numerator.add(&a.mul_jet(&stt, kf * i_unit));
            numerator = numerator.add(&a.deriv_x2().mul_jet(&sx, -2.0 * kf * i_unit));
            numerator = numerator.add(&a.mul_jet(&sxx, -kf * i_unit));
            numerator = numerator.add(&a.deriv_x1().deriv_x1().scale(Complex64::new(-1.0, 0.0)));
        }

        // Term consuming U^{n-1}: -2ik S_x d_x1.
        let b = self.compute(n as i64 - 1, k)?;
        if !b.is_zero() {
            numerator = numerator.add(&b.deriv_x1().mul_jet(&sx, -2.0 * kf * i_unit));
        }

        // Term consuming U^{n-3}: -2 d_x1 d_x2.
        let c = self.compute(n as i64 - 3, k)?;
        if !c.is_zero() {
            numerator = numerator.add(&c.deriv_x1().deriv_x2().scale(Complex64::new(-2.0, 0.0)));
        }

        // Terms consuming U^{n-4}: d_t2 d_t2 - d_x2 d_x2.
        let d = self.compute(n as i64 - 4, k)?;
        if !d.is_zero() {
            numerator = numerator.add(&d.deriv_t2().deriv_t2());
            numerator = numerator.add(&d.deriv_x2().deriv_x2().scale(Complex64::new(-1.0, 0.0)));
        }

        // Cubic convolution: gamma * sum over ordered triples.
        if n >= 6 && self.gamma != 0.0 {
            let mut cubic = TermList::zero(deg);
            for n1 in 2..=(n - 4) {
                for n2 in 2..=(n - 2 - n1) {
                    let n3 = n - n1 - n2;
                    let (o1, o2, o3) = (omega_set(n1)?, omega_set(n2)?, omega_set(n3)?);
                    for &k1 in &o1.harmonics {
                        for &k2 in &o2.harmonics {
                            let k3 = k - k1 - k2;
                            if !o3.contains(k3) {
                                continue;
                            }
                            let u1 = self.compute(n1 as i64, k1)?;
                            if u1.is_zero() {
                                continue;
                            }
                            let u2 = self.compute(n2 as i64, k2)?;
                            if u2.is_zero() {
                                continue;
                            }
                            let u3 = self.compute(n3 as i64, k3)?;
                            if u3.is_zero() {
                                continue;
                            }
                            cubic = cubic.add(&u1.mul(&u2).mul(&u3));
                        }
                    }
                }
            }
            numerator = numerator.add(&cubic.scale(Complex64::new(self.gamma, 0.0)));
        }

        // Forcing enters once, at the leading fundamental balance.
        if n == 2 && k == 1 {
            numerator = numerator.add(&TermList {
                deg,
                terms: vec![Term {
                    fder: vec![0],
                    coeff: Jet::constant(deg, Complex64::new(-1.0, 0.0)),
                }],
            });
        }

        let result = numerator.truncate(deg).mul_jet(&mu.recip(), Complex64::new(1.0, 0.0));
        self.memo.insert((n, k), result.clone());
        Ok(result)
    }
}

// ---------------------------------------------------------------------------
// Public coefficient evaluation
// ---------------------------------------------------------------------------

/// A single expansion coefficient sampled on a slow grid. The fast-space
/// dependence stays symbolic: per grid point the coefficient is a list of
/// `(derivative orders, complex prefactor)` pairs, contracted against a
/// force profile at evaluation time.
#[derive(Debug, Clone)]
pub struct WkbCoefficient {
    pub n: usize,
    pub k: i64,
    pub points: Vec<SlowPoint>,
    /// Per point: (multiset of f-derivative orders, prefactor value).
    terms: Vec<Vec<(Vec<u8>, Complex64)>>,
}

impl WkbCoefficient {
    /// Evaluate at grid point `index` for fast coordinate `x1`.
    pub fn eval(&self, index: usize, x1: f64, force: &ForceProfile) -> Complex64 {
        let mut sum = Complex64::new(0.0, 0.0);
        for (fder, c) in &self.terms[index] {
            let mut prod = *c;
            for &d in fder {
                prod *= force.derivative(d as usize, x1);
            }
            sum += prod;
        }
        sum
    }

    /// True when the coefficient is identically zero on the whole grid
    /// (a "zero branch" of the recurrence, e.g. the third order for a purely
    /// time-chirped phase).
    pub fn is_zero_branch(&self) -> bool {
        self.terms.iter().all(|t| t.is_empty())
    }

    /// Highest force-derivative order the evaluation will request.
    pub fn max_force_derivative(&self) -> usize {
        self.terms
            .iter()
            .flat_map(|t| t.iter())
            .flat_map(|(fder, _)| fder.iter())
            .copied()
            .max()
            .unwrap_or(0) as usize
    }
}

fn require_real_force(force: &ForceProfile) -> Result<()> {
    if force.is_real() {
        Ok(())
    } else {
        Err(Error::Validation(
            "the pre-resonance expansion pairs negative harmonics with complex \
             conjugates, which requires a real-valued force profile"
                .into(),
        ))
    }
}

/// Evaluate the expansion coefficient `U^n_k` on a slow grid.
///
/// `gamma` is the cubic coupling (it first enters at order 6). The force is
/// used to validate derivative availability and realness; the returned
/// coefficient can be contracted against it pointwise.
pub fn wkb_amplitude(
    n: usize,
    k: i64,
    phase: &PhaseSpec,
    force: &ForceProfile,
    gamma: f64,
    grid: &[SlowPoint],
) -> Result<WkbCoefficient> {
    require_real_force(force)?;
    let omega = omega_set(n)?;
    if !omega.contains(k) {
        return Err(Error::Validation(format!(
            "harmonic {k} is not present at order {n}; the set is {:?}",
            omega.harmonics
        )));
    }
    let mut terms = Vec::with_capacity(grid.len());
    let mut max_fder = 0usize;
    for &p in grid {
        let mut builder = Builder::new(phase, p, gamma, n, 0)?;
        let tl = builder.compute(n as i64, k)?;
        max_fder = max_fder.max(tl.max_fder());
        terms.push(
            tl.terms
                .iter()
                .map(|t| (t.fder.clone(), t.coeff.value()))
                .collect(),
        );
    }
    if max_fder > force.max_derivative_order() {
        return Err(Error::Dependency(format!(
            "order-{n} coefficient needs force derivatives up to order {max_fder}, \
             but the profile '{}' supplies only {}",
            force.describe(),
            force.max_derivative_order()
        )));
    }
    Ok(WkbCoefficient {
        n,
        k,
        points: grid.to_vec(),
        terms,
    })
}

// ---------------------------------------------------------------------------
// Field assembly
// ---------------------------------------------------------------------------

/// The assembled pre-resonance state on a fast grid at one time.
#[derive(Debug, Clone)]
pub struct PreField {
    pub t: f64,
    pub epsilon: f64,
    pub truncation: usize,
    pub xs: Vec<f64>,
    /// Real field values.
    pub u: Vec<f64>,
    /// Real time derivative of the field.
    pub u_t: Vec<f64>,
    /// Complex envelope of the fundamental: `u ~ 2 Re[envelope e^{iS/eps^2}]`
    /// plus higher harmonics.
    pub envelope: Vec<Complex64>,
    /// Positive harmonics present at this truncation.
    pub harmonics: Vec<i64>,
    /// Per harmonic (same order as `harmonics`): summed envelopes.
    pub harmonic_envelopes: Vec<Vec<Complex64>>,
}

/// Assemble the truncated expansion on a fast grid at time `t`.
///
/// Every evaluation point must satisfy the validity margin `-l > margin*eps`;
/// points that violate it are listed in the error. The returned state
/// includes the exact time derivative of the truncated series, so it can
/// seed a time-domain solver at a consistent state.
pub fn evaluate_pre_field(
    truncation: usize,
    phase: &PhaseSpec,
    force: &ForceProfile,
    gamma: f64,
    epsilon: f64,
    xs: &[f64],
    t: f64,
    margin: f64,
) -> Result<PreField> {
    require_real_force(force)?;
    if !(epsilon > 0.0) {
        return Err(Error::Validation("epsilon must be positive".into()));
    }
    let t2 = epsilon * epsilon * t;

    // Margin check across the whole grid first, so the error can list every
    // offending point rather than the first one hit.
    let mut offenders = Vec::new();
    for &x in xs {
        let x2 = epsilon * epsilon * x;
        let l = phase.l(t2, x2);
        if !(-l > margin * epsilon) {
            offenders.push((x, l));
        }
    }
    if !offenders.is_empty() {
        let sample: Vec<String> = offenders
            .iter()
            .take(4)
            .map(|(x, l)| format!("x = {x:.3} (l = {l:.4})"))
            .collect();
        return Err(Error::ValidityMargin(format!(
            "{} of {} grid points violate the pre-resonance margin -l > {margin} * eps \
             = {:.4}: {}{}",
            offenders.len(),
            xs.len(),
            margin * epsilon,
            sample.join(", "),
            if offenders.len() > 4 { ", ..." } else { "" }
        )));
    }

    let harmonics: Vec<i64> = omega_set(truncation)?.positive().collect();
    let mut u = vec![0.0; xs.len()];
    let mut u_t = vec![0.0; xs.len()];
    let mut envelope = vec![Complex64::new(0.0, 0.0); xs.len()];
    let mut harmonic_envelopes = vec![vec![Complex64::new(0.0, 0.0); xs.len()]; harmonics.len()];

    for (ix, &x) in xs.iter().enumerate() {
        let x1 = epsilon * x;
        let x2 = epsilon * epsilon * x;
        let point = SlowPoint::new(t2, x2);
        let s = phase.s(t2, x2);
        let s_t = phase.s_t(t2, x2);
        // One builder per point serves every (n, k); depth 1 so the exact
        // t2-derivative of each amplitude is available for u_t.
        let mut builder = Builder::new(phase, point, gamma, truncation, 1)?;
        for (ik, &k) in harmonics.iter().enumerate() {
            let theta = k as f64 * s / (epsilon * epsilon);
            let carrier = Complex64::new(0.0, theta).exp();
            let mut amp = Complex64::new(0.0, 0.0);
            let mut amp_t2 = Complex64::new(0.0, 0.0);
            for n in 2..=truncation {
                let tl = builder.compute(n as i64, k)?;
                if tl.is_zero() {
                    continue;
                }
                if tl.max_fder() > force.max_derivative_order() {
                    return Err(Error::Dependency(format!(
                        "order-{n} coefficient needs force derivatives up to order {}, \
                         but the profile '{}' supplies only {}",
                        tl.max_fder(),
                        force.describe(),
                        force.max_derivative_order()
                    )));
                }
                let scale = epsilon.powi(n as i32);
                amp += scale * tl.eval(x1, force);
                amp_t2 += scale * tl.eval_dt2(x1, force);
            }
            harmonic_envelopes[ik][ix] = amp;
            if k == 1 {
                envelope[ix] = amp;
            }
            // u = sum_k 2 Re[amp e^{ik theta}]; the time derivative sees the
            // carrier at O(1) and the amplitude drift at O(eps^2).
            u[ix] += 2.0 * (amp * carrier).re;
            let damp =
                Complex64::new(0.0, k as f64 * s_t) * amp + epsilon * epsilon * amp_t2;
            u_t[ix] += 2.0 * (damp * carrier).re;
        }
    }

    Ok(PreField {
        t,
        epsilon,
        truncation,
        xs: xs.to_vec(),
        u,
        u_t,
        envelope,
        harmonics,
        harmonic_envelopes,
    })
}

/// Pointwise residual of the original field equation under the truncated
/// expansion, computed with high-order finite differences in the fast
/// variables. The residual should scale like `eps^{N+1}` in the validity
/// region; this is the arbiter for the recurrence bookkeeping.
pub fn pde_residual(
    truncation: usize,
    phase: &PhaseSpec,
    force: &ForceProfile,
    gamma: f64,
    epsilon: f64,
    t: f64,
    xs: &[f64],
    margin: f64,
) -> Result<Vec<f64>> {
    const H: f64 = 0.01;
    let field = |tt: f64, grid: &[f64]| -> Result<Vec<f64>> {
        Ok(
            evaluate_pre_field(truncation, phase, force, gamma, epsilon, grid, tt, margin)?
                .u,
        )
    };

    // Five-point fourth-order second-derivative stencils in t and x.
    let mut time_slices = Vec::with_capacity(5);
    for j in -2i32..=2 {
        time_slices.push(field(t + j as f64 * H, xs)?);
    }
    let mut x_grid = Vec::with_capacity(5 * xs.len());
    for &x in xs {
        for j in -2i32..=2 {
            x_grid.push(x + j as f64 * H);
        }
    }
    let space = field(t, &x_grid)?;

    let stencil = |m2: f64, m1: f64, c0: f64, p1: f64, p2: f64| {
        (-m2 + 16.0 * m1 - 30.0 * c0 + 16.0 * p1 - p2) / (12.0 * H * H)
    };

    let t2 = epsilon * epsilon * t;
    let mut residual = Vec::with_capacity(xs.len());
    for (i, &x) in xs.iter().enumerate() {
        let u0 = time_slices[2][i];
        let u_tt = stencil(
            time_slices[0][i],
            time_slices[1][i],
            u0,
            time_slices[3][i],
            time_slices[4][i],
        );
        let u_xx = stencil(
            space[5 * i],
            space[5 * i + 1],
            space[5 * i + 2],
            space[5 * i + 3],
            space[5 * i + 4],
        );
        let x1 = epsilon * x;
        let x2 = epsilon * epsilon * x;
        let theta = phase.s(t2, x2) / (epsilon * epsilon);
        let drive = 2.0
            * epsilon
            * epsilon
            * (force.eval(x1) * Complex64::new(0.0, theta).exp()).re;
        residual.push(u_tt - u_xx + u0 + gamma * u0 * u0 * u0 - drive);
    }
    Ok(residual)
}

// ---------------------------------------------------------------------------
// Singularity scaling diagnostics
// ---------------------------------------------------------------------------

/// Sampling plan for the approach to the resonance curve along a fixed
/// `x2` line: target values of `l < 0` are converted to `t2` positions by
/// root bracketing.
#[derive(Debug, Clone)]
pub struct ApproachSpec {
    pub x2: f64,
    /// Fast coordinate at which the coefficient is probed (pick a point
    /// where neither `f` nor the relevant derivatives vanish).
    pub x1: f64,
    /// Bracket in `t2` containing the approach (the resonance value of `l`
    /// must lie above every target within the bracket).
    pub t2_bracket: (f64, f64),
    /// Negative `l` targets, ordered towards zero.
    pub l_values: Vec<f64>,
}

impl ApproachSpec {
    /// Geometric ladder of `l` targets from -0.24 halving seven times
    /// (1.8 decades, all above the evaluation guard).
    pub fn ladder(x2: f64, x1: f64, t2_bracket: (f64, f64)) -> Self {
        ApproachSpec {
            x2,
            x1,
            t2_bracket,
            l_values: (0..7).map(|j| -0.24 * 0.5f64.powi(j)).collect(),
        }
    }
}

/// Result of fitting the blow-up rate of a coefficient against `|l|`.
#[derive(Debug, Clone)]
pub struct ExponentFit {
    /// Log-log slope: approximately `-(n - k)` for a nonzero branch.
    pub slope: f64,
    /// Maximum absolute deviation of the fit in log space.
    pub fit_residual: f64,
    /// Set when the coefficient vanishes identically along the approach.
    pub zero_branch: bool,
    /// (|l|, |U|) pairs actually used.
    pub samples: Vec<(f64, f64)>,
}

/// Fit the scaling law `|U^n_k| ~ |l|^{-(n-k)}` along an approach to the
/// resonance curve.
pub fn singularity_exponent(
    n: usize,
    k: i64,
    phase: &PhaseSpec,
    force: &ForceProfile,
    gamma: f64,
    approach: &ApproachSpec,
) -> Result<ExponentFit> {
    require_real_force(force)?;
    if approach.l_values.len() < 3 {
        return Err(Error::Validation(
            "at least three approach samples are needed for a slope fit".into(),
        ));
    }
    let span = approach
        .l_values
        .iter()
        .map(|l| l.abs())
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if span.1 / span.0 < 10f64.powf(1.5) {
        return Err(Error::Validation(format!(
            "approach samples span only {:.2} decades; at least 1.5 are needed",
            (span.1 / span.0).log10()
        )));
    }

    // Convert l targets to t2 positions by bisection inside the bracket.
    let (mut lo, mut hi) = approach.t2_bracket;
    let f_lo = phase.l(lo, approach.x2);
    let f_hi = phase.l(hi, approach.x2);
    let mut samples = Vec::new();
    for &l_target in &approach.l_values {
        if !(l_target < 0.0) {
            return Err(Error::Validation(format!(
                "approach targets must be negative l values; got {l_target}"
            )));
        }
        if (f_lo - l_target) * (f_hi - l_target) > 0.0 {
            return Err(Error::RootFinding(format!(
                "t2 bracket ({}, {}) does not straddle l = {l_target} at x2 = {}",
                approach.t2_bracket.0, approach.t2_bracket.1, approach.x2
            )));
        }
        let (mut a, mut b) = (lo, hi);
        let mut fa = phase.l(a, approach.x2) - l_target;
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            let fm = phase.l(mid, approach.x2) - l_target;
            if fa * fm <= 0.0 {
                b = mid;
            } else {
                a = mid;
                fa = fm;
            }
            if (b - a).abs() < 1e-14 {
                break;
            }
        }
        let t2 = 0.5 * (a + b);
        let grid = [SlowPoint::new(t2, approach.x2)];
        let coeff = wkb_amplitude(n, k, phase, force, gamma, &grid)?;
        let value = coeff.eval(0, approach.x1, force).norm();
        samples.push((l_target.abs(), value));
        // keep the bracket tight for the next (closer) target
        lo = lo.min(t2);
        hi = hi.max(t2);
    }

    let zero_count = samples.iter().filter(|(_, v)| *v == 0.0).count();
    if zero_count == samples.len() {
        return Ok(ExponentFit {
            slope: 0.0,
            fit_residual: 0.0,
            zero_branch: true,
            samples,
        });
    }
    if zero_count > 0 {
        return Err(Error::Validation(format!(
            "coefficient vanishes at {zero_count} of {} approach samples but not all; \
             the probe x1 = {} likely sits on a zero of the force derivatives",
            samples.len(),
            approach.x1
        )));
    }

    // Least-squares line ln|U| = c + slope * ln|l|.
    let xs: Vec<f64> = samples.iter().map(|(l, _)| l.ln()).collect();
    let ys: Vec<f64> = samples.iter().map(|(_, v)| v.ln()).collect();
    let m = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|v| v * v).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum();
    let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    let intercept = (sy - slope * sx) / m;
    let fit_residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (intercept + slope * x)).abs())
        .fold(0.0f64, f64::max);

    Ok(ExponentFit {
        slope,
        fit_residual,
        zero_branch: false,
        samples,
    })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> PhaseSpec {
        PhaseSpec::quadratic()
    }

    fn tilted() -> PhaseSpec {
        PhaseSpec::quadratic_tilted(0.1)
    }

    fn gauss() -> ForceProfile {
        ForceProfile::gaussian(1.3, 0.9, 0.1)
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn omega_sets_match_the_ladder() {
        for n in 2..=5 {
            assert_eq!(omega_set(n).unwrap().harmonics, vec![-1, 1], "n = {n}");
        }
        for n in 6..=9 {
            assert_eq!(omega_set(n).unwrap().harmonics, vec![-3, -1, 1, 3], "n = {n}");
        }
        for n in 10..=13 {
            assert_eq!(
                omega_set(n).unwrap().harmonics,
                vec![-5, -3, -1, 1, 3, 5],
                "n = {n}"
            );
        }
        assert_eq!(
            omega_set(14).unwrap().harmonics,
            vec![-7, -5, -3, -1, 1, 3, 5, 7]
        );
        assert!(omega_set(1).is_err());
        assert!(omega_set(0).is_err());
    }

    #[test]
    fn omega_sets_grow_monotonically_and_stay_odd() {
        for n in 2..=16 {
            let a = omega_set(n).unwrap();
            let b = omega_set(n + 4).unwrap();
            for k in &a.harmonics {
                assert!(b.contains(*k), "Omega_{n} not within Omega_{}", n + 4);
                assert_eq!(k.rem_euclid(2), 1, "even harmonic in Omega_{n}");
                assert!(a.contains(-k), "harmonic set not symmetric at n = {n}");
            }
        }
    }

    #[test]
    fn jet_arithmetic_reproduces_derivatives_of_a_composite() {
        // g = S_t / l^2 for the model phase at t2 = 0.8: check the jet's
        // first t2-derivative against the hand value
        // g_t = (l^2 S_tt - 2 l l_t S_t)/l^4 = S_tt/l^2 - 2 l_t S_t / l^3.
        let phase = model();
        let p = SlowPoint::new(0.8, 0.0);
        let s = phase_jet(&phase, p, 3).unwrap();
        let st = s.deriv_t();
        let l = {
            let sx = s.deriv_x();
            st.mul(&st)
                .add(&sx.mul(&sx).scale(c(-1.0, 0.0)))
                .add(&Jet::constant(2, c(-1.0, 0.0)))
        };
        let g = st.truncate(2).mul(&l.recip()).mul(&l.recip());
        let l0: f64 = 0.8f64 * 0.8 - 1.0;
        let expected_g = 0.8 / (l0 * l0);
        let expected_gt = 1.0 / (l0 * l0) - 2.0 * (2.0 * 0.8) * 0.8 / (l0 * l0 * l0);
        assert!((g.value().re - expected_g).abs() < 1e-12);
        assert!((g.deriv_t().value().re - expected_gt).abs() < 1e-11);
    }

    #[test]
    fn leading_order_is_minus_f_over_l() {
        let phase = model();
        let force = gauss();
        for &t2 in &[0.5f64, 0.8] {
            let grid = [SlowPoint::new(t2, 0.0)];
            let u2 = wkb_amplitude(2, 1, &phase, &force, 1.0, &grid).unwrap();
            let l = t2 * t2 - 1.0;
            for &x1 in &[-0.6f64, 0.4] {
                let expected = -force.eval(x1) / l;
                let got = u2.eval(0, x1, &force);
                assert!(
                    (got - expected).norm() < 1e-14 * expected.norm(),
                    "t2={t2} x1={x1}: {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn zero_force_gives_zero_coefficients() {
        let phase = model();
        let force = ForceProfile::zero();
        let grid = [SlowPoint::new(0.7, 0.0)];
        for (n, k) in [(2usize, 1i64), (4, 1), (6, 3)] {
            let u = wkb_amplitude(n, k, &phase, &force, 1.0, &grid).unwrap();
            assert_eq!(u.eval(0, 0.3, &force), c(0.0, 0.0));
        }
    }

    #[test]
    fn third_order_vanishes_for_pure_time_chirp() {
        let phase = model();
        let force = gauss();
        let grid = [SlowPoint::new(0.8, 0.0), SlowPoint::new(0.5, 0.2)];
        let u3 = wkb_amplitude(3, 1, &phase, &force, 1.0, &grid).unwrap();
        assert!(u3.is_zero_branch());
        assert_eq!(u3.eval(0, 0.4, &force), c(0.0, 0.0));
    }

    #[test]
    fn third_order_closed_form_for_tilted_phase() {
        // U^3_1 = 2i S_x f'(x1) / l^2 with S_x = a.
        let a = 0.1f64;
        let phase = tilted();
        let force = gauss();
        let (t2, x2, x1) = (0.8f64, 0.3f64, 0.5f64);
        let grid = [SlowPoint::new(t2, x2)];
        let u3 = wkb_amplitude(3, 1, &phase, &force, 1.0, &grid).unwrap();
        let l = t2 * t2 - a * a - 1.0;
        let fp = force.derivative(1, x1);
        let expected = c(0.0, 2.0 * a) * fp / (l * l);
        let got = u3.eval(0, x1, &force);
        assert!(
            (got - expected).norm() < 1e-12 * expected.norm(),
            "{got} vs {expected}"
        );
    }

    #[test]
    fn fourth_order_closed_form_for_the_model() {
        // For S = t2^2/2: U^4_1 = 4 i t2^2 f / l^3 - i f / l^2 + f'' / l^2.
        let phase = model();
        let force = gauss();
        let (t2, x1) = (0.8f64, 0.4f64);
        let grid = [SlowPoint::new(t2, 0.0)];
        let u4 = wkb_amplitude(4, 1, &phase, &force, 0.0, &grid).unwrap();
        let l = t2 * t2 - 1.0;
        let f = force.eval(x1);
        let fpp = force.derivative(2, x1);
        let expected =
            c(0.0, 4.0 * t2 * t2) * f / (l * l * l) + (fpp - c(0.0, 1.0) * f) / (l * l);
        let got = u4.eval(0, x1, &force);
        assert!(
            (got - expected).norm() < 1e-12 * expected.norm(),
            "{got} vs {expected}"
        );
    }

    #[test]
    fn first_cubic_harmonic_is_exactly_the_triple_product() {
        // At order 6, harmonic 3, the only source is (U^2_1)^3 and the
        // divisor is the third-harmonic symbol 9l + 8:
        // U^6_3 = -gamma f^3 / (l^3 (9l + 8)).
        let phase = model();
        let force = gauss();
        let gamma = 0.7f64;
        let (t2, x1) = (0.8f64, 0.4f64);
        let grid = [SlowPoint::new(t2, 0.0)];
        let u63 = wkb_amplitude(6, 3, &phase, &force, gamma, &grid).unwrap();
        let l = t2 * t2 - 1.0;
        let f = force.eval(x1);
        let expected = -gamma * f * f * f / (l * l * l * (9.0 * l + 8.0));
        let got = u63.eval(0, x1, &force);
        assert!(
            (got - expected).norm() < 1e-12 * expected.norm(),
            "{got} vs {expected}"
        );
    }

    #[test]
    fn negative_harmonics_are_conjugates() {
        let phase = tilted();
        let force = gauss();
        let grid = [SlowPoint::new(0.75, 0.2)];
        for (n, k) in [(2usize, 1i64), (3, 1), (4, 1), (6, 3)] {
            let up = wkb_amplitude(n, k, &phase, &force, 0.9, &grid).unwrap();
            let um = wkb_amplitude(n, -k, &phase, &force, 0.9, &grid).unwrap();
            let x1 = 0.55;
            let a = up.eval(0, x1, &force);
            let b = um.eval(0, x1, &force);
            assert!(
                (a.conj() - b).norm() <= 1e-14 * a.norm().max(1e-300),
                "(n,k)=({n},{k}): {a} vs conj {b}"
            );
        }
    }

    #[test]
    fn singularity_guard_refuses_near_curve_evaluation() {
        let phase = model();
        let force = gauss();
        // l = t2^2 - 1 = -9.99e-4 at this point: inside the guard.
        let t2 = (1.0f64 - 0.999e-3).sqrt();
        let grid = [SlowPoint::new(t2, 0.0)];
        let err = wkb_amplitude(2, 1, &phase, &force, 0.0, &grid).unwrap_err();
        assert!(matches!(err, Error::ValidityMargin(_)), "{err}");
    }

    #[test]
    fn secondary_resonance_of_the_third_harmonic_is_guarded() {
        // The third-harmonic symbol 9l + 8 vanishes at l = -8/9, i.e.
        // t2 = 1/3 for the model phase: evaluation there must be refused
        // even though l itself is far from zero.
        let phase = model();
        let force = gauss();
        let grid = [SlowPoint::new(1.0 / 3.0, 0.0)];
        let err = wkb_amplitude(6, 3, &phase, &force, 1.0, &grid).unwrap_err();
        assert!(matches!(err, Error::ValidityMargin(_)), "{err}");
        // ... while the fundamental at the same point is fine.
        assert!(wkb_amplitude(2, 1, &phase, &force, 1.0, &grid).is_ok());
    }

    #[test]
    fn scaling_exponents_match_the_blowup_law() {
        let force = gauss();
        let bracket = (0.2, 0.999999);
        // (n, k, expected -(n-k)) on the model phase.
        let model_cases = [(2usize, 1i64, -1.0f64), (4, 1, -3.0), (6, 1, -5.0)];
        for (n, k, want) in model_cases {
            let spec = ApproachSpec::ladder(0.0, 0.5, bracket);
            let fit = singularity_exponent(n, k, &model(), &force, 1.0, &spec).unwrap();
            assert!(!fit.zero_branch, "(n,k)=({n},{k}) unexpectedly zero");
            assert!(
                (fit.slope - want).abs() < 0.1,
                "(n,k)=({n},{k}): slope {} vs {want}",
                fit.slope
            );
        }
        // Tilted phase activates the odd orders and the third harmonic.
        let tilt_bracket = (0.2, (1.0f64 + 0.01).sqrt() - 1e-9);
        let tilt_cases = [(3usize, 1i64, -2.0f64), (6, 3, -3.0)];
        for (n, k, want) in tilt_cases {
            let spec = ApproachSpec::ladder(0.0, 0.5, tilt_bracket);
            let fit = singularity_exponent(n, k, &tilted(), &force, 1.0, &spec).unwrap();
            assert!(
                (fit.slope - want).abs() < 0.1,
                "(n,k)=({n},{k}): slope {} vs {want}",
                fit.slope
            );
        }
        // The zero branch is reported as such, not as an error.
        let spec = ApproachSpec::ladder(0.0, 0.5, bracket);
        let fit = singularity_exponent(3, 1, &model(), &force, 1.0, &spec).unwrap();
        assert!(fit.zero_branch);
    }

    #[test]
    fn leading_field_matches_the_closed_form() {
        let phase = model();
        let force = gauss();
        let eps = 0.1f64;
        let t2 = 0.6f64;
        let t = t2 / (eps * eps);
        let xs = [-3.0, 0.0, 2.0, 7.0];
        let pre = evaluate_pre_field(2, &phase, &force, 0.0, eps, &xs, t, DEFAULT_MARGIN).unwrap();
        let l = t2 * t2 - 1.0;
        let s = 0.5 * t2 * t2;
        for (i, &x) in xs.iter().enumerate() {
            let f = force.eval(eps * x);
            let envelope = -f / l * eps * eps;
            let expected = 2.0 * (envelope * Complex64::new(0.0, s / (eps * eps)).exp()).re;
            assert!(
                (pre.u[i] - expected).abs() < 1e-13,
                "x={x}: {} vs {expected}",
                pre.u[i]
            );
            assert!((pre.envelope[i] - envelope).norm() < 1e-15);
            // amplitude envelope magnitude: 2 eps^2 |f| / |l|
            assert!(
                (2.0 * pre.envelope[i].norm() - 2.0 * eps * eps * f.norm() / l.abs()).abs()
                    < 1e-15
            );
        }
    }

    #[test]
    fn chirp_start_state_is_flat_with_zero_velocity() {
        // At t = 0 the model chirp has S = 0, S_t = 0, l = -1: the expansion
        // pins u = 2 eps^2 f + O(eps^4) with exactly zero time derivative.
        let phase = model();
        let force = gauss();
        let eps = 0.1f64;
        let xs = [-4.0, -1.0, 0.0, 2.0];
        let pre = evaluate_pre_field(4, &phase, &force, 0.0, eps, &xs, 0.0, DEFAULT_MARGIN).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            let f = force.eval(eps * x).re;
            let fpp = force.derivative(2, eps * x).re;
            // At t2 = 0: l = -1, so U^2 = f, U^3 = 0, U^4 = f'' - i f, and
            // the truncated field is exactly 2 eps^2 f + 2 eps^4 f''.
            let expected = 2.0 * eps * eps * f + 2.0 * eps.powi(4) * fpp;
            assert!(
                (pre.u[i] - expected).abs() < 1e-12,
                "x={x}: u = {} vs {expected}",
                pre.u[i]
            );
            assert!(pre.u_t[i].abs() < 1e-15, "u_t = {}", pre.u_t[i]);
        }
    }

    #[test]
    fn margin_violation_lists_offenders() {
        let phase = model();
        let force = gauss();
        let eps = 0.1f64;
        // t2 = 0.98 -> l = -0.0396 < 5 eps = 0.5: outside validity.
        let t = 0.98 / (eps * eps);
        let err =
            evaluate_pre_field(2, &phase, &force, 0.0, eps, &[0.0, 1.0], t, DEFAULT_MARGIN)
                .unwrap_err();
        match err {
            Error::ValidityMargin(msg) => {
                assert!(msg.contains("2 of 2"), "{msg}");
            }
            other => panic!("wrong error kind: {other}"),
        }
    }

    #[test]
    fn custom_force_derivative_budget_is_enforced() {
        // A custom force only supplies two derivative orders; order 5 on the
        // tilted phase needs f''' and must be refused, not silently wrong.
        let phase = tilted();
        let force = ForceProfile::custom("exp(-y^2)", None, 9.0).unwrap();
        let grid = [SlowPoint::new(0.7, 0.0)];
        let err = wkb_amplitude(5, 1, &phase, &force, 0.0, &grid).unwrap_err();
        assert!(matches!(err, Error::Dependency(_)), "{err}");
        // ...while order 4 (needs only f'') passes.
        assert!(wkb_amplitude(4, 1, &phase, &force, 0.0, &grid).is_ok());
    }

    #[test]
    fn residual_scales_at_the_truncation_order() {
        // For the pure time chirp every odd-order coefficient vanishes, so
        // the N = 5 truncation leaves an O(eps^6) equation residual whose
        // next correction sits two powers higher: halving eps must shrink
        // the L2 residual by almost exactly 2^6 = 64.
        let phase = model();
        let force = ForceProfile::gaussian(1.0, 1.0, 0.0);
        let gamma = 1.0;
        let t2 = 0.5f64;
        let mut norms = Vec::new();
        for &eps in &[0.1f64, 0.05] {
            let t = t2 / (eps * eps);
            let xs: Vec<f64> = [-0.8f64, -0.4, 0.0, 0.4, 0.8]
                .iter()
                .map(|x1| x1 / eps)
                .collect();
            let r = pde_residual(5, &phase, &force, gamma, eps, t, &xs, 4.9).unwrap();
            let l2 = (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt();
            norms.push(l2);
        }
        let ratio = norms[0] / norms[1];
        assert!(
            (44.8..=83.2).contains(&ratio),
            "residual ratio {ratio} outside 2^6 +- 30% (norms {norms:?})"
        );
    }

    #[test]
    fn fourth_order_closed_form_with_spatial_structure() {
        // On a phase with genuine x2 dependence the fourth order picks up
        // every first-shift line of the recurrence:
        //   U^4_1 = 2 i f (S_t l_t - S_x l_x)/l^3 + 4 S_x^2 f''/l^3
        //           + i (S_xx - S_tt) f / l^2 + f''/l^2.
        let phase = PhaseSpec::custom("t2^2/2 + 0.3*x2^2").unwrap();
        let force = gauss();
        let (t2, x2, x1) = (0.6f64, 0.4f64, 0.5f64);
        let grid = [SlowPoint::new(t2, x2)];
        let u4 = wkb_amplitude(4, 1, &phase, &force, 0.0, &grid).unwrap();
        let (s_t, s_x) = (t2, 0.6 * x2);
        let (s_tt, s_xx) = (1.0, 0.6);
        let l = s_t * s_t - s_x * s_x - 1.0;
        let (l_t, l_x) = (2.0 * s_t * s_tt, -2.0 * s_x * s_xx);
        let f = force.eval(x1);
        let fpp = force.derivative(2, x1);
        let expected = c(0.0, 2.0) * f * (s_t * l_t - s_x * l_x) / (l * l * l)
            + 4.0 * s_x * s_x * fpp / (l * l * l)
            + c(0.0, s_xx - s_tt) * f / (l * l)
            + fpp / (l * l);
        let got = u4.eval(0, x1, &force);
        // The custom phase differentiates S by finite differences, so the
        // comparison tolerance is FD-limited rather than machine precision.
        assert!(
            (got - expected).norm() < 1e-6 * expected.norm(),
            "{got} vs {expected}"
        );
    }

    #[test]
    fn complex_force_is_rejected() {
        let phase = model();
        let force = ForceProfile::custom("exp(-y^2)", Some("0.3*exp(-y^2)"), 9.0).unwrap();
        let grid = [SlowPoint::new(0.7, 0.0)];
        let err = wkb_amplitude(2, 1, &phase, &force, 0.0, &grid).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn custom_phase_depth_cap_is_explicit() {
        // A custom phase supplies S-derivatives through order 3 only; a deep
        // truncation on it must fail with a clear message rather than use
        // garbage jets.
        let phase = PhaseSpec::custom("t2^2/2").unwrap();
        let force = gauss();
        let grid = [SlowPoint::new(0.7, 0.0)];
        let err = wkb_amplitude(6, 1, &phase, &force, 0.0, &grid).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        // The same truncation order is fine on the built-in equivalent.
        assert!(wkb_amplitude(6, 1, &model(), &force, 0.0, &grid).is_ok());
    }
}
