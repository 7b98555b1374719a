//! Post-resonance envelope: phase-set bookkeeping, matched initial data, and
//! the cubic Schrodinger evolution of the emitted wave packet.
//!
//! After the crossing the field is an O(eps) free wave riding the eikonal
//! carrier `exp(i Phi / eps^2)`, plus harmonic corrections riding integer
//! combinations `a Phi + b S` of the eikonal and driving phases.  This module
//! provides
//!
//! * [`phase_set`] - the combinatorics of which phases `a Phi + b S` appear at
//!   a given order `n` and logarithm index `k`;
//! * [`nlse_initial_data`] - resampling of the accumulated layer amplitude
//!   onto the envelope grid at the crossing;
//! * [`nlse_evolve`] - a Strang-split spectral solver for the envelope
//!   equation `2i Phi_t2 Psi_t2 + Psi_xixi + i (Phi_t2t2 - Phi_x2x2) Psi +
//!   g |Psi|^2 Psi = 0`;
//! * [`algebraic_envelope`] - the non-resonant harmonic amplitudes obtained by
//!   pointwise division by the eikonal prefactor.
//!
//! # Carrier orientation and scaling
//!
//! Expanding the field equation around the carrier `exp(+i Phi / eps^2)`
//! leaves a *negative* dispersion coefficient in the transverse coordinate.
//! The solver therefore works with the amplitude of the conjugate carrier
//! `exp(-i Phi / eps^2)` (for which the dispersion coefficient is `+1` after
//! the transverse coordinate is rescaled by [`EnvelopeGeometry::xi_scale`]),
//! and the physical field is reconstructed as
//!
//! ```text
//! u ~ eps * 2 Re[ conj(Psi) exp(+i Phi / eps^2) ].
//! ```
//!
//! In the same orientation the cubic coupling of the envelope equation is
//! `g = -3 gamma` in terms of the field equation's `gamma u^3`; see
//! [`cubic_coefficient`].

use std::collections::{BTreeSet, HashMap};

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::Error;
use crate::geometry::PhaseField;
use crate::layer::{AccumulatedAmplitude, PhaseConvention};
use crate::Result;

/// The envelope equation divides by `2 Phi_t2`; below this the eikonal
/// transport degenerates and the expansion is meaningless.
pub const PHI_T_MIN: f64 = 0.1;

/// Relative boundary decay required of a freshly constructed envelope:
/// `|Psi|` at the grid ends must be below `TOL_DECAY * max |Psi|`.
pub const TOL_DECAY: f64 = 1e-5;

/// Largest admissible relative spread of the frozen ray coefficients over the
/// slow window; beyond this the constant-coefficient envelope equation is not
/// an honest reduction of the gridded eikonal data.
pub const COEFF_SPREAD_MAX: f64 = 0.05;

/// Minimum number of envelope grid points.
pub const MIN_GRID: usize = 8;

/// Relative level at the physical grid ends that aborts the evolution: the
/// packet (or its radiation) has reached the boundary and the decayed-envelope
/// invariant is about to fail.
const BOUNDARY_GUARD: f64 = 1e-3;

/// Cubic coupling of the envelope equation in terms of the field equation's
/// `gamma u^3`.
///
/// The three ordered ways of drawing carriers `(+, +, -)` from `u^3` feed the
/// fundamental harmonic with weight `3 gamma`, and the orientation flip that
/// makes the dispersion coefficient `+1` (see the module docs) negates the
/// whole equation, so the envelope equation's coupling is `-3 gamma`.  A
/// *defocusing* field nonlinearity (`gamma < 0`) therefore gives a *focusing*
/// envelope equation - the regime that carries solitary waves.
pub fn cubic_coefficient(field_gamma: f64) -> f64 {
    -3.0 * field_gamma
}

// ---------------------------------------------------------------------------
// Phase sets
// ---------------------------------------------------------------------------

/// The set of phases `a Phi + b S` present at order `n`, logarithm index `k`.
///
/// Members are integer pairs `(a, b)`.  The base cases are
/// `K(1,0) = {+-Phi}`, `K(2,0) = {+-Phi, +-S}` and `K(3,1) = {+-Phi}`; every
/// other valid `(n, k)` is the union of element-wise triple sums
/// `alpha + beta + delta` over all index decompositions
/// `j1 + j2 + j3 = n`, `l1 + l2 + l3 = k` into valid lower indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseSet {
    pub n: usize,
    pub k: usize,
    pub members: BTreeSet<(i64, i64)>,
}

impl PhaseSet {
    /// The primed set: all members except the carrier pair `+-Phi`.
    pub fn prime(&self) -> BTreeSet<(i64, i64)> {
        let mut out = self.members.clone();
        out.remove(&(1, 0));
        out.remove(&(-1, 0));
        out
    }

    pub fn contains(&self, a: i64, b: i64) -> bool {
        self.members.contains(&(a, b))
    }

    /// True when `(a, b)` in the set implies `(-a, -b)` in the set.
    pub fn closed_under_negation(&self) -> bool {
        self.members.iter().all(|&(a, b)| self.members.contains(&(-a, -b)))
    }
}

/// Human-readable label for a phase pair, e.g. `(1,0) -> "Phi"`,
/// `(-2,1) -> "-2Phi+S"`, `(0,0) -> "0"`.
pub fn phase_label(chi: (i64, i64)) -> String {
    let (a, b) = chi;
    let mut out = String::new();
    let term = |c: i64, name: &str, lead: bool| -> String {
        if c == 0 {
            return String::new();
        }
        let sign = if c < 0 {
            "-"
        } else if lead {
            ""
        } else {
            "+"
        };
        let mag = c.abs();
        if mag == 1 {
            format!("{sign}{name}")
        } else {
            format!("{sign}{mag}{name}")
        }
    };
    out.push_str(&term(a, "Phi", true));
    out.push_str(&term(b, "S", out.is_empty()));
    if out.is_empty() {
        out.push('0');
    }
    out
}

fn set_is_base(n: usize, k: usize) -> bool {
    matches!((n, k), (1, 0) | (2, 0) | (3, 1))
}

fn set_is_valid(n: usize, k: usize) -> bool {
    set_is_base(n, k) || (n >= 2 && k + 2 <= n)
}

fn base_members(n: usize, k: usize) -> BTreeSet<(i64, i64)> {
    let mut s = BTreeSet::new();
    match (n, k) {
        (1, 0) | (3, 1) => {
            s.insert((1, 0));
            s.insert((-1, 0));
        }
        (2, 0) => {
            s.insert((1, 0));
            s.insert((-1, 0));
            s.insert((0, 1));
            s.insert((0, -1));
        }
        _ => unreachable!("not a base index"),
    }
    s
}

/// Computes the phase set for order `n` and logarithm index `k`.
///
/// Valid indices are the base cases plus any `n >= 2`, `0 <= k <= n - 2`;
/// anything else is a domain error.  Valid non-base indices whose
/// decompositions all involve undefined lower sets come out empty (the first
/// such are `(4, 1)` and `(4, 2)`).
pub fn phase_set(n: usize, k: usize) -> Result<PhaseSet> {
    if !set_is_valid(n, k) {
        return Err(Error::Validation(format!(
            "no phase set at order {n}, log index {k}: need a base case or 0 <= k <= n-2"
        )));
    }
    let mut memo: HashMap<(usize, usize), BTreeSet<(i64, i64)>> = HashMap::new();
    for nn in 1..=n {
        let k_hi = nn.saturating_sub(2).max(1);
        for kk in 0..=k_hi {
            if !set_is_valid(nn, kk) {
                continue;
            }
            let members = if set_is_base(nn, kk) {
                base_members(nn, kk)
            } else {
                let mut out = BTreeSet::new();
                for j1 in 1..=nn.saturating_sub(2) {
                    for j2 in 1..=(nn - j1).saturating_sub(1) {
                        let j3 = nn - j1 - j2;
                        for l1 in 0..=kk {
                            for l2 in 0..=(kk - l1) {
                                let l3 = kk - l1 - l2;
                                if !(set_is_valid(j1, l1)
                                    && set_is_valid(j2, l2)
                                    && set_is_valid(j3, l3))
                                {
                                    continue;
                                }
                                let s1 = &memo[&(j1, l1)];
                                let s2 = &memo[&(j2, l2)];
                                let s3 = &memo[&(j3, l3)];
                                for &(a1, b1) in s1 {
                                    for &(a2, b2) in s2 {
                                        for &(a3, b3) in s3 {
                                            out.insert((a1 + a2 + a3, b1 + b2 + b3));
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                out
            };
            memo.insert((nn, kk), members);
        }
    }
    Ok(PhaseSet {
        n,
        k,
        members: memo.remove(&(n, k)).unwrap_or_default(),
    })
}

// ---------------------------------------------------------------------------
// Ray geometry reduction
// ---------------------------------------------------------------------------

/// Frozen ray coefficients of the envelope equation over the slow window.
///
/// [`crate::geometry::solve_eikonal`] delivers `Phi` and its partials on a
/// grid; the envelope solver needs them constant (straight resonance curve,
/// affine `Phi`), so this type holds the means together with the worst
/// relative spread actually observed.  Construction fails when the spread
/// exceeds [`COEFF_SPREAD_MAX`] or the transport factor `Phi_t2` falls below
/// [`PHI_T_MIN`].
#[derive(Debug, Clone, Copy)]
pub struct EnvelopeGeometry {
    /// Mean `Phi_t2` (the transport factor the equation divides by).
    pub phi_t: f64,
    /// Mean `Phi_x2`.
    pub phi_x: f64,
    /// Mean `Phi_t2t2 - Phi_x2x2` (linear damping of the envelope).
    pub damping: f64,
    /// Mean dispersion coefficient of the raw transverse coordinate (the
    /// curve-arclength label `xi`); `-1` at the model phase.
    pub dispersion: f64,
    /// Jacobian `d(solver xi) / d(curve xi)`: the solver coordinate is the
    /// curve label stretched so the dispersion coefficient becomes `+1` in
    /// the conjugate-carrier orientation.
    pub xi_scale: f64,
    /// Slow time at which the rays leave the resonance curve.
    pub t2_crossing: f64,
    /// Worst relative spread among the frozen coefficients.
    pub spread: f64,
}

fn spread_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
        n += 1;
    }
    let mean = sum / n.max(1) as f64;
    ((hi - lo) / mean.abs().max(1.0), mean)
}

impl EnvelopeGeometry {
    /// Reduces a gridded eikonal phase to frozen ray coefficients.
    pub fn from_phase_field(field: &PhaseField) -> Result<Self> {
        let (sp_p, phi_t) = spread_of(field.phi_t.iter().copied());
        let (sp_q, phi_x) = spread_of(field.phi_x.iter().copied());
        let (sp_d, damping) = spread_of(field.damping.iter().copied());
        let (sp_c, dispersion) = spread_of(field.c_d.iter().copied());
        // Crossing time: walk each node back along its ray,
        // t2_foot = t2 - 2 Phi_t2 s.
        let nx = field.nx();
        let (sp_t, t2_crossing) = spread_of(
            field
                .ray_s
                .iter()
                .enumerate()
                .map(|(k, &s)| field.t2_axis[k / nx] - 2.0 * field.phi_t[k] * s),
        );
        let spread = sp_p.max(sp_q).max(sp_d).max(sp_c).max(sp_t);
        if field.phi_t.iter().any(|&p| p.abs() < PHI_T_MIN) {
            return Err(Error::DegeneratePhase(format!(
                "|Phi_t2| drops below {PHI_T_MIN} on the envelope window; \
                 the transport factor degenerates"
            )));
        }
        if spread > COEFF_SPREAD_MAX {
            return Err(Error::Validation(format!(
                "ray coefficients vary by {spread:.3} over the window \
                 (limit {COEFF_SPREAD_MAX}); the frozen-coefficient envelope \
                 equation does not apply"
            )));
        }
        Ok(Self {
            phi_t,
            phi_x,
            damping,
            dispersion,
            xi_scale: phi_t,
            t2_crossing,
            spread,
        })
    }

    /// Synthetic constant coefficients (for tests and idealized runs):
    /// `Phi_x2 = 0`, crossing at `t2 = 0`.
    pub fn uniform(phi_t: f64, damping: f64) -> Result<Self> {
        if phi_t.abs() < PHI_T_MIN {
            return Err(Error::DegeneratePhase(format!(
                "|Phi_t2| = {} is below {PHI_T_MIN}",
                phi_t.abs()
            )));
        }
        Ok(Self {
            phi_t,
            phi_x: 0.0,
            damping,
            dispersion: -1.0 / (phi_t * phi_t),
            xi_scale: phi_t,
            t2_crossing: 0.0,
            spread: 0.0,
        })
    }
}

// ---------------------------------------------------------------------------
// Envelope field
// ---------------------------------------------------------------------------

/// Complex envelope samples on a uniform transverse grid at one slow time.
#[derive(Debug, Clone)]
pub struct EnvelopeField {
    /// Uniform transverse grid (solver coordinate; see
    /// [`EnvelopeGeometry::xi_scale`]).
    pub xi: Vec<f64>,
    /// Slow time of this snapshot.
    pub t2: f64,
    /// Envelope samples (conjugate-carrier orientation; see module docs).
    pub values: Vec<Complex64>,
    /// Frozen ray coefficients governing the evolution.
    pub geometry: EnvelopeGeometry,
}

impl EnvelopeField {
    /// Validating constructor: uniform increasing grid, finite values, and
    /// boundary decay `|Psi(ends)| <= TOL_DECAY * max |Psi|`.
    pub fn new(
        xi: Vec<f64>,
        t2: f64,
        values: Vec<Complex64>,
        geometry: EnvelopeGeometry,
    ) -> Result<Self> {
        Self::assemble(xi, t2, values, geometry, TOL_DECAY)
    }

    fn assemble(
        xi: Vec<f64>,
        t2: f64,
        values: Vec<Complex64>,
        geometry: EnvelopeGeometry,
        decay_tol: f64,
    ) -> Result<Self> {
        if xi.len() != values.len() || xi.len() < MIN_GRID {
            return Err(Error::Validation(format!(
                "envelope grid needs at least {MIN_GRID} matching nodes, got {} xi / {} values",
                xi.len(),
                values.len()
            )));
        }
        let dx = xi[1] - xi[0];
        if !(dx > 0.0) {
            return Err(Error::Validation("envelope grid must increase".into()));
        }
        for i in 1..xi.len() {
            if ((xi[i] - xi[i - 1]) - dx).abs() > 1e-9 * dx.abs() {
                return Err(Error::Validation(format!(
                    "envelope grid must be uniform; node {i} breaks the spacing"
                )));
            }
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Validation("envelope values must be finite".into()));
        }
        let max = values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if max > 0.0 {
            let edge = values[0].norm().max(values[values.len() - 1].norm());
            if edge > decay_tol * max {
                return Err(Error::Validation(format!(
                    "envelope does not decay at the grid ends \
                     (edge/max = {:.2e}, limit {decay_tol:.0e}); enlarge the window",
                    edge / max
                )));
            }
        }
        Ok(Self {
            xi,
            t2,
            values,
            geometry,
        })
    }

    pub fn dx(&self) -> f64 {
        self.xi[1] - self.xi[0]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Trapezoid `int |Psi|^2 dxi`.
    pub fn mass(&self) -> f64 {
        let n = self.values.len();
        let sum: f64 = self.values.iter().map(|v| v.norm_sqr()).sum();
        let ends = 0.5 * (self.values[0].norm_sqr() + self.values[n - 1].norm_sqr());
        (sum - ends) * self.dx()
    }

    /// Trapezoid `int |Psi| dxi`.
    pub fn area(&self) -> f64 {
        let n = self.values.len();
        let sum: f64 = self.values.iter().map(|v| v.norm()).sum();
        let ends = 0.5 * (self.values[0].norm() + self.values[n - 1].norm());
        (sum - ends) * self.dx()
    }
}

// ---------------------------------------------------------------------------
// Matched initial data
// ---------------------------------------------------------------------------

/// Cubic Lagrange interpolation on an (at least piecewise) uniform grid,
/// clamped stencil at the ends; falls back to linear below four nodes.
fn resample_cubic(xs: &[f64], vs: &[Complex64], x: f64) -> Complex64 {
    let n = xs.len();
    if n < 4 {
        let hi = xs.partition_point(|&v| v < x).clamp(1, n - 1);
        let w = (x - xs[hi - 1]) / (xs[hi] - xs[hi - 1]);
        return vs[hi - 1] * (1.0 - w) + vs[hi] * w;
    }
    let hi = xs.partition_point(|&v| v < x).clamp(1, n - 1);
    let j0 = (hi - 1).saturating_sub(1).min(n - 4);
    let mut acc = Complex64::new(0.0, 0.0);
    for a in 0..4 {
        let mut w = 1.0;
        for b in 0..4 {
            if a != b {
                w *= (x - xs[j0 + b]) / (xs[j0 + a] - xs[j0 + b]);
            }
        }
        acc += vs[j0 + a] * w;
    }
    acc
}

/// Resamples the accumulated layer amplitude onto the envelope grid at the
/// crossing, converting it to the solver's conjugate-carrier orientation.
///
/// The target window is the source window scaled by
/// [`EnvelopeGeometry::xi_scale`] and widened by `margin` about its center to
/// leave room for the packet.  Target nodes outside the source are filled
/// with zeros, which is only honest when the source itself has decayed there:
/// otherwise this is a window-mismatch resampling error.
pub fn nlse_initial_data(
    acc: &AccumulatedAmplitude,
    field: &PhaseField,
    n_grid: usize,
    margin: f64,
) -> Result<EnvelopeField> {
    let geometry = EnvelopeGeometry::from_phase_field(field)?;
    if n_grid < MIN_GRID {
        return Err(Error::Validation(format!(
            "envelope grid needs at least {MIN_GRID} nodes, got {n_grid}"
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::Validation("margin must be positive".into()));
    }
    if acc.samples.len() < 2 {
        return Err(Error::Resampling(
            "need at least two accumulated samples to resample".into(),
        ));
    }
    let mut xs = acc.xi_grid();
    let mut vs = acc.values();
    // Solver orientation: the evolution acts on the conjugate-carrier
    // amplitude, so data accumulated against exp(+i S / eps^2) conjugates.
    // On top of that the transported far field carries a quarter turn -
    // the coefficient behind the crossing is -i s exp(-i s Lambda) times
    // the accumulated integral - so the matched envelope is i times the
    // oriented data in either convention.
    if acc.convention == PhaseConvention::Standard {
        for v in &mut vs {
            *v = Complex64::new(0.0, 1.0) * v.conj();
        }
    } else {
        for v in &mut vs {
            *v = Complex64::new(0.0, 1.0) * *v;
        }
    }
    // Solver coordinate.
    let scale = geometry.xi_scale;
    for x in &mut xs {
        *x *= scale;
    }
    if scale < 0.0 {
        xs.reverse();
        vs.reverse();
    }
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo) * margin;
    let max = vs.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let edge = vs[0].norm().max(vs[vs.len() - 1].norm());
    if margin > 1.0 && max > 0.0 && edge > TOL_DECAY * max {
        return Err(Error::Resampling(format!(
            "accumulated amplitude has not decayed at its window ends \
             (edge/max = {:.2e}); zero-extension would splice a jump - widen \
             the curve window or use margin <= 1",
            edge / max
        )));
    }
    let values: Vec<Complex64> = (0..n_grid)
        .map(|i| {
            let y = center - half + 2.0 * half * i as f64 / (n_grid - 1) as f64;
            if y < lo || y > hi {
                Complex64::new(0.0, 0.0)
            } else {
                resample_cubic(&xs, &vs, y)
            }
        })
        .collect();
    let xi: Vec<f64> = (0..n_grid)
        .map(|i| center - half + 2.0 * half * i as f64 / (n_grid - 1) as f64)
        .collect();
    EnvelopeField::new(xi, geometry.t2_crossing, values, geometry)
}

// ---------------------------------------------------------------------------
// Evolution
// ---------------------------------------------------------------------------

/// A sampled envelope trajectory.
#[derive(Debug, Clone)]
pub struct EnvelopeTrajectory {
    pub frames: Vec<EnvelopeField>,
    /// Step actually used (the requested step rounded to divide the span).
    pub dt2: f64,
    /// Cubic coupling of the envelope equation used for the run.
    pub gamma: f64,
}

impl EnvelopeTrajectory {
    pub fn last(&self) -> &EnvelopeField {
        self.frames.last().expect("trajectory has at least one frame")
    }
}

/// Evolves the envelope equation
///
/// ```text
/// 2i p Psi_t2 + Psi_xixi + i d Psi + g |Psi|^2 Psi = 0,
/// p = Phi_t2,  d = Phi_t2t2 - Phi_x2x2,
/// ```
///
/// by Strang splitting: a spectral half step of the linear part (second
/// derivative plus damping) on a zero-padded periodic extension (padding
/// factor 2, tapered in the outer half of each pad), then an exact pointwise
/// phase rotation for the cubic term, then another linear half step.  Saves
/// `n_save` frames including the initial and final states.
///
/// Errors: the packet reaching the physical grid ends is a domain overflow
/// (`Validation`); non-finite growth is `BlowUp`.
pub fn nlse_evolve(
    init: &EnvelopeField,
    t2_end: f64,
    dt2: f64,
    gamma: f64,
    n_save: usize,
) -> Result<EnvelopeTrajectory> {
    let span = t2_end - init.t2;
    if span < 0.0 {
        return Err(Error::Validation(format!(
            "t2_end = {t2_end} precedes the initial time {}",
            init.t2
        )));
    }
    if span == 0.0 {
        return Ok(EnvelopeTrajectory {
            frames: vec![init.clone()],
            dt2: 0.0,
            gamma,
        });
    }
    if !(dt2 > 0.0) {
        return Err(Error::Validation("dt2 must be positive".into()));
    }
    let p = init.geometry.phi_t;
    let d = init.geometry.damping;
    let n_steps = (span / dt2).ceil().max(1.0) as usize;
    let h = span / n_steps as f64;

    let n = init.values.len();
    let m = 2 * n; // padded length
    let off = n / 2;
    let dx = init.dx();

    // Half-step linear factors exp(-(i k^2 + d) h / (4 p)) on the padded grid.
    let mut factors = Vec::with_capacity(m);
    for j in 0..m {
        let freq = if j <= m / 2 { j as f64 } else { j as f64 - m as f64 };
        let kappa = 2.0 * std::f64::consts::PI * freq / (m as f64 * dx);
        let lin = Complex64::new(-d, -kappa * kappa) * (0.5 * h / (2.0 * p));
        factors.push(lin.exp());
    }
    // Taper: cos^2 ramp to zero over the outer half of each pad wing.
    let mut taper = vec![1.0f64; m];
    let wing = off / 2;
    for j in 0..wing.max(1) {
        let u = j as f64 / wing.max(1) as f64; // 0 at the box edge
        let w = (0.5 * std::f64::consts::PI * u).sin().powi(2);
        taper[j] = w;
        taper[m - 1 - j] = w;
    }

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let inv_norm = 1.0 / m as f64;

    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    buf[off..off + n].copy_from_slice(&init.values);

    let ref_max = init.max_abs();
    let mut frames: Vec<EnvelopeField> = vec![init.clone()];
    let save_every = |step: usize| -> bool {
        if n_save <= 2 {
            return false;
        }
        let k = (step as u128 * (n_save as u128 - 1)) % n_steps as u128;
        k < (n_save as u128 - 1) && step != n_steps
    };

    let linear_half = |buf: &mut Vec<Complex64>| {
        fwd.process(buf);
        for (v, &f) in buf.iter_mut().zip(&factors) {
            *v *= f;
        }
        inv.process(buf);
        for (v, &t) in buf.iter_mut().zip(&taper) {
            *v *= t * inv_norm;
        }
    };

    for step in 1..=n_steps {
        linear_half(&mut buf);
        for v in buf.iter_mut() {
            let rot = Complex64::new(0.0, gamma * v.norm_sqr() * h / (2.0 * p)).exp();
            *v *= rot;
        }
        linear_half(&mut buf);

        if ref_max > 0.0 {
            let phys = &buf[off..off + n];
            let max = phys.iter().map(|v| v.norm()).fold(0.0, f64::max);
            if !max.is_finite() || max > 1e6 * ref_max {
                return Err(Error::BlowUp(format!(
                    "envelope grew beyond 1e6 x its initial size at t2 = {}",
                    init.t2 + step as f64 * h
                )));
            }
            let edge = phys[0].norm().max(phys[n - 1].norm());
            if edge > BOUNDARY_GUARD * max {
                return Err(Error::Validation(format!(
                    "packet reached the grid boundary at t2 = {:.4} \
                     (edge/max = {:.2e}); enlarge the window",
                    init.t2 + step as f64 * h,
                    edge / max
                )));
            }
        }

        if step == n_steps || save_every(step) {
            frames.push(EnvelopeField::assemble(
                init.xi.clone(),
                init.t2 + step as f64 * h,
                buf[off..off + n].to_vec(),
                init.geometry,
                BOUNDARY_GUARD,
            )?);
        }
    }

    Ok(EnvelopeTrajectory {
        frames,
        dt2: h,
        gamma,
    })
}

// ---------------------------------------------------------------------------
// Algebraic harmonics
// ---------------------------------------------------------------------------

/// Eikonal prefactor `-(chi_t2)^2 + (chi_x2)^2 + 1` of the phase
/// `chi = a Phi + b S`, with the driving-phase gradient `(s_t, s_x)` supplied
/// at the evaluation point.
pub fn chi_prefactor(
    chi: (i64, i64),
    geometry: &EnvelopeGeometry,
    s_t: f64,
    s_x: f64,
) -> f64 {
    let (a, b) = (chi.0 as f64, chi.1 as f64);
    let ct = a * geometry.phi_t + b * s_t;
    let cx = a * geometry.phi_x + b * s_x;
    -ct * ct + cx * cx + 1.0
}

/// Solves the non-resonant harmonic equation
/// `[-(chi_t2)^2 + (chi_x2)^2 + 1] Psi_chi = F_chi` by pointwise division.
///
/// `rhs` is the assembled right-hand side `F_chi` (cubic contributions enter
/// it as `-gamma` times ordered triple products of lower amplitudes).  The
/// carrier pair `chi = +-Phi` satisfies the eikonal equation, so its
/// prefactor vanishes identically and the division is refused; any other
/// `chi` whose prefactor degenerates numerically is refused as well.
pub fn algebraic_envelope(
    chi: (i64, i64),
    rhs: &[Complex64],
    geometry: &EnvelopeGeometry,
    s_t: f64,
    s_x: f64,
) -> Result<Vec<Complex64>> {
    if chi == (1, 0) || chi == (-1, 0) {
        return Err(Error::DegeneratePhase(format!(
            "chi = {} rides the eikonal carrier; its prefactor vanishes \
             identically and the amplitude is not algebraic",
            phase_label(chi)
        )));
    }
    let pref = chi_prefactor(chi, geometry, s_t, s_x);
    if pref.abs() < 1e-9 {
        return Err(Error::DegeneratePhase(format!(
            "prefactor of chi = {} degenerates ({pref:.2e}) at this point",
            phase_label(chi)
        )));
    }
    Ok(rhs.iter().map(|&v| v / pref).collect())
}

// ---------------------------------------------------------------------------
