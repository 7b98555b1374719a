//! Transport solver for the resonance-layer coefficients.
//!
//! Inside the crossing layer the field's envelope coefficients ride along
//! the characteristics of [`crate::geometry`]; each one obeys the transport
//! equation
//!
//! ```text
//! i dW/dsigma - lambda(sigma) W = source(sigma)
//! ```
//!
//! with a decay condition far on the approach side (`lambda -> -infinity`).
//! The solver marches the Duhamel form
//! `W = -i e^{-i Lambda} int source e^{+i Lambda} dsigma`
//! (`Lambda = int_0^sigma lambda`) as a cumulative oscillatory integral on
//! panels sized by phase advance. The decay condition is imposed by seeding
//! the march with the integration-by-parts tail series at the most negative
//! reachable `sigma` instead of a bare zero, which removes the
//! `O(1/lambda_cut)` bias of a hard cutoff. The `-i` prefactor in the
//! Duhamel form is fixed by requiring the differenced transport residual to
//! vanish, which [`transport_solve`] enforces on every solve.
//!
//! Provided coefficients: the leading order (`n = 1, k = 1`, driven by the
//! force restricted to the characteristic), the first correction
//! (`n = 2, k = 1`, driven by second fast derivatives, the phase-curvature
//! term, and the cubic self-interaction), and the algebraic third harmonic
//! (`n = 3, k = 3`). [`accumulated_amplitude`] integrates the leading-order
//! source across the whole crossing; its value seeds the post-resonance
//! envelope.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::Error;
use crate::force::ForceProfile;
use crate::geometry::{integrate_characteristic, CharOptions, Characteristic, ResonanceCurve};
use crate::ode::{self, OdeOptions};
use crate::quad;
use crate::Result;

/// Relative scale for the differenced transport residual: every quadrature
/// solve must satisfy `residual < 10 * TOL_TRANSPORT * scale` where `scale`
/// covers the solution and source magnitudes. The differencing stencil's
/// own truncation error sits near `1e-7 * scale`, two decades below the
/// gate, while a sign or term error in the Duhamel form lands orders of
/// magnitude above it.
pub const TOL_TRANSPORT: f64 = 1e-6;

/// `|lambda|` beyond which the integration-by-parts tail takes over from
/// quadrature when estimating the full-line integral.
pub const LAMBDA_MATCH: f64 = 20.0;

/// Samples with `|lambda|` above this are considered "in the tail" when a
/// tail window is selected.
pub const LAMBDA_TAIL_MIN: f64 = 2.5;

/// Maximum number of integration-by-parts series terms: term `j` consumes
/// `j` sigma-derivatives of the force and of `lambda`, and the jets carried
/// by [`Characteristic`] stop at second derivatives.
pub const SERIES_TERMS_MAX: usize = 3;

/// Minimum `|lambda|` reach on each side for a transport solve.
const SPAN_MIN: f64 = 2.5;

/// Per-panel tolerances of the marched quadrature. The absolute floor sits
/// above the evaluation noise of composed sources (the first-correction
/// right-hand side is itself assembled from partial-panel quadrature, noisy
/// at ~1e-14); accumulated over the ~10^3 panels of a span this costs
/// ~1e-10 absolute, well under every downstream gate.
const RTOL_MARCH: f64 = 1e-12;
const ATOL_MARCH: f64 = 1e-13;

/// Sign convention of the layer carrier.
///
/// [`PhaseConvention::Standard`] solves `i dW/dsigma - lambda W = source`;
/// [`PhaseConvention::Conjugate`] solves the conjugated equation
/// `-i dW/dsigma - lambda W = source`, i.e. it flips the global sign of
/// `Lambda` in the carrier. For a real force the two solutions are complex
/// conjugates, so every modulus-level statement is convention-invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseConvention {
    Standard,
    Conjugate,
}

impl PhaseConvention {
    /// `+1` for the standard carrier, `-1` for the conjugated one.
    pub fn sign(self) -> f64 {
        match self {
            PhaseConvention::Standard => 1.0,
            PhaseConvention::Conjugate => -1.0,
        }
    }
}

/// One layer coefficient `W^n_k` sampled along a single characteristic.
#[derive(Debug, Clone)]
pub struct LayerCoefficient {
    /// Order in the layer expansion.
    pub n: usize,
    /// Harmonic of the carrier.
    pub k: i64,
    /// Curve parameter of the characteristic it lives on.
    pub xi: f64,
    pub epsilon: f64,
    /// Crossing rate at the characteristic's origin.
    pub phi: f64,
    pub convention: PhaseConvention,
    /// Sample parameters along the characteristic.
    pub sigma: Vec<f64>,
    /// `lambda(sigma_j)`.
    pub lambda: Vec<f64>,
    /// `Lambda(sigma_j) = int_0^sigma lambda`.
    pub capital_lambda: Vec<f64>,
    /// `W^n_k(sigma_j)`.
    pub values: Vec<Complex64>,
    /// Demodulated amplitude `C(sigma_j)` with `W = -i s e^{-i s Lambda} C`
    /// (`s` the convention sign); for a transported coefficient this is the
    /// cumulative source integral, which is the natural variable for
    /// plateau and secular-growth analysis.
    pub amplitude: Vec<Complex64>,
    /// Transport source samples (the forcing for `n = 1`, the assembled
    /// right-hand side for `n = 2`, the scaled cube for `n = 3`).
    pub source: Vec<Complex64>,
    /// Largest differenced transport residual found at the interior
    /// checkpoints (zero for algebraic coefficients and for the
    /// Runge-Kutta cross-check, which is validated by comparison instead).
    pub residual_max: f64,
}

impl LayerCoefficient {
    /// The conjugate-harmonic partner `W^n_{-k} = conj(W^n_k)`.
    pub fn conjugate(&self) -> LayerCoefficient {
        LayerCoefficient {
            n: self.n,
            k: -self.k,
            xi: self.xi,
            epsilon: self.epsilon,
            phi: self.phi,
            convention: self.convention,
            sigma: self.sigma.clone(),
            lambda: self.lambda.clone(),
            capital_lambda: self.capital_lambda.clone(),
            values: self.values.iter().map(|w| w.conj()).collect(),
            amplitude: self.amplitude.iter().map(|c| c.conj()).collect(),
            source: self.source.iter().map(|f| f.conj()).collect(),
            residual_max: self.residual_max,
        }
    }

    /// Largest `|W|` over the samples.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|w| w.norm()).fold(0.0, f64::max)
    }
}

/// Builds the sigma sampling grid: steps bounded by a quarter-pi phase
/// advance of the carrier (`|lambda| dsigma <= pi/4`) and by an absolute
/// cap, with a node snapped onto the crossing itself.
fn sigma_grid(ch: &Characteristic) -> Vec<f64> {
    let mut grid = vec![ch.sigma_min];
    let mut sig = ch.sigma_min;
    while sig < ch.sigma_max {
        let rate = 1.0 + ch.lambda(sig).abs();
        let step = (PI / (4.0 * rate)).clamp(1e-4, 0.25);
        let mut next = (sig + step).min(ch.sigma_max);
        if sig < 0.0 && next > 0.0 {
            next = 0.0;
        }
        grid.push(next);
        sig = next;
    }
    grid
}

fn span_check(ch: &Characteristic) -> Result<()> {
    if ch.lambda_min > -SPAN_MIN || ch.lambda_max < SPAN_MIN {
        return Err(Error::Span(format!(
            "characteristic reaches lambda in [{:.2}, {:.2}]; the transport \
             solve needs at least [-{}, {}] — widen lambda_span",
            ch.lambda_min, ch.lambda_max, SPAN_MIN, SPAN_MIN
        )));
    }
    Ok(())
}

/// The marched cumulative integral: amplitude `C` at every grid node, with
/// partial-panel evaluation anywhere in between.
struct Transported<'a, S: Fn(f64) -> Complex64> {
    ch: &'a Characteristic,
    sign: f64,
    source: S,
    grid: Vec<f64>,
    c: Vec<Complex64>,
}

impl<'a, S: Fn(f64) -> Complex64> Transported<'a, S> {
    fn build(
        ch: &'a Characteristic,
        convention: PhaseConvention,
        source: S,
        w_start: Complex64,
    ) -> Result<Self> {
        let sign = convention.sign();
        let grid = sigma_grid(ch);
        let cap = |sig: f64| ch.state(sig).capital_lambda;
        // W = -i s e^{-i s Lambda} C  =>  C = i s W e^{+i s Lambda}.
        let c0 = Complex64::new(0.0, sign) * w_start * phasor(sign * cap(grid[0]));
        let mut c = Vec::with_capacity(grid.len());
        c.push(c0);
        for j in 1..grid.len() {
            let q = quad::integrate(
                |z| source(z) * phasor(sign * cap(z)),
                grid[j - 1],
                grid[j],
                RTOL_MARCH,
                ATOL_MARCH,
                400,
            )?;
            let prev = c[j - 1];
            c.push(prev + q.value);
        }
        Ok(Transported {
            ch,
            sign,
            source,
            grid,
            c,
        })
    }

    /// `C(sigma)` anywhere on the span.
    fn amplitude(&self, sigma: f64) -> Complex64 {
        let j = self
            .grid
            .partition_point(|&g| g <= sigma)
            .saturating_sub(1)
            .min(self.grid.len() - 2);
        let cap = |sig: f64| self.ch.state(sig).capital_lambda;
        let q = quad::integrate(
            |z| (self.source)(z) * phasor(self.sign * cap(z)),
            self.grid[j],
            sigma,
            RTOL_MARCH,
            ATOL_MARCH,
            400,
        )
        .expect("partial-panel quadrature inside a marched span");
        self.c[j] + q.value
    }

    /// `W(sigma)` anywhere on the span.
    fn w(&self, sigma: f64) -> Complex64 {
        let cap = self.ch.state(sigma).capital_lambda;
        -Complex64::new(0.0, self.sign) * phasor(-self.sign * cap) * self.amplitude(sigma)
    }

    /// Snapshot into a [`LayerCoefficient`], running the differenced
    /// transport-residual check at interior checkpoints.
    fn snapshot(&self, n: usize, k: i64, convention: PhaseConvention) -> Result<LayerCoefficient> {
        let m = self.grid.len();
        let mut lambda = Vec::with_capacity(m);
        let mut capital = Vec::with_capacity(m);
        let mut values = Vec::with_capacity(m);
        let mut source = Vec::with_capacity(m);
        for (j, &sig) in self.grid.iter().enumerate() {
            let cap = self.ch.state(sig).capital_lambda;
            lambda.push(self.ch.lambda(sig));
            capital.push(cap);
            values.push(-Complex64::new(0.0, self.sign) * phasor(-self.sign * cap) * self.c[j]);
            source.push((self.source)(sig));
        }

        let scale = 1e-12
            + values.iter().map(|w| w.norm()).fold(0.0, f64::max)
            + source.iter().map(|f| f.norm()).fold(0.0, f64::max);
        let mut residual_max = 0.0_f64;
        if m > 8 {
            let stride = ((m - 4) / 25).max(1);
            let mut idx = 2;
            while idx < m - 2 {
                let sig = self.grid[idx];
                let head = (sig - self.grid[0]) / 3.0;
                let tail = (self.grid[m - 1] - sig) / 3.0;
                let h = (0.02 / (1.0 + lambda[idx].abs())).min(head).min(tail);
                if h > 1e-9 {
                    // Fourth-order centered first derivative.
                    let wp = (-self.w(sig + 2.0 * h) + 8.0 * self.w(sig + h)
                        - 8.0 * self.w(sig - h)
                        + self.w(sig - 2.0 * h))
                        / (12.0 * h);
                    let r = Complex64::new(0.0, self.sign) * wp
                        - lambda[idx] * values[idx]
                        - source[idx];
                    residual_max = residual_max.max(r.norm());
                }
                idx += stride;
            }
            if residual_max > 10.0 * TOL_TRANSPORT * scale {
                return Err(Error::Ode(format!(
                    "transport residual {:.3e} exceeds {:.3e}; the Duhamel \
                     march does not satisfy the transport equation",
                    residual_max,
                    10.0 * TOL_TRANSPORT * scale
                )));
            }
        }

        Ok(LayerCoefficient {
            n,
            k,
            xi: self.ch.xi,
            epsilon: self.ch.epsilon,
            phi: self.ch.phi,
            convention,
            sigma: self.grid.clone(),
            lambda,
            capital_lambda: capital,
            values,
            amplitude: self.c.clone(),
            source,
            residual_max,
        })
    }
}

/// `e^{i theta}` for real `theta`.
fn phasor(theta: f64) -> Complex64 {
    Complex64::new(0.0, theta).exp()
}

/// Solves the transport equation along `ch` for an arbitrary source by the
/// marched Duhamel quadrature, with `w_start` prescribing the solution at
/// the most negative reachable sigma. Enforces the differenced-residual
/// invariant.
pub fn transport_solve<S: Fn(f64) -> Complex64>(
    ch: &Characteristic,
    n: usize,
    k: i64,
    source: S,
    w_start: Complex64,
    convention: PhaseConvention,
) -> Result<LayerCoefficient> {
    span_check(ch)?;
    let tr = Transported::build(ch, convention, source, w_start)?;
    tr.snapshot(n, k, convention)
}

/// The integration-by-parts series value of the leading coefficient at
/// `sigma`, from the force and `lambda` jets: term 0 is `-F/lambda`, each
/// further term is `(i s / lambda) d(previous)/dsigma`. Valid in the tails
/// where `|lambda|` is large.
pub fn layer_series_value(
    ch: &Characteristic,
    force: &ForceProfile,
    sigma: f64,
    terms: usize,
    convention: PhaseConvention,
) -> Result<Complex64> {
    let lj = ch.lambda_jet(sigma);
    if lj[0].abs() < 1.5 {
        return Err(Error::Validation(format!(
            "integration-by-parts series requested at |lambda| = {:.2}; it \
             is an asymptotic tail form and needs |lambda| well above 1",
            lj[0].abs()
        )));
    }
    let fj = ch.force_jet(sigma, force);
    series_from_jets(&fj, &lj, terms, convention.sign())
}

fn series_from_jets(
    fj: &[Complex64; 3],
    lj: &[f64; 3],
    terms: usize,
    sign: f64,
) -> Result<Complex64> {
    if terms == 0 || terms > SERIES_TERMS_MAX {
        return Err(Error::Validation(format!(
            "tail series supports 1..={} terms (term j consumes j \
             derivatives of the force and of lambda; the characteristic \
             jets stop at second derivatives), got {}",
            SERIES_TERMS_MAX, terms
        )));
    }
    let (f0, f1, f2) = (fj[0], fj[1], fj[2]);
    let (l0, l1, l2) = (lj[0], lj[1], lj[2]);
    let is = Complex64::new(0.0, sign);
    let t0 = -f0 / l0;
    if terms == 1 {
        return Ok(t0);
    }
    let t0p = -f1 / l0 + f0 * l1 / (l0 * l0);
    let t1 = is * t0p / l0;
    if terms == 2 {
        return Ok(t0 + t1);
    }
    let t0pp = -f2 / l0 + 2.0 * f1 * l1 / (l0 * l0) + f0 * l2 / (l0 * l0)
        - 2.0 * f0 * l1 * l1 / (l0 * l0 * l0);
    let t1p = is * (t0pp / l0 - t0p * l1 / (l0 * l0));
    let t2 = is * t1p / l0;
    Ok(t0 + t1 + t2)
}

/// Integration-by-parts estimate of `int_sigma^{+inf} F e^{i s Lambda}`,
/// the amplitude still to be accumulated beyond the reachable span (two
/// boundary terms; error `O(phi^2 F / lambda^5)`).
fn ibp_remainder(
    ch: &Characteristic,
    force: &ForceProfile,
    sigma: f64,
    convention: PhaseConvention,
) -> Complex64 {
    let sign = convention.sign();
    let is = Complex64::new(0.0, sign);
    let fj = ch.force_jet(sigma, force);
    let lj = ch.lambda_jet(sigma);
    let e = phasor(sign * ch.state(sigma).capital_lambda);
    let b1 = is * fj[0] * e / lj[0];
    let b2 = (fj[1] * lj[0] - fj[0] * lj[1]) * e / (lj[0] * lj[0] * lj[0]);
    b1 - b2
}

/// Leading-order coefficient `W^1_1`: the transported force.
pub fn layer_leading(
    ch: &Characteristic,
    force: &ForceProfile,
    convention: PhaseConvention,
) -> Result<LayerCoefficient> {
    span_check(ch)?;
    let w0 = layer_series_value(ch, force, ch.sigma_min, SERIES_TERMS_MAX, convention)?;
    let src = |sig: f64| force.eval(ch.state(sig).x1);
    transport_solve(ch, 1, 1, src, w0, convention)
}

/// Independent cross-check of [`layer_leading`]: the same start value and
/// source, propagated by the adaptive Runge-Kutta integrator instead of
/// cumulative quadrature. Sampled on the same grid so results zip.
pub fn layer_leading_ode(
    ch: &Characteristic,
    force: &ForceProfile,
    convention: PhaseConvention,
) -> Result<LayerCoefficient> {
    span_check(ch)?;
    let w0 = layer_series_value(ch, force, ch.sigma_min, SERIES_TERMS_MAX, convention)?;
    let src = |sig: f64| force.eval(ch.state(sig).x1);
    ode_propagate(ch, 1, 1, &src, w0, convention)
}

fn ode_propagate(
    ch: &Characteristic,
    n: usize,
    k: i64,
    source: &dyn Fn(f64) -> Complex64,
    w_start: Complex64,
    convention: PhaseConvention,
) -> Result<LayerCoefficient> {
    let sign = convention.sign();
    let rhs = |sig: f64, y: &[f64], dy: &mut [f64]| {
        let lam = ch.lambda(sig);
        let f = source(sig);
        let w = Complex64::new(y[0], y[1]);
        // i s W' - lambda W = F  =>  W' = -i s (lambda W + F).
        let wp = -Complex64::new(0.0, sign) * (lam * w + f);
        dy[0] = wp.re;
        dy[1] = wp.im;
    };
    let opts = OdeOptions {
        rtol: 1e-10,
        atol: 1e-13,
        max_step: 0.05,
        max_steps: 5_000_000,
    };
    let sol = ode::integrate(rhs, ch.sigma_min, ch.sigma_max, &[w_start.re, w_start.im], &opts)?;

    let grid = sigma_grid(ch);
    let mut lambda = Vec::with_capacity(grid.len());
    let mut capital = Vec::with_capacity(grid.len());
    let mut values = Vec::with_capacity(grid.len());
    let mut amplitude = Vec::with_capacity(grid.len());
    let mut src_samples = Vec::with_capacity(grid.len());
    for &sig in &grid {
        let y = sol.eval(sig);
        let w = Complex64::new(y[0], y[1]);
        let cap = ch.state(sig).capital_lambda;
        lambda.push(ch.lambda(sig));
        capital.push(cap);
        values.push(w);
        amplitude.push(Complex64::new(0.0, sign) * w * phasor(sign * cap));
        src_samples.push(source(sig));
    }
    Ok(LayerCoefficient {
        n,
        k,
        xi: ch.xi,
        epsilon: ch.epsilon,
        phi: ch.phi,
        convention,
        sigma: grid,
        lambda,
        capital_lambda: capital,
        values,
        amplitude,
        source: src_samples,
        residual_max: 0.0,
    })
}

/// Assembles the first-correction source and its series-matched start.
///
/// Supported class: characteristics with frozen `x1` (no spatial phase
/// tilt), where the force is constant along the ray and all transverse
/// structure of the leading order factors through the force profile. The
/// source is
///
/// ```text
/// R = -[ d2_t1 W - d2_x1 W + i s (S_tt - S_xx) W ] - 3 gamma |W|^2 W ,
/// ```
///
/// with `d2_t1` taken along the ray by the chain rule
/// `d/dt1 = (1 / 2 S_t) d/dsigma` and `d2_x1 W = f''(xi) W_unit`.
fn correction_source<'a>(
    ch: &'a Characteristic,
    force: &ForceProfile,
    gamma: f64,
    convention: PhaseConvention,
) -> Result<(impl Fn(f64) -> Complex64 + 'a, Complex64)> {
    let x1_mid = ch.state(0.0).x1;
    let drift = (ch.state(ch.sigma_min).x1 - x1_mid)
        .abs()
        .max((ch.state(ch.sigma_max).x1 - x1_mid).abs());
    if drift > 1e-8 * (1.0 + x1_mid.abs()) {
        return Err(Error::Validation(format!(
            "first correction supports frozen-ray characteristics (x1 \
             constant along the ray); this one drifts by {:.3e}. Spatially \
             tilted phases need the transverse fan, which the leading order \
             and the accumulated amplitude already cover.",
            drift
        )));
    }
    if force.max_derivative_order() < 2 {
        return Err(Error::Dependency(
            "first correction needs two force derivatives for the \
             transverse term f''(xi) W_unit"
                .into(),
        ));
    }
    // The chain rule divides by the characteristic speed 2 S_t; reject
    // rays that come close to stalling. (On a saturation-limited approach
    // S_t is small but fixed -- e.g. ~0.14 for the chirped model -- and
    // the solve is well conditioned there.)
    for probe in [ch.sigma_min, 0.0, ch.sigma_max] {
        let p = ch.slow_point(probe);
        if ch.phase().s_t(p.t2, p.x2).abs() < 0.05 {
            return Err(Error::DegeneratePhase(format!(
                "characteristic speed 2 S_t = {:.3e} too small at sigma = \
                 {:.2} for the along-ray chain rule",
                2.0 * ch.phase().s_t(p.t2, p.x2),
                probe
            )));
        }
    }

    let sign = convention.sign();
    let is = Complex64::new(0.0, sign);
    let f0 = force.eval(x1_mid);
    let f2 = force.derivative(2, x1_mid);
    let eps = ch.epsilon;

    let unit = [
        Complex64::new(1.0, 0.0),
        Complex64::new(0.0, 0.0),
        Complex64::new(0.0, 0.0),
    ];
    let unit_start = series_from_jets(&unit, &ch.lambda_jet(ch.sigma_min), SERIES_TERMS_MAX, sign)?;
    let tr_unit = Transported::build(ch, convention, |_| Complex64::new(1.0, 0.0), unit_start)?;

    let src = move |sig: f64| -> Complex64 {
        let wu = tr_unit.w(sig);
        let w = f0 * wu;
        let lj = tr_unit.ch.lambda_jet(sig);
        // Along-ray derivatives via the transport equation itself:
        // W' = -i s (lambda W + F), F constant on a frozen ray.
        let w1 = -is * (lj[0] * w + f0);
        let w2 = -is * (lj[1] * w + lj[0] * w1);
        let p = tr_unit.ch.slow_point(sig);
        let ph = tr_unit.ch.phase();
        let st = ph.s_t(p.t2, p.x2);
        let stt = ph.s_tt(p.t2, p.x2);
        let sxx = ph.s_xx(p.t2, p.x2);
        let lt = ph.l_t(p.t2, p.x2);
        // d2/dt1^2 = (1/4 S_t^2) d2/dsigma^2 - (eps l_t / 4 S_t^3) d/dsigma.
        let dtt = w2 / (4.0 * st * st) - eps * lt * w1 / (4.0 * st * st * st);
        let dxx = f2 * wu;
        let curvature = is * (stt - sxx) * w;
        let cubic = 3.0 * gamma * w.norm_sqr() * w;
        -(dtt - dxx + curvature) - cubic
    };

    let w0 = -src(ch.sigma_min) / ch.lambda(ch.sigma_min);
    Ok((src, w0))
}

/// First correction `W^2_1` along a frozen-ray characteristic.
pub fn layer_first_correction(
    ch: &Characteristic,
    force: &ForceProfile,
    gamma: f64,
    convention: PhaseConvention,
) -> Result<LayerCoefficient> {
    span_check(ch)?;
    let (src, w0) = correction_source(ch, force, gamma, convention)?;
    transport_solve(ch, 2, 1, src, w0, convention)
}

/// Independent Runge-Kutta cross-check of [`layer_first_correction`]:
/// shares the assembled source and start value, differs in propagation.
pub fn layer_first_correction_ode(
    ch: &Characteristic,
    force: &ForceProfile,
    gamma: f64,
    convention: PhaseConvention,
) -> Result<LayerCoefficient> {
    span_check(ch)?;
    let (src, w0) = correction_source(ch, force, gamma, convention)?;
    ode_propagate(ch, 2, 1, &src, w0, convention)
}

/// Algebraic third harmonic `W^3_3 = (gamma / 8) (W^1_1)^3`, evaluated
/// pointwise on the leading coefficient's samples. The divisor `8` is the
/// harmonic symbol `k^2 - 1` at `k = 3`.
pub fn third_harmonic(leading: &LayerCoefficient, gamma: f64) -> LayerCoefficient {
    let sign = leading.convention.sign();
    let is = Complex64::new(0.0, sign);
    let mut values = Vec::with_capacity(leading.values.len());
    let mut amplitude = Vec::with_capacity(leading.values.len());
    let mut source = Vec::with_capacity(leading.values.len());
    for (&w, &cap) in leading.values.iter().zip(&leading.capital_lambda) {
        let cube = gamma * w * w * w;
        let v = cube / 8.0;
        values.push(v);
        // Carrier of k = 3 is e^{-3 i s Lambda}.
        amplitude.push(is * v * phasor(3.0 * sign * cap));
        source.push(cube);
    }
    LayerCoefficient {
        n: 3,
        k: 3,
        xi: leading.xi,
        epsilon: leading.epsilon,
        phi: leading.phi,
        convention: leading.convention,
        sigma: leading.sigma.clone(),
        lambda: leading.lambda.clone(),
        capital_lambda: leading.capital_lambda.clone(),
        values,
        amplitude,
        source,
        residual_max: 0.0,
    }
}

/// Which tail of the characteristic to compare against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailSide {
    /// Approach side, `lambda -> -infinity`: pure integration-by-parts
    /// series.
    Minus,
    /// Departure side, `lambda -> +infinity`: oscillatory plateau plus the
    /// same decaying series.
    Plus,
}

/// Tail comparison of a quadrature solution against its asymptotic form.
#[derive(Debug, Clone)]
pub struct TailSeries {
    pub side: TailSide,
    pub terms: usize,
    pub sigma: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Asymptotic-form values at the samples.
    pub series: Vec<Complex64>,
    /// Relative deviation `|W - series| / |series|` per sample.
    pub deviation: Vec<f64>,
    /// Plus side only: per-sample estimates of the accumulated amplitude
    /// obtained by subtracting the decaying series and demodulating; their
    /// spread measures how flat the plateau is.
    pub plateau: Vec<Complex64>,
}

/// Evaluates the tail form of the leading coefficient on the requested
/// side and its pointwise deviation from the quadrature solution.
pub fn layer_tail_series(
    coef: &LayerCoefficient,
    ch: &Characteristic,
    force: &ForceProfile,
    side: TailSide,
    terms: usize,
) -> Result<TailSeries> {
    if coef.n != 1 || coef.k != 1 {
        return Err(Error::Validation(format!(
            "tail series is defined for the leading coefficient (n = 1, \
             k = 1), got (n = {}, k = {})",
            coef.n, coef.k
        )));
    }
    let convention = coef.convention;
    let sign = convention.sign();
    let is = Complex64::new(0.0, sign);
    let picked: Vec<usize> = coef
        .lambda
        .iter()
        .enumerate()
        .filter(|(_, &lam)| match side {
            TailSide::Minus => lam <= -LAMBDA_TAIL_MIN,
            TailSide::Plus => lam >= LAMBDA_TAIL_MIN,
        })
        .map(|(j, _)| j)
        .collect();
    if picked.len() < 4 {
        return Err(Error::Span(format!(
            "only {} samples with |lambda| >= {} on the requested side; \
             widen lambda_span",
            picked.len(),
            LAMBDA_TAIL_MIN
        )));
    }

    let c_inf = match side {
        TailSide::Minus => Complex64::new(0.0, 0.0),
        TailSide::Plus => {
            let last = *coef.sigma.last().unwrap();
            coef.amplitude.last().unwrap() + ibp_remainder(ch, force, last, convention)
        }
    };

    let mut sigma = Vec::with_capacity(picked.len());
    let mut lambda = Vec::with_capacity(picked.len());
    let mut series = Vec::with_capacity(picked.len());
    let mut deviation = Vec::with_capacity(picked.len());
    let mut plateau = Vec::new();
    for &j in &picked {
        let sig = coef.sigma[j];
        let decaying = layer_series_value(ch, force, sig, terms, convention)?;
        let value = match side {
            TailSide::Minus => decaying,
            TailSide::Plus => -is * phasor(-sign * coef.capital_lambda[j]) * c_inf + decaying,
        };
        let w = coef.values[j];
        let d = (w - value).norm();
        deviation.push(if d == 0.0 {
            0.0
        } else {
            d / value.norm().max(1e-300)
        });
        if side == TailSide::Plus {
            plateau.push(is * (w - decaying) * phasor(sign * coef.capital_lambda[j]));
        }
        sigma.push(sig);
        lambda.push(coef.lambda[j]);
        series.push(value);
    }
    Ok(TailSeries {
        side,
        terms,
        sigma,
        lambda,
        series,
        deviation,
        plateau,
    })
}

/// Linear fit of the demodulated-amplitude modulus, used to quantify (and
/// then subtract) the secular ramp of the first correction.
#[derive(Debug, Clone, Copy)]
pub struct SecularFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square misfit of the linear model.
    pub rms: f64,
    pub n_used: usize,
}

/// Least-squares line through `(sigma_j, |C_j|)` for `sigma_j >= sigma_from`.
pub fn secular_fit(coef: &LayerCoefficient, sigma_from: f64) -> Result<SecularFit> {
    let pts: Vec<(f64, f64)> = coef
        .sigma
        .iter()
        .zip(&coef.amplitude)
        .filter(|(&s, _)| s >= sigma_from)
        .map(|(&s, c)| (s, c.norm()))
        .collect();
    if pts.len() < 8 {
        return Err(Error::Validation(format!(
            "secular fit needs at least 8 samples past sigma = {}, got {}",
            sigma_from,
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let det = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / n;
    let rms = (pts
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + slope * p.0);
            r * r
        })
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(SecularFit {
        slope,
        intercept,
        rms,
        n_used: pts.len(),
    })
}

/// One point of the accumulated-amplitude sweep.
#[derive(Debug, Clone, Copy)]
pub struct AccumulatedSample {
    pub xi: f64,
    /// Crossing rate at this curve point.
    pub phi: f64,
    /// `int_{-inf}^{+inf} F e^{i s Lambda} dsigma` along the characteristic
    /// (regularized on the approach side by the series-matched start).
    pub value: Complex64,
    /// Stationary-phase prediction `f sqrt(2 pi / |phi|) e^{i s sgn(phi) pi/4}`
    /// for slowly varying force.
    pub stationary_phase: Complex64,
    /// `lambda` actually reached on each side.
    pub lambda_reached: (f64, f64),
}

/// The accumulated amplitude across the crossing, per curve point: the
/// initial datum handed to the post-resonance envelope.
#[derive(Debug, Clone)]
pub struct AccumulatedAmplitude {
    pub epsilon: f64,
    /// Carrier convention the exponent was evaluated in; the modulus is
    /// convention-invariant, the phase conjugates.
    pub convention: PhaseConvention,
    pub samples: Vec<AccumulatedSample>,
}

impl AccumulatedAmplitude {
    pub fn xi_grid(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.xi).collect()
    }

    pub fn values(&self) -> Vec<Complex64> {
        self.samples.iter().map(|s| s.value).collect()
    }
}

/// Characteristic options tuned for amplitude accumulation: a deeper
/// forward reach so the integration-by-parts handoff error
/// (`~ phi^2 F / lambda^5`) stays below 1e-6 of the value.
pub fn accumulation_options() -> CharOptions {
    CharOptions {
        lambda_span: 2.0 * LAMBDA_MATCH,
        max_sigma: 128.0,
        ..CharOptions::default()
    }
}

/// Sweeps `n_xi` evenly spaced curve points, integrating the leading-order
/// source across the full crossing on each characteristic. Per-point work
/// is independent and runs in parallel.
pub fn accumulated_amplitude(
    curve: &ResonanceCurve,
    force: &ForceProfile,
    n_xi: usize,
    opts: Option<&CharOptions>,
    convention: PhaseConvention,
) -> Result<AccumulatedAmplitude> {
    if n_xi < 2 {
        return Err(Error::Validation(
            "accumulated amplitude needs at least 2 curve points".into(),
        ));
    }
    let options = opts.copied().unwrap_or_else(accumulation_options);
    let (a, b) = (curve.xi_min(), curve.xi_max());
    let xis: Vec<f64> = (0..n_xi)
        .map(|i| a + (b - a) * i as f64 / (n_xi - 1) as f64)
        .collect();

    let samples = xis
        .par_iter()
        .map(|&xi| -> Result<AccumulatedSample> {
            let s = curve.point_at(xi)?;
            let ch =
                integrate_characteristic(curve.phase(), curve.epsilon, s.point, xi, &options)?;
            if ch.lambda_max < 5.0 {
                return Err(Error::Span(format!(
                    "forward reach lambda = {:.2} at xi = {:.3} is too \
                     shallow for the tail handoff; widen lambda_span",
                    ch.lambda_max, xi
                )));
            }
            let lead = layer_leading(&ch, force, convention)?;
            let value = lead.amplitude.last().unwrap()
                + ibp_remainder(&ch, force, *lead.sigma.last().unwrap(), convention);
            let sign = convention.sign();
            let f_here = force.eval(ch.state(0.0).x1);
            let stationary = f_here
                * (2.0 * PI / s.phi.abs()).sqrt()
                * phasor(sign * s.phi.signum() * PI / 4.0);
            Ok(AccumulatedSample {
                xi,
                phi: s.phi,
                value,
                stationary_phase: stationary,
                lambda_reached: (ch.lambda_min, ch.lambda_max),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(AccumulatedAmplitude {
        epsilon: curve.epsilon,
        convention,
        samples,
    })
}
