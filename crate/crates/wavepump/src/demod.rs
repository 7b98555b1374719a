//! Envelope extraction from probe time series
//!
//! A probe records a fast real oscillation `u(t) ~ Re[U(t) e^{i theta(t)}]`
//! whose carrier phase `theta` is known exactly (it is the driving phase).
//! Demodulation mixes the series down by `e^{-i theta}` and low-passes the
//! result: the complex envelope `U` sits near zero frequency, the conjugate
//! image sits near `-2 theta'`, and everything in between is guard band.
//!
//! The low-pass is a zero-phase FIR with Gaussian taps.  Its -6 dB cutoff
//! is placed midway between the measured envelope band edge and the floor
//! of the instantaneous carrier frequency over the analysis window; the
//! kernel is truncated where its spectral leakage matches the requested
//! image rejection, and that truncation radius is the settling margin the
//! series must provide on both sides of the window.  A Gaussian response
//! buys a short settling time - the binding constraint when the carrier is
//! slow and chirping - at the price of a gentle rolloff, which is exactly
//! the right trade here.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::direct::ProbeSeries;
use crate::error::Error;
use crate::phase::PhaseSpec;
use crate::Result;

/// Minimum probe samples per carrier period.
pub const MIN_SAMPLES_PER_PERIOD: f64 = 10.0;

/// Knobs for [`demodulate`].
#[derive(Debug, Clone, Copy)]
pub struct DemodOptions {
    /// Required suppression of the conjugate carrier image (linear).  The
    /// filter width and truncation radius are sized so both the Gaussian
    /// response at twice the carrier floor and the truncation leakage sit
    /// at or below a third of this.
    pub rejection: f64,
    /// Relative spectral magnitude that counts as envelope content when
    /// measuring the band edge.
    pub band_threshold: f64,
}

impl Default for DemodOptions {
    fn default() -> Self {
        DemodOptions {
            rejection: 0.05,
            band_threshold: 1e-2,
        }
    }
}

/// A demodulated envelope on the analysis window.
#[derive(Debug, Clone)]
pub struct Demodulated {
    /// Sample times inside the window.
    pub t: Vec<f64>,
    /// Complex envelope: `u(t) ~ Re[envelope(t) e^{i theta(t)}]`.
    pub envelope: Vec<Complex64>,
    /// Instantaneous carrier frequency range over the window.
    pub carrier_band: (f64, f64),
    /// Measured (or floor-assumed) envelope band edge.
    pub envelope_band: f64,
    /// Effective -6 dB cutoff of the filter actually used.
    pub cutoff: f64,
    /// Settling margin consumed on each side of the window.
    pub settle: f64,
    /// Upper bound on the leaked image amplitude, relative.
    pub achieved_rejection: f64,
}

impl Demodulated {
    pub fn amplitudes(&self) -> Vec<f64> {
        self.envelope.iter().map(|z| z.norm()).collect()
    }
}

/// Carrier phase seen by a probe at fast position `x`: the driving phase
/// `S(eps^2 t, eps^2 x) / eps^2` as a function of fast time.
pub fn carrier_phase(epsilon: f64, phase: &PhaseSpec, x: f64) -> impl Fn(f64) -> f64 + '_ {
    let e2 = epsilon * epsilon;
    let x2 = e2 * x;
    move |t: f64| phase.s(e2 * t, x2) / e2
}

/// Demodulates `u(t)` against the carrier phase `theta`, returning the
/// complex envelope on `window = (t_lo, t_hi)`.
///
/// Errors (`Error::Demodulation`): non-uniform sampling, carrier
/// undersampled below [`MIN_SAMPLES_PER_PERIOD`], envelope band reaching
/// the carrier floor (reported with both measured edges), or a series too
/// short to cover the window plus the settling margin.
pub fn demodulate(
    t: &[f64],
    u: &[f64],
    theta: &dyn Fn(f64) -> f64,
    window: (f64, f64),
    opts: &DemodOptions,
) -> Result<Demodulated> {
    let n = t.len();
    if n != u.len() || n < 32 {
        return Err(Error::Demodulation(format!(
            "need a series of at least 32 matching samples, got {} / {}",
            n,
            u.len()
        )));
    }
    if !(opts.rejection > 0.0 && opts.rejection < 1.0) {
        return Err(Error::Demodulation(
            "rejection must lie in (0, 1)".into(),
        ));
    }
    let dt = (t[n - 1] - t[0]) / (n - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::Demodulation("time must increase".into()));
    }
    for j in 1..n {
        if ((t[j] - t[j - 1]) - dt).abs() > 1e-6 * dt {
            return Err(Error::Demodulation(format!(
                "sampling must be uniform: step {} at index {j} differs from {}",
                t[j] - t[j - 1],
                dt
            )));
        }
    }
    let (t_lo, t_hi) = window;
    if !(t_hi > t_lo) || t_lo < t[0] - 1e-9 || t_hi > t[n - 1] + 1e-9 {
        return Err(Error::Demodulation(format!(
            "window [{t_lo}, {t_hi}] must be increasing and inside the series \
             [{}, {}]",
            t[0],
            t[n - 1]
        )));
    }
    let j_lo = t.partition_point(|&tj| tj < t_lo - 1e-9 * dt);
    let j_hi = t.partition_point(|&tj| tj <= t_hi + 1e-9 * dt);
    if j_hi - j_lo < 8 {
        return Err(Error::Demodulation(
            "window covers fewer than 8 samples".into(),
        ));
    }

    // Instantaneous carrier frequency over the window.
    let mut w_min = f64::INFINITY;
    let mut w_max = 0.0f64;
    for j in j_lo.max(1)..j_hi.min(n - 1) {
        let w = (theta(t[j + 1]) - theta(t[j - 1])) / (2.0 * dt);
        w_min = w_min.min(w);
        w_max = w_max.max(w);
    }
    if !(w_min > 0.0) {
        return Err(Error::Demodulation(format!(
            "carrier must advance monotonically; instantaneous frequency \
             reaches {w_min:.3e} inside the window"
        )));
    }
    let samples_per_period = 2.0 * std::f64::consts::PI / (w_max * dt);
    if samples_per_period < MIN_SAMPLES_PER_PERIOD - 1e-9 {
        return Err(Error::Demodulation(format!(
            "carrier undersampled: {samples_per_period:.1} samples per period \
             at frequency {w_max:.3}, need {MIN_SAMPLES_PER_PERIOD}"
        )));
    }

    // Mix down: z = 2 u e^{-i theta}; the 2 makes a pure tone
    // A cos(theta + delta) come out as exactly A e^{i delta}.
    let z: Vec<Complex64> = t
        .iter()
        .zip(u)
        .map(|(&tj, &uj)| 2.0 * uj * Complex64::new(0.0, -theta(tj)).exp())
        .collect();

    // Envelope band edge, measured on the Blackman-windowed spectrum of
    // the mixed window.  Windows too short to resolve the guard band get
    // a half-floor assumption instead of a false overlap error.
    let span = &z[j_lo..j_hi];
    let m = span.len();
    let d_omega = 2.0 * std::f64::consts::PI / (m as f64 * dt);
    let envelope_band = if w_min / d_omega < 6.0 {
        0.5 * w_min
    } else {
        let mut buf: Vec<Complex64> = span
            .iter()
            .enumerate()
            .map(|(j, &zj)| {
                let y = j as f64 / (m - 1) as f64;
                let blackman = 0.42
                    - 0.5 * (2.0 * std::f64::consts::PI * y).cos()
                    + 0.08 * (4.0 * std::f64::consts::PI * y).cos();
                zj * blackman
            })
            .collect();
        FftPlanner::new().plan_fft_forward(m).process(&mut buf);
        // signed bin frequencies; scan strictly below the carrier floor
        let freq = |j: usize| -> f64 {
            let k = if j <= m / 2 { j as f64 } else { j as f64 - m as f64 };
            k * d_omega
        };
        let mut peak = 0.0f64;
        for (j, b) in buf.iter().enumerate() {
            if freq(j).abs() < w_min {
                peak = peak.max(b.norm());
            }
        }
        let mut edge = 0.0f64;
        for (j, b) in buf.iter().enumerate() {
            let w = freq(j).abs();
            if w < w_min && b.norm() > opts.band_threshold * peak {
                edge = edge.max(w);
            }
        }
        if edge > 0.9 * w_min {
            return Err(Error::Demodulation(format!(
                "envelope band reaches {edge:.4} while the carrier floor is \
                 {w_min:.4}: no usable guard band between envelope and \
                 carrier image"
            )));
        }
        edge.max(2.0 * d_omega)
    };

    // Gaussian filter: cutoff midway between the bands, widened if the
    // requested rejection demands more suppression at the image.
    let cutoff_mid = 0.5 * (envelope_band + w_min);
    let r_trunc = (2.0 * (3.0 / opts.rejection).ln()).sqrt();
    let sigma = (1.177 / cutoff_mid).max(r_trunc / (2.0 * w_min));
    let cutoff = 1.177 / sigma;
    let settle = r_trunc * sigma;
    let achieved_rejection =
        (-(2.0 * w_min * sigma).powi(2) / 2.0).exp() + (-r_trunc * r_trunc / 2.0).exp();

    let half = (settle / dt).ceil() as usize;
    if t_lo - settle < t[0] - 1e-9 * dt || t_hi + settle > t[n - 1] + 1e-9 * dt {
        return Err(Error::Demodulation(format!(
            "series too short for the filter: the window needs a settling \
             margin of {settle:.2} time units on each side, so the series \
             must cover [{:.2}, {:.2}] but covers [{}, {}]",
            t_lo - settle,
            t_hi + settle,
            t[0],
            t[n - 1]
        )));
    }
    let j_lo = j_lo.max(half);
    let j_hi = j_hi.min(n - half);

    // Normalized taps: H(0) = 1 exactly, so a constant envelope passes
    // without bias regardless of truncation.
    let taps: Vec<f64> = (0..=half)
        .map(|k| (-((k as f64 * dt) / sigma).powi(2) / 2.0).exp())
        .collect();
    let norm: f64 = taps[0] + 2.0 * taps[1..].iter().sum::<f64>();

    let mut out_t = Vec::with_capacity(j_hi - j_lo);
    let mut envelope = Vec::with_capacity(j_hi - j_lo);
    for j in j_lo..j_hi {
        let mut acc = taps[0] * z[j];
        for (k, &w) in taps.iter().enumerate().skip(1) {
            acc += w * (z[j - k] + z[j + k]);
        }
        out_t.push(t[j]);
        envelope.push(acc / norm);
    }

    Ok(Demodulated {
        t: out_t,
        envelope,
        carrier_band: (w_min, w_max),
        envelope_band,
        cutoff,
        settle,
        achieved_rejection,
    })
}

/// [`demodulate`] for a recorded probe, against the driving carrier at the
/// probe's actual grid position.
pub fn demodulate_probe(
    series: &ProbeSeries,
    epsilon: f64,
    phase: &PhaseSpec,
    window: (f64, f64),
    opts: &DemodOptions,
) -> Result<Demodulated> {
    let theta = carrier_phase(epsilon, phase, series.x_actual);
    demodulate(&series.t, &series.u, &theta, window, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::direct::{run, Boundary, FastGrid, FieldState, ProbeSpec, RunParams, SpaceOperator};
    use crate::force::ForceProfile;

    fn sampled(dt: f64, t_end: f64, f: impl Fn(f64) -> f64) -> (Vec<f64>, Vec<f64>) {
        let n = (t_end / dt).round() as usize + 1;
        let t: Vec<f64> = (0..n).map(|j| j as f64 * dt).collect();
        let u = t.iter().map(|&tj| f(tj)).collect();
        (t, u)
    }

    #[test]
    fn single_tone_amplitude_and_phase_are_exact() {
        let (a, delta, w) = (0.37, 0.9, 1.3);
        let theta = move |t: f64| w * t;
        let (t, u) = sampled(0.05, 240.0, |tj| a * (theta(tj) + delta).cos());
        let opts = DemodOptions {
            rejection: 1e-6,
            ..DemodOptions::default()
        };
        let d = demodulate(&t, &u, &theta, (30.0, 210.0), &opts).unwrap();
        assert!(d.achieved_rejection <= 1e-6);
        let amps = d.amplitudes();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for (z, &amp) in d.envelope.iter().zip(&amps) {
            lo = lo.min(amp);
            hi = hi.max(amp);
            assert!((z.arg() - delta).abs() < 1e-6, "phase {} != {delta}", z.arg());
        }
        assert!((hi - a).abs() < 1e-6 * a, "amplitude {hi} != {a}");
        assert!(hi - lo < 1e-6 * a, "envelope ripple {}", hi - lo);
    }

    #[test]
    fn zero_input_gives_zero_envelope() {
        let theta = |t: f64| 1.1 * t;
        let (t, u) = sampled(0.05, 120.0, |_| 0.0);
        let d = demodulate(&t, &u, &theta, (30.0, 90.0), &DemodOptions::default()).unwrap();
        assert!(d.envelope.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn third_harmonic_is_rejected_beyond_40_db() {
        let theta = |t: f64| 1.1 * t;
        let (t, u) = sampled(
            0.05,
            240.0,
            |tj| (theta(tj)).cos() + 0.5 * (3.0 * theta(tj) + 0.4).cos(),
        );
        let opts = DemodOptions {
            rejection: 1e-3,
            ..DemodOptions::default()
        };
        let d = demodulate(&t, &u, &theta, (40.0, 200.0), &opts).unwrap();
        // the 3-theta line (amplitude 0.5) must leave less than 1% of
        // itself on the unit envelope
        let worst = d
            .envelope
            .iter()
            .map(|z| (z - Complex64::new(1.0, 0.0)).norm())
            .fold(0.0, f64::max);
        assert!(worst < 0.5 * 1e-2, "harmonic residue {worst}");
    }

    #[test]
    fn chirped_carrier_with_slow_modulation_tracks() {
        let theta = |t: f64| 0.3 * t + t * t / 600.0;
        let env = |t: f64| 1.0 + 0.3 * (0.02 * t).sin();
        let (t, u) = sampled(0.2, 300.0, |tj| env(tj) * theta(tj).cos());
        let d = demodulate(&t, &u, &theta, (60.0, 240.0), &DemodOptions::default()).unwrap();
        let mut worst = 0.0f64;
        for (tj, z) in d.t.iter().zip(&d.envelope) {
            worst = worst.max((z.norm() - env(*tj)).abs() / env(*tj));
        }
        assert!(worst < 1e-2, "chirp-tracking error {worst}");
        assert!(d.carrier_band.0 > 0.3 && d.carrier_band.1 < 1.4);
    }

    #[test]
    fn overlapping_bands_are_refused_with_their_edges() {
        let theta = |t: f64| t;
        let (t, u) = sampled(
            0.05,
            700.0,
            |tj| (1.0 + (0.95 * tj).cos()) * theta(tj).cos(),
        );
        match demodulate(&t, &u, &theta, (50.0, 650.0), &DemodOptions::default()) {
            Err(Error::Demodulation(msg)) => {
                assert!(msg.contains("guard band"), "message: {msg}");
                assert!(msg.contains("0.9"), "edges missing from: {msg}");
            }
            other => panic!("expected an overlap error, got {other:?}"),
        }
    }

    #[test]
    fn undersampled_carrier_is_refused() {
        let theta = |t: f64| 3.0 * t;
        let (t, u) = sampled(0.3, 120.0, |tj| theta(tj).cos());
        match demodulate(&t, &u, &theta, (30.0, 90.0), &DemodOptions::default()) {
            Err(Error::Demodulation(msg)) => {
                assert!(msg.contains("undersampled"), "message: {msg}")
            }
            other => panic!("expected an undersampling error, got {other:?}"),
        }
    }

    #[test]
    fn missing_settle_margin_is_refused() {
        let theta = |t: f64| 1.3 * t;
        let (t, u) = sampled(0.05, 60.0, |tj| theta(tj).cos());
        match demodulate(&t, &u, &theta, (0.5, 59.5), &DemodOptions::default()) {
            Err(Error::Demodulation(msg)) => {
                assert!(msg.contains("settling margin"), "message: {msg}")
            }
            other => panic!("expected a margin error, got {other:?}"),
        }
    }

    #[test]
    fn driven_probe_matches_the_adiabatic_response() {
        // Ground truth against closed form: with gamma = 0 the driven field
        // at the force center oscillates at the driving phase with envelope
        // 2 eps^2 |f(0) / l(t2)|; the demodulated probe must match within
        // 10% over t2 in [0.3, 0.5].
        let eps = 0.1;
        let force = ForceProfile::gaussian(0.8, 2.0, 0.0);
        let phase = PhaseSpec::quadratic();
        let params = RunParams {
            epsilon: eps,
            gamma: 0.0,
            force: force.clone(),
            phase: phase.clone(),
            grid: FastGrid {
                x_min: -150.0,
                x_max: 150.0,
                nx: 1024,
                boundary: Boundary::AbsorbingSponge,
            },
            dt: 0.05,
            t_end: 65.0,
            operator: SpaceOperator::FiniteDifference4,
            probes: vec![ProbeSpec { x: 0.0, stride: 1 }],
            snapshot_every_t2: None,
            sponge_strength: 1.0,
            sponge_tolerance: 1e-3,
            energy_stride: 400,
        };
        let traj = run(&params, &FieldState::zero(1024)).unwrap();
        let d = demodulate_probe(
            &traj.probes[0],
            eps,
            &phase,
            (30.0, 50.0),
            &DemodOptions::default(),
        )
        .unwrap();
        let mut worst = 0.0f64;
        for (tj, z) in d.t.iter().zip(&d.envelope) {
            let t2 = eps * eps * tj;
            let want = 2.0 * eps * eps * force.eval(0.0).norm() / phase.l(t2, 0.0).abs();
            worst = worst.max((z.norm() - want).abs() / want);
        }
        assert!(worst < 0.10, "adiabatic-response mismatch {worst}");
    }
}
