//! End-to-end experiments: the direct field solver measured against the
//! three matched asymptotic descriptions, scale sweeps over the small
//! parameter, and the packet-generation scenario.
//!
//! # Regions
//!
//! Along the probe's world line the local detuning `l(t2, x2)` splits the
//! record into three windows:
//!
//! * **pre** — `-l > m_pre * eps`: the adiabatically forced tail, described
//!   by [`evaluate_pre_field`];
//! * **layer** — `|l| < m_lay * sqrt(eps)`: the crossing itself, described
//!   by the transported leading coefficient of [`layer_leading`];
//! * **post** — `l > m_post * eps`: the free envelope, described by
//!   [`nlse_evolve`] seeded with the accumulated crossing amplitude.
//!
//! The default margins keep all three regions non-empty down to
//! `eps = 0.2` and pairwise overlapping at the seams, where the two
//! neighbouring descriptions are compared against each other.
//!
//! # Metrics
//!
//! The primary per-region metric is the *field residual*: the real probe
//! signal minus the real reconstructed prediction, in relative `L2` and
//! `Linf` norms. It is uniformly defined at every `eps` and needs no
//! filtering. Where a clean guard band exists, the demodulated envelope is
//! also compared (complex, against the same carrier the prediction uses);
//! when the record is too short for the filter to settle — unavoidable at
//! large `eps`, where the whole pre-resonance epoch holds only a couple of
//! carrier oscillations — the envelope entry is absent and a note says why.
//!
//! Amplitude peaks are read by pointwise quadrature, `|u - i v / omega|`,
//! which is exact for a locked carrier at rate `omega` and needs no
//! filter settling; peaks feed the pre/post amplitude ratio and the scale
//! sweep exponents.
//!
//! # Determinism
//!
//! Nothing here draws random numbers. Parallel loops map independent items
//! and collect in order, so reports are bitwise reproducible; every report
//! carries an FNV-1a digest of its full configuration.

use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::direct::{
    run, Boundary, FastGrid, FieldState, ProbeSeries, ProbeSpec, RunParams, Snapshot,
    SpaceOperator, Trajectory, SPONGE_STRENGTH, SPONGE_TOLERANCE,
};
use crate::demod::{demodulate, demodulate_probe, DemodOptions};
use crate::envelope::{
    cubic_coefficient, nlse_evolve, nlse_initial_data, EnvelopeField, EnvelopeTrajectory,
};
use crate::error::Error;
use crate::Result;
use crate::force::ForceProfile;
use crate::geometry::{
    characteristic_fan, find_resonance_curve, solve_eikonal, Characteristic, CharacteristicFan,
    CurveConfig, PhaseField, ResonanceCurve, SlowWindow,
};
use crate::layer::{
    accumulated_amplitude, accumulation_options, layer_leading, LayerCoefficient, PhaseConvention,
};
use crate::phase::PhaseSpec;
use crate::wkb::evaluate_pre_field;
use crate::zakharov::soliton_census;

/// Carrier convention shared by every prediction assembled here: envelopes
/// multiply `exp(+i S / eps^2)` and the direct field is twice the real part.
const CONVENTION: PhaseConvention = PhaseConvention::Standard;

/// Fixed detuning depth bounding the *bulk* sub-windows: the headline
/// pre-resonance error and the peak readings are taken where `|l| >= 0.5`,
/// well clear of the layer at every `eps` in play.
pub const BULK_DETUNING: f64 = 0.5;

/// Upper detuning of the bulk post window; together with [`BULK_DETUNING`]
/// it pins the same slow-time strip at every `eps`, so peak scalings are
/// read at a fixed place.
pub const BULK_DETUNING_HIGH: f64 = 0.9;

/// Quadrature peaks skip samples whose carrier rate is below this: the
/// `v / omega` arm degenerates as the instantaneous frequency vanishes.
pub const QUADRATURE_MIN_RATE: f64 = 0.25;

/// Target spacing (fast time units) between residual samples; dense probe
/// records are strided down to roughly this before comparing.
const SAMPLE_SPACING: f64 = 0.2;

/// Extra fast time appended past the last analysis window so demodulation
/// filters have data to settle on.
const SETTLE_SLACK: f64 = 25.0;

/// Arbitration tolerance: the direct spatial peak over the predicted one
/// must sit within this factor band for the full-amplitude reconstruction.
pub const ARBITRATION_TOLERANCE: f64 = 0.2;

// ---------------------------------------------------------------------------
// Margins and windows
// ---------------------------------------------------------------------------

/// Detuning margins, in the units of the natural scale of each region
/// boundary: the pre and post regions begin `m * eps` away from the
/// crossing, the layer extends to `m * sqrt(eps)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegionMargins {
    pub pre: f64,
    pub layer: f64,
    pub post: f64,
}

impl Default for RegionMargins {
    /// Chosen so that all three regions are non-empty and the seams overlap
    /// for `eps` up to 0.2 under the model phase, where the detuning spans
    /// `[-1, oo)`: the pre region needs `m_pre * eps < 1`.
    fn default() -> Self {
        RegionMargins {
            pre: 2.5,
            layer: 3.0,
            post: 2.5,
        }
    }
}

impl RegionMargins {
    /// All margins positive and the regions pairwise overlapping at the
    /// seams: `m_pre * eps < m_lay * sqrt(eps)` and likewise for post.
    pub fn validate(&self, epsilon: f64) -> Result<()> {
        if !(self.pre > 0.0 && self.layer > 0.0 && self.post > 0.0) {
            return Err(Error::Validation(format!(
                "region margins must be positive, got pre = {}, layer = {}, post = {}",
                self.pre, self.layer, self.post
            )));
        }
        let root = epsilon.sqrt();
        if self.pre * epsilon >= self.layer * root || self.post * epsilon >= self.layer * root {
            return Err(Error::Validation(format!(
                "regions leave no seam overlap at eps = {epsilon}: the layer reaches \
                 |l| = {:.4} while the outer regions begin at {:.4} (pre) and {:.4} \
                 (post); raise the layer margin or lower the outer ones",
                self.layer * root,
                self.pre * epsilon,
                self.post * epsilon
            )));
        }
        Ok(())
    }
}

/// The three asymptotic regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    Pre,
    Layer,
    Post,
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::Pre => "pre",
            Regime::Layer => "layer",
            Regime::Post => "post",
        }
    }
}

/// Slow-time windows (at the probe line) cut by the detuning margins.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegionWindows {
    pub pre: (f64, f64),
    pub layer: (f64, f64),
    pub post: (f64, f64),
    /// Overlap strip shared by pre and layer.
    pub seam_pre_layer: (f64, f64),
    /// Overlap strip shared by layer and post.
    pub seam_layer_post: (f64, f64),
    /// Deep pre sub-window: `-l >= BULK_DETUNING` and a usable carrier rate.
    pub pre_bulk: Option<(f64, f64)>,
    /// Fixed post strip: `l` between [`BULK_DETUNING`] and
    /// [`BULK_DETUNING_HIGH`].
    pub post_bulk: Option<(f64, f64)>,
    /// Slow time of the resonance crossing on the probe line.
    pub t2_crossing: f64,
}

/// First `t2` in `(lo, hi)` where `l(t2, x2)` crosses `target`, by scan and
/// bisection; `None` when no crossing exists in the span.
fn t2_where_l(phase: &PhaseSpec, x2: f64, target: f64, lo: f64, hi: f64) -> Option<f64> {
    let n = 800;
    let g = |t2: f64| phase.l(t2, x2) - target;
    let mut a = lo;
    let mut ga = g(a);
    for i in 1..=n {
        let b = lo + (hi - lo) * i as f64 / n as f64;
        let gb = g(b);
        if ga == 0.0 {
            return Some(a);
        }
        if ga * gb < 0.0 {
            let (mut x0, mut x1) = (a, b);
            let mut g0 = ga;
            for _ in 0..80 {
                let xm = 0.5 * (x0 + x1);
                let gm = g(xm);
                if g0 * gm <= 0.0 {
                    x1 = xm;
                } else {
                    x0 = xm;
                    g0 = gm;
                }
            }
            return Some(0.5 * (x0 + x1));
        }
        a = b;
        ga = gb;
    }
    None
}

/// First `t2` in `(lo, hi)` where the carrier rate `S_t` reaches `rate`.
fn t2_where_rate(phase: &PhaseSpec, x2: f64, rate: f64, lo: f64, hi: f64) -> Option<f64> {
    let n = 800;
    for i in 0..=n {
        let t2 = lo + (hi - lo) * i as f64 / n as f64;
        if phase.s_t(t2, x2).abs() >= rate {
            return Some(t2);
        }
    }
    None
}

/// Splits the probe record `t2 in (data_lo, data_hi)` into the three
/// regions. The detuning must cross zero exactly once on the span and all
/// three regions must be non-empty.
pub fn region_windows(
    phase: &PhaseSpec,
    epsilon: f64,
    margins: &RegionMargins,
    x2: f64,
    data_lo: f64,
    data_hi: f64,
) -> Result<RegionWindows> {
    margins.validate(epsilon)?;
    let root = epsilon.sqrt();
    let guard = 1e-9 * (1.0 + data_hi.abs());

    let crossing = t2_where_l(phase, x2, 0.0, data_lo, data_hi).ok_or_else(|| {
        Error::Validation(format!(
            "the detuning does not cross zero for t2 in ({data_lo}, {data_hi}) at x2 = {x2}; \
             nothing to compare across"
        ))
    })?;
    let pre_hi = t2_where_l(phase, x2, -margins.pre * epsilon, data_lo, crossing).ok_or_else(
        || {
            Error::Validation(format!(
                "the pre region is empty: -l never exceeds {:.4} before the crossing",
                margins.pre * epsilon
            ))
        },
    )?;
    let lay_lo =
        t2_where_l(phase, x2, -margins.layer * root, data_lo, crossing).unwrap_or(data_lo);
    let lay_hi =
        t2_where_l(phase, x2, margins.layer * root, crossing, data_hi).unwrap_or(data_hi);
    let post_lo = t2_where_l(phase, x2, margins.post * epsilon, crossing, data_hi).ok_or_else(
        || {
            Error::Validation(format!(
                "the post region is empty: l never exceeds {:.4} by t2 = {data_hi}; \
                 extend the run",
                margins.post * epsilon
            ))
        },
    )?;

    let pre = (data_lo, pre_hi - guard);
    let layer = (lay_lo + guard, (lay_hi - guard).min(data_hi));
    let post = (post_lo + guard, data_hi - guard);
    for (w, name) in [(pre, "pre"), (layer, "layer"), (post, "post")] {
        if w.1 <= w.0 {
            return Err(Error::Validation(format!(
                "the {name} region collapsed to [{:.4}, {:.4}]; widen the run",
                w.0, w.1
            )));
        }
    }
    let seam_pre_layer = (layer.0, pre.1);
    let seam_layer_post = (post.0, layer.1);
    for (w, name) in [
        (seam_pre_layer, "pre/layer"),
        (seam_layer_post, "layer/post"),
    ] {
        if w.1 <= w.0 {
            return Err(Error::Validation(format!(
                "the {name} seam is empty ([{:.4}, {:.4}]); margins do not overlap",
                w.0, w.1
            )));
        }
    }

    let pre_bulk = {
        let hi = t2_where_l(phase, x2, -BULK_DETUNING, data_lo, crossing);
        let lo = t2_where_rate(phase, x2, QUADRATURE_MIN_RATE, data_lo, crossing);
        match (lo, hi) {
            (Some(a), Some(b)) if b > a + guard => Some((a, b)),
            _ => None,
        }
    };
    let post_bulk = {
        let lo = t2_where_l(phase, x2, BULK_DETUNING, crossing, data_hi);
        let hi = t2_where_l(phase, x2, BULK_DETUNING_HIGH, crossing, data_hi);
        match (lo, hi) {
            (Some(a), Some(b)) if b > a + guard => Some((a, b)),
            _ => None,
        }
    };

    Ok(RegionWindows {
        pre,
        layer,
        post,
        seam_pre_layer,
        seam_layer_post,
        pre_bulk,
        post_bulk,
        t2_crossing: crossing,
    })
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Everything a matched comparison needs. Construct with [`CompareConfig::new`]
/// and adjust fields; the grid, step and run length are sized automatically
/// from `epsilon` and the force support.
#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub epsilon: f64,
    /// Cubic coupling of the field equation.
    pub gamma: f64,
    pub force: ForceProfile,
    pub phase: PhaseSpec,
    /// Truncation order of the pre-resonance expansion.
    pub truncation: usize,
    pub margins: RegionMargins,
    /// Slow time the comparison runs to (the crossing sits near its scale).
    pub t2_end: f64,
    /// Probe position in fast coordinates.
    pub probe_x: f64,
    /// Characteristics in the layer fan.
    pub n_fan: usize,
    /// Curve points for the accumulated crossing amplitude.
    pub n_xi: usize,
    /// Envelope grid size.
    pub nlse_grid: usize,
    /// Envelope window widening over the curve window.
    pub nlse_margin: f64,
    /// Envelope solver step in slow time.
    pub nlse_dt2: f64,
    /// Envelope frames kept for interpolation.
    pub nlse_frames: usize,
    /// Curve window half-width safety factor over the force support.
    pub window_factor: f64,
    /// Demodulation options for the optional envelope comparisons.
    pub demod: DemodOptions,
}

impl CompareConfig {
    pub fn new(epsilon: f64, gamma: f64, force: ForceProfile, phase: PhaseSpec) -> Self {
        CompareConfig {
            epsilon,
            gamma,
            force,
            phase,
            truncation: 2,
            margins: RegionMargins::default(),
            t2_end: 1.5,
            probe_x: 0.0,
            n_fan: 41,
            n_xi: 81,
            nlse_grid: 768,
            nlse_margin: 1.4,
            nlse_dt2: 1e-3,
            nlse_frames: 61,
            window_factor: 1.3,
            demod: DemodOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Validation(format!(
                "epsilon must be in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.truncation < 2 {
            return Err(Error::Validation(format!(
                "the pre-resonance expansion starts at order 2, got truncation {}",
                self.truncation
            )));
        }
        if !(self.t2_end > 0.0) {
            return Err(Error::Validation("t2_end must be positive".into()));
        }
        if self.n_fan < 5 || self.n_xi < 5 {
            return Err(Error::Validation(
                "the layer fan and the curve sweep need at least 5 points each".into(),
            ));
        }
        if !(self.nlse_margin > 0.0 && self.nlse_dt2 > 0.0) {
            return Err(Error::Validation(
                "envelope margin and step must be positive".into(),
            ));
        }
        if self.nlse_frames < 3 {
            return Err(Error::Validation(
                "need at least 3 envelope frames to interpolate".into(),
            ));
        }
        self.margins.validate(self.epsilon)
    }

    /// Curve-window half-width in x2: generously past the force support and
    /// never so thin that the envelope has no room.
    fn window_half_x2(&self) -> f64 {
        let support_x1 = self.force.support_radius().max(2.0);
        self.window_factor * support_x1 * self.epsilon + self.epsilon.powi(2) * self.probe_x.abs()
    }

    /// Sizes the direct run: the domain holds the force support plus a
    /// round-trip margin for anything radiated, the step keeps the carrier
    /// resolved and stays safely under the stability bound.
    fn direct_params(&self) -> Result<RunParams> {
        let eps = self.epsilon;
        let support_x = self.force.support_radius() / eps + self.probe_x.abs();
        let t_end = self.t2_end / (eps * eps) + SETTLE_SLACK;
        let interior = support_x + 0.5 * t_end + 5.0;
        let half = ((interior / 0.9) / 10.0).ceil() * 10.0;
        let nx = (((2.0 * half / 0.2).ceil() as usize).next_power_of_two()).clamp(256, 32768);
        let grid = FastGrid {
            x_min: -half,
            x_max: half,
            nx,
            boundary: Boundary::AbsorbingSponge,
        };
        let mut params = RunParams {
            epsilon: eps,
            gamma: self.gamma,
            force: self.force.clone(),
            phase: self.phase.clone(),
            grid,
            dt: 0.02,
            t_end,
            // Spectral derivatives: at sweep scale the record spans many
            // hundreds of carrier periods, where even a fourth-order
            // stencil's dispersion would contaminate the residuals.
            operator: SpaceOperator::Spectral,
            probes: vec![ProbeSpec {
                x: self.probe_x,
                stride: 1,
            }],
            snapshot_every_t2: Some(0.05),
            sponge_strength: SPONGE_STRENGTH,
            sponge_tolerance: SPONGE_TOLERANCE,
            energy_stride: 500,
        };
        params.dt = (0.8 * params.dt_stable()).min(0.02);
        params.validate()?;
        Ok(params)
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Residuals of one region.
#[derive(Debug, Clone, Serialize)]
pub struct RegionReport {
    pub regime: Regime,
    /// Slow-time window compared over.
    pub window_t2: (f64, f64),
    pub n_samples: usize,
    /// Relative L2 residual of the real field against the prediction.
    pub field_rel_l2: f64,
    /// Relative Linf residual of the real field.
    pub field_rel_linf: f64,
    /// Bulk sub-window, when defined.
    pub bulk_window_t2: Option<(f64, f64)>,
    /// Field residual restricted to the bulk sub-window.
    pub bulk_rel_l2: Option<f64>,
    pub bulk_rel_linf: Option<f64>,
    /// Complex envelope residual from demodulation, when a guard band and
    /// settling margin exist.
    pub envelope_rel_l2: Option<f64>,
    pub envelope_rel_linf: Option<f64>,
}

/// Mismatch of two neighbouring predictions over their shared strip.
#[derive(Debug, Clone, Serialize)]
pub struct SeamReport {
    pub pair: (Regime, Regime),
    pub window_t2: (f64, f64),
    pub n_samples: usize,
    /// `||pred_a - pred_b||_2 / ||direct||_2` over the strip.
    pub rel_l2: f64,
    /// Twice the larger of the two full-region field errors.
    pub bound: f64,
    pub consistent: bool,
}

/// One amplitude-peak reading.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PeakReading {
    pub t2: f64,
    pub value: f64,
}

/// The factor-of-two arbitration: the measured spatial packet peak against
/// the envelope prediction, and against the halved candidate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ArbitrationReport {
    /// Slow time of the snapshot used.
    pub t2: f64,
    /// Direct packet peak, in envelope units.
    pub direct_peak: f64,
    /// Predicted envelope peak at the same slow time.
    pub predicted_peak: f64,
    pub ratio: f64,
    /// Ratio against the halved prediction.
    pub halved_ratio: f64,
    /// The full-amplitude reconstruction is the closer of the two.
    pub full_factor_wins: bool,
    /// And it sits within [`ARBITRATION_TOLERANCE`].
    pub within_tolerance: bool,
}

/// Everything one matched comparison produced.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub epsilon: f64,
    pub gamma: f64,
    pub truncation: usize,
    pub probe_x: f64,
    pub t2_end: f64,
    pub margins: RegionMargins,
    pub windows: RegionWindows,
    pub force_description: String,
    pub pre: RegionReport,
    pub layer: RegionReport,
    pub post: RegionReport,
    pub seam_pre_layer: SeamReport,
    pub seam_layer_post: SeamReport,
    /// Largest quadrature envelope in the bulk pre window.
    pub peak_pre: Option<PeakReading>,
    /// Largest quadrature envelope in the bulk post window.
    pub peak_post: Option<PeakReading>,
    /// `peak_post / peak_pre`; grows like `1 / eps` at fixed windows.
    pub amplitude_ratio: Option<f64>,
    pub arbitration: Option<ArbitrationReport>,
    /// True when the force is identically zero: every comparison is 0 = 0.
    pub degenerate: bool,
    pub runtime_seconds: f64,
    /// FNV-1a digest of the full configuration.
    pub digest: String,
    /// Anything that was skipped or degraded, and why.
    pub notes: Vec<String>,
}

// ---------------------------------------------------------------------------
// Small numeric helpers
// ---------------------------------------------------------------------------

/// FNV-1a, 64-bit.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Canonical configuration digest: all scalar knobs at full precision plus
/// numeric fingerprints of the force and phase — closures included, since
/// they are sampled, not named.
fn config_digest(cfg: &CompareConfig) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(1024);
    let _ = write!(
        s,
        "eps={:.17e};gamma={:.17e};trunc={};margins={:.17e},{:.17e},{:.17e};\
         t2_end={:.17e};probe={:.17e};fan={};nxi={};ngrid={};nmargin={:.17e};\
         ndt2={:.17e};frames={};wf={:.17e};force={};",
        cfg.epsilon,
        cfg.gamma,
        cfg.truncation,
        cfg.margins.pre,
        cfg.margins.layer,
        cfg.margins.post,
        cfg.t2_end,
        cfg.probe_x,
        cfg.n_fan,
        cfg.n_xi,
        cfg.nlse_grid,
        cfg.nlse_margin,
        cfg.nlse_dt2,
        cfg.nlse_frames,
        cfg.window_factor,
        cfg.force.describe(),
    );
    let r = cfg.force.support_radius().max(1.0);
    for i in 0..17 {
        let y = -r + 2.0 * r * i as f64 / 16.0;
        let v = cfg.force.eval(y);
        let _ = write!(s, "f{}={:.17e},{:.17e};", i, v.re, v.im);
    }
    let x2w = cfg.window_half_x2().max(0.1);
    for i in 0..5 {
        for j in 0..5 {
            let t2 = cfg.t2_end * i as f64 / 4.0;
            let x2 = -x2w + 2.0 * x2w * j as f64 / 4.0;
            let _ = write!(
                s,
                "p{}_{}={:.17e},{:.17e},{:.17e};",
                i,
                j,
                cfg.phase.s(t2, x2),
                cfg.phase.s_t(t2, x2),
                cfg.phase.s_x(t2, x2)
            );
        }
    }
    format!("{:016x}", fnv1a(s.as_bytes()))
}

/// Probe sample indices inside the fast window, strided down to roughly
/// [`SAMPLE_SPACING`].
fn strided_indices(t: &[f64], lo: f64, hi: f64, dt: f64) -> Vec<usize> {
    let stride = ((SAMPLE_SPACING / dt).floor() as usize).max(1);
    let i0 = t.partition_point(|&v| v < lo);
    let i1 = t.partition_point(|&v| v <= hi);
    (i0..i1).step_by(stride).collect()
}

/// Relative L2 and Linf of `dir - pred` against `dir`; identically zero
/// pairs compare as zero error.
fn rel_errors(dir: &[f64], pred: &[f64]) -> (f64, f64) {
    let mut r2 = 0.0;
    let mut d2 = 0.0;
    let mut ri = 0.0f64;
    let mut di = 0.0f64;
    for (&a, &b) in dir.iter().zip(pred) {
        r2 += (a - b) * (a - b);
        d2 += a * a;
        ri = ri.max((a - b).abs());
        di = di.max(a.abs());
    }
    let l2 = if d2 > 0.0 {
        (r2 / d2).sqrt()
    } else if r2 > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let li = if di > 0.0 {
        ri / di
    } else if ri > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    (l2, li)
}

/// Same for complex series.
fn rel_errors_complex(dir: &[Complex64], pred: &[Complex64]) -> (f64, f64) {
    let mut r2 = 0.0;
    let mut d2 = 0.0;
    let mut ri = 0.0f64;
    let mut di = 0.0f64;
    for (a, b) in dir.iter().zip(pred) {
        r2 += (a - b).norm_sqr();
        d2 += a.norm_sqr();
        ri = ri.max((a - b).norm());
        di = di.max(a.norm());
    }
    let l2 = if d2 > 0.0 {
        (r2 / d2).sqrt()
    } else if r2 > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let li = if di > 0.0 {
        ri / di
    } else if ri > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    (l2, li)
}

/// Quadrature envelope of one probe sample: `|u - i v / omega|`, exact for
/// a locked carrier `u = Re[E exp(i theta)]` with rate `omega = dtheta/dt`.
fn quadrature_envelope(u: f64, v: f64, omega: f64) -> f64 {
    Complex64::new(u, -v / omega).norm()
}

/// Largest quadrature envelope over a probe window, skipping samples with a
/// degenerate carrier rate. `tail_at` supplies an `(u, v)` component to
/// subtract first (the adiabatically forced response, when the reading is
/// meant to be the free packet alone).
fn probe_quadrature_peak(
    probe: &ProbeSeries,
    idx: &[usize],
    mut omega_at: impl FnMut(f64) -> Option<f64>,
    mut tail_at: impl FnMut(f64) -> (f64, f64),
    epsilon: f64,
) -> Option<PeakReading> {
    let mut best: Option<PeakReading> = None;
    for &j in idx {
        let t = probe.t[j];
        let Some(omega) = omega_at(t) else { continue };
        if omega.abs() < QUADRATURE_MIN_RATE {
            continue;
        }
        let (uf, vf) = tail_at(t);
        let value = quadrature_envelope(probe.u[j] - uf, probe.v[j] - vf, omega);
        if best.map_or(true, |p| value > p.value) {
            best = Some(PeakReading {
                t2: epsilon * epsilon * t,
                value,
            });
        }
    }
    best
}

/// `W` of a transported coefficient anywhere on its span: the slow
/// cumulative amplitude interpolates linearly between nodes while the
/// carrier is rebuilt exactly from the characteristic's phase integral.
fn coefficient_w_at(ch: &Characteristic, co: &LayerCoefficient, sigma: f64) -> Complex64 {
    let n = co.sigma.len();
    let hi = co.sigma.partition_point(|&s| s < sigma).clamp(1, n - 1);
    let (s0, s1) = (co.sigma[hi - 1], co.sigma[hi]);
    let w = ((sigma - s0) / (s1 - s0)).clamp(0.0, 1.0);
    let c = co.amplitude[hi - 1] * (1.0 - w) + co.amplitude[hi] * w;
    let sign = co.convention.sign();
    let cap = ch.state(sigma).capital_lambda;
    -Complex64::new(0.0, sign) * Complex64::new(0.0, -sign * cap).exp() * c
}

/// Curve parameter at a given `x2`, by linear interpolation along the
/// sampled curve.
fn xi_for_x2(curve: &ResonanceCurve, x2: f64) -> Result<f64> {
    let s = &curve.samples;
    let (lo, hi) = (s[0].point.x2, s[s.len() - 1].point.x2);
    if x2 < lo.min(hi) || x2 > lo.max(hi) {
        return Err(Error::Validation(format!(
            "probe x2 = {x2} lies outside the curve window [{:.4}, {:.4}]",
            lo.min(hi),
            lo.max(hi)
        )));
    }
    let k = s
        .partition_point(|c| c.point.x2 < x2)
        .clamp(1, s.len() - 1);
    let (a, b) = (&s[k - 1], &s[k]);
    let w = ((x2 - a.point.x2) / (b.point.x2 - a.point.x2)).clamp(0.0, 1.0);
    Ok(a.xi + w * (b.xi - a.xi))
}

/// Envelope value at `(t2, y)` interpolated linearly between frames and
/// grid nodes; zero outside the grid (where the field must have decayed).
fn trajectory_sample(traj: &EnvelopeTrajectory, t2: f64, y: f64) -> Complex64 {
    let frames = &traj.frames;
    let n = frames.len();
    let k = frames.partition_point(|f| f.t2 < t2).clamp(1, n - 1);
    let (fa, fb) = (&frames[k - 1], &frames[k]);
    let w = if fb.t2 > fa.t2 {
        ((t2 - fa.t2) / (fb.t2 - fa.t2)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    frame_sample(fa, y) * (1.0 - w) + frame_sample(fb, y) * w
}

fn frame_sample(f: &EnvelopeField, y: f64) -> Complex64 {
    let xs = &f.xi;
    let n = xs.len();
    if y < xs[0] || y > xs[n - 1] {
        return Complex64::new(0.0, 0.0);
    }
    let k = xs.partition_point(|&v| v < y).clamp(1, n - 1);
    let w = ((y - xs[k - 1]) / (xs[k] - xs[k - 1])).clamp(0.0, 1.0);
    f.values[k - 1] * (1.0 - w) + f.values[k] * w
}

/// Largest spatial quadrature envelope `|u - i v / Phi_t| / (2 eps)` of the
/// *free* wave over a snapshot, restricted to `|x2 - x2_center| <= x2_half`:
/// the adiabatically forced tail is subtracted pointwise first, so the
/// reading is the packet alone.
fn snapshot_quadrature_peak(
    snap: &Snapshot,
    xs: &[f64],
    epsilon: f64,
    phase: &PhaseSpec,
    force: &ForceProfile,
    field: &PhaseField,
    x2_center: f64,
    x2_half: f64,
) -> Option<f64> {
    let t2 = epsilon * epsilon * snap.t;
    let mut best: Option<f64> = None;
    for (i, &x) in xs.iter().enumerate() {
        let x2 = epsilon * epsilon * x;
        if (x2 - x2_center).abs() > x2_half {
            continue;
        }
        let Ok((_, phi_t, _)) = field.sample(t2, x2) else {
            continue;
        };
        if phi_t.abs() < QUADRATURE_MIN_RATE {
            continue;
        }
        let (uf, vf) = forced_tail(phase, force, epsilon, snap.t, x);
        let v = Complex64::new(snap.u[i] - uf, -(snap.v[i] - vf) / phi_t).norm()
            / (2.0 * epsilon);
        if best.map_or(true, |b| v > b) {
            best = Some(v);
        }
    }
    best
}

/// The snapshot whose slow time is nearest `t2`.
fn nearest_snapshot<'a>(traj: &'a Trajectory, epsilon: f64, t2: f64) -> Option<&'a Snapshot> {
    traj.snapshots.iter().min_by(|a, b| {
        let da = (epsilon * epsilon * a.t - t2).abs();
        let db = (epsilon * epsilon * b.t - t2).abs();
        da.partial_cmp(&db).unwrap()
    })
}

// ---------------------------------------------------------------------------
// Prediction assembly
// ---------------------------------------------------------------------------

/// Initial state on the adiabatically forced branch: the pre-resonance
/// expansion evaluated at `t = 0`, with the velocity from the carrier.
/// Starting from rest instead would inject an order-one free transient
/// (relative to the forced response) that rings through the whole record
/// at the rest frequency and decays only like the inverse square root of
/// time; starting on the branch removes it to the expansion's own order.
fn branch_initial_state(
    truncation: usize,
    phase: &PhaseSpec,
    force: &ForceProfile,
    gamma: f64,
    epsilon: f64,
    margin: f64,
    grid_xs: &[f64],
) -> Result<FieldState> {
    let pf = evaluate_pre_field(
        truncation, phase, force, gamma, epsilon, grid_xs, 0.0, margin,
    )?;
    Ok(FieldState {
        u: pf.u,
        v: pf.u_t,
        t: 0.0,
    })
}

/// Quadrature readings skip the forced-tail subtraction where the detuning
/// is smaller than this: the adiabatic response diverges at the crossing.
const TAIL_MIN_DETUNING: f64 = 0.25;

/// Leading-order adiabatically forced response and its velocity at one fast
/// point. Valid on either side of the crossing where the detuning is
/// bounded away from zero; the omitted corrections are one order smaller.
/// After the crossing the field is this tail plus the free packet, so
/// packet measurements subtract it and packet predictions add it.
fn forced_tail(
    phase: &PhaseSpec,
    force: &ForceProfile,
    epsilon: f64,
    t: f64,
    x: f64,
) -> (f64, f64) {
    let eps2 = epsilon * epsilon;
    let (t2, x2) = (eps2 * t, eps2 * x);
    let l = phase.l(t2, x2);
    if l.abs() < TAIL_MIN_DETUNING {
        return (0.0, 0.0);
    }
    let a = -force.eval(epsilon * x) / l;
    let carrier = Complex64::new(0.0, phase.s(t2, x2) / eps2).exp();
    let u = 2.0 * eps2 * (a * carrier).re;
    let v = 2.0 * eps2 * (Complex64::new(0.0, phase.s_t(t2, x2)) * a * carrier).re;
    (u, v)
}

/// The post-resonance pipeline: curve, eikonal phase, accumulated crossing
/// amplitude, matched initial data, and the evolved envelope.
struct PostPipeline {
    curve: ResonanceCurve,
    field: PhaseField,
    traj: EnvelopeTrajectory,
    /// Solver-coordinate position of the probe.
    y_probe: f64,
}

fn build_post_pipeline(
    cfg: &CompareConfig,
    x2_probe: f64,
    t2_crossing_hint: f64,
    t2_hi: f64,
) -> Result<PostPipeline> {
    let eps = cfg.epsilon;
    let half = cfg.window_half_x2();
    let scan = SlowWindow::new(
        (t2_crossing_hint - 0.8).max(1e-3),
        t2_crossing_hint + 0.8,
        -half,
        half,
    );
    let curve = find_resonance_curve(
        &cfg.phase,
        eps,
        &scan,
        &CurveConfig {
            n_samples: 129,
            origin_x2: None,
        },
    )?;
    let t2_curve_max = curve
        .samples
        .iter()
        .map(|s| s.point.t2)
        .fold(f64::NEG_INFINITY, f64::max);
    let window = SlowWindow::new(
        t2_curve_max + 0.005,
        t2_hi,
        -0.98 * half,
        0.98 * half,
    );
    let field = solve_eikonal(&curve, &window, 121, 41)?;
    let acc = accumulated_amplitude(&curve, &cfg.force, cfg.n_xi, None, CONVENTION)?;
    let init = nlse_initial_data(&acc, &field, cfg.nlse_grid, cfg.nlse_margin)?;
    let g_env = cubic_coefficient(cfg.gamma);
    let traj = nlse_evolve(&init, t2_hi, cfg.nlse_dt2, g_env, cfg.nlse_frames)?;
    let xi_p = xi_for_x2(&curve, x2_probe)?;
    let y_probe = init.geometry.xi_scale * xi_p;
    Ok(PostPipeline {
        curve,
        field,
        traj,
        y_probe,
    })
}

/// Layer prediction machinery: a fan of characteristics with the leading
/// transported coefficient on each.
struct LayerPipeline {
    fan: CharacteristicFan,
    leads: Vec<LayerCoefficient>,
}

fn build_layer_pipeline(cfg: &CompareConfig, curve: &ResonanceCurve) -> Result<LayerPipeline> {
    let opts = accumulation_options();
    let fan = characteristic_fan(curve, &opts, cfg.n_fan)?;
    let leads: Vec<LayerCoefficient> = fan
        .chars
        .par_iter()
        .map(|ch| layer_leading(ch, &cfg.force, CONVENTION))
        .collect::<Result<_>>()?;
    Ok(LayerPipeline { fan, leads })
}

impl LayerPipeline {
    /// Real-field prediction at the probe: locate the characteristic through
    /// `(t1, x1)`, interpolate the transported coefficient across the fan,
    /// and rebuild the carrier from the exact phase.
    fn predict(
        &self,
        phase: &PhaseSpec,
        epsilon: f64,
        t: f64,
        x_probe: f64,
    ) -> Result<f64> {
        let t1 = epsilon * t;
        let x1 = epsilon * x_probe;
        let lt = self.fan.line_table(t1)?;
        let (xi_s, sig_s) = lt.locate(x1)?;
        let chars = &self.fan.chars;
        let k = chars
            .partition_point(|c| c.xi < xi_s)
            .clamp(1, chars.len() - 1);
        let (ca, cb) = (&chars[k - 1], &chars[k]);
        let w = ((xi_s - ca.xi) / (cb.xi - ca.xi)).clamp(0.0, 1.0);
        let wa = coefficient_w_at(ca, &self.leads[k - 1], sig_s);
        let wb = coefficient_w_at(cb, &self.leads[k], sig_s);
        let coeff = wa * (1.0 - w) + wb * w;
        let t2 = epsilon * t1;
        let x2 = epsilon * x1;
        let carrier = Complex64::new(0.0, phase.s(t2, x2) / (epsilon * epsilon)).exp();
        Ok(2.0 * (Complex64::new(epsilon, 0.0) * coeff * carrier).re)
    }
}

// ---------------------------------------------------------------------------
// The matched comparison
// ---------------------------------------------------------------------------

/// Runs the direct solver once and measures all three asymptotic
/// descriptions against it, region by region, with seam cross-checks and
/// amplitude peaks.
pub fn compare_regimes(cfg: &CompareConfig) -> Result<ComparisonReport> {
    let start = Instant::now();
    cfg.validate()?;
    let digest = config_digest(cfg);
    let mut notes = Vec::new();

    let eps = cfg.epsilon;
    let eps2 = eps * eps;
    let params = cfg.direct_params()?;
    let probe_x = {
        // The grid snaps the probe; all predictions use the snapped spot.
        let idx = params.grid.index_of(cfg.probe_x);
        params.grid.xs()[idx]
    };
    let x2_probe = eps2 * probe_x;

    let windows = region_windows(
        &cfg.phase,
        eps,
        &cfg.margins,
        x2_probe,
        0.0,
        cfg.t2_end,
    )?;

    let degenerate = matches!(cfg.force, ForceProfile::Zero)
        || cfg.force.support_radius() == 0.0;

    let init = match branch_initial_state(
        cfg.truncation,
        &cfg.phase,
        &cfg.force,
        cfg.gamma,
        eps,
        cfg.margins.pre,
        &params.grid.xs(),
    ) {
        Ok(state) => state,
        Err(e) => {
            notes.push(format!(
                "branch initial state unavailable ({e}); starting from rest"
            ));
            FieldState::zero(params.grid.nx)
        }
    };
    let traj = run(&params, &init)?;
    let probe = &traj.probes[0];
    let dt = probe.t[1] - probe.t[0];
    let fast = |w: (f64, f64)| (w.0 / eps2, w.1 / eps2);

    // --- pre region -------------------------------------------------------
    let pre_idx = {
        let (lo, hi) = fast(windows.pre);
        strided_indices(&probe.t, lo, hi, dt)
    };
    let mut pre_dir = Vec::with_capacity(pre_idx.len());
    let mut pre_pred = Vec::with_capacity(pre_idx.len());
    for &j in &pre_idx {
        let pf = evaluate_pre_field(
            cfg.truncation,
            &cfg.phase,
            &cfg.force,
            cfg.gamma,
            eps,
            &[probe_x],
            probe.t[j],
            cfg.margins.pre,
        )?;
        pre_dir.push(probe.u[j]);
        pre_pred.push(pf.u[0]);
    }
    let (pre_l2, pre_li) = rel_errors(&pre_dir, &pre_pred);

    let pre_bulk_errs = windows.pre_bulk.map(|w| {
        let (lo, hi) = fast(w);
        let idx = strided_indices(&probe.t, lo, hi, dt);
        let mut d = Vec::with_capacity(idx.len());
        let mut p = Vec::with_capacity(idx.len());
        for &j in &idx {
            // Samples sit inside the pre window, so the evaluation above
            // already proved the margin; reuse the same call.
            let pf = evaluate_pre_field(
                cfg.truncation,
                &cfg.phase,
                &cfg.force,
                cfg.gamma,
                eps,
                &[probe_x],
                probe.t[j],
                cfg.margins.pre,
            )
            .expect("bulk window lies inside the validated pre region");
            d.push(probe.u[j]);
            p.push(pf.u[0]);
        }
        rel_errors(&d, &p)
    });

    // Optional demodulated-envelope comparison over the bulk pre window.
    let mut pre_env_l2 = None;
    let mut pre_env_li = None;
    if let Some(wb) = windows.pre_bulk {
        let (lo, hi) = fast(wb);
        match demodulate_probe(probe, eps, &cfg.phase, (lo, hi), &cfg.demod) {
            Ok(dm) => {
                let mut meas = Vec::with_capacity(dm.t.len());
                let mut pred = Vec::with_capacity(dm.t.len());
                for (k, &tk) in dm.t.iter().enumerate() {
                    let pf = evaluate_pre_field(
                        cfg.truncation,
                        &cfg.phase,
                        &cfg.force,
                        cfg.gamma,
                        eps,
                        &[probe_x],
                        tk,
                        cfg.margins.pre,
                    )?;
                    meas.push(dm.envelope[k]);
                    pred.push(2.0 * pf.envelope[0]);
                }
                let (l2, li) = rel_errors_complex(&meas, &pred);
                pre_env_l2 = Some(l2);
                pre_env_li = Some(li);
            }
            Err(e) => notes.push(format!(
                "pre-envelope demodulation skipped: {e}"
            )),
        }
    } else {
        notes.push("pre bulk window empty; no envelope demodulation".into());
    }

    // --- post pipeline (built before the layer so the curve is shared) ----
    let post_pipe = build_post_pipeline(
        cfg,
        x2_probe,
        windows.t2_crossing,
        cfg.t2_end + 0.5,
    )?;

    // --- layer region ------------------------------------------------------
    let layer_pipe = build_layer_pipeline(cfg, &post_pipe.curve)?;
    let layer_idx = {
        let (lo, hi) = fast(windows.layer);
        strided_indices(&probe.t, lo, hi, dt)
    };
    let mut lay_dir = Vec::with_capacity(layer_idx.len());
    let mut lay_pred = Vec::with_capacity(layer_idx.len());
    for &j in &layer_idx {
        lay_dir.push(probe.u[j]);
        lay_pred.push(layer_pipe.predict(&cfg.phase, eps, probe.t[j], probe_x)?);
    }
    let (lay_l2, lay_li) = rel_errors(&lay_dir, &lay_pred);

    // --- post region --------------------------------------------------------
    let post_idx = {
        let (lo, hi) = fast(windows.post);
        strided_indices(&probe.t, lo, hi, dt)
    };
    let post_predict = |t: f64| -> Result<f64> {
        let t2 = eps2 * t;
        let q = trajectory_sample(&post_pipe.traj, t2, post_pipe.y_probe);
        let (phi, _, _) = post_pipe.field.sample(t2, x2_probe)?;
        let carrier = Complex64::new(0.0, phi / eps2).exp();
        // The force keeps driving off-resonantly behind the crossing: the
        // full field is the free packet plus the adiabatic tail.
        let (uf, _) = forced_tail(&cfg.phase, &cfg.force, eps, t, probe_x);
        Ok(2.0 * eps * (q.conj() * carrier).re + uf)
    };
    let mut post_dir = Vec::with_capacity(post_idx.len());
    let mut post_pred = Vec::with_capacity(post_idx.len());
    for &j in &post_idx {
        post_dir.push(probe.u[j]);
        post_pred.push(post_predict(probe.t[j])?);
    }
    let (post_l2, post_li) = rel_errors(&post_dir, &post_pred);

    // Optional demodulated envelope against the evolved prediction.
    let mut post_env_l2 = None;
    let mut post_env_li = None;
    {
        let lo = windows.post.0 / eps2;
        let hi = (windows.post.1 - 0.35 * (windows.post.1 - windows.post.0).min(1.0)) / eps2;
        let (f_lo, f_hi) = (
            post_pipe.field.t2_axis[0],
            *post_pipe.field.t2_axis.last().unwrap(),
        );
        let theta = |t: f64| -> f64 {
            let t2 = (eps2 * t).clamp(f_lo + 1e-9, f_hi - 1e-9);
            post_pipe
                .field
                .sample(t2, x2_probe)
                .map(|s| s.0)
                .unwrap_or(0.0)
                / eps2
        };
        if hi > lo {
            match demodulate(&probe.t, &probe.u, &theta, (lo, hi), &cfg.demod) {
                Ok(dm) => {
                    let mut meas = Vec::with_capacity(dm.t.len());
                    let mut pred = Vec::with_capacity(dm.t.len());
                    for (k, &tk) in dm.t.iter().enumerate() {
                        let q =
                            trajectory_sample(&post_pipe.traj, eps2 * tk, post_pipe.y_probe);
                        meas.push(dm.envelope[k]);
                        pred.push(2.0 * eps * q.conj());
                    }
                    let (l2, li) = rel_errors_complex(&meas, &pred);
                    post_env_l2 = Some(l2);
                    post_env_li = Some(li);
                }
                Err(e) => notes.push(format!("post-envelope demodulation skipped: {e}")),
            }
        } else {
            notes.push("post window too short for a settled demodulation".into());
        }
    }

    // --- seams ---------------------------------------------------------------
    let seam = |w: (f64, f64),
                pair: (Regime, Regime),
                pred_a: &dyn Fn(f64) -> Result<f64>,
                pred_b: &dyn Fn(f64) -> Result<f64>,
                bound: f64|
     -> Result<SeamReport> {
        let (lo, hi) = fast(w);
        let idx = strided_indices(&probe.t, lo, hi, dt);
        let mut d2 = 0.0;
        let mut m2 = 0.0;
        for &j in &idx {
            let a = pred_a(probe.t[j])?;
            let b = pred_b(probe.t[j])?;
            m2 += (a - b) * (a - b);
            d2 += probe.u[j] * probe.u[j];
        }
        let rel = if d2 > 0.0 {
            (m2 / d2).sqrt()
        } else if m2 > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        Ok(SeamReport {
            pair,
            window_t2: w,
            n_samples: idx.len(),
            rel_l2: rel,
            bound,
            consistent: rel <= bound + 1e-12,
        })
    };

    let pre_predict = |t: f64| -> Result<f64> {
        let pf = evaluate_pre_field(
            cfg.truncation,
            &cfg.phase,
            &cfg.force,
            cfg.gamma,
            eps,
            &[probe_x],
            t,
            cfg.margins.pre,
        )?;
        Ok(pf.u[0])
    };
    let lay_predict = |t: f64| layer_pipe.predict(&cfg.phase, eps, t, probe_x);

    let seam_pre_layer = seam(
        windows.seam_pre_layer,
        (Regime::Pre, Regime::Layer),
        &pre_predict,
        &lay_predict,
        2.0 * pre_l2.max(lay_l2),
    )?;
    let seam_layer_post = seam(
        windows.seam_layer_post,
        (Regime::Layer, Regime::Post),
        &lay_predict,
        &post_predict,
        2.0 * lay_l2.max(post_l2),
    )?;

    // --- peaks and arbitration -------------------------------------------
    let peak_pre = windows.pre_bulk.and_then(|w| {
        let (lo, hi) = fast(w);
        let idx = strided_indices(&probe.t, lo, hi, dt);
        // The pre-side reading IS the forced response: no subtraction.
        probe_quadrature_peak(
            probe,
            &idx,
            |t| Some(cfg.phase.s_t(eps2 * t, x2_probe)),
            |_| (0.0, 0.0),
            eps,
        )
    });
    let peak_post = windows.post_bulk.and_then(|w| {
        let (lo, hi) = fast(w);
        let idx = strided_indices(&probe.t, lo, hi, dt);
        // The post-side reading is the free packet: subtract the tail.
        probe_quadrature_peak(
            probe,
            &idx,
            |t| {
                post_pipe
                    .field
                    .sample(eps2 * t, x2_probe)
                    .ok()
                    .map(|s| s.1)
            },
            |t| forced_tail(&cfg.phase, &cfg.force, eps, t, probe_x),
            eps,
        )
    });
    let amplitude_ratio = match (peak_pre, peak_post) {
        (Some(a), Some(b)) if a.value > 0.0 => Some(b.value / a.value),
        _ => None,
    };

    let arbitration = windows.post_bulk.and_then(|w| {
        let t2_mid = 0.5 * (w.0 + w.1);
        let snap = nearest_snapshot(&traj, eps, t2_mid)?;
        let t2_snap = eps2 * snap.t;
        let half = 0.9 * cfg.window_half_x2();
        let direct = snapshot_quadrature_peak(
            snap,
            &params.grid.xs(),
            eps,
            &cfg.phase,
            &cfg.force,
            &post_pipe.field,
            0.0,
            half,
        )?;
        let mut predicted = 0.0f64;
        for f in &post_pipe.traj.frames {
            if (f.t2 - t2_snap).abs() <= 0.6 * (post_pipe.traj.frames[1].t2
                - post_pipe.traj.frames[0].t2)
                .max(1e-9)
            {
                predicted = predicted.max(f.max_abs());
            }
        }
        if predicted == 0.0 {
            predicted = frame_peak_at(&post_pipe.traj, t2_snap);
        }
        if predicted <= 0.0 {
            return None;
        }
        let ratio = direct / predicted;
        let halved = direct / (0.5 * predicted);
        let full_wins = (ratio - 1.0).abs() < (halved - 1.0).abs();
        Some(ArbitrationReport {
            t2: t2_snap,
            direct_peak: direct,
            predicted_peak: predicted,
            ratio,
            halved_ratio: halved,
            full_factor_wins: full_wins,
            within_tolerance: (ratio - 1.0).abs() <= ARBITRATION_TOLERANCE,
        })
    });

    let report = ComparisonReport {
        epsilon: eps,
        gamma: cfg.gamma,
        truncation: cfg.truncation,
        probe_x,
        t2_end: cfg.t2_end,
        margins: cfg.margins,
        windows,
        force_description: cfg.force.describe(),
        pre: RegionReport {
            regime: Regime::Pre,
            window_t2: windows.pre,
            n_samples: pre_idx.len(),
            field_rel_l2: pre_l2,
            field_rel_linf: pre_li,
            bulk_window_t2: windows.pre_bulk,
            bulk_rel_l2: pre_bulk_errs.map(|e| e.0),
            bulk_rel_linf: pre_bulk_errs.map(|e| e.1),
            envelope_rel_l2: pre_env_l2,
            envelope_rel_linf: pre_env_li,
        },
        layer: RegionReport {
            regime: Regime::Layer,
            window_t2: windows.layer,
            n_samples: layer_idx.len(),
            field_rel_l2: lay_l2,
            field_rel_linf: lay_li,
            bulk_window_t2: None,
            bulk_rel_l2: None,
            bulk_rel_linf: None,
            envelope_rel_l2: None,
            envelope_rel_linf: None,
        },
        post: RegionReport {
            regime: Regime::Post,
            window_t2: windows.post,
            n_samples: post_idx.len(),
            field_rel_l2: post_l2,
            field_rel_linf: post_li,
            bulk_window_t2: windows.post_bulk,
            bulk_rel_l2: None,
            bulk_rel_linf: None,
            envelope_rel_l2: post_env_l2,
            envelope_rel_linf: post_env_li,
        },
        seam_pre_layer,
        seam_layer_post,
        peak_pre,
        peak_post,
        amplitude_ratio,
        arbitration,
        degenerate,
        runtime_seconds: start.elapsed().as_secs_f64(),
        digest,
        notes,
    };
    Ok(report)
}

/// Peak `|Psi|` of the frame pair bracketing `t2`, interpolated.
fn frame_peak_at(traj: &EnvelopeTrajectory, t2: f64) -> f64 {
    let frames = &traj.frames;
    let n = frames.len();
    let k = frames.partition_point(|f| f.t2 < t2).clamp(1, n - 1);
    let (fa, fb) = (&frames[k - 1], &frames[k]);
    fa.max_abs().max(fb.max_abs())
}

// ---------------------------------------------------------------------------
// Scale sweep
// ---------------------------------------------------------------------------

/// One row of an epsilon sweep; failed rows carry the error and the sweep
/// continues.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub report: Option<ComparisonReport>,
    pub error: Option<String>,
}

/// A whole sweep with fitted scale exponents.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    /// Log-log slope of the bulk pre-region error against `eps` (the
    /// truncated expansion predicts 1).
    pub pre_error_slope: Option<f64>,
    /// Log-log slope of the bulk pre peak (predicts 2).
    pub peak_pre_slope: Option<f64>,
    /// Log-log slope of the bulk post peak (predicts 1).
    pub peak_post_slope: Option<f64>,
    /// Log-log slope of the post/pre amplitude ratio (predicts -1).
    pub ratio_slope: Option<f64>,
    /// Bulk pre errors shrink monotonically with `eps`.
    pub pre_error_monotone: Option<bool>,
    /// All rows ran a zero force.
    pub degenerate: bool,
}

fn log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return None;
    }
    Some((n * sxy - sx * sy) / denom)
}

/// Repeats the matched comparison at each `eps` (rows run in parallel,
/// largest first) and fits the scale exponents. Row failures are recorded,
/// not fatal; the fits use whatever rows survive.
pub fn epsilon_sweep(base: &CompareConfig, epsilons: &[f64]) -> Result<SweepSummary> {
    if epsilons.len() < 2 {
        return Err(Error::Validation(
            "a sweep needs at least two epsilon values".into(),
        ));
    }
    for &e in epsilons {
        if !(e > 0.0 && e < 1.0) {
            return Err(Error::Validation(format!(
                "sweep epsilon must be in (0, 1), got {e}"
            )));
        }
    }
    let mut eps_sorted = epsilons.to_vec();
    eps_sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eps_sorted.dedup();

    let rows: Vec<SweepRow> = eps_sorted
        .par_iter()
        .map(|&e| {
            let mut c = base.clone();
            c.epsilon = e;
            match compare_regimes(&c) {
                Ok(r) => SweepRow {
                    epsilon: e,
                    report: Some(r),
                    error: None,
                },
                Err(err) => SweepRow {
                    epsilon: e,
                    report: None,
                    error: Some(err.to_string()),
                },
            }
        })
        .collect();

    let valid: Vec<(&SweepRow, &ComparisonReport)> = rows
        .iter()
        .filter_map(|r| r.report.as_ref().map(|rep| (r, rep)))
        .collect();
    let degenerate = !valid.is_empty() && valid.iter().all(|(_, rep)| rep.degenerate);

    let collect_pts = |f: &dyn Fn(&ComparisonReport) -> Option<f64>| -> Vec<(f64, f64)> {
        valid
            .iter()
            .filter_map(|(row, rep)| f(rep).map(|v| (row.epsilon, v)))
            .collect()
    };

    let pre_err_pts = collect_pts(&|r| r.pre.bulk_rel_l2);
    let pre_error_slope = if degenerate {
        None
    } else {
        log_slope(&pre_err_pts)
    };
    let peak_pre_slope = if degenerate {
        None
    } else {
        log_slope(&collect_pts(&|r| r.peak_pre.map(|p| p.value)))
    };
    let peak_post_slope = if degenerate {
        None
    } else {
        log_slope(&collect_pts(&|r| r.peak_post.map(|p| p.value)))
    };
    let ratio_slope = if degenerate {
        None
    } else {
        log_slope(&collect_pts(&|r| r.amplitude_ratio))
    };
    let pre_error_monotone = if degenerate || pre_err_pts.len() < 2 {
        None
    } else {
        // Rows are ordered by descending eps; errors should not grow as
        // eps shrinks.
        Some(pre_err_pts.windows(2).all(|w| w[1].1 <= w[0].1 * 1.05))
    };

    Ok(SweepSummary {
        rows,
        pre_error_slope,
        peak_pre_slope,
        peak_post_slope,
        ratio_slope,
        pre_error_monotone,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// Packet-generation scenario
// ---------------------------------------------------------------------------

/// Configuration of the packet-generation scenario: a narrow, strong pulse
/// (main branch) against a ten-times-weaker copy (control branch).
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub epsilon: f64,
    /// Field cubic coupling; must make the envelope focusing.
    pub gamma: f64,
    pub phase: PhaseSpec,
    /// Main pulse amplitude.
    pub amplitude: f64,
    /// Pulse width (slow transverse units).
    pub width: f64,
    /// Pulse center (slow transverse units).
    pub center: f64,
    /// Control branch amplitude factor.
    pub control_factor: f64,
    /// Slow-time offsets past the crossing at which the packet peak is read.
    pub early_offset: f64,
    pub late_offset: f64,
    /// Packet-zone half-width, in curve-parameter units.
    pub zone_xi: f64,
    pub n_xi: usize,
    pub n_curve: usize,
    pub nlse_grid: usize,
    pub nlse_margin: f64,
    pub nlse_dt2: f64,
}

impl Default for ScenarioConfig {
    /// The main amplitude is tuned so the census's bound-state amplitude
    /// matches the initial envelope peak: the emerging packet then locks on
    /// with very little breathing (its envelope peak holds to a few percent
    /// over a slow-time unit), while the ten-times-weaker control sits far
    /// below the binding threshold and spreads dispersively.  The readings
    /// are one slow-time unit apart, with the early one taken shortly after
    /// the crossing where the dispersing control still towers over its own
    /// far field.
    fn default() -> Self {
        ScenarioConfig {
            epsilon: 0.1,
            gamma: -1.0,
            phase: PhaseSpec::quadratic(),
            amplitude: 3.0,
            width: 0.35,
            center: 0.0,
            control_factor: 0.1,
            early_offset: 0.2,
            late_offset: 1.2,
            zone_xi: 4.0,
            n_xi: 129,
            n_curve: 129,
            nlse_grid: 2048,
            nlse_margin: 6.0,
            nlse_dt2: 1e-3,
        }
    }
}

/// Outcome of one scenario branch.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioBranch {
    pub label: String,
    pub amplitude: f64,
    /// Bound states of the matched initial envelope.
    pub census_count: usize,
    pub area: f64,
    pub scaled_area: f64,
    pub soliton_amplitudes: Vec<f64>,
    pub soliton_velocities: Vec<f64>,
    /// Direct packet peaks (envelope units) shortly after the crossing and
    /// one slow-time unit later.
    pub peak_early: f64,
    pub peak_late: f64,
    /// `1 - peak_late / peak_early`.
    pub decay_fraction: f64,
    /// Envelope-equation predictions of the two peaks; `None` when the
    /// envelope was not evolved that far.  The early reading sits inside the
    /// matching layer, where the envelope description is still settling, so
    /// only the late ratio is a sharp test of the prediction.
    pub predicted_peak_early: Option<f64>,
    pub predicted_peak_late: Option<f64>,
    /// Direct over predicted peak at each reading.
    pub direct_to_predicted_early: Option<f64>,
    pub direct_to_predicted_late: Option<f64>,
    pub t2_early: f64,
    pub t2_late: f64,
}

/// The full scenario: a strong pulse that must leave a persistent packet,
/// and a weak control that must disperse.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub epsilon: f64,
    pub gamma: f64,
    /// Envelope cubic coupling implied by `gamma`.
    pub envelope_coupling: f64,
    pub main: ScenarioBranch,
    pub control: ScenarioBranch,
    /// True when the pulse amplitude is zero: nothing was driven.
    pub degenerate: bool,
    pub runtime_seconds: f64,
}

fn zero_branch(label: &str, t2_early: f64, t2_late: f64) -> ScenarioBranch {
    ScenarioBranch {
        label: label.into(),
        amplitude: 0.0,
        census_count: 0,
        area: 0.0,
        scaled_area: 0.0,
        soliton_amplitudes: Vec::new(),
        soliton_velocities: Vec::new(),
        peak_early: 0.0,
        peak_late: 0.0,
        decay_fraction: 0.0,
        predicted_peak_early: None,
        predicted_peak_late: None,
        direct_to_predicted_early: None,
        direct_to_predicted_late: None,
        t2_early,
        t2_late,
    }
}

/// Drives the resonance with a strong localized pulse and checks that the
/// envelope census, the envelope evolution and the direct field all tell
/// the same story: the main branch locks into a persistent packet, the
/// control branch disperses.
pub fn soliton_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport> {
    let start = Instant::now();
    if !(cfg.epsilon > 0.0 && cfg.epsilon < 1.0) {
        return Err(Error::Validation(format!(
            "epsilon must be in (0, 1), got {}",
            cfg.epsilon
        )));
    }
    if !(cfg.width > 0.0) {
        return Err(Error::Validation("pulse width must be positive".into()));
    }
    if !(cfg.control_factor > 0.0 && cfg.control_factor < 1.0) {
        return Err(Error::Validation(
            "the control factor must sit strictly between 0 and 1".into(),
        ));
    }
    if !(cfg.late_offset > cfg.early_offset && cfg.early_offset > 0.0) {
        return Err(Error::Validation(
            "peak readings need 0 < early-offset < late-offset".into(),
        ));
    }
    let g_env = cubic_coefficient(cfg.gamma);
    let degenerate = cfg.amplitude == 0.0;
    if !(g_env > 0.0) && !degenerate {
        return Err(Error::Validation(format!(
            "the envelope coupling is {g_env} for field gamma = {}; packet generation \
             needs a focusing envelope (negative field coupling)",
            cfg.gamma
        )));
    }

    // Crossing time at the pulse center line.
    let x2_center = cfg.epsilon * cfg.center;
    let t2_crossing = t2_where_l(&cfg.phase, x2_center, 0.0, 1e-3, 10.0).ok_or_else(|| {
        Error::Validation("the detuning never crosses zero near the pulse".into())
    })?;
    let t2_early = t2_crossing + cfg.early_offset;
    let t2_late = t2_crossing + cfg.late_offset;

    if degenerate {
        return Ok(ScenarioReport {
            epsilon: cfg.epsilon,
            gamma: cfg.gamma,
            envelope_coupling: g_env,
            main: zero_branch("main", t2_early, t2_late),
            control: zero_branch("control", t2_early, t2_late),
            degenerate: true,
            runtime_seconds: start.elapsed().as_secs_f64(),
        });
    }

    // The main envelope is evolved across the whole window; the control
    // prediction is only consumed at the early reading (its persistence
    // verdict comes from the direct field), so its evolution stops there
    // rather than paying for a dispersing wake nobody reads.
    let main = scenario_branch(cfg, cfg.amplitude, "main", g_env, t2_crossing, t2_late + 0.05)?;
    let control = scenario_branch(
        cfg,
        cfg.amplitude * cfg.control_factor,
        "control",
        g_env,
        t2_crossing,
        t2_early + 0.1,
    )?;

    Ok(ScenarioReport {
        epsilon: cfg.epsilon,
        gamma: cfg.gamma,
        envelope_coupling: g_env,
        main,
        control,
        degenerate: false,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

fn scenario_branch(
    cfg: &ScenarioConfig,
    amplitude: f64,
    label: &str,
    g_env: f64,
    t2_crossing: f64,
    t2_evolve_to: f64,
) -> Result<ScenarioBranch> {
    let eps = cfg.epsilon;
    let eps2 = eps * eps;
    let force = ForceProfile::gaussian(amplitude, cfg.width, cfg.center);
    let t2_early = t2_crossing + cfg.early_offset;
    let t2_late = t2_crossing + cfg.late_offset;

    // Envelope side: curve, crossing amplitude, matched data, census, and
    // the evolved prediction.
    let half_x2 = 1.15 * force.support_radius().max(cfg.zone_xi) * eps;
    let scan = SlowWindow::new((t2_crossing - 0.8).max(1e-3), t2_crossing + 0.8, -half_x2
        + x2_center_of(cfg), half_x2 + x2_center_of(cfg));
    let curve = find_resonance_curve(
        &cfg.phase,
        eps,
        &scan,
        &CurveConfig {
            n_samples: cfg.n_curve,
            origin_x2: Some(x2_center_of(cfg)),
        },
    )?;
    let t2_curve_max = curve
        .samples
        .iter()
        .map(|s| s.point.t2)
        .fold(f64::NEG_INFINITY, f64::max);
    let window = SlowWindow::new(
        t2_curve_max + 0.005,
        t2_late + 0.3,
        x2_center_of(cfg) - 0.98 * half_x2,
        x2_center_of(cfg) + 0.98 * half_x2,
    );
    let field = solve_eikonal(&curve, &window, 121, 41)?;
    let acc = accumulated_amplitude(&curve, &force, cfg.n_xi, None, CONVENTION)?;
    let init = nlse_initial_data(&acc, &field, cfg.nlse_grid, cfg.nlse_margin)?;
    let census = soliton_census(&init, g_env)?;
    let traj = nlse_evolve(&init, t2_evolve_to, cfg.nlse_dt2, g_env, 61)?;

    // Direct side.
    let support_x = (force.support_radius().max(cfg.zone_xi) / eps) * 1.1;
    let t_end = (t2_late + 0.1) / eps2;
    let interior = support_x + 0.5 * t_end + 5.0;
    let half = ((interior / 0.9) / 10.0).ceil() * 10.0;
    let nx = (((2.0 * half / 0.2).ceil() as usize).next_power_of_two()).clamp(256, 32768);
    let mut params = RunParams {
        epsilon: eps,
        gamma: cfg.gamma,
        force: force.clone(),
        phase: cfg.phase.clone(),
        grid: FastGrid {
            x_min: -half,
            x_max: half,
            nx,
            boundary: Boundary::AbsorbingSponge,
        },
        dt: 0.02,
        t_end,
        operator: SpaceOperator::Spectral,
        probes: vec![ProbeSpec {
            x: cfg.center / eps,
            stride: 1,
        }],
        snapshot_every_t2: Some(0.05),
        sponge_strength: SPONGE_STRENGTH,
        sponge_tolerance: SPONGE_TOLERANCE,
        energy_stride: 500,
    };
    params.dt = (0.8 * params.dt_stable()).min(0.02);
    params.validate()?;
    let init = branch_initial_state(
        2,
        &cfg.phase,
        &force,
        cfg.gamma,
        eps,
        RegionMargins::default().pre,
        &params.grid.xs(),
    )
    .unwrap_or_else(|_| FieldState::zero(params.grid.nx));
    let traj_dir = run(&params, &init)?;

    // Peak readings: the best of three snapshots around each target, which
    // averages out the breathing phase of a freshly formed packet.
    let zone_x2 = cfg.zone_xi * eps;
    let xs = params.grid.xs();
    let read_peak = |t2_target: f64| -> f64 {
        let mut best = 0.0f64;
        for dt2 in [-0.05, 0.0, 0.05] {
            if let Some(snap) = nearest_snapshot(&traj_dir, eps, t2_target + dt2) {
                if let Some(v) = snapshot_quadrature_peak(
                    snap,
                    &xs,
                    eps,
                    &cfg.phase,
                    &force,
                    &field,
                    x2_center_of(cfg),
                    zone_x2,
                ) {
                    best = best.max(v);
                }
            }
        }
        best
    };
    let peak_early = read_peak(t2_early);
    let peak_late = read_peak(t2_late);
    let decay_fraction = if peak_early > 0.0 {
        1.0 - peak_late / peak_early
    } else {
        0.0
    };

    let predict_at = |t2: f64| -> Option<f64> {
        let last = traj.frames.last()?.t2;
        (last >= t2 - 1e-9).then(|| frame_peak_at(&traj, t2))
    };
    let predicted_peak_early = predict_at(t2_early);
    let predicted_peak_late = predict_at(t2_late);
    let ratio = |direct: f64, predicted: Option<f64>| -> Option<f64> {
        predicted.filter(|p| *p > 0.0).map(|p| direct / p)
    };
    let direct_to_predicted_early = ratio(peak_early, predicted_peak_early);
    let direct_to_predicted_late = ratio(peak_late, predicted_peak_late);

    Ok(ScenarioBranch {
        label: label.into(),
        amplitude,
        census_count: census.count,
        area: census.area,
        scaled_area: census.scaled_area,
        soliton_amplitudes: census.amplitudes,
        soliton_velocities: census.velocities,
        peak_early,
        peak_late,
        decay_fraction,
        predicted_peak_early,
        predicted_peak_late,
        direct_to_predicted_early,
        direct_to_predicted_late,
        t2_early,
        t2_late,
    })
}

fn x2_center_of(cfg: &ScenarioConfig) -> f64 {
    cfg.epsilon * cfg.center
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
