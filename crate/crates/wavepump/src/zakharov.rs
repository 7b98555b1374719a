//! Scattering census of the envelope: how many solitary wave packets a given
//! envelope contains, with their amplitudes and velocities.
//!
//! The envelope equation in solver form, `2i p Psi_t2 + Psi_yy + g |Psi|^2
//! Psi = 0` with `g > 0`, rescales to the canonical focusing cubic
//! Schrodinger equation `i q_tau + q_zz / 2 + |q|^2 q = 0` via
//!
//! ```text
//! z = sqrt(p) y,     q = sqrt(g / (2 p)) Psi,     tau = t2.
//! ```
//!
//! The canonical equation is integrable: its long-time content is read off
//! the discrete spectrum of the associated linear scattering problem
//!
//! ```text
//! v1_z = -i zeta v1 + q v2,
//! v2_z = -conj(q) v1 + i zeta v2.
//! ```
//!
//! Each simple zero `zeta = xi + i eta` (`eta > 0`) of the transmission
//! denominator `a(zeta)` is one emergent soliton `q -> 2 eta sech(2 eta (z +
//! 2 xi tau)) e^{...}`: amplitude `2 eta`, velocity `-2 xi` in canonical
//! units (a carrier `e^{i c z}` moves the packet at `+c` and the eigenvalue
//! sideways by `-c/2`).  [`soliton_census`] undoes the rescaling and reports
//! both in envelope units.

use std::f64::consts::FRAC_PI_2;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::envelope::EnvelopeField;
use crate::error::Error;
use crate::Result;

/// No bound states exist below this canonical `L^1` mass (`int |q| dz`); the
/// census skips the eigenvalue search entirely under the threshold.
pub const AREA_THRESHOLD: f64 = FRAC_PI_2;

/// Eigenvalue-search options.  Grid bounds default from the data: real parts
/// to `1 + max|q| / 2`, imaginary parts to `1.2 max|q|` (bound states live
/// below the potential's sup norm).
#[derive(Debug, Clone, Copy)]
pub struct ZsOptions {
    /// Half-width of the real-part scan; `None` derives it from the data.
    pub re_max: Option<f64>,
    /// Top of the imaginary-part scan; `None` derives it from the data.
    pub im_max: Option<f64>,
    /// Coarse-grid resolution in the real direction.
    pub n_re: usize,
    /// Coarse-grid resolution in the imaginary direction.
    pub n_im: usize,
    /// Root tolerance of the secant refinement (relative to `1 + |zeta|`).
    pub tol: f64,
    /// Roots closer than this merge into one.
    pub dedupe: f64,
    /// Iteration budget per seed before the search is declared incomplete.
    pub max_iter: usize,
}

impl Default for ZsOptions {
    fn default() -> Self {
        ZsOptions {
            re_max: None,
            im_max: None,
            n_re: 21,
            n_im: 25,
            tol: 1e-8,
            dedupe: 1e-6,
            max_iter: 80,
        }
    }
}

/// The discrete spectrum found in the upper half plane.
#[derive(Debug, Clone)]
pub struct ZsSpectrum {
    /// Zeros of `a(zeta)`, sorted by descending imaginary part.
    pub eigenvalues: Vec<Complex64>,
    /// False when some candidate zero failed to converge within the
    /// iteration budget; the census is then a lower bound.
    pub complete: bool,
}

fn validate_profile(xi: &[f64], q: &[Complex64]) -> Result<()> {
    if xi.len() != q.len() || xi.len() < 2 {
        return Err(Error::Validation(format!(
            "scattering needs at least two matching nodes, got {} xi / {} q",
            xi.len(),
            q.len()
        )));
    }
    for i in 1..xi.len() {
        if !(xi[i] > xi[i - 1]) {
            return Err(Error::Validation(
                "scattering grid must strictly increase".into(),
            ));
        }
    }
    if q.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Validation("scattering data must be finite".into()));
    }
    Ok(())
}

/// Transmission denominator `a(zeta)` of the scattering problem, by
/// piecewise-constant (interval-midpoint) transfer matrices.
///
/// The left Jost solution is propagated in the scaled variable
/// `v e^{i zeta z}`, which stays O(1) for `Im zeta > 0`; `a` is its first
/// component at the right end.  `q` must have decayed at both ends for the
/// boundary identification to hold.  Exact for `q = 0` (`a = 1`).
pub fn scattering_coefficient(xi: &[f64], q: &[Complex64], zeta: Complex64) -> Complex64 {
    let mut v1 = Complex64::new(1.0, 0.0);
    let mut v2 = Complex64::new(0.0, 0.0);
    let i_unit = Complex64::new(0.0, 1.0);
    for w in 0..xi.len() - 1 {
        let h = xi[w + 1] - xi[w];
        let qm = 0.5 * (q[w] + q[w + 1]);
        // exp(M h) with M = [[-i zeta, q], [-conj(q), i zeta]]:
        // M^2 = -(zeta^2 + |q|^2) I, so exp(M h) = cosh(mu h) I +
        // sinh(mu h)/mu M with mu^2 = -(zeta^2 + |q|^2).
        let mu = (-(zeta * zeta) - qm.norm_sqr()).sqrt();
        let mh = mu * h;
        let ch = mh.cosh();
        // sinh(mu h) / mu, series-guarded at small argument.
        let sh = if mh.norm() < 1e-6 {
            h * (1.0 + mh * mh / 6.0)
        } else {
            mh.sinh() / mu
        };
        let w1 = (ch - i_unit * zeta * sh) * v1 + qm * sh * v2;
        let w2 = -qm.conj() * sh * v1 + (ch + i_unit * zeta * sh) * v2;
        let scale = (i_unit * zeta * h).exp();
        v1 = w1 * scale;
        v2 = w2 * scale;
    }
    v1
}

enum Refined {
    Root(Complex64),
    Left,
    Stuck,
}

fn refine_root(
    xi: &[f64],
    q: &[Complex64],
    seed: Complex64,
    opts: &ZsOptions,
    re_box: f64,
    im_box: f64,
) -> Refined {
    let mut z0 = seed;
    let mut z1 = seed + Complex64::new(1e-4, 1e-4) * (1.0 + seed.norm());
    let mut a0 = scattering_coefficient(xi, q, z0);
    let mut a1 = scattering_coefficient(xi, q, z1);
    for _ in 0..opts.max_iter {
        let denom = a1 - a0;
        if denom.norm() == 0.0 {
            return Refined::Stuck;
        }
        let z2 = z1 - a1 * (z1 - z0) / denom;
        if !z2.re.is_finite() || !z2.im.is_finite() {
            return Refined::Stuck;
        }
        if z2.re.abs() > 2.0 * re_box + 1.0
            || z2.im > 2.0 * im_box + 1.0
            || z2.im < -0.5 * im_box - 0.1
        {
            // wandered far outside the physical box: no zero here
            return Refined::Left;
        }
        if (z2 - z1).norm() < opts.tol * (1.0 + z2.norm()) {
            return Refined::Root(z2);
        }
        z0 = z1;
        a0 = a1;
        z1 = z2;
        a1 = scattering_coefficient(xi, q, z1);
    }
    Refined::Stuck
}

/// Finds the zeros of `a(zeta)` in the upper half plane: coarse `|a|` scan,
/// secant refinement from every local minimum, dedupe, and a residual check.
pub fn zs_eigenvalues(xi: &[f64], q: &[Complex64], opts: &ZsOptions) -> Result<ZsSpectrum> {
    validate_profile(xi, q)?;
    let max_q = q.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if max_q == 0.0 {
        return Ok(ZsSpectrum {
            eigenvalues: Vec::new(),
            complete: true,
        });
    }
    let re_max = opts.re_max.unwrap_or(1.0 + 0.5 * max_q);
    let im_max = opts.im_max.unwrap_or(1.2 * max_q);
    let (n_re, n_im) = (opts.n_re.max(3), opts.n_im.max(3));

    // |a| on the coarse grid (imaginary axis offset off the real line).
    let nodes: Vec<(usize, usize, Complex64)> = (0..n_re)
        .flat_map(|i| (0..n_im).map(move |j| (i, j)))
        .map(|(i, j)| {
            let re = -re_max + 2.0 * re_max * i as f64 / (n_re - 1) as f64;
            let im = im_max * (j as f64 + 0.5) / n_im as f64;
            (i, j, Complex64::new(re, im))
        })
        .collect();
    let amps: Vec<f64> = nodes
        .par_iter()
        .map(|&(_, _, z)| scattering_coefficient(xi, q, z).norm())
        .collect();
    let at = |i: usize, j: usize| amps[i * n_im + j];

    let mut seeds = Vec::new();
    for i in 0..n_re {
        for j in 0..n_im {
            let c = at(i, j);
            let mut is_min = true;
            'probe: for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= n_re as i64 || nj >= n_im as i64 {
                        continue;
                    }
                    if at(ni as usize, nj as usize) < c {
                        is_min = false;
                        break 'probe;
                    }
                }
            }
            // only chase minima that plausibly sit near a zero
            if is_min && c < 0.9 {
                seeds.push(nodes[i * n_im + j].2);
            }
        }
    }

    let refined: Vec<Refined> = seeds
        .par_iter()
        .map(|&seed| refine_root(xi, q, seed, opts, re_max, im_max))
        .collect();

    let mut complete = true;
    let mut roots: Vec<Complex64> = Vec::new();
    for r in refined {
        match r {
            Refined::Root(z) => {
                // genuine bound states sit strictly above the real axis;
                // radiation resonances converge onto or below it
                if z.im <= 1e-9 * (1.0 + im_max) {
                    continue;
                }
                if scattering_coefficient(xi, q, z).norm() > 1e-5 {
                    continue;
                }
                if roots
                    .iter()
                    .all(|r| (r - z).norm() > opts.dedupe * (1.0 + z.norm()))
                {
                    roots.push(z);
                }
            }
            Refined::Left => {}
            Refined::Stuck => complete = false,
        }
    }
    roots.sort_by(|a, b| b.im.partial_cmp(&a.im).unwrap());
    Ok(ZsSpectrum {
        eigenvalues: roots,
        complete,
    })
}

/// The soliton content of an envelope, in envelope units.
#[derive(Debug, Clone)]
pub struct SolitonEstimate {
    /// Discrete eigenvalues in canonical units, descending imaginary part.
    pub eigenvalues: Vec<Complex64>,
    /// Number of emergent solitons.
    pub count: usize,
    /// Peak `|Psi|` of each emergent soliton.
    pub amplitudes: Vec<f64>,
    /// Transverse drift `d xi / d t2` of each soliton (solver coordinate).
    pub velocities: Vec<f64>,
    /// `int |Psi| d xi` of the input envelope.
    pub area: f64,
    /// The same area in canonical units, `sqrt(g / 2) * area`; no bound
    /// states below [`AREA_THRESHOLD`].
    pub scaled_area: f64,
    /// `q = amplitude_scale * Psi`.
    pub amplitude_scale: f64,
    /// `z = coordinate_scale * xi`.
    pub coordinate_scale: f64,
    /// False when the eigenvalue search hit its iteration budget; the count
    /// is then a lower bound.
    pub complete: bool,
}

/// Counts the solitons that will emerge from `env` under the envelope
/// equation with cubic coupling `gamma`.
///
/// Only the focusing sign (`gamma > 0`) carries solitons; anything else is
/// refused.  Envelopes whose canonical area is below [`AREA_THRESHOLD`]
/// return an empty census without searching.
pub fn soliton_census(env: &EnvelopeField, gamma: f64) -> Result<SolitonEstimate> {
    if !(gamma > 0.0) {
        return Err(Error::Validation(format!(
            "the scattering census needs a focusing cubic coupling \
             (gamma > 0), got {gamma}; a defocusing envelope sheds no solitons"
        )));
    }
    let p = env.geometry.phi_t.abs();
    let amplitude_scale = (gamma / (2.0 * p)).sqrt();
    let coordinate_scale = p.sqrt();
    let area = env.area();
    let scaled_area = (gamma / 2.0).sqrt() * area;

    if scaled_area < AREA_THRESHOLD {
        return Ok(SolitonEstimate {
            eigenvalues: Vec::new(),
            count: 0,
            amplitudes: Vec::new(),
            velocities: Vec::new(),
            area,
            scaled_area,
            amplitude_scale,
            coordinate_scale,
            complete: true,
        });
    }

    let z: Vec<f64> = env.xi.iter().map(|&x| coordinate_scale * x).collect();
    let q: Vec<Complex64> = env.values.iter().map(|&v| amplitude_scale * v).collect();
    let spectrum = zs_eigenvalues(&z, &q, &ZsOptions::default())?;

    let amplitudes: Vec<f64> = spectrum
        .eigenvalues
        .iter()
        .map(|z| 2.0 * z.im / amplitude_scale)
        .collect();
    let velocities: Vec<f64> = spectrum
        .eigenvalues
        .iter()
        .map(|z| -2.0 * z.re / coordinate_scale)
        .collect();
    Ok(SolitonEstimate {
        count: spectrum.eigenvalues.len(),
        eigenvalues: spectrum.eigenvalues,
        amplitudes,
        velocities,
        area,
        scaled_area,
        amplitude_scale,
        coordinate_scale,
        complete: spectrum.complete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::EnvelopeGeometry;

    fn grid(half_width: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64)
            .collect()
    }

    fn sech_profile(xi: &[f64], amp: f64, width: f64, center: f64, boost: f64) -> Vec<Complex64> {
        xi.iter()
            .map(|&x| {
                Complex64::new(0.0, boost * x).exp() * (amp / ((x - center) / width).cosh())
            })
            .collect()
    }

    #[test]
    fn zero_potential_transmits_perfectly() {
        let xi = grid(20.0, 257);
        let q = vec![Complex64::new(0.0, 0.0); 257];
        for &zeta in &[
            Complex64::new(0.3, 0.4),
            Complex64::new(-1.0, 0.05),
            Complex64::new(0.0, 1.5),
        ] {
            let a = scattering_coefficient(&xi, &q, zeta);
            assert!(
                (a - 1.0).norm() < 1e-12,
                "a({zeta}) = {a} for zero potential"
            );
        }
        let spec = zs_eigenvalues(&xi, &q, &ZsOptions::default()).unwrap();
        assert!(spec.eigenvalues.is_empty() && spec.complete);
    }

    #[test]
    fn sech_spectrum_matches_the_closed_form() {
        // Oracle: q = A sech(z) has eigenvalues i (A - k + 1/2) for
        // k = 1..floor(A + 1/2) - here A = 1.6 gives exactly {1.1i, 0.1i}.
        let xi = grid(25.0, 8001);
        let q = sech_profile(&xi, 1.6, 1.0, 0.0, 0.0);
        let spec = zs_eigenvalues(&xi, &q, &ZsOptions::default()).unwrap();
        assert!(spec.complete);
        assert_eq!(spec.eigenvalues.len(), 2, "spectrum: {:?}", spec.eigenvalues);
        let z0 = spec.eigenvalues[0];
        let z1 = spec.eigenvalues[1];
        assert!((z0 - Complex64::new(0.0, 1.1)).norm() < 1e-4, "z0 = {z0}");
        assert!((z1 - Complex64::new(0.0, 0.1)).norm() < 1e-4, "z1 = {z1}");

        // Below A = 1/2 the sech potential binds nothing.
        let q_small = sech_profile(&xi, 0.45, 1.0, 0.0, 0.0);
        let spec = zs_eigenvalues(&xi, &q_small, &ZsOptions::default()).unwrap();
        assert!(
            spec.eigenvalues.is_empty(),
            "A = 0.45 should bind nothing, got {:?}",
            spec.eigenvalues
        );
    }

    #[test]
    fn boosted_soliton_shifts_the_real_parts() {
        // A carrier e^{i c z} is a Galilean boost: it moves every eigenvalue
        // sideways by -c / 2 without touching the imaginary parts.
        let xi = grid(25.0, 8001);
        let q = sech_profile(&xi, 1.0, 1.0, 0.0, 0.8);
        let spec = zs_eigenvalues(&xi, &q, &ZsOptions::default()).unwrap();
        assert!(spec.complete);
        assert_eq!(spec.eigenvalues.len(), 1, "spectrum: {:?}", spec.eigenvalues);
        let z = spec.eigenvalues[0];
        assert!(
            (z - Complex64::new(-0.4, 0.5)).norm() < 1e-3,
            "boosted eigenvalue {z}"
        );
    }

    fn census_field(amp: f64, gamma: f64, center: f64, phase: f64, boost: f64) -> EnvelopeField {
        let b = amp * (gamma / 2.0_f64).sqrt();
        let xi = grid(24.0, 2049);
        let rot = Complex64::new(0.0, phase).exp();
        let values: Vec<Complex64> = xi
            .iter()
            .map(|&x| {
                rot * Complex64::new(0.0, boost * x).exp() * amp / (b * (x - center)).cosh()
            })
            .collect();
        EnvelopeField::new(
            xi,
            0.0,
            values,
            EnvelopeGeometry::uniform(1.0, 0.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn census_counts_one_soliton_for_the_sech_ansatz() {
        // Psi = A sech(B xi) with B = A sqrt(gamma/2) is the stationary
        // soliton of the envelope equation, so the census must report exactly
        // one emergent soliton of amplitude A at rest.
        let (amp, gamma) = (1.3, 2.0);
        let est = soliton_census(&census_field(amp, gamma, 0.0, 0.0, 0.0), gamma).unwrap();
        assert!(est.complete);
        assert_eq!(est.count, 1, "eigenvalues: {:?}", est.eigenvalues);
        assert!(
            (est.amplitudes[0] - amp).abs() < 1e-3,
            "amplitude {} vs {amp}",
            est.amplitudes[0]
        );
        assert!(est.velocities[0].abs() < 1e-3, "velocity {}", est.velocities[0]);
        // Canonical area of A sech(B xi) is pi A sqrt(gamma/2) / B = pi.
        assert!((est.scaled_area - std::f64::consts::PI).abs() < 1e-6);

        // A carrier e^{i c xi} makes the packet drift at +c (the group
        // velocity of the envelope equation at unit transport factor); the
        // census must report that velocity with the right sign.
        let c = 0.6;
        let moving = soliton_census(&census_field(amp, gamma, 0.0, 0.0, c), gamma).unwrap();
        assert_eq!(moving.count, 1, "eigenvalues: {:?}", moving.eigenvalues);
        assert!(
            (moving.velocities[0] - c).abs() < 1e-3,
            "drift {} vs {c}",
            moving.velocities[0]
        );
        assert!((moving.amplitudes[0] - amp).abs() < 1e-3);
    }

    #[test]
    fn census_ignores_translation_and_constant_phase() {
        let (amp, gamma) = (1.3, 2.0);
        let base = soliton_census(&census_field(amp, gamma, 0.0, 0.0, 0.0), gamma).unwrap();
        let moved = soliton_census(&census_field(amp, gamma, 3.7, 1.1, 0.0), gamma).unwrap();
        assert_eq!(base.count, moved.count);
        for (a, b) in base.eigenvalues.iter().zip(&moved.eigenvalues) {
            assert!(
                (a - b).norm() < 1e-4,
                "translation moved an eigenvalue: {a} vs {b}"
            );
        }
    }

    #[test]
    fn small_data_scatters_without_solitons() {
        // Canonical area 0.4 pi < pi/2: the threshold skips the search.
        let gamma = 2.0;
        let b = 1.0;
        let xi = grid(24.0, 513);
        let values: Vec<Complex64> = xi
            .iter()
            .map(|&x| Complex64::new(0.4 / (b * x).cosh(), 0.0))
            .collect();
        let env = EnvelopeField::new(
            xi,
            0.0,
            values,
            EnvelopeGeometry::uniform(1.0, 0.0).unwrap(),
        )
        .unwrap();
        let est = soliton_census(&env, gamma).unwrap();
        assert_eq!(est.count, 0);
        assert!(est.complete);
        assert!(est.scaled_area < AREA_THRESHOLD);
    }

    #[test]
    fn census_applies_the_area_threshold() {
        // q = A sech(z): area A pi. A = 0.49 sits under pi/2 and is skipped;
        // A = 0.8 is over the line and binds exactly one state at 0.3i.
        let gamma = 2.0;
        let xi = grid(24.0, 2049);
        let make = |a: f64| {
            let values: Vec<Complex64> = xi
                .iter()
                .map(|&x| Complex64::new(a / x.cosh(), 0.0))
                .collect();
            EnvelopeField::new(
                xi.clone(),
                0.0,
                values,
                EnvelopeGeometry::uniform(1.0, 0.0).unwrap(),
            )
            .unwrap()
        };
        let low = soliton_census(&make(0.49), gamma).unwrap();
        assert_eq!(low.count, 0);
        assert!(low.scaled_area < AREA_THRESHOLD);
        let high = soliton_census(&make(0.8), gamma).unwrap();
        assert_eq!(high.count, 1, "eigenvalues: {:?}", high.eigenvalues);
        assert!(
            (high.eigenvalues[0] - Complex64::new(0.0, 0.3)).norm() < 1e-3,
            "eigenvalue {}",
            high.eigenvalues[0]
        );
    }

    #[test]
    fn census_rejects_defocusing_gamma() {
        let env = census_field(1.0, 2.0, 0.0, 0.0, 0.0);
        for bad in [-2.0, 0.0] {
            assert!(matches!(
                soliton_census(&env, bad),
                Err(Error::Validation(_))
            ));
        }
    }
}
