//! Driving-phase specification and the resonance function.
//!
//! The forcing oscillates as `exp(i S(t2, x2) / eps^2)` in the slow variables
//! `t2 = eps^2 t`, `x2 = eps^2 x`. Everything downstream is controlled by the
//! local frequency/wavenumber pair `(S_t, -S_x)` and by the resonance
//! function
//!
//! ```text
//! l(t2, x2) = S_t^2 - S_x^2 - 1,
//! ```
//!
//! which vanishes exactly where the driver hits the Klein-Gordon dispersion
//! relation. The crossing speed along characteristics,
//! `phi = 2 (S_t l_t - S_x l_x)`, must be nonzero for the layer theory to
//! apply; curve location and transversality checks live in [`crate::geometry`].
//!
//! Built-in phases have exact derivatives; custom expressions fall back to
//! fourth-order central finite differences.

use crate::expr::Expr;
use crate::Result;

/// Step for 4th-order FD first/second derivatives of custom phases.
/// Truncation ~h^4 = 1e-16 while roundoff stays below ~2e-8 for the
/// second derivative, so both orders come out near 1e-8 or better.
const H_FD: f64 = 1e-4;

/// Step for 4th-order FD third derivatives. Roundoff grows like eps/h^3,
/// so a larger step balances: at h = 8e-3 both error terms sit near 1e-9.
const H_FD3: f64 = 8e-3;

/// A point in the slow plane `(t2, x2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlowPoint {
    pub t2: f64,
    pub x2: f64,
}

impl SlowPoint {
    pub fn new(t2: f64, x2: f64) -> Self {
        SlowPoint { t2, x2 }
    }
}

/// The driving phase `S(t2, x2)`.
#[derive(Debug, Clone)]
pub enum PhaseSpec {
    /// `S = t2^2 / 2`: linear chirp, no spatial modulation. The resonance
    /// set is the pair of lines `t2 = +-1`; crossing rate `phi = 4 t2^2`.
    Quadratic,
    /// `S = t2^2 / 2 + a x2`: chirp with a constant wavenumber tilt. The
    /// resonance set is `t2 = +-sqrt(1 + a^2)`; the tilt gives characteristics
    /// a nonzero group velocity, `phi = 4 (1 + a^2)` on the curve.
    QuadraticTilted { a: f64 },
    /// `S` given by an expression in `t2`, `x2`; derivatives by central
    /// finite differences.
    Custom { src: String, expr: Expr },
}

impl PhaseSpec {
    pub fn quadratic() -> Self {
        PhaseSpec::Quadratic
    }

    pub fn quadratic_tilted(a: f64) -> Self {
        PhaseSpec::QuadraticTilted { a }
    }

    pub fn custom(src: &str) -> Result<Self> {
        let expr = Expr::parse(src, &["t2", "x2"])?;
        Ok(PhaseSpec::Custom {
            src: src.to_string(),
            expr,
        })
    }

    /// Configuration-file form of this phase.
    pub fn describe(&self) -> String {
        match self {
            PhaseSpec::Quadratic => "quadratic".to_string(),
            PhaseSpec::QuadraticTilted { a } => format!("quadratic_tilted a={}", a),
            PhaseSpec::Custom { src, .. } => format!("custom {}", src),
        }
    }

    pub fn s(&self, t2: f64, x2: f64) -> f64 {
        match self {
            PhaseSpec::Quadratic => 0.5 * t2 * t2,
            PhaseSpec::QuadraticTilted { a } => 0.5 * t2 * t2 + a * x2,
            PhaseSpec::Custom { expr, .. } => expr.eval(&[t2, x2]),
        }
    }

    pub fn s_t(&self, t2: f64, x2: f64) -> f64 {
        match self {
            PhaseSpec::Quadratic | PhaseSpec::QuadraticTilted { .. } => t2,
            PhaseSpec::Custom { .. } => self.fd1(t2, x2, Axis::T),
        }
    }

    pub fn s_x(&self, t2: f64, x2: f64) -> f64 {
        match self {
            PhaseSpec::Quadratic => 0.0,
            PhaseSpec::QuadraticTilted { a } => *a,
            PhaseSpec::Custom { .. } => self.fd1(t2, x2, Axis::X),
        }
    }

    pub fn s_tt(&self, t2: f64, x2: f64) -> f64 {
        match self {
            PhaseSpec::Quadratic | PhaseSpec::QuadraticTilted { .. } => 1.0,
            PhaseSpec::Custom { .. } => self.fd2(t2, x2, Axis::T),
        }
    }

    pub fn s_tx(&self, t2: f64, x2: f64) -> f64 {
        match self {
            PhaseSpec::Quadratic | PhaseSpec::QuadraticTilted { .. } => 0.0,
            PhaseSpec::Custom { .. } => self.fd_mixed(t2, x2),
        }
    }

    pub fn s_xx(&self, t2: f64, x2: f64) -> f64 {
        match self {
            PhaseSpec::Quadratic | PhaseSpec::QuadraticTilted { .. } => 0.0,
            PhaseSpec::Custom { .. } => self.fd2(t2, x2, Axis::X),
        }
    }

    pub fn s_ttt(&self, t2: f64, x2: f64) -> f64 {
        match self {
            PhaseSpec::Quadratic | PhaseSpec::QuadraticTilted { .. } => 0.0,
            PhaseSpec::Custom { .. } => self.fd3(t2, x2, Axis::T),
        }
    }

    pub fn s_ttx(&self, t2: f64, x2: f64) -> f64 {
        match self {
            PhaseSpec::Quadratic | PhaseSpec::QuadraticTilted { .. } => 0.0,
            // d/dx2 of s_tt, with s_tt itself by FD in t2.
            PhaseSpec::Custom { .. } => {
                let h = H_FD3;
                let g = |x: f64| self.fd2(t2, x, Axis::T);
                (-g(x2 + 2.0 * h) + 8.0 * g(x2 + h) - 8.0 * g(x2 - h) + g(x2 - 2.0 * h))
                    / (12.0 * h)
            }
        }
    }

    pub fn s_txx(&self, t2: f64, x2: f64) -> f64 {
        match self {
            PhaseSpec::Quadratic | PhaseSpec::QuadraticTilted { .. } => 0.0,
            PhaseSpec::Custom { .. } => {
                let h = H_FD3;
                let g = |t: f64| self.fd2(t, x2, Axis::X);
                (-g(t2 + 2.0 * h) + 8.0 * g(t2 + h) - 8.0 * g(t2 - h) + g(t2 - 2.0 * h))
                    / (12.0 * h)
            }
        }
    }

    pub fn s_xxx(&self, t2: f64, x2: f64) -> f64 {
        match self {
            PhaseSpec::Quadratic | PhaseSpec::QuadraticTilted { .. } => 0.0,
            PhaseSpec::Custom { .. } => self.fd3(t2, x2, Axis::X),
        }
    }

    /// Resonance function `l = S_t^2 - S_x^2 - 1`.
    pub fn l(&self, t2: f64, x2: f64) -> f64 {
        let st = self.s_t(t2, x2);
        let sx = self.s_x(t2, x2);
        st * st - sx * sx - 1.0
    }

    pub fn l_t(&self, t2: f64, x2: f64) -> f64 {
        2.0 * (self.s_t(t2, x2) * self.s_tt(t2, x2) - self.s_x(t2, x2) * self.s_tx(t2, x2))
    }

    pub fn l_x(&self, t2: f64, x2: f64) -> f64 {
        2.0 * (self.s_t(t2, x2) * self.s_tx(t2, x2) - self.s_x(t2, x2) * self.s_xx(t2, x2))
    }

    pub fn l_tt(&self, t2: f64, x2: f64) -> f64 {
        let (st, sx) = (self.s_t(t2, x2), self.s_x(t2, x2));
        let (stt, stx) = (self.s_tt(t2, x2), self.s_tx(t2, x2));
        2.0 * (stt * stt + st * self.s_ttt(t2, x2) - stx * stx - sx * self.s_ttx(t2, x2))
    }

    pub fn l_tx(&self, t2: f64, x2: f64) -> f64 {
        let (st, sx) = (self.s_t(t2, x2), self.s_x(t2, x2));
        let (stt, stx, sxx) = (self.s_tt(t2, x2), self.s_tx(t2, x2), self.s_xx(t2, x2));
        2.0 * (stt * stx + st * self.s_ttx(t2, x2) - stx * sxx - sx * self.s_txx(t2, x2))
    }

    pub fn l_xx(&self, t2: f64, x2: f64) -> f64 {
        let (st, sx) = (self.s_t(t2, x2), self.s_x(t2, x2));
        let (stx, sxx) = (self.s_tx(t2, x2), self.s_xx(t2, x2));
        2.0 * (stx * stx + st * self.s_txx(t2, x2) - sxx * sxx - sx * self.s_xxx(t2, x2))
    }

    /// Rate of change of `l/eps` along the transport characteristics:
    /// `phi = 2 (S_t l_t - S_x l_x)`. Nonzero `phi` is exactly the
    /// transversality condition for a genuine resonance crossing.
    pub fn crossing_rate(&self, t2: f64, x2: f64) -> f64 {
        2.0 * (self.s_t(t2, x2) * self.l_t(t2, x2) - self.s_x(t2, x2) * self.l_x(t2, x2))
    }

    fn fd1(&self, t2: f64, x2: f64, axis: Axis) -> f64 {
        let h = H_FD;
        let g = |d: f64| self.at_offset(t2, x2, axis, d);
        (-g(2.0 * h) + 8.0 * g(h) - 8.0 * g(-h) + g(-2.0 * h)) / (12.0 * h)
    }

    fn fd2(&self, t2: f64, x2: f64, axis: Axis) -> f64 {
        let h = H_FD;
        let g = |d: f64| self.at_offset(t2, x2, axis, d);
        (-g(2.0 * h) + 16.0 * g(h) - 30.0 * g(0.0) + 16.0 * g(-h) - g(-2.0 * h))
            / (12.0 * h * h)
    }

    fn fd3(&self, t2: f64, x2: f64, axis: Axis) -> f64 {
        let h = H_FD3;
        let g = |d: f64| self.at_offset(t2, x2, axis, d);
        // 4th-order central stencil for the third derivative.
        (g(-3.0 * h) / 8.0 - g(-2.0 * h) + 13.0 * g(-h) / 8.0 - 13.0 * g(h) / 8.0
            + g(2.0 * h)
            - g(3.0 * h) / 8.0)
            / (h * h * h)
    }

    fn fd_mixed(&self, t2: f64, x2: f64) -> f64 {
        let h = H_FD;
        // d/dx2 of the 4th-order t2-derivative, both stencils 4th order.
        let dt = |x: f64| {
            (-self.s(t2 + 2.0 * h, x) + 8.0 * self.s(t2 + h, x) - 8.0 * self.s(t2 - h, x)
                + self.s(t2 - 2.0 * h, x))
                / (12.0 * h)
        };
        (-dt(x2 + 2.0 * h) + 8.0 * dt(x2 + h) - 8.0 * dt(x2 - h) + dt(x2 - 2.0 * h))
            / (12.0 * h)
    }

    fn at_offset(&self, t2: f64, x2: f64, axis: Axis, d: f64) -> f64 {
        match axis {
            Axis::T => self.s(t2 + d, x2),
            Axis::X => self.s(t2, x2 + d),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Axis {
    T,
    X,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_model_values() {
        let p = PhaseSpec::quadratic();
        assert_eq!(p.s(1.0, 5.0), 0.5);
        assert_eq!(p.l(1.0, -3.0), 0.0);
        assert_eq!(p.l(0.0, 0.0), -1.0);
        assert_eq!(p.l(2.0, 0.0), 3.0);
        // phi = 4 t2^2 = 4 on the curve, independent of x2.
        assert_eq!(p.crossing_rate(1.0, 7.0), 4.0);
        assert_eq!(p.l_t(1.0, 0.0), 2.0);
        assert_eq!(p.l_x(1.0, 0.0), 0.0);
        assert_eq!(p.l_tt(1.0, 0.0), 2.0);
    }

    #[test]
    fn tilted_model_values() {
        let a = 0.1;
        let p = PhaseSpec::quadratic_tilted(a);
        let t_res = (1.0 + a * a).sqrt();
        assert!(p.l(t_res, 4.0).abs() < 1e-15);
        // phi = 4 (1 + a^2) = 4.04 everywhere on the curve.
        assert!((p.crossing_rate(t_res, -2.0) - 4.04).abs() < 1e-12);
        assert_eq!(p.s_x(0.3, 0.9), a);
    }

    #[test]
    fn custom_matches_quadratic() {
        let p = PhaseSpec::custom("t2^2/2").unwrap();
        let q = PhaseSpec::quadratic();
        for &(t2, x2) in &[(0.5, 0.0), (1.0, 2.0), (1.7, -1.0)] {
            assert!((p.s(t2, x2) - q.s(t2, x2)).abs() < 1e-15);
            assert!((p.s_t(t2, x2) - q.s_t(t2, x2)).abs() < 1e-9);
            assert!((p.s_tt(t2, x2) - q.s_tt(t2, x2)).abs() < 1e-7);
            assert!((p.l(t2, x2) - q.l(t2, x2)).abs() < 1e-8);
            assert!((p.crossing_rate(t2, x2) - q.crossing_rate(t2, x2)).abs() < 1e-6);
        }
    }

    #[test]
    fn custom_fd_derivatives_against_analytic() {
        // S = sin(t2) * exp(x2 / 10): every derivative has a closed form.
        let p = PhaseSpec::custom("sin(t2)*exp(x2/10)").unwrap();
        let (t2, x2) = (0.7f64, 0.3f64);
        let e = (x2 / 10.0).exp();
        let (s, c) = (t2.sin(), t2.cos());
        assert!((p.s_t(t2, x2) - c * e).abs() < 1e-9);
        assert!((p.s_x(t2, x2) - s * e / 10.0).abs() < 1e-9);
        assert!((p.s_tt(t2, x2) + s * e).abs() < 1e-7);
        // Mixed derivative nests two stencils; roundoff ~eps/h^2 = 2e-8.
        assert!((p.s_tx(t2, x2) - c * e / 10.0).abs() < 1e-7);
        assert!((p.s_xx(t2, x2) - s * e / 100.0).abs() < 1e-7);
        assert!((p.s_ttt(t2, x2) + c * e).abs() < 1e-6);
        assert!((p.s_ttx(t2, x2) + s * e / 10.0).abs() < 1e-6);
        assert!((p.s_txx(t2, x2) - c * e / 100.0).abs() < 1e-6);
        assert!((p.s_xxx(t2, x2) - s * e / 1000.0).abs() < 1e-6);
    }

    #[test]
    fn describe_round_trip_text() {
        assert_eq!(PhaseSpec::quadratic().describe(), "quadratic");
        assert_eq!(
            PhaseSpec::quadratic_tilted(0.1).describe(),
            "quadratic_tilted a=0.1"
        );
        assert_eq!(
            PhaseSpec::custom("t2^2/2 + x2/10").unwrap().describe(),
            "custom t2^2/2 + x2/10"
        );
    }
}
