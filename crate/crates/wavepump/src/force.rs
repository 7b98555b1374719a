//! Spatial profile `f(x1)` of the driving force.
//!
//! The theory needs `f` smooth and rapidly decaying; higher-order terms of
//! the pre-resonance expansion consume successive derivatives of `f`, so
//! each profile declares how many derivatives it can supply and everything
//! downstream respects that cap.

use num_complex::Complex64;

use crate::error::Error;
use crate::expr::Expr;
use crate::Result;

/// Decay threshold: |f| must fall below this outside the declared support
/// radius. Chosen so truncating integrals at the support edge perturbs
/// quadrature results below the 1e-8-grade verification tolerances.
pub const TOL_DECAY: f64 = 1e-10;

/// FD step for derivatives of custom profiles (see `phase` for the error
/// budget of the same stencils).
const H_FD: f64 = 1e-4;

/// Force profile in the once-slowed variable `x1 = eps * x`.
#[derive(Debug, Clone)]
pub enum ForceProfile {
    Zero,
    /// `f(y) = amplitude * exp(-((y - center) / width)^2)`.
    Gaussian {
        amplitude: f64,
        width: f64,
        center: f64,
    },
    /// Real/imaginary parts given as expressions in `y`; derivatives via
    /// finite differences (available up to order 2).
    Custom {
        src_re: String,
        src_im: Option<String>,
        expr_re: Expr,
        expr_im: Option<Expr>,
        decay_radius: f64,
    },
}

impl ForceProfile {
    pub fn zero() -> Self {
        ForceProfile::Zero
    }

    pub fn gaussian(amplitude: f64, width: f64, center: f64) -> Self {
        assert!(width > 0.0, "gaussian width must be positive");
        ForceProfile::Gaussian {
            amplitude,
            width,
            center,
        }
    }

    pub fn custom(src_re: &str, src_im: Option<&str>, decay_radius: f64) -> Result<Self> {
        let expr_re = Expr::parse(src_re, &["y"])?;
        let expr_im = match src_im {
            Some(s) => Some(Expr::parse(s, &["y"])?),
            None => None,
        };
        if decay_radius <= 0.0 {
            return Err(Error::Validation(
                "custom force needs a positive decay radius".into(),
            ));
        }
        Ok(ForceProfile::Custom {
            src_re: src_re.to_string(),
            src_im: src_im.map(|s| s.to_string()),
            expr_re,
            expr_im,
            decay_radius,
        })
    }

    pub fn describe(&self) -> String {
        match self {
            ForceProfile::Zero => "zero".to_string(),
            ForceProfile::Gaussian {
                amplitude,
                width,
                center,
            } => format!("gaussian amplitude={} width={} center={}", amplitude, width, center),
            ForceProfile::Custom {
                src_re,
                src_im,
                decay_radius,
                ..
            } => match src_im {
                Some(im) => format!("custom re={} im={} radius={}", src_re, im, decay_radius),
                None => format!("custom re={} radius={}", src_re, decay_radius),
            },
        }
    }

    pub fn eval(&self, y: f64) -> Complex64 {
        self.derivative(0, y)
    }

    /// `order`-th derivative of `f` at `y`. Gaussian derivatives are exact
    /// (Hermite recursion); custom profiles go through 4th-order central
    /// differences and stop at order 2.
    pub fn derivative(&self, order: usize, y: f64) -> Complex64 {
        debug_assert!(
            order <= self.max_derivative_order(),
            "derivative order {} beyond profile capability {}",
            order,
            self.max_derivative_order()
        );
        match self {
            ForceProfile::Zero => Complex64::new(0.0, 0.0),
            ForceProfile::Gaussian {
                amplitude,
                width,
                center,
            } => {
                let u = (y - center) / width;
                // d^n/dy^n exp(-u^2) = (-1/w)^n H_n(u) exp(-u^2) with the
                // physicists' Hermite polynomials H_n.
                let mut h_prev = 1.0; // H_0
                let mut h = 2.0 * u; // H_1
                let hn = match order {
                    0 => 1.0,
                    1 => h,
                    _ => {
                        for n in 1..order {
                            let next = 2.0 * u * h - 2.0 * (n as f64) * h_prev;
                            h_prev = h;
                            h = next;
                        }
                        h
                    }
                };
                let scale = (-1.0 / width).powi(order as i32);
                Complex64::new(amplitude * scale * hn * (-u * u).exp(), 0.0)
            }
            ForceProfile::Custom {
                expr_re, expr_im, ..
            } => {
                let eval = |yy: f64| {
                    Complex64::new(
                        expr_re.eval(&[yy]),
                        expr_im.as_ref().map_or(0.0, |e| e.eval(&[yy])),
                    )
                };
                let h = H_FD;
                match order {
                    0 => eval(y),
                    1 => {
                        (-eval(y + 2.0 * h) + 8.0 * eval(y + h) - 8.0 * eval(y - h)
                            + eval(y - 2.0 * h))
                            / (12.0 * h)
                    }
                    2 => {
                        (-eval(y + 2.0 * h) + 16.0 * eval(y + h) - 30.0 * eval(y)
                            + 16.0 * eval(y - h)
                            - eval(y - 2.0 * h))
                            / (12.0 * h * h)
                    }
                    _ => unreachable!("guarded by max_derivative_order"),
                }
            }
        }
    }

    /// Highest derivative order this profile can supply.
    pub fn max_derivative_order(&self) -> usize {
        match self {
            ForceProfile::Zero => usize::MAX,
            ForceProfile::Gaussian { .. } => 12,
            ForceProfile::Custom { .. } => 2,
        }
    }

    /// Radius beyond which |f| is guaranteed (Gaussian) or declared (custom)
    /// to sit below [`TOL_DECAY`].
    pub fn support_radius(&self) -> f64 {
        match self {
            ForceProfile::Zero => 0.0,
            ForceProfile::Gaussian {
                amplitude,
                width,
                center,
            } => {
                let ratio = (amplitude.abs() / TOL_DECAY).max(1.0);
                center.abs() + width * ratio.ln().sqrt()
            }
            ForceProfile::Custom { decay_radius, .. } => *decay_radius,
        }
    }

    /// Whether the profile is real-valued. Built-in profiles are real by
    /// construction; a custom profile is real when it has no imaginary
    /// expression, or when the imaginary part samples to zero over the
    /// declared support.
    pub fn is_real(&self) -> bool {
        match self {
            ForceProfile::Zero | ForceProfile::Gaussian { .. } => true,
            ForceProfile::Custom {
                expr_im,
                decay_radius,
                ..
            } => match expr_im {
                None => true,
                Some(_) => {
                    let n = 129;
                    (0..n).all(|i| {
                        let y = decay_radius * (2.0 * i as f64 / (n - 1) as f64 - 1.0);
                        self.eval(y).im.abs() < 1e-13
                    })
                }
            },
        }
    }

    /// Verifies the decay invariant by sampling |f| outside the support
    /// radius (out to 4x the radius, both sides).
    pub fn check_decay(&self) -> Result<()> {
        let r = self.support_radius();
        if r == 0.0 {
            return Ok(());
        }
        let n = 128;
        for i in 0..n {
            let y = r * (1.0 + 3.0 * i as f64 / (n - 1) as f64);
            for side in [y, -y] {
                let m = self.eval(side).norm();
                if m >= TOL_DECAY {
                    return Err(Error::Validation(format!(
                        "force does not decay: |f({})| = {:.3e} >= {:.1e}",
                        side, m, TOL_DECAY
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_values() {
        let f = ForceProfile::gaussian(2.0, 0.5, 1.0);
        assert!((f.eval(1.0).re - 2.0).abs() < 1e-15);
        assert!((f.eval(1.5).re - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(f.eval(0.0).im, 0.0);
    }

    #[test]
    fn gaussian_derivatives_match_finite_differences() {
        let f = ForceProfile::gaussian(1.3, 0.8, -0.2);
        let h = 1e-5;
        for &y in &[-1.0, 0.0, 0.4, 1.1] {
            // Order 1 vs central difference of eval.
            let fd1 = (f.eval(y + h) - f.eval(y - h)) / (2.0 * h);
            assert!((f.derivative(1, y) - fd1).norm() < 1e-8);
            // Order k vs central difference of order k-1 (recursion check).
            for k in 2..=4 {
                let fdk = (f.derivative(k - 1, y + h) - f.derivative(k - 1, y - h)) / (2.0 * h);
                assert!(
                    (f.derivative(k, y) - fdk).norm() < 1e-6,
                    "order {} at y={}",
                    k,
                    y
                );
            }
        }
    }

    #[test]
    fn custom_profile_and_derivatives() {
        let f = ForceProfile::custom("exp(-y^2)", None, 6.0).unwrap();
        let g = ForceProfile::gaussian(1.0, 1.0, 0.0);
        for &y in &[-0.7, 0.0, 0.3, 1.4] {
            assert!((f.eval(y) - g.eval(y)).norm() < 1e-15);
            assert!((f.derivative(1, y) - g.derivative(1, y)).norm() < 1e-9);
            assert!((f.derivative(2, y) - g.derivative(2, y)).norm() < 1e-7);
        }
        assert_eq!(f.max_derivative_order(), 2);
    }

    #[test]
    fn complex_custom_profile() {
        let f = ForceProfile::custom("exp(-y^2)", Some("y*exp(-y^2)"), 7.0).unwrap();
        let v = f.eval(0.5);
        assert!((v.re - (-0.25f64).exp()).abs() < 1e-15);
        assert!((v.im - 0.5 * (-0.25f64).exp()).abs() < 1e-15);
        f.check_decay().unwrap();
    }

    #[test]
    fn decay_invariant() {
        ForceProfile::gaussian(1.5, 0.5, 0.0).check_decay().unwrap();
        ForceProfile::zero().check_decay().unwrap();
        // A profile that does not decay must be rejected.
        let bad = ForceProfile::custom("1 + 0*y", None, 3.0).unwrap();
        assert!(bad.check_decay().is_err());
    }

    #[test]
    fn support_radius_is_tight_enough() {
        let f = ForceProfile::gaussian(1.0, 1.0, 0.0);
        let r = f.support_radius();
        assert!(f.eval(r).norm() < TOL_DECAY * 1.0001);
        assert!(f.eval(0.99 * r).norm() > TOL_DECAY);
    }
}
