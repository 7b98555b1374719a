//! Adaptive complex-valued Gauss-Kronrod (G7K15) quadrature.
//!
//! The resonance-layer amplitude is an oscillatory integral along each
//! characteristic. The caller seeds panels that resolve the local phase
//! (at most ~pi/4 of phase advance per panel) and this module refines
//! adaptively until the Kronrod error estimate meets tolerance.

use num_complex::Complex64;
use std::collections::BinaryHeap;

use crate::error::Error;
use crate::Result;

// G7K15 abscissae on [-1, 1] (positive half; the rule is symmetric) and the
// matching Kronrod weights. Odd-indexed abscissae are the embedded Gauss-7
// nodes with weights WG.
const XGK: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715526,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];
const WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

/// One panel's Kronrod value and |K15 - G7| estimate.
fn gk15<F: Fn(f64) -> Complex64>(f: &F, a: f64, b: f64) -> (Complex64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = half * XGK[j];
        let fsum = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * fsum;
        if j % 2 == 1 {
            gauss += WG[j / 2] * fsum;
        }
    }
    kronrod *= half;
    gauss *= half;
    ((kronrod), (kronrod - gauss).norm())
}

#[derive(Debug)]
struct Panel {
    a: f64,
    b: f64,
    value: Complex64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Integration result with the final Kronrod error bound.
#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: Complex64,
    pub error: f64,
    pub panels: usize,
}

/// Adaptive integral of `f` over `[a, b]` to `max(atol, rtol * |I|)`.
pub fn integrate<F: Fn(f64) -> Complex64>(
    f: F,
    a: f64,
    b: f64,
    rtol: f64,
    atol: f64,
    max_panels: usize,
) -> Result<QuadResult> {
    integrate_segmented(f, &[a, b], rtol, atol, max_panels)
}

/// Adaptive integral over the union of `[edges[i], edges[i+1]]`, refining the
/// worst panel first. Callers pre-split oscillatory ranges so every seed
/// panel has bounded phase advance.
pub fn integrate_segmented<F: Fn(f64) -> Complex64>(
    f: F,
    edges: &[f64],
    rtol: f64,
    atol: f64,
    max_panels: usize,
) -> Result<QuadResult> {
    assert!(edges.len() >= 2, "need at least one panel");
    let mut heap = BinaryHeap::new();
    let mut total = Complex64::new(0.0, 0.0);
    let mut total_err = 0.0;
    for w in edges.windows(2) {
        let (value, error) = gk15(&f, w[0], w[1]);
        total += value;
        total_err += error;
        heap.push(Panel {
            a: w[0],
            b: w[1],
            value,
            error,
        });
    }

    while total_err > atol.max(rtol * total.norm()) {
        if heap.len() >= max_panels {
            return Err(Error::Quadrature(format!(
                "error {:.3e} above tolerance after {} panels",
                total_err,
                heap.len()
            )));
        }
        let worst = heap.pop().expect("non-empty heap");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            return Err(Error::Quadrature(format!(
                "panel [{}, {}] no longer splittable at error {:.3e}",
                worst.a, worst.b, worst.error
            )));
        }
        total -= worst.value;
        total_err -= worst.error;
        for (lo, hi) in [(worst.a, mid), (mid, worst.b)] {
            let (value, error) = gk15(&f, lo, hi);
            total += value;
            total_err += error;
            heap.push(Panel {
                a: lo,
                b: hi,
                value,
                error,
            });
        }
    }

    Ok(QuadResult {
        value: total,
        error: total_err,
        panels: heap.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn polynomial_exact() {
        // G7 already integrates degree <= 13 exactly; K15 up to 22.
        let r = integrate(|x| c(x * x, 0.0), 0.0, 1.0, 1e-12, 1e-14, 64).unwrap();
        assert!((r.value.re - 1.0 / 3.0).abs() < 1e-15);
        assert!(r.value.im.abs() < 1e-15);
    }

    #[test]
    fn sine_area() {
        let r = integrate(|x| c(x.sin(), 0.0), 0.0, PI, 1e-13, 1e-15, 256).unwrap();
        assert!((r.value.re - 2.0).abs() < 1e-13);
    }

    #[test]
    fn oscillatory_exponential() {
        // int_0^T exp(ix) dx = (exp(iT) - 1) / i.
        let t_end = 50.0;
        let r = integrate(
            |x| Complex64::new(0.0, x).exp(),
            0.0,
            t_end,
            1e-12,
            1e-14,
            4096,
        )
        .unwrap();
        let exact = (Complex64::new(0.0, t_end).exp() - 1.0) / Complex64::new(0.0, 1.0);
        assert!((r.value - exact).norm() < 1e-11);
    }

    #[test]
    fn complex_gaussian_chirp() {
        // int exp(-(1 - i) s^2) ds = sqrt(pi / (1 - i)); the +-8 truncation
        // error is exp(-64), far below tolerance.
        let r = integrate(
            |s| (Complex64::new(-1.0, 1.0) * s * s).exp(),
            -8.0,
            8.0,
            1e-12,
            1e-14,
            4096,
        )
        .unwrap();
        let exact = (Complex64::new(PI, 0.0) / Complex64::new(1.0, -1.0)).sqrt();
        assert!((r.value - exact).norm() < 1e-11, "got {}", r.value);
    }

    #[test]
    fn segmented_matches_whole() {
        let f = |x: f64| c((x * x).cos(), (0.3 * x).sin());
        let whole = integrate(f, -3.0, 5.0, 1e-12, 1e-14, 2048).unwrap();
        let parts =
            integrate_segmented(f, &[-3.0, -1.0, 0.0, 2.5, 5.0], 1e-12, 1e-14, 2048).unwrap();
        assert!((whole.value - parts.value).norm() < 1e-11);
    }

    #[test]
    fn budget_exhaustion_is_an_error() {
        // 1/x is not integrable across 0; the panel budget must trip.
        let r = integrate(|x| c(1.0 / x, 0.0), 1e-12, 1.0, 1e-12, 1e-14, 8);
        assert!(r.is_err());
    }
}
