//! Not-a-knot cubic spline on uniformly spaced knots, with polynomial
//! extrapolation from the end pieces. Used to upsample ring values along k
//! before radial quadrature.

use num_complex::Complex64;

/// Spline through (x0 + i h, y_i). With not-a-knot ends and uniform spacing
/// the boundary moments M_1 and M_{n-2} decouple: substituting the end
/// conditions M_0 - 2M_1 + M_2 = 0 into the first interior equation leaves
/// 6 M_1 = r_1, and symmetrically at the other end.
#[derive(Debug, Clone)]
pub struct UniformSpline {
    x0: f64,
    h: f64,
    ys: Vec<Complex64>,
    ms: Vec<Complex64>,
}

impl UniformSpline {
    pub fn new(x0: f64, h: f64, ys: &[Complex64]) -> Self {
        let n = ys.len();
        assert!(n >= 2 && h > 0.0, "need at least two knots");
        let mut ms = vec![Complex64::default(); n];
        if n >= 4 {
            let r = |i: usize| 6.0 * (ys[i - 1] - 2.0 * ys[i] + ys[i + 1]) / (h * h);
            ms[1] = r(1) / 6.0;
            ms[n - 2] = r(n - 2) / 6.0;
            if n > 5 {
                // Thomas solve for M_2..M_{n-3}
                let len = n - 4;
                let mut diag = vec![4.0; len];
                let mut rhs: Vec<Complex64> = (2..n - 2).map(r).collect();
                rhs[0] -= ms[1];
                rhs[len - 1] -= ms[n - 2];
                for i in 1..len {
                    let f = 1.0 / diag[i - 1];
                    diag[i] -= f;
                    let prev = rhs[i - 1];
                    rhs[i] -= f * prev;
                }
                ms[len + 1] = rhs[len - 1] / diag[len - 1];
                for i in (0..len - 1).rev() {
                    ms[i + 2] = (rhs[i] - ms[i + 3]) / diag[i];
                }
            } else if n == 5 {
                ms[2] = (r(2) - ms[1] - ms[3]) / 4.0;
            }
            ms[0] = 2.0 * ms[1] - ms[2];
            ms[n - 1] = 2.0 * ms[n - 2] - ms[n - 3];
        } else if n == 3 {
            // single quadratic through three points: constant second derivative
            let m = (ys[0] - 2.0 * ys[1] + ys[2]) / (h * h);
            ms = vec![m; 3];
        }
        // n == 2: moments stay zero (linear interpolation)
        UniformSpline {
            x0,
            h,
            ys: ys.to_vec(),
            ms,
        }
    }

    /// Evaluate at x; outside the knot range the nearest end piece is used.
    pub fn eval(&self, x: f64) -> Complex64 {
        let n = self.ys.len();
        let h = self.h;
        let fi = ((x - self.x0) / h).floor();
        let i = (fi.max(0.0) as usize).min(n - 2);
        let s = x - (self.x0 + i as f64 * h);
        let t = h - s;
        self.ms[i] * (t * t * t) / (6.0 * h)
            + self.ms[i + 1] * (s * s * s) / (6.0 * h)
            + (self.ys[i] / h - self.ms[i] * h / 6.0) * t
            + (self.ys[i + 1] / h - self.ms[i + 1] * h / 6.0) * s
    }
}
