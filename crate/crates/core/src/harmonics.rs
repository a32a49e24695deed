//! Associated Legendre functions, orthonormal spherical harmonics, and
//! shell-wise expansion evaluation/analysis on the sphere grid.
//!
//! Normalization: Y_n^m(theta, phi) = S_n^m P_n^{|m|}(cos theta) e^{i m phi}
//! with S_n^m = sqrt((2n+1)/(4 pi) (n-|m|)!/(n+|m|)!) and the Condon-Shortley
//! (-1)^m inside P. Since P uses |m|, Y_n^{-m} = conj(Y_n^m) with no extra
//! sign. Coefficients unroll as f_{0,0}, f_{1,-1}, f_{1,0}, f_{1,1}, ...

use crate::error::{Error, Result};
use crate::fft;
use crate::grid::SphereGrid;
use num_complex::Complex64;
use std::f64::consts::PI;

/// Expansion degree for a shell: p(k) = round(k) + 2.
pub fn degree_for_shell(k: f64) -> usize {
    k.round() as usize + 2
}

/// Position of f_{n,m} in the unrolled coefficient vector.
#[inline]
pub fn coef_index(n: usize, m: i64) -> usize {
    (n * n) as usize + (n as i64 + m) as usize
}

pub fn ncoef(p: usize) -> usize {
    (p + 1) * (p + 1)
}

/// Spherical-harmonic coefficients of one shell.
#[derive(Debug, Clone)]
pub struct ShellCoeffs {
    pub k: f64,
    pub p: usize,
    pub coeffs: Vec<Complex64>,
}

impl ShellCoeffs {
    pub fn zero(k: f64, p: usize) -> Self {
        ShellCoeffs {
            k,
            p,
            coeffs: vec![Complex64::default(); ncoef(p)],
        }
    }
}

/// Unnormalized associated Legendre P_n^m with the Condon-Shortley factor,
/// by the standard upward recurrence in n at fixed m.
pub fn assoc_legendre(n: usize, m: usize, x: f64) -> Result<f64> {
    if m > n || !(-1.0..=1.0).contains(&x) {
        return Err(Error::param(format!("assoc_legendre domain: n={n} m={m} x={x}")));
    }
    let s = (1.0 - x * x).max(0.0).sqrt();
    // P_m^m = (-1)^m (2m-1)!! s^m
    let mut pmm = 1.0;
    for i in 1..=m {
        pmm *= -((2 * i - 1) as f64) * s;
    }
    if n == m {
        return Ok(pmm);
    }
    let mut pm1 = pmm;
    let mut p0 = x * (2 * m + 1) as f64 * pmm; // P_{m+1}^m
    for nn in (m + 2)..=n {
        let pn = ((2 * nn - 1) as f64 * x * p0 - (nn + m - 1) as f64 * pm1) / (nn - m) as f64;
        pm1 = p0;
        p0 = pn;
    }
    Ok(p0)
}

/// Fully normalized N_n^m = S_n^m P_n^m for all 0 <= m <= n <= p at the given
/// abscissas, by overflow-safe normalized recurrences. Layout is column-major
/// in m: for fixed m the degrees n = m..p are contiguous per row.
#[derive(Debug, Clone)]
pub struct LegendreTable {
    pub p: usize,
    pub nrows: usize,
    stride: usize,
    vals: Vec<f64>,
}

impl LegendreTable {
    pub fn new(p: usize, xs: &[f64]) -> Self {
        let stride = (p + 1) * (p + 2) / 2;
        let mut vals = vec![0.0; xs.len() * stride];
        for (j, &x) in xs.iter().enumerate() {
            let row = &mut vals[j * stride..(j + 1) * stride];
            fill_normalized_row(p, x, row);
        }
        LegendreTable {
            p,
            nrows: xs.len(),
            stride,
            vals,
        }
    }

    /// Offset of (n=m..p, m) run within a row.
    #[inline]
    fn m_offset(&self, m: usize) -> usize {
        m * (self.p + 1) - m * (m.saturating_sub(1)) / 2
    }

    #[inline]
    pub fn get(&self, j: usize, n: usize, m: usize) -> f64 {
        self.vals[j * self.stride + self.m_offset(m) + (n - m)]
    }

    /// Contiguous N_n^m for n = m..=p at row j.
    #[inline]
    pub fn m_run(&self, j: usize, m: usize) -> &[f64] {
        let off = j * self.stride + self.m_offset(m);
        &self.vals[off..off + (self.p + 1 - m)]
    }
}

fn fill_normalized_row(p: usize, x: f64, row: &mut [f64]) {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let idx = |m: usize, n: usize| m * (p + 1) - m * (m.saturating_sub(1)) / 2 + (n - m);
    row[idx(0, 0)] = 0.5 / PI.sqrt(); // N_0^0 = 1/sqrt(4 pi)
    for m in 1..=p {
        // N_m^m = -sqrt((2m+1)/(2m)) s N_{m-1}^{m-1}
        let f = ((2 * m + 1) as f64 / (2 * m) as f64).sqrt();
        row[idx(m, m)] = -f * s * row[idx(m - 1, m - 1)];
    }
    for m in 0..p {
        // N_{m+1}^m = x sqrt(2m+3) N_m^m
        row[idx(m, m + 1)] = x * ((2 * m + 3) as f64).sqrt() * row[idx(m, m)];
        for n in (m + 2)..=p {
            let nf = n as f64;
            let mf = m as f64;
            let a = ((4.0 * nf * nf - 1.0) / (nf * nf - mf * mf)).sqrt();
            let b = (((nf - 1.0) * (nf - 1.0) - mf * mf) / (4.0 * (nf - 1.0) * (nf - 1.0) - 1.0))
                .sqrt();
            row[idx(m, n)] = a * (x * row[idx(m, n - 1)] - b * row[idx(m, n - 2)]);
        }
    }
}

/// Orthonormal spherical harmonic Y_n^m at one point.
pub fn ynm(n: usize, m: i64, theta: f64, phi: f64) -> Result<Complex64> {
    if m.unsigned_abs() as usize > n {
        return Err(Error::param(format!("ynm order out of range: n={n} m={m}")));
    }
    let t = LegendreTable::new(n, &[theta.cos()]);
    let nv = t.get(0, n, m.unsigned_abs() as usize);
    let ang = m as f64 * phi;
    Ok(nv * Complex64::new(ang.cos(), ang.sin()))
}

/// Evaluate a shell expansion on the full regular grid (Ntheta x Nphi,
/// row-major): per-row Legendre sums in m, then an inverse FFT over phi.
pub fn eval_on_regular_grid(
    c: &ShellCoeffs,
    sphere: &SphereGrid,
    table: &LegendreTable,
) -> Result<Vec<Complex64>> {
    check_band(c.p, sphere, table)?;
    let (nt, np) = (sphere.ntheta, sphere.nphi);
    let p = c.p;
    let mut out = vec![Complex64::default(); nt * np];
    let mut buf = vec![Complex64::default(); np];
    for j in 0..nt {
        buf.iter_mut().for_each(|v| *v = Complex64::default());
        for m in 0..=p as i64 {
            // table may be built for a higher degree; use only n <= p
            let run = &table.m_run(j, m as usize)[..p + 1 - m as usize];
            let mut pos = Complex64::default();
            let mut neg = Complex64::default();
            for (t, &nv) in run.iter().enumerate() {
                let n = m as usize + t;
                pos += c.coeffs[coef_index(n, m)] * nv;
                if m > 0 {
                    neg += c.coeffs[coef_index(n, -m)] * nv;
                }
            }
            buf[(m as usize) % np] += pos;
            if m > 0 {
                buf[np - m as usize] += neg;
            }
        }
        fft::inverse(&mut buf);
        out[j * np..(j + 1) * np].copy_from_slice(&buf);
    }
    Ok(out)
}

/// Project grid values onto harmonics through the Fejér x trapezoid rule:
/// f_nm = (2 pi / Nphi) sum_{j,l} w_j values(j,l) conj(Y_n^m).
pub fn analyze_on_regular_grid(
    values: &[Complex64],
    sphere: &SphereGrid,
    k: f64,
    p: usize,
    table: &LegendreTable,
) -> Result<ShellCoeffs> {
    check_band(p, sphere, table)?;
    let c = project_rows(values, sphere, p, table, Some(&sphere.weights))?;
    Ok(ShellCoeffs {
        k,
        p,
        coeffs: c.into_iter().map(|v| v * 2.0 * PI / sphere.nphi as f64).collect(),
    })
}

/// Plain Euclidean adjoint of eval_on_regular_grid (no quadrature weights).
pub fn adjoint_eval_on_regular_grid(
    values: &[Complex64],
    sphere: &SphereGrid,
    p: usize,
    table: &LegendreTable,
) -> Result<Vec<Complex64>> {
    check_band(p, sphere, table)?;
    project_rows(values, sphere, p, table, None)
}

fn project_rows(
    values: &[Complex64],
    sphere: &SphereGrid,
    p: usize,
    table: &LegendreTable,
    weights: Option<&[f64]>,
) -> Result<Vec<Complex64>> {
    let (nt, np) = (sphere.ntheta, sphere.nphi);
    if values.len() != nt * np {
        return Err(Error::param("grid value count mismatch"));
    }
    let mut out = vec![Complex64::default(); ncoef(p)];
    let mut buf = vec![Complex64::default(); np];
    for j in 0..nt {
        buf.copy_from_slice(&values[j * np..(j + 1) * np]);
        fft::forward(&mut buf); // bin m holds sum_l v e^{-i m phi_l}
        let wj = weights.map_or(1.0, |w| w[j]);
        for m in 0..=p as i64 {
            let run = &table.m_run(j, m as usize)[..p + 1 - m as usize];
            let vpos = buf[(m as usize) % np] * wj;
            let vneg = if m > 0 { buf[np - m as usize] * wj } else { Complex64::default() };
            for (t, &nv) in run.iter().enumerate() {
                let n = m as usize + t;
                out[coef_index(n, m)] += nv * vpos;
                if m > 0 {
                    out[coef_index(n, -m)] += nv * vneg;
                }
            }
        }
    }
    Ok(out)
}

fn check_band(p: usize, sphere: &SphereGrid, table: &LegendreTable) -> Result<()> {
    if p + 1 > sphere.ntheta {
        return Err(Error::param(format!(
            "degree {p} too high for Ntheta={}",
            sphere.ntheta
        )));
    }
    if 2 * p + 1 > sphere.nphi {
        return Err(Error::param(format!("degree {p} aliases on Nphi={}", sphere.nphi)));
    }
    if table.p < p || table.nrows != sphere.ntheta {
        return Err(Error::param("legendre table does not cover grid/degree"));
    }
    Ok(())
}

/// Direct (slow) evaluation at scattered points; the oracle for fast paths.
pub fn eval_at_points(c: &ShellCoeffs, points: &[(f64, f64)]) -> Vec<Complex64> {
    points
        .iter()
        .map(|&(theta, phi)| eval_at_point(c, theta, phi))
        .collect()
}

pub fn eval_at_point(c: &ShellCoeffs, theta: f64, phi: f64) -> Complex64 {
    let table = LegendreTable::new(c.p, &[theta.cos()]);
    eval_with_table(c, &table, 0, phi)
}

/// Point evaluation reusing a precomputed Legendre row (the row's abscissa
/// must be cos(theta) of the target point; table degree >= c.p).
pub fn eval_with_table(c: &ShellCoeffs, table: &LegendreTable, row: usize, phi: f64) -> Complex64 {
    let mut acc = Complex64::default();
    let e1 = Complex64::new(phi.cos(), phi.sin());
    let mut em = Complex64::new(1.0, 0.0);
    for m in 0..=c.p as i64 {
        let run = &table.m_run(row, m as usize)[..c.p + 1 - m as usize];
        let mut pos = Complex64::default();
        let mut neg = Complex64::default();
        for (t, &nv) in run.iter().enumerate() {
            let n = m as usize + t;
            pos += c.coeffs[coef_index(n, m)] * nv;
            if m > 0 {
                neg += c.coeffs[coef_index(n, -m)] * nv;
            }
        }
        acc += pos * em;
        if m > 0 {
            acc += neg * em.conj();
        }
        em *= e1;
    }
    acc
}
