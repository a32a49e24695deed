//! Spherical k-space discretization: radial shells, Fejér-1 polar quadrature,
//! equispaced azimuths, and the discrete inverse transform to a real cube.

use crate::error::{Error, Result};
use crate::harmonics::degree_for_shell;
use num_complex::Complex64;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Equispaced radial shells k_q = q*dk, q = 1..Nr, so k_1 = dk and k_Nr = kmax.
#[derive(Debug, Clone)]
pub struct RadialGrid {
    pub k_values: Vec<f64>,
    pub dk: f64,
    pub kmax: f64,
}

impl RadialGrid {
    pub fn nr(&self) -> usize {
        self.k_values.len()
    }

    /// Trapezoid weight of shell q: dk, halved at the outermost shell.
    /// The implicit k=0 endpoint carries no weight (k^2 kills it).
    pub fn radial_weight(&self, q: usize) -> f64 {
        if q + 1 == self.nr() {
            0.5 * self.dk
        } else {
            self.dk
        }
    }
}

/// Angular product grid: first-kind Chebyshev nodes in theta with Fejér-1
/// weights in mu = cos(theta), equispaced phi.
#[derive(Debug, Clone)]
pub struct SphereGrid {
    pub ntheta: usize,
    pub nphi: usize,
    pub thetas: Vec<f64>,
    pub mus: Vec<f64>,
    pub weights: Vec<f64>,
    pub phis: Vec<f64>,
}

impl SphereGrid {
    pub fn new(ntheta: usize, nphi: usize) -> Self {
        let thetas: Vec<f64> = (1..=ntheta)
            .map(|j| (2 * j - 1) as f64 * PI / (2.0 * ntheta as f64))
            .collect();
        let mus: Vec<f64> = thetas.iter().map(|t| t.cos()).collect();
        let weights = fejer1_weights(ntheta);
        let phis: Vec<f64> = (0..nphi)
            .map(|l| 2.0 * PI * l as f64 / nphi as f64)
            .collect();
        SphereGrid {
            ntheta,
            nphi,
            thetas,
            mus,
            weights,
            phis,
        }
    }
}

/// Fejér's first rule on first-kind Chebyshev nodes; weights sum to 2.
pub fn fejer1_weights(n: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(n);
    for j in 1..=n {
        let theta = (2 * j - 1) as f64 * PI / (2.0 * n as f64);
        let mut s = 0.0;
        for m in 1..=(n / 2) {
            s += (2.0 * m as f64 * theta).cos() / ((4 * m * m - 1) as f64);
        }
        w.push(2.0 / n as f64 * (1.0 - 2.0 * s));
    }
    w
}

#[derive(Debug, Clone)]
pub struct Grids {
    pub radial: RadialGrid,
    pub sphere: SphereGrid,
    pub oversample: f64,
}

/// Build both grids. Ntheta/Nphi honor the oversample factor but are floored
/// so the Fejér rule stays exact for products of harmonics up to the maximum
/// shell degree p(kmax): Ntheta >= 2p+1, Nphi >= 2p+2 (and even).
pub fn build_grids(kmax: f64, dk: f64, oversample: f64) -> Result<Grids> {
    if !(kmax > 0.0) || !(dk > 0.0) || kmax < dk {
        return Err(Error::param(format!("need kmax >= dk > 0, got kmax={kmax} dk={dk}")));
    }
    if oversample < 1.0 {
        return Err(Error::param(format!("oversample must be >= 1, got {oversample}")));
    }
    let nr = (kmax / dk).round() as usize;
    if nr == 0 {
        return Err(Error::param("no radial shells"));
    }
    let k_values: Vec<f64> = (1..=nr).map(|q| q as f64 * dk).collect();
    let kmax_eff = k_values[nr - 1];
    let pmax = degree_for_shell(kmax_eff);

    let ntheta = ((oversample * kmax_eff).ceil() as usize).max(2 * pmax + 1);
    let mut nphi = ((oversample * 2.0 * kmax_eff).ceil() as usize).max(2 * pmax + 2);
    if nphi % 2 == 1 {
        nphi += 1;
    }

    Ok(Grids {
        radial: RadialGrid {
            k_values,
            dk,
            kmax: kmax_eff,
        },
        sphere: SphereGrid::new(ntheta, nphi),
        oversample,
    })
}

impl Grids {
    /// 3D quadrature weight of node (q, j, l): (2pi/Nphi) k^2 w_j dk_eff.
    pub fn node_weight(&self, q: usize, j: usize) -> f64 {
        let k = self.radial.k_values[q];
        2.0 * PI / self.sphere.nphi as f64 * k * k * self.sphere.weights[j] * self.radial.radial_weight(q)
    }
}

/// Real scalar field on a uniform n^3 grid over [-1,1]^3, x fastest.
/// Multiply coordinates by `d` for angstroms.
#[derive(Debug, Clone)]
pub struct DensityCube {
    pub n: usize,
    pub d: f64,
    pub values: Vec<f64>,
}

impl DensityCube {
    /// Cell-centered sample coordinate along one axis.
    pub fn coord(n: usize, i: usize) -> f64 {
        -1.0 + (i as f64 + 0.5) * 2.0 / n as f64
    }

    pub fn zero(n: usize, d: f64) -> Self {
        DensityCube { n, d, values: vec![0.0; n * n * n] }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Evaluate the inverse-transform quadrature sum of F (sampled on the full
/// spherical grid, index (q*Ntheta + j)*Nphi + l) at all n^3 cube points.
/// Returns the real cube and the imaginary residual ratio max|im|/max|re|.
pub fn inverse_fourier_volume(
    values: &[Complex64],
    grids: &Grids,
    n: usize,
    d: f64,
) -> Result<(DensityCube, f64)> {
    let nr = grids.radial.nr();
    let (nt, np) = (grids.sphere.ntheta, grids.sphere.nphi);
    if values.len() != nr * nt * np {
        return Err(Error::param(format!(
            "sample count {} does not match grid {}x{}x{}",
            values.len(),
            nr,
            nt,
            np
        )));
    }
    if n == 0 {
        return Err(Error::param("cube resolution must be positive"));
    }

    let xs: Vec<f64> = (0..n).map(|i| DensityCube::coord(n, i)).collect();
    let norm = 1.0 / (2.0 * PI).powi(3);
    let pairs: Vec<(usize, usize)> = (0..nr)
        .flat_map(|q| (0..nt).map(move |j| (q, j)))
        .collect();

    // Each (q,j) contributes w * e^{-ik cos(theta) z} * G(x,y) with
    // G(x,y) = sum_l F_l u_l(x) v_l(y); accumulate per-thread cubes.
    let acc = pairs
        .par_iter()
        .fold(
            || (vec![Complex64::default(); n * n * n], vec![Complex64::default(); n * n]),
            |(mut cube, mut g), &(q, j)| {
                let k = grids.radial.k_values[q];
                let st = grids.sphere.thetas[j].sin();
                let ct = grids.sphere.mus[j];
                let w = grids.node_weight(q, j) * norm;
                g.iter_mut().for_each(|v| *v = Complex64::default());
                let mut u = vec![Complex64::default(); n];
                let mut v = vec![Complex64::default(); n];
                for l in 0..np {
                    let f = values[(q * nt + j) * np + l];
                    if f.norm_sqr() == 0.0 {
                        continue;
                    }
                    let (cx, cy) = (
                        k * st * grids.sphere.phis[l].cos(),
                        k * st * grids.sphere.phis[l].sin(),
                    );
                    fill_phase(&mut u, &xs, cx);
                    fill_phase(&mut v, &xs, cy);
                    for (iy, vv) in v.iter().enumerate() {
                        let fv = f * vv;
                        let row = &mut g[iy * n..(iy + 1) * n];
                        for (gv, uv) in row.iter_mut().zip(&u) {
                            *gv += fv * uv;
                        }
                    }
                }
                for (iz, &z) in xs.iter().enumerate() {
                    let ang = -k * ct * z;
                    let ph = w * Complex64::new(ang.cos(), ang.sin());
                    let slab = &mut cube[iz * n * n..(iz + 1) * n * n];
                    for (cv, gv) in slab.iter_mut().zip(&g) {
                        *cv += ph * gv;
                    }
                }
                (cube, g)
            },
        )
        .map(|(cube, _)| cube)
        .reduce(
            || vec![Complex64::default(); n * n * n],
            |mut a, b| {
                for (av, bv) in a.iter_mut().zip(&b) {
                    *av += bv;
                }
                a
            },
        );

    let mut imag_max = 0.0f64;
    let mut real_max = 0.0f64;
    let mut out = Vec::with_capacity(n * n * n);
    for v in &acc {
        imag_max = imag_max.max(v.im.abs());
        real_max = real_max.max(v.re.abs());
        out.push(v.re);
    }
    let ratio = if real_max > 0.0 { imag_max / real_max } else { 0.0 };
    Ok((DensityCube { n, d, values: out }, ratio))
}

/// u[a] = e^{-i c x_a} over the uniform cube coordinates, by phase recurrence.
fn fill_phase(u: &mut [Complex64], xs: &[f64], c: f64) {
    let h = if xs.len() > 1 { xs[1] - xs[0] } else { 0.0 };
    let step = Complex64::new((-c * h).cos(), (-c * h).sin());
    let mut cur = Complex64::new((-c * xs[0]).cos(), (-c * xs[0]).sin());
    for v in u.iter_mut() {
        *v = cur;
        cur *= step;
    }
}
