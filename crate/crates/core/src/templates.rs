//! Template banks: angular Fourier coefficients of every central slice of a
//! model over the (alpha_i, beta_j) orientation grid.
//!
//! For a slice with beam direction (alpha, beta), the sample at in-plane
//! angle psi lies at mu = -sin(alpha) cos(psi) and azimuth beta + phi0 with
//! phi0 = atan2(sin psi, cos(alpha) cos(psi)). Neither depends on k, and
//! beta enters only through the phase e^{i m beta}, so all beta columns of
//! one alpha row come from a single inverse FFT over m.

use crate::error::{Error, Result};
use crate::fft;
use crate::grid::{Grids, SphereGrid};
use crate::harmonics::{coef_index, LegendreTable};
use crate::model::VolumeModel;
use num_complex::Complex64;
use rayon::prelude::*;

/// Orientation search grid: alphas reuse the sphere's theta nodes, betas and
/// gammas the equispaced phi nodes.
#[derive(Debug, Clone)]
pub struct AngleGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
}

impl AngleGrid {
    pub fn from_sphere(sphere: &SphereGrid) -> Self {
        AngleGrid {
            alphas: sphere.thetas.clone(),
            betas: sphere.phis.clone(),
            gammas: sphere.phis.clone(),
        }
    }
}

/// Ring coefficients S^{ij}_n(k) for one shell, |n| <= nq, plus the per-(i,j)
/// ring power sum_n |S_n|^2 used for template norms.
#[derive(Debug, Clone)]
pub struct TemplateShell {
    pub k: f64,
    pub nq: usize,
    pub nbeta: usize,
    coeffs: Vec<Complex64>,
    pub ring_power: Vec<f64>,
}

impl TemplateShell {
    #[inline]
    pub fn ring(&self, i: usize, j: usize) -> &[Complex64] {
        let w = 2 * self.nq + 1;
        let off = (i * self.nbeta + j) * w;
        &self.coeffs[off..off + w]
    }
}

#[derive(Debug, Clone)]
pub struct TemplateBank {
    pub angles: AngleGrid,
    pub shells: Vec<TemplateShell>,
    pub nalpha: usize,
    pub nbeta: usize,
}

impl TemplateBank {
    pub fn k_upper(&self) -> f64 {
        self.shells.last().map_or(0.0, |s| s.k)
    }
}

/// Generate ring coefficients for all shells with k <= k_upper.
pub fn generate_templates(
    model: &VolumeModel,
    grids: &Grids,
    k_upper: f64,
) -> Result<TemplateBank> {
    model.check_compatible(grids)?;
    let shells = model.shells_within(k_upper);
    if shells.is_empty() {
        return Err(Error::param(format!("no shells below k_upper={k_upper}")));
    }
    let sphere = &grids.sphere;
    let (na, nb) = (sphere.ntheta, sphere.nphi);
    let pmax = shells.iter().map(|s| s.p).max().unwrap();
    if pmax + 1 > sphere.ntheta || 2 * pmax + 1 > sphere.nphi {
        return Err(Error::param("template degree exceeds angle grid"));
    }
    let psis = &sphere.phis;

    // per alpha row: per shell, the (2nq+1) coefficients of all beta columns
    let rows: Vec<Vec<Vec<Complex64>>> = (0..na)
        .into_par_iter()
        .map(|i| {
            let alpha = sphere.thetas[i];
            let (sa, ca) = alpha.sin_cos();
            let mus: Vec<f64> = psis.iter().map(|&psi| -sa * psi.cos()).collect();
            let phi0s: Vec<f64> = psis
                .iter()
                .map(|&psi| psi.sin().atan2(ca * psi.cos()))
                .collect();
            let table = LegendreTable::new(pmax, &mus);
            let mut out_row = Vec::with_capacity(shells.len());
            let mut vt = vec![Complex64::default(); nb * nb];
            let mut bins = vec![Complex64::default(); nb];
            let mut col = vec![Complex64::default(); nb];
            for shell in shells {
                let p = shell.p;
                let nq = p;
                for l in 0..nb {
                    bins.iter_mut().for_each(|v| *v = Complex64::default());
                    let e1 = Complex64::new(phi0s[l].cos(), phi0s[l].sin());
                    let mut em = Complex64::new(1.0, 0.0); // e^{i m phi0}
                    for m in 0..=p {
                        let run = &table.m_run(l, m)[..p + 1 - m];
                        let mut pos = Complex64::default();
                        let mut neg = Complex64::default();
                        for (t, &nv) in run.iter().enumerate() {
                            let n = m + t;
                            pos += shell.coeffs[coef_index(n, m as i64)] * nv;
                            if m > 0 {
                                neg += shell.coeffs[coef_index(n, -(m as i64))] * nv;
                            }
                        }
                        bins[m % nb] += pos * em;
                        if m > 0 {
                            bins[nb - m] += neg * em.conj();
                        }
                        em *= e1;
                    }
                    fft::inverse(&mut bins); // values over beta_j
                    for j in 0..nb {
                        vt[j * nb + l] = bins[j];
                    }
                }
                let mut shell_out = vec![Complex64::default(); nb * (2 * nq + 1)];
                for j in 0..nb {
                    col.copy_from_slice(&vt[j * nb..(j + 1) * nb]);
                    fft::forward(&mut col);
                    let dst = &mut shell_out[j * (2 * nq + 1)..(j + 1) * (2 * nq + 1)];
                    for n in -(nq as i64)..=(nq as i64) {
                        let bin = (n.rem_euclid(nb as i64)) as usize;
                        dst[(n + nq as i64) as usize] = col[bin] / nb as f64;
                    }
                }
                out_row.push(shell_out);
            }
            out_row
        })
        .collect();

    let bank_shells = shells
        .iter()
        .enumerate()
        .map(|(qi, s)| {
            let w = 2 * s.p + 1;
            let mut coeffs = vec![Complex64::default(); na * nb * w];
            let mut ring_power = vec![0.0; na * nb];
            for i in 0..na {
                let src = &rows[i][qi];
                coeffs[i * nb * w..(i + 1) * nb * w].copy_from_slice(src);
                for j in 0..nb {
                    ring_power[i * nb + j] = src[j * w..(j + 1) * w]
                        .iter()
                        .map(|c| c.norm_sqr())
                        .sum();
                }
            }
            TemplateShell {
                k: s.k,
                nq: s.p,
                nbeta: nb,
                coeffs,
                ring_power,
            }
        })
        .collect();

    Ok(TemplateBank {
        angles: AngleGrid::from_sphere(sphere),
        shells: bank_shells,
        nalpha: na,
        nbeta: nb,
    })
}

/// Direct evaluation of a ring value from its coefficients (test oracle).
pub fn ring_value(ring: &[Complex64], nq: usize, psi: f64) -> Complex64 {
    let mut acc = Complex64::default();
    for (idx, &c) in ring.iter().enumerate() {
        let n = idx as i64 - nq as i64;
        let ang = n as f64 * psi;
        acc += c * Complex64::new(ang.cos(), ang.sin());
    }
    acc
}
