//! Image formation and its inverse: central slices to pixel images (with
//! CTF and calibrated noise) and pixel images to the polar Fourier rings
//! used by matching and reconstruction.

use crate::error::{Error, Result};
use crate::fft;
use crate::grid::{Grids, RadialGrid};
use crate::harmonics::{self, LegendreTable};
use crate::io::{PixelImage, Stack};
use crate::model::VolumeModel;
use crate::optics::{Ctf, CtfParams};
use crate::orient::Orientation;
use crate::rng::{sample_defocus, sample_orientation, stream, StreamKind};
use crate::spline::UniformSpline;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Radial upsampling factor for pixel synthesis; the ring values are smooth
/// in k but the plain shell-spacing trapezoid leaves an O(dk^2) offset.
const SYNTH_UPSAMPLE: usize = 4;

/// Polar Fourier data of one image: ring values on the (k_q, psi_l) grid and
/// their angular Fourier coefficients truncated to |n| <= N_q = p(k_q).
#[derive(Debug, Clone)]
pub struct PolarImage {
    pub ks: Vec<f64>,
    pub nphi: usize,
    /// Ring values, index q * nphi + l.
    pub rings: Vec<Complex64>,
    /// Per shell, 2 N_q + 1 coefficients (n = -N_q..N_q).
    pub ring_coeffs: Vec<Vec<Complex64>>,
    /// Per shell, sum_n |M_n|^2.
    pub power: Vec<f64>,
}

impl PolarImage {
    /// Squared data norm over shells q < nshells under the ring quadrature
    /// sum_q k_q dk sum_n |M_n|^2 (the shared 2 pi factor is dropped
    /// consistently with template norms).
    pub fn norm_sq_through(&self, radial: &RadialGrid, nshells: usize) -> f64 {
        (0..nshells.min(self.power.len()))
            .map(|q| self.power[q] * self.ks[q] * radial.dk)
            .sum()
    }

    /// Ring values of shell q rotated in-plane by gamma and sampled at the
    /// grid angles: d_l = sum_n M_n e^{-i n gamma} e^{i n psi_l}.
    pub fn rotated_ring_values(&self, q: usize, gamma: f64, phis: &[f64]) -> Vec<Complex64> {
        let coeffs = &self.ring_coeffs[q];
        let nq = (coeffs.len() - 1) / 2;
        phis.iter()
            .map(|&psi| {
                let mut acc = Complex64::default();
                for (idx, &c) in coeffs.iter().enumerate() {
                    let n = idx as i64 - nq as i64;
                    let ang = n as f64 * (psi - gamma);
                    acc += c * Complex64::new(ang.cos(), ang.sin());
                }
                acc
            })
            .collect()
    }

    /// Build polar data directly from per-shell ring coefficients.
    pub fn from_ring_coeffs(ks: Vec<f64>, nphi: usize, ring_coeffs: Vec<Vec<Complex64>>) -> Self {
        let mut rings = Vec::with_capacity(ks.len() * nphi);
        for coeffs in &ring_coeffs {
            let nq = (coeffs.len() - 1) / 2;
            for l in 0..nphi {
                let psi = 2.0 * PI * l as f64 / nphi as f64;
                let mut acc = Complex64::default();
                for (idx, &c) in coeffs.iter().enumerate() {
                    let n = idx as i64 - nq as i64;
                    let ang = n as f64 * psi;
                    acc += c * Complex64::new(ang.cos(), ang.sin());
                }
                rings.push(acc);
            }
        }
        let power = ring_coeffs
            .iter()
            .map(|c| c.iter().map(|v| v.norm_sqr()).sum())
            .collect();
        PolarImage { ks, nphi, rings, ring_coeffs, power }
    }
}

/// Smallest pixel count that resolves the band limit.
pub fn min_npix(kmax: f64) -> usize {
    ((2.0 * kmax / PI).ceil() as usize).max(2)
}

/// CTF-filtered central-slice ring values of the model at a continuous
/// orientation: M(k_q, psi_l) = C(k_q) S_{alpha,beta}(k_q, psi_l + gamma).
pub fn slice_rings(
    model: &VolumeModel,
    grids: &Grids,
    ori: &Orientation,
    ctf: &Ctf,
) -> Result<Vec<Complex64>> {
    model.check_compatible(grids)?;
    let np = grids.sphere.nphi;
    let (sa, ca) = ori.alpha.sin_cos();
    let psis: Vec<f64> = grids.sphere.phis.iter().map(|&p| p + ori.gamma).collect();
    let mus: Vec<f64> = psis.iter().map(|&p| -sa * p.cos()).collect();
    let phis: Vec<f64> = psis
        .iter()
        .map(|&p| ori.beta + p.sin().atan2(ca * p.cos()))
        .collect();
    let pmax = harmonics::degree_for_shell(grids.radial.kmax);
    let table = LegendreTable::new(pmax, &mus);
    let mut out = Vec::with_capacity(model.nr() * np);
    for shell in &model.shells {
        let c = ctf.eval(shell.k);
        for l in 0..np {
            out.push(c * harmonics::eval_with_table(shell, &table, l, phis[l]));
        }
    }
    Ok(out)
}

/// Gregory end-corrected trapezoid weights on n uniform panels of width h
/// covering (0, n h]; the implicit k=0 node is dropped (integrand has a k
/// factor).
fn gregory_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    if n >= 4 {
        w[0] *= 13.0 / 12.0;
        w[n - 2] *= 13.0 / 12.0;
        w[n - 1] *= 5.0 / 12.0;
    } else if n >= 1 {
        w[n - 1] *= 0.5;
    }
    w
}

/// Inverse 2D transform of ring values to an npix x npix pixel grid over
/// [-1,1]^2 (row-major, x fastest): upsample rings radially by cubic spline,
/// then evaluate the polar quadrature sum with separable phase factors.
pub fn synthesize_pixels(
    rings: &[Complex64],
    grids: &Grids,
    npix: usize,
) -> Result<Vec<f64>> {
    let nr = grids.radial.nr();
    let np = grids.sphere.nphi;
    if rings.len() != nr * np {
        return Err(Error::param("ring array does not match grid"));
    }
    if nr < 2 {
        return Err(Error::param("pixel synthesis needs at least two shells"));
    }
    if npix < min_npix(grids.radial.kmax) {
        return Err(Error::param(format!(
            "npix={npix} under-resolves kmax={} (need >= {})",
            grids.radial.kmax,
            min_npix(grids.radial.kmax)
        )));
    }
    let dk = grids.radial.dk;
    let h = dk / SYNTH_UPSAMPLE as f64;
    let nf = nr * SYNTH_UPSAMPLE;
    let wq = gregory_weights(nf, h);
    let xs: Vec<f64> = (0..npix)
        .map(|a| -1.0 + (a as f64 + 0.5) * 2.0 / npix as f64)
        .collect();

    // fine-grid ring values: spline along k at each psi
    let mut fine = vec![Complex64::default(); nf * np];
    let mut col = vec![Complex64::default(); nr];
    for l in 0..np {
        for q in 0..nr {
            col[q] = rings[q * np + l];
        }
        let sp = UniformSpline::new(grids.radial.k_values[0], dk, &col);
        for t in 0..nf {
            fine[t * np + l] = sp.eval((t + 1) as f64 * h);
        }
    }

    let acc = (0..nf)
        .into_par_iter()
        .fold(
            || vec![Complex64::default(); npix * npix],
            |mut img, t| {
                let k = (t + 1) as f64 * h;
                let scale = wq[t] * k * (2.0 * PI / np as f64) / (2.0 * PI).powi(2);
                let mut ux = vec![Complex64::default(); npix];
                let mut uy = vec![Complex64::default(); npix];
                for l in 0..np {
                    let f = fine[t * np + l] * scale;
                    if f.norm_sqr() == 0.0 {
                        continue;
                    }
                    let (s, c) = grids.sphere.phis[l].sin_cos();
                    fill_phase_neg(&mut ux, &xs, k * c);
                    fill_phase_neg(&mut uy, &xs, k * s);
                    for (b, &uyv) in uy.iter().enumerate() {
                        let fv = f * uyv;
                        let row = &mut img[b * npix..(b + 1) * npix];
                        for (pv, &uxv) in row.iter_mut().zip(&ux) {
                            *pv += fv * uxv;
                        }
                    }
                }
                img
            },
        )
        .reduce(
            || vec![Complex64::default(); npix * npix],
            |mut a, b| {
                for (av, bv) in a.iter_mut().zip(&b) {
                    *av += bv;
                }
                a
            },
        );
    Ok(acc.into_iter().map(|v| v.re).collect())
}

fn fill_phase_neg(u: &mut [Complex64], xs: &[f64], c: f64) {
    let h = if xs.len() > 1 { xs[1] - xs[0] } else { 0.0 };
    let step = Complex64::new((-c * h).cos(), (-c * h).sin());
    let mut cur = Complex64::new((-c * xs[0]).cos(), (-c * xs[0]).sin());
    for v in u.iter_mut() {
        *v = cur;
        cur *= step;
    }
}

/// Simulate one image: slice, CTF, inverse transform, then noise with
/// sigma^2 = sum(signal^2) / (npix^2 snr). `rng` is consumed only for noise.
pub fn simulate_image<R: Rng>(
    model: &VolumeModel,
    grids: &Grids,
    ori: &Orientation,
    ctf: &Ctf,
    snr: f64,
    npix: usize,
    rng: &mut R,
) -> Result<PixelImage> {
    if !(snr > 0.0) {
        return Err(Error::param("snr must be positive (may be infinite)"));
    }
    let rings = slice_rings(model, grids, ori, ctf)?;
    let mut pixels = synthesize_pixels(&rings, grids, npix)?;
    if snr.is_finite() {
        let sig2: f64 = pixels.iter().map(|v| v * v).sum();
        let sigma = (sig2 / (npix * npix) as f64 / snr).sqrt();
        for p in pixels.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *p += sigma * g;
        }
    }
    let z = match ctf {
        Ctf::Identity => 0.0,
        Ctf::Radial(p) => p.z,
    };
    Ok(PixelImage { pixels, z, orientation: Some(*ori) })
}

/// Simulate a full stack with per-image random orientation and defocus.
/// Per-image streams keyed by (seed, image index) make generation order
/// independent. `with_ctf=false` keeps C === 1 (z stored as 0).
pub fn simulate_stack(
    model: &VolumeModel,
    grids: &Grids,
    d: f64,
    m: usize,
    snr: f64,
    npix: usize,
    seed: u64,
    with_ctf: bool,
) -> Result<Stack> {
    if m == 0 {
        return Err(Error::param("stack must contain at least one image"));
    }
    let images: Result<Vec<PixelImage>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, StreamKind::SimulateImage, 0, i as u64);
            let ori = sample_orientation(&mut rng);
            let z = sample_defocus(&mut rng);
            let ctf = if with_ctf {
                Ctf::Radial(CtfParams::with_defaults(z, d))
            } else {
                Ctf::Identity
            };
            simulate_image(model, grids, &ori, &ctf, snr, npix, &mut rng)
        })
        .collect();
    Ok(Stack { npix, d, images: images? })
}

/// Forward 2D transform of a pixel image onto the polar grid, with pixel
/// area weights, then per-ring FFT to angular Fourier coefficients.
pub fn image_to_polar(image: &PixelImage, npix: usize, grids: &Grids) -> Result<PolarImage> {
    if image.pixels.len() != npix * npix {
        return Err(Error::param("pixel count does not match npix"));
    }
    let nr = grids.radial.nr();
    let np = grids.sphere.nphi;
    let h2 = (2.0 / npix as f64).powi(2);
    let xs: Vec<f64> = (0..npix)
        .map(|a| -1.0 + (a as f64 + 0.5) * 2.0 / npix as f64)
        .collect();
    let rings: Vec<Complex64> = (0..nr)
        .into_par_iter()
        .flat_map_iter(|q| {
            let k = grids.radial.k_values[q];
            let mut ux = vec![Complex64::default(); npix];
            let mut uy = vec![Complex64::default(); npix];
            let mut out = Vec::with_capacity(np);
            for l in 0..np {
                let (s, c) = grids.sphere.phis[l].sin_cos();
                fill_phase_pos(&mut ux, &xs, k * c);
                fill_phase_pos(&mut uy, &xs, k * s);
                let mut acc = Complex64::default();
                for (b, &uyv) in uy.iter().enumerate() {
                    let row = &image.pixels[b * npix..(b + 1) * npix];
                    let mut inner = Complex64::default();
                    for (&pv, &uxv) in row.iter().zip(&ux) {
                        inner += pv * uxv;
                    }
                    acc += uyv * inner;
                }
                out.push(acc * h2);
            }
            out
        })
        .collect();

    Ok(rings_to_polar(rings, grids))
}

/// Wrap raw ring values in a PolarImage: per-ring forward FFT, coefficients
/// truncated to |n| <= N_q.
pub fn rings_to_polar(rings: Vec<Complex64>, grids: &Grids) -> PolarImage {
    let nr = grids.radial.nr();
    let np = grids.sphere.nphi;
    assert_eq!(rings.len(), nr * np);
    let mut ring_coeffs = Vec::with_capacity(nr);
    let mut power = Vec::with_capacity(nr);
    let mut buf = vec![Complex64::default(); np];
    for q in 0..nr {
        buf.copy_from_slice(&rings[q * np..(q + 1) * np]);
        fft::forward(&mut buf);
        let nq = harmonics::degree_for_shell(grids.radial.k_values[q]);
        let mut coeffs = Vec::with_capacity(2 * nq + 1);
        for n in -(nq as i64)..=(nq as i64) {
            let bin = n.rem_euclid(np as i64) as usize;
            coeffs.push(buf[bin] / np as f64);
        }
        power.push(coeffs.iter().map(|c| c.norm_sqr()).sum());
        ring_coeffs.push(coeffs);
    }
    PolarImage {
        ks: grids.radial.k_values.clone(),
        nphi: np,
        rings,
        ring_coeffs,
        power,
    }
}

/// Convert every stack image to polar Fourier data and build its CTF from
/// the stored defocus (z = 0 means no CTF was applied).
pub fn stack_to_polars(stack: &Stack, grids: &Grids) -> Result<(Vec<PolarImage>, Vec<Ctf>)> {
    let polars: Result<Vec<PolarImage>> = stack
        .images
        .par_iter()
        .map(|img| image_to_polar(img, stack.npix, grids))
        .collect();
    let ctfs = stack
        .images
        .iter()
        .map(|img| {
            if img.z == 0.0 {
                Ctf::Identity
            } else {
                Ctf::Radial(CtfParams::with_defaults(img.z, stack.d))
            }
        })
        .collect();
    Ok((polars?, ctfs))
}

fn fill_phase_pos(u: &mut [Complex64], xs: &[f64], c: f64) {
    let h = if xs.len() > 1 { xs[1] - xs[0] } else { 0.0 };
    let step = Complex64::new((c * h).cos(), (c * h).sin());
    let mut cur = Complex64::new((c * xs[0]).cos(), (c * xs[0]).sin());
    for v in u.iter_mut() {
        *v = cur;
        cur *= step;
    }
}
