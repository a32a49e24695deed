//! Per-shell linear least squares: fit shell coefficients to the great-circle
//! ring data of all images at their assigned orientations.
//!
//! The forward map S f = (values of the degree-p expansion f at the data
//! points) is applied as T S_reg f: evaluate on the regular sphere grid, then
//! tensor-product Lagrange interpolation of order q = 7 per dimension. The
//! theta nodes are equispaced in theta, so a stencil crossing a pole reads
//! the antipodal rows (theta < 0 at (-theta, phi + pi), theta > pi at
//! (2 pi - theta, phi + pi)). The normal equations S^H C^2 S f = S^H C d are
//! solved by conjugate gradient with the exact Euclidean adjoint.

use crate::error::{Error, Result};
use crate::fft;
use crate::grid::{Grids, SphereGrid};
use crate::harmonics::{
    adjoint_eval_on_regular_grid, degree_for_shell, eval_on_regular_grid, ncoef, LegendreTable,
    ShellCoeffs,
};
use crate::image::PolarImage;
use crate::model::VolumeModel;
use crate::optics::Ctf;
use crate::orient::{slice_point, to_spherical, Orientation};
use num_complex::Complex64;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Lagrange stencil width per dimension.
pub const INTERP_ORDER: usize = 7;
const Q: usize = INTERP_ORDER;

/// Precomputed interpolation stencils for a fixed point set on a fixed
/// regular grid. Rows store the pole-wrapped theta row of each tap and the
/// first phi bin (already including the half-turn shift of wrapped rows).
#[derive(Debug, Clone)]
pub struct InterpPlan {
    pub npoints: usize,
    pub ntheta: usize,
    pub nphi: usize,
    rows: Vec<[u32; Q]>,
    starts: Vec<[u32; Q]>,
    wt: Vec<[f64; Q]>,
    wp: Vec<[f64; Q]>,
}

fn lagrange_weights(x: f64, n0: i64) -> [f64; Q] {
    let mut w = [0.0; Q];
    for r in 0..Q {
        let nr = (n0 + r as i64) as f64;
        let mut num = 1.0;
        let mut den = 1.0;
        for s in 0..Q {
            if s == r {
                continue;
            }
            let ns = (n0 + s as i64) as f64;
            num *= x - ns;
            den *= nr - ns;
        }
        w[r] = num / den;
    }
    w
}

impl InterpPlan {
    /// Build stencils for arbitrary (theta, phi) points.
    pub fn build(points: &[(f64, f64)], ntheta: usize, nphi: usize) -> Result<Self> {
        if ntheta < Q || nphi < Q || nphi % 2 != 0 {
            return Err(Error::param(
                "interpolation needs ntheta, nphi >= 7 and even nphi",
            ));
        }
        let ht = PI / ntheta as f64;
        let hp = 2.0 * PI / nphi as f64;
        let half = (nphi / 2) as i64;
        let mut rows = Vec::with_capacity(points.len());
        let mut starts = Vec::with_capacity(points.len());
        let mut wt = Vec::with_capacity(points.len());
        let mut wp = Vec::with_capacity(points.len());
        for &(theta, phi) in points {
            if !(0.0..=PI + 1e-12).contains(&theta) {
                return Err(Error::param("theta outside [0, pi]"));
            }
            // 1-based row coordinate: theta_j sits at t = j
            let t = theta / ht + 0.5;
            let j0 = (t - 3.0).round() as i64;
            let u = phi.rem_euclid(2.0 * PI) / hp;
            let l0 = (u - 3.0).round() as i64;
            wt.push(lagrange_weights(t, j0));
            wp.push(lagrange_weights(u, l0));
            let mut prow = [0u32; Q];
            let mut pstart = [0u32; Q];
            for r in 0..Q {
                let j = j0 + r as i64;
                let (jj, off) = if j < 1 {
                    (1 - j, half)
                } else if j > ntheta as i64 {
                    (2 * ntheta as i64 + 1 - j, half)
                } else {
                    (j, 0)
                };
                debug_assert!((1..=ntheta as i64).contains(&jj));
                prow[r] = (jj - 1) as u32;
                pstart[r] = (l0 + off).rem_euclid(nphi as i64) as u32;
            }
            rows.push(prow);
            starts.push(pstart);
        }
        Ok(InterpPlan {
            npoints: points.len(),
            ntheta,
            nphi,
            rows,
            starts,
            wt,
            wp,
        })
    }

    /// out[i] = sum of stencil weights times grid values (apply T).
    pub fn gather(&self, grid: &[Complex64], out: &mut [Complex64]) {
        debug_assert_eq!(grid.len(), self.ntheta * self.nphi);
        debug_assert_eq!(out.len(), self.npoints);
        let np = self.nphi;
        for i in 0..self.npoints {
            let mut acc = Complex64::default();
            for r in 0..Q {
                let row = &grid[self.rows[i][r] as usize * np..][..np];
                let start = self.starts[i][r] as usize;
                let mut racc = Complex64::default();
                if start + Q <= np {
                    for s in 0..Q {
                        racc += self.wp[i][s] * row[start + s];
                    }
                } else {
                    for s in 0..Q {
                        racc += self.wp[i][s] * row[(start + s) % np];
                    }
                }
                acc += self.wt[i][r] * racc;
            }
            out[i] = acc;
        }
    }

    /// grid += T^T v (apply the transpose scatter).
    pub fn scatter(&self, v: &[Complex64], grid: &mut [Complex64]) {
        debug_assert_eq!(grid.len(), self.ntheta * self.nphi);
        debug_assert_eq!(v.len(), self.npoints);
        let np = self.nphi;
        for i in 0..self.npoints {
            let vi = v[i];
            for r in 0..Q {
                let w = self.wt[i][r] * vi;
                let base = self.rows[i][r] as usize * np;
                let start = self.starts[i][r] as usize;
                if start + Q <= np {
                    for s in 0..Q {
                        grid[base + start + s] += self.wp[i][s] * w;
                    }
                } else {
                    for s in 0..Q {
                        grid[base + (start + s) % np] += self.wp[i][s] * w;
                    }
                }
            }
        }
    }
}

/// The data-point directions of a set of oriented images (k-independent) and
/// their shared interpolation plan.
#[derive(Debug, Clone)]
pub struct SlicePoints {
    /// (theta, phi) of point (m, l) at index m * nphi + l.
    pub points: Vec<(f64, f64)>,
    pub plan: InterpPlan,
}

/// Directions of all ring samples of all images: point (m, l) is the unit
/// direction of slice_point(alpha_m, beta_m, psi_l).
pub fn build_points(orientations: &[Orientation], grids: &Grids) -> Result<SlicePoints> {
    let sphere = &grids.sphere;
    let mut points = Vec::with_capacity(orientations.len() * sphere.nphi);
    for ori in orientations {
        for &psi in &sphere.phis {
            let v = slice_point(ori.alpha, ori.beta, psi, 1.0);
            points.push(to_spherical(&v));
        }
    }
    let plan = InterpPlan::build(&points, sphere.ntheta, sphere.nphi)?;
    Ok(SlicePoints { points, plan })
}

/// One shell's least-squares system.
#[derive(Debug)]
pub struct ShellSystem<'a> {
    pub k: f64,
    pub p: usize,
    pub pts: &'a SlicePoints,
    /// d_{m nphi + l} = ring of image m rotated by gamma_m, sampled at psi_l.
    pub rhs: Vec<Complex64>,
    /// C_m(k), constant across the nphi points of one image.
    pub ctf_diag: Vec<f64>,
}

/// Assemble shell q: rotate each image's ring coefficients by its gamma via
/// the exact Fourier phase shift, resample at the psi grid, attach the CTF.
pub fn assemble_shell<'a>(
    polars: &[PolarImage],
    orientations: &[Orientation],
    ctfs: &[Ctf],
    grids: &Grids,
    q: usize,
    pts: &'a SlicePoints,
) -> Result<ShellSystem<'a>> {
    let m = polars.len();
    if orientations.len() != m || ctfs.len() != m {
        return Err(Error::param("image/orientation/ctf count mismatch"));
    }
    let np = grids.sphere.nphi;
    if pts.points.len() != m * np {
        return Err(Error::param("point set does not match image count"));
    }
    let k = *grids
        .radial
        .k_values
        .get(q)
        .ok_or_else(|| Error::param("shell index out of range"))?;
    let mut rhs = Vec::with_capacity(m * np);
    let mut ctf_diag = Vec::with_capacity(m * np);
    let mut buf = vec![Complex64::default(); np];
    for (img, (ori, ctf)) in polars.iter().zip(orientations.iter().zip(ctfs)) {
        let coeffs = img
            .ring_coeffs
            .get(q)
            .ok_or_else(|| Error::param("image lacks ring data for shell"))?;
        let nq = (coeffs.len() - 1) / 2;
        buf.iter_mut().for_each(|v| *v = Complex64::default());
        for (t, &cv) in coeffs.iter().enumerate() {
            let n = t as i64 - nq as i64;
            let ang = -(n as f64) * ori.gamma;
            buf[n.rem_euclid(np as i64) as usize] += cv * Complex64::new(ang.cos(), ang.sin());
        }
        fft::inverse(&mut buf);
        rhs.extend_from_slice(&buf);
        let c = ctf.eval(k);
        ctf_diag.extend(std::iter::repeat(c).take(np));
    }
    Ok(ShellSystem {
        k,
        p: degree_for_shell(k),
        pts,
        rhs,
        ctf_diag,
    })
}

/// S c: evaluate the expansion on the regular grid, then interpolate to the
/// data points. The CTF is not applied here.
pub fn apply_forward(
    sys: &ShellSystem,
    c: &ShellCoeffs,
    sphere: &SphereGrid,
    table: &LegendreTable,
) -> Result<Vec<Complex64>> {
    let grid = eval_on_regular_grid(c, sphere, table)?;
    let mut out = vec![Complex64::default(); sys.pts.plan.npoints];
    sys.pts.plan.gather(&grid, &mut out);
    Ok(out)
}

/// S^H v: transpose-scatter to the regular grid, then the plain-Euclidean
/// adjoint of the grid evaluation.
pub fn apply_adjoint(
    sys: &ShellSystem,
    v: &[Complex64],
    sphere: &SphereGrid,
    table: &LegendreTable,
) -> Result<ShellCoeffs> {
    let mut grid = vec![Complex64::default(); sphere.ntheta * sphere.nphi];
    sys.pts.plan.scatter(v, &mut grid);
    let coeffs = adjoint_eval_on_regular_grid(&grid, sphere, sys.p, table)?;
    Ok(ShellCoeffs { k: sys.k, p: sys.p, coeffs })
}

#[derive(Debug, Clone, Copy)]
pub struct SolveConfig {
    /// Stop when the normal-equations residual drops below tol * ||b||.
    pub tol: f64,
    pub max_iter: usize,
    /// Optional Tikhonov ridge, relative to the operator scale at b;
    /// zero (the default) disables it.
    pub ridge: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { tol: 1e-6, max_iter: 100, ridge: 0.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ShellStats {
    pub k: f64,
    pub iterations: usize,
    /// Final relative normal-equations residual.
    pub residual: f64,
}

fn dot(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.conj() * y).re).sum()
}

/// Conjugate gradient on S^H C^2 S f = S^H C d. Non-convergence is reported
/// through the returned iteration count reaching max_iter, not an error.
pub fn solve_shell(
    sys: &ShellSystem,
    sphere: &SphereGrid,
    cfg: &SolveConfig,
) -> Result<(ShellCoeffs, ShellStats)> {
    let table = LegendreTable::new(sys.p, &sphere.mus);
    let nc = ncoef(sys.p);
    let apply = |x: &ShellCoeffs| -> Result<ShellCoeffs> {
        let mut v = apply_forward(sys, x, sphere, &table)?;
        for (vv, &c) in v.iter_mut().zip(&sys.ctf_diag) {
            *vv *= c * c;
        }
        apply_adjoint(sys, &v, sphere, &table)
    };

    let weighted: Vec<Complex64> = sys
        .rhs
        .iter()
        .zip(&sys.ctf_diag)
        .map(|(d, &c)| d * c)
        .collect();
    let b = apply_adjoint(sys, &weighted, sphere, &table)?;
    let bnorm = dot(&b.coeffs, &b.coeffs).sqrt();
    let mut x = ShellCoeffs::zero(sys.k, sys.p);
    if bnorm == 0.0 {
        let stats = ShellStats { k: sys.k, iterations: 0, residual: 0.0 };
        return Ok((x, stats));
    }
    let lambda = if cfg.ridge > 0.0 {
        let ab = apply(&b)?;
        cfg.ridge * dot(&b.coeffs, &ab.coeffs).max(0.0) / (bnorm * bnorm)
    } else {
        0.0
    };

    let mut r = b.coeffs.clone();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut iterations = 0;
    while iterations < cfg.max_iter && rs.sqrt() > cfg.tol * bnorm {
        iterations += 1;
        let pd = ShellCoeffs { k: sys.k, p: sys.p, coeffs: p.clone() };
        let mut ap = apply(&pd)?;
        if lambda > 0.0 {
            for (av, pv) in ap.coeffs.iter_mut().zip(&p) {
                *av += lambda * pv;
            }
        }
        let denom = dot(&p, &ap.coeffs);
        if denom <= 0.0 {
            break;
        }
        let alpha = rs / denom;
        for i in 0..nc {
            x.coeffs[i] += alpha * p[i];
            r[i] -= alpha * ap.coeffs[i];
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..nc {
            p[i] = r[i] + beta * p[i];
        }
    }
    let stats = ShellStats {
        k: sys.k,
        iterations,
        residual: rs.sqrt() / bnorm,
    };
    Ok((x, stats))
}

/// Independent least-squares solve of every shell with k_q <= k_upper.
/// Returns a full-length model (shells above the band stay zero) and the
/// per-shell CG statistics. Shells are the parallel unit, each one's CG is
/// sequential, so results are bitwise independent of the thread count.
pub fn solve_all_shells(
    polars: &[PolarImage],
    orientations: &[Orientation],
    ctfs: &[Ctf],
    grids: &Grids,
    k_upper: f64,
    cfg: &SolveConfig,
) -> Result<(VolumeModel, Vec<ShellStats>)> {
    let pts = build_points(orientations, grids)?;
    let nsolve = grids
        .radial
        .k_values
        .iter()
        .take_while(|&&k| k <= k_upper + 1e-9)
        .count();
    if nsolve == 0 {
        return Err(Error::param("k_upper below the first shell"));
    }
    let solved: Result<Vec<(ShellCoeffs, ShellStats)>> = (0..nsolve)
        .into_par_iter()
        .map(|q| {
            let sys = assemble_shell(polars, orientations, ctfs, grids, q, &pts)?;
            solve_shell(&sys, &grids.sphere, cfg)
        })
        .collect();
    let mut model = VolumeModel::zero(grids);
    let mut stats = Vec::with_capacity(nsolve);
    for (q, (c, s)) in solved?.into_iter().enumerate() {
        model.shells[q] = c;
        stats.push(s);
    }
    Ok((model, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grids;
    use crate::harmonics::{coef_index, eval_at_point, eval_at_points};
    use crate::image::{rings_to_polar, slice_rings};
    use crate::optics::CtfParams;
    use crate::rng::{sample_orientation, stream, StreamKind};

    fn rand_orientations(n: usize, seed: u64) -> Vec<Orientation> {
        let mut rng = stream(seed, StreamKind::MarchInit, 0, 0);
        (0..n).map(|_| sample_orientation(&mut rng)).collect()
    }

    fn rand_coeffs(k: f64, p: usize, seed: u64) -> ShellCoeffs {
        let mut s = seed.wrapping_add(0x9e3779b97f4a7c15);
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        ShellCoeffs {
            k,
            p,
            coeffs: (0..ncoef(p)).map(|_| Complex64::new(next(), next())).collect(),
        }
    }

    fn zero_system<'a>(k: f64, p: usize, pts: &'a SlicePoints) -> ShellSystem<'a> {
        ShellSystem {
            k,
            p,
            pts,
            rhs: vec![Complex64::default(); pts.points.len()],
            ctf_diag: vec![1.0; pts.points.len()],
        }
    }

    #[test]
    fn identity_slice_lies_on_equator() {
        let g = build_grids(6.0, 2.0, 1.2).unwrap();
        let pts = build_points(&[Orientation::identity()], &g).unwrap();
        assert_eq!(pts.points.len(), g.sphere.nphi);
        for (l, &(th, ph)) in pts.points.iter().enumerate() {
            assert!((th - PI / 2.0).abs() < 1e-12);
            let want = g.sphere.phis[l];
            let d = (ph - want).abs();
            assert!(d < 1e-12 || (d - 2.0 * PI).abs() < 1e-12);
        }
    }

    #[test]
    fn point_count_matches() {
        let g = build_grids(6.0, 2.0, 1.2).unwrap();
        let oris = rand_orientations(7, 1);
        let pts = build_points(&oris, &g).unwrap();
        assert_eq!(pts.points.len(), 7 * g.sphere.nphi);
    }

    #[test]
    fn constants_reproduced_exactly() {
        let g = build_grids(10.0, 2.0, 1.2).unwrap();
        let oris = rand_orientations(5, 2);
        let pts = build_points(&oris, &g).unwrap();
        let k = g.radial.k_values[1];
        let p = degree_for_shell(k);
        let sys = zero_system(k, p, &pts);
        let mut c = ShellCoeffs::zero(k, p);
        c.coeffs[coef_index(0, 0)] = Complex64::new(1.0, 0.0);
        let table = LegendreTable::new(p, &g.sphere.mus);
        let v = apply_forward(&sys, &c, &g.sphere, &table).unwrap();
        let want = 0.5 / PI.sqrt();
        for x in &v {
            assert!((x - Complex64::new(want, 0.0)).norm() <= 1e-12);
        }
    }

    #[test]
    fn grid_node_targets_are_exact() {
        // the identity orientation's points sit exactly on grid nodes when
        // ntheta is odd (equator row exists), so interpolation must return
        // the grid values bit-for-bit up to rounding
        let g = build_grids(10.0, 2.0, 1.2).unwrap();
        assert_eq!(g.sphere.ntheta % 2, 1);
        let pts = build_points(&[Orientation::identity()], &g).unwrap();
        let k = g.radial.k_values[2];
        let p = degree_for_shell(k);
        let c = rand_coeffs(k, p, 3);
        let table = LegendreTable::new(p, &g.sphere.mus);
        let grid = eval_on_regular_grid(&c, &g.sphere, &table).unwrap();
        let sys = zero_system(k, p, &pts);
        let v = apply_forward(&sys, &c, &g.sphere, &table).unwrap();
        let eq_row = g.sphere.ntheta / 2;
        let scale: f64 = grid.iter().map(|x| x.norm()).fold(0.0, f64::max);
        for (l, got) in v.iter().enumerate() {
            let want = grid[eq_row * g.sphere.nphi + l];
            assert!((got - want).norm() <= 1e-12 * scale, "l={l}");
        }
    }

    #[test]
    fn forward_matches_direct_evaluation() {
        // interpolation error scales like (p pi / ntheta)^q: tight for
        // shells the grid oversamples, only percent-level for the shell
        // whose degree saturates the grid (that error is part of the
        // operator the least squares defines, as the end-to-end tests show)
        let g = build_grids(30.0, 2.0, 1.2).unwrap();
        let oris = rand_orientations(10, 4);
        let pts = build_points(&oris, &g).unwrap();
        let k = g.radial.k_values[0];
        let p = degree_for_shell(k);
        let c = rand_coeffs(k, p, 5);
        let table = LegendreTable::new(p, &g.sphere.mus);
        let sys = zero_system(k, p, &pts);
        let got = apply_forward(&sys, &c, &g.sphere, &table).unwrap();
        let want = eval_at_points(&c, &pts.points);
        let num: f64 = got
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let den: f64 = want.iter().map(|b| b.norm_sqr()).sum::<f64>().sqrt();
        assert!(num / den <= 1e-6, "rel {}", num / den);
    }

    #[test]
    fn pole_crossing_stencils_interpolate() {
        // points within half a row spacing of a pole exercise the antipodal
        // wrap; the low shell keeps pure interpolation error below 1e-6 so
        // any wrap mistake stands out
        let g = build_grids(20.0, 2.0, 1.2).unwrap();
        let near_pole = vec![
            (1.0e-3, 0.7),
            (PI - 1.0e-3, 4.0),
            (0.5 * PI / g.sphere.ntheta as f64, 2.0),
            (PI, 0.0),
            (0.0, 1.0),
        ];
        let plan = InterpPlan::build(&near_pole, g.sphere.ntheta, g.sphere.nphi).unwrap();
        let k = g.radial.k_values[0];
        let p = degree_for_shell(k);
        let c = rand_coeffs(k, p, 6);
        let table = LegendreTable::new(p, &g.sphere.mus);
        let grid = eval_on_regular_grid(&c, &g.sphere, &table).unwrap();
        let mut got = vec![Complex64::default(); near_pole.len()];
        plan.gather(&grid, &mut got);
        let scale: f64 = grid.iter().map(|x| x.norm()).fold(0.0, f64::max);
        for (i, &(th, ph)) in near_pole.iter().enumerate() {
            let want = eval_at_point(&c, th, ph);
            assert!(
                (got[i] - want).norm() <= 1e-6 * scale,
                "i={i} err={}",
                (got[i] - want).norm() / scale
            );
        }
    }

    #[test]
    fn adjoint_identity_to_rounding() {
        let g = build_grids(10.0, 2.0, 1.2).unwrap();
        let oris = rand_orientations(8, 7);
        let pts = build_points(&oris, &g).unwrap();
        let k = g.radial.k_values[3];
        let p = degree_for_shell(k);
        let table = LegendreTable::new(p, &g.sphere.mus);
        let sys = zero_system(k, p, &pts);
        for trial in 0..5 {
            let c = rand_coeffs(k, p, 100 + trial);
            let vc = rand_coeffs(k, p, 200 + trial);
            let mut v = Vec::with_capacity(pts.points.len());
            let mut s = 300 + trial;
            for _ in 0..pts.points.len() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                let a = (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                let b = (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                v.push(Complex64::new(a, b));
            }
            let sc = apply_forward(&sys, &c, &g.sphere, &table).unwrap();
            let shv = apply_adjoint(&sys, &v, &g.sphere, &table).unwrap();
            let lhs: Complex64 = sc.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
            let rhs: Complex64 = c.coeffs.iter().zip(&shv.coeffs).map(|(a, b)| a.conj() * b).sum();
            let scn = dot(&sc, &sc).sqrt();
            let vn = dot(&v, &v).sqrt();
            let rel = (lhs - rhs).norm() / (scn * vn);
            assert!(rel <= 1e-12, "trial {trial} rel {rel}");
            let _ = vc;
        }
    }

    #[test]
    fn adjoint_of_point_mass_matches_dense_row() {
        let g = build_grids(4.0, 2.0, 1.2).unwrap();
        let oris = rand_orientations(3, 8);
        let pts = build_points(&oris, &g).unwrap();
        let k = g.radial.k_values[0];
        let p = degree_for_shell(k);
        let nc = ncoef(p);
        let table = LegendreTable::new(p, &g.sphere.mus);
        let sys = zero_system(k, p, &pts);
        // dense S column by column
        let npts = pts.points.len();
        let mut dense = vec![Complex64::default(); npts * nc];
        for col in 0..nc {
            let mut c = ShellCoeffs::zero(k, p);
            c.coeffs[col] = Complex64::new(1.0, 0.0);
            let v = apply_forward(&sys, &c, &g.sphere, &table).unwrap();
            for (row, &val) in v.iter().enumerate() {
                dense[row * nc + col] = val;
            }
        }
        let target = 17usize.min(npts - 1);
        let mut v = vec![Complex64::default(); npts];
        v[target] = Complex64::new(1.0, 0.0);
        let got = apply_adjoint(&sys, &v, &g.sphere, &table).unwrap();
        for col in 0..nc {
            let want = dense[target * nc + col].conj();
            assert!((got.coeffs[col] - want).norm() <= 1e-12);
        }
    }

    #[test]
    fn assembly_gamma_shift_equals_prerotated_rings() {
        let g = build_grids(8.0, 2.0, 1.2).unwrap();
        let spec = crate::phantom::five_gaussian_spec();
        let model = crate::phantom::build_truth_model(&spec, &g).unwrap();
        let np = g.sphere.nphi;
        let shift = 5usize;
        let gamma0 = g.sphere.phis[shift];
        let base = Orientation { alpha: 1.1, beta: 0.4, gamma: 0.0 };
        let rings = slice_rings(&model, &g, &base, &Ctf::Identity).unwrap();
        // pre-rotating by the grid angle gamma0 is an exact cyclic shift:
        // M_rot(psi_l) = M(psi_l - gamma0)
        let nr = g.radial.nr();
        let mut shifted = vec![Complex64::default(); rings.len()];
        for q in 0..nr {
            for l in 0..np {
                shifted[q * np + l] = rings[q * np + (l + np - shift) % np];
            }
        }
        let polar_orig = rings_to_polar(rings, &g);
        let polar_shift = rings_to_polar(shifted, &g);
        let with_gamma = Orientation { alpha: 1.1, beta: 0.4, gamma: gamma0 };
        let pts = build_points(&[with_gamma], &g).unwrap();
        let ctfs = [Ctf::Identity];
        let a = assemble_shell(
            std::slice::from_ref(&polar_orig),
            &[with_gamma],
            &ctfs,
            &g,
            2,
            &pts,
        )
        .unwrap();
        let b = assemble_shell(
            std::slice::from_ref(&polar_shift),
            &[base],
            &ctfs,
            &g,
            2,
            &pts,
        )
        .unwrap();
        let scale: f64 = a.rhs.iter().map(|x| x.norm()).fold(0.0, f64::max);
        for (x, y) in a.rhs.iter().zip(&b.rhs) {
            assert!((x - y).norm() <= 1e-10 * scale);
        }
    }

    #[test]
    fn normal_operator_psd_and_zero_rhs() {
        let g = build_grids(6.0, 2.0, 1.2).unwrap();
        let oris = rand_orientations(6, 9);
        let pts = build_points(&oris, &g).unwrap();
        let k = g.radial.k_values[1];
        let p = degree_for_shell(k);
        let table = LegendreTable::new(p, &g.sphere.mus);
        let mut sys = zero_system(k, p, &pts);
        for (i, c) in sys.ctf_diag.iter_mut().enumerate() {
            *c = 0.3 + 0.01 * (i / g.sphere.nphi) as f64;
        }
        for trial in 0..4 {
            let x = rand_coeffs(k, p, 400 + trial);
            let mut v = apply_forward(&sys, &x, &g.sphere, &table).unwrap();
            for (vv, &c) in v.iter_mut().zip(&sys.ctf_diag) {
                *vv *= c * c;
            }
            let ax = apply_adjoint(&sys, &v, &g.sphere, &table).unwrap();
            let quad: Complex64 = x
                .coeffs
                .iter()
                .zip(&ax.coeffs)
                .map(|(a, b)| a.conj() * b)
                .sum();
            assert!(quad.im.abs() <= 1e-10 * quad.re.abs().max(1e-30));
            assert!(quad.re >= -1e-12);
        }
        let (c0, st) = solve_shell(&sys, &g.sphere, &SolveConfig::default()).unwrap();
        assert_eq!(st.iterations, 0);
        assert!(c0.coeffs.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn consistent_discrete_system_recovered() {
        let g = build_grids(8.0, 2.0, 1.2).unwrap();
        let oris = rand_orientations(25, 10);
        let pts = build_points(&oris, &g).unwrap();
        let k = g.radial.k_values[2];
        let p = degree_for_shell(k);
        let truth = rand_coeffs(k, p, 11);
        let table = LegendreTable::new(p, &g.sphere.mus);
        let mut sys = zero_system(k, p, &pts);
        for (i, c) in sys.ctf_diag.iter_mut().enumerate() {
            *c = 0.5 + 0.002 * (i / g.sphere.nphi) as f64;
        }
        let sv = apply_forward(&sys, &truth, &g.sphere, &table).unwrap();
        sys.rhs = sv
            .iter()
            .zip(&sys.ctf_diag)
            .map(|(v, &c)| v * c)
            .collect();
        let cfg = SolveConfig { tol: 1e-10, max_iter: 200, ridge: 0.0 };
        let (got, st) = solve_shell(&sys, &g.sphere, &cfg).unwrap();
        assert!(st.iterations < 200, "no convergence: {st:?}");
        let num = got
            .coeffs
            .iter()
            .zip(&truth.coeffs)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let den = dot(&truth.coeffs, &truth.coeffs).sqrt();
        assert!(num / den <= 1e-6, "rel {}", num / den);
    }

    #[test]
    fn cg_matches_dense_solve_small() {
        // p = 2, a handful of points: CG against a dense normal-equations
        // solve via Gaussian elimination
        let g = build_grids(4.0, 2.0, 1.2).unwrap();
        let oris = rand_orientations(4, 12);
        let pts = build_points(&oris, &g).unwrap();
        let k = 1.0;
        let p = 2usize;
        let nc = ncoef(p);
        let table = LegendreTable::new(p, &g.sphere.mus);
        let mut sys = zero_system(k, p, &pts);
        let npts = pts.points.len();
        let mut s = 77u64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for v in sys.rhs.iter_mut() {
            *v = Complex64::new(next(), next());
        }
        for (i, c) in sys.ctf_diag.iter_mut().enumerate() {
            *c = 0.4 + 0.05 * ((i / g.sphere.nphi) as f64);
        }
        // dense S (npts x nc), then A = S^H C^2 S, b = S^H C d
        let mut dense = vec![Complex64::default(); npts * nc];
        for col in 0..nc {
            let mut c = ShellCoeffs::zero(k, p);
            c.coeffs[col] = Complex64::new(1.0, 0.0);
            let v = apply_forward(&sys, &c, &g.sphere, &table).unwrap();
            for (row, &val) in v.iter().enumerate() {
                dense[row * nc + col] = val;
            }
        }
        let mut a = vec![Complex64::default(); nc * nc];
        let mut b = vec![Complex64::default(); nc];
        for r in 0..nc {
            for c2 in 0..nc {
                let mut acc = Complex64::default();
                for i in 0..npts {
                    let w = sys.ctf_diag[i] * sys.ctf_diag[i];
                    acc += dense[i * nc + r].conj() * dense[i * nc + c2] * w;
                }
                a[r * nc + c2] = acc;
            }
            let mut acc = Complex64::default();
            for i in 0..npts {
                acc += dense[i * nc + r].conj() * sys.rhs[i] * sys.ctf_diag[i];
            }
            b[r] = acc;
        }
        // gaussian elimination with partial pivoting
        let mut aug = a.clone();
        let mut rhs = b.clone();
        for col in 0..nc {
            let piv = (col..nc)
                .max_by(|&x, &y| {
                    aug[x * nc + col]
                        .norm()
                        .partial_cmp(&aug[y * nc + col].norm())
                        .unwrap()
                })
                .unwrap();
            if piv != col {
                for j in 0..nc {
                    aug.swap(col * nc + j, piv * nc + j);
                }
                rhs.swap(col, piv);
            }
            let d = aug[col * nc + col];
            for row in col + 1..nc {
                let f = aug[row * nc + col] / d;
                for j in col..nc {
                    let v = aug[col * nc + j];
                    aug[row * nc + j] -= f * v;
                }
                let v = rhs[col];
                rhs[row] -= f * v;
            }
        }
        let mut xd = vec![Complex64::default(); nc];
        for row in (0..nc).rev() {
            let mut acc = rhs[row];
            for j in row + 1..nc {
                acc -= aug[row * nc + j] * xd[j];
            }
            xd[row] = acc / aug[row * nc + row];
        }
        let cfg = SolveConfig { tol: 1e-12, max_iter: 500, ridge: 0.0 };
        let (got, _) = solve_shell(&sys, &g.sphere, &cfg).unwrap();
        let den: f64 = dot(&xd, &xd).sqrt();
        let num: f64 = got
            .coeffs
            .iter()
            .zip(&xd)
            .map(|(p2, q2)| (p2 - q2).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(num / den <= 1e-8, "rel {}", num / den);
    }

    #[test]
    fn end_to_end_truth_recovery() {
        let g = build_grids(8.0, 2.0, 1.2).unwrap();
        let spec = crate::phantom::five_gaussian_spec();
        let truth = crate::phantom::build_truth_model(&spec, &g).unwrap();
        let oris = rand_orientations(60, 13);
        let mut polars = Vec::new();
        let mut ctfs = Vec::new();
        for (idx, ori) in oris.iter().enumerate() {
            let ctf = if idx % 2 == 0 {
                Ctf::Identity
            } else {
                Ctf::Radial(CtfParams::with_defaults(1.5e4 + 300.0 * idx as f64, spec.d))
            };
            let rings = slice_rings(&truth, &g, ori, &ctf).unwrap();
            polars.push(rings_to_polar(rings, &g));
            ctfs.push(ctf);
        }
        let (model, stats) =
            solve_all_shells(&polars, &oris, &ctfs, &g, 8.0, &SolveConfig::default()).unwrap();
        for (q, st) in stats.iter().enumerate() {
            assert!(st.iterations < 100, "shell {q} did not converge");
            let num = model.shells[q]
                .coeffs
                .iter()
                .zip(&truth.shells[q].coeffs)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt();
            let den = dot(&truth.shells[q].coeffs, &truth.shells[q].coeffs).sqrt();
            assert!(num / den <= 1e-2, "shell {q} rel {}", num / den);
        }
    }

    #[test]
    fn duplicated_image_changes_nothing_consistent() {
        // with data in the range of C S the least-squares solution is the
        // exact preimage, so duplicating an image's equations cannot move it
        let g = build_grids(6.0, 2.0, 1.2).unwrap();
        let oris = rand_orientations(20, 14);
        let k = g.radial.k_values[1];
        let p = degree_for_shell(k);
        let truth = rand_coeffs(k, p, 15);
        let table = LegendreTable::new(p, &g.sphere.mus);
        let cfg = SolveConfig { tol: 1e-12, max_iter: 400, ridge: 0.0 };
        let solve_with = |oris: &[Orientation]| -> Vec<Complex64> {
            let pts = build_points(oris, &g).unwrap();
            let mut sys = zero_system(k, p, &pts);
            for (i, c) in sys.ctf_diag.iter_mut().enumerate() {
                *c = 0.6 + 0.01 * (i / g.sphere.nphi) as f64;
            }
            let v = apply_forward(&sys, &truth, &g.sphere, &table).unwrap();
            sys.rhs = v.iter().zip(&sys.ctf_diag).map(|(x, &c)| x * c).collect();
            solve_shell(&sys, &g.sphere, &cfg).unwrap().0.coeffs
        };
        let x1 = solve_with(&oris);
        let mut dup = oris.clone();
        dup.push(oris[0]);
        let x2 = solve_with(&dup);
        let den = dot(&truth.coeffs, &truth.coeffs).sqrt();
        let d12 = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let dtruth = x1
            .iter()
            .zip(&truth.coeffs)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(d12 / den <= 1e-8, "rel {}", d12 / den);
        assert!(dtruth / den <= 1e-8, "vs truth {}", dtruth / den);
    }

    #[test]
    fn band_limited_solve_zeroes_upper_shells() {
        let g = build_grids(8.0, 2.0, 1.2).unwrap();
        let spec = crate::phantom::five_gaussian_spec();
        let truth = crate::phantom::build_truth_model(&spec, &g).unwrap();
        let oris = rand_orientations(20, 15);
        let polars: Vec<PolarImage> = oris
            .iter()
            .map(|o| rings_to_polar(slice_rings(&truth, &g, o, &Ctf::Identity).unwrap(), &g))
            .collect();
        let ctfs = vec![Ctf::Identity; oris.len()];
        let (model, stats) =
            solve_all_shells(&polars, &oris, &ctfs, &g, 4.0, &SolveConfig::default()).unwrap();
        assert_eq!(stats.len(), 2);
        assert_eq!(model.shells.len(), g.radial.nr());
        for q in 2..g.radial.nr() {
            assert!(model.shells[q].coeffs.iter().all(|v| v.norm() == 0.0));
        }
    }
}
