//! Reconstruction quality evaluation: remove the global rotation (and
//! possible hand flip) separating a reconstruction from a reference model,
//! compute the relative L2 density error on a uniform cube, and fit the
//! error-squared versus dataset-size trend.

use crate::error::{Error, Result};
use crate::grid::{DensityCube, Grids, RadialGrid};
use crate::harmonics::{analyze_on_regular_grid, coef_index, eval_at_points, LegendreTable, ShellCoeffs};
use crate::image::{rings_to_polar, slice_rings, PolarImage};
use crate::matching::{match_all, MatchConfig};
use crate::model::{synthesize_cube, VolumeModel};
use crate::optics::Ctf;
use crate::orient::{mat_mul, mat_transpose, mat_vec, to_spherical, Orientation};
use crate::rng::{sample_orientation, stream, StreamKind};
use crate::templates::generate_templates;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::time::Instant;

pub type Mat3 = [[f64; 3]; 3];

/// Relative L2 distance ||a - b|| / ||b|| over the shared n^3 grid.
pub fn relative_l2_error(a: &DensityCube, b: &DensityCube) -> Result<f64> {
    if a.n != b.n || (a.d - b.d).abs() > 1e-9 * b.d.abs().max(1.0) {
        return Err(Error::param("cube geometry mismatch"));
    }
    let num: f64 = a
        .values
        .par_iter()
        .zip(b.values.par_iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let den: f64 = b.values.par_iter().map(|y| y * y).sum();
    if den == 0.0 {
        return Err(Error::degenerate("reference cube has zero norm"));
    }
    Ok((num / den).sqrt())
}

/// <a,b> / (||a|| ||b||) over the shared n^3 grid.
pub fn normalized_cross_correlation(a: &DensityCube, b: &DensityCube) -> Result<f64> {
    if a.n != b.n || (a.d - b.d).abs() > 1e-9 * b.d.abs().max(1.0) {
        return Err(Error::param("cube geometry mismatch"));
    }
    let dot: f64 = a
        .values
        .par_iter()
        .zip(b.values.par_iter())
        .map(|(x, y)| x * y)
        .sum();
    let na: f64 = a.values.par_iter().map(|x| x * x).sum();
    let nb: f64 = b.values.par_iter().map(|y| y * y).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::degenerate("zero-norm cube in correlation"));
    }
    Ok(dot / (na * nb).sqrt())
}

/// Least-squares fit of eps^2 ~ a0 + a1/M on the per-M medians of the given
/// (M, eps) samples. Needs at least two distinct M values.
pub fn fit_error_vs_m(points: &[(usize, f64)]) -> Result<(f64, f64)> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(m, e) in points {
        if m == 0 {
            return Err(Error::param("dataset size must be positive"));
        }
        if !e.is_finite() || e < 0.0 {
            return Err(Error::param("error values must be finite and nonnegative"));
        }
        groups.entry(m).or_default().push(e);
    }
    if groups.len() < 2 {
        return Err(Error::param("need at least two distinct dataset sizes"));
    }
    let pts: Vec<(f64, f64)> = groups
        .into_iter()
        .map(|(m, mut v)| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = v.len();
            let med = if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            };
            (1.0 / m as f64, med * med)
        })
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let det = n * sxx - sx * sx;
    let a1 = (n * sxy - sx * sy) / det;
    let a0 = (sy - a1 * sx) / n;
    Ok((a0, a1))
}

fn mat_identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn mat_det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Eigen-decomposition of a symmetric 3x3 by cyclic Jacobi rotations.
/// Returns eigenvalues (descending) and the matching eigenvector columns.
fn jacobi_sym3(a0: &Mat3) -> ([f64; 3], Mat3) {
    let mut a = *a0;
    let mut v = mat_identity();
    for _ in 0..60 {
        let (mut p, mut q) = (0usize, 1usize);
        let mut mx = a[0][1].abs();
        if a[0][2].abs() > mx {
            p = 0;
            q = 2;
            mx = a[0][2].abs();
        }
        if a[1][2].abs() > mx {
            p = 1;
            q = 2;
            mx = a[1][2].abs();
        }
        let scale = a[0][0].abs() + a[1][1].abs() + a[2][2].abs();
        if mx <= 1e-15 * scale.max(1e-300) {
            break;
        }
        let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        let mut g = mat_identity();
        g[p][p] = c;
        g[q][q] = c;
        g[p][q] = s;
        g[q][p] = -s;
        a = mat_mul(&mat_transpose(&g), &mat_mul(&a, &g));
        v = mat_mul(&v, &g);
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let vals = [a[order[0]][order[0]], a[order[1]][order[1]], a[order[2]][order[2]]];
    let mut vecs = mat_identity();
    for (col, &src) in order.iter().enumerate() {
        for r in 0..3 {
            vecs[r][col] = v[r][src];
        }
    }
    (vals, vecs)
}

/// Closest rotation (Frobenius chordal metric) to an arbitrary 3x3; the
/// projection of a rotation average back onto the rotation group. Errors
/// when the input does not determine at least two independent directions.
pub fn project_rotation(m: &Mat3) -> Result<Mat3> {
    let a = mat_mul(&mat_transpose(m), m);
    let (vals, mut v) = jacobi_sym3(&a);
    if mat_det(&v) < 0.0 {
        for r in 0..3 {
            v[r][2] = -v[r][2];
        }
    }
    let s0 = vals[0].max(0.0).sqrt();
    let s1 = vals[1].max(0.0).sqrt();
    if s1 <= 1e-9 * s0.max(1e-300) || s0 == 0.0 {
        return Err(Error::degenerate(
            "rotation average is rank-deficient; no consistent rotation",
        ));
    }
    let v0 = [v[0][0], v[1][0], v[2][0]];
    let v1 = [v[0][1], v[1][1], v[2][1]];
    let v2 = [v[0][2], v[1][2], v[2][2]];
    let mut u0 = mat_vec(m, &v0);
    let mut u1 = mat_vec(m, &v1);
    for x in u0.iter_mut() {
        *x /= s0;
    }
    for x in u1.iter_mut() {
        *x /= s1;
    }
    let d01: f64 = u0.iter().zip(&u1).map(|(x, y)| x * y).sum();
    for i in 0..3 {
        u1[i] -= d01 * u0[i];
    }
    let n1: f64 = u1.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in u1.iter_mut() {
        *x /= n1;
    }
    // completing with the cross product forces the proper hand, so the
    // projection is plain U V^T with no extra sign factor
    let u2 = cross(&u0, &u1);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = u0[i] * v0[j] + u1[i] * v1[j] + u2[i] * v2[j];
        }
    }
    Ok(r)
}

/// Rotation by angle |v| about axis v (Rodrigues form).
pub fn rodrigues(v: &[f64; 3]) -> Mat3 {
    let th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let th = th2.sqrt();
    let (a, b) = if th < 1e-8 {
        (1.0 - th2 / 6.0, 0.5 - th2 / 24.0)
    } else {
        (th.sin() / th, (1.0 - th.cos()) / th2)
    };
    let k = [
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ];
    let k2 = mat_mul(&k, &k);
    let mut r = mat_identity();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

fn wrap_2pi(x: f64) -> f64 {
    x.rem_euclid(2.0 * PI)
}

/// Euler angles (Rz(beta) Ry(alpha) Rz(gamma) convention) of a rotation.
pub fn euler_from_matrix(r: &Mat3) -> Orientation {
    let sa = (r[0][2] * r[0][2] + r[1][2] * r[1][2]).sqrt();
    let alpha = sa.atan2(r[2][2]);
    if sa < 1e-12 {
        let beta = if r[2][2] > 0.0 {
            r[1][0].atan2(r[0][0])
        } else {
            (-r[1][0]).atan2(-r[0][0])
        };
        Orientation { alpha, beta: wrap_2pi(beta), gamma: 0.0 }
    } else {
        Orientation {
            alpha,
            beta: wrap_2pi(r[1][2].atan2(r[0][2])),
            gamma: wrap_2pi(r[2][1].atan2(-r[2][0])),
        }
    }
}

/// Resample a model on rotated directions: out(k w) = in(k rot w) for unit
/// directions w. Rotation preserves per-shell degree, so the regular-grid
/// re-analysis is exact to rounding.
pub fn resample_rotated(model: &VolumeModel, grids: &Grids, rot: &Mat3) -> Result<VolumeModel> {
    model.check_compatible(grids)?;
    let sph = &grids.sphere;
    let mut points = Vec::with_capacity(sph.ntheta * sph.nphi);
    for j in 0..sph.ntheta {
        let st = sph.thetas[j].sin();
        let ct = sph.mus[j];
        for &phi in &sph.phis {
            let (sp, cp) = phi.sin_cos();
            let w = [st * cp, st * sp, ct];
            points.push(to_spherical(&mat_vec(rot, &w)));
        }
    }
    let pmax = model.shells.iter().map(|s| s.p).max().unwrap_or(0);
    let table = LegendreTable::new(pmax, &sph.mus);
    let shells: Result<Vec<ShellCoeffs>> = model
        .shells
        .par_iter()
        .map(|s| {
            let vals = eval_at_points(s, &points);
            analyze_on_regular_grid(&vals, sph, s.k, s.p, &table)
        })
        .collect();
    Ok(VolumeModel { shells: shells? })
}

/// Point reflection of the density (x -> -x): per-coefficient sign (-1)^n.
pub fn parity_flip(model: &VolumeModel) -> VolumeModel {
    let shells = model
        .shells
        .iter()
        .map(|s| {
            let mut out = s.clone();
            for n in (1..=s.p).step_by(2) {
                for m in -(n as i64)..=n as i64 {
                    out.coeffs[coef_index(n, m)] = -out.coeffs[coef_index(n, m)];
                }
            }
            out
        })
        .collect();
    VolumeModel { shells }
}

/// Ball-weighted squared coefficient distance sum_q k_q^2 w_q ||a_q - b_q||^2;
/// proportional to the squared L2 density distance for band-limited models.
fn weighted_distance_sq(a: &VolumeModel, b: &VolumeModel, radial: &RadialGrid) -> f64 {
    a.shells
        .iter()
        .zip(&b.shells)
        .enumerate()
        .map(|(q, (sa, sb))| {
            let w = radial.k_values[q] * radial.k_values[q] * radial.radial_weight(q);
            let d: f64 = sa
                .coeffs
                .iter()
                .zip(&sb.coeffs)
                .map(|(x, y)| (x - y).norm_sqr())
                .sum();
            w * d
        })
        .sum()
}

/// Minimize f over R^3 with a Nelder-Mead simplex started at x0 with edge h0.
fn nelder_mead3<F: FnMut(&[f64; 3]) -> f64>(
    mut f: F,
    x0: [f64; 3],
    h0: f64,
    max_eval: usize,
) -> ([f64; 3], f64) {
    let mut pts: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    let fx0 = f(&x0);
    pts.push((x0, fx0));
    for i in 0..3 {
        let mut x = x0;
        x[i] += h0;
        let fx = f(&x);
        pts.push((x, fx));
    }
    let mut evals = 4usize;
    loop {
        pts.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let diam = (0..3)
            .map(|i| {
                pts.iter()
                    .map(|p| p.0[i])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    })
            })
            .map(|(lo, hi)| hi - lo)
            .fold(0.0f64, f64::max);
        if evals >= max_eval || diam <= 1e-7 {
            break;
        }
        let best = pts[0].1;
        let second_worst = pts[2].1;
        let worst = pts[3].1;
        let mut c = [0.0; 3];
        for p in &pts[..3] {
            for i in 0..3 {
                c[i] += p.0[i] / 3.0;
            }
        }
        let lerp = |t: f64| {
            let mut x = [0.0; 3];
            for i in 0..3 {
                x[i] = c[i] + t * (c[i] - pts[3].0[i]);
            }
            x
        };
        let xr = lerp(1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < best {
            let xe = lerp(2.0);
            let fe = f(&xe);
            evals += 1;
            pts[3] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < second_worst {
            pts[3] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let x = lerp(0.5);
                let fx = f(&x);
                (x, fx)
            } else {
                let x = lerp(-0.5);
                let fx = f(&x);
                (x, fx)
            };
            evals += 1;
            if fc < worst.min(fr) {
                pts[3] = (xc, fc);
            } else {
                // shrink toward the best vertex
                let b0 = pts[0].0;
                for p in pts.iter_mut().skip(1) {
                    for i in 0..3 {
                        p.0[i] = b0[i] + 0.5 * (p.0[i] - b0[i]);
                    }
                    p.1 = f(&p.0);
                    evals += 1;
                }
            }
        }
    }
    pts.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    (pts[0].0, pts[0].1)
}

#[derive(Debug)]
pub struct AlignOutcome {
    pub model: VolumeModel,
    pub rotation: Mat3,
    pub orientation: Orientation,
    pub mirrored: bool,
    /// Ball-weighted squared distance to the reference after alignment.
    pub distance_sq: f64,
}

#[allow(clippy::too_many_arguments)]
fn align_hand(
    hand: &VolumeModel,
    truth: &VolumeModel,
    grids: &Grids,
    oris: &[Orientation],
    polars: &[PolarImage],
    ctfs: &[Ctf],
    seed: u64,
    mirrored: bool,
) -> Result<AlignOutcome> {
    let mcfg = MatchConfig {
        f_rand: 0.0,
        coarse_factor: 1,
        k_upper: grids.radial.kmax,
    };
    let bank = generate_templates(hand, grids, grids.radial.kmax)?;
    let assigns = match_all(polars, ctfs, &bank, &mcfg, grids, seed, 0)?;
    let mut mean = [[0.0f64; 3]; 3];
    let inv = 1.0 / oris.len() as f64;
    for (a, o) in assigns.iter().zip(oris) {
        let q = mat_mul(
            &a.orientation.rotation_matrix(),
            &mat_transpose(&o.rotation_matrix()),
        );
        for r in 0..3 {
            for c in 0..3 {
                mean[r][c] += inv * q[r][c];
            }
        }
    }
    let q0 = project_rotation(&mean)?;
    // local refinement of the grid-quantized consensus
    let h0 = 0.5 * PI / grids.sphere.ntheta as f64;
    let obj = |v: &[f64; 3]| -> f64 {
        let q = mat_mul(&q0, &rodrigues(v));
        match resample_rotated(hand, grids, &q) {
            Ok(m) => weighted_distance_sq(&m, truth, &grids.radial),
            Err(_) => f64::INFINITY,
        }
    };
    let (vbest, dist) = nelder_mead3(obj, [0.0; 3], h0, 160);
    let qf = mat_mul(&q0, &rodrigues(&vbest));
    let aligned = resample_rotated(hand, grids, &qf)?;
    Ok(AlignOutcome {
        model: aligned,
        rotation: qf,
        orientation: euler_from_matrix(&qf),
        mirrored,
        distance_sq: dist,
    })
}

/// Find the global rotation (and hand) that best maps `recon` onto `truth`:
/// match a few noise-free probe projections of `truth` against templates of
/// `recon`, average the implied relative rotations (chordal mean), refine
/// continuously, and return the resampled aligned model. Both the model and
/// its point reflection are tried; the better hand wins.
pub fn align_to_truth(
    recon: &VolumeModel,
    truth: &VolumeModel,
    grids: &Grids,
    n_probes: usize,
    seed: u64,
) -> Result<AlignOutcome> {
    recon.check_compatible(grids)?;
    truth.check_compatible(grids)?;
    if n_probes == 0 {
        return Err(Error::param("need at least one probe projection"));
    }
    let mut rng = stream(seed, StreamKind::Probes, 0, 0);
    let oris: Vec<Orientation> = (0..n_probes).map(|_| sample_orientation(&mut rng)).collect();
    let polars: Vec<PolarImage> = oris
        .iter()
        .map(|o| Ok(rings_to_polar(slice_rings(truth, grids, o, &Ctf::Identity)?, grids)))
        .collect::<Result<_>>()?;
    let ctfs = vec![Ctf::Identity; n_probes];

    let mut best: Option<AlignOutcome> = None;
    let mut first_err: Option<Error> = None;
    for mirrored in [false, true] {
        let hand = if mirrored { parity_flip(recon) } else { recon.clone() };
        match align_hand(&hand, truth, grids, &oris, &polars, &ctfs, seed, mirrored) {
            Ok(out) => {
                if best
                    .as_ref()
                    .map_or(true, |b| out.distance_sq < b.distance_sq)
                {
                    best = Some(out);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    best.ok_or_else(|| first_err.unwrap_or_else(|| Error::degenerate("alignment failed")))
}

#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub epsilon: f64,
    pub alignment: Orientation,
    pub mirrored: bool,
    /// Cube resolution the error was evaluated on.
    pub n: usize,
    pub seconds: f64,
}

impl ErrorReport {
    pub fn render(&self) -> String {
        format!(
            "epsilon: {:.6e}\nalign_alpha: {:.6}\nalign_beta: {:.6}\nalign_gamma: {:.6}\nmirrored: {}\ncube_n: {}\nseconds: {:.3}\n",
            self.epsilon,
            self.alignment.alpha,
            self.alignment.beta,
            self.alignment.gamma,
            self.mirrored,
            self.n,
            self.seconds
        )
    }
}

#[derive(Debug)]
pub struct Evaluation {
    pub report: ErrorReport,
    pub aligned: DensityCube,
    pub reference: DensityCube,
}

/// Align (optional), synthesize both densities on an n^3 cube of box scale d,
/// and report the relative L2 error.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_reconstruction(
    recon: &VolumeModel,
    truth: &VolumeModel,
    grids: &Grids,
    n: usize,
    d: f64,
    n_probes: usize,
    seed: u64,
    align: bool,
) -> Result<Evaluation> {
    let t0 = Instant::now();
    let (aligned_model, orientation, mirrored) = if align {
        let out = align_to_truth(recon, truth, grids, n_probes, seed)?;
        (out.model, out.orientation, out.mirrored)
    } else {
        (recon.clone(), Orientation::identity(), false)
    };
    let (aligned, _) = synthesize_cube(&aligned_model, grids, n, d)?;
    let (reference, _) = synthesize_cube(truth, grids, n, d)?;
    let epsilon = relative_l2_error(&aligned, &reference)?;
    let report = ErrorReport {
        epsilon,
        alignment: orientation,
        mirrored,
        n,
        seconds: t0.elapsed().as_secs_f64(),
    };
    Ok(Evaluation { report, aligned, reference })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grids;
    use crate::phantom;
    use num_complex::Complex64;
    use rand::Rng;

    fn cube_from<F: Fn(f64, f64, f64) -> f64>(n: usize, f: F) -> DensityCube {
        let mut c = DensityCube::zero(n, 1.0);
        for iz in 0..n {
            for iy in 0..n {
                for ix in 0..n {
                    let (x, y, z) = (
                        DensityCube::coord(n, ix),
                        DensityCube::coord(n, iy),
                        DensityCube::coord(n, iz),
                    );
                    c.values[ix + n * (iy + n * iz)] = f(x, y, z);
                }
            }
        }
        c
    }

    fn small_truth(kmax: f64) -> (Grids, VolumeModel) {
        let spec = phantom::five_gaussian_spec();
        let g = build_grids(kmax, 2.0, 1.2).unwrap();
        let m = phantom::build_truth_model(&spec, &g).unwrap();
        (g, m)
    }

    fn frob(a: &Mat3, b: &Mat3) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += (a[i][j] - b[i][j]).powi(2);
            }
        }
        s.sqrt()
    }

    fn rel_model_dist(a: &VolumeModel, b: &VolumeModel, g: &Grids) -> f64 {
        let d = weighted_distance_sq(a, b, &g.radial);
        let n = weighted_distance_sq(&VolumeModel::zero(g), b, &g.radial);
        (d / n).sqrt()
    }

    #[test]
    fn relative_error_trivial_cases() {
        let b = cube_from(12, |x, y, z| (x + 2.0 * y - z).sin() + 0.3);
        assert_eq!(relative_l2_error(&b, &b).unwrap(), 0.0);
        let zero = DensityCube::zero(12, 1.0);
        assert!((relative_l2_error(&zero, &b).unwrap() - 1.0).abs() < 1e-14);
        let mut twice = b.clone();
        twice.values.iter_mut().for_each(|v| *v *= 2.0);
        assert!((relative_l2_error(&twice, &b).unwrap() - 1.0).abs() < 1e-14);
        assert!(relative_l2_error(&b, &zero).is_err());
        let other = DensityCube::zero(10, 1.0);
        assert!(relative_l2_error(&other, &b).is_err());
    }

    #[test]
    fn relative_error_scale_invariant() {
        let b = cube_from(10, |x, y, z| x * y + z);
        let a = cube_from(10, |x, y, z| x * y + z + 0.1 * (3.0 * x).cos());
        let e1 = relative_l2_error(&a, &b).unwrap();
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        a2.values.iter_mut().for_each(|v| *v *= -7.5);
        b2.values.iter_mut().for_each(|v| *v *= -7.5);
        let e2 = relative_l2_error(&a2, &b2).unwrap();
        assert!((e1 - e2).abs() <= 1e-13 * e1);
    }

    #[test]
    fn ncc_matches_small_error_expansion() {
        let b = cube_from(14, |x, y, z| (2.0 * x).sin() + (y - z).cos());
        let bn: f64 = b.values.iter().map(|v| v * v).sum();
        let mut rng = stream(77, StreamKind::Probes, 9, 0);
        for eps in [0.02, 0.05, 0.1] {
            let mut d: Vec<f64> = (0..b.values.len())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            // orthogonalize the perturbation against the reference
            let db: f64 = d.iter().zip(&b.values).map(|(x, y)| x * y).sum();
            for (x, y) in d.iter_mut().zip(&b.values) {
                *x -= db / bn * y;
            }
            let dn: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = eps * bn.sqrt() / dn;
            let mut a = b.clone();
            for (av, dv) in a.values.iter_mut().zip(&d) {
                *av += scale * dv;
            }
            let e = relative_l2_error(&a, &b).unwrap();
            assert!((e - eps).abs() < 1e-12);
            let ncc = normalized_cross_correlation(&a, &b).unwrap();
            let drop = 1.0 - ncc;
            let expect = eps * eps / 2.0;
            assert!(
                (drop - expect).abs() <= 0.1 * expect,
                "eps {eps}: 1-ncc {drop:.3e} vs {expect:.3e}"
            );
        }
    }

    #[test]
    fn fit_recovers_exact_model() {
        let pts: Vec<(usize, f64)> = [500usize, 1000, 2000, 4000]
            .iter()
            .flat_map(|&m| {
                let e = (0.001 + 5.0 / m as f64).sqrt();
                vec![(m, e), (m, e), (m, e)]
            })
            .collect();
        let (a0, a1) = fit_error_vs_m(&pts).unwrap();
        assert!((a0 - 0.001).abs() < 1e-10, "a0 {a0}");
        assert!((a1 - 5.0).abs() < 1e-10, "a1 {a1}");
        let flat: Vec<(usize, f64)> = vec![(100, 0.3), (200, 0.3), (400, 0.3)];
        let (c0, c1) = fit_error_vs_m(&flat).unwrap();
        assert!((c0 - 0.09).abs() < 1e-12);
        assert!(c1.abs() < 1e-12);
        assert!(fit_error_vs_m(&[(100, 0.1), (100, 0.2)]).is_err());
        assert!(fit_error_vs_m(&[]).is_err());
        assert!(fit_error_vs_m(&[(0, 0.1), (10, 0.1)]).is_err());
    }

    #[test]
    fn fit_uses_median_per_group() {
        // one wild outlier per M must not move the fit
        let pts: Vec<(usize, f64)> = [500usize, 1000, 2000]
            .iter()
            .flat_map(|&m| {
                let e = (0.002 + 3.0 / m as f64).sqrt();
                vec![(m, e), (m, e), (m, 50.0)]
            })
            .collect();
        let (a0, a1) = fit_error_vs_m(&pts).unwrap();
        assert!((a0 - 0.002).abs() < 1e-10);
        assert!((a1 - 3.0).abs() < 1e-10);
    }

    #[test]
    fn fit_regression_oracle_on_noisy_data() {
        let ms = [500usize, 1000, 2000, 4000, 8000];
        let mut pts = Vec::new();
        for (i, &m) in ms.iter().enumerate() {
            let noise = if i % 2 == 0 { 1e-5 } else { -1e-5 };
            let e2 = 0.002 + 4.0 / m as f64 + noise;
            pts.push((m, e2.sqrt()));
        }
        let (a0, a1) = fit_error_vs_m(&pts).unwrap();
        assert!((a0 - 0.002).abs() < 1e-4);
        assert!((a1 - 4.0).abs() < 0.2);
        // fit residual bounded by the data's own spread around its mean
        let ys: Vec<(f64, f64)> = pts.iter().map(|&(m, e)| (1.0 / m as f64, e * e)).collect();
        let mean = ys.iter().map(|p| p.1).sum::<f64>() / ys.len() as f64;
        let var: f64 = ys.iter().map(|p| (p.1 - mean).powi(2)).sum();
        let res: f64 = ys.iter().map(|p| (p.1 - (a0 + a1 * p.0)).powi(2)).sum();
        assert!(res < var);
    }

    #[test]
    fn rotation_projection_basics() {
        let o = Orientation { alpha: 0.8, beta: 2.1, gamma: 4.4 };
        let r = o.rotation_matrix();
        assert!(frob(&project_rotation(&r).unwrap(), &r) < 1e-12);
        let mut scaled = r;
        for row in scaled.iter_mut() {
            for v in row.iter_mut() {
                *v *= 0.7;
            }
        }
        assert!(frob(&project_rotation(&scaled).unwrap(), &r) < 1e-12);
        // improper input projects to the nearest proper rotation
        let mut improper = r;
        for row in improper.iter_mut() {
            row[2] = -row[2];
        }
        let proj = project_rotation(&improper).unwrap();
        assert!((mat_det(&proj) - 1.0).abs() < 1e-12);
        assert!(frob(&proj, &r) < 1e-12);
        // rank-1 input has no usable consensus
        let rank1 = [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert!(project_rotation(&rank1).is_err());
    }

    #[test]
    fn rodrigues_matches_elementary_rotations() {
        use crate::orient::{rot_y, rot_z};
        assert!(frob(&rodrigues(&[0.0, 0.0, 0.0]), &mat_identity()) < 1e-15);
        assert!(frob(&rodrigues(&[0.0, 0.0, 0.9]), &rot_z(0.9)) < 1e-12);
        assert!(frob(&rodrigues(&[0.0, -0.4, 0.0]), &rot_y(-0.4)) < 1e-12);
        let r = rodrigues(&[0.3, -0.2, 0.5]);
        let rtr = mat_mul(&mat_transpose(&r), &r);
        assert!(frob(&rtr, &mat_identity()) < 1e-12);
        assert!((mat_det(&r) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn euler_round_trips_through_matrix() {
        let mut rng = stream(5, StreamKind::Probes, 1, 0);
        for _ in 0..25 {
            let o = sample_orientation(&mut rng);
            let r = o.rotation_matrix();
            let e = euler_from_matrix(&r);
            assert!(frob(&e.rotation_matrix(), &r) < 1e-10);
        }
        // gimbal cases
        for r in [
            Orientation { alpha: 0.0, beta: 1.3, gamma: 0.0 }.rotation_matrix(),
            Orientation { alpha: PI, beta: 0.4, gamma: 0.0 }.rotation_matrix(),
        ] {
            let e = euler_from_matrix(&r);
            assert!(frob(&e.rotation_matrix(), &r) < 1e-10);
        }
    }

    #[test]
    fn resample_identity_is_exact() {
        let (g, m) = small_truth(8.0);
        let out = resample_rotated(&m, &g, &mat_identity()).unwrap();
        for (a, b) in m.shells.iter().zip(&out.shells) {
            for (x, y) in a.coeffs.iter().zip(&b.coeffs) {
                assert!((x - y).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn resample_z_rotation_is_a_phase_shift() {
        let (g, m) = small_truth(8.0);
        let beta = 0.7;
        let out = resample_rotated(&m, &g, &crate::orient::rot_z(beta)).unwrap();
        for (a, b) in m.shells.iter().zip(&out.shells) {
            for n in 0..=a.p {
                for mm in -(n as i64)..=n as i64 {
                    let ph = Complex64::new(0.0, mm as f64 * beta).exp();
                    let want = a.coeffs[coef_index(n, mm)] * ph;
                    let got = b.coeffs[coef_index(n, mm)];
                    assert!((want - got).norm() < 1e-11);
                }
            }
        }
    }

    #[test]
    fn resample_preserves_norms_and_composes() {
        let (g, m) = small_truth(8.0);
        let r1 = Orientation { alpha: 0.9, beta: 2.2, gamma: 1.1 }.rotation_matrix();
        let r2 = Orientation { alpha: 1.7, beta: 0.3, gamma: 5.0 }.rotation_matrix();
        let a = resample_rotated(&m, &g, &r1).unwrap();
        for (s0, s1) in m.shells.iter().zip(&a.shells) {
            let n0: f64 = s0.coeffs.iter().map(|c| c.norm_sqr()).sum();
            let n1: f64 = s1.coeffs.iter().map(|c| c.norm_sqr()).sum();
            assert!((n0 - n1).abs() <= 1e-11 * n0.max(1e-300));
        }
        let ab = resample_rotated(&a, &g, &r2).unwrap();
        let direct = resample_rotated(&m, &g, &mat_mul(&r1, &r2)).unwrap();
        assert!(rel_model_dist(&ab, &direct, &g) < 1e-10);
    }

    #[test]
    fn parity_is_involution_and_reflects_directions() {
        let (_g, m) = small_truth(8.0);
        let p = parity_flip(&m);
        let pp = parity_flip(&p);
        for (a, b) in m.shells.iter().zip(&pp.shells) {
            assert_eq!(a.coeffs, b.coeffs);
        }
        let s = &m.shells[1];
        let sp = &p.shells[1];
        for &(th, ph) in &[(0.3, 1.2), (2.0, 4.0), (1.4, 0.1)] {
            let direct = crate::harmonics::eval_at_point(s, PI - th, ph + PI);
            let flipped = crate::harmonics::eval_at_point(sp, th, ph);
            assert!((direct - flipped).norm() < 1e-12);
        }
    }

    #[test]
    fn rotation_invariant_model_unchanged_by_resampling() {
        let g = build_grids(6.0, 2.0, 1.2).unwrap();
        let mut m = VolumeModel::zero(&g);
        for (q, s) in m.shells.iter_mut().enumerate() {
            s.coeffs[coef_index(0, 0)] = Complex64::new(1.0 + q as f64, 0.0);
        }
        let r = Orientation { alpha: 1.2, beta: 0.4, gamma: 2.2 }.rotation_matrix();
        let out = resample_rotated(&m, &g, &r).unwrap();
        for (a, b) in m.shells.iter().zip(&out.shells) {
            for (x, y) in a.coeffs.iter().zip(&b.coeffs) {
                assert!((x - y).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn align_self_is_identity() {
        let (g, m) = small_truth(8.0);
        let out = align_to_truth(&m, &m, &g, 10, 31).unwrap();
        assert!(!out.mirrored);
        assert!(frob(&out.rotation, &mat_identity()) < 1e-3, "rot off by {}", frob(&out.rotation, &mat_identity()));
        assert!(rel_model_dist(&out.model, &m, &g) < 1e-4);
    }

    #[test]
    fn align_recovers_known_rotation() {
        let (g, m) = small_truth(8.0);
        let r = Orientation {
            alpha: g.sphere.thetas[5],
            beta: g.sphere.phis[7],
            gamma: g.sphere.phis[3],
        }
        .rotation_matrix();
        let recon = resample_rotated(&m, &g, &mat_transpose(&r)).unwrap();
        let out = align_to_truth(&recon, &m, &g, 10, 8).unwrap();
        assert!(!out.mirrored);
        assert!(frob(&out.rotation, &r) < 1e-2, "rot miss {}", frob(&out.rotation, &r));
        assert!(rel_model_dist(&out.model, &m, &g) < 1e-3);
    }

    #[test]
    fn align_detects_mirrored_hand() {
        let (g, m) = small_truth(8.0);
        let r = Orientation { alpha: 0.9, beta: 1.0, gamma: 2.5 }.rotation_matrix();
        let recon = parity_flip(&resample_rotated(&m, &g, &mat_transpose(&r)).unwrap());
        let out = align_to_truth(&recon, &m, &g, 10, 8).unwrap();
        assert!(out.mirrored);
        assert!(rel_model_dist(&out.model, &m, &g) < 1e-3);
    }

    #[test]
    fn evaluate_self_reports_tiny_error() {
        let (g, m) = small_truth(6.0);
        let ev = evaluate_reconstruction(&m, &m, &g, 32, 1.0, 6, 3, true).unwrap();
        assert!(ev.report.epsilon < 1e-4, "eps {}", ev.report.epsilon);
        assert!(!ev.report.mirrored);
        assert_eq!(ev.report.n, 32);
        assert!(ev.report.seconds >= 0.0);
        let text = ev.report.render();
        assert!(text.contains("epsilon:"));
        assert!(text.lines().count() == 7);
        let no_align = evaluate_reconstruction(&m, &m, &g, 32, 1.0, 6, 3, false).unwrap();
        assert_eq!(no_align.report.epsilon, 0.0);
    }
}
