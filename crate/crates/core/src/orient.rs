//! Orientations, rotations, and the geometry of central slices.
//!
//! An orientation is the Euler triple (alpha, beta, gamma): the beam
//! direction is set by rotating about y by alpha then about z by beta
//! (extrinsic), and gamma is the in-plane rotation of the detector. The
//! combined matrix is R = Rz(beta) Ry(alpha) Rz(gamma).

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    /// Polar beam angle in [0, pi].
    pub alpha: f64,
    /// Azimuthal beam angle in [0, 2 pi).
    pub beta: f64,
    /// In-plane rotation in [0, 2 pi).
    pub gamma: f64,
}

impl Orientation {
    pub fn identity() -> Self {
        Orientation { alpha: 0.0, beta: 0.0, gamma: 0.0 }
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        mat_mul(
            &mat_mul(&rot_z(self.beta), &rot_y(self.alpha)),
            &rot_z(self.gamma),
        )
    }
}

pub fn rot_y(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_z(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|t| a[i][t] * b[t][j]).sum();
        }
    }
    out
}

pub fn mat_transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat_vec(a: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// Cartesian location of the slice sample at in-plane angle psi and radius k
/// for beam direction (alpha, beta). Equals R(alpha,beta,0) (k cos psi,
/// k sin psi, 0); z depends only on alpha and psi.
pub fn slice_point(alpha: f64, beta: f64, psi: f64, k: f64) -> [f64; 3] {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sp, cp) = psi.sin_cos();
    [
        k * (cb * ca * cp - sb * sp),
        k * (sb * ca * cp + cb * sp),
        -k * sa * cp,
    ]
}

/// (theta, phi) of the slice sample direction; independent of k.
pub fn slice_direction(alpha: f64, beta: f64, psi: f64) -> (f64, f64) {
    let p = slice_point(alpha, beta, psi, 1.0);
    to_spherical(&p)
}

/// Spherical angles of a nonzero vector: theta in [0, pi] from +z, phi in
/// [0, 2 pi) in the xy plane.
pub fn to_spherical(v: &[f64; 3]) -> (f64, f64) {
    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let theta = if r == 0.0 { 0.0 } else { (v[2] / r).clamp(-1.0, 1.0).acos() };
    let mut phi = v[1].atan2(v[0]);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    (theta, phi)
}

/// Absolute circular distance between two angles, in [0, pi].
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let mut d = (a - b).rem_euclid(2.0 * PI);
    if d > PI {
        d = 2.0 * PI - d;
    }
    d
}
