//! Radially symmetric contrast transfer function.

use crate::error::{Error, Result};

/// Microscope parameters for one image. Lengths in Angstrom, angles in
/// radians; `d` converts numerical wavenumbers to physical ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtfParams {
    /// Defocus z.
    pub z: f64,
    /// Spherical aberration.
    pub cs: f64,
    /// Electron wavelength.
    pub lambda: f64,
    /// Envelope acceptance angle.
    pub theta0: f64,
    /// Elastic weight; w1^2 + w2^2 = 1.
    pub w1: f64,
    /// Inelastic weight in [0, 1).
    pub w2: f64,
    /// Angstrom per numerical unit.
    pub d: f64,
}

pub const DEFAULT_W2: f64 = 0.07;
pub const DEFAULT_CS: f64 = 2.0e7;
pub const DEFAULT_LAMBDA: f64 = 0.025;
pub const DEFAULT_THETA0: f64 = 0.002;

impl CtfParams {
    /// Standard parameter set with the given defocus and box scale.
    pub fn with_defaults(z: f64, d: f64) -> Self {
        CtfParams {
            z,
            cs: DEFAULT_CS,
            lambda: DEFAULT_LAMBDA,
            theta0: DEFAULT_THETA0,
            w1: (1.0 - DEFAULT_W2 * DEFAULT_W2).sqrt(),
            w2: DEFAULT_W2,
            d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.z > 0.0
            && self.cs > 0.0
            && self.lambda > 0.0
            && self.theta0 > 0.0
            && self.d > 0.0
            && (0.0..1.0).contains(&self.w2)
            && (self.w1 * self.w1 + self.w2 * self.w2 - 1.0).abs() < 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::param("invalid CTF parameters"))
        }
    }
}

/// C(k) = exp(-theta^2/theta0^2) (w1 sin chi - w2 cos chi) with
/// theta = lambda k / (2 pi D) and chi = k z theta^2 / 2 + k Cs theta^4 / 8.
pub fn eval_ctf(p: &CtfParams, k: f64) -> f64 {
    let theta = p.lambda * k / (2.0 * std::f64::consts::PI * p.d);
    let t2 = theta * theta;
    let chi = 0.5 * k * p.z * t2 + k * p.cs * t2 * t2 / 8.0;
    let env = (-t2 / (p.theta0 * p.theta0)).exp();
    env * (p.w1 * chi.sin() - p.w2 * chi.cos())
}

/// The transfer function applied to an image: either none (ideal) or the
/// radial model above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ctf {
    Identity,
    Radial(CtfParams),
}

impl Ctf {
    #[inline]
    pub fn eval(&self, k: f64) -> f64 {
        match self {
            Ctf::Identity => 1.0,
            Ctf::Radial(p) => eval_ctf(p, k),
        }
    }
}
