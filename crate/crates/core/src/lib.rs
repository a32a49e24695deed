//! Frequency-marching single-particle reconstruction.
//!
//! Volumes are represented by spherical-harmonic coefficients on concentric
//! Fourier shells. The library covers the full pipeline: synthetic phantom
//! models, image formation with CTF and noise, fast template matching over
//! an orientation grid, per-shell least-squares reconstruction, and the
//! outward frequency march that alternates the two.

pub mod error;
pub mod evaluate;
pub mod fft;
pub mod grid;
pub mod harmonics;
pub mod image;
pub mod io;
pub mod march;
pub mod matching;
pub mod model;
pub mod optics;
pub mod orient;
pub mod phantom;
pub mod reconstruct;
pub mod rng;
pub mod spline;
pub mod templates;

pub use error::{Error, Result};
