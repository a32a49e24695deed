//! Volume models: one spherical-harmonic expansion per Fourier shell.

use crate::error::{Error, Result};
use crate::grid::{DensityCube, Grids};
use crate::harmonics::{self, LegendreTable, ShellCoeffs};
use num_complex::Complex64;
use rayon::prelude::*;

/// Band-limited Fourier volume: shells[q] holds the expansion at k = (q+1) dk.
#[derive(Debug, Clone)]
pub struct VolumeModel {
    pub shells: Vec<ShellCoeffs>,
}

impl VolumeModel {
    pub fn zero(grids: &Grids) -> Self {
        let shells = grids
            .radial
            .k_values
            .iter()
            .map(|&k| ShellCoeffs::zero(k, harmonics::degree_for_shell(k)))
            .collect();
        VolumeModel { shells }
    }

    pub fn nr(&self) -> usize {
        self.shells.len()
    }

    pub fn kmax(&self) -> f64 {
        self.shells.last().map_or(0.0, |s| s.k)
    }

    pub fn dk(&self) -> f64 {
        self.shells.first().map_or(0.0, |s| s.k)
    }

    /// Shell index range covering k <= k_upper (+ rounding slack).
    pub fn shells_within(&self, k_upper: f64) -> &[ShellCoeffs] {
        let n = self
            .shells
            .iter()
            .take_while(|s| s.k <= k_upper + 1e-9)
            .count();
        &self.shells[..n]
    }

    pub fn check_compatible(&self, grids: &Grids) -> Result<()> {
        if self.nr() != grids.radial.nr() {
            return Err(Error::param(format!(
                "model has {} shells, grid {}",
                self.nr(),
                grids.radial.nr()
            )));
        }
        for (s, &k) in self.shells.iter().zip(&grids.radial.k_values) {
            if (s.k - k).abs() > 1e-9 {
                return Err(Error::param("model shell radii do not match grid"));
            }
        }
        Ok(())
    }

    /// Coefficient-space squared L2 norm of one shell (orthonormal basis).
    pub fn shell_norm_sq(&self, q: usize) -> f64 {
        self.shells[q].coeffs.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Evaluate every shell of the model on the regular sphere grid; the list is
/// indexed [q][j * nphi + l].
pub fn model_on_grid(
    model: &VolumeModel,
    grids: &Grids,
    table: &LegendreTable,
) -> Result<Vec<Vec<Complex64>>> {
    model.check_compatible(grids)?;
    model
        .shells
        .par_iter()
        .map(|s| harmonics::eval_on_regular_grid(s, &grids.sphere, table))
        .collect()
}

/// Synthesize the real-space density cube of a model (n^3 voxels, box scale
/// d), returning the cube and the largest imaginary residual ratio.
pub fn synthesize_cube(
    model: &VolumeModel,
    grids: &Grids,
    n: usize,
    d: f64,
) -> Result<(DensityCube, f64)> {
    let table = LegendreTable::new(
        harmonics::degree_for_shell(grids.radial.kmax),
        &grids.sphere.mus,
    );
    let per_shell = model_on_grid(model, grids, &table)?;
    let mut values = Vec::with_capacity(grids.radial.nr() * grids.sphere.ntheta * grids.sphere.nphi);
    for shell in &per_shell {
        values.extend_from_slice(shell);
    }
    crate::grid::inverse_fourier_volume(&values, grids, n, d)
}
