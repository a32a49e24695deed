//! Binary file formats, all little-endian:
//!
//! - "FMC1": volume model — Nr (u32), then per shell k (f64), p (u32),
//!   (p+1)^2 complex coefficients as interleaved f64 pairs in unroll order.
//! - "FMS1": particle stack — M (u32), npix (u32), D (f64), flags (u32, bit0
//!   = true orientations present), then per image z (f64), alpha/beta/gamma
//!   (3 x f64, NaN when absent), npix^2 f32 pixels row-major.
//! - "FMV1": density cube — n (u32), D (f64), n^3 f32 values x-fastest.

use crate::error::{Error, Result};
use crate::grid::DensityCube;
use crate::harmonics::{ncoef, ShellCoeffs};
use crate::model::VolumeModel;
use crate::orient::Orientation;
use num_complex::Complex64;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// One particle image: real pixels over [-1,1]^2, row-major with x fastest.
#[derive(Debug, Clone)]
pub struct PixelImage {
    pub pixels: Vec<f64>,
    /// Defocus in Angstrom.
    pub z: f64,
    pub orientation: Option<Orientation>,
}

/// A simulated (or loaded) image stack.
#[derive(Debug, Clone)]
pub struct Stack {
    pub npix: usize,
    /// Angstrom per numerical unit.
    pub d: f64,
    pub images: Vec<PixelImage>,
}

impl Stack {
    pub fn has_orientations(&self) -> bool {
        !self.images.is_empty() && self.images.iter().all(|i| i.orientation.is_some())
    }
}

fn magic_err(want: &str) -> Error {
    Error::Format(format!("bad magic, expected {want}"))
}

fn read_exact_buf<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(Error::Io)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_buf(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact_buf(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f32_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; 4 * n];
    read_exact_buf(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_model(path: &Path, model: &VolumeModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"FMC1")?;
    w.write_all(&(model.nr() as u32).to_le_bytes())?;
    for s in &model.shells {
        w.write_all(&s.k.to_le_bytes())?;
        w.write_all(&(s.p as u32).to_le_bytes())?;
        for c in &s.coeffs {
            w.write_all(&c.re.to_le_bytes())?;
            w.write_all(&c.im.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<VolumeModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_buf(&mut r, &mut magic)?;
    if &magic != b"FMC1" {
        return Err(magic_err("FMC1"));
    }
    let nr = read_u32(&mut r)? as usize;
    let mut shells = Vec::with_capacity(nr);
    for _ in 0..nr {
        let k = read_f64(&mut r)?;
        let p = read_u32(&mut r)? as usize;
        if !(k > 0.0) || p > 4096 {
            return Err(Error::Format(format!("implausible shell header k={k} p={p}")));
        }
        let n = ncoef(p);
        let mut coeffs = Vec::with_capacity(n);
        for _ in 0..n {
            let re = read_f64(&mut r)?;
            let im = read_f64(&mut r)?;
            coeffs.push(Complex64::new(re, im));
        }
        shells.push(ShellCoeffs { k, p, coeffs });
    }
    if shells.is_empty() {
        return Err(Error::Format("model has no shells".into()));
    }
    Ok(VolumeModel { shells })
}

pub fn write_stack(path: &Path, stack: &Stack) -> Result<()> {
    let npix = stack.npix;
    for img in &stack.images {
        if img.pixels.len() != npix * npix {
            return Err(Error::param("image pixel count mismatch"));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"FMS1")?;
    w.write_all(&(stack.images.len() as u32).to_le_bytes())?;
    w.write_all(&(npix as u32).to_le_bytes())?;
    w.write_all(&stack.d.to_le_bytes())?;
    let flags: u32 = if stack.has_orientations() { 1 } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    for img in &stack.images {
        w.write_all(&img.z.to_le_bytes())?;
        let (a, b, g) = match img.orientation {
            Some(o) if flags & 1 == 1 => (o.alpha, o.beta, o.gamma),
            _ => (f64::NAN, f64::NAN, f64::NAN),
        };
        w.write_all(&a.to_le_bytes())?;
        w.write_all(&b.to_le_bytes())?;
        w.write_all(&g.to_le_bytes())?;
        for &px in &img.pixels {
            w.write_all(&(px as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_stack(path: &Path) -> Result<Stack> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_buf(&mut r, &mut magic)?;
    if &magic != b"FMS1" {
        return Err(magic_err("FMS1"));
    }
    let m = read_u32(&mut r)? as usize;
    let npix = read_u32(&mut r)? as usize;
    let d = read_f64(&mut r)?;
    let flags = read_u32(&mut r)?;
    if npix < 2 || !(d > 0.0) {
        return Err(Error::Format(format!("implausible stack header npix={npix} D={d}")));
    }
    let mut images = Vec::with_capacity(m);
    for i in 0..m {
        let z = read_f64(&mut r)?;
        let a = read_f64(&mut r)?;
        let b = read_f64(&mut r)?;
        let g = read_f64(&mut r)?;
        let orientation = if flags & 1 == 1 {
            if a.is_nan() || b.is_nan() || g.is_nan() {
                return Err(Error::Format(format!("image {i}: orientation flag set but NaN angles")));
            }
            Some(Orientation { alpha: a, beta: b, gamma: g })
        } else {
            None
        };
        let px = read_f32_vec(&mut r, npix * npix)?;
        if px.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("image {i}: non-finite pixels")));
        }
        images.push(PixelImage {
            pixels: px.into_iter().map(f64::from).collect(),
            z,
            orientation,
        });
    }
    Ok(Stack { npix, d, images })
}

pub fn write_cube(path: &Path, cube: &DensityCube) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"FMV1")?;
    w.write_all(&(cube.n as u32).to_le_bytes())?;
    w.write_all(&cube.d.to_le_bytes())?;
    for &v in &cube.values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cube(path: &Path) -> Result<DensityCube> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_buf(&mut r, &mut magic)?;
    if &magic != b"FMV1" {
        return Err(magic_err("FMV1"));
    }
    let n = read_u32(&mut r)? as usize;
    let d = read_f64(&mut r)?;
    if n == 0 || n > 4096 || !(d > 0.0) {
        return Err(Error::Format(format!("implausible cube header n={n} D={d}")));
    }
    let vals = read_f32_vec(&mut r, n * n * n)?;
    Ok(DensityCube {
        n,
        d,
        values: vals.into_iter().map(f64::from).collect(),
    })
}
