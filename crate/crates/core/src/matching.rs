//! Orientation assignment: maximize the CTF-aware normalized inner product
//! between an image's polar Fourier data and the template bank, searching
//! the (alpha, beta) grid coarse-to-fine and all in-plane angles gamma by
//! FFT.

use crate::error::{Error, Result};
use crate::fft;
use crate::grid::Grids;
use crate::image::PolarImage;
use crate::optics::Ctf;
use crate::orient::Orientation;
use crate::rng::{stream, StreamKind};
use crate::templates::TemplateBank;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub orientation: Orientation,
    /// Best normalized inner product, in [-1, 1] up to rounding.
    pub score: f64,
    /// Grid indices of the returned angles.
    pub i: usize,
    pub j: usize,
    pub m: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct MatchConfig {
    /// Randomized near-tie selection: any evaluated triple scoring above
    /// 1 - f_rand is an equally likely pick. Zero disables randomization.
    pub f_rand: f64,
    /// Evaluate every coarse_factor-th alpha and beta index first, then
    /// refine around the coarse maxima. One is exhaustive search.
    pub coarse_factor: usize,
    /// Current band limit: shells with k <= k_upper enter the products.
    pub k_upper: f64,
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.f_rand) {
            return Err(Error::param("f_rand must lie in [0, 1)"));
        }
        if self.coarse_factor == 0 {
            return Err(Error::param("coarse_factor must be >= 1"));
        }
        if !(self.k_upper > 0.0) {
            return Err(Error::param("k_upper must be positive"));
        }
        Ok(())
    }
}

/// Cross-correlation coefficients of image against the (i, j) template:
/// c_n = sum_{k_q <= kappa} M_n(k_q) conj(C(k_q) S_n(k_q)) k_q dk,
/// returned for n = -N..N with N the band of the last included shell.
pub fn correlation_coeffs(
    img: &PolarImage,
    bank: &TemplateBank,
    i: usize,
    j: usize,
    ctf: &Ctf,
    nshells: usize,
    dk: f64,
) -> Vec<Complex64> {
    let nmax = bank.shells[nshells - 1].nq;
    let mut c = vec![Complex64::default(); 2 * nmax + 1];
    for q in 0..nshells {
        let shell = &bank.shells[q];
        let w = ctf.eval(shell.k) * shell.k * dk;
        let ring = shell.ring(i, j);
        let mc = &img.ring_coeffs[q];
        debug_assert_eq!(ring.len(), mc.len());
        let off = nmax - shell.nq;
        for (t, (&mv, &sv)) in mc.iter().zip(ring).enumerate() {
            c[off + t] += mv * sv.conj() * w;
        }
    }
    c
}

/// Tabulate Re g(gamma_m) = Re sum_n c_n e^{-i n gamma_m} at the nphi grid
/// angles gamma_m = 2 pi m / nphi via FFT.
pub fn gamma_scores(c: &[Complex64], nphi: usize) -> Vec<f64> {
    let nmax = (c.len() - 1) / 2;
    assert!(2 * nmax + 1 <= nphi, "band exceeds gamma grid");
    let mut buf = vec![Complex64::default(); nphi];
    for (t, &cv) in c.iter().enumerate() {
        let n = t as i64 - nmax as i64;
        buf[n.rem_euclid(nphi as i64) as usize] += cv;
    }
    fft::forward(&mut buf);
    buf.into_iter().map(|v| v.re).collect()
}

/// Index and value of the largest Re g(gamma) over the gamma grid, lowest
/// index on ties.
pub fn best_gamma(c: &[Complex64], nphi: usize) -> (usize, f64) {
    let g = gamma_scores(c, nphi);
    let mut best = (0usize, g[0]);
    for (m, &v) in g.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (m, v);
        }
    }
    best
}

/// value / (tmpl_norm * img_norm). Errors when either norm vanishes.
pub fn normalized_score(value: f64, tmpl_norm: f64, img_norm: f64) -> Result<f64> {
    if !(tmpl_norm > 0.0) || !(img_norm > 0.0) {
        return Err(Error::degenerate("zero norm in normalized score"));
    }
    Ok(value / (tmpl_norm * img_norm))
}

/// ||C S_{ij}||^2 over the included shells under the ring quadrature.
pub fn template_norm_sq(
    bank: &TemplateBank,
    i: usize,
    j: usize,
    ctf: &Ctf,
    nshells: usize,
    dk: f64,
) -> f64 {
    (0..nshells)
        .map(|q| {
            let s = &bank.shells[q];
            let c = ctf.eval(s.k);
            c * c * s.ring_power[i * s.nbeta + j] * s.k * dk
        })
        .sum()
}

struct PairEval {
    best_m: usize,
    best_score: f64,
    /// gamma indices whose score clears the randomization threshold
    candidates: Vec<usize>,
}

fn eval_pair(
    img: &PolarImage,
    bank: &TemplateBank,
    i: usize,
    j: usize,
    ctf: &Ctf,
    nshells: usize,
    dk: f64,
    img_norm: f64,
    threshold: Option<f64>,
) -> Result<PairEval> {
    let c = correlation_coeffs(img, bank, i, j, ctf, nshells, dk);
    let g = gamma_scores(&c, bank.nbeta);
    let tnorm = template_norm_sq(bank, i, j, ctf, nshells, dk).sqrt();
    let mut best_m = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    let mut candidates = Vec::new();
    for (m, &v) in g.iter().enumerate() {
        let s = normalized_score(v, tnorm, img_norm)?;
        if s > best_score {
            best_m = m;
            best_score = s;
        }
        if let Some(t) = threshold {
            if s > t {
                candidates.push(m);
            }
        }
    }
    Ok(PairEval { best_m, best_score, candidates })
}

/// Assign the best (alpha_i, beta_j, gamma_m) to one image.
///
/// Stage 1 scores every coarse_factor-th (i, j); stage 2 scores every fine
/// pair within one coarse cell of each coarse global maximum (beta wraps,
/// alpha clamps). With f_rand = 0 the single best triple wins, ties broken
/// by lowest (i, j, m); otherwise a uniform pick among all evaluated triples
/// scoring above 1 - f_rand, falling back to the argmax when none qualify.
pub fn match_image<R: Rng>(
    img: &PolarImage,
    bank: &TemplateBank,
    ctf: &Ctf,
    cfg: &MatchConfig,
    grids: &Grids,
    rng: &mut R,
) -> Result<Assignment> {
    cfg.validate()?;
    let nshells = bank
        .shells
        .iter()
        .take_while(|s| s.k <= cfg.k_upper + 1e-9)
        .count();
    if nshells == 0 {
        return Err(Error::param("no template shells below k_upper"));
    }
    if img.ring_coeffs.len() < nshells {
        return Err(Error::param("image has fewer shells than k_upper needs"));
    }
    let dk = grids.radial.dk;
    let img_norm = img.norm_sq_through(&grids.radial, nshells).sqrt();
    if !(img_norm > 0.0) {
        return Err(Error::degenerate("zero norm in normalized score"));
    }
    let (na, nb) = (bank.nalpha, bank.nbeta);
    let cf = cfg.coarse_factor;
    let threshold = (cfg.f_rand > 0.0).then_some(1.0 - cfg.f_rand);

    let coarse: Vec<(usize, usize)> = (0..na)
        .step_by(cf)
        .flat_map(|i| (0..nb).step_by(cf).map(move |j| (i, j)))
        .collect();
    let mut evals: Vec<((usize, usize), PairEval)> = Vec::new();
    for &(i, j) in &coarse {
        let e = eval_pair(img, bank, i, j, ctf, nshells, dk, img_norm, threshold)?;
        evals.push(((i, j), e));
    }

    if cf > 1 {
        let coarse_best = evals
            .iter()
            .map(|(_, e)| e.best_score)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut refine: Vec<(usize, usize)> = Vec::new();
        for ((ci, cj), e) in &evals {
            if e.best_score < coarse_best {
                continue;
            }
            let ilo = ci.saturating_sub(cf);
            let ihi = (ci + cf).min(na - 1);
            for i in ilo..=ihi {
                for dj in -(cf as i64)..=(cf as i64) {
                    let j = (*cj as i64 + dj).rem_euclid(nb as i64) as usize;
                    refine.push((i, j));
                }
            }
        }
        refine.sort_unstable();
        refine.dedup();
        refine.retain(|&(i, j)| !(i % cf == 0 && j % cf == 0));
        for (i, j) in refine {
            let e = eval_pair(img, bank, i, j, ctf, nshells, dk, img_norm, threshold)?;
            evals.push(((i, j), e));
        }
    }

    // deterministic tie-break and candidate order regardless of evaluation
    // order
    evals.sort_unstable_by_key(|&((i, j), _)| (i, j));
    let mut best: Option<(usize, usize, usize, f64)> = None;
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for ((i, j), e) in &evals {
        if best.map_or(true, |(_, _, _, s)| e.best_score > s) {
            best = Some((*i, *j, e.best_m, e.best_score));
        }
        for &m in &e.candidates {
            candidates.push((*i, *j, m));
        }
    }
    let (bi, bj, bm, bs) = best.unwrap();
    let (i, j, m) = if threshold.is_some() && !candidates.is_empty() {
        candidates[rng.gen_range(0..candidates.len())]
    } else {
        (bi, bj, bm)
    };
    Ok(Assignment {
        orientation: Orientation {
            alpha: bank.angles.alphas[i],
            beta: bank.angles.betas[j],
            gamma: bank.angles.gammas[m],
        },
        score: bs,
        i,
        j,
        m,
    })
}

/// Match every image of a stack in parallel with per-image rng streams
/// keyed by (seed, marching step, image index).
pub fn match_all(
    polars: &[PolarImage],
    ctfs: &[Ctf],
    bank: &TemplateBank,
    cfg: &MatchConfig,
    grids: &Grids,
    seed: u64,
    step: u64,
) -> Result<Vec<Assignment>> {
    if polars.len() != ctfs.len() {
        return Err(Error::param("polar/ctf count mismatch"));
    }
    polars
        .par_iter()
        .zip(ctfs)
        .enumerate()
        .map(|(idx, (p, ctf))| {
            let mut rng = stream(seed, StreamKind::MatchImage, step, idx as u64);
            match_image(p, bank, ctf, cfg, grids, &mut rng)
        })
        .collect()
}
