//! The frequency-marching driver: random initial assignments, then an
//! alternation of template matching at the current band and least squares on
//! a slightly larger band, with stride acceleration when angles settle and
//! adaptive match randomization when the least squares struggles. Also the
//! known-angles baseline and classical fixed-band refinement for comparison.

use crate::error::{Error, Result};
use crate::grid::Grids;
use crate::image::{stack_to_polars, PolarImage};
use crate::io::Stack;
use crate::matching::{match_all, Assignment, MatchConfig};
use crate::model::VolumeModel;
use crate::optics::Ctf;
use crate::orient::{circular_distance, Orientation};
use crate::reconstruct::{solve_all_shells, ShellStats, SolveConfig};
use crate::rng::{sample_orientation, stream, StreamKind};
use crate::templates::generate_templates;
use rand::Rng;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct MarchConfig {
    /// First band limit solved from the random assignments.
    pub k1: f64,
    /// Initial randomization parameter for matching.
    pub f_rand_init: f64,
    /// Mean angle change below which the band advances by skip_stride shells.
    pub angle_change_threshold: f64,
    pub skip_stride: usize,
    /// Double f_rand when a shell's CG hits this many iterations unconverged.
    pub cg_double_at: usize,
    /// Halve f_rand when every shell converged under this many iterations.
    pub cg_halve_below: usize,
    pub f_rand_floor: f64,
    pub f_rand_cap: f64,
    pub coarse_factor: usize,
    /// Draw initial orientations from the continuous distribution instead of
    /// uniformly over the discrete angle grid.
    pub continuous_init: bool,
    pub seed: u64,
    pub solve: SolveConfig,
}

impl Default for MarchConfig {
    fn default() -> Self {
        MarchConfig {
            k1: 2.0,
            f_rand_init: 0.02,
            angle_change_threshold: 1e-3,
            skip_stride: 5,
            cg_double_at: 100,
            cg_halve_below: 50,
            f_rand_floor: 1e-4,
            f_rand_cap: 0.5,
            coarse_factor: 5,
            continuous_init: false,
            seed: 0,
            solve: SolveConfig::default(),
        }
    }
}

/// One least-squares invocation. Step 0 is the initial solve from random
/// assignments; its mean_dangle is NaN (no previous assignment to compare).
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    /// Band limit of this record's solve.
    pub k: f64,
    pub mean_dangle: f64,
    pub f_rand: f64,
    pub cg_iters: Vec<usize>,
    pub seconds: f64,
    /// Whether the model/assignments were accepted (false: f_rand doubled
    /// and the step repeated).
    pub accepted: bool,
}

impl StepRecord {
    pub fn cg_max(&self) -> usize {
        self.cg_iters.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct MarchTrace {
    pub steps: Vec<StepRecord>,
}

impl MarchTrace {
    /// One text line per least-squares invocation:
    /// "step k mean_dangle frand cg_max seconds".
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&format!(
                "{} {:.3} {:.6e} {:.6e} {} {:.3}\n",
                s.step,
                s.k,
                s.mean_dangle,
                s.f_rand,
                s.cg_max(),
                s.seconds
            ));
        }
        out
    }
}

/// Outcome of a march: `model` is None when marching failed (f_rand exhausted
/// while the least squares kept blowing up); the trace always covers every
/// attempt either way.
#[derive(Debug)]
pub struct MarchRun {
    pub model: Option<VolumeModel>,
    pub failure: Option<String>,
    pub trace: MarchTrace,
    /// Final accepted per-image assignments (empty on failure before any
    /// accepted match).
    pub assignments: Vec<Assignment>,
}

/// Mean absolute circular difference over images and the three angles.
pub fn mean_angle_change(a: &[Orientation], b: &[Orientation]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::param("orientation set size mismatch"));
    }
    if a.is_empty() {
        return Err(Error::param("empty orientation sets"));
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            circular_distance(x.alpha, y.alpha)
                + circular_distance(x.beta, y.beta)
                + circular_distance(x.gamma, y.gamma)
        })
        .sum();
    Ok(total / (3 * a.len()) as f64)
}

fn initial_orientations(m: usize, grids: &Grids, cfg: &MarchConfig) -> Vec<Orientation> {
    let mut rng = stream(cfg.seed, StreamKind::MarchInit, 0, 0);
    if cfg.continuous_init {
        (0..m).map(|_| sample_orientation(&mut rng)).collect()
    } else {
        let thetas = &grids.sphere.thetas;
        let phis = &grids.sphere.phis;
        (0..m)
            .map(|_| {
                let i = rng.gen_range(0..thetas.len());
                let j = rng.gen_range(0..phis.len());
                let t = rng.gen_range(0..phis.len());
                Orientation { alpha: thetas[i], beta: phis[j], gamma: phis[t] }
            })
            .collect()
    }
}

fn solve_failed(stats: &[ShellStats], cfg: &MarchConfig) -> bool {
    stats
        .iter()
        .any(|s| s.iterations >= cfg.cg_double_at && s.residual > cfg.solve.tol)
}

fn solve_calm(stats: &[ShellStats], cfg: &MarchConfig) -> bool {
    stats.iter().all(|s| s.iterations < cfg.cg_halve_below)
}

/// Run the frequency march over all shells of `grids`.
pub fn frequency_march(
    polars: &[PolarImage],
    ctfs: &[Ctf],
    grids: &Grids,
    cfg: &MarchConfig,
) -> Result<MarchRun> {
    let m = polars.len();
    if m == 0 {
        return Err(Error::param("march needs at least one image"));
    }
    if ctfs.len() != m {
        return Err(Error::param("polar/ctf count mismatch"));
    }
    let ks = &grids.radial.k_values;
    let nr = ks.len();
    let mut qc = ks
        .iter()
        .take_while(|&&k| k <= cfg.k1 + 1e-9)
        .count();
    if qc == 0 {
        return Err(Error::param("k1 below the first shell"));
    }
    qc -= 1;
    if cfg.skip_stride == 0 || cfg.coarse_factor == 0 {
        return Err(Error::param("strides must be >= 1"));
    }

    let mut trace = MarchTrace::default();
    let mut oris = initial_orientations(m, grids, cfg);
    let mut f_rand = cfg.f_rand_init;

    // initial solve on [0, k1] from the random assignments
    let t0 = Instant::now();
    let (mut model, stats) =
        solve_all_shells(polars, &oris, ctfs, grids, ks[qc], &cfg.solve)?;
    trace.steps.push(StepRecord {
        step: 0,
        k: ks[qc],
        mean_dangle: f64::NAN,
        f_rand,
        cg_iters: stats.iter().map(|s| s.iterations).collect(),
        seconds: t0.elapsed().as_secs_f64(),
        accepted: true,
    });

    let mut assignments: Vec<Assignment> = Vec::new();
    let mut step = 0usize;
    let max_attempts = 10 * nr + 20;
    while qc < nr - 1 {
        step += 1;
        if step > max_attempts {
            return Ok(MarchRun {
                model: None,
                failure: Some(format!("march exceeded {max_attempts} attempts")),
                trace,
                assignments,
            });
        }
        let t0 = Instant::now();
        let k_cur = ks[qc];
        let bank = generate_templates(&model, grids, k_cur)?;
        let mcfg = MatchConfig {
            f_rand,
            coarse_factor: cfg.coarse_factor,
            k_upper: k_cur,
        };
        let new_assign = match_all(polars, ctfs, &bank, &mcfg, grids, cfg.seed, step as u64)?;
        let new_oris: Vec<Orientation> = new_assign.iter().map(|a| a.orientation).collect();
        let dangle = mean_angle_change(&oris, &new_oris)?;
        let stride = if dangle < cfg.angle_change_threshold {
            cfg.skip_stride
        } else {
            1
        };
        let q_next = (qc + stride).min(nr - 1);
        let (new_model, stats) =
            solve_all_shells(polars, &new_oris, ctfs, grids, ks[q_next], &cfg.solve)?;
        let failed = solve_failed(&stats, cfg);
        trace.steps.push(StepRecord {
            step,
            k: ks[q_next],
            mean_dangle: dangle,
            f_rand,
            cg_iters: stats.iter().map(|s| s.iterations).collect(),
            seconds: t0.elapsed().as_secs_f64(),
            accepted: !failed,
        });
        if failed {
            if f_rand >= cfg.f_rand_cap {
                return Ok(MarchRun {
                    model: None,
                    failure: Some(format!(
                        "least squares failed to converge at k={:.1} with f_rand at cap {}",
                        ks[q_next], cfg.f_rand_cap
                    )),
                    trace,
                    assignments,
                });
            }
            f_rand = (2.0 * f_rand).min(cfg.f_rand_cap);
            continue;
        }
        if solve_calm(&stats, cfg) {
            f_rand = (0.5 * f_rand).max(cfg.f_rand_floor);
        }
        model = new_model;
        oris = new_oris;
        assignments = new_assign;
        qc = q_next;
    }
    Ok(MarchRun {
        model: Some(model),
        failure: None,
        trace,
        assignments,
    })
}

/// Reconstruction from the stack's stored true orientations: the
/// best-achievable model given discretization and noise.
pub fn known_angles_baseline(
    stack: &Stack,
    grids: &Grids,
    cfg: &SolveConfig,
) -> Result<(VolumeModel, Vec<ShellStats>)> {
    if !stack.has_orientations() {
        return Err(Error::param("stack carries no true orientations"));
    }
    let oris: Vec<Orientation> = stack
        .images
        .iter()
        .map(|img| img.orientation.unwrap())
        .collect();
    let (polars, ctfs) = stack_to_polars(stack, grids)?;
    solve_all_shells(&polars, &oris, &ctfs, grids, grids.radial.kmax, cfg)
}

/// Classical fixed-band refinement: n_iters + 1 rounds of full-band matching
/// against the current model followed by a full-band least squares.
pub fn classical_refinement(
    polars: &[PolarImage],
    ctfs: &[Ctf],
    grids: &Grids,
    init_model: &VolumeModel,
    n_iters: usize,
    coarse_factor: usize,
    scfg: &SolveConfig,
    seed: u64,
) -> Result<(VolumeModel, Vec<Assignment>)> {
    if polars.is_empty() {
        return Err(Error::param("refinement needs at least one image"));
    }
    let kmax = grids.radial.kmax;
    let mcfg = MatchConfig { f_rand: 0.0, coarse_factor, k_upper: kmax };
    let mut model = init_model.clone();
    let mut assignments = Vec::new();
    for it in 0..=n_iters {
        let bank = generate_templates(&model, grids, kmax)?;
        assignments = match_all(polars, ctfs, &bank, &mcfg, grids, seed, it as u64)?;
        let oris: Vec<Orientation> = assignments.iter().map(|a| a.orientation).collect();
        let (new_model, _) = solve_all_shells(polars, &oris, ctfs, grids, kmax, scfg)?;
        model = new_model;
    }
    Ok((model, assignments))
}
