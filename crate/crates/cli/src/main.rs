//! Command-line pipeline driver: phantom construction, image simulation,
//! frequency-marching reconstruction, known-angles baseline, and evaluation
//! against ground truth. Every subcommand prints its resolved configuration
//! as "key: value" lines before running; exit code is zero only when all
//! requested outputs were written.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fourmarch::evaluate::evaluate_reconstruction;
use fourmarch::grid::build_grids;
use fourmarch::image::{min_npix, simulate_stack, stack_to_polars};
use fourmarch::io::{read_model, read_stack, write_cube, write_model, write_stack};
use fourmarch::march::{frequency_march, known_angles_baseline, MarchConfig};
use fourmarch::phantom::{parse_pdb, build_truth_model, PhantomSpec};
use fourmarch::reconstruct::SolveConfig;
use std::fmt::Display;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "fourmarch",
    version,
    about = "Single-particle reconstruction by frequency marching"
)]
struct Cli {
    /// Worker threads (default: all cores; 1 gives bit-reproducible output)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a Gaussian-sum ground-truth model from a PDB file
    Phantom(PhantomArgs),
    /// Simulate a particle stack from a model
    Simulate(SimulateArgs),
    /// Reconstruct a model from a stack by frequency marching
    Reconstruct(ReconstructArgs),
    /// Reconstruct using the true orientations stored in the stack
    Baseline(BaselineArgs),
    /// Align a reconstruction to ground truth and report the relative error
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// PDB file with ATOM/HETATM records
    #[arg(long)]
    pdb: PathBuf,
    /// Box scale in Angstrom per numerical unit
    #[arg(long = "D")]
    d: f64,
    /// Blur radius b in Angstrom
    #[arg(long)]
    blur: f64,
    #[arg(long, default_value_t = 70.0)]
    kmax: f64,
    #[arg(long, default_value_t = 2.0)]
    dk: f64,
    /// Output model path ("FMC1")
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Input model path ("FMC1")
    #[arg(long)]
    model: PathBuf,
    /// Number of images
    #[arg(long = "M")]
    m: usize,
    /// Signal-to-noise ratio, a positive number or "inf"
    #[arg(long, value_parser = parse_snr)]
    snr: f64,
    #[arg(long, default_value_t = 100)]
    npix: usize,
    /// Box scale in Angstrom per numerical unit (sets the CTF pixel scale)
    #[arg(long = "D")]
    d: f64,
    /// Mandatory RNG seed; all randomness in the stack flows from it
    #[arg(long)]
    seed: u64,
    /// Disable the per-image contrast transfer function
    #[arg(long)]
    no_ctf: bool,
    /// Output stack path ("FMS1")
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Input stack path ("FMS1")
    #[arg(long)]
    stack: PathBuf,
    #[arg(long, default_value_t = 70.0)]
    kmax: f64,
    #[arg(long, default_value_t = 2.0)]
    dk: f64,
    /// Initial randomization parameter for matching
    #[arg(long, default_value_t = 0.02)]
    frand: f64,
    /// Mandatory RNG seed for initial assignments and match randomization
    #[arg(long)]
    seed: u64,
    /// Output model path ("FMC1")
    #[arg(long)]
    out: PathBuf,
    /// Output marching trace path (text, one line per least-squares solve)
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    /// Input stack path ("FMS1"); must carry true orientations
    #[arg(long)]
    stack: PathBuf,
    #[arg(long, default_value_t = 70.0)]
    kmax: f64,
    #[arg(long, default_value_t = 2.0)]
    dk: f64,
    /// Output model path ("FMC1")
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reconstruction model path ("FMC1")
    #[arg(long)]
    recon: PathBuf,
    /// Ground-truth model path ("FMC1")
    #[arg(long)]
    truth: PathBuf,
    /// Cartesian grid resolution for the error quadrature
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Box scale in Angstrom per numerical unit (cube metadata only)
    #[arg(long = "D", default_value_t = 60.0)]
    d: f64,
    /// Number of probe projections for the global alignment
    #[arg(long, default_value_t = 10)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip global alignment and compare as-is
    #[arg(long)]
    no_align: bool,
    /// Optional aligned-reconstruction cube dump ("FMV1")
    #[arg(long)]
    dump_aligned: Option<PathBuf>,
    /// Optional ground-truth cube dump ("FMV1")
    #[arg(long)]
    dump_truth: Option<PathBuf>,
}

fn parse_snr(s: &str) -> std::result::Result<f64, String> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(f64::INFINITY);
    }
    let v: f64 = s.parse().map_err(|_| format!("bad snr `{s}`"))?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err("snr must be positive or `inf`".into())
    }
}

fn kv(key: &str, value: impl Display) {
    println!("{key}: {value}");
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool setup failed")?;
    }
    kv("threads", cli.threads.map_or_else(|| "auto".into(), |n| n.to_string()));
    match cli.cmd {
        Cmd::Phantom(a) => cmd_phantom(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Reconstruct(a) => cmd_reconstruct(a),
        Cmd::Baseline(a) => cmd_baseline(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
    }
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    kv("subcommand", "phantom");
    kv("pdb", a.pdb.display());
    kv("D", a.d);
    kv("blur", a.blur);
    kv("kmax", a.kmax);
    kv("dk", a.dk);
    kv("out", a.out.display());
    let text = std::fs::read_to_string(&a.pdb)
        .with_context(|| format!("cannot read PDB file {}", a.pdb.display()))?;
    let (atoms, warnings) = parse_pdb(&text)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    kv("atoms", atoms.count());
    let spec = PhantomSpec::new(atoms, a.d, a.blur)?;
    let grids = build_grids(a.kmax, a.dk, 1.2)?;
    kv("shells", grids.radial.nr());
    kv("ntheta", grids.sphere.ntheta);
    kv("nphi", grids.sphere.nphi);
    let model = build_truth_model(&spec, &grids)?;
    write_model(&a.out, &model)
        .with_context(|| format!("cannot write model {}", a.out.display()))?;
    kv("written", a.out.display());
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    kv("subcommand", "simulate");
    kv("model", a.model.display());
    kv("M", a.m);
    kv("snr", a.snr);
    kv("npix", a.npix);
    kv("D", a.d);
    kv("seed", a.seed);
    kv("ctf", !a.no_ctf);
    kv("out", a.out.display());
    let model = read_model(&a.model)
        .with_context(|| format!("cannot read model {}", a.model.display()))?;
    let grids = build_grids(model.kmax(), model.dk(), 1.2)?;
    if a.npix < min_npix(model.kmax()) {
        bail!(
            "npix {} under-resolves kmax {} (need >= {})",
            a.npix,
            model.kmax(),
            min_npix(model.kmax())
        );
    }
    let stack = simulate_stack(&model, &grids, a.d, a.m, a.snr, a.npix, a.seed, !a.no_ctf)?;
    write_stack(&a.out, &stack)
        .with_context(|| format!("cannot write stack {}", a.out.display()))?;
    kv("written", a.out.display());
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    kv("subcommand", "reconstruct");
    kv("stack", a.stack.display());
    kv("kmax", a.kmax);
    kv("dk", a.dk);
    kv("frand", a.frand);
    kv("seed", a.seed);
    kv("out", a.out.display());
    if let Some(t) = &a.trace {
        kv("trace", t.display());
    }
    let stack = read_stack(&a.stack)
        .with_context(|| format!("cannot read stack {}", a.stack.display()))?;
    kv("images", stack.images.len());
    let grids = build_grids(a.kmax, a.dk, 1.2)?;
    let (polars, ctfs) = stack_to_polars(&stack, &grids)?;
    let cfg = MarchConfig {
        f_rand_init: a.frand,
        seed: a.seed,
        ..MarchConfig::default()
    };
    let run = frequency_march(&polars, &ctfs, &grids, &cfg)?;
    if let Some(t) = &a.trace {
        std::fs::write(t, run.trace.render())
            .with_context(|| format!("cannot write trace {}", t.display()))?;
        kv("written", t.display());
    }
    kv("steps", run.trace.steps.len());
    match (run.model, run.failure) {
        (Some(model), None) => {
            write_model(&a.out, &model)
                .with_context(|| format!("cannot write model {}", a.out.display()))?;
            kv("written", a.out.display());
            Ok(())
        }
        (_, failure) => bail!(
            "marching failed: {}",
            failure.unwrap_or_else(|| "unknown".into())
        ),
    }
}

fn cmd_baseline(a: BaselineArgs) -> Result<()> {
    kv("subcommand", "baseline");
    kv("stack", a.stack.display());
    kv("kmax", a.kmax);
    kv("dk", a.dk);
    kv("out", a.out.display());
    let stack = read_stack(&a.stack)
        .with_context(|| format!("cannot read stack {}", a.stack.display()))?;
    kv("images", stack.images.len());
    if !stack.has_orientations() {
        bail!("true orientations absent from stack");
    }
    let grids = build_grids(a.kmax, a.dk, 1.2)?;
    let (model, stats) = known_angles_baseline(&stack, &grids, &SolveConfig::default())?;
    let worst = stats.iter().map(|s| s.iterations).max().unwrap_or(0);
    kv("cg_max", worst);
    write_model(&a.out, &model)
        .with_context(|| format!("cannot write model {}", a.out.display()))?;
    kv("written", a.out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    kv("subcommand", "evaluate");
    kv("recon", a.recon.display());
    kv("truth", a.truth.display());
    kv("n", a.n);
    kv("D", a.d);
    kv("probes", a.probes);
    kv("seed", a.seed);
    kv("align", !a.no_align);
    let recon = read_model(&a.recon)
        .with_context(|| format!("cannot read model {}", a.recon.display()))?;
    let truth = read_model(&a.truth)
        .with_context(|| format!("cannot read model {}", a.truth.display()))?;
    let grids = build_grids(truth.kmax(), truth.dk(), 1.2)?;
    let ev = evaluate_reconstruction(
        &recon,
        &truth,
        &grids,
        a.n,
        a.d,
        a.probes,
        a.seed,
        !a.no_align,
    )?;
    print!("{}", ev.report.render());
    if let Some(p) = &a.dump_aligned {
        write_cube(p, &ev.aligned)
            .with_context(|| format!("cannot write cube {}", p.display()))?;
        kv("written", p.display());
    }
    if let Some(p) = &a.dump_truth {
        write_cube(p, &ev.reference)
            .with_context(|| format!("cannot write cube {}", p.display()))?;
        kv("written", p.display());
    }
    Ok(())
}
