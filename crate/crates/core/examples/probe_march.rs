//! Transient diagnostic: reproduce the desk-scale march and print its trace.
//! Usage: probe_march <seed> [m=2000] [snr=0.1] [ctf=1] [frand=0.02]

use fourmarch::evaluate::{align_to_truth, relative_l2_error};
use fourmarch::grid::build_grids;
use fourmarch::image::{simulate_stack, stack_to_polars};
use fourmarch::march::{frequency_march, MarchConfig};
use fourmarch::model::synthesize_cube;
use fourmarch::phantom::{build_truth_model, eight_gaussian_spec};

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            for t in 0..3 {
                out[r][c] += a[r][t] * b[t][c];
            }
        }
    }
    out
}

fn transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[c][r];
        }
    }
    out
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let m: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let snr: f64 = args
        .get(3)
        .map(|s| if s == "inf" { f64::INFINITY } else { s.parse().unwrap() })
        .unwrap_or(0.1);
    let with_ctf: bool = args.get(4).map(|s| s != "0").unwrap_or(true);
    let frand: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.02);

    let spec = eight_gaussian_spec();
    let g = build_grids(30.0, 2.0, 1.2).unwrap();
    let truth = build_truth_model(&spec, &g).unwrap();
    let stack = simulate_stack(&truth, &g, spec.d, m, snr, 64, 800, with_ctf).unwrap();
    let true_oris: Vec<_> = stack.images.iter().map(|im| im.orientation.unwrap()).collect();
    let (polars, ctfs) = stack_to_polars(&stack, &g).unwrap();
    drop(stack);
    eprintln!("stack ready: M={m} snr={snr} ctf={with_ctf} seed={seed} frand={frand}");

    let cfg = MarchConfig { seed, f_rand_init: frand, ..MarchConfig::default() };
    let t = std::time::Instant::now();
    let run = frequency_march(&polars, &ctfs, &g, &cfg).unwrap();
    for s in &run.trace.steps {
        eprintln!(
            "step {:2} k={:4.0} dangle={:9.3e} frand={:9.3e} cg_max={:3} {:5.1}s accepted={}",
            s.step,
            s.k,
            s.mean_dangle,
            s.f_rand,
            s.cg_max(),
            s.seconds,
            s.accepted
        );
    }
    eprintln!("march wall {:.1}s failure={:?}", t.elapsed().as_secs_f64(), run.failure);

    // consensus of final assignments: tr(Mean^T Mean) over Q_i = Rhat_i R_true_i^T
    if run.assignments.len() == true_oris.len() && !run.assignments.is_empty() {
        let mut acc = [[0.0f64; 3]; 3];
        for (a, t) in run.assignments.iter().zip(&true_oris) {
            let q = mat_mul(&a.orientation.rotation_matrix(), &transpose(&t.rotation_matrix()));
            for r in 0..3 {
                for c in 0..3 {
                    acc[r][c] += q[r][c];
                }
            }
        }
        let n = true_oris.len() as f64;
        let mut tr = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                tr += (acc[r][c] / n) * (acc[r][c] / n);
            }
        }
        eprintln!("assignment consensus tr(M^T M) = {tr:.3} (3 locked, 0 random)");
        let mean_score: f64 =
            run.assignments.iter().map(|a| a.score).sum::<f64>() / n;
        eprintln!("mean final match score = {mean_score:.4}");
    }

    if let Some(model) = run.model {
        let out = align_to_truth(&model, &truth, &g, 10, 9000 + seed).unwrap();
        let (cube, _) = synthesize_cube(&out.model, &g, 100, spec.d).unwrap();
        let (tcube, _) = synthesize_cube(&truth, &g, 100, spec.d).unwrap();
        let eps = relative_l2_error(&cube, &tcube).unwrap();
        eprintln!("aligned epsilon vs truth cube = {eps:.4} mirrored={}", out.mirrored);
    }
}
