//! Acceptance checks. Runs as a plain binary and prints one PASS/FAIL line
//! per criterion; exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use wavefield_doe::estimation::{Estimator, EstimatorOptions, JacobianMode, StopReason};
use wavefield_doe::experiment::{cmd_twin, Experiment, ExperimentConfig, Seeds};
use wavefield_doe::forward::{
    arrival_time_difference, BandpassSpec, ForwardModel, FrequencyGrid, ReferenceModel, WaveKind,
};
use wavefield_doe::harness::LinearModel;
use wavefield_doe::model::{perturb_true_parameters, PerturbationSpec, Scenario, TruthPerturbation};
use wavefield_doe::rng::Stream;
use wavefield_doe::selection::{brute_force_select, greedy_select, Candidates};
use wavefield_doe::sensitivity::build_sensitivity;

type Outcome = (bool, String);

fn round_sig(x: f64, digits: i32) -> f64 {
    let mag = 10f64.powi(digits - 1 - x.abs().log10().floor() as i32);
    (x * mag).round() / mag
}

fn arrival_times() -> Outcome {
    let layers = Scenario::kanto_layers();
    let cases = [
        (1, WaveKind::P, 0.0444),
        (1, WaveKind::S, 0.160),
        (2, WaveKind::P, 0.0916),
        (2, WaveKind::S, 0.220),
        (3, WaveKind::P, 0.0625),
        (3, WaveKind::S, 0.118),
    ];
    let mut ok = true;
    let mut got = Vec::new();
    for (layer, kind, want) in cases {
        let l = &layers.layers[layer - 1];
        let v = match kind {
            WaveKind::P => l.vp,
            WaveKind::S => l.vs,
        };
        let dt = arrival_time_difference(&layers, layer, kind, 0.1 * v).unwrap();
        let r = round_sig(dt, 3);
        let hit = (r - want).abs() <= 1e-12 * want;
        ok &= hit;
        got.push(if hit { format!("{dt:.6}") } else { format!("{dt:.6} (rounds to {r}, expected {want})") });
    }
    (ok, format!("[{}] s", got.join(", ")))
}

/// `det(A)` of a 3x3 matrix by cofactor expansion.
fn det3(a: &DMatrix<f64>) -> f64 {
    a[(0, 0)] * (a[(1, 1)] * a[(2, 2)] - a[(1, 2)] * a[(2, 1)])
        - a[(0, 1)] * (a[(1, 0)] * a[(2, 2)] - a[(1, 2)] * a[(2, 0)])
        + a[(0, 2)] * (a[(1, 0)] * a[(2, 1)] - a[(1, 1)] * a[(2, 0)])
}

fn greedy_vs_oracle() -> Outcome {
    let (n, s, r, p) = (8, 4, 3, 3);
    let mut worst = f64::INFINITY;
    let mut first_ok = 0;
    for trial in 0..30u64 {
        let stream = Stream::new(trial, "acceptance-candidates", 0);
        let d = DMatrix::from_fn(n * s, r, |i, j| stream.normal((i * r + j) as u64));
        let c = Candidates::new(&d, s).unwrap();
        let eps = 1e-6;
        let g = greedy_select(&c, p, eps).unwrap();
        let b = brute_force_select(&c, p, eps).unwrap();
        let gv = *g.objective_trace.last().unwrap();
        let bv = *b.objective_trace.last().unwrap();
        worst = worst.min(gv / bv);
        // Single-site objective from the block directly.
        let single = |j: usize| {
            let w = d.rows(j * s, s).into_owned();
            det3(&(w.transpose() * &w + DMatrix::identity(r, r) * eps))
        };
        let best = (0..n).fold(0, |a, j| if single(j) > single(a) { j } else { a });
        first_ok += usize::from(g.selected[0] == best);
    }
    (worst >= 0.9 && first_ok == 30, format!("worst ratio {worst:.4}, first pick matched {first_ok}/30"))
}

fn default_sensitivity(pspec: &PerturbationSpec) -> wavefield_doe::sensitivity::SensitivityMatrix {
    build_sensitivity(
        &ReferenceModel::default(),
        &Scenario::hypocenter1(),
        &FrequencyGrid::default(),
        Some(BandpassSpec::default()),
        pspec,
    )
    .unwrap()
}

fn objective_monotone() -> Outcome {
    let sm = default_sensitivity(&PerturbationSpec::default());
    let c = Candidates::from_sensitivity(&sm).unwrap();
    let g = greedy_select(&c, 50, c.default_epsilon()).unwrap();
    let mut worst = f64::INFINITY;
    for w in g.objective_trace.windows(2) {
        worst = worst.min((w[1] - w[0]) / w[0].abs());
    }
    (worst >= -1e-12 && g.selected.len() == 50, format!("min relative step {worst:e}"))
}

fn fd_convergence() -> Outcome {
    let base = PerturbationSpec::default();
    let d1 = default_sensitivity(&base).normalized;
    let d2 = default_sensitivity(&base.scaled(0.5)).normalized;
    let d4 = default_sensitivity(&base.scaled(0.25)).normalized;
    let mut worst: f64 = 0.0;
    for k in 0..9 {
        let num = (d2.column(k) - d4.column(k)).norm();
        let den = (d1.column(k) - d4.column(k)).norm();
        worst = worst.max(num / den);
    }
    (worst <= 0.3, format!("max ratio over structure columns {worst:.4}"))
}

fn twin_self_consistency() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for seed in 1..=3u64 {
        let mut c = ExperimentConfig::preset("hypocenter1", Seeds { truth: seed, noise: seed, baseline: seed });
        c.selection.p = 50;
        c.noise_variance = 0.0;
        c.truth_perturbation = TruthPerturbation { structure_fraction: 0.01, location_km: 0.5 };
        c.estimator.jacobian_mode = JacobianMode::Refresh;
        let x = Experiment::new(c, Scenario::hypocenter1()).unwrap();
        let out = x.twin().unwrap();
        let it = out.trace.last().iteration;
        ok &= out.final_error <= 1e-3 && it <= 20;
        detail.push(format!("seed {seed}: eps {:.2e} in {it} it", out.final_error));
    }

    // Linear harness: one step to the exact answer in either mode.
    let grid = FrequencyGrid::new(4, 1.0).unwrap();
    let base = Scenario::hypocenter1();
    let s = Stream::new(5, "acceptance-harness", 0);
    let model = LinearModel::from_fn(grid, &base.stations, |j, r, c| s.normal((j * 24 * 12 + r * 12 + c) as u64));
    let truth = perturb_true_parameters(&base.parameters().unwrap(), TruthPerturbation::default(), 9).unwrap();
    let t = base.with_parameters(&truth).unwrap();
    let field = model.simulate(&t.layer_model(), &t.source, &t.stations, &grid).unwrap();
    let sites: Vec<usize> = (0..50).collect();
    for mode in [JacobianMode::Refresh, JacobianMode::Frozen] {
        let est = Estimator {
            forward: &model,
            grid,
            filter: None,
            options: EstimatorOptions { jacobian_mode: mode, ..Default::default() },
        };
        let tr = est.run(&base, &sites, &field, Some(&field)).unwrap();
        let it = tr.last().iteration;
        ok &= it == 1 && tr.reason == StopReason::Converged;
        detail.push(format!("harness {mode:?}: {it} it"));
    }
    (ok, detail.join("; "))
}

fn selection_benefit() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for seed in 1..=5u64 {
        let c = ExperimentConfig::preset("hypocenter1", Seeds { truth: seed, noise: seed, baseline: seed });
        let x = Experiment::new(c, Scenario::hypocenter1()).unwrap();
        let greedy = x.twin().unwrap().final_error;
        let (_, rows) = x.baseline().unwrap();
        let errs: Vec<f64> = rows.iter().filter_map(|r| r.outcome.as_ref().ok().map(|o| o.final_error)).collect();
        let failed = rows.len() - errs.len();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let pass = greedy <= mean;
        ok &= pass;
        detail.push(format!(
            "seed {seed}: greedy {greedy:.3} vs mean {mean:.3}{}",
            if failed > 0 { format!(" ({failed} failed)") } else { String::new() }
        ));
    }
    (ok, detail.join("; "))
}

fn filter_correctness() -> Outcome {
    let b = BandpassSpec::default();
    let target = std::f64::consts::FRAC_1_SQRT_2;
    let lo = (b.highpass_response(b.low).norm() - target).abs();
    let hi = (b.lowpass_response(b.high).norm() - target).abs();
    let db = |f: f64| 20.0 * b.response(f).norm().log10();
    let slope = db(2.0 * b.high) - db(4.0 * b.high);
    let rel = (slope - 12.0).abs() / 12.0;
    (
        lo <= 1e-12 && hi <= 1e-12 && rel <= 0.05,
        format!(
            "edge errors {lo:.1e}/{hi:.1e}, composite |H| at edges {:.6}/{:.6}, rolloff {slope:.3} dB/oct",
            b.response(b.low).norm(),
            b.response(b.high).norm()
        ),
    )
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let run = |threads: usize| {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::preset("hypocenter1", Seeds { truth: 2, noise: 3, baseline: 4 });
        c.output_dir = dir.path().to_path_buf();
        let x = Experiment::new(c, Scenario::hypocenter1()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| cmd_twin(&x)).unwrap();
        (tree(dir.path()), dir)
    };
    let (a, _da) = run(1);
    let (b, _db) = run(8);
    let (c, _dc) = run(8);
    let same = a == b && b == c && !a.is_empty();
    (same, format!("{} files compared across 1 and 8 threads", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 arrival-time differences", arrival_times),
        ("2 greedy vs exhaustive", greedy_vs_oracle),
        ("3 objective monotonicity", objective_monotone),
        ("4 finite-difference convergence", fd_convergence),
        ("5 twin self-consistency", twin_self_consistency),
        ("6 selection benefit", selection_benefit),
        ("7 filter correctness", filter_correctness),
        ("8 determinism", determinism),
    ];
    let mut failures = 0;
    for (name, f) in criteria {
        let t0 = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failures += usize::from(!ok);
        println!(
            "{} criterion {name}: {detail} ({:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failures} failed", 8 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
