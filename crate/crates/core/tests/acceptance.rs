//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

mod support;

use std::path::{Path, PathBuf};
use std::time::Instant;

use dije::estimator::kf_update_pixel;
use dije::experiment::{run_experiment, ExperimentConfig, RunReport};
use dije::flow::FlowField;
use dije::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HAND_TOL: f64 = 1e-12;
const HOSODA_TOL: f64 = 1e-12;
const DIAGONAL_KF_TOL: f64 = 1e-10;
const FD_TOL_PER_PPM: f64 = 1e-6;
const JACOBIAN_ERROR_MAX: f64 = 0.15;
const CONVERGENCE_RUNTIME_S: f64 = 60.0;
const LEAK_FP_MAX: f64 = 0.05;
const LEAK_WINDOW: usize = 100;
const IOU_MIN: f64 = 0.5;
const IOU_WARMUP: u64 = 150;
const IOU_TIP_MOTION: f64 = 0.5;
const REACH_PX: f64 = 3.0;
const REACH_LK_PX: f64 = 5.0;
const TRANSLATION_MEDIAN_PX: f64 = 0.25;

struct Outcome {
    passed: usize,
    failed: Vec<String>,
}

impl Outcome {
    fn line(&mut self, id: &str, ok: bool, detail: String) {
        println!("{} {id}: {detail}", if ok { "PASS" } else { "FAIL" });
        if ok {
            self.passed += 1;
        } else {
            self.failed.push(id.to_owned());
        }
    }
}

fn config(name: &str) -> ExperimentConfig {
    let path: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.json"));
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn run_in_pool(cfg: &ExperimentConfig, threads: usize) -> RunReport {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(|| run_experiment(cfg))
        .unwrap_or_else(|e| panic!("{}: {e}", cfg.name))
}

fn hand_case() -> (bool, String) {
    let (mut jac, mut var) = (vec![0.0, 0.0], vec![1.0]);
    kf_update_pixel(&mut jac, &mut var, &[1.0], [1.0, 0.0], 1.0);
    let err = (jac[0] - 0.5)
        .abs()
        .max(jac[1].abs())
        .max((var[0] - 0.5).abs());
    (
        err <= HAND_TOL,
        format!(
            "J = [{}, {}], p = {}, max error {err:e}",
            jac[0], jac[1], var[0]
        ),
    )
}

fn hosoda_cases() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=4);
        let jac: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..2.0)).collect();
        let qdot: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
        let u = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let rho = rng.random_range(0.1..3.0);
        let h = hosoda_update(&jac, &JointSample::new(qdot.clone()).unwrap(), u, &w, rho);
        let (mut k, mut var) = (jac.clone(), w.clone());
        kf_update_pixel(&mut k, &mut var, &qdot, u, rho);
        for (a, b) in h.iter().zip(&k) {
            worst = worst.max((a - b).abs());
        }
    }
    (
        worst <= HOSODA_TOL,
        format!("200 cases, max |dJ difference| {worst:e}"),
    )
}

fn diagonal_kf() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = GridShape::new(2, 2).unwrap();
    let mut worst = 0.0f64;
    for n in 1..=4 {
        let noise = NoiseParams::new(1e-3, 0.5).unwrap();
        let cfg = DijeConfig {
            noise,
            ..Default::default()
        };
        let mut field = init_field(shape, n).unwrap();
        let (mut jac, mut var) = (vec![0.0; 2 * n], vec![1.0; n]);
        for _ in 0..100 {
            let qdot: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            let u = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            field = dije_step(
                &field,
                &JointSample::new(qdot.clone()).unwrap(),
                &FlowField::constant(shape, u),
                &cfg,
            )
            .unwrap();
            (jac, var) = support::full_kf_step(&jac, &var, &qdot, u, noise.q_process, noise.r_obs);
            for (a, b) in field
                .jac(0)
                .iter()
                .zip(&jac)
                .chain(field.var(0).iter().zip(&var))
            {
                worst = worst.max((a - b).abs());
            }
        }
    }
    (
        worst <= DIAGONAL_KF_TOL,
        format!("N = 1..4, 100 steps each, max deviation {worst:e}"),
    )
}

fn jacobian_oracle() -> (bool, String) {
    let ppm = 200.0;
    let cam = CameraModel::new(
        ppm,
        PixelCoord::new(20.0, 100.0),
        GridShape::new(160, 120).unwrap(),
    )
    .unwrap();
    let scene =
        |n: usize, q: Vec<f64>| ArmScene::new(ArmModel::uniform(n, 0.25, 0.06), q, cam).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let delta = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let attach = Attachment {
            link: rng.random_range(0..n),
            offset: rng.random_range(0.0..=0.25),
        };
        let j = scene(n, q.clone()).analytic_jacobian(attach).unwrap();
        for m in 0..n {
            let (mut plus, mut minus) = (q.clone(), q.clone());
            plus[m] += delta;
            minus[m] -= delta;
            let a = scene(n, plus).forward_points(attach).unwrap();
            let b = scene(n, minus).forward_points(attach).unwrap();
            worst = worst
                .max(((a.x - b.x) / (2.0 * delta) - j[(0, m)]).abs())
                .max(((a.y - b.y) / (2.0 * delta) - j[(1, m)]).abs());
        }
    }
    let tol = FD_TOL_PER_PPM * ppm;
    (
        worst <= tol,
        format!("100 samples, max error {worst:.3e} px/rad (limit {tol:.1e})"),
    )
}

fn synthetic_translations() -> (bool, String) {
    let shape = GridShape::new(96, 72).unwrap();
    let mut worst = 0.0f64;
    for d in [[1.0, 0.0], [0.0, 1.0], [-2.0, 1.0], [3.0, -2.0]] {
        let prev = Frame::from_fn(shape, 0, |p| support::texture(p.x, p.y)).unwrap();
        let curr = Frame::from_fn(shape, 1, |p| support::texture(p.x - d[0], p.y - d[1])).unwrap();
        worst = worst.max(support::translation_error(&prev, &curr, d, 8));
    }
    (
        worst < TRANSLATION_MEDIAN_PX,
        format!("worst median error {worst:.4} px over 4 shifts"),
    )
}

fn mean_iou(report: &RunReport) -> f64 {
    let v: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.frame > IOU_WARMUP && r.tip_motion_px >= IOU_TIP_MOTION && r.iou.is_finite())
        .map(|r| r.iou)
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn deadline_errors(report: &RunReport) -> Vec<f64> {
    report.deadlines.iter().map(|d| d.tracked_px).collect()
}

fn main() {
    let mut out = Outcome {
        passed: 0,
        failed: Vec::new(),
    };

    let (ok, d) = hand_case();
    out.line("1 scalar KF hand case", ok, d);
    let (ok, d) = hosoda_cases();
    out.line("2 Hosoda equivalence", ok, d);
    let (ok, d) = diagonal_kf();
    out.line("3 diagonal-KF oracle", ok, d);
    let (ok, d) = jacobian_oracle();
    out.line("4 Jacobian oracle", ok, d);

    // Closed-loop runs; their report CSVs feed the determinism check.
    let names = [
        "convergence",
        "leakout",
        "leakout-observed",
        "selfmask",
        "reaching",
        "flow-estimator",
    ];
    let mut reports = Vec::new();
    for name in names {
        let cfg = config(name);
        let t = Instant::now();
        let report = run_in_pool(&cfg, 1);
        reports.push((cfg, report, t.elapsed().as_secs_f64()));
    }
    let report = |name: &str| &reports[names.iter().position(|n| *n == name).unwrap()];

    let (_, conv, secs) = report("convergence");
    let err = conv.final_jacobian_error;
    out.line(
        "5 convergence",
        err < JACOBIAN_ERROR_MAX && *secs < CONVERGENCE_RUNTIME_S,
        format!("median relative error {err:.4} (limit {JACOBIAN_ERROR_MAX}), {secs:.1} s on one thread"),
    );

    let fp = |name: &str| {
        report(name)
            .1
            .tail_mean(LEAK_WINDOW, |r| r.distractor_fp_fraction)
    };
    let (pred, obs) = (fp("leakout"), fp("leakout-observed"));
    out.line(
        "6 leak-out",
        pred < LEAK_FP_MAX && pred < obs,
        format!("distractor false positives: predicted {pred:.4}, observed {obs:.4} (limit {LEAK_FP_MAX})"),
    );

    let iou = mean_iou(&report("selfmask").1);
    out.line(
        "7 self-mask IoU",
        iou >= IOU_MIN,
        format!("mean IoU {iou:.3} (min {IOU_MIN})"),
    );

    let reach = deadline_errors(&report("reaching").1);
    out.line(
        "8 reaching",
        reach.len() == 2 && reach.iter().all(|e| *e < REACH_PX),
        format!("deadline errors {reach:.3?} px (limit {REACH_PX})"),
    );

    let (ok_t, d_t) = synthetic_translations();
    let lk = deadline_errors(&report("flow-estimator").1);
    let ok_lk = lk.len() == 2 && lk.iter().all(|e| *e < REACH_LK_PX);
    out.line(
        "9 flow estimator",
        ok_t && ok_lk,
        format!("{d_t}; closed-loop deadline errors {lk:.3?} px (limit {REACH_LK_PX})"),
    );

    let mut mismatched = Vec::new();
    for (cfg, first, _) in &reports {
        let csv = first.report_csv();
        if run_in_pool(cfg, 1).report_csv() != csv || run_in_pool(cfg, 4).report_csv() != csv {
            mismatched.push(cfg.name.clone());
        }
    }
    out.line(
        "10 determinism",
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!(
                "{} runs bit-identical when repeated and on 1 and 4 workers",
                reports.len()
            )
        } else {
            format!("report differs for {mismatched:?}")
        },
    );

    let checks = [
        ("variance monotonicity", support::variance_monotonicity()),
        ("eval simplex", support::eval_simplex()),
        ("interpolation bounds", support::interpolation_bounds()),
        ("zero-excitation no-op", support::zero_excitation_noop()),
    ];
    let failures: Vec<String> = checks
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    out.line(
        "11 invariant suite",
        failures.is_empty(),
        if failures.is_empty() {
            format!("4 properties x {} cases, no failures", support::CASES)
        } else {
            failures.join("; ")
        },
    );

    println!("{} passed, {} failed", out.passed, out.failed.len());
    if !out.failed.is_empty() {
        std::process::exit(1);
    }
}
