//! Invariant checks run by the `validate` subcommand.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{run_monte_carlo, Estimator, ExperimentConfig, NormSource};
use crate::baseline::procrustes_extract;
use crate::error::Result;
use crate::gabp::{bivariate_iteration, init_state, run_bivariate, GabpConfig, NoiseMode};
use crate::geometry::{
    apply_rigid_transform, linearization_constants, rotation_matrix_exact,
    rotation_matrix_small_angle, EulerAngles,
};
use crate::linsys::{build_param_system, build_position_system, CompositeNoiseStats, ParamSystem};
use crate::position::estimate_position_two_stage;
use crate::scenario::{sample_transform, simulate_ranges, GeneratorMode, GroundTruth, Scenario};
use crate::VARIANCE_FLOOR;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self {
            name,
            passed,
            detail,
        }
    }

    fn from_result(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

/// Closed-form posterior mean of the stacked linear-Gaussian model
/// `(HᵀR⁻¹H + P⁻¹)⁻¹HᵀR⁻¹z`, returned as `(θ, t)`.
pub fn dense_posterior_mean(
    sys: &ParamSystem,
    cfg: &GabpConfig,
) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let rows = sys.n_rows();
    let n0 = sys.row_noise_var.iter().sum::<f64>() / rows as f64;
    let mut info = DMatrix::<f64>::zeros(6, 6);
    let mut rhs = DVector::<f64>::zeros(6);
    for r in 0..rows {
        let var = match cfg.noise_mode {
            NoiseMode::PerRow => sys.row_noise_var[r],
            NoiseMode::Scalar => n0,
        }
        .max(VARIANCE_FLOOR);
        let h = DVector::from_iterator(6, sys.h_theta[r].iter().chain(sys.h_t[r].iter()).copied());
        info += &h * h.transpose() / var;
        rhs += &h * (sys.z[r] / var);
    }
    for k in 0..3 {
        info[(k, k)] += 1.0 / cfg.prior_var_theta;
        info[(k + 3, k + 3)] += 1.0 / cfg.prior_var_t;
    }
    let x = info.cholesky()?.solve(&rhs);
    Some((
        Vector3::new(x[0], x[1], x[2]),
        Vector3::new(x[3], x[4], x[5]),
    ))
}

/// Random dense system with unit-scale channel rows and noise variances in
/// `[0.5, 2]`.
pub fn random_toy_system<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> ParamSystem {
    let mut normal = || rng.sample::<f64, _>(StandardNormal);
    let h_theta: Vec<Vector3<f64>> = (0..rows)
        .map(|_| Vector3::new(normal(), normal(), normal()))
        .collect();
    let h_t: Vec<Vector3<f64>> = (0..rows)
        .map(|_| Vector3::new(normal(), normal(), normal()))
        .collect();
    let z: Vec<f64> = (0..rows).map(|_| 2.0 * normal()).collect();
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

/// Config that iterates the toy systems to a tight fixed point.
pub fn toy_config() -> GabpConfig {
    GabpConfig {
        lambda_max: 5000,
        rho: 0.5,
        prior_var_theta: 1.0,
        prior_var_t: 1.0,
        convergence_tol: 1e-13,
        ..GabpConfig::default()
    }
}

fn check_geometry(rng: &mut ChaCha8Rng) -> (bool, String) {
    let lin = linearization_constants();
    let mut worst_orth: f64 = 0.0;
    let mut worst_det: f64 = 0.0;
    let mut worst_vec: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..10_000 {
        let raw: Vector3<f64> = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let theta = raw * (rng.random_range(0.0..0.35) / raw.norm().max(1e-300));
        let angles = EulerAngles::from_vector(&theta);
        let q = rotation_matrix_exact(&angles);
        worst_orth = worst_orth.max(q.orthogonality_error());
        worst_det = worst_det.max((q.determinant() - 1.0).abs());
        let qsa = rotation_matrix_small_angle(&angles);
        worst_vec = worst_vec.max((qsa.vec() - (lin.gamma + lin.l * theta)).amax());
        let n2 = theta.norm_squared();
        if n2 > 0.0 {
            worst_ratio = worst_ratio.max((q.0 - qsa.0).norm() / (2.0 * n2));
        }
    }
    (
        worst_orth <= 1e-12 && worst_det <= 1e-12 && worst_vec == 0.0 && worst_ratio <= 1.0,
        format!("orth {worst_orth:.2e}, det {worst_det:.2e}, vec {worst_vec:.2e}, bound ratio {worst_ratio:.3}"),
    )
}

fn check_dense_oracle(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cfg = toy_config();
    let mut worst: f64 = 0.0;
    let mut unconverged = 0;
    for _ in 0..20 {
        let rows = rng.random_range(6..=16);
        let sys = random_toy_system(rows, rng);
        let (est, _) = run_bivariate(&sys, &cfg)?;
        unconverged += usize::from(!est.converged);
        let Some((th, t)) = dense_posterior_mean(&sys, &cfg) else {
            return Ok((false, "oracle solve failed".into()));
        };
        worst = worst
            .max((est.theta.as_vector() - th).amax())
            .max((est.t.0 - t).amax());
    }
    Ok((
        worst <= 1e-6,
        format!("max deviation {worst:.2e}, unconverged {unconverged}/20"),
    ))
}

fn check_noise_free(scenario: &Scenario, seed: u64) -> Result<(bool, String)> {
    let mut cfg = ExperimentConfig::new(scenario.clone());
    cfg.scenario.generator_mode = GeneratorMode::SmallAngleRotation;
    cfg.sigmas = vec![0.0];
    cfg.trials = 5;
    cfg.seed = seed;
    cfg.norm_source = NormSource::True;
    cfg.estimators = vec![Estimator::DoubleGabp];
    let report = run_monte_carlo(&cfg)?;
    let worst = report.rows.iter().map(|r| r.rmse).fold(0.0, f64::max);
    Ok((worst <= 1e-5, format!("max RMSE {worst:.2e}")))
}

fn check_variances(scenario: &Scenario, seed: u64) -> Result<(bool, String)> {
    let base = GabpConfig::from_prior(&scenario.prior);
    let mut checked = 0usize;
    for rho in [0.3, 0.5, 0.7] {
        let cfg = GabpConfig { rho, ..base };
        for (i, &sigma) in scenario.sigma_w.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1));
            let (angles, t) = sample_transform(&scenario.prior, &mut rng);
            let truth =
                GroundTruth::new(angles, t, &scenario.conformation, scenario.generator_mode);
            let ranges = simulate_ranges(&truth.positions, &scenario.anchors, sigma, &mut rng)?;
            let sys = build_param_system(
                &ranges,
                &scenario.anchors,
                &scenario.conformation,
                &truth.norms_squared(),
            )?;
            let mut state = init_state(&sys, &cfg);
            for _ in 0..cfg.lambda_max {
                state = bivariate_iteration(&state, &sys, &cfg)?;
                for block in [&state.theta, &state.t] {
                    let all_pos = block
                        .mse
                        .iter()
                        .chain(&block.cond_var)
                        .chain(&block.extrinsic_var)
                        .all(|v| v.iter().all(|x| *x > 0.0));
                    if !all_pos {
                        return Ok((
                            false,
                            format!("non-positive variance at rho {rho}, sigma {sigma}"),
                        ));
                    }
                }
            }
            checked += 1;
        }
    }
    Ok((true, format!("{checked} runs positive through lambda_max")))
}

fn check_procrustes(scenario: &Scenario, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_det: f64 = 0.0;
    let mut worst_exact: f64 = 0.0;
    let c = &scenario.conformation;
    for _ in 0..200 {
        let (angles, t) = sample_transform(&scenario.prior, &mut rng);
        let q = rotation_matrix_exact(&angles);
        let s = apply_rigid_transform(&q, &t, c);
        let exact = procrustes_extract(&s, c)?;
        worst_exact = worst_exact
            .max((exact.q_hat.0 - q.0).amax())
            .max((exact.t_hat.0 - t.0).amax());
        let noisy = s.map(|v| v + 2.0 * rng.sample::<f64, _>(StandardNormal));
        let est = procrustes_extract(&noisy, c)?;
        worst_det = worst_det.max((est.q_hat.determinant() - 1.0).abs());
    }
    Ok((
        worst_det <= 1e-9 && worst_exact <= 1e-9,
        format!("det deviation {worst_det:.2e}, noise-free error {worst_exact:.2e}"),
    ))
}

fn check_positions(scenario: &Scenario, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (angles, t) = sample_transform(&scenario.prior, &mut rng);
    let truth = GroundTruth::new(angles, t, &scenario.conformation, scenario.generator_mode);
    let ranges = simulate_ranges(&truth.positions, &scenario.anchors, 0.0, &mut rng)?;
    let mut worst: f64 = 0.0;
    for n in 0..truth.positions.ncols() {
        let sys = build_position_system(&ranges, &scenario.anchors, n)?;
        let noise = CompositeNoiseStats::from_ranges(&sys.measured_range, 0.0);
        let e = estimate_position_two_stage(&sys, &noise)?;
        worst = worst.max((e.s_hat - truth.positions.column(n)).amax());
    }
    Ok((worst <= 1e-6, format!("max position error {worst:.2e}")))
}

fn check_determinism(scenario: &Scenario, seed: u64) -> Result<(bool, String)> {
    let mut cfg = ExperimentConfig::new(scenario.clone());
    cfg.sigmas = scenario.sigma_w.iter().copied().take(2).collect();
    cfg.trials = 6;
    cfg.seed = seed;
    let a = run_monte_carlo(&cfg)?;
    let b = run_monte_carlo(&cfg)?;
    let identical = a.to_csv_string() == b.to_csv_string();
    let balanced = a
        .rows
        .iter()
        .all(|r| r.trials == cfg.trials && r.failures <= r.trials);
    Ok((
        identical && balanced,
        format!("identical csv {identical}, accounting balanced {balanced}"),
    ))
}

/// Runs every check on `scenario`. Deterministic for a given seed.
pub fn run_validation(scenario: &Scenario, seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = check_geometry(&mut rng);
    vec![
        CheckResult::new("geometry-invariants", geometry.0, geometry.1),
        CheckResult::from_result("gabp-dense-oracle", check_dense_oracle(&mut rng)),
        CheckResult::from_result("noise-free-exactness", check_noise_free(scenario, seed)),
        CheckResult::from_result("variance-positivity", check_variances(scenario, seed)),
        CheckResult::from_result("procrustes-rotation", check_procrustes(scenario, seed)),
        CheckResult::from_result("position-noise-free", check_positions(scenario, seed)),
        CheckResult::from_result("determinism-accounting", check_determinism(scenario, seed)),
    ]
}
