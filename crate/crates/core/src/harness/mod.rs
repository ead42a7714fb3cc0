//! Seeded Monte-Carlo sweeps over the range-noise level.
//!
//! Every trial draws its transform and noise from its own ChaCha8 stream
//! (seed fixed, stream = trial index). Trial `e` sees the same transform and
//! the same standard-normal noise at every σ, so the curves share common
//! random numbers. Trials run on the rayon pool when the `parallel` feature
//! is enabled; results are reduced in trial order either way, so the output
//! does not depend on scheduling.

mod report;
mod rmse;
pub mod validate;

pub use report::{
    emit_report, parse_csv, plot_script, ReportRow, RmseReport, CSV_FILE, CSV_HEADER, PLOT_FILE,
};
pub use rmse::{compute_rmse, rmse_from_sum};

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3xX, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baseline::procrustes_extract;
use crate::error::{RblError, Result};
use crate::gabp::{genie_bound, run_double_gabp, GabpConfig};
use crate::geometry::{apply_rigid_transform, wrap_degrees, EulerAngles, TranslationVector};
use crate::linsys::{build_param_system, build_position_system, CompositeNoiseStats};
use crate::position::{estimate_position_two_stage, PositionEstimate};
use crate::scenario::{sample_transform, simulate_ranges, GroundTruth, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Estimator {
    DoubleGabp,
    /// Bivariate stage of the double GaBP without the angle refinement.
    StageAGabp,
    LsProcrustes,
    Genie,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::DoubleGabp,
        Estimator::StageAGabp,
        Estimator::LsProcrustes,
        Estimator::Genie,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::DoubleGabp => "double-gabp",
            Estimator::StageAGabp => "stage-a-gabp",
            Estimator::LsProcrustes => "ls-procrustes",
            Estimator::Genie => "genie",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = RblError;
    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s.trim())
            .ok_or_else(|| RblError::Parse {
                what: "estimator".into(),
                reason: format!("unknown estimator `{s}`"),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    /// Angle errors in degrees.
    Rotation,
    /// Translation errors in meters.
    Translation,
    /// Errors of the implied sensor positions `Q(θ̂)·C + t̂`, stacked over
    /// all sensors, in meters. `Q` follows the scenario's generator model.
    Position,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::Rotation, Block::Translation, Block::Position];

    pub fn name(&self) -> &'static str {
        match self {
            Block::Rotation => "rotation",
            Block::Translation => "translation",
            Block::Position => "position",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Block {
    type Err = RblError;
    fn from_str(s: &str) -> Result<Self> {
        Block::ALL
            .into_iter()
            .find(|b| b.name() == s.trim())
            .ok_or_else(|| RblError::Parse {
                what: "block".into(),
                reason: format!("unknown block `{s}`"),
            })
    }
}

/// Where the sensor norms `‖sₙ‖²` in the parameter system come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormSource {
    True,
    #[default]
    Estimated,
}

impl FromStr for NormSource {
    type Err = RblError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "true" => Ok(NormSource::True),
            "estimated" => Ok(NormSource::Estimated),
            other => Err(RblError::Parse {
                what: "norm source".into(),
                reason: format!("expected `true` or `estimated`, got `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    pub blocks: Vec<Block>,
    pub norm_source: NormSource,
    pub gabp: GabpConfig,
}

impl ExperimentConfig {
    /// All estimators and blocks over the scenario's own sweep.
    pub fn new(scenario: Scenario) -> Self {
        Self {
            sigmas: scenario.sigma_w.clone(),
            gabp: GabpConfig::from_prior(&scenario.prior),
            scenario,
            trials: 1000,
            seed: 0,
            estimators: Estimator::ALL.to_vec(),
            blocks: Block::ALL.to_vec(),
            norm_source: NormSource::Estimated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(RblError::InvalidParameter {
                name: "trials",
                reason: "must be at least 1".into(),
            });
        }
        if self.sigmas.is_empty() {
            return Err(RblError::EmptyInput("sigma list"));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(RblError::InvalidParameter {
                name: "sigma",
                reason: format!("must be finite and non-negative, got {s}"),
            });
        }
        if self.estimators.is_empty() {
            return Err(RblError::EmptyInput("estimator list"));
        }
        if self.blocks.is_empty() {
            return Err(RblError::EmptyInput("block list"));
        }
        self.gabp.validate()
    }
}

/// Errors of one estimator on one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialErrors {
    /// Wrapped angle errors, degrees.
    pub rotation_deg: Vector3<f64>,
    pub translation: Vector3<f64>,
    /// Squared Frobenius error of the implied sensor positions.
    pub position_sq: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl TrialErrors {
    pub fn squared(&self, block: Block) -> f64 {
        match block {
            Block::Rotation => self.rotation_deg.norm_squared(),
            Block::Translation => self.translation.norm_squared(),
            Block::Position => self.position_sq,
        }
    }
}

/// Outcome of every enabled estimator on one trial, in `cfg.estimators` order.
#[derive(Debug)]
pub struct TrialOutcome {
    pub truth: GroundTruth,
    pub results: Vec<(Estimator, Result<TrialErrors>)>,
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn angle_error_deg(est: &EulerAngles, truth: &EulerAngles) -> Vector3<f64> {
    let e = est.to_degrees();
    let t = truth.to_degrees();
    Vector3::new(
        wrap_degrees(e[0] - t[0]),
        wrap_degrees(e[1] - t[1]),
        wrap_degrees(e[2] - t[2]),
    )
}

fn errors_for(
    scenario: &Scenario,
    truth: &GroundTruth,
    angles: &EulerAngles,
    t: &TranslationVector,
    iterations: usize,
    converged: bool,
) -> Result<TrialErrors> {
    if !angles.is_finite() || !t.is_finite() {
        return Err(RblError::InvalidParameter {
            name: "estimate",
            reason: "non-finite output".into(),
        });
    }
    let implied = apply_rigid_transform(
        &scenario.generator_mode.rotation(angles),
        t,
        &scenario.conformation,
    );
    Ok(TrialErrors {
        rotation_deg: angle_error_deg(angles, &truth.angles),
        translation: t.0 - truth.t.0,
        position_sq: (implied - &truth.positions).norm_squared(),
        iterations,
        converged,
    })
}

fn failure_copy(e: &RblError) -> RblError {
    RblError::InvalidParameter {
        name: "upstream",
        reason: format!("{}: {e}", e.kind()),
    }
}

/// Runs every enabled estimator on trial `trial` at noise level `sigma`.
pub fn run_trial(cfg: &ExperimentConfig, sigma: f64, trial: usize) -> Result<TrialOutcome> {
    let sc = &cfg.scenario;
    let mut rng = trial_rng(cfg.seed, trial);
    let (angles, t) = sample_transform(&sc.prior, &mut rng);
    let truth = GroundTruth::new(angles, t, &sc.conformation, sc.generator_mode);
    let ranges = simulate_ranges(&truth.positions, &sc.anchors, sigma, &mut rng)?;

    let wants = |e: Estimator| cfg.estimators.contains(&e);
    let need_positions = cfg.norm_source == NormSource::Estimated || wants(Estimator::LsProcrustes);
    let positions: Option<Result<Vec<PositionEstimate>>> = need_positions.then(|| {
        (0..sc.conformation.n_sensors())
            .map(|n| {
                let sys = build_position_system(&ranges, &sc.anchors, n)?;
                let noise = CompositeNoiseStats::from_ranges(&sys.measured_range, sigma);
                estimate_position_two_stage(&sys, &noise)
            })
            .collect()
    });

    let norms: Result<Vec<f64>> = match cfg.norm_source {
        NormSource::True => Ok(truth.norms_squared()),
        NormSource::Estimated => match positions.as_ref().expect("requested") {
            Ok(p) => Ok(p.iter().map(|e| e.s_norm_sq_hat).collect()),
            Err(e) => Err(failure_copy(e)),
        },
    };
    let sys = norms.and_then(|n| build_param_system(&ranges, &sc.anchors, &sc.conformation, &n));

    let double = if wants(Estimator::DoubleGabp) || wants(Estimator::StageAGabp) {
        Some(match &sys {
            Ok(s) => run_double_gabp(s, &cfg.gabp),
            Err(e) => Err(failure_copy(e)),
        })
    } else {
        None
    };

    let mut results = Vec::with_capacity(cfg.estimators.len());
    for &est in &cfg.estimators {
        let r = match est {
            Estimator::DoubleGabp => match double.as_ref().expect("computed") {
                Ok(d) => errors_for(
                    sc,
                    &truth,
                    &d.estimate.theta,
                    &d.estimate.t,
                    d.estimate.iterations,
                    d.estimate.converged,
                ),
                Err(e) => Err(failure_copy(e)),
            },
            Estimator::StageAGabp => match double.as_ref().expect("computed") {
                Ok(d) => errors_for(
                    sc,
                    &truth,
                    &d.stage_a.theta,
                    &d.stage_a.t,
                    d.stage_a.iterations,
                    d.stage_a.converged,
                ),
                Err(e) => Err(failure_copy(e)),
            },
            Estimator::LsProcrustes => match positions.as_ref().expect("requested") {
                Ok(p) => {
                    let s_hat =
                        Matrix3xX::from_columns(&p.iter().map(|e| e.s_hat).collect::<Vec<_>>());
                    procrustes_extract(&s_hat, &sc.conformation).and_then(|pose| {
                        errors_for(sc, &truth, &pose.angles_hat, &pose.t_hat, 0, true)
                    })
                }
                Err(e) => Err(failure_copy(e)),
            },
            Estimator::Genie => match &sys {
                Ok(s) => genie_bound(s, &sc.anchors, &truth, &cfg.gabp)
                    .and_then(|g| errors_for(sc, &truth, &g.theta, &g.t, 0, true)),
                Err(e) => Err(failure_copy(e)),
            },
        };
        results.push((est, r));
    }
    Ok(TrialOutcome { truth, results })
}

#[derive(Debug, Clone, Default)]
struct Accumulator {
    sq: [f64; 3],
    succeeded: usize,
    failures: usize,
    iterations: usize,
    converged: usize,
}

fn block_slot(b: Block) -> usize {
    match b {
        Block::Rotation => 0,
        Block::Translation => 1,
        Block::Position => 2,
    }
}

fn sweep_point<F>(cfg: &ExperimentConfig, sigma: f64, map_trials: F) -> Result<Vec<Accumulator>>
where
    F: Fn(&(dyn Fn(usize) -> Result<TrialOutcome> + Sync), usize) -> Vec<Result<TrialOutcome>>,
{
    let outcomes = map_trials(&|e| run_trial(cfg, sigma, e), cfg.trials);
    let mut acc = vec![Accumulator::default(); cfg.estimators.len()];
    for outcome in outcomes {
        let outcome = outcome?;
        for (slot, (_, r)) in acc.iter_mut().zip(&outcome.results) {
            match r {
                Ok(err) => {
                    for b in Block::ALL {
                        slot.sq[block_slot(b)] += err.squared(b);
                    }
                    slot.succeeded += 1;
                    slot.iterations += err.iterations;
                    slot.converged += usize::from(err.converged);
                }
                Err(_) => slot.failures += 1,
            }
        }
    }
    Ok(acc)
}

fn run_with<F>(cfg: &ExperimentConfig, map_trials: F) -> Result<RmseReport>
where
    F: Fn(&(dyn Fn(usize) -> Result<TrialOutcome> + Sync), usize) -> Vec<Result<TrialOutcome>>,
{
    cfg.validate()?;
    let mut per_sigma = Vec::with_capacity(cfg.sigmas.len());
    for &sigma in &cfg.sigmas {
        per_sigma.push(sweep_point(cfg, sigma, &map_trials)?);
    }
    let mut rows = Vec::new();
    for (ei, &est) in cfg.estimators.iter().enumerate() {
        for &block in &cfg.blocks {
            for (si, &sigma) in cfg.sigmas.iter().enumerate() {
                let a = &per_sigma[si][ei];
                let n = a.succeeded;
                rows.push(ReportRow {
                    estimator: est.name().to_string(),
                    block: block.name().to_string(),
                    sigma,
                    rmse: rmse_from_sum(a.sq[block_slot(block)], n),
                    trials: n + a.failures,
                    failures: a.failures,
                    mean_iters: if n > 0 {
                        a.iterations as f64 / n as f64
                    } else {
                        f64::NAN
                    },
                    converged_frac: if n > 0 {
                        a.converged as f64 / n as f64
                    } else {
                        f64::NAN
                    },
                });
            }
        }
    }
    Ok(RmseReport { rows })
}

/// Runs all trials on the current thread.
pub fn run_monte_carlo_sequential(cfg: &ExperimentConfig) -> Result<RmseReport> {
    run_with(cfg, |f, n| (0..n).map(f).collect())
}

/// Runs trials on the rayon pool.
#[cfg(feature = "parallel")]
pub fn run_monte_carlo_parallel(cfg: &ExperimentConfig) -> Result<RmseReport> {
    use rayon::prelude::*;
    run_with(cfg, |f, n| (0..n).into_par_iter().map(f).collect())
}

/// Parallel when the `parallel` feature is on, sequential otherwise. Both
/// produce identical reports.
pub fn run_monte_carlo(cfg: &ExperimentConfig) -> Result<RmseReport> {
    #[cfg(feature = "parallel")]
    {
        run_monte_carlo_parallel(cfg)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_monte_carlo_sequential(cfg)
    }
}
