//! Double Gaussian belief propagation over the rotation angles and the
//! translation.
//!
//! The factor graph has one factor per row of the stacked system
//! `z = Hθ·θ + Ht·t + ξ` and six scalar variables. Every row keeps its own
//! soft replica and MSE for each variable (the variable-to-factor message).
//! One iteration:
//!
//! 1. soft interference cancellation: for row `m` and variable `k`, subtract
//!    every other variable's replica contribution from `z_m`;
//! 2. conditional variance: the residual interference power `Σ h²ψ` of the
//!    cancelled variables plus the row noise;
//! 3. extrinsic mean and variance: leave-one-out combination over all other
//!    rows;
//! 4. Gaussian denoising of the extrinsic belief with the zero-mean prior;
//! 5. damped update of replicas and MSEs.
//!
//! [`run_double_gabp`] runs this bivariate stage to convergence, takes the
//! consensus translation, cancels it from `z` and repeats the procedure on
//! the angles alone.

mod genie;

pub use genie::{genie_bound, GenieEstimate};

use nalgebra::Vector3;

use crate::error::{RblError, Result};
use crate::geometry::{EulerAngles, TranslationVector};
use crate::linsys::{cancel_translation, ParamSystem, ReducedSystem};
use crate::scenario::TransformPrior;
use crate::VARIANCE_FLOOR;

/// Which noise statistic enters the conditional variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    /// Per-row composite-noise variance `4d̃²σ_w²`.
    #[default]
    PerRow,
    /// One `N0` for all rows (the mean of the per-row values).
    Scalar,
}

/// How per-sensor systems are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stacking {
    /// One factor graph over all `M·N` rows.
    #[default]
    Stacked,
    /// One graph per sensor; the per-sensor consensus estimates are averaged.
    PerSensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GabpConfig {
    pub lambda_max: usize,
    /// Weight on the previous iterate, in `[0, 1)`.
    pub rho: f64,
    /// Prior variance of each angle, radians².
    pub prior_var_theta: f64,
    /// Prior variance of each translation component, m².
    pub prior_var_t: f64,
    pub noise_mode: NoiseMode,
    /// Relative change in the consensus estimate that counts as converged.
    pub convergence_tol: f64,
    pub stacking: Stacking,
    /// Combine the consensus sums with the Gaussian prior. When false the
    /// consensus is the prior-free full-row combination.
    pub consensus_prior: bool,
}

impl Default for GabpConfig {
    fn default() -> Self {
        Self::from_prior(&TransformPrior::default())
    }
}

impl GabpConfig {
    pub fn from_prior(prior: &TransformPrior) -> Self {
        Self {
            lambda_max: 100,
            rho: 0.5,
            prior_var_theta: prior.phi_theta_rad2(),
            prior_var_t: prior.phi_t_m2,
            noise_mode: NoiseMode::PerRow,
            convergence_tol: 1e-8,
            stacking: Stacking::Stacked,
            consensus_prior: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad =
            |name: &'static str, reason: String| Err(RblError::InvalidParameter { name, reason });
        if self.lambda_max < 1 {
            return bad("lambda_max", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho", format!("must lie in [0, 1), got {}", self.rho));
        }
        if !(self.prior_var_theta > 0.0 && self.prior_var_t > 0.0) {
            return bad("prior variance", "must be positive".into());
        }
        if self.convergence_tol.is_nan() || self.convergence_tol < 0.0 {
            return bad("convergence_tol", "must be non-negative".into());
        }
        Ok(())
    }
}

/// Per-edge messages for one three-variable block. Every vector has one
/// entry per row, each entry holding the three variables of the block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub replicas: Vec<Vector3<f64>>,
    pub mse: Vec<Vector3<f64>>,
    pub cond_var: Vec<Vector3<f64>>,
    pub extrinsic_mean: Vec<Vector3<f64>>,
    pub extrinsic_var: Vec<Vector3<f64>>,
}

impl BlockState {
    fn from_prior(rows: usize, prior_var: f64) -> Self {
        Self {
            replicas: vec![Vector3::zeros(); rows],
            mse: vec![Vector3::repeat(prior_var); rows],
            cond_var: vec![Vector3::zeros(); rows],
            extrinsic_mean: vec![Vector3::zeros(); rows],
            extrinsic_var: vec![Vector3::repeat(prior_var); rows],
        }
    }

    fn rows(&self) -> usize {
        self.replicas.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GabpState {
    pub theta: BlockState,
    pub t: BlockState,
    /// Completed iterations.
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusEstimate {
    pub theta: EulerAngles,
    pub t: TranslationVector,
    pub theta_var: Vector3<f64>,
    pub t_var: Vector3<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleGabpResult {
    /// Angles from the refinement stage, translation from the bivariate stage.
    pub estimate: ConsensusEstimate,
    /// Consensus at the end of the bivariate stage.
    pub stage_a: ConsensusEstimate,
    pub stage_b_iterations: usize,
    pub stage_b_converged: bool,
}

/// One variable block of a factor graph: its channel rows and prior variance.
struct Block<'a> {
    h: &'a [Vector3<f64>],
    prior_var: f64,
    name: &'static str,
}

/// Applies the variance floor; NaN passes through so it is reported.
fn floored(v: f64) -> f64 {
    if v.is_nan() {
        v
    } else {
        v.max(VARIANCE_FLOOR)
    }
}

/// Observation side of a factor graph.
struct Factors<'a> {
    z: &'a [f64],
    noise: Vec<f64>,
}

impl<'a> Factors<'a> {
    fn new(z: &'a [f64], row_var: &[f64], mode: NoiseMode) -> Self {
        let noise = match mode {
            NoiseMode::PerRow => row_var.iter().map(|v| floored(*v)).collect(),
            NoiseMode::Scalar => {
                let n0 = row_var.iter().sum::<f64>() / row_var.len().max(1) as f64;
                vec![floored(n0); row_var.len()]
            }
        };
        Self { z, noise }
    }
}

/// Full-row sums `A = Σ h²/σ²` and `B = Σ h·z̃/σ²` per variable.
#[derive(Debug, Clone, Copy)]
struct RowSums {
    precision: Vector3<f64>,
    weighted: Vector3<f64>,
}

impl RowSums {
    fn estimate(&self, prior_var: f64, with_prior: bool) -> (Vector3<f64>, Vector3<f64>) {
        let extra = if with_prior { 1.0 / prior_var } else { 0.0 };
        let mut mean = Vector3::zeros();
        let mut var = Vector3::zeros();
        for k in 0..3 {
            let p = self.precision[k] + extra;
            if p > 0.0 {
                mean[k] = self.weighted[k] / p;
                var[k] = 1.0 / p;
            } else {
                var[k] = f64::INFINITY;
            }
        }
        (mean, var)
    }
}

/// Indexed `[block][row]`, three variables per entry.
type PerBlock = Vec<Vec<Vector3<f64>>>;

/// Soft-IC symbols and conditional variances for every (block, row, variable).
fn soft_ic(
    factors: &Factors<'_>,
    blocks: &[Block<'_>],
    states: &[&BlockState],
) -> Result<(PerBlock, PerBlock)> {
    let rows = factors.z.len();
    let nb = blocks.len();
    let mut z_tilde = vec![vec![Vector3::zeros(); rows]; nb];
    let mut cond_var = vec![vec![Vector3::zeros(); rows]; nb];
    for r in 0..rows {
        for b in 0..nb {
            for k in 0..3 {
                let mut interference = 0.0;
                let mut power = 0.0;
                for (bb, block) in blocks.iter().enumerate() {
                    let h = &block.h[r];
                    let x = &states[bb].replicas[r];
                    let psi = &states[bb].mse[r];
                    for kk in 0..3 {
                        if bb == b && kk == k {
                            continue;
                        }
                        interference += h[kk] * x[kk];
                        power += h[kk] * h[kk] * psi[kk];
                    }
                }
                let var = power + factors.noise[r];
                if var.is_nan() || var <= 0.0 {
                    return Err(RblError::NumericalDegeneracy {
                        block: blocks[b].name,
                        row: r,
                        value: var,
                    });
                }
                z_tilde[b][r][k] = factors.z[r] - interference;
                cond_var[b][r][k] = var;
            }
        }
    }
    Ok((z_tilde, cond_var))
}

fn row_sums(h: &[Vector3<f64>], z_tilde: &[Vector3<f64>], cond_var: &[Vector3<f64>]) -> RowSums {
    let mut precision = Vector3::zeros();
    let mut weighted = Vector3::zeros();
    for r in 0..h.len() {
        for k in 0..3 {
            precision[k] += h[r][k] * h[r][k] / cond_var[r][k];
            weighted[k] += h[r][k] * z_tilde[r][k] / cond_var[r][k];
        }
    }
    RowSums {
        precision,
        weighted,
    }
}

/// One iteration on an arbitrary set of blocks. Returns the full-row sums of
/// this iteration's messages, one per block.
fn iterate(
    factors: &Factors<'_>,
    blocks: &[Block<'_>],
    states: &mut [&mut BlockState],
    rho: f64,
) -> Result<Vec<RowSums>> {
    let rows = factors.z.len();
    let (z_tilde, cond_var) = {
        let view: Vec<&BlockState> = states.iter().map(|s| &**s).collect();
        soft_ic(factors, blocks, &view)?
    };

    let mut sums = Vec::with_capacity(blocks.len());
    for (b, block) in blocks.iter().enumerate() {
        let state = &mut *states[b];
        let h = block.h;
        let zt = &z_tilde[b];
        let cv = &cond_var[b];

        // Leave-one-out sums from exclusive prefix and suffix accumulations.
        let mut prefix_p = vec![Vector3::zeros(); rows + 1];
        let mut prefix_q = vec![Vector3::zeros(); rows + 1];
        for r in 0..rows {
            let p = h[r].component_mul(&h[r]).component_div(&cv[r]);
            let q = h[r].component_mul(&zt[r]).component_div(&cv[r]);
            prefix_p[r + 1] = prefix_p[r] + p;
            prefix_q[r + 1] = prefix_q[r] + q;
        }
        let mut suffix_p = Vector3::zeros();
        let mut suffix_q = Vector3::zeros();
        for r in (0..rows).rev() {
            let ext_p = prefix_p[r] + suffix_p;
            let ext_q = prefix_q[r] + suffix_q;
            for k in 0..3 {
                let (mean, var) = if ext_p[k] > 0.0 {
                    (ext_q[k] / ext_p[k], 1.0 / ext_p[k])
                } else {
                    (0.0, f64::INFINITY)
                };
                state.extrinsic_mean[r][k] = mean;
                state.extrinsic_var[r][k] = var;

                let post_p = ext_p[k] + 1.0 / block.prior_var;
                let denoised = ext_q[k] / post_p;
                let denoised_mse = 1.0 / post_p;
                state.replicas[r][k] = rho * state.replicas[r][k] + (1.0 - rho) * denoised;
                state.mse[r][k] = rho * state.mse[r][k] + (1.0 - rho) * denoised_mse;
            }
            state.cond_var[r] = cv[r];
            suffix_p += h[r].component_mul(&h[r]).component_div(&cv[r]);
            suffix_q += h[r].component_mul(&zt[r]).component_div(&cv[r]);
        }
        sums.push(RowSums {
            precision: prefix_p[rows],
            weighted: prefix_q[rows],
        });
    }
    Ok(sums)
}

fn check_rows(expected: usize, state: &GabpState, context: &'static str) -> Result<()> {
    for actual in [state.theta.rows(), state.t.rows()] {
        if actual != expected {
            return Err(RblError::DimensionMismatch {
                context,
                expected,
                actual,
            });
        }
    }
    Ok(())
}

fn stage_a_blocks<'a>(sys: &'a ParamSystem, cfg: &GabpConfig) -> [Block<'a>; 2] {
    [
        Block {
            h: &sys.h_theta,
            prior_var: cfg.prior_var_theta,
            name: "rotation",
        },
        Block {
            h: &sys.h_t,
            prior_var: cfg.prior_var_t,
            name: "translation",
        },
    ]
}

fn stage_b_block<'a>(sys: &'a ReducedSystem, cfg: &GabpConfig) -> [Block<'a>; 1] {
    [Block {
        h: &sys.h_theta,
        prior_var: cfg.prior_var_theta,
        name: "rotation",
    }]
}

/// Replicas at the prior mean, MSEs at the prior variances.
pub fn init_state(sys: &ParamSystem, cfg: &GabpConfig) -> GabpState {
    let rows = sys.n_rows();
    GabpState {
        theta: BlockState::from_prior(rows, cfg.prior_var_theta),
        t: BlockState::from_prior(rows, cfg.prior_var_t),
        iteration: 0,
    }
}

fn bivariate_step(
    state: &mut GabpState,
    sys: &ParamSystem,
    cfg: &GabpConfig,
) -> Result<Vec<RowSums>> {
    check_rows(sys.n_rows(), state, "bivariate state rows")?;
    let factors = Factors::new(&sys.z, &sys.row_noise_var, cfg.noise_mode);
    let blocks = stage_a_blocks(sys, cfg);
    let GabpState {
        theta,
        t,
        iteration,
    } = state;
    let sums = iterate(&factors, &blocks, &mut [theta, t], cfg.rho)?;
    *iteration += 1;
    Ok(sums)
}

fn refinement_step(
    state: &mut GabpState,
    sys: &ReducedSystem,
    cfg: &GabpConfig,
) -> Result<Vec<RowSums>> {
    if state.theta.rows() != sys.z.len() {
        return Err(RblError::DimensionMismatch {
            context: "refinement state rows",
            expected: sys.z.len(),
            actual: state.theta.rows(),
        });
    }
    let factors = Factors::new(&sys.z, &sys.row_noise_var, cfg.noise_mode);
    let blocks = stage_b_block(sys, cfg);
    let sums = iterate(&factors, &blocks, &mut [&mut state.theta], cfg.rho)?;
    state.iteration += 1;
    Ok(sums)
}

/// One bivariate iteration over both blocks.
pub fn bivariate_iteration(
    state: &GabpState,
    sys: &ParamSystem,
    cfg: &GabpConfig,
) -> Result<GabpState> {
    let mut next = state.clone();
    bivariate_step(&mut next, sys, cfg)?;
    Ok(next)
}

/// One angle-only iteration on the translation-cancelled system. The
/// translation block is carried unchanged.
pub fn refinement_iteration(
    state: &GabpState,
    sys: &ReducedSystem,
    cfg: &GabpConfig,
) -> Result<GabpState> {
    let mut next = state.clone();
    refinement_step(&mut next, sys, cfg)?;
    Ok(next)
}

fn consensus_from(
    theta: &RowSums,
    t: Option<&RowSums>,
    cfg: &GabpConfig,
    iterations: usize,
    converged: bool,
) -> ConsensusEstimate {
    let (th, th_var) = theta.estimate(cfg.prior_var_theta, cfg.consensus_prior);
    let (tt, t_var) = match t {
        Some(s) => s.estimate(cfg.prior_var_t, cfg.consensus_prior),
        None => (Vector3::zeros(), Vector3::repeat(f64::NAN)),
    };
    ConsensusEstimate {
        theta: EulerAngles::from_vector(&th),
        t: TranslationVector(tt),
        theta_var: th_var,
        t_var,
        iterations,
        converged,
    }
}

/// Full-row consensus from the current replicas of a bivariate state.
pub fn consensus(
    state: &GabpState,
    sys: &ParamSystem,
    cfg: &GabpConfig,
) -> Result<ConsensusEstimate> {
    if state.iteration == 0 {
        return Err(RblError::NotIterated);
    }
    check_rows(sys.n_rows(), state, "consensus state rows")?;
    let factors = Factors::new(&sys.z, &sys.row_noise_var, cfg.noise_mode);
    let blocks = stage_a_blocks(sys, cfg);
    let (zt, cv) = soft_ic(&factors, &blocks, &[&state.theta, &state.t])?;
    let theta = row_sums(blocks[0].h, &zt[0], &cv[0]);
    let t = row_sums(blocks[1].h, &zt[1], &cv[1]);
    Ok(consensus_from(
        &theta,
        Some(&t),
        cfg,
        state.iteration,
        false,
    ))
}

/// Angle consensus on a translation-cancelled system.
pub fn refined_consensus(
    state: &GabpState,
    sys: &ReducedSystem,
    cfg: &GabpConfig,
) -> Result<ConsensusEstimate> {
    if state.iteration == 0 {
        return Err(RblError::NotIterated);
    }
    let factors = Factors::new(&sys.z, &sys.row_noise_var, cfg.noise_mode);
    let blocks = stage_b_block(sys, cfg);
    let (zt, cv) = soft_ic(&factors, &blocks, &[&state.theta])?;
    let theta = row_sums(blocks[0].h, &zt[0], &cv[0]);
    Ok(consensus_from(&theta, None, cfg, state.iteration, false))
}

fn block_converged(prev: &Vector3<f64>, next: &Vector3<f64>, tol: f64) -> bool {
    (next - prev).norm() <= tol * next.norm()
}

/// Iterates until `lambda_max` or until every block's consensus settles.
/// Returns the number of iterations run and whether it converged.
fn run_until_converged<F>(cfg: &GabpConfig, with_prior: bool, mut step: F) -> Result<(usize, bool)>
where
    F: FnMut() -> Result<Vec<(RowSums, f64)>>,
{
    let mut previous: Option<Vec<Vector3<f64>>> = None;
    for lambda in 1..=cfg.lambda_max {
        let sums = step()?;
        let current: Vec<Vector3<f64>> = sums
            .iter()
            .map(|(s, prior)| s.estimate(*prior, with_prior).0)
            .collect();
        if let Some(prev) = &previous {
            let settled = prev
                .iter()
                .zip(&current)
                .all(|(p, c)| block_converged(p, c, cfg.convergence_tol));
            if settled {
                return Ok((lambda, true));
            }
        }
        previous = Some(current);
    }
    Ok((cfg.lambda_max, false))
}

/// Bivariate stage only: iterate to convergence and return the consensus
/// together with the final state.
pub fn run_bivariate(
    sys: &ParamSystem,
    cfg: &GabpConfig,
) -> Result<(ConsensusEstimate, GabpState)> {
    cfg.validate()?;
    let mut state = init_state(sys, cfg);
    let priors = [cfg.prior_var_theta, cfg.prior_var_t];
    let (iters, converged) = run_until_converged(cfg, cfg.consensus_prior, || {
        let sums = bivariate_step(&mut state, sys, cfg)?;
        Ok(sums.into_iter().zip(priors).collect())
    })?;
    let mut est = consensus(&state, sys, cfg)?;
    est.iterations = iters;
    est.converged = converged;
    Ok((est, state))
}

fn run_double_stacked(sys: &ParamSystem, cfg: &GabpConfig) -> Result<DoubleGabpResult> {
    let (stage_a, mut state) = run_bivariate(sys, cfg)?;

    // Stage B continues from the stage-A angle messages.
    let reduced = cancel_translation(sys, &stage_a.t);
    let (iters_b, converged_b) = run_until_converged(cfg, cfg.consensus_prior, || {
        let sums = refinement_step(&mut state, &reduced, cfg)?;
        Ok(sums.into_iter().map(|s| (s, cfg.prior_var_theta)).collect())
    })?;
    let refined = refined_consensus(&state, &reduced, cfg)?;

    Ok(DoubleGabpResult {
        estimate: ConsensusEstimate {
            theta: refined.theta,
            t: stage_a.t,
            theta_var: refined.theta_var,
            t_var: stage_a.t_var,
            iterations: stage_a.iterations + iters_b,
            converged: stage_a.converged && converged_b,
        },
        stage_a,
        stage_b_iterations: iters_b,
        stage_b_converged: converged_b,
    })
}

fn average(estimates: &[ConsensusEstimate]) -> ConsensusEstimate {
    let n = estimates.len() as f64;
    let mut th = Vector3::zeros();
    let mut t = Vector3::zeros();
    let mut thv = Vector3::zeros();
    let mut tv = Vector3::zeros();
    let mut iters = 0;
    for e in estimates {
        th += e.theta.as_vector();
        t += e.t.0;
        thv += e.theta_var;
        tv += e.t_var;
        iters += e.iterations;
    }
    ConsensusEstimate {
        theta: EulerAngles::from_vector(&(th / n)),
        t: TranslationVector(t / n),
        theta_var: thv / n,
        t_var: tv / n,
        iterations: iters / estimates.len().max(1),
        converged: estimates.iter().all(|e| e.converged),
    }
}

/// Bivariate GaBP followed by translation-cancelled angle refinement.
pub fn run_double_gabp(sys: &ParamSystem, cfg: &GabpConfig) -> Result<DoubleGabpResult> {
    cfg.validate()?;
    if sys.n_rows() == 0 {
        return Err(RblError::EmptyInput("parameter system has no rows"));
    }
    match cfg.stacking {
        Stacking::Stacked => run_double_stacked(sys, cfg),
        Stacking::PerSensor => {
            let per: Vec<DoubleGabpResult> = sys
                .sensors()
                .into_iter()
                .map(|n| run_double_stacked(&sys.sensor_subsystem(n), cfg))
                .collect::<Result<_>>()?;
            let finals: Vec<_> = per.iter().map(|r| r.estimate).collect();
            let stage_a: Vec<_> = per.iter().map(|r| r.stage_a).collect();
            Ok(DoubleGabpResult {
                estimate: average(&finals),
                stage_a: average(&stage_a),
                stage_b_iterations: per.iter().map(|r| r.stage_b_iterations).sum::<usize>()
                    / per.len(),
                stage_b_converged: per.iter().all(|r| r.stage_b_converged),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{EulerAngles, TranslationVector};
    use crate::linsys::build_param_system;
    use crate::scenario::{
        cube_anchors, simulate_ranges, unit_cube_conformation, GeneratorMode, GroundTruth,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube_system(sigma: f64, mode: GeneratorMode, seed: u64) -> (ParamSystem, GroundTruth) {
        let c = unit_cube_conformation();
        let anchors = cube_anchors(10.0).unwrap();
        let truth = GroundTruth::new(
            EulerAngles::from_degrees(2.5, -4.0, 3.0),
            TranslationVector::new(1.2, -2.1, 0.4),
            &c,
            mode,
        );
        let r = simulate_ranges(
            &truth.positions,
            &anchors,
            sigma,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        let sys = build_param_system(&r, &anchors, &c, &truth.norms_squared()).unwrap();
        (sys, truth)
    }

    #[test]
    fn init_uses_prior() {
        let (sys, _) = cube_system(0.1, GeneratorMode::ExactRotation, 1);
        let cfg = GabpConfig::default();
        let s = init_state(&sys, &cfg);
        assert!(s
            .theta
            .mse
            .iter()
            .all(|v| *v == Vector3::repeat(cfg.prior_var_theta)));
        assert!(s
            .t
            .mse
            .iter()
            .all(|v| *v == Vector3::repeat(cfg.prior_var_t)));
        assert!(s.theta.replicas.iter().all(|v| *v == Vector3::zeros()));
        assert_eq!(s, init_state(&sys, &cfg));
        assert!(matches!(
            consensus(&s, &sys, &cfg),
            Err(RblError::NotIterated)
        ));
    }

    #[test]
    fn damping_extremes() {
        let (sys, _) = cube_system(0.1, GeneratorMode::ExactRotation, 2);
        let mut cfg = GabpConfig::default();
        let s0 = bivariate_iteration(&init_state(&sys, &cfg), &sys, &cfg).unwrap();

        // ρ = 1 sits outside the validated range but is the frozen limit.
        cfg.rho = 1.0;
        let frozen = bivariate_iteration(&s0, &sys, &cfg).unwrap();
        assert_eq!(frozen.theta.replicas, s0.theta.replicas);
        assert_eq!(frozen.t.mse, s0.t.mse);

        cfg.rho = 0.0;
        let fresh = bivariate_iteration(&s0, &sys, &cfg).unwrap();
        // With ρ = 0 the replica equals the denoised extrinsic belief.
        for r in 0..sys.n_rows() {
            for k in 0..3 {
                let v = fresh.theta.extrinsic_var[r][k];
                let m = fresh.theta.extrinsic_mean[r][k];
                let phi = cfg.prior_var_theta;
                let expected = phi * m / (phi + v);
                assert!(
                    (fresh.theta.replicas[r][k] - expected).abs() <= 1e-12 * (1.0 + expected.abs())
                );
                let expected_mse = phi * v / (phi + v);
                assert!((fresh.theta.mse[r][k] - expected_mse).abs() <= 1e-12 * expected_mse);
            }
        }
    }

    #[test]
    fn refinement_damping_one_freezes() {
        let (sys, _) = cube_system(0.1, GeneratorMode::ExactRotation, 3);
        let mut cfg = GabpConfig::default();
        let s = bivariate_iteration(&init_state(&sys, &cfg), &sys, &cfg).unwrap();
        let red = cancel_translation(&sys, &TranslationVector::zero());
        cfg.rho = 1.0;
        let next = refinement_iteration(&s, &red, &cfg).unwrap();
        assert_eq!(next.theta.replicas, s.theta.replicas);
        assert_eq!(next.theta.mse, s.theta.mse);
        assert_eq!(next.t, s.t);
    }

    #[test]
    fn noise_free_double_gabp_is_exact() {
        let (sys, truth) = cube_system(0.0, GeneratorMode::SmallAngleRotation, 4);
        let out = run_double_gabp(&sys, &GabpConfig::default()).unwrap();
        assert!((out.estimate.theta.as_vector() - truth.angles.as_vector()).amax() < 1e-6);
        assert!((out.estimate.t.0 - truth.t.0).amax() < 1e-6);
    }

    #[test]
    fn consensus_permutation_invariant() {
        let (sys, _) = cube_system(0.2, GeneratorMode::ExactRotation, 5);
        let cfg = GabpConfig::default();
        let mut state = init_state(&sys, &cfg);
        for _ in 0..10 {
            state = bivariate_iteration(&state, &sys, &cfg).unwrap();
        }
        let base = consensus(&state, &sys, &cfg).unwrap();
        let perm: Vec<usize> = (0..sys.n_rows()).rev().collect();
        let psys = sys.select_rows(&perm);
        let pstate = GabpState {
            theta: permute(&state.theta, &perm),
            t: permute(&state.t, &perm),
            iteration: state.iteration,
        };
        let other = consensus(&pstate, &psys, &cfg).unwrap();
        assert!((base.theta.as_vector() - other.theta.as_vector()).amax() < 1e-12);
        assert!((base.t.0 - other.t.0).amax() < 1e-12);
    }

    fn permute(b: &BlockState, perm: &[usize]) -> BlockState {
        let pick = |v: &Vec<Vector3<f64>>| perm.iter().map(|&i| v[i]).collect();
        BlockState {
            replicas: pick(&b.replicas),
            mse: pick(&b.mse),
            cond_var: pick(&b.cond_var),
            extrinsic_mean: pick(&b.extrinsic_mean),
            extrinsic_var: pick(&b.extrinsic_var),
        }
    }

    #[test]
    fn nan_noise_reports_row() {
        let (mut sys, _) = cube_system(0.1, GeneratorMode::ExactRotation, 6);
        sys.row_noise_var[5] = f64::NAN;
        let cfg = GabpConfig::default();
        let err = bivariate_iteration(&init_state(&sys, &cfg), &sys, &cfg).unwrap_err();
        match err {
            RblError::NumericalDegeneracy { row, .. } => assert_eq!(row, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = GabpConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.rho = 1.0;
        assert!(cfg.validate().is_err());
        cfg.rho = 0.5;
        cfg.lambda_max = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (sys, _) = cube_system(0.1, GeneratorMode::ExactRotation, 7);
        let cfg = GabpConfig::default();
        let state = init_state(&sys.sensor_subsystem(0), &cfg);
        assert!(matches!(
            bivariate_iteration(&state, &sys, &cfg),
            Err(RblError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn per_sensor_mode_runs() {
        let (sys, truth) = cube_system(0.01, GeneratorMode::ExactRotation, 8);
        let cfg = GabpConfig {
            stacking: Stacking::PerSensor,
            ..GabpConfig::default()
        };
        let out = run_double_gabp(&sys, &cfg).unwrap();
        assert!(out.estimate.t.is_finite());
        // Per-sensor averaging still localizes the body centre.
        assert!((out.estimate.t.0 - truth.t.0).norm() < 0.1);
    }
}
