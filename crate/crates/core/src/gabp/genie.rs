//! Genie-aided matched-filter bound.
//!
//! Each of the six parameters is estimated from its own rows after the
//! genie removes everything else using the ground truth: the other
//! parameters' contributions, the linearization residual and any error in
//! the sensor norms. What remains per row is `h_k·x_k + ξ` with `ξ = d̃² − d²`
//! the true composite noise, so the estimate is a scalar posterior mean
//! with the zero-mean Gaussian prior.

use nalgebra::Vector3;

use super::{GabpConfig, NoiseMode};
use crate::error::{RblError, Result};
use crate::geometry::{EulerAngles, TranslationVector};
use crate::linsys::ParamSystem;
use crate::scenario::{AnchorSet, GroundTruth};
use crate::VARIANCE_FLOOR;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenieEstimate {
    pub theta: EulerAngles,
    pub t: TranslationVector,
}

pub fn genie_bound(
    sys: &ParamSystem,
    anchors: &AnchorSet,
    truth: &GroundTruth,
    cfg: &GabpConfig,
) -> Result<GenieEstimate> {
    let rows = sys.n_rows();
    if rows == 0 {
        return Err(RblError::EmptyInput("parameter system has no rows"));
    }
    let n0_mean = sys.row_noise_var.iter().sum::<f64>() / rows as f64;

    let mut prec_th = Vector3::repeat(1.0 / cfg.prior_var_theta);
    let mut num_th = Vector3::zeros();
    let mut prec_t = Vector3::repeat(1.0 / cfg.prior_var_t);
    let mut num_t = Vector3::zeros();
    let theta = truth.angles.as_vector();
    let t = truth.t.0;

    for r in 0..rows {
        let (m, n) = sys.row_index_map[r];
        if n >= truth.positions.ncols() || m >= anchors.n_anchors() {
            return Err(RblError::DimensionMismatch {
                context: "genie row index",
                expected: truth.positions.ncols(),
                actual: n + 1,
            });
        }
        let d_true = (anchors.anchor(m) - truth.positions.column(n)).norm();
        let d_meas = sys.measured_range[r];
        let xi = d_meas * d_meas - d_true * d_true;
        let var = match cfg.noise_mode {
            NoiseMode::PerRow => sys.row_noise_var[r],
            NoiseMode::Scalar => n0_mean,
        }
        .max(VARIANCE_FLOOR);
        if !var.is_finite() {
            return Err(RblError::NumericalDegeneracy {
                block: "genie",
                row: r,
                value: var,
            });
        }
        for k in 0..3 {
            let h = sys.h_theta[r][k];
            prec_th[k] += h * h / var;
            num_th[k] += h * (h * theta[k] + xi) / var;
            let h = sys.h_t[r][k];
            prec_t[k] += h * h / var;
            num_t[k] += h * (h * t[k] + xi) / var;
        }
    }
    Ok(GenieEstimate {
        theta: EulerAngles::from_vector(&num_th.component_div(&prec_th)),
        t: TranslationVector(num_t.component_div(&prec_t)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linsys::build_param_system;
    use crate::scenario::{cube_anchors, simulate_ranges, unit_cube_conformation, GeneratorMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_free_genie_is_near_exact() {
        let c = unit_cube_conformation();
        let anchors = cube_anchors(10.0).unwrap();
        let truth = GroundTruth::new(
            EulerAngles::from_degrees(7.0, -3.0, 1.0),
            TranslationVector::new(2.0, 0.5, -1.0),
            &c,
            GeneratorMode::ExactRotation,
        );
        let r = simulate_ranges(
            &truth.positions,
            &anchors,
            0.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let sys = build_param_system(&r, &anchors, &c, &truth.norms_squared()).unwrap();
        let g = genie_bound(&sys, &anchors, &truth, &GabpConfig::default()).unwrap();
        // Only the prior shrinkage separates the estimate from the truth,
        // and the floored noise makes it vanish.
        assert!((g.theta.as_vector() - truth.angles.as_vector()).amax() < 1e-9);
        assert!((g.t.0 - truth.t.0).amax() < 1e-9);
    }
}
