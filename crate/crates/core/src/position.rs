//! Per-sensor position pre-estimation from the squared-range system.
//!
//! Stage 1 solves `y = G·x` by weighted least squares, treating
//! `x = (s, r)` as four free unknowns. Stage 2 enforces `r = ‖s‖²`: it runs
//! Gauss-Newton on `(x₁ − f(s))ᵀ F (x₁ − f(s))` with `f(s) = (s, ‖s‖²)` and
//! `F` the stage-1 information matrix, starting from the stage-1 position.
//! The refined estimate satisfies the norm relation exactly.

use nalgebra::{DVector, Matrix3x4, Matrix4, Vector3, Vector4};

use crate::error::{RblError, Result};
use crate::linsys::{CompositeNoiseStats, PositionSystem};
use crate::VARIANCE_FLOOR;

const MAX_REFINE_STEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionEstimate {
    pub s_hat: Vector3<f64>,
    pub s_norm_sq_hat: f64,
    /// `‖y − G·(ŝ, ‖ŝ‖²)‖` in m².
    pub residual_norm: f64,
    /// Unconstrained stage-1 solution `(s, r)`.
    pub stage1: Vector4<f64>,
    /// Stage 2 failed and the stage-1 solution was returned instead.
    pub fallback: bool,
}

pub fn estimate_position_two_stage(
    sys: &PositionSystem,
    noise: &CompositeNoiseStats,
) -> Result<PositionEstimate> {
    let rows = sys.y.len();
    if rows < 4 {
        return Err(RblError::DegenerateGeometry(format!(
            "sensor {} has {rows} ranges, need at least 4",
            sys.sensor_index
        )));
    }
    if noise.row_var.len() != rows {
        return Err(RblError::DimensionMismatch {
            context: "noise variances vs position rows",
            expected: rows,
            actual: noise.row_var.len(),
        });
    }

    // Normalizing weights by their maximum keeps σ_w → 0 well scaled.
    let raw: Vec<f64> = noise
        .row_var
        .iter()
        .map(|v| 1.0 / v.max(VARIANCE_FLOOR))
        .collect();
    let w_max = raw.iter().cloned().fold(0.0, f64::max);
    let mut gw = sys.g.clone();
    let mut yw = sys.y.clone();
    for (m, w) in raw.iter().enumerate() {
        let sw = (w / w_max).sqrt();
        gw.row_mut(m).scale_mut(sw);
        yw[m] *= sw;
    }

    let svd = gw.clone().svd(true, true);
    let sv = &svd.singular_values;
    if sv.min() <= 1e-12 * sv.max() {
        return Err(RblError::DegenerateGeometry(format!(
            "position system for sensor {} is rank deficient",
            sys.sensor_index
        )));
    }
    let x1: DVector<f64> = svd
        .solve(&yw, 0.0)
        .map_err(|e| RblError::DegenerateGeometry(e.to_string()))?;
    let stage1 = Vector4::new(x1[0], x1[1], x1[2], x1[3]);
    let info: Matrix4<f64> = {
        let gtg = gw.transpose() * &gw;
        Matrix4::from_fn(|i, j| gtg[(i, j)])
    };

    let residual = |s: &Vector3<f64>| -> f64 {
        let x = DVector::from_column_slice(&[s[0], s[1], s[2], s.norm_squared()]);
        (&sys.y - &sys.g * x).norm()
    };

    match refine(&stage1, &info) {
        Some(s) => Ok(PositionEstimate {
            s_hat: s,
            s_norm_sq_hat: s.norm_squared(),
            residual_norm: residual(&s),
            stage1,
            fallback: false,
        }),
        None => {
            let s = stage1.xyz();
            let x = DVector::from_column_slice(stage1.as_slice());
            Ok(PositionEstimate {
                s_hat: s,
                s_norm_sq_hat: stage1[3],
                residual_norm: (&sys.y - &sys.g * x).norm(),
                stage1,
                fallback: true,
            })
        }
    }
}

fn constrained_cost(x1: &Vector4<f64>, info: &Matrix4<f64>, s: &Vector3<f64>) -> f64 {
    let r = x1 - Vector4::new(s[0], s[1], s[2], s.norm_squared());
    (r.transpose() * info * r)[0]
}

fn refine(x1: &Vector4<f64>, info: &Matrix4<f64>) -> Option<Vector3<f64>> {
    let mut s = x1.xyz();
    let start_cost = constrained_cost(x1, info, &s);
    for _ in 0..MAX_REFINE_STEPS {
        let f = Vector4::new(s[0], s[1], s[2], s.norm_squared());
        let r = x1 - f;
        // J = [I₃; 2sᵀ]
        #[rustfmt::skip]
        let jt = Matrix3x4::new(
            1.0, 0.0, 0.0, 2.0 * s[0],
            0.0, 1.0, 0.0, 2.0 * s[1],
            0.0, 0.0, 1.0, 2.0 * s[2],
        );
        let lhs = jt * info * jt.transpose();
        let rhs = jt * info * r;
        let step = lhs.cholesky()?.solve(&rhs);
        s += step;
        if !s.iter().all(|v| v.is_finite()) {
            return None;
        }
        if step.norm() <= 1e-13 * (1.0 + s.norm()) {
            break;
        }
    }
    let end_cost = constrained_cost(x1, info, &s);
    if !end_cost.is_finite() || end_cost > start_cost * (1.0 + 1e-9) + f64::MIN_POSITIVE {
        return None;
    }
    Some(s)
}
