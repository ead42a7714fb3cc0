//! Least-squares positions followed by orthogonal Procrustes.
//!
//! Given estimated sensor positions `Ŝ` and the body-frame conformation `C`,
//! the rotation maximizing `tr(Qᵀ·Ŝc·Ccᵀ)` over SO(3) comes from the SVD of
//! the centred cross-covariance, with a sign flip on the smallest singular
//! direction when the unconstrained optimum is a reflection.

use nalgebra::{Matrix3, Matrix3xX, Vector3};

use crate::error::{RblError, Result};
use crate::geometry::{
    euler_from_rotation, Conformation, EulerAngles, RotationMatrix, TranslationVector,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub q_hat: RotationMatrix,
    pub t_hat: TranslationVector,
    pub angles_hat: EulerAngles,
    /// Frobenius norm of `Ŝ − (Q̂·C + t̂)`.
    pub residual: f64,
}

fn centred(points: &Matrix3xX<f64>) -> (Matrix3xX<f64>, Vector3<f64>) {
    let n = points.ncols() as f64;
    let centroid = points.column_sum() / n;
    let mut out = points.clone();
    for mut col in out.column_iter_mut() {
        col -= centroid;
    }
    (out, centroid)
}

pub fn procrustes_extract(
    s_hat: &Matrix3xX<f64>,
    conformation: &Conformation,
) -> Result<PoseEstimate> {
    let c = conformation.points();
    if s_hat.ncols() != c.ncols() {
        return Err(RblError::DimensionMismatch {
            context: "estimated positions vs conformation",
            expected: c.ncols(),
            actual: s_hat.ncols(),
        });
    }
    if !s_hat.iter().all(|v| v.is_finite()) {
        return Err(RblError::InvalidParameter {
            name: "s_hat",
            reason: "contains non-finite entries".into(),
        });
    }
    let (sc, s_mean) = centred(s_hat);
    let (cc, c_mean) = centred(c);

    let sv = cc.clone().svd(false, false).singular_values;
    let scale = sv.max();
    if scale <= 0.0 || sv.iter().filter(|&&v| v > 1e-9 * scale).count() < 2 {
        return Err(RblError::DegenerateGeometry(
            "conformation is collinear; rotation is not identifiable".into(),
        ));
    }

    let cross: Matrix3<f64> = &sc * cc.transpose();
    let svd = cross.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(RblError::DegenerateGeometry("SVD failed".into())),
    };
    let sign = (u * v_t).determinant().signum();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let q = RotationMatrix(u * d * v_t);
    let t = TranslationVector(s_mean - q.0 * c_mean);

    let mut fitted = q.0 * c;
    for mut col in fitted.column_iter_mut() {
        col += t.0;
    }
    Ok(PoseEstimate {
        q_hat: q,
        t_hat: t,
        angles_hat: euler_from_rotation(&q).angles,
        residual: (s_hat - fitted).norm(),
    })
}
