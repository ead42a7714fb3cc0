//! Rotation algebra for the rigid-body model.
//!
//! Rotations are parameterized by three Euler angles composed as
//! `Q = Qz(θz) · Qy(θy) · Qx(θx)`. Angles are held in radians; conversion to
//! degrees happens only at the crate's external interfaces (scenario files,
//! CLI flags and reports).
//!
//! The small-angle model replaces `cos θ` by 1 and `sin θ` by `θ`, which makes
//! the rotation matrix affine in the angles: `vec(Q) = γ + L·θ` with
//! column-major vectorization.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix3xX, SMatrix, SVector, Vector3};

use crate::error::{RblError, Result};

/// Roll, pitch and yaw angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerAngles {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EulerAngles {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_degrees(x: f64, y: f64, z: f64) -> Self {
        Self::new(x.to_radians(), y.to_radians(), z.to_radians())
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn to_degrees(&self) -> [f64; 3] {
        [
            self.x.to_degrees(),
            self.y.to_degrees(),
            self.z.to_degrees(),
        ]
    }

    /// Wraps each angle into `[-π, π]`.
    pub fn normalized(&self) -> Self {
        Self::new(wrap_angle(self.x), wrap_angle(self.y), wrap_angle(self.z))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.x * factor, self.y * factor, self.z * factor)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Wraps an angle in radians into `[-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid maps +π to -π; keep +π representable.
    if w == -PI && a > 0.0 {
        PI
    } else {
        w
    }
}

/// Wraps an angle in degrees into `[-180, 180]`.
pub fn wrap_degrees(a: f64) -> f64 {
    wrap_angle(a.to_radians()).to_degrees()
}

/// A 3×3 rotation matrix, either exact or its small-angle approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(pub Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// `‖QᵀQ − I‖_F`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    /// Column-major vectorization.
    pub fn vec(&self) -> SVector<f64, 9> {
        SVector::<f64, 9>::from_column_slice(self.0.as_slice())
    }
}

/// Translation of the body frame, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TranslationVector(pub Vector3<f64>);

impl TranslationVector {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Body-frame sensor coordinates, one column per sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Conformation(Matrix3xX<f64>);

impl Conformation {
    pub fn new(points: Matrix3xX<f64>) -> Result<Self> {
        if points.ncols() == 0 {
            return Err(RblError::EmptyInput(
                "conformation needs at least one sensor",
            ));
        }
        if !points.iter().all(|v| v.is_finite()) {
            return Err(RblError::InvalidParameter {
                name: "conformation",
                reason: "non-finite coordinate".into(),
            });
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &Matrix3xX<f64> {
        &self.0
    }

    pub fn n_sensors(&self) -> usize {
        self.0.ncols()
    }

    pub fn sensor(&self, n: usize) -> Vector3<f64> {
        self.0.column(n).into_owned()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.0.column_mean()
    }
}

/// `γ` and `L` such that `vec(Q_sa(θ)) = γ + L·θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationConstants {
    pub gamma: SVector<f64, 9>,
    pub l: SMatrix<f64, 9, 3>,
}

/// Exact rotation `Qz · Qy · Qx`.
pub fn rotation_matrix_exact(angles: &EulerAngles) -> RotationMatrix {
    let (sx, cx) = angles.x.sin_cos();
    let (sy, cy) = angles.y.sin_cos();
    let (sz, cz) = angles.z.sin_cos();
    #[rustfmt::skip]
    let q = Matrix3::new(
        cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx,
        sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx,
        -sy,     cy * sx,                cy * cx,
    );
    RotationMatrix(q)
}

/// First-order expansion of [`rotation_matrix_exact`] around the identity.
///
/// Diagonal entries are exactly one and the off-diagonal part is the
/// skew-symmetric matrix of `θ`.
pub fn rotation_matrix_small_angle(angles: &EulerAngles) -> RotationMatrix {
    let EulerAngles { x, y, z } = *angles;
    #[rustfmt::skip]
    let q = Matrix3::new(
        1.0, -z,  y,
        z,   1.0, -x,
        -y,  x,   1.0,
    );
    RotationMatrix(q)
}

pub fn linearization_constants() -> LinearizationConstants {
    let gamma =
        SVector::<f64, 9>::from_column_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    // Column-major vec index of Q[r, c] is 3c + r.
    #[rustfmt::skip]
    let l = SMatrix::<f64, 9, 3>::from_row_slice(&[
        // θx    θy    θz
        0.0,  0.0,  0.0,  // Q00
        0.0,  0.0,  1.0,  // Q10
        0.0, -1.0,  0.0,  // Q20
        0.0,  0.0, -1.0,  // Q01
        0.0,  0.0,  0.0,  // Q11
        1.0,  0.0,  0.0,  // Q21
        0.0,  1.0,  0.0,  // Q02
        -1.0, 0.0,  0.0,  // Q12
        0.0,  0.0,  0.0,  // Q22
    ]);
    LinearizationConstants { gamma, l }
}

/// Maps every body-frame sensor to `Q·cₙ + t`.
pub fn apply_rigid_transform(
    q: &RotationMatrix,
    t: &TranslationVector,
    conformation: &Conformation,
) -> Matrix3xX<f64> {
    let mut out = q.0 * conformation.points();
    for mut col in out.column_iter_mut() {
        col += t.0;
    }
    out
}

/// Result of inverting the Euler composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerExtraction {
    pub angles: EulerAngles,
    /// Set when `|sin θy|` is within 1e-9 of one. `θx` is then pinned to 0
    /// and `θz` absorbs the combined roll/yaw.
    pub gimbal_lock: bool,
}

/// Recovers `(θx, θy, θz)` from `Q = Qz·Qy·Qx`.
///
/// `q` is expected to be a proper rotation (orthogonal, det +1).
pub fn euler_from_rotation(q: &RotationMatrix) -> EulerExtraction {
    let m = &q.0;
    let sin_y = -m[(2, 0)];
    if sin_y.abs() > 1.0 - 1e-9 {
        let y = if sin_y > 0.0 { PI / 2.0 } else { -PI / 2.0 };
        let z = (-m[(0, 1)]).atan2(m[(1, 1)]);
        return EulerExtraction {
            angles: EulerAngles::new(0.0, y, z),
            gimbal_lock: true,
        };
    }
    let cos_y = m[(0, 0)].hypot(m[(1, 0)]);
    EulerExtraction {
        angles: EulerAngles::new(
            m[(2, 1)].atan2(m[(2, 2)]),
            sin_y.atan2(cos_y),
            m[(1, 0)].atan2(m[(0, 0)]),
        ),
        gimbal_lock: false,
    }
}
