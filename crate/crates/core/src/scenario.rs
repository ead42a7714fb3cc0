//! Simulation geometry, ground-truth sampling and noisy ranges.

use std::path::Path;

use nalgebra::{DMatrix, Matrix3xX, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{RblError, Result};
use crate::geometry::{
    apply_rigid_transform, rotation_matrix_exact, rotation_matrix_small_angle, Conformation,
    EulerAngles, RotationMatrix, TranslationVector,
};

/// Anchor positions in the global frame, one column per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet(Matrix3xX<f64>);

impl AnchorSet {
    /// Requires at least four anchors that are not all coplanar.
    pub fn new(points: Matrix3xX<f64>) -> Result<Self> {
        if points.ncols() < 4 {
            return Err(RblError::DegenerateGeometry(format!(
                "need at least 4 anchors, got {}",
                points.ncols()
            )));
        }
        if !points.iter().all(|v| v.is_finite()) {
            return Err(RblError::InvalidParameter {
                name: "anchors",
                reason: "non-finite coordinate".into(),
            });
        }
        let mean = points.column_mean();
        let mut centered = points.clone();
        for mut col in centered.column_iter_mut() {
            col -= mean;
        }
        let sv = centered.singular_values();
        let max = sv.max();
        if max <= 0.0 || sv.min() <= 1e-9 * max {
            return Err(RblError::DegenerateGeometry("anchors are coplanar".into()));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &Matrix3xX<f64> {
        &self.0
    }

    pub fn n_anchors(&self) -> usize {
        self.0.ncols()
    }

    pub fn anchor(&self, m: usize) -> Vector3<f64> {
        self.0.column(m).into_owned()
    }
}

/// Zero-mean Gaussian prior on the transformation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformPrior {
    /// Variance of each rotation angle, degrees².
    pub phi_theta_deg2: f64,
    /// Variance of each translation component, m².
    pub phi_t_m2: f64,
}

impl TransformPrior {
    pub fn new(phi_theta_deg2: f64, phi_t_m2: f64) -> Result<Self> {
        for (name, v) in [("phi_theta", phi_theta_deg2), ("phi_t", phi_t_m2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RblError::InvalidParameter {
                    name,
                    reason: format!("prior variance must be positive, got {v}"),
                });
            }
        }
        Ok(Self {
            phi_theta_deg2,
            phi_t_m2,
        })
    }

    pub fn phi_theta_rad2(&self) -> f64 {
        self.phi_theta_deg2 * (std::f64::consts::PI / 180.0).powi(2)
    }
}

impl Default for TransformPrior {
    fn default() -> Self {
        Self {
            phi_theta_deg2: 10.0,
            phi_t_m2: 5.0,
        }
    }
}

/// Which rotation model generates the ground-truth sensor positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorMode {
    #[default]
    ExactRotation,
    SmallAngleRotation,
}

impl GeneratorMode {
    pub fn rotation(&self, angles: &EulerAngles) -> RotationMatrix {
        match self {
            GeneratorMode::ExactRotation => rotation_matrix_exact(angles),
            GeneratorMode::SmallAngleRotation => rotation_matrix_small_angle(angles),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub angles: EulerAngles,
    pub t: TranslationVector,
    /// Transformed sensor positions.
    pub positions: Matrix3xX<f64>,
    pub generator_mode: GeneratorMode,
}

impl GroundTruth {
    pub fn new(
        angles: EulerAngles,
        t: TranslationVector,
        conformation: &Conformation,
        generator_mode: GeneratorMode,
    ) -> Self {
        let q = generator_mode.rotation(&angles);
        Self {
            angles,
            t,
            positions: apply_rigid_transform(&q, &t, conformation),
            generator_mode,
        }
    }

    /// Max deviation of the stored positions from `Q·C + t`.
    pub fn consistency_error(&self, conformation: &Conformation) -> f64 {
        let q = self.generator_mode.rotation(&self.angles);
        (apply_rigid_transform(&q, &self.t, conformation) - &self.positions).amax()
    }

    pub fn norms_squared(&self) -> Vec<f64> {
        self.positions
            .column_iter()
            .map(|c| c.norm_squared())
            .collect()
    }
}

/// Noisy anchor-to-sensor ranges; entry `(m, n)` pairs anchor `m` with sensor `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeMeasurements {
    pub ranges: DMatrix<f64>,
    pub sigma_w: f64,
}

impl RangeMeasurements {
    pub fn n_anchors(&self) -> usize {
        self.ranges.nrows()
    }

    pub fn n_sensors(&self) -> usize {
        self.ranges.ncols()
    }
}

/// Eight vertices of the unit cube centred at the origin.
pub fn unit_cube_conformation() -> Conformation {
    Conformation::new(cube_vertices(0.5)).expect("cube vertices are finite")
}

/// Anchors on the vertices of a cube with the given half side length.
pub fn cube_anchors(half_side: f64) -> Result<AnchorSet> {
    if !(half_side > 0.0 && half_side.is_finite()) {
        return Err(RblError::InvalidParameter {
            name: "half_side",
            reason: format!("must be positive, got {half_side}"),
        });
    }
    AnchorSet::new(cube_vertices(half_side))
}

fn cube_vertices(h: f64) -> Matrix3xX<f64> {
    #[rustfmt::skip]
    let pattern = [
        -1.0,  1.0,  1.0, -1.0, -1.0,  1.0, -1.0, 1.0,
        -1.0, -1.0,  1.0,  1.0, -1.0, -1.0,  1.0, 1.0,
        -1.0, -1.0, -1.0, -1.0,  1.0,  1.0,  1.0, 1.0,
    ];
    Matrix3xX::from_row_slice(&pattern) * h
}

/// Draws angles (degrees², converted to radians) and translation from the prior.
///
/// Draw order is θx, θy, θz, tx, ty, tz.
pub fn sample_transform<R: Rng + ?Sized>(
    prior: &TransformPrior,
    rng: &mut R,
) -> (EulerAngles, TranslationVector) {
    let sd_theta = prior.phi_theta_deg2.sqrt();
    let sd_t = prior.phi_t_m2.sqrt();
    let mut draw = |sd: f64| -> f64 { sd * rng.sample::<f64, _>(StandardNormal) };
    let angles = EulerAngles::from_degrees(draw(sd_theta), draw(sd_theta), draw(sd_theta));
    let t = TranslationVector::new(draw(sd_t), draw(sd_t), draw(sd_t));
    (angles, t)
}

/// `d̃ = ‖aₘ − sₙ‖ + w`, `w ~ N(0, σ_w²)`.
///
/// Noise is drawn sensor-major (all anchors of sensor 0 first) as
/// `σ_w · N(0, 1)`, so equal streams give common random numbers across
/// noise levels. Negative noisy ranges are kept.
pub fn simulate_ranges<R: Rng + ?Sized>(
    positions: &Matrix3xX<f64>,
    anchors: &AnchorSet,
    sigma_w: f64,
    rng: &mut R,
) -> Result<RangeMeasurements> {
    if !(sigma_w >= 0.0 && sigma_w.is_finite()) {
        return Err(RblError::InvalidParameter {
            name: "sigma_w",
            reason: format!("must be non-negative, got {sigma_w}"),
        });
    }
    let m_count = anchors.n_anchors();
    let n_count = positions.ncols();
    let mut ranges = DMatrix::zeros(m_count, n_count);
    for n in 0..n_count {
        let s = positions.column(n);
        for m in 0..m_count {
            let w: f64 = rng.sample(StandardNormal);
            ranges[(m, n)] = (anchors.points().column(m) - s).norm() + sigma_w * w;
        }
    }
    Ok(RangeMeasurements { ranges, sigma_w })
}

/// Simulation setup read from a scenario file.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub conformation: Conformation,
    pub anchors: AnchorSet,
    pub prior: TransformPrior,
    pub sigma_w: Vec<f64>,
    pub generator_mode: GeneratorMode,
}

impl Scenario {
    /// Unit-cube body inside a 20 m anchor cube, default priors and sweep.
    pub fn unit_cube() -> Self {
        Self {
            conformation: unit_cube_conformation(),
            anchors: cube_anchors(10.0).expect("valid cube"),
            prior: TransformPrior::default(),
            sigma_w: DEFAULT_SIGMA_SWEEP.to_vec(),
            generator_mode: GeneratorMode::ExactRotation,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RblError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            RblError::Parse { reason, .. } => RblError::Parse {
                what: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| RblError::Parse {
            what: "scenario".into(),
            reason: e.to_string(),
        })?;
        file.try_into()
    }

    pub fn to_toml_string(&self) -> String {
        let file = ScenarioFile::from(self);
        toml::to_string(&file).expect("scenario serializes")
    }
}

/// Default noise sweep (meters).
pub const DEFAULT_SIGMA_SWEEP: [f64; 6] = [0.001, 0.01, 0.05, 0.1, 0.5, 1.0];

/// On-disk scenario schema. Matrices are 3×K, flattened row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    n_sensors: usize,
    m_anchors: usize,
    conformation: Vec<f64>,
    anchors: Vec<f64>,
    phi_theta_deg2: f64,
    phi_t_m2: f64,
    sigma_w: Vec<f64>,
    #[serde(default)]
    generator_mode: GeneratorMode,
}

fn matrix_from_rows(name: &'static str, values: &[f64], cols: usize) -> Result<Matrix3xX<f64>> {
    if values.len() != 3 * cols {
        return Err(RblError::DimensionMismatch {
            context: name,
            expected: 3 * cols,
            actual: values.len(),
        });
    }
    Ok(Matrix3xX::from_row_slice(values))
}

fn rows_of(m: &Matrix3xX<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl TryFrom<ScenarioFile> for Scenario {
    type Error = RblError;

    fn try_from(f: ScenarioFile) -> Result<Self> {
        let conformation = Conformation::new(matrix_from_rows(
            "conformation",
            &f.conformation,
            f.n_sensors,
        )?)?;
        let anchors = AnchorSet::new(matrix_from_rows("anchors", &f.anchors, f.m_anchors)?)?;
        let prior = TransformPrior::new(f.phi_theta_deg2, f.phi_t_m2)?;
        if let Some(bad) = f.sigma_w.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(RblError::InvalidParameter {
                name: "sigma_w",
                reason: format!("must be non-negative, got {bad}"),
            });
        }
        Ok(Scenario {
            conformation,
            anchors,
            prior,
            sigma_w: f.sigma_w,
            generator_mode: f.generator_mode,
        })
    }
}

impl From<&Scenario> for ScenarioFile {
    fn from(s: &Scenario) -> Self {
        ScenarioFile {
            n_sensors: s.conformation.n_sensors(),
            m_anchors: s.anchors.n_anchors(),
            conformation: rows_of(s.conformation.points()),
            anchors: rows_of(s.anchors.points()),
            phi_theta_deg2: s.prior.phi_theta_deg2,
            phi_t_m2: s.prior.phi_t_m2,
            sigma_w: s.sigma_w.clone(),
            generator_mode: s.generator_mode,
        }
    }
}
