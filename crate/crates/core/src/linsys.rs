//! Linear systems built from squared ranges.
//!
//! Squaring `d̃ = ‖a − s‖ + w` gives `d̃² − ‖a‖² = −2aᵀs + ‖s‖² + ξ` with the
//! composite noise `ξ = 2dw + w² ≈ 2dw`. Per sensor this is linear in
//! `(s, ‖s‖²)` ([`PositionSystem`]). Substituting `s = Q_sa(θ)·c + t` and
//! `aᵀQc = (cᵀ ⊗ aᵀ)·vec(Q)` makes it linear in the transformation parameters
//! ([`ParamSystem`]).

use nalgebra::{DMatrix, DVector, SVector, Vector3};

use crate::error::{RblError, Result};
use crate::geometry::{linearization_constants, Conformation, TranslationVector};
use crate::scenario::{AnchorSet, RangeMeasurements};

/// `y = G·x + ξ` for one sensor, `x = (s, ‖s‖²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionSystem {
    pub y: DVector<f64>,
    pub g: DMatrix<f64>,
    pub sensor_index: usize,
    /// Measured ranges for this sensor, one per anchor.
    pub measured_range: Vec<f64>,
}

/// Per-row composite-noise variances.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeNoiseStats {
    pub row_var: Vec<f64>,
    /// Scalar fallback: mean of `row_var`.
    pub n0: f64,
}

impl CompositeNoiseStats {
    /// `4·d̃²·σ_w²` per row, using measured ranges as the distance estimate.
    pub fn from_ranges(measured: &[f64], sigma_w: f64) -> Self {
        let row_var: Vec<f64> = measured
            .iter()
            .map(|d| composite_noise_variance(d.abs(), sigma_w))
            .collect();
        Self::from_row_var(row_var)
    }

    /// Equal weights, for ablations.
    pub fn unit(rows: usize) -> Self {
        Self::from_row_var(vec![1.0; rows])
    }

    pub fn from_row_var(row_var: Vec<f64>) -> Self {
        let n0 = if row_var.is_empty() {
            0.0
        } else {
            row_var.iter().sum::<f64>() / row_var.len() as f64
        };
        Self { row_var, n0 }
    }
}

/// `z = Hθ·θ + Ht·t + ξ`, all sensors stacked sensor-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSystem {
    pub z: Vec<f64>,
    pub h_theta: Vec<Vector3<f64>>,
    pub h_t: Vec<Vector3<f64>>,
    pub row_noise_var: Vec<f64>,
    /// `(anchor m, sensor n)` for each row.
    pub row_index_map: Vec<(usize, usize)>,
    pub measured_range: Vec<f64>,
    pub sigma_w: f64,
}

impl ParamSystem {
    pub fn n_rows(&self) -> usize {
        self.z.len()
    }

    pub fn noise(&self) -> CompositeNoiseStats {
        CompositeNoiseStats::from_row_var(self.row_noise_var.clone())
    }

    /// Rows belonging to a single sensor.
    pub fn sensor_subsystem(&self, n: usize) -> ParamSystem {
        let idx: Vec<usize> = (0..self.n_rows())
            .filter(|&r| self.row_index_map[r].1 == n)
            .collect();
        self.select_rows(&idx)
    }

    /// Sensor indices present, in first-appearance order.
    pub fn sensors(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for &(_, n) in &self.row_index_map {
            if !out.contains(&n) {
                out.push(n);
            }
        }
        out
    }

    /// New system with rows taken in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> ParamSystem {
        ParamSystem {
            z: idx.iter().map(|&r| self.z[r]).collect(),
            h_theta: idx.iter().map(|&r| self.h_theta[r]).collect(),
            h_t: idx.iter().map(|&r| self.h_t[r]).collect(),
            row_noise_var: idx.iter().map(|&r| self.row_noise_var[r]).collect(),
            row_index_map: idx.iter().map(|&r| self.row_index_map[r]).collect(),
            measured_range: idx.iter().map(|&r| self.measured_range[r]).collect(),
            sigma_w: self.sigma_w,
        }
    }
}

/// Translation-cancelled system `z' = Hθ·θ + ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedSystem {
    pub z: Vec<f64>,
    pub h_theta: Vec<Vector3<f64>>,
    pub row_noise_var: Vec<f64>,
}

pub fn composite_noise_variance(d_hat: f64, sigma_w: f64) -> f64 {
    4.0 * d_hat * d_hat * sigma_w * sigma_w
}

pub fn build_position_system(
    ranges: &RangeMeasurements,
    anchors: &AnchorSet,
    n: usize,
) -> Result<PositionSystem> {
    let m_count = anchors.n_anchors();
    if ranges.n_anchors() != m_count {
        return Err(RblError::DimensionMismatch {
            context: "range rows vs anchors",
            expected: m_count,
            actual: ranges.n_anchors(),
        });
    }
    if n >= ranges.n_sensors() {
        return Err(RblError::InvalidParameter {
            name: "sensor index",
            reason: format!("{n} out of range for {} sensors", ranges.n_sensors()),
        });
    }
    let mut y = DVector::zeros(m_count);
    let mut g = DMatrix::zeros(m_count, 4);
    let mut measured = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let a = anchors.anchor(m);
        let d = ranges.ranges[(m, n)];
        y[m] = d * d - a.norm_squared();
        g[(m, 0)] = -2.0 * a[0];
        g[(m, 1)] = -2.0 * a[1];
        g[(m, 2)] = -2.0 * a[2];
        g[(m, 3)] = 1.0;
        measured.push(d);
    }
    Ok(PositionSystem {
        y,
        g,
        sensor_index: n,
        measured_range: measured,
    })
}

/// Stacks the per-sensor parameter systems. `s_norm_sq[n]` supplies `‖sₙ‖²`.
pub fn build_param_system(
    ranges: &RangeMeasurements,
    anchors: &AnchorSet,
    conformation: &Conformation,
    s_norm_sq: &[f64],
) -> Result<ParamSystem> {
    let m_count = anchors.n_anchors();
    let n_count = conformation.n_sensors();
    let checks = [
        ("range rows vs anchors", m_count, ranges.n_anchors()),
        ("range columns vs sensors", n_count, ranges.n_sensors()),
        ("norm estimates vs sensors", n_count, s_norm_sq.len()),
    ];
    for (context, expected, actual) in checks {
        if expected != actual {
            return Err(RblError::DimensionMismatch {
                context,
                expected,
                actual,
            });
        }
    }

    let lin = linearization_constants();
    let rows = m_count * n_count;
    let mut sys = ParamSystem {
        z: Vec::with_capacity(rows),
        h_theta: Vec::with_capacity(rows),
        h_t: Vec::with_capacity(rows),
        row_noise_var: Vec::with_capacity(rows),
        row_index_map: Vec::with_capacity(rows),
        measured_range: Vec::with_capacity(rows),
        sigma_w: ranges.sigma_w,
    };
    for (n, norm_sq) in s_norm_sq.iter().enumerate() {
        let c = conformation.sensor(n);
        for m in 0..m_count {
            let a = anchors.anchor(m);
            let k = kron_row(&c, &a);
            let d = ranges.ranges[(m, n)];
            sys.z
                .push(d * d - a.norm_squared() - norm_sq + 2.0 * k.dot(&lin.gamma));
            sys.h_theta.push(-2.0 * (k.transpose() * lin.l).transpose());
            sys.h_t.push(-2.0 * a);
            sys.row_noise_var
                .push(composite_noise_variance(d.abs(), ranges.sigma_w));
            sys.row_index_map.push((m, n));
            sys.measured_range.push(d);
        }
    }
    Ok(sys)
}

/// `cᵀ ⊗ aᵀ` as a 9-vector: entry `3j + i` is `c_j · a_i`.
fn kron_row(c: &Vector3<f64>, a: &Vector3<f64>) -> SVector<f64, 9> {
    let mut k = SVector::<f64, 9>::zeros();
    for j in 0..3 {
        for i in 0..3 {
            k[3 * j + i] = c[j] * a[i];
        }
    }
    k
}

pub fn cancel_translation(sys: &ParamSystem, t_hat: &TranslationVector) -> ReducedSystem {
    ReducedSystem {
        z: sys
            .z
            .iter()
            .zip(&sys.h_t)
            .map(|(z, h)| z - h.dot(&t_hat.0))
            .collect(),
        h_theta: sys.h_theta.clone(),
        row_noise_var: sys.row_noise_var.clone(),
    }
}
