//! Rollout evaluation metrics: temporally averaged position, rotation, and
//! penetration errors, plus log-normal aggregates for reporting.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::Trajectory;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("matrix is not a proper rotation (orthonormality/det defect {0:.3e})")]
    NotARotation(f64),
    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Temporally averaged rollout errors for one trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutErrors {
    /// Mean position error (m).
    pub e_pos: f64,
    /// Mean rotation angle error (rad).
    pub e_rot: f64,
    /// Mean deepest-vertex penetration of the true surface (m).
    pub e_pen: f64,
    /// Number of compared steps.
    pub n: usize,
}

impl RolloutErrors {
    /// Penetration as a percentage of the block width.
    pub fn e_pen_percent(&self, width: f64) -> f64 {
        100.0 * self.e_pen / width
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), MetricsError> {
    let defect = (r.transpose() * r - Matrix3::identity()).amax();
    let det_defect = (r.determinant() - 1.0).abs();
    let worst = defect.max(det_defect);
    if worst > 1e-6 {
        return Err(MetricsError::NotARotation(worst));
    }
    Ok(())
}

/// Angle of the relative rotation between two rotation matrices (radians).
pub fn rotation_angle(r_a: &Matrix3<f64>, r_b: &Matrix3<f64>) -> Result<f64, MetricsError> {
    check_rotation(r_a)?;
    check_rotation(r_b)?;
    let c = ((r_a.transpose() * r_b).trace() - 1.0) / 2.0;
    Ok(c.clamp(-1.0, 1.0).acos())
}

/// Temporal mean of position and rotation errors between a predicted and a
/// reference trajectory (paper Eq. 18).
pub fn rollout_errors(
    predicted: &Trajectory,
    truth: &Trajectory,
) -> Result<(f64, f64), MetricsError> {
    if predicted.states.len() != truth.states.len() {
        return Err(MetricsError::LengthMismatch(
            predicted.states.len(),
            truth.states.len(),
        ));
    }
    let n = predicted.states.len();
    let mut e_pos = 0.0;
    let mut e_rot = 0.0;
    for (a, b) in predicted.states.iter().zip(&truth.states) {
        e_pos += (a.p - b.p).norm();
        let ra = Rotation3::from(a.quat).into_inner();
        let rb = Rotation3::from(b.quat).into_inner();
        e_rot += rotation_angle(&ra, &rb)?.abs();
    }
    Ok((e_pos / n as f64, e_rot / n as f64))
}

/// Temporal mean of the deepest true-vertex penetration below the true
/// ground plane `normal . x = offset` (paper Eq. 19).
pub fn penetration_metric(
    predicted: &Trajectory,
    true_vertices: &[Vector3<f64>],
    true_normal: &Vector3<f64>,
    true_offset: f64,
) -> f64 {
    let mut total = 0.0;
    for s in &predicted.states {
        let r = s.quat.to_rotation_matrix();
        let mut deepest = 0.0f64;
        for v in true_vertices {
            let phi = true_normal.dot(&(s.p + r * v)) - true_offset;
            deepest = deepest.max(-phi);
        }
        total += deepest;
    }
    total / predicted.states.len() as f64
}

/// Geometric mean and 95% interval of strictly positive samples under a
/// log-normal model (the paper's Figure 5 aggregation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogNormalSummary {
    pub geometric_mean: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub n: usize,
}

pub fn log_normal_summary(samples: &[f64], floor: f64) -> LogNormalSummary {
    let n = samples.len();
    assert!(n > 0, "empty sample set");
    let logs: Vec<f64> = samples.iter().map(|&x| x.max(floor).ln()).collect();
    let mean = logs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let sd = var.sqrt();
    LogNormalSummary {
        geometric_mean: mean.exp(),
        lo95: (mean - 1.96 * sd).exp(),
        hi95: (mean + 1.96 * sd).exp(),
        n,
    }
}
