//! Trajectory evaluation: first-pose-aligned absolute trajectory error and
//! per-frame relative errors.

use super::{IoError, TrajectoryRecord};
use crate::geometry::RigidTransform;
use nalgebra::Vector3;

/// Evaluation summary. Absolute errors are computed after aligning the
/// estimate's first associated pose onto the ground truth's; per-frame
/// errors compare consecutive relative transforms (elementwise absolute
/// differences, Euler angles in degrees).
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// RMSE of absolute translation error, meters.
    pub rmse_translation: f64,
    /// RMSE of absolute rotation (geodesic) error, degrees.
    pub rmse_rotation_deg: f64,
    /// Per-axis RMSE of absolute translation error, meters.
    pub rmse_translation_axes: [f64; 3],
    /// Per-frame relative translation error vectors `|Δt|`, meters.
    pub per_frame_et: Vec<Vector3<f64>>,
    /// Per-frame relative rotation error vectors `|Δeuler|`, degrees.
    pub per_frame_er: Vec<Vector3<f64>>,
    pub mean_et: f64,
    pub std_et: f64,
    pub mean_er_deg: f64,
    pub std_er_deg: f64,
    /// Number of associated pose pairs.
    pub pairs: usize,
}

fn euler_or_log(rot: &crate::geometry::Rotation) -> (f64, f64, f64) {
    // Relative rotations are small in practice; at gimbal lock fall back to
    // the axis-angle vector, which agrees to first order.
    rot.euler_angles().unwrap_or_else(|_| {
        let w = rot.log();
        (w.x, w.y, w.z)
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Associates poses by nearest stamp within `time_tolerance` (seconds) and
/// computes the error report. Needs at least two associated pairs.
pub fn evaluate(
    estimate: &[TrajectoryRecord],
    ground_truth: &[TrajectoryRecord],
    time_tolerance: f64,
) -> Result<EvalReport, IoError> {
    let mut pairs: Vec<(RigidTransform, RigidTransform)> = Vec::new();
    for est in estimate {
        let nearest = ground_truth.iter().min_by(|a, b| {
            (a.stamp - est.stamp)
                .abs()
                .partial_cmp(&(b.stamp - est.stamp).abs())
                .unwrap()
        });
        if let Some(gt) = nearest {
            if (gt.stamp - est.stamp).abs() <= time_tolerance {
                pairs.push((est.pose, gt.pose));
            }
        }
    }
    if pairs.len() < 2 {
        return Err(IoError::NoAssociation);
    }

    // Gauge: move the estimate so its first pose coincides with the truth.
    let gauge = pairs[0].1.compose(&pairs[0].0.invert());
    let aligned: Vec<(RigidTransform, RigidTransform)> = pairs
        .iter()
        .map(|(est, gt)| (gauge.compose(est), *gt))
        .collect();

    let mut sq_trans = 0.0;
    let mut sq_axes = [0.0f64; 3];
    let mut sq_rot = 0.0;
    for (est, gt) in &aligned {
        let dt = est.translation - gt.translation;
        sq_trans += dt.norm_squared();
        for k in 0..3 {
            sq_axes[k] += dt[k] * dt[k];
        }
        let angle = est.rotation.angle_to(&gt.rotation).to_degrees();
        sq_rot += angle * angle;
    }
    let n = aligned.len() as f64;

    let mut per_frame_et = Vec::with_capacity(aligned.len() - 1);
    let mut per_frame_er = Vec::with_capacity(aligned.len() - 1);
    for w in aligned.windows(2) {
        let rel_est = w[0].0.invert().compose(&w[1].0);
        let rel_gt = w[0].1.invert().compose(&w[1].1);
        let dt = rel_est.translation - rel_gt.translation;
        per_frame_et.push(Vector3::new(dt.x.abs(), dt.y.abs(), dt.z.abs()));
        let (r1, p1, y1) = euler_or_log(&rel_est.rotation);
        let (r2, p2, y2) = euler_or_log(&rel_gt.rotation);
        per_frame_er.push(
            Vector3::new((r1 - r2).abs(), (p1 - p2).abs(), (y1 - y2).abs()).map(f64::to_degrees),
        );
    }
    let et_mags: Vec<f64> = per_frame_et.iter().map(|v| v.norm()).collect();
    let er_mags: Vec<f64> = per_frame_er.iter().map(|v| v.norm()).collect();
    let (mean_et, std_et) = mean_std(&et_mags);
    let (mean_er_deg, std_er_deg) = mean_std(&er_mags);

    Ok(EvalReport {
        rmse_translation: (sq_trans / n).sqrt(),
        rmse_rotation_deg: (sq_rot / n).sqrt(),
        rmse_translation_axes: [
            (sq_axes[0] / n).sqrt(),
            (sq_axes[1] / n).sqrt(),
            (sq_axes[2] / n).sqrt(),
        ],
        per_frame_et,
        per_frame_er,
        mean_et,
        std_et,
        mean_er_deg,
        std_er_deg,
        pairs: aligned.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use approx::assert_relative_eq;

    fn line_trajectory(offset: Vector3<f64>, n: usize) -> Vec<TrajectoryRecord> {
        (0..n)
            .map(|i| TrajectoryRecord {
                stamp: i as f64 * 0.1,
                pose: RigidTransform::from_translation(
                    Vector3::new(i as f64, 0.0, 0.0) + offset,
                ),
            })
            .collect()
    }

    #[test]
    fn self_evaluation_is_exactly_zero() {
        let traj = line_trajectory(Vector3::zeros(), 20);
        let report = evaluate(&traj, &traj, 0.05).unwrap();
        assert_eq!(report.rmse_translation, 0.0);
        assert_eq!(report.rmse_rotation_deg, 0.0);
        assert!(report.per_frame_et.iter().all(|v| v.norm() == 0.0));
        assert!(report.per_frame_er.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn constant_offset_absorbed_by_gauge() {
        let gt = line_trajectory(Vector3::zeros(), 20);
        let est = line_trajectory(Vector3::new(1.0, 0.0, 0.0), 20);
        let report = evaluate(&est, &gt, 0.05).unwrap();
        assert_relative_eq!(report.rmse_translation, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn relative_yaw_error_two_frames() {
        // Ground truth turns 10° between frames, the estimate 12°: the
        // per-frame yaw error is 2°.
        let gt = vec![
            TrajectoryRecord {
                stamp: 0.0,
                pose: RigidTransform::identity(),
            },
            TrajectoryRecord {
                stamp: 0.1,
                pose: RigidTransform::from_rotation(Rotation::rot_z(10f64.to_radians())),
            },
        ];
        let est = vec![
            TrajectoryRecord {
                stamp: 0.0,
                pose: RigidTransform::identity(),
            },
            TrajectoryRecord {
                stamp: 0.1,
                pose: RigidTransform::from_rotation(Rotation::rot_z(12f64.to_radians())),
            },
        ];
        let report = evaluate(&est, &gt, 0.05).unwrap();
        assert_eq!(report.per_frame_er.len(), 1);
        assert_relative_eq!(report.per_frame_er[0].z, 2.0, epsilon = 1e-9);
        assert_relative_eq!(report.per_frame_er[0].x, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn no_association_when_stamps_disjoint() {
        let gt = line_trajectory(Vector3::zeros(), 5);
        let est: Vec<TrajectoryRecord> = line_trajectory(Vector3::zeros(), 5)
            .into_iter()
            .map(|mut r| {
                r.stamp += 100.0;
                r
            })
            .collect();
        assert!(matches!(
            evaluate(&est, &gt, 0.05),
            Err(IoError::NoAssociation)
        ));
    }
}
