//! Trajectory text formats: TUM (`stamp tx ty tz qx qy qz qw`) and KITTI
//! (12 row-major values of the 3×4 `[R | t]` matrix per line, stamps
//! implied by line index).

use super::IoError;
use crate::geometry::{RigidTransform, Rotation};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrajectoryFormat {
    #[default]
    Tum,
    Kitti,
}

impl std::str::FromStr for TrajectoryFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tum" => Ok(TrajectoryFormat::Tum),
            "kitti" => Ok(TrajectoryFormat::Kitti),
            other => Err(format!("unknown trajectory format '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectoryRecord {
    pub stamp: f64,
    pub pose: RigidTransform,
}

fn parse_floats(path: &Path, line_no: usize, line: &str) -> Result<Vec<f64>, IoError> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map_err(|_| IoError::MalformedLine {
                path: path.display().to_string(),
                line: line_no,
                reason: format!("not a number: '{tok}'"),
            })
        })
        .collect()
}

/// Reads a trajectory file. TUM quaternions are renormalized when their norm
/// is within 1e-3 of one and rejected otherwise; KITTI rotations must be
/// orthonormal within 1e-3 and are snapped onto SO(3).
pub fn read_poses(path: &Path, format: TrajectoryFormat) -> Result<Vec<TrajectoryRecord>, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = parse_floats(path, line_no, line)?;
        let record = match format {
            TrajectoryFormat::Tum => {
                if values.len() != 8 {
                    return Err(IoError::MalformedLine {
                        path: path.display().to_string(),
                        line: line_no,
                        reason: format!("expected 8 fields, found {}", values.len()),
                    });
                }
                let q = Quaternion::new(values[7], values[4], values[5], values[6]);
                let norm = q.norm();
                if (norm - 1.0).abs() > 1e-3 {
                    return Err(IoError::MalformedLine {
                        path: path.display().to_string(),
                        line: line_no,
                        reason: format!("quaternion norm {norm:.6} beyond 1e-3 of unit"),
                    });
                }
                let unit = UnitQuaternion::from_quaternion(q);
                TrajectoryRecord {
                    stamp: values[0],
                    pose: RigidTransform::new(
                        Rotation::from_matrix_unchecked(*unit.to_rotation_matrix().matrix()),
                        Vector3::new(values[1], values[2], values[3]),
                    ),
                }
            }
            TrajectoryFormat::Kitti => {
                if values.len() != 12 {
                    return Err(IoError::MalformedLine {
                        path: path.display().to_string(),
                        line: line_no,
                        reason: format!("expected 12 fields, found {}", values.len()),
                    });
                }
                let m = Matrix3::new(
                    values[0], values[1], values[2], //
                    values[4], values[5], values[6], //
                    values[8], values[9], values[10],
                );
                let residual = (m.transpose() * m - Matrix3::identity()).norm();
                if residual > 1e-3 || m.determinant() < 0.0 {
                    return Err(IoError::NonOrthonormalRotation {
                        path: path.display().to_string(),
                        line: line_no,
                        residual,
                    });
                }
                TrajectoryRecord {
                    stamp: records.len() as f64,
                    pose: RigidTransform::new(
                        Rotation::from_matrix_unchecked(m).orthonormalized(),
                        Vector3::new(values[3], values[7], values[11]),
                    ),
                }
            }
        };
        if let Some(last) = records.last() {
            let last: &TrajectoryRecord = last;
            if record.stamp <= last.stamp {
                return Err(IoError::MalformedLine {
                    path: path.display().to_string(),
                    line: line_no,
                    reason: format!(
                        "stamps must strictly increase ({} after {})",
                        record.stamp, last.stamp
                    ),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

fn rotation_to_quaternion(rot: &Rotation) -> UnitQuaternion<f64> {
    UnitQuaternion::from_matrix(rot.matrix())
}

/// Writes a trajectory with 9 fractional digits per field.
pub fn write_trajectory(
    records: &[TrajectoryRecord],
    path: &Path,
    format: TrajectoryFormat,
) -> Result<(), IoError> {
    let mut out = String::new();
    for r in records {
        match format {
            TrajectoryFormat::Tum => {
                let q = rotation_to_quaternion(&r.pose.rotation);
                let t = r.pose.translation;
                writeln!(
                    out,
                    "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                    r.stamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
                )
                .unwrap();
            }
            TrajectoryFormat::Kitti => {
                let m = r.pose.rotation.matrix();
                let t = r.pose.translation;
                writeln!(
                    out,
                    "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                    m[(0, 0)], m[(0, 1)], m[(0, 2)], t.x, //
                    m[(1, 0)], m[(1, 1)], m[(1, 2)], t.y, //
                    m[(2, 0)], m[(2, 1)], m[(2, 2)], t.z
                )
                .unwrap();
            }
        }
    }
    std::fs::write(path, out).map_err(|e| IoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitti_identity_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        std::fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        let records = read_poses(&path, TrajectoryFormat::Kitti).unwrap();
        assert_eq!(records.len(), 1);
        let (rot, trans) = records[0].pose.error_to(&RigidTransform::identity());
        assert!(rot < 1e-12 && trans < 1e-12);
    }

    #[test]
    fn tum_identity_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.tum");
        std::fs::write(&path, "0.0 0 0 0 0 0 0 1\n").unwrap();
        let records = read_poses(&path, TrajectoryFormat::Tum).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].stamp, 0.0);
        let (rot, trans) = records[0].pose.error_to(&RigidTransform::identity());
        assert!(rot < 1e-12 && trans < 1e-12);
    }

    #[test]
    fn bad_quaternion_norm_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.tum");
        std::fs::write(&path, "0.0 0 0 0 0 0 0 0.9\n").unwrap();
        match read_poses(&path, TrajectoryFormat::Tum) {
            Err(IoError::MalformedLine { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }

    #[test]
    fn non_orthonormal_kitti_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        std::fs::write(&path, "1 0 0 0 0 2 0 0 0 0 1 0\n").unwrap();
        assert!(matches!(
            read_poses(&path, TrajectoryFormat::Kitti),
            Err(IoError::NonOrthonormalRotation { line: 1, .. })
        ));
    }

    #[test]
    fn non_increasing_stamps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.tum");
        std::fs::write(&path, "1.0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n").unwrap();
        assert!(matches!(
            read_poses(&path, TrajectoryFormat::Tum),
            Err(IoError::MalformedLine { line: 2, .. })
        ));
    }

    #[test]
    fn empty_trajectory_writes_valid_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tum");
        write_trajectory(&[], &path, TrajectoryFormat::Tum).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert!(read_poses(&path, TrajectoryFormat::Tum).unwrap().is_empty());
    }

    #[test]
    fn round_trip_both_formats() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(101);
        let records: Vec<TrajectoryRecord> = (0..25)
            .map(|i| {
                let axis = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalize();
                TrajectoryRecord {
                    stamp: i as f64 * 0.1,
                    pose: RigidTransform::new(
                        Rotation::exp(axis * rng.gen_range(0.0..3.0)),
                        Vector3::new(
                            rng.gen_range(-50.0..50.0),
                            rng.gen_range(-50.0..50.0),
                            rng.gen_range(-5.0..5.0),
                        ),
                    ),
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        for format in [TrajectoryFormat::Tum, TrajectoryFormat::Kitti] {
            let path = dir.path().join(format!("t_{format:?}.txt"));
            write_trajectory(&records, &path, format).unwrap();
            let back = read_poses(&path, format).unwrap();
            assert_eq!(back.len(), records.len());
            for (a, b) in records.iter().zip(&back) {
                let (rot, trans) = a.pose.error_to(&b.pose);
                assert!(rot < 1e-8, "rotation {rot}");
                assert!(trans < 1e-8, "translation {trans}");
                if format == TrajectoryFormat::Tum {
                    assert!((a.stamp - b.stamp).abs() < 1e-9);
                }
            }
        }
    }
}
