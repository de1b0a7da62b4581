//! KITTI-style binary scan files: little-endian f32 quadruples
//! `(x, y, z, intensity)`, 16 bytes per record.

use super::IoError;
use crate::scan::{Point, Scan};
use crate::synth::LidarModel;
use nalgebra::Vector3;
use std::io::Write;
use std::path::Path;

const RECORD: usize = 16;

/// Reads a binary scan, inferring each point's ring by nearest vertical
/// angle against the sensor model's ring table and its sweep time from the
/// azimuth. The returned scan carries stamp 0; the caller assigns it.
pub fn read_scan_bin(path: &Path, model: &LidarModel) -> Result<Scan, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    if bytes.len() % RECORD != 0 {
        return Err(IoError::MalformedFile {
            path: path.display().to_string(),
            offset: (bytes.len() - bytes.len() % RECORD) as u64,
            reason: format!(
                "file size {} is not a multiple of {RECORD} bytes",
                bytes.len()
            ),
        });
    }

    let ring_table: Vec<f64> = (0..model.rings)
        .map(|r| model.ring_elevation_deg(r).to_radians())
        .collect();
    let sigma = if model.range_noise_sigma > 0.0 {
        model.range_noise_sigma
    } else {
        crate::scan::DEFAULT_NOISE_SIGMA
    };

    let mut points = Vec::with_capacity(bytes.len() / RECORD);
    for (i, record) in bytes.chunks_exact(RECORD).enumerate() {
        let mut v = [0f32; 4];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = f32::from_le_bytes(record[4 * k..4 * k + 4].try_into().unwrap());
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(IoError::MalformedFile {
                path: path.display().to_string(),
                offset: (i * RECORD) as u64,
                reason: "non-finite coordinate".into(),
            });
        }
        let position = Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64);
        let range = position.norm();
        if range < 1e-9 {
            continue;
        }
        let elevation = (position.z / range).asin();
        let ring = ring_table
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - elevation)
                    .abs()
                    .partial_cmp(&(b.1 - elevation).abs())
                    .unwrap()
            })
            .map(|(r, _)| r as u32)
            .unwrap_or(0);
        let azimuth = {
            let az = position.y.atan2(position.x);
            if az < 0.0 {
                az + 2.0 * std::f64::consts::PI
            } else {
                az
            }
        };
        let time_offset = azimuth / (2.0 * std::f64::consts::PI) * model.sweep_duration;
        let dir = position / range;
        points.push(
            Point::new(position, time_offset, ring)
                .with_noise_cov(sigma * sigma * dir * dir.transpose()),
        );
    }
    Ok(Scan::from_points(points, 0.0, model.sweep_duration))
}

/// Writes a scan as binary records; intensity is written as zero.
pub fn write_scan_bin(scan: &Scan, path: &Path) -> Result<(), IoError> {
    let mut out = Vec::with_capacity(scan.len() * RECORD);
    for p in scan.points() {
        for v in [
            p.position.x as f32,
            p.position.y as f32,
            p.position.z as f32,
            0.0f32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    file.write_all(&out).map_err(|e| IoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> LidarModel {
        LidarModel::default()
    }

    #[test]
    fn single_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let scan = read_scan_bin(&path, &model()).unwrap();
        assert_eq!(scan.len(), 1);
        let p = scan.points()[0].position;
        assert!((p - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-6);
    }

    #[test]
    fn empty_file_is_empty_scan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        std::fs::write(&path, b"").unwrap();
        let scan = read_scan_bin(&path, &model()).unwrap();
        assert!(scan.is_empty());
    }

    #[test]
    fn truncated_file_locates_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        std::fs::write(&path, vec![0u8; 24]).unwrap();
        match read_scan_bin(&path, &model()) {
            Err(IoError::MalformedFile { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected MalformedFile, got {other:?}"),
        }
    }

    #[test]
    fn nan_coordinate_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.bin");
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [f32::NAN, 0.0, 0.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        match read_scan_bin(&path, &model()) {
            Err(IoError::MalformedFile { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected MalformedFile, got {other:?}"),
        }
    }

    #[test]
    fn write_read_preserves_positions() {
        use crate::synth::{generate_world, simulate_scan, WorldParams};
        use crate::geometry::RigidTransform;
        let world = generate_world(15, &WorldParams::default());
        let m = LidarModel::coarse();
        let scan = simulate_scan(
            &world,
            &RigidTransform::from_translation(Vector3::new(0.0, 0.0, 1.3)),
            &m,
            0,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.bin");
        write_scan_bin(&scan, &path).unwrap();
        let back = read_scan_bin(&path, &m).unwrap();
        assert_eq!(back.len(), scan.len());
        // f32 quantization only; ordering may differ, so check the nearest
        // reloaded point of every original one.
        let tree = crate::back_end::KdTree::build(
            back.points().iter().map(|p| p.position).collect(),
        );
        for p in scan.points() {
            let nn = tree.nearest(&p.position, 1);
            assert!(nn[0].1.sqrt() < 1e-4, "no close match for {:?}", p.position);
        }
    }
}
