//! ASCII PCD v0.7 export, `FIELDS x y z`.

use super::IoError;
use nalgebra::Vector3;
use std::fmt::Write as _;
use std::path::Path;

pub fn write_map_pcd(points: &[Vector3<f64>], path: &Path) -> Result<(), IoError> {
    let mut out = String::new();
    writeln!(out, "# .PCD v0.7 - Point Cloud Data file format").unwrap();
    writeln!(out, "VERSION 0.7").unwrap();
    writeln!(out, "FIELDS x y z").unwrap();
    writeln!(out, "SIZE 4 4 4").unwrap();
    writeln!(out, "TYPE F F F").unwrap();
    writeln!(out, "COUNT 1 1 1").unwrap();
    writeln!(out, "WIDTH {}", points.len()).unwrap();
    writeln!(out, "HEIGHT 1").unwrap();
    writeln!(out, "VIEWPOINT 0 0 0 1 0 0 0").unwrap();
    writeln!(out, "POINTS {}", points.len()).unwrap();
    writeln!(out, "DATA ascii").unwrap();
    for p in points {
        writeln!(out, "{} {} {}", p.x as f32, p.y as f32, p.z as f32).unwrap();
    }
    std::fs::write(path, out).map_err(|e| IoError::io(path, e))
}
