//! Dataset ingestion, trajectory/map export, configuration, and evaluation
//! metrics.

mod config;
mod eval;
mod pcd;
mod scan_bin;
mod trajectory;

pub use config::{ConfigError, PipelineConfig};
pub use eval::{evaluate, EvalReport};
pub use pcd::write_map_pcd;
pub use scan_bin::{read_scan_bin, write_scan_bin};
pub use trajectory::{
    read_poses, write_trajectory, TrajectoryFormat, TrajectoryRecord,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: malformed file at byte offset {offset}: {reason}")]
    MalformedFile {
        path: String,
        offset: u64,
        reason: String,
    },
    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: rotation not orthonormal (residual {residual:.3e} beyond 1e-3)")]
    NonOrthonormalRotation {
        path: String,
        line: usize,
        residual: f64,
    },
    #[error("fewer than 2 pose pairs associate within the time tolerance")]
    NoAssociation,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl IoError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
