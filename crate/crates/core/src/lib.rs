//! Rotation-optimized LiDAR-only odometry and SLAM.
//!
//! The front-end estimates ego-motion per scan in three decoupled stages:
//! forward location prediction for a coarse translation, spherical rotation
//! registration over a Gaussian voxel map, and continuous-time translation
//! optimization. The back-end refines poses with scan-to-submap feature
//! alignment and a global factor graph with loop closure.

pub mod back_end;
pub mod front_end;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod scan;
pub mod solver;
pub mod synth;
pub mod voxel_grid;
