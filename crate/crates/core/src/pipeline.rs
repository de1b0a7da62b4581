//! Pipeline runners tying the front-end and back-end together.
//!
//! [`SlamEngine`] is the sequential engine used by tests, `odom`, and
//! `bench`. [`run_threaded`] drives the same stages with the concurrency
//! model of the full system: the caller's thread produces front-end frames
//! into a bounded queue, a consumer thread folds them into the back-end, and
//! a checking thread watches for loop closures.

use crate::back_end::BackEnd;
use crate::front_end::{FrameDiagnostics, FrontEnd};
use crate::geometry::RigidTransform;
use crate::io::{PipelineConfig, TrajectoryRecord};
use crate::scan::{deskew, extract_features, FeatureSet, Scan};
use nalgebra::Vector3;
use std::sync::mpsc::sync_channel;
use std::sync::{Arc, RwLock};

/// Per-frame stage timings, milliseconds. Columns of the bench CSV.
#[derive(Debug, Clone, Default)]
pub struct StageTimings {
    pub frame: usize,
    pub deskew_ms: f64,
    pub features_ms: f64,
    pub voxelize_ms: f64,
    pub rotation_ms: f64,
    pub translation_ms: f64,
    pub backend_ms: f64,
    pub total_ms: f64,
}

pub const TIMING_CSV_HEADER: &str =
    "frame,deskew_ms,features_ms,voxelize_ms,rotation_ms,translation_ms,backend_ms,total_ms";

impl StageTimings {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
            self.frame,
            self.deskew_ms,
            self.features_ms,
            self.voxelize_ms,
            self.rotation_ms,
            self.translation_ms,
            self.backend_ms,
            self.total_ms
        )
    }

    /// Front-end share of the frame (everything but the back-end).
    pub fn front_end_ms(&self) -> f64 {
        self.deskew_ms + self.features_ms + self.voxelize_ms + self.rotation_ms
            + self.translation_ms
    }
}

/// Sequential SLAM engine: deskew → features → front-end → back-end.
pub struct SlamEngine {
    cfg: PipelineConfig,
    front_end: FrontEnd,
    back_end: Option<BackEnd>,
    timings: Vec<StageTimings>,
    /// Poses straight from the front-end chain (used when the back-end is
    /// disabled).
    odometry: Vec<TrajectoryRecord>,
    frames: usize,
}

/// What one processed frame produced.
#[derive(Debug, Clone)]
pub struct FrameResult {
    /// Refined world pose of this scan.
    pub pose: RigidTransform,
    pub diagnostics: FrameDiagnostics,
    pub keyframe_added: bool,
    pub loop_closed: bool,
}

impl SlamEngine {
    pub fn new(cfg: PipelineConfig) -> Self {
        let mut fe_cfg = cfg.front_end.clone();
        fe_cfg.solver = cfg.solver.clone();
        let mut be_cfg = cfg.back_end.clone();
        be_cfg.solver = cfg.solver.clone();
        SlamEngine {
            front_end: FrontEnd::new(fe_cfg),
            back_end: cfg.backend.then(|| BackEnd::new(be_cfg)),
            cfg,
            timings: Vec::new(),
            odometry: Vec::new(),
            frames: 0,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn process(&mut self, scan: &Scan) -> FrameResult {
        let total = std::time::Instant::now();
        let mut timing = StageTimings {
            frame: self.frames,
            ..Default::default()
        };

        let stage = std::time::Instant::now();
        let deskewed = if self.cfg.deskew {
            deskew(scan, &self.front_end.last_relative())
        } else {
            scan.clone()
        };
        timing.deskew_ms = stage.elapsed().as_secs_f64() * 1e3;

        let stage = std::time::Instant::now();
        let features = extract_features(&deskewed, &self.cfg.features);
        timing.features_ms = stage.elapsed().as_secs_f64() * 1e3;

        let (relative, diagnostics) = self.front_end.process_scan(&deskewed);
        timing.voxelize_ms = diagnostics.voxelize_ms;
        timing.rotation_ms = diagnostics.rotation_ms;
        timing.translation_ms = diagnostics.translation_ms;

        let stage = std::time::Instant::now();
        let (pose, keyframe_added, loop_closed) = match &mut self.back_end {
            Some(be) => {
                let prev_refined = (self.frames > 0).then(|| be.current_pose());
                let outcome = be.process(&relative, scan.stamp, &features);
                // Feed the refined odometry back so deskew and the forward
                // location prediction run off the corrected chain.
                self.front_end.apply_refinement(outcome.pose, prev_refined);
                (
                    outcome.pose,
                    outcome.keyframe_added,
                    outcome.loop_closed.is_some(),
                )
            }
            None => (self.front_end.pose(), false, false),
        };
        timing.backend_ms = stage.elapsed().as_secs_f64() * 1e3;

        self.odometry.push(TrajectoryRecord {
            stamp: scan.stamp,
            pose: self.front_end.pose(),
        });
        timing.total_ms = total.elapsed().as_secs_f64() * 1e3;
        self.timings.push(timing);
        self.frames += 1;

        FrameResult {
            pose,
            diagnostics,
            keyframe_added,
            loop_closed,
        }
    }

    pub fn timings(&self) -> &[StageTimings] {
        &self.timings
    }

    /// Final trajectory: the back-end's corrected chain when enabled, the
    /// raw front-end odometry otherwise.
    pub fn trajectory(&self) -> Vec<TrajectoryRecord> {
        match &self.back_end {
            Some(be) => be
                .trajectory()
                .into_iter()
                .map(|(stamp, pose)| TrajectoryRecord { stamp, pose })
                .collect(),
            None => self.odometry.clone(),
        }
    }

    pub fn back_end(&self) -> Option<&BackEnd> {
        self.back_end.as_ref()
    }

    /// World feature map for export (empty without a back-end).
    pub fn map_points(&self) -> Vec<Vector3<f64>> {
        self.back_end
            .as_ref()
            .map(|be| be.map_points())
            .unwrap_or_default()
    }
}

/// One frame handed from the front-end producer to the back-end consumer.
struct FrameJob {
    relative: RigidTransform,
    /// The producer's own world pose for this frame, so the consumer can
    /// publish a correction delta.
    raw_pose: RigidTransform,
    stamp: f64,
    features: FeatureSet,
}

/// Runs the full pipeline with the production threading model: front-end on
/// the calling thread, back-end consumer and loop-closure checker on worker
/// threads, connected by a bounded queue (blocking producer).
///
/// Returns the corrected trajectory and per-frame timings.
pub fn run_threaded(
    cfg: &PipelineConfig,
    scans: impl Iterator<Item = Scan>,
) -> (Vec<TrajectoryRecord>, Vec<StageTimings>, Vec<Vector3<f64>>) {
    let mut fe_cfg = cfg.front_end.clone();
    fe_cfg.solver = cfg.solver.clone();
    let mut be_cfg = cfg.back_end.clone();
    be_cfg.solver = cfg.solver.clone();

    let mut back_end = BackEnd::new(be_cfg);
    back_end.detect_loops_inline = false;
    let shared = Arc::new(RwLock::new(back_end));
    let (tx, rx) = sync_channel::<FrameJob>(cfg.back_end.queue_capacity.max(1));

    // Latest (raw front-end pose, refined pose) pair, for re-anchoring the
    // producer's chain as corrections become available.
    let correction: Arc<RwLock<Option<(RigidTransform, RigidTransform)>>> =
        Arc::new(RwLock::new(None));
    let consumer_shared = Arc::clone(&shared);
    let consumer_correction = Arc::clone(&correction);
    let consumer = std::thread::spawn(move || {
        while let Ok(job) = rx.recv() {
            let mut be = consumer_shared.write().expect("back-end lock");
            let outcome = be.process(&job.relative, job.stamp, &job.features);
            drop(be);
            *consumer_correction.write().expect("correction lock") =
                Some((job.raw_pose, outcome.pose));
        }
    });

    let checker_shared = Arc::clone(&shared);
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let checker_stop = Arc::clone(&stop);
    let checker = std::thread::spawn(move || {
        let mut checked_upto = 0usize;
        while !checker_stop.load(std::sync::atomic::Ordering::Relaxed) {
            std::thread::sleep(std::time::Duration::from_millis(20));
            let newest = checker_shared
                .read()
                .expect("back-end lock")
                .keyframes()
                .len();
            if newest > checked_upto {
                checked_upto = newest;
                let mut be = checker_shared.write().expect("back-end lock");
                be.check_loop();
            }
        }
        // Final sweep once the producer is done.
        let mut be = checker_shared.write().expect("back-end lock");
        be.check_loop();
    });

    let mut front_end = FrontEnd::new(fe_cfg);
    let mut timings = Vec::new();
    for (frame, scan) in scans.enumerate() {
        let total = std::time::Instant::now();
        let mut timing = StageTimings {
            frame,
            ..Default::default()
        };
        let stage = std::time::Instant::now();
        let deskewed = if cfg.deskew {
            deskew(&scan, &front_end.last_relative())
        } else {
            scan.clone()
        };
        timing.deskew_ms = stage.elapsed().as_secs_f64() * 1e3;
        let stage = std::time::Instant::now();
        let features = extract_features(&deskewed, &cfg.features);
        timing.features_ms = stage.elapsed().as_secs_f64() * 1e3;
        let (relative, diag) = front_end.process_scan(&deskewed);
        timing.voxelize_ms = diag.voxelize_ms;
        timing.rotation_ms = diag.rotation_ms;
        timing.translation_ms = diag.translation_ms;
        // Blocking send: the producer stalls when the consumer lags by more
        // than the queue capacity.
        tx.send(FrameJob {
            relative,
            raw_pose: front_end.pose(),
            stamp: scan.stamp,
            features,
        })
        .expect("back-end consumer alive");
        // Re-anchor onto the refined chain as corrections arrive.
        if let Some((raw, refined)) = correction.write().expect("correction lock").take() {
            let delta = refined.compose(&raw.invert());
            front_end.apply_world_delta(&delta);
        }
        timing.total_ms = total.elapsed().as_secs_f64() * 1e3;
        timings.push(timing);
    }
    drop(tx);
    consumer.join().expect("consumer thread");
    stop.store(true, std::sync::atomic::Ordering::Relaxed);
    checker.join().expect("checker thread");

    let be = shared.read().expect("back-end lock");
    let trajectory = be
        .trajectory()
        .into_iter()
        .map(|(stamp, pose)| TrajectoryRecord { stamp, pose })
        .collect();
    (trajectory, timings, be.map_points())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{
        generate_trajectory, generate_world, simulate_scan, LidarModel, PathKind,
        TrajectoryParams, WorldParams, WorldPreset,
    };

    fn corridor_scans(n: usize) -> (PipelineConfig, Vec<Scan>) {
        let world = generate_world(
            21,
            &WorldParams {
                preset: WorldPreset::Corridor {
                    length: 60.0,
                    width: 12.0,
                    wall_height: 4.0,
                    cross_walls: 4,
                },
                pillar_count: 8,
                ..Default::default()
            },
        );
        let model = LidarModel::coarse();
        let params = TrajectoryParams {
            kind: PathKind::Line {
                direction: Vector3::x(),
            },
            start: Vector3::new(2.0, 0.0, 1.4),
            speed: 1.0,
            scan_rate: 10.0,
            scan_count: n,
            ..Default::default()
        };
        let mut cfg = PipelineConfig::default();
        cfg.sensor = model.clone();
        let scans = generate_trajectory(&params)
            .into_iter()
            .enumerate()
            .map(|(i, (stamp, pose))| {
                let mut scan = simulate_scan(&world, &pose, &model, 1000 + i as u64);
                scan.stamp = stamp;
                scan
            })
            .collect();
        (cfg, scans)
    }

    #[test]
    fn engine_tracks_straight_course() {
        let (cfg, scans) = corridor_scans(20);
        let mut engine = SlamEngine::new(cfg);
        for scan in &scans {
            engine.process(scan);
        }
        let traj = engine.trajectory();
        assert_eq!(traj.len(), 20);
        // 0.1 m/frame through a 2-m course: end pose within loose bounds.
        let end = traj.last().unwrap().pose.translation;
        assert!((end.x - 1.9).abs() < 0.3, "x = {}", end.x);
        assert!(end.y.abs() < 0.2 && end.z.abs() < 0.2);
    }

    #[test]
    fn threaded_runner_matches_sync_engine_without_loops() {
        let (cfg, scans) = corridor_scans(12);
        let mut engine = SlamEngine::new(cfg.clone());
        for scan in &scans {
            engine.process(scan);
        }
        let sync_traj = engine.trajectory();
        let (threaded_traj, timings, _) = run_threaded(&cfg, scans.into_iter());
        assert_eq!(sync_traj.len(), threaded_traj.len());
        assert_eq!(timings.len(), threaded_traj.len());
        for (a, b) in sync_traj.iter().zip(&threaded_traj) {
            let (rot, trans) = a.pose.error_to(&b.pose);
            assert!(rot < 1e-9 && trans < 1e-9);
        }
    }
}
