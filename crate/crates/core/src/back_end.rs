//! Back-end mapping: keyframe selection, submap assembly, scan-to-submap
//! feature alignment, loop-closure detection, and global factor-graph
//! optimization.

use crate::geometry::{skew, RigidTransform};
use crate::scan::FeatureSet;
use crate::solver::{
    minimize, Method, ResidualBlock, SolveReport, SolverConfig, SolverError, Variable,
};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackEndError {
    #[error("submap too sparse: {edges} edge / {planar} planar points")]
    DegenerateSubmap { edges: usize, planar: usize },
    #[error("solver failed: {0}")]
    NumericalFailure(#[from] SolverError),
}

// ---------------------------------------------------------------------------
// Keyframes

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: u64,
    /// World pose of the sensor at this keyframe.
    pub pose: RigidTransform,
    /// Features in the sensor frame.
    pub features: FeatureSet,
    pub stamp: f64,
}

#[derive(Debug, Clone)]
pub struct KeyframePolicy {
    pub time_interval: f64,
    pub distance_gate: f64,
    pub angle_gate: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        KeyframePolicy {
            time_interval: 1.0,
            distance_gate: 1.0,
            angle_gate: 10f64.to_radians(),
        }
    }
}

/// Emits a keyframe when enough time has elapsed or the pose has moved far
/// enough since the last one. The first call always selects.
#[derive(Debug, Default)]
pub struct KeyframeSelector {
    last: Option<(RigidTransform, f64)>,
    next_id: u64,
}

impl KeyframeSelector {
    pub fn select(
        &mut self,
        pose: &RigidTransform,
        stamp: f64,
        features: &FeatureSet,
        policy: &KeyframePolicy,
    ) -> Option<Keyframe> {
        let due = match &self.last {
            None => true,
            Some((last_pose, last_stamp)) => {
                let (rot, trans) = last_pose.error_to(pose);
                stamp - last_stamp >= policy.time_interval
                    || trans >= policy.distance_gate
                    || rot >= policy.angle_gate
            }
        };
        if !due {
            return None;
        }
        self.last = Some((*pose, stamp));
        let id = self.next_id;
        self.next_id += 1;
        Some(Keyframe {
            id,
            pose: *pose,
            features: features.clone(),
            stamp,
        })
    }

    /// Keeps the selector's displacement gates anchored to the refined pose
    /// after a graph update.
    pub fn rebase(&mut self, pose: &RigidTransform) {
        if let Some((p, _)) = &mut self.last {
            *p = *pose;
        }
    }
}

// ---------------------------------------------------------------------------
// k-d tree

/// Minimal 3-d k-d tree over an owned point set; supports k-nearest-neighbor
/// queries by index.
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    // (point index, split axis), laid out as a balanced implicit tree over
    // `order`.
    order: Vec<u32>,
}

impl KdTree {
    pub fn build(points: Vec<Vector3<f64>>) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        if !points.is_empty() {
            Self::split(&points, &mut order, 0);
        }
        KdTree { points, order }
    }

    fn split(points: &[Vector3<f64>], slice: &mut [u32], depth: usize) {
        if slice.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis]
                .partial_cmp(&points[b as usize][axis])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let (lo, rest) = slice.split_at_mut(mid);
        Self::split(points, lo, depth + 1);
        Self::split(points, &mut rest[1..], depth + 1);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Vector3<f64> {
        &self.points[index]
    }

    /// Indices and squared distances of the `k` nearest points, nearest
    /// first.
    pub fn nearest(&self, query: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        self.search(&self.order, 0, query, k, &mut best);
        best
    }

    fn search(
        &self,
        slice: &[u32],
        depth: usize,
        query: &Vector3<f64>,
        k: usize,
        best: &mut Vec<(usize, f64)>,
    ) {
        if slice.is_empty() {
            return;
        }
        let mid = slice.len() / 2;
        let idx = slice[mid] as usize;
        let d2 = (self.points[idx] - query).norm_squared();
        let insert_at = best.partition_point(|&(_, d)| d < d2);
        if insert_at < k {
            best.insert(insert_at, (idx, d2));
            best.truncate(k);
        }
        let axis = depth % 3;
        let delta = query[axis] - self.points[idx][axis];
        let (near, far) = if delta < 0.0 {
            (&slice[..mid], &slice[mid + 1..])
        } else {
            (&slice[mid + 1..], &slice[..mid])
        };
        self.search(near, depth + 1, query, k, best);
        if best.len() < k || delta * delta < best.last().map_or(f64::INFINITY, |&(_, d)| d) {
            self.search(far, depth + 1, query, k, best);
        }
    }
}

// ---------------------------------------------------------------------------
// Submap

/// Union of the most recent keyframes' features in the world frame, with
/// spatial indices prepared for nearest-neighbor lookups.
pub struct Submap {
    pub edge_points: Vec<Vector3<f64>>,
    pub planar_points: Vec<Vector3<f64>>,
    edge_index: KdTree,
    planar_index: KdTree,
}

impl Submap {
    pub fn edge_index(&self) -> &KdTree {
        &self.edge_index
    }

    pub fn planar_index(&self) -> &KdTree {
        &self.planar_index
    }
}

/// Aggregates the `k` most recent keyframes (all of them when fewer exist)
/// into a world-frame submap.
pub fn build_submap(keyframes: &[Keyframe], k: usize) -> Submap {
    let window = &keyframes[keyframes.len().saturating_sub(k)..];
    let mut edge_points = Vec::new();
    let mut planar_points = Vec::new();
    for kf in window {
        for p in &kf.features.edge {
            edge_points.push(kf.pose.transform_point(&p.position));
        }
        for p in &kf.features.planar {
            planar_points.push(kf.pose.transform_point(&p.position));
        }
    }
    Submap {
        edge_index: KdTree::build(edge_points.clone()),
        planar_index: KdTree::build(planar_points.clone()),
        edge_points,
        planar_points,
    }
}

// ---------------------------------------------------------------------------
// Scan-to-submap alignment

#[derive(Debug, Clone)]
pub struct BackEndConfig {
    pub keyframe: KeyframePolicy,
    /// Keyframes per submap (sliding window).
    pub submap_window: usize,
    /// Neighbors used for the edge / plane fits.
    pub fit_neighbors: usize,
    /// Outer correspondence-refresh iterations.
    pub max_outer_iterations: usize,
    pub min_edge_points: usize,
    pub min_planar_points: usize,
    /// Features whose nearest submap neighbor is farther than this are
    /// skipped for the iteration.
    pub max_correspondence_distance: f64,
    /// Refinements moving the pose farther than this from the prediction
    /// are rejected as divergent (meters / radians).
    pub refinement_translation_gate: f64,
    pub refinement_rotation_gate: f64,
    /// Maximum RMS scatter of a neighbor set off its fitted line/plane;
    /// sloppier fits (surface mixtures) are rejected.
    pub fit_rms_tolerance: f64,
    pub loop_search_radius: f64,
    pub loop_time_gap: f64,
    pub loop_fitness_threshold: f64,
    pub loop_min_history: usize,
    /// Keyframes to wait after an applied closure before checking again.
    pub loop_cooldown: usize,
    /// Frames buffered between the front-end producer and back-end consumer.
    pub queue_capacity: usize,
    pub solver: SolverConfig,
}

impl Default for BackEndConfig {
    fn default() -> Self {
        BackEndConfig {
            keyframe: KeyframePolicy::default(),
            submap_window: 10,
            fit_neighbors: 5,
            max_outer_iterations: 10,
            min_edge_points: 10,
            min_planar_points: 30,
            max_correspondence_distance: 1.0,
            refinement_translation_gate: 0.3,
            refinement_rotation_gate: 3f64.to_radians(),
            fit_rms_tolerance: 0.05,
            loop_search_radius: 5.0,
            loop_time_gap: 30.0,
            loop_fitness_threshold: 0.3,
            loop_min_history: 10,
            loop_cooldown: 10,
            queue_capacity: 10,
            solver: SolverConfig::default(),
        }
    }
}

/// Principal-axis line fit of a neighbor set. Returns (centroid, direction)
/// when the scatter is dominantly 1-d (largest eigenvalue ≥ 3× second).
fn fit_edge_direction(
    points: &[Vector3<f64>],
    rms_tolerance: f64,
) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eigen = scatter.symmetric_eigen();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let (l1, l2) = (eigen.eigenvalues[idx[0]], eigen.eigenvalues[idx[1]]);
    if l1 < 3.0 * l2 || l1 <= 0.0 {
        return None;
    }
    // Off-line RMS scatter: λ2 + λ3 is the residual power.
    let off = ((l2 + eigen.eigenvalues[idx[2]]).max(0.0) / n).sqrt();
    if off > rms_tolerance {
        return None;
    }
    Some((centroid, eigen.eigenvectors.column(idx[0]).into_owned()))
}

/// Least-squares plane fit of a neighbor set. Returns (centroid, unit
/// normal) when the scatter is dominantly 2-d: smallest eigenvalue ≤ ⅓ of
/// the second and the set is not collinear.
fn fit_plane_normal(
    points: &[Vector3<f64>],
    rms_tolerance: f64,
) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eigen = scatter.symmetric_eigen();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let (l1, l2, l3) = (
        eigen.eigenvalues[idx[0]],
        eigen.eigenvalues[idx[1]],
        eigen.eigenvalues[idx[2]],
    );
    // Collinear sets have no meaningful normal.
    if l2 <= 1e-9 * l1.max(1e-300) {
        return None;
    }
    if l3 > l2 / 3.0 {
        return None;
    }
    // Off-plane RMS scatter.
    if (l3.max(0.0) / n).sqrt() > rms_tolerance {
        return None;
    }
    Some((centroid, eigen.eigenvectors.column(idx[2]).into_owned()))
}

const BETA_EPS: f64 = 1e-6;
const BETA_CAP: f64 = 1e3;

/// Edge weight: neighbors tighter around the fitted line weigh more.
fn edge_beta(neighbors: &[Vector3<f64>], centroid: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
    let sum: f64 = neighbors
        .iter()
        .map(|p| 1.0 / ((p - centroid).cross(dir).norm() + BETA_EPS))
        .sum();
    sum.min(BETA_CAP)
}

/// Plane weight from the `n·x + 1 = 0` fit residual: flatter neighbor sets
/// weigh more. Falls back to the cap when the plane passes through the
/// origin and that fit degenerates.
fn plane_beta(neighbors: &[Vector3<f64>]) -> f64 {
    let rows = neighbors.len();
    let mut a = DMatrix::zeros(rows, 3);
    for (i, p) in neighbors.iter().enumerate() {
        a[(i, 0)] = p.x;
        a[(i, 1)] = p.y;
        a[(i, 2)] = p.z;
    }
    let rhs = DVector::from_element(rows, -1.0);
    let svd = a.svd(true, true);
    match svd.solve(&rhs, 1e-12) {
        Ok(n) => {
            let total: f64 = neighbors.iter().map(|p| n.dot(&DVector::from_column_slice(p.as_slice())) + 1.0).sum();
            (1.0 / (total.abs() + BETA_EPS)).min(BETA_CAP)
        }
        Err(_) => BETA_CAP,
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub transform: RigidTransform,
    pub report: SolveReport,
    /// Unweighted mean point-to-feature distance at the final transform.
    pub mean_residual: f64,
    pub edge_terms: usize,
    pub planar_terms: usize,
}

/// Aligns a scan's features against a submap: correspondences are refreshed
/// from the spatial indices each outer iteration, edge directions and plane
/// normals are refit from the nearest neighbors, and the weighted
/// point-to-line / point-to-plane costs are minimized over SE(3).
pub fn scan_to_submap(
    features: &FeatureSet,
    submap: &Submap,
    initial: &RigidTransform,
    cfg: &BackEndConfig,
) -> Result<AlignmentResult, BackEndError> {
    if submap.edge_points.len() < cfg.min_edge_points
        || submap.planar_points.len() < cfg.min_planar_points
    {
        return Err(BackEndError::DegenerateSubmap {
            edges: submap.edge_points.len(),
            planar: submap.planar_points.len(),
        });
    }

    enum Term {
        Edge {
            point: Vector3<f64>,
            anchor: Vector3<f64>,
            dir: Vector3<f64>,
            beta: f64,
            distance: f64,
        },
        Plane {
            point: Vector3<f64>,
            anchor: Vector3<f64>,
            normal: Vector3<f64>,
            beta: f64,
            distance: f64,
        },
    }

    let mut transform = *initial;
    let mut last_report: Option<SolveReport> = None;
    let mut total_iterations = 0;
    let mut edge_terms = 0;
    let mut planar_terms = 0;

    for _outer in 0..cfg.max_outer_iterations.max(1) {
        let mut terms: Vec<Term> = Vec::new();
        for feature in &features.edge {
            let p = feature.position;
            let q = transform.transform_point(&p);
            let nn = submap.edge_index.nearest(&q, cfg.fit_neighbors);
            if nn.len() < cfg.fit_neighbors
                || nn[0].1 > cfg.max_correspondence_distance.powi(2)
            {
                continue;
            }
            let neighbors: Vec<Vector3<f64>> =
                nn.iter().map(|(i, _)| submap.edge_points[*i]).collect();
            let Some((anchor, dir)) = fit_edge_direction(&neighbors, cfg.fit_rms_tolerance)
            else {
                continue;
            };
            terms.push(Term::Edge {
                point: p,
                anchor,
                dir,
                beta: edge_beta(&neighbors, &anchor, &dir),
                distance: (q - anchor).cross(&dir).norm(),
            });
        }
        for feature in &features.planar {
            let p = feature.position;
            let q = transform.transform_point(&p);
            let nn = submap.planar_index.nearest(&q, cfg.fit_neighbors);
            if nn.len() < cfg.fit_neighbors
                || nn[0].1 > cfg.max_correspondence_distance.powi(2)
            {
                continue;
            }
            let neighbors: Vec<Vector3<f64>> =
                nn.iter().map(|(i, _)| submap.planar_points[*i]).collect();
            let Some((anchor, normal)) = fit_plane_normal(&neighbors, cfg.fit_rms_tolerance)
            else {
                continue;
            };
            terms.push(Term::Plane {
                point: p,
                anchor,
                normal,
                beta: plane_beta(&neighbors),
                distance: (q - anchor).dot(&normal).abs(),
            });
        }

        // Trim associations that disagree with the bulk of their own kind:
        // mostly features whose true counterpart is not in the submap yet
        // and latched onto the wrong structure.
        let median_of = |mut ds: Vec<f64>| -> f64 {
            if ds.is_empty() {
                return 0.0;
            }
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ds[ds.len() / 2]
        };
        let edge_median = median_of(
            terms
                .iter()
                .filter_map(|t| match t {
                    Term::Edge { distance, .. } => Some(*distance),
                    _ => None,
                })
                .collect(),
        );
        let plane_median = median_of(
            terms
                .iter()
                .filter_map(|t| match t {
                    Term::Plane { distance, .. } => Some(*distance),
                    _ => None,
                })
                .collect(),
        );
        let edge_cutoff = (3.0 * edge_median).max(0.1);
        let plane_cutoff = (3.0 * plane_median).max(0.1);

        let mut blocks: Vec<ResidualBlock<RigidTransform>> = Vec::new();
        edge_terms = 0;
        planar_terms = 0;
        for term in terms {
            match term {
                Term::Edge {
                    point,
                    anchor,
                    dir,
                    beta,
                    distance,
                } => {
                    if distance > edge_cutoff {
                        continue;
                    }
                    edge_terms += 1;
                    blocks.push(
                        ResidualBlock::new(
                            3,
                            DMatrix::identity(3, 3),
                            move |t: &RigidTransform| {
                                let c = anchor - t.transform_point(&point);
                                DVector::from_column_slice((beta * c.cross(&dir)).as_slice())
                            },
                        )
                        .with_jacobian(move |t: &RigidTransform| {
                            let q = t.rotation * point;
                            let n_x = skew(&dir);
                            let mut jac = DMatrix::zeros(3, 6);
                            // r = β (c × dir) = −β [dir]× c with
                            // c = a − q − t, dc/dω = +[q]×, dc/dt = −I.
                            let d_rot = -n_x * skew(&q) * beta;
                            let d_trans = n_x * beta;
                            jac.view_mut((0, 0), (3, 3)).copy_from(&d_rot);
                            jac.view_mut((0, 3), (3, 3)).copy_from(&d_trans);
                            jac
                        }),
                    );
                }
                Term::Plane {
                    point,
                    anchor,
                    normal,
                    beta,
                    distance,
                } => {
                    if distance > plane_cutoff {
                        continue;
                    }
                    planar_terms += 1;
                    blocks.push(
                        ResidualBlock::new(
                            1,
                            DMatrix::identity(1, 1),
                            move |t: &RigidTransform| {
                                let r = (t.transform_point(&point) - anchor).dot(&normal);
                                DVector::from_element(1, beta * r)
                            },
                        )
                        .with_jacobian(move |t: &RigidTransform| {
                            let q = t.rotation * point;
                            let mut jac = DMatrix::zeros(1, 6);
                            let d_rot = q.cross(&normal) * beta;
                            for k in 0..3 {
                                jac[(0, k)] = d_rot[k];
                                jac[(0, 3 + k)] = beta * normal[k];
                            }
                            jac
                        }),
                    );
                }
            }
        }

        if edge_terms + planar_terms < 6 {
            return Err(BackEndError::DegenerateSubmap {
                edges: edge_terms,
                planar: planar_terms,
            });
        }

        let (next, report) = minimize(&blocks, &transform, &cfg.solver)?;
        total_iterations += report.iterations;
        let (d_rot, d_trans) = next.error_to(&transform);
        transform = next;
        last_report = Some(report);
        if d_rot < 1e-7 && d_trans < 1e-7 {
            break;
        }
    }

    let mean_residual = mean_alignment_residual(features, submap, &transform, cfg);
    let mut report = last_report.expect("at least one outer iteration ran");
    report.iterations = total_iterations;
    Ok(AlignmentResult {
        transform,
        report,
        mean_residual,
        edge_terms,
        planar_terms,
    })
}

/// Unweighted mean point-to-line / point-to-plane distance of the features
/// under `transform`; the loop-closure fitness measure.
pub fn mean_alignment_residual(
    features: &FeatureSet,
    submap: &Submap,
    transform: &RigidTransform,
    cfg: &BackEndConfig,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for feature in &features.edge {
        let q = transform.transform_point(&feature.position);
        let nn = submap.edge_index.nearest(&q, cfg.fit_neighbors);
        if nn.len() < cfg.fit_neighbors {
            continue;
        }
        let neighbors: Vec<Vector3<f64>> =
            nn.iter().map(|(i, _)| submap.edge_points[*i]).collect();
        if let Some((anchor, dir)) = fit_edge_direction(&neighbors, cfg.fit_rms_tolerance) {
            total += (q - anchor).cross(&dir).norm();
            count += 1;
        }
    }
    for feature in &features.planar {
        let q = transform.transform_point(&feature.position);
        let nn = submap.planar_index.nearest(&q, cfg.fit_neighbors);
        if nn.len() < cfg.fit_neighbors {
            continue;
        }
        let neighbors: Vec<Vector3<f64>> =
            nn.iter().map(|(i, _)| submap.planar_points[*i]).collect();
        if let Some((anchor, normal)) = fit_plane_normal(&neighbors, cfg.fit_rms_tolerance) {
            total += (q - anchor).dot(&normal).abs();
            count += 1;
        }
    }
    if count == 0 {
        f64::INFINITY
    } else {
        total / count as f64
    }
}

// ---------------------------------------------------------------------------
// Loop closure

#[derive(Debug, Clone)]
pub struct LoopClosure {
    pub current_id: u64,
    pub matched_id: u64,
    /// Transform from the current keyframe's frame into the matched
    /// keyframe's frame.
    pub relative: RigidTransform,
    pub fitness: f64,
}

/// Searches the history for a revisited place: candidates must lie within
/// the search radius and be older than the time gap; the best candidate is
/// verified by feature registration against a small submap around it.
pub fn detect_loop(
    current: &Keyframe,
    history: &[Keyframe],
    cfg: &BackEndConfig,
) -> Option<LoopClosure> {
    if history.len() < cfg.loop_min_history {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, kf) in history.iter().enumerate() {
        if kf.id >= current.id {
            continue;
        }
        if current.stamp - kf.stamp < cfg.loop_time_gap {
            continue;
        }
        let dist = (kf.pose.translation - current.pose.translation).norm();
        if dist > cfg.loop_search_radius {
            continue;
        }
        if best.map_or(true, |(_, d)| dist < d) {
            best = Some((i, dist));
        }
    }
    let (candidate_idx, _) = best?;

    // Small submap around the matched keyframe.
    let lo = candidate_idx.saturating_sub(2);
    let hi = (candidate_idx + 3).min(history.len());
    let submap = build_submap(&history[lo..hi], hi - lo);

    let aligned = scan_to_submap(&current.features, &submap, &current.pose, cfg).ok()?;
    if aligned.mean_residual >= cfg.loop_fitness_threshold {
        return None;
    }
    let matched = &history[candidate_idx];
    Some(LoopClosure {
        current_id: current.id,
        matched_id: matched.id,
        relative: matched.pose.invert().compose(&aligned.transform),
        fitness: aligned.mean_residual,
    })
}

// ---------------------------------------------------------------------------
// Factor graph

#[derive(Debug, Clone)]
pub struct PoseNode {
    pub id: u64,
    pub state: RigidTransform,
}

/// Relative-pose constraint between two nodes: `measured ≈ X_from⁻¹ X_to`.
#[derive(Debug, Clone)]
pub struct RelativeFactor {
    pub from: u64,
    pub to: u64,
    pub measured: RigidTransform,
}

impl RelativeFactor {
    pub fn between(from: &PoseNode, to: &PoseNode) -> Self {
        RelativeFactor {
            from: from.id,
            to: to.id,
            measured: from.state.invert().compose(&to.state),
        }
    }
}

/// All node poses except the gauge-fixed first one, as one solver variable.
#[derive(Clone)]
struct PoseVector {
    poses: Vec<RigidTransform>,
}

impl Variable for PoseVector {
    fn dof(&self) -> usize {
        6 * self.poses.len().saturating_sub(1)
    }

    fn retract(&self, delta: &[f64]) -> Self {
        let mut poses = self.poses.clone();
        for (k, pose) in poses.iter_mut().enumerate().skip(1) {
            let d = &delta[6 * (k - 1)..6 * k];
            *pose = pose.retract(d);
        }
        PoseVector { poses }
    }
}

fn factor_residual(poses: &[RigidTransform], from: usize, to: usize, measured: &RigidTransform) -> DVector<f64> {
    let relative = poses[from].invert().compose(&poses[to]);
    let err = measured.invert().compose(&relative);
    let rot = err.rotation.log();
    let mut r = DVector::zeros(6);
    for k in 0..3 {
        r[k] = rot[k];
        r[3 + k] = err.translation[k];
    }
    r
}

/// Jointly optimizes the node poses against odometry and loop-closure
/// factors. The first node is the gauge and comes back bitwise unchanged.
pub fn optimize_graph(
    nodes: &[PoseNode],
    odometry_factors: &[RelativeFactor],
    loop_factors: &[RelativeFactor],
    solver_cfg: &SolverConfig,
) -> Result<Vec<PoseNode>, BackEndError> {
    if nodes.len() <= 1 {
        return Ok(nodes.to_vec());
    }
    let index_of = |id: u64| -> usize {
        nodes
            .iter()
            .position(|n| n.id == id)
            .expect("factor references an existing node")
    };

    let initial = PoseVector {
        poses: nodes.iter().map(|n| n.state).collect(),
    };
    let n_nodes = nodes.len();

    let blocks: Vec<ResidualBlock<PoseVector>> = odometry_factors
        .iter()
        .chain(loop_factors)
        .map(|f| {
            let from = index_of(f.from);
            let to = index_of(f.to);
            let measured = f.measured;
            let residual = move |v: &PoseVector| factor_residual(&v.poses, from, to, &measured);
            // The residual touches only two nodes; differentiate just their
            // 12 local coordinates instead of the full state.
            let jacobian = move |v: &PoseVector| {
                let dof = 6 * (n_nodes - 1);
                let mut jac = DMatrix::zeros(6, dof);
                let h = 1e-6;
                for (node, slot) in [(from, 0), (to, 1)] {
                    if node == 0 {
                        continue; // gauge-fixed
                    }
                    let col0 = 6 * (node - 1);
                    for k in 0..6 {
                        let mut delta = vec![0.0; dof];
                        delta[col0 + k] = h;
                        let plus = factor_residual(
                            &v.retract(&delta).poses,
                            from,
                            to,
                            &measured,
                        );
                        delta[col0 + k] = -h;
                        let minus = factor_residual(
                            &v.retract(&delta).poses,
                            from,
                            to,
                            &measured,
                        );
                        let col = (plus - minus) / (2.0 * h);
                        jac.view_mut((0, col0 + k), (6, 1)).copy_from(&col);
                    }
                    let _ = slot;
                }
                jac
            };
            ResidualBlock::new(6, DMatrix::identity(6, 6), residual).with_jacobian(jacobian)
        })
        .collect();

    let cfg = SolverConfig {
        method: Method::LevenbergMarquardt,
        ..solver_cfg.clone()
    };
    let (solution, _report) = minimize(&blocks, &initial, &cfg)?;
    Ok(nodes
        .iter()
        .zip(&solution.poses)
        .enumerate()
        .map(|(i, (node, pose))| PoseNode {
            id: node.id,
            state: if i == 0 { node.state } else { pose.orthonormalized() },
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Orchestration

#[derive(Debug, Clone, Default)]
pub struct BackEndOutcome {
    /// Refined absolute pose of this frame in the back-end's world chain.
    pub pose: RigidTransform,
    pub keyframe_added: bool,
    pub loop_closed: Option<LoopClosure>,
}

/// One processed frame, stored relative to its governing keyframe so graph
/// corrections propagate to the whole trajectory.
#[derive(Debug, Clone)]
struct FrameLogEntry {
    stamp: f64,
    keyframe_id: Option<u64>,
    /// Pose relative to the keyframe (or absolute when none exists yet).
    offset: RigidTransform,
}

/// Sequential back-end: integrates front-end relative transforms into its
/// own world chain, refines each frame against the sliding submap, selects
/// keyframes, accumulates the factor graph, and applies loop closures.
pub struct BackEnd {
    cfg: BackEndConfig,
    selector: KeyframeSelector,
    keyframes: Vec<Keyframe>,
    submap: Option<Submap>,
    odometry_factors: Vec<RelativeFactor>,
    loop_factors: Vec<RelativeFactor>,
    current_pose: RigidTransform,
    started: bool,
    frame_log: Vec<FrameLogEntry>,
    last_closure_keyframe: Option<u64>,
    /// When false, loop detection is left to an external checker (the
    /// threaded runner's checking thread).
    pub detect_loops_inline: bool,
}

impl BackEnd {
    pub fn new(cfg: BackEndConfig) -> Self {
        BackEnd {
            cfg,
            selector: KeyframeSelector::default(),
            keyframes: Vec::new(),
            submap: None,
            odometry_factors: Vec::new(),
            loop_factors: Vec::new(),
            current_pose: RigidTransform::identity(),
            started: false,
            frame_log: Vec::new(),
            last_closure_keyframe: None,
            detect_loops_inline: true,
        }
    }

    pub fn config(&self) -> &BackEndConfig {
        &self.cfg
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn loop_factors(&self) -> &[RelativeFactor] {
        &self.loop_factors
    }

    pub fn current_pose(&self) -> RigidTransform {
        self.current_pose
    }

    /// Integrates one front-end frame (relative transform from the previous
    /// scan) and refines it against the submap. The first frame anchors the
    /// chain at the identity regardless of its relative transform.
    pub fn process(
        &mut self,
        relative: &RigidTransform,
        stamp: f64,
        features: &FeatureSet,
    ) -> BackEndOutcome {
        let mut outcome = BackEndOutcome::default();

        let predicted = if self.started {
            self.current_pose.compose(relative)
        } else {
            self.started = true;
            self.current_pose
        };

        let refined = match &self.submap {
            Some(submap) => match scan_to_submap(features, submap, &predicted, &self.cfg) {
                Ok(result) => {
                    let (d_rot, d_trans) = result.transform.error_to(&predicted);
                    // A refinement that leaves the trust region is treated
                    // as divergent and dropped.
                    if d_trans <= self.cfg.refinement_translation_gate
                        && d_rot <= self.cfg.refinement_rotation_gate
                    {
                        result.transform
                    } else {
                        predicted
                    }
                }
                Err(_) => predicted,
            },
            None => predicted,
        };
        self.current_pose = refined;

        if let Some(keyframe) = self
            .selector
            .select(&refined, stamp, features, &self.cfg.keyframe)
        {
            if let Some(prev) = self.keyframes.last() {
                self.odometry_factors.push(RelativeFactor {
                    from: prev.id,
                    to: keyframe.id,
                    measured: prev.pose.invert().compose(&keyframe.pose),
                });
            }
            self.keyframes.push(keyframe);
            outcome.keyframe_added = true;

            if self.detect_loops_inline {
                outcome.loop_closed = self.check_loop();
            }
            self.submap = Some(build_submap(&self.keyframes, self.cfg.submap_window));
        }

        let entry = match self.keyframes.last() {
            Some(kf) => FrameLogEntry {
                stamp,
                keyframe_id: Some(kf.id),
                offset: kf.pose.invert().compose(&self.current_pose),
            },
            None => FrameLogEntry {
                stamp,
                keyframe_id: None,
                offset: self.current_pose,
            },
        };
        self.frame_log.push(entry);
        outcome.pose = self.current_pose;
        outcome
    }

    /// Runs loop detection for the newest keyframe and applies any verified
    /// closure. Exposed so a checking thread can drive it. Detection rests
    /// for `loop_cooldown` keyframes after an applied closure.
    pub fn check_loop(&mut self) -> Option<LoopClosure> {
        let current = self.keyframes.last()?.clone();
        if let Some(last) = self.last_closure_keyframe {
            if current.id < last + self.cfg.loop_cooldown as u64 {
                return None;
            }
        }
        let closure = detect_loop(
            &current,
            &self.keyframes[..self.keyframes.len() - 1],
            &self.cfg,
        )?;
        self.last_closure_keyframe = Some(current.id);
        self.apply_loop(&closure);
        Some(closure)
    }

    /// Turns a verified loop closure into a factor and re-optimizes the
    /// whole graph, swapping the refined poses back into the keyframes and
    /// dragging the current pose along.
    pub fn apply_loop(&mut self, closure: &LoopClosure) {
        self.loop_factors.push(RelativeFactor {
            from: closure.matched_id,
            to: closure.current_id,
            measured: closure.relative.invert(),
        });
        let nodes: Vec<PoseNode> = self
            .keyframes
            .iter()
            .map(|kf| PoseNode {
                id: kf.id,
                state: kf.pose,
            })
            .collect();
        if let Ok(optimized) =
            optimize_graph(&nodes, &self.odometry_factors, &self.loop_factors, &self.cfg.solver)
        {
            let old_last = self.keyframes.last().map(|kf| kf.pose);
            for (kf, node) in self.keyframes.iter_mut().zip(&optimized) {
                kf.pose = node.state;
            }
            if let (Some(old), Some(new)) = (old_last, self.keyframes.last()) {
                let delta = new.pose.compose(&old.invert());
                self.current_pose = delta.compose(&self.current_pose);
                self.selector.rebase(&new.pose);
            }
            self.submap = Some(build_submap(&self.keyframes, self.cfg.submap_window));
        }
    }

    /// Full trajectory reconstructed through the current keyframe poses, so
    /// loop corrections reach every frame.
    pub fn trajectory(&self) -> Vec<(f64, RigidTransform)> {
        self.frame_log
            .iter()
            .map(|entry| {
                let pose = match entry.keyframe_id {
                    Some(id) => {
                        let kf = self
                            .keyframes
                            .iter()
                            .find(|kf| kf.id == id)
                            .expect("logged keyframe still present");
                        kf.pose.compose(&entry.offset)
                    }
                    None => entry.offset,
                };
                (entry.stamp, pose)
            })
            .collect()
    }

    /// World-frame feature points of all keyframes (edge + planar), for map
    /// export.
    pub fn map_points(&self) -> Vec<Vector3<f64>> {
        let mut points = Vec::new();
        for kf in &self.keyframes {
            for p in kf.features.edge.iter().chain(&kf.features.planar) {
                points.push(kf.pose.transform_point(&p.position));
            }
        }
        points
    }
}
