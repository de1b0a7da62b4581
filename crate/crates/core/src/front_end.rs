//! Front-end LiDAR odometry: forward location prediction, spherical
//! rotation registration over a Gaussian voxel map, and continuous-time
//! translation optimization.
//!
//! Rotation and translation are estimated separately. The forward location
//! prediction removes the coarse translation between consecutive scans, the
//! rotation is registered on center-aligned clouds by sliding source points
//! along sensor-centered spheres onto voxel-mean rays, and the translation
//! is refined afterwards with the correspondences inherited from the
//! rotation stage.

use crate::geometry::{skew, RigidTransform, Rotation};
use crate::scan::Scan;
use crate::solver::{minimize, ResidualBlock, SolveReport, SolverConfig, SolverError};
use crate::voxel_grid::{
    build_voxel_map_with, match_correspondences, Correspondence, CovarianceMode, VoxelError,
};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrontEndError {
    #[error("only {found} usable correspondences, need at least {required}")]
    InsufficientCorrespondences { found: usize, required: usize },
    #[error("solver failed: {0}")]
    NumericalFailure(#[from] SolverError),
    #[error("voxel map: {0}")]
    VoxelMap(#[from] VoxelError),
}

/// How the per-voxel point count `N_j` weights the geometric residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CountWeight {
    /// Residual scaled by `N_j`, as written in the cost.
    #[default]
    Linear,
    /// Residual scaled by `√N_j`, so the squared cost scales linearly.
    Sqrt,
}

#[derive(Debug, Clone)]
pub struct FrontEndConfig {
    /// Weight of the continuous-time translation constraint.
    pub lambda_ct: f64,
    /// Minimum points per voxel for matching (`N⁺`).
    pub n_min: usize,
    /// Voxel resolution, meters.
    pub resolution: f64,
    /// Small eigenvalue of the regularized rotation covariance, as a
    /// fraction of the largest one.
    pub svd_epsilon_ratio: f64,
    /// Terms whose spherical angle exceeds this are dropped (≤ π/2).
    pub max_spherical_angle: f64,
    pub count_weight: CountWeight,
    pub covariance_mode: CovarianceMode,
    pub solver: SolverConfig,
    /// Minimum usable terms for either solve.
    pub min_correspondences: usize,
    /// Cap on the forward-prediction extrapolation step (meters); bounds
    /// the fallback path when tracking is lost.
    pub max_prediction_step: f64,
    /// Outer re-weighting iterations of the translation stage.
    pub translation_outer_iterations: usize,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        FrontEndConfig {
            lambda_ct: 0.5,
            n_min: 5,
            resolution: 1.0,
            svd_epsilon_ratio: 1e-3,
            max_spherical_angle: std::f64::consts::FRAC_PI_2,
            count_weight: CountWeight::default(),
            covariance_mode: CovarianceMode::default(),
            solver: SolverConfig::default(),
            min_correspondences: 10,
            max_prediction_step: 2.0,
            translation_outer_iterations: 20,
        }
    }
}

/// Odometry bookkeeping across scans.
#[derive(Debug, Clone)]
pub struct OdometryState {
    /// World pose at `stamp`.
    pub pose: RigidTransform,
    pub stamp: f64,
    prev: Option<(RigidTransform, f64)>,
}

impl OdometryState {
    pub fn new(pose: RigidTransform, stamp: f64) -> Self {
        OdometryState {
            pose,
            stamp,
            prev: None,
        }
    }

    /// Pushes the current pose into history. Stamps must strictly increase.
    pub fn advance(&mut self, pose: RigidTransform, stamp: f64) {
        debug_assert!(stamp > self.stamp, "stamps must strictly increase");
        self.prev = Some((self.pose, self.stamp));
        self.pose = pose;
        self.stamp = stamp;
    }

    pub fn prev_pose(&self) -> Option<&RigidTransform> {
        self.prev.as_ref().map(|(p, _)| p)
    }

    pub fn prev_stamp(&self) -> Option<f64> {
        self.prev.as_ref().map(|(_, s)| *s)
    }
}

/// Forward location prediction: extrapolates the vehicle location to
/// `next_stamp` assuming the velocity of the last interval. With no history
/// the current location is returned unchanged.
pub fn predict_location(state: &OdometryState, next_stamp: f64) -> Vector3<f64> {
    match &state.prev {
        None => state.pose.translation,
        Some((prev_pose, prev_stamp)) => {
            let denom = state.stamp - prev_stamp;
            if denom <= 0.0 {
                return state.pose.translation;
            }
            let ratio = (next_stamp - state.stamp) / denom;
            state.pose.translation + (state.pose.translation - prev_pose.translation) * ratio
        }
    }
}

/// Spherical angle recovered from the radial distance `‖d‖` at a projected
/// mean of norm `‖p̄′‖`: `asin(‖d‖ / ‖p̄′‖)`, the distance-to-angle relation
/// behind the rotation residual.
pub fn spherical_angle_from_distance(distance: f64, projected_norm: f64) -> f64 {
    (distance / projected_norm).clamp(-1.0, 1.0).asin()
}

/// Rebuilds a covariance with the spectrum `(λ_max, λ_max, ε)`,
/// `ε = epsilon_ratio · λ_max`, flattening the 3D ellipsoid into a disk in
/// the plane orthogonal to `axis` (the voxel-mean ray). The radial residual
/// is orthogonal to the axis by construction, so the stiff `1/ε` direction
/// of the inverse never couples into the cost and axial distances drop out.
pub fn regularize_rotation_covariance(
    cov: &Matrix3<f64>,
    axis: &Vector3<f64>,
    epsilon_ratio: f64,
) -> Matrix3<f64> {
    let lambda_max = cov
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let n = axis / axis.norm();
    let axial = n * n.transpose();
    lambda_max * (Matrix3::identity() - axial) + (epsilon_ratio * lambda_max) * axial
}

fn invert_spd(m: &Matrix3<f64>) -> Matrix3<f64> {
    m.try_inverse().unwrap_or_else(|| {
        // Fall back through an eigen pseudo-inverse with a floored spectrum.
        let eigen = m.symmetric_eigen();
        let mut inv = Matrix3::zeros();
        for i in 0..3 {
            let v = eigen.eigenvectors.column(i);
            inv += (1.0 / eigen.eigenvalues[i].max(1e-12)) * v * v.transpose();
        }
        inv
    })
}

/// One usable term of the rotation registration problem, built at the
/// initial rotation.
#[derive(Debug, Clone)]
pub struct RotationProblemTerm {
    pub source_point: Vector3<f64>,
    pub voxel_mean: Vector3<f64>,
    /// Projection of the voxel mean onto its ray at the tangent plane
    /// through the rotated source point.
    pub projected_mean: Vector3<f64>,
    pub radial_residual: Vector3<f64>,
    /// Regularized information matrix `Ω_R⁻¹`.
    pub information: Matrix3<f64>,
}

/// Projection of `mean` onto its own ray given the rotated source point
/// `q = R pₛ`: `(‖p̄‖ − (p̄ − q)·p̄ / ‖p̄‖) n̂`.
fn project_mean(mean: &Vector3<f64>, q: &Vector3<f64>) -> Vector3<f64> {
    let norm = mean.norm();
    let n = mean / norm;
    (norm - (mean - q).dot(mean) / norm) * n
}

/// Builds the gated, weighted rotation terms for a correspondence set.
pub fn build_rotation_terms(
    corr: &[Correspondence],
    cfg: &FrontEndConfig,
    initial: &Rotation,
) -> Vec<RotationProblemTerm> {
    let max_angle = cfg.max_spherical_angle.min(std::f64::consts::FRAC_PI_2);
    corr.iter()
        .filter_map(|c| {
            let p_s = c.source.position;
            let mean = c.voxel.mean;
            let mean_norm = mean.norm();
            if mean_norm < 1e-9 || p_s.norm() < 1e-9 {
                return None;
            }
            let n = mean / mean_norm;
            let q = *initial * p_s;
            let angle = (q.dot(&n) / q.norm()).clamp(-1.0, 1.0).acos();
            if angle > max_angle {
                return None;
            }
            let projected = project_mean(&mean, &q);
            let residual = projected - q;
            let omega_prime = c.voxel.floored_cov()
                + initial.matrix().transpose() * c.source.noise_cov * initial.matrix();
            let omega_r = regularize_rotation_covariance(&omega_prime, &n, cfg.svd_epsilon_ratio);
            Some(RotationProblemTerm {
                source_point: p_s,
                voxel_mean: mean,
                projected_mean: projected,
                radial_residual: residual,
                information: invert_spd(&omega_r),
            })
        })
        .collect()
}

/// Registers the rotation between the (center-aligned) source points and the
/// voxel-mean rays of the target map by minimizing the Mahalanobis-weighted
/// radial residuals.
pub fn register_rotation(
    corr: &[Correspondence],
    cfg: &FrontEndConfig,
    initial: &Rotation,
) -> Result<(Rotation, SolveReport), FrontEndError> {
    let terms = build_rotation_terms(corr, cfg, initial);
    if terms.len() < cfg.min_correspondences {
        return Err(FrontEndError::InsufficientCorrespondences {
            found: terms.len(),
            required: cfg.min_correspondences,
        });
    }
    let blocks: Vec<ResidualBlock<Rotation>> = terms
        .iter()
        .map(|term| {
            let p = term.source_point;
            let n = term.voxel_mean / term.voxel_mean.norm();
            let info = DMatrix::from_iterator(3, 3, term.information.iter().copied());
            ResidualBlock::new(3, info, move |r: &Rotation| {
                let q = *r * p;
                let d = n * q.dot(&n) - q;
                DVector::from_column_slice(d.as_slice())
            })
            .with_jacobian(move |r: &Rotation| {
                let q = *r * p;
                let jac = (Matrix3::identity() - n * n.transpose()) * skew(&q);
                DMatrix::from_iterator(3, 3, jac.iter().copied())
            })
        })
        .collect();
    let (rotation, report) = minimize(&blocks, initial, &cfg.solver)?;
    Ok((rotation, report))
}

/// Information matrix of the geometric-alignment residual for one
/// correspondence: `(Ω̄_k + Ω_s)⁻¹` with the voxel covariance floored.
fn icp_information(c: &Correspondence) -> Matrix3<f64> {
    invert_spd(&(c.voxel.floored_cov() + c.source.noise_cov))
}

fn count_weight(c: &Correspondence, mode: CountWeight) -> f64 {
    match mode {
        CountWeight::Linear => c.voxel.count as f64,
        CountWeight::Sqrt => (c.voxel.count as f64).sqrt(),
    }
}

/// Refines the translation given the fixed registered rotation and the
/// forward-predicted translation `t_flp`, inheriting the correspondences
/// from the rotation stage. Voxel means in `corr` are expressed in the
/// center-aligned frame (target shifted by `−t_flp`); the returned vector is
/// the full frame-to-frame translation (prediction composed with the
/// optimized correction).
///
/// The geometric term is accompanied by the continuous-time constraint: each
/// point's implied translation is penalized against its value at the
/// previous outer iteration (zero at the first), weighted by the inverse of
/// its own outer product.
pub fn optimize_translation(
    corr: &[Correspondence],
    rotation: &Rotation,
    t_flp: &Vector3<f64>,
    cfg: &FrontEndConfig,
) -> Result<(Vector3<f64>, SolveReport), FrontEndError> {
    if corr.len() < cfg.min_correspondences {
        return Err(FrontEndError::InsufficientCorrespondences {
            found: corr.len(),
            required: cfg.min_correspondences,
        });
    }

    // Per-correspondence constants.
    struct Term {
        rotated_source: Vector3<f64>,
        mean: Vector3<f64>,
        weight: f64,
        icp_info: Matrix3<f64>,
        /// Constant part of the implied per-point translation
        /// tⁿ(t) = t + (I − R) pᵢ + R t_flp.
        ct_offset: Vector3<f64>,
    }
    let terms: Vec<Term> = corr
        .iter()
        .map(|c| Term {
            rotated_source: *rotation * c.source.position,
            mean: c.voxel.mean,
            weight: count_weight(c, cfg.count_weight),
            icp_info: icp_information(c),
            ct_offset: (Matrix3::identity() - rotation.matrix()) * c.source.position
                + *rotation * *t_flp,
        })
        .collect();

    let mut correction = Vector3::zeros();
    // Implied translation at the previous outer iteration; the first
    // iteration anchors against the zero vector.
    let mut anchors: Vec<Vector3<f64>> = vec![Vector3::zeros(); terms.len()];
    let mut total_iterations = 0;
    let mut last_report: Option<SolveReport> = None;
    let mut outer_converged = false;

    for outer in 0..cfg.translation_outer_iterations.max(1) {
        let mut blocks: Vec<ResidualBlock<Vector3<f64>>> =
            Vec::with_capacity(terms.len() * 2);
        for term in &terms {
            let mean = term.mean;
            let u = term.rotated_source;
            let w = term.weight;
            let info = DMatrix::from_iterator(3, 3, term.icp_info.iter().copied());
            blocks.push(
                ResidualBlock::new(3, info, move |t: &Vector3<f64>| {
                    DVector::from_column_slice((w * (mean - u - t)).as_slice())
                })
                .with_jacobian(move |_t: &Vector3<f64>| {
                    DMatrix::from_iterator(
                        3,
                        3,
                        (Matrix3::identity() * -w).iter().copied(),
                    )
                }),
            );
        }
        if cfg.lambda_ct > 0.0 {
            for (term, anchor) in terms.iter().zip(&anchors) {
                let implied_now = correction + term.ct_offset;
                let omega_ct = implied_now * implied_now.transpose()
                    + Matrix3::identity() * crate::voxel_grid::COVARIANCE_FLOOR;
                let info = invert_spd(&omega_ct) * cfg.lambda_ct;
                let offset = term.ct_offset;
                let anchor = *anchor;
                blocks.push(
                    ResidualBlock::new(
                        3,
                        DMatrix::from_iterator(3, 3, info.iter().copied()),
                        move |t: &Vector3<f64>| {
                            DVector::from_column_slice((t + offset - anchor).as_slice())
                        },
                    )
                    .with_jacobian(|_t: &Vector3<f64>| DMatrix::identity(3, 3)),
                );
            }
        }

        let (next, report) = minimize(&blocks, &correction, &cfg.solver)?;
        total_iterations += report.iterations;
        let step = (next - correction).norm();
        correction = next;
        last_report = Some(report);
        for (anchor, term) in anchors.iter_mut().zip(&terms) {
            *anchor = correction + term.ct_offset;
        }
        if step <= cfg.solver.param_tolerance || cfg.lambda_ct == 0.0 {
            outer_converged = true;
            break;
        }
        let _ = outer;
    }

    let mut report = last_report.expect("at least one outer iteration ran");
    report.iterations = total_iterations;
    report.converged = report.converged && outer_converged;
    Ok((t_flp + correction, report))
}

/// Weighted point-to-voxel-mean least-squares cost of a translation against
/// center-aligned correspondences; the independent check for the λ = 0
/// objective.
pub fn point_to_mean_cost(
    corr: &[Correspondence],
    rotation: &Rotation,
    translation_correction: &Vector3<f64>,
    cfg: &FrontEndConfig,
) -> f64 {
    corr.iter()
        .map(|c| {
            let w = count_weight(c, cfg.count_weight);
            let r = w * (c.voxel.mean - *rotation * c.source.position - translation_correction);
            let mut info = icp_information(c);
            // The solver conditions every information matrix the same way.
            info = (info + info.transpose()) * 0.5
                + Matrix3::identity() * crate::solver::INFORMATION_FLOOR;
            (r.transpose() * info * r)[(0, 0)]
        })
        .sum()
}

/// Per-frame diagnostics of the front-end pipeline.
#[derive(Debug, Clone, Default)]
pub struct FrameDiagnostics {
    pub first_frame: bool,
    pub correspondences: usize,
    pub rotation_terms: usize,
    pub rotation_report: Option<SolveReport>,
    pub translation_report: Option<SolveReport>,
    /// Set when a stage failed and the frame fell back to the
    /// forward-prediction pose with identity rotation.
    pub degenerate: Option<FrontEndError>,
    /// Map build + matching time, milliseconds.
    pub voxelize_ms: f64,
    pub rotation_ms: f64,
    pub translation_ms: f64,
}

/// Sequential per-scan front-end: owns the odometry state, the previous
/// scan, and the warm starts.
pub struct FrontEnd {
    cfg: FrontEndConfig,
    state: Option<OdometryState>,
    prev_scan: Option<Scan>,
    prev_relative: RigidTransform,
}

impl FrontEnd {
    pub fn new(cfg: FrontEndConfig) -> Self {
        FrontEnd {
            cfg,
            state: None,
            prev_scan: None,
            prev_relative: RigidTransform::identity(),
        }
    }

    pub fn config(&self) -> &FrontEndConfig {
        &self.cfg
    }

    pub fn state(&self) -> Option<&OdometryState> {
        self.state.as_ref()
    }

    /// Frame-to-frame transform of the previous interval; the deskew
    /// motion and warm start for the next scan.
    pub fn last_relative(&self) -> RigidTransform {
        self.prev_relative
    }

    /// Current world pose.
    pub fn pose(&self) -> RigidTransform {
        self.state
            .as_ref()
            .map(|s| s.pose)
            .unwrap_or_else(RigidTransform::identity)
    }

    /// Adopts back-end-refined poses for the current and previous frames,
    /// so the forward location prediction extrapolates the refined chain.
    /// The warm-start rotation and deskew motion stay the front-end's own
    /// last measured relative: re-deriving them from refined poses feeds
    /// back-end jitter into the matching anchors and destabilizes tracking.
    pub fn apply_refinement(
        &mut self,
        current: RigidTransform,
        previous: Option<RigidTransform>,
    ) {
        if let Some(state) = &mut self.state {
            state.pose = current;
            if let (Some(prev_pose), Some((p, _))) = (previous, &mut state.prev) {
                *p = prev_pose;
            }
        }
    }

    /// Re-anchors the whole odometry chain by a left-multiplied world
    /// correction (used when refinements arrive asynchronously).
    pub fn apply_world_delta(&mut self, delta: &RigidTransform) {
        if let Some(state) = &mut self.state {
            state.pose = delta.compose(&state.pose);
            if let Some((p, _)) = &mut state.prev {
                *p = delta.compose(p);
            }
        }
    }

    /// Processes one (deskewed) scan and returns the frame-to-frame
    /// transform mapping current-scan coordinates into the previous scan's
    /// frame, plus diagnostics. On solver failure the frame falls back to
    /// the forward-prediction pose with identity rotation and is flagged.
    pub fn process_scan(&mut self, scan: &Scan) -> (RigidTransform, FrameDiagnostics) {
        let mut diag = FrameDiagnostics::default();

        let Some(state) = &self.state else {
            self.state = Some(OdometryState::new(RigidTransform::identity(), scan.stamp));
            self.prev_scan = Some(scan.clone());
            diag.first_frame = true;
            return (RigidTransform::identity(), diag);
        };

        let predicted_world = predict_location(state, scan.stamp);
        let mut t_flp =
            state.pose.rotation.inverse() * (predicted_world - state.pose.translation);
        let cap = self.cfg.max_prediction_step;
        if t_flp.norm() > cap {
            t_flp = t_flp / t_flp.norm() * cap;
        }

        let relative = match self.register_pair(scan, &t_flp, &mut diag) {
            Ok(rel) => rel,
            Err(err) => {
                diag.degenerate = Some(err);
                RigidTransform::from_translation(t_flp)
            }
        };

        let state = self.state.as_mut().expect("state initialized above");
        let new_pose = state.pose.compose(&relative);
        state.advance(new_pose, scan.stamp);
        self.prev_scan = Some(scan.clone());
        self.prev_relative = relative;
        (relative, diag)
    }

    fn register_pair(
        &self,
        scan: &Scan,
        t_flp: &Vector3<f64>,
        diag: &mut FrameDiagnostics,
    ) -> Result<RigidTransform, FrontEndError> {
        let target = self.prev_scan.as_ref().expect("previous scan available");
        let warm = self.prev_relative.rotation;

        // Center alignment: express the target relative to the predicted
        // source center, then match the (warm-rotated) source against it.
        let stage = std::time::Instant::now();
        let shifted_target = target.map_positions(|p| p - t_flp);
        let map = build_voxel_map_with(
            &shifted_target,
            self.cfg.resolution,
            None,
            self.cfg.covariance_mode,
        )?;
        let probe = if warm == Rotation::identity() {
            scan.clone()
        } else {
            scan.map_positions(|p| warm * *p)
        };
        let mut corr = match_correspondences(&probe, &map, self.cfg.n_min);
        // Residuals use the raw (own-frame) source points; the warm rotation
        // only served the cell lookup.
        for c in &mut corr {
            c.source = scan.points()[c.source_index];
        }
        diag.correspondences = corr.len();
        diag.voxelize_ms = stage.elapsed().as_secs_f64() * 1e3;

        let stage = std::time::Instant::now();
        let max_angle = self.cfg.max_spherical_angle.min(std::f64::consts::FRAC_PI_2);
        diag.rotation_terms = corr
            .iter()
            .filter(|c| {
                let q = warm * c.source.position;
                let n = c.voxel.mean.norm();
                n > 1e-9
                    && q.norm() > 1e-9
                    && (q.dot(&c.voxel.mean) / (q.norm() * n)).clamp(-1.0, 1.0).acos()
                        <= max_angle
            })
            .count();
        let (rotation, rot_report) = register_rotation(&corr, &self.cfg, &warm)?;
        diag.rotation_report = Some(rot_report);
        diag.rotation_ms = stage.elapsed().as_secs_f64() * 1e3;

        let stage = std::time::Instant::now();
        let (translation, trans_report) =
            optimize_translation(&corr, &rotation, t_flp, &self.cfg)?;
        diag.translation_report = Some(trans_report);
        diag.translation_ms = stage.elapsed().as_secs_f64() * 1e3;

        Ok(RigidTransform::new(rotation, translation))
    }
}
