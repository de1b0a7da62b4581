//! Rigid-body transform algebra on SO(3)/SE(3).
//!
//! Rotations are stored as 3x3 matrices and kept orthonormal; long
//! composition chains can be cleaned up with [`Rotation::orthonormalized`]
//! (polar decomposition). Euler angles follow the ZYX intrinsic convention
//! (yaw about z, then pitch about the new y, then roll about the new x),
//! i.e. `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Tolerance used by the orthonormality validators.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    /// Pitch is within `1e-6` rad of ±π/2, so roll and yaw are not
    /// separable; callers should compare rotation matrices instead.
    #[error("gimbal lock: pitch within 1e-6 rad of ±π/2")]
    GimbalLock,
    #[error("matrix is not a proper rotation (orthonormality residual {residual:.3e})")]
    NotARotation { residual: f64 },
    #[error("extrinsic chain must contain at least one link")]
    EmptyChain,
}

/// A proper rotation in SO(3), stored as an orthonormal 3x3 matrix with
/// determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    matrix: Matrix3<f64>,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            matrix: Matrix3::identity(),
        }
    }

    /// Wraps a matrix that is already known to be orthonormal with det +1.
    /// Used on hot paths; validity is the caller's obligation.
    pub fn from_matrix_unchecked(matrix: Matrix3<f64>) -> Self {
        Rotation { matrix }
    }

    /// Validates orthonormality (tolerance `1e-6`) and snaps the result to
    /// the nearest rotation via polar decomposition.
    pub fn from_matrix(matrix: Matrix3<f64>) -> Result<Self, GeometryError> {
        let residual = (matrix.transpose() * matrix - Matrix3::identity()).norm();
        if residual > 1e-6 || matrix.determinant() < 0.0 {
            return Err(GeometryError::NotARotation { residual });
        }
        Ok(Rotation { matrix }.orthonormalized())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation::from_matrix_unchecked(Matrix3::new(
            1.0, 0.0, 0.0, //
            0.0, c, -s, //
            0.0, s, c,
        ))
    }

    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation::from_matrix_unchecked(Matrix3::new(
            c, 0.0, s, //
            0.0, 1.0, 0.0, //
            -s, 0.0, c,
        ))
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation::from_matrix_unchecked(Matrix3::new(
            c, -s, 0.0, //
            s, c, 0.0, //
            0.0, 0.0, 1.0,
        ))
    }

    /// Exponential map: Rodrigues' formula on an axis-angle vector.
    pub fn exp(axis_angle: Vector3<f64>) -> Self {
        let angle = axis_angle.norm();
        if angle < 1e-12 {
            // Second-order expansion keeps exp/log consistent near zero.
            let k = skew(&axis_angle);
            return Rotation::from_matrix_unchecked(
                Matrix3::identity() + k + 0.5 * k * k,
            )
            .orthonormalized();
        }
        let k = skew(&(axis_angle / angle));
        let m = Matrix3::identity() + angle.sin() * k + (1.0 - angle.cos()) * k * k;
        Rotation::from_matrix_unchecked(m)
    }

    /// Logarithmic map: axis-angle vector of the rotation, angle in [0, π].
    pub fn log(&self) -> Vector3<f64> {
        let m = &self.matrix;
        let cos_angle = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let angle = cos_angle.acos();
        if angle < 1e-12 {
            return Vector3::new(
                0.5 * (m[(2, 1)] - m[(1, 2)]),
                0.5 * (m[(0, 2)] - m[(2, 0)]),
                0.5 * (m[(1, 0)] - m[(0, 1)]),
            );
        }
        if (std::f64::consts::PI - angle) < 1e-6 {
            // Near π the antisymmetric part degenerates; recover the axis
            // from the symmetric part instead.
            let b = 0.5 * (m + m.transpose()) - (cos_angle * Matrix3::identity());
            // B = (1 - cos) * axis * axisᵀ; pick the largest diagonal.
            let scale = 1.0 - cos_angle;
            let mut axis = Vector3::zeros();
            let diag = [b[(0, 0)], b[(1, 1)], b[(2, 2)]];
            let k = if diag[0] >= diag[1] && diag[0] >= diag[2] {
                0
            } else if diag[1] >= diag[2] {
                1
            } else {
                2
            };
            axis[k] = (diag[k] / scale).max(0.0).sqrt();
            if axis[k] > 0.0 {
                for i in 0..3 {
                    if i != k {
                        axis[i] = b[(i, k)] / (scale * axis[k]);
                    }
                }
            }
            // Fix the sign using the antisymmetric part when it is nonzero.
            let w = Vector3::new(
                m[(2, 1)] - m[(1, 2)],
                m[(0, 2)] - m[(2, 0)],
                m[(1, 0)] - m[(0, 1)],
            );
            if w.dot(&axis) < 0.0 {
                axis = -axis;
            }
            return axis.normalize() * angle;
        }
        let w = Vector3::new(
            m[(2, 1)] - m[(1, 2)],
            m[(0, 2)] - m[(2, 0)],
            m[(1, 0)] - m[(0, 1)],
        );
        w * (angle / (2.0 * angle.sin()))
    }

    /// ZYX intrinsic Euler composition: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        Rotation::rot_z(yaw) * Rotation::rot_y(pitch) * Rotation::rot_x(roll)
    }

    /// Recovers `(roll, pitch, yaw)` under the ZYX intrinsic convention.
    ///
    /// Fails with [`GeometryError::GimbalLock`] when the pitch is within
    /// `1e-6` rad of ±π/2.
    pub fn euler_angles(&self) -> Result<(f64, f64, f64), GeometryError> {
        let m = &self.matrix;
        let sin_pitch = (-m[(2, 0)]).clamp(-1.0, 1.0);
        let pitch = sin_pitch.asin();
        if std::f64::consts::FRAC_PI_2 - pitch.abs() < 1e-6 {
            return Err(GeometryError::GimbalLock);
        }
        let roll = m[(2, 1)].atan2(m[(2, 2)]);
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        Ok((roll, pitch, yaw))
    }

    pub fn transpose(&self) -> Self {
        Rotation::from_matrix_unchecked(self.matrix.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// Geodesic distance to another rotation, in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).log().norm()
    }

    /// Snaps back onto SO(3) via polar decomposition (SVD), fixing the sign
    /// so the determinant stays +1.
    pub fn orthonormalized(&self) -> Self {
        let svd = self.matrix.svd(true, true);
        let u = svd.u.expect("svd requested u");
        let v_t = svd.v_t.expect("svd requested v_t");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            // Flip the axis of the smallest singular value.
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Rotation::from_matrix_unchecked(r)
    }

    pub fn orthonormality_residual(&self) -> f64 {
        (self.matrix.transpose() * self.matrix - Matrix3::identity()).norm()
    }

    pub fn rotate(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * p
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation::from_matrix_unchecked(self.matrix * rhs.matrix)
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.matrix * rhs
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// A pose `[R | t]` on SE(3). Applying it to a point computes `R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    /// The restricted form `[I | t]`.
    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Rotation::identity(),
            translation,
        }
    }

    /// The restricted form `[R | 0]`.
    pub fn from_rotation(rotation: Rotation) -> Self {
        RigidTransform {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    /// Composition `self ∘ other`: the result applies `other` first, then
    /// `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rot_inv = self.rotation.inverse();
        RigidTransform {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * *p + self.translation
    }

    /// Geodesic rotation angle plus translation distance to another pose.
    pub fn error_to(&self, other: &RigidTransform) -> (f64, f64) {
        let rot = self.rotation.angle_to(&other.rotation);
        let trans = (self.translation - other.translation).norm();
        (rot, trans)
    }

    /// Re-orthonormalizes the rotation part.
    pub fn orthonormalized(&self) -> Self {
        RigidTransform {
            rotation: self.rotation.orthonormalized(),
            translation: self.translation,
        }
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

/// Ordered vehicle→LiDAR link transforms. The vehicle pose is the
/// left-product of the links applied to the LiDAR pose.
#[derive(Debug, Clone)]
pub struct ExtrinsicChain {
    links: Vec<RigidTransform>,
}

impl ExtrinsicChain {
    pub fn new(links: Vec<RigidTransform>) -> Result<Self, GeometryError> {
        if links.is_empty() {
            return Err(GeometryError::EmptyChain);
        }
        Ok(ExtrinsicChain { links })
    }

    pub fn links(&self) -> &[RigidTransform] {
        &self.links
    }

    /// Derives the vehicle's world pose from the LiDAR's world pose by
    /// left-multiplying the chain product.
    pub fn vehicle_pose_from_lidar(&self, lidar_pose: &RigidTransform) -> RigidTransform {
        let chain = self
            .links
            .iter()
            .skip(1)
            .fold(self.links[0], |acc, link| acc.compose(link));
        chain.compose(lidar_pose)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_rotation(rng: &mut impl Rng) -> Rotation {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        if axis.norm() < 1e-9 {
            return Rotation::identity();
        }
        Rotation::exp(axis.normalize() * angle)
    }

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        RigidTransform::new(
            random_rotation(rng),
            Vector3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            ),
        )
    }

    #[test]
    fn compose_identity() {
        let id = RigidTransform::identity();
        let c = id.compose(&id);
        assert_relative_eq!(c.translation.norm(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(
            (c.rotation.matrix() - Matrix3::identity()).norm(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            let c = t.compose(&t.invert());
            assert!(c.translation.norm() < 1e-9);
            assert!((c.rotation.matrix() - Matrix3::identity()).norm() < 1e-9);
        }
    }

    #[test]
    fn compose_applies_right_then_left() {
        // [Rz(90°) | 0] ∘ [I | (1,0,0)] applied to the origin lands on (0,1,0).
        let a = RigidTransform::from_rotation(Rotation::rot_z(std::f64::consts::FRAC_PI_2));
        let b = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let p = a.compose(&b).transform_point(&Vector3::zeros());
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn invert_pure_translation() {
        let t = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let inv = t.invert();
        assert_relative_eq!(inv.translation.x, -1.0, epsilon = 1e-12);
        assert_relative_eq!(inv.translation.y, -2.0, epsilon = 1e-12);
        assert_relative_eq!(inv.translation.z, -3.0, epsilon = 1e-12);
    }

    #[test]
    fn invert_rotation_and_translation() {
        // [Rz(90°) | (1,0,0)]⁻¹ = [Rz(−90°) | (0,1,0)]
        let t = RigidTransform::new(
            Rotation::rot_z(std::f64::consts::FRAC_PI_2),
            Vector3::new(1.0, 0.0, 0.0),
        );
        let inv = t.invert();
        let expected_rot = Rotation::rot_z(-std::f64::consts::FRAC_PI_2);
        assert!((inv.rotation.matrix() - expected_rot.matrix()).norm() < 1e-12);
        assert_relative_eq!(inv.translation.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(inv.translation.y, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn euler_identity_and_single_axis() {
        let (r, p, y) = Rotation::identity().euler_angles().unwrap();
        assert_relative_eq!(r, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p, 0.0, epsilon = 1e-12);
        assert_relative_eq!(y, 0.0, epsilon = 1e-12);

        let (r, p, y) = Rotation::rot_z(0.3).euler_angles().unwrap();
        assert_relative_eq!(r, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p, 0.0, epsilon = 1e-12);
        assert_relative_eq!(y, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn euler_round_trip_named_angles() {
        let rot = Rotation::from_euler(0.1, 0.2, 0.3);
        let (r, p, y) = rot.euler_angles().unwrap();
        assert_relative_eq!(r, 0.1, epsilon = 1e-12);
        assert_relative_eq!(p, 0.2, epsilon = 1e-12);
        assert_relative_eq!(y, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn euler_gimbal_lock_detected() {
        let rot = Rotation::rot_y(std::f64::consts::FRAC_PI_2);
        assert_eq!(rot.euler_angles(), Err(GeometryError::GimbalLock));
        let rot = Rotation::rot_y(-std::f64::consts::FRAC_PI_2 + 1e-8);
        assert_eq!(rot.euler_angles(), Err(GeometryError::GimbalLock));
    }

    #[test]
    fn euler_round_trip_random() {
        let mut rng = StdRng::seed_from_u64(11);
        let limit = 80f64.to_radians();
        for _ in 0..1000 {
            let roll = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let pitch = rng.gen_range(-limit..limit);
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let rot = Rotation::from_euler(roll, pitch, yaw);
            let (r, p, y) = rot.euler_angles().unwrap();
            let back = Rotation::from_euler(r, p, y);
            assert!(
                (back.matrix() - rot.matrix()).norm() < 1e-9,
                "round trip failed for ({roll}, {pitch}, {yaw})"
            );
        }
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..500 {
            let r = random_rotation(&mut rng);
            let back = Rotation::exp(r.log());
            assert!((back.matrix() - r.matrix()).norm() < 1e-9);
        }
        // Near-π angles hit the symmetric-part branch.
        for i in 0..50 {
            let angle = std::f64::consts::PI - 1e-8 * i as f64;
            let axis = Vector3::new(1.0, -2.0, 0.5).normalize();
            let r = Rotation::exp(axis * angle);
            let back = Rotation::exp(r.log());
            assert!((back.matrix() - r.matrix()).norm() < 1e-7);
        }
    }

    #[test]
    fn composition_associativity() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..100 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let c = random_transform(&mut rng);
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            assert!((left.translation - right.translation).norm() < 1e-9);
            assert!((left.rotation.matrix() - right.rotation.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn renormalization_after_long_chains() {
        let mut rng = StdRng::seed_from_u64(19);
        let mut acc = Rotation::identity();
        for _ in 0..10_000 {
            acc = acc * random_rotation(&mut rng);
        }
        let cleaned = acc.orthonormalized();
        assert!(cleaned.orthonormality_residual() < 1e-9);
        assert!((cleaned.matrix().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn extrinsic_chain_identity_link() {
        let chain = ExtrinsicChain::new(vec![RigidTransform::identity()]).unwrap();
        let pose = RigidTransform::new(
            Rotation::rot_x(0.4),
            Vector3::new(2.0, -1.0, 3.0),
        );
        let out = chain.vehicle_pose_from_lidar(&pose);
        assert!((out.translation - pose.translation).norm() < 1e-12);
        assert!((out.rotation.matrix() - pose.rotation.matrix()).norm() < 1e-12);
    }

    #[test]
    fn extrinsic_chain_offset_link() {
        let chain = ExtrinsicChain::new(vec![RigidTransform::from_translation(Vector3::new(
            0.0, 0.0, 0.5,
        ))])
        .unwrap();
        let pose = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let out = chain.vehicle_pose_from_lidar(&pose);
        assert_relative_eq!(out.translation.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(out.translation.z, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn extrinsic_chain_two_links_equal_product() {
        let mut rng = StdRng::seed_from_u64(23);
        let a = random_transform(&mut rng);
        let b = random_transform(&mut rng);
        let pose = random_transform(&mut rng);
        let two = ExtrinsicChain::new(vec![a, b]).unwrap();
        let one = ExtrinsicChain::new(vec![a.compose(&b)]).unwrap();
        let left = two.vehicle_pose_from_lidar(&pose);
        let right = one.vehicle_pose_from_lidar(&pose);
        assert!((left.translation - right.translation).norm() < 1e-9);
        assert!((left.rotation.matrix() - right.rotation.matrix()).norm() < 1e-9);
    }

    #[test]
    fn empty_chain_rejected() {
        assert!(matches!(
            ExtrinsicChain::new(vec![]),
            Err(GeometryError::EmptyChain)
        ));
    }
}
