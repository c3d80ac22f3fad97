//! Camera poses and the view-distance functions used by pose-aware NMS.
//!
//! Orientation distance is the geodesic angle between two rotations,
//! computed from unit quaternions as `2 * acos(|p . q|)`. Position distance
//! is Euclidean. The combined view distance is a weighted sum of the two,
//! with both weights defaulting to one (meters and radians added directly).

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when accepting a rotation matrix.
pub const ROTATION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (max |R R^T - I| = {deviation:.3e}, det = {det:.6})")]
    NonOrthonormalRotation { deviation: f64, det: f64 },
    #[error("camera position has non-finite components")]
    NonFinitePosition,
}

/// Unit quaternion stored as `[x, y, z, w]`, canonicalized so `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion(pub [f64; 4]);

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion([0.0, 0.0, 0.0, 1.0]);

    /// Normalizes and canonicalizes raw components. Returns `None` for a
    /// zero or non-finite input.
    pub fn new(components: [f64; 4]) -> Option<Self> {
        let norm = components.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return None;
        }
        let mut q = components.map(|c| c / norm);
        canonicalize(&mut q);
        Some(UnitQuaternion(q))
    }

    pub fn x(&self) -> f64 {
        self.0[0]
    }
    pub fn y(&self) -> f64 {
        self.0[1]
    }
    pub fn z(&self) -> f64 {
        self.0[2]
    }
    pub fn w(&self) -> f64 {
        self.0[3]
    }

    pub fn dot(&self, other: &UnitQuaternion) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum()
    }

    /// Rotation about a unit axis by `angle` radians.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let axis = axis.normalize();
        let (s, c) = (angle / 2.0).sin_cos();
        UnitQuaternion::new([axis.x * s, axis.y * s, axis.z * s, c]).expect("unit axis")
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        let [x, y, z, w] = self.0;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        )
    }
}

// w >= 0; when w == 0 the first nonzero component is made positive.
fn canonicalize(q: &mut [f64; 4]) {
    let flip = if q[3] != 0.0 {
        q[3] < 0.0
    } else {
        q.iter().take(3).find(|c| **c != 0.0).is_some_and(|c| *c < 0.0)
    };
    if flip {
        for c in q.iter_mut() {
            *c = -*c;
        }
    }
}

/// Checks `R R^T = I` within [`ROTATION_TOLERANCE`] and `det(R) > 0`.
pub fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    let deviation = (r * r.transpose() - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if !deviation.is_finite() || deviation > ROTATION_TOLERANCE || det < 0.0 {
        return Err(GeometryError::NonOrthonormalRotation { deviation, det });
    }
    Ok(())
}

/// Converts a rotation matrix to a canonical unit quaternion.
///
/// Branches on the largest of the trace and the diagonal entries so the
/// square root is always taken of a quantity bounded away from zero,
/// which keeps precision near half-turn rotations.
pub fn quat_from_rotation(r: &Matrix3<f64>) -> Result<UnitQuaternion, GeometryError> {
    check_rotation(r)?;
    let trace = r.trace();
    let (m00, m11, m22) = (r[(0, 0)], r[(1, 1)], r[(2, 2)]);
    let q = if trace >= m00 && trace >= m11 && trace >= m22 {
        let s = (1.0 + trace).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
            0.25 * s,
        ]
    } else if m00 >= m11 && m00 >= m22 {
        let s = (1.0 + m00 - m11 - m22).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(2, 1)] - r[(1, 2)]) / s,
        ]
    } else if m11 >= m22 {
        let s = (1.0 + m11 - m00 - m22).sqrt() * 2.0;
        [
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
        ]
    } else {
        let s = (1.0 + m22 - m00 - m11).sqrt() * 2.0;
        [
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    };
    Ok(UnitQuaternion::new(q).expect("rotation yields a nonzero quaternion"))
}

/// Geodesic angle between two orientations, in `[0, pi]`.
pub fn d_ori(p: &UnitQuaternion, q: &UnitQuaternion) -> f64 {
    let dot = p.dot(q).abs().clamp(-1.0, 1.0);
    2.0 * dot.acos()
}

/// Euclidean distance between two camera positions.
pub fn d_pos(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm()
}

/// Weights of the combined view distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceWeights {
    pub position: f64,
    pub orientation: f64,
}

impl Default for DistanceWeights {
    fn default() -> Self {
        DistanceWeights {
            position: 1.0,
            orientation: 1.0,
        }
    }
}

/// Camera-to-world pose: `rotation` maps camera axes into the world frame and
/// `position` is the camera center in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    position: Vector3<f64>,
    rotation: Matrix3<f64>,
    quaternion: UnitQuaternion,
}

impl CameraPose {
    pub fn new(position: Vector3<f64>, rotation: Matrix3<f64>) -> Result<Self, GeometryError> {
        if !position.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinitePosition);
        }
        let quaternion = quat_from_rotation(&rotation)?;
        Ok(CameraPose {
            position,
            rotation,
            quaternion,
        })
    }

    pub fn identity() -> Self {
        CameraPose::new(Vector3::zeros(), Matrix3::identity()).expect("identity is valid")
    }

    /// Builds a pose from a row-major 4x4 camera-to-world extrinsic.
    pub fn from_extrinsic(m: &[[f64; 4]; 4]) -> Result<Self, GeometryError> {
        let rotation = Matrix3::from_fn(|i, j| m[i][j]);
        let position = Vector3::new(m[0][3], m[1][3], m[2][3]);
        CameraPose::new(position, rotation)
    }

    pub fn to_extrinsic(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate().take(3) {
            for (j, v) in row.iter_mut().enumerate().take(3) {
                *v = self.rotation[(i, j)];
            }
            row[3] = self.position[i];
        }
        m[3][3] = 1.0;
        m
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let e = self.to_extrinsic();
        Matrix4::from_fn(|i, j| e[i][j])
    }

    /// Camera looking from `eye` towards `target`, with `up` as the world up
    /// direction. Camera axes follow the x-right, y-down, z-forward convention.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        CameraPose::new(eye, rotation)
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.position
    }
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }
    pub fn quaternion(&self) -> &UnitQuaternion {
        &self.quaternion
    }

    /// Optical axis (camera +z) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    /// Expresses a world point in the camera frame.
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.position)
    }
}

/// Weighted sum of position and orientation distance between two poses.
pub fn view_distance(a: &CameraPose, b: &CameraPose, weights: DistanceWeights) -> f64 {
    weights.position * d_pos(&a.position, &b.position)
        + weights.orientation * d_ori(&a.quaternion, &b.quaternion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_axis(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() > 1e-3 && v.norm() <= 1.0 {
                return v.normalize();
            }
        }
    }

    // Rodrigues formula, independent of the quaternion path.
    fn rodrigues(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        let k = Matrix3::new(
            0.0, -axis.z, axis.y, axis.z, 0.0, -axis.x, -axis.y, axis.x, 0.0,
        );
        Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
    }

    #[test]
    fn identity_rotation_gives_identity_quaternion() {
        let q = quat_from_rotation(&Matrix3::identity()).unwrap();
        assert_eq!(q, UnitQuaternion::IDENTITY);
    }

    #[test]
    fn half_turn_about_z() {
        let r = rodrigues(Vector3::z(), PI);
        let q = quat_from_rotation(&r).unwrap();
        assert_abs_diff_eq!(q.x(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.y(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.z(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.w(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_reflections_and_skew() {
        let mut r = Matrix3::identity();
        r[(2, 2)] = -1.0;
        assert!(matches!(
            quat_from_rotation(&r),
            Err(GeometryError::NonOrthonormalRotation { .. })
        ));
        let mut s = Matrix3::identity();
        s[(0, 1)] = 1e-3;
        assert!(quat_from_rotation(&s).is_err());
    }

    #[test]
    fn round_trip_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let axis = random_axis(&mut rng);
            let angle = rng.gen_range(0.0..PI);
            let r = rodrigues(axis, angle);
            let q = quat_from_rotation(&r).unwrap();
            assert!(q.w() >= 0.0);
            let back = q.to_rotation();
            assert!((back - r).abs().max() < 1e-6);
            let q2 = quat_from_rotation(&back).unwrap();
            assert!(d_ori(&q, &q2) < 1e-6);
            // geodesic angle recovered from the quaternion
            assert_abs_diff_eq!(d_ori(&UnitQuaternion::IDENTITY, &q), angle, epsilon = 1e-6);
        }
    }

    #[test]
    fn near_half_turn_precision() {
        let axis = Vector3::new(1.0, 2.0, -0.5).normalize();
        let r = rodrigues(axis, PI - 1e-9);
        let q = quat_from_rotation(&r).unwrap();
        assert!((q.to_rotation() - r).abs().max() < 1e-9);
    }

    #[test]
    fn quarter_turn_distance_matches_trace_oracle() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let q = UnitQuaternion::new([0.0, 0.0, s, s]).unwrap();
        let d = d_ori(&UnitQuaternion::IDENTITY, &q);
        // relative rotation trace: angle = acos((tr - 1) / 2)
        let rel = q.to_rotation();
        let oracle = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        assert_abs_diff_eq!(d, FRAC_PI_2, epsilon = 1e-9);
        assert_abs_diff_eq!(d, oracle, epsilon = 1e-9);
    }

    #[test]
    fn double_cover() {
        let p = UnitQuaternion::IDENTITY;
        let neg = UnitQuaternion([0.0, 0.0, 0.0, -1.0]);
        assert_eq!(d_ori(&p, &neg), 0.0);
        assert_eq!(d_ori(&p, &p), 0.0);
    }

    #[test]
    fn position_distance() {
        assert_eq!(d_pos(&Vector3::zeros(), &Vector3::new(3.0, 4.0, 0.0)), 5.0);
        let t = Vector3::new(0.1, -2.0, 7.0);
        assert_eq!(d_pos(&t, &t), 0.0);
    }

    #[test]
    fn view_distance_examples() {
        let a = CameraPose::identity();
        assert_eq!(view_distance(&a, &a, DistanceWeights::default()), 0.0);
        let b = CameraPose::new(Vector3::new(0.3, 0.0, 0.0), Matrix3::identity()).unwrap();
        assert_abs_diff_eq!(view_distance(&a, &b, DistanceWeights::default()), 0.3, epsilon = 1e-15);
        let c = CameraPose::new(Vector3::zeros(), rodrigues(Vector3::z(), FRAC_PI_2)).unwrap();
        assert_abs_diff_eq!(
            view_distance(&a, &c, DistanceWeights::default()),
            FRAC_PI_2,
            epsilon = 1e-9
        );
        let w = DistanceWeights {
            position: 2.0,
            orientation: 0.0,
        };
        assert_abs_diff_eq!(view_distance(&a, &b, w), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn canonical_sign_tie_break() {
        let q = UnitQuaternion::new([0.0, -1.0, 0.0, 0.0]).unwrap();
        assert_eq!(q.0, [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn look_at_points_forward() {
        let pose = CameraPose::look_at(
            Vector3::new(1.0, 0.0, 1.5),
            Vector3::new(4.0, 0.0, 1.5),
            Vector3::z(),
        )
        .unwrap();
        assert_abs_diff_eq!(pose.forward().x, 1.0, epsilon = 1e-12);
        let p = pose.world_to_camera(&Vector3::new(3.0, 0.0, 1.5));
        assert_abs_diff_eq!(p.z, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pose.rotation().determinant(), 1.0, epsilon = 1e-12);
    }
}
