//! SE(3) algebra and closed-form rigid alignment.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;

/// 3×3 covariance, m² for Cartesian points.
pub type CovMatrix3 = Matrix3<f64>;

const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

/// Rigid-body transform `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform from a rotation matrix and translation. The rotation
    /// is projected back onto SO(3) if it drifted past the tolerance.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: orthonormalize(rotation),
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Rotation by `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self {
            rotation: *rotation.matrix(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation from a rotation vector (axis · angle), translation added after.
    pub fn from_rotation_vector(omega: Vector3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::from_scaled_axis(omega);
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::z(), angle)
    }

    pub fn from_quaternion(quaternion: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self::from_parts(*quaternion.to_rotation_matrix().matrix(), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::from_parts(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Rotates a covariance into the transformed frame: `R Σ Rᵀ`.
    pub fn rotate_covariance(&self, cov: &CovMatrix3) -> CovMatrix3 {
        let c = self.rotation * cov * self.rotation.transpose();
        (c + c.transpose()) * 0.5
    }

    /// Geodesic rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let sin = 0.5 * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
        let cos = (r.trace() - 1.0) * 0.5;
        sin.atan2(cos)
    }

    pub fn translation_norm(&self) -> f64 {
        self.translation.norm()
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Largest deviation of `RᵀR` from identity, and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        gram.max((self.rotation.determinant() - 1.0).abs())
    }
}

/// Free-function form of [`RigidTransform::compose`].
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn inverse(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

pub fn apply(t: &RigidTransform, p: &Point3) -> Point3 {
    t.apply(p)
}

pub fn rotation_angle(t: &RigidTransform) -> f64 {
    t.rotation_angle()
}

fn orthonormalize(r: Matrix3<f64>) -> Matrix3<f64> {
    let gram = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if gram <= ORTHONORMAL_TOLERANCE && (det - 1.0).abs() <= ORTHONORMAL_TOLERANCE {
        return r;
    }
    // Polar decomposition: nearest rotation in Frobenius norm.
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut fixed = u * v_t;
    if fixed.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(svd.singular_values.imin()).neg_mut();
        fixed = u * v_t;
    }
    fixed
}

/// Skew-symmetric matrix with `skew(a) * b == a × b`.
pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Least-squares rigid alignment of `(source, target)` pairs, minimizing
/// `Σ ‖T·p − r‖²` (centroids + SVD of the cross-covariance, with the
/// reflection fixed by flipping the last singular vector).
pub fn estimate_rigid_pt2pt(pairs: &[(Point3, Point3)]) -> Result<RigidTransform> {
    if pairs.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "point-to-point alignment needs 3 pairs, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let (sum_src, sum_tgt) = pairs
        .iter()
        .fold((Vector3::zeros(), Vector3::zeros()), |(a, b), (p, r)| {
            (a + p.coords, b + r.coords)
        });
    let mean_src = sum_src / n;
    let mean_tgt = sum_tgt / n;

    let mut cross = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for (p, r) in pairs {
        let dp = p.coords - mean_src;
        let dr = r.coords - mean_tgt;
        cross += dr * dp.transpose();
        scatter += dp * dp.transpose();
    }

    let mut spread = scatter.symmetric_eigenvalues();
    spread
        .as_mut_slice()
        .sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    if spread[0] <= 0.0 || spread[1] <= 1e-12 * spread[0] {
        return Err(Error::DegenerateConfiguration(
            "source points are collinear or coincident".into(),
        ));
    }

    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut rotation = u * v_t;
    if rotation.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(svd.singular_values.imin()).neg_mut();
        rotation = u * v_t;
    }
    let translation = mean_tgt - rotation * mean_src;
    Ok(RigidTransform::from_parts(rotation, translation))
}
