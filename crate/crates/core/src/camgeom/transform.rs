use nalgebra::{Matrix3, Vector3};

use super::CamGeomError;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Skew-symmetric cross-product matrix of `v`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula: axis-angle vector to rotation matrix.
pub fn axis_angle_to_matrix(aa: &Vector3<f64>) -> Matrix3<f64> {
    let angle = aa.norm();
    let k = skew(aa);
    if angle < 1e-12 {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let (s, c) = angle.sin_cos();
    Matrix3::identity() + (s / angle) * k + ((1.0 - c) / (angle * angle)) * k * k
}

/// Inverse of [`axis_angle_to_matrix`]; the returned angle lies in `[0, π]`.
pub fn matrix_to_axis_angle(r: &Matrix3<f64>) -> Vector3<f64> {
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin_a = 0.5 * vee.norm();
    let cos_a = 0.5 * (r.trace() - 1.0);
    let angle = sin_a.atan2(cos_a);
    if angle < 1e-6 {
        return 0.5 * vee * (1.0 + angle * angle / 6.0);
    }
    if angle < std::f64::consts::PI - 1e-3 {
        return vee * (angle / (2.0 * sin_a));
    }
    // Near π the skew part vanishes; recover the axis from the symmetric part.
    let sym = 0.5 * (r + r.transpose());
    let outer = (sym - Matrix3::identity() * cos_a) / (1.0 - cos_a);
    let i = (0..3).max_by(|&a, &b| outer[(a, a)].total_cmp(&outer[(b, b)])).unwrap();
    let mut axis = outer.column(i).into_owned() / outer[(i, i)].max(1e-300).sqrt();
    axis.normalize_mut();
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    axis * angle
}

/// Left Jacobian of SO(3): `∂R/∂θ_k = [J(θ) e_k]× R`.
pub fn so3_left_jacobian(aa: &Vector3<f64>) -> Matrix3<f64> {
    let angle = aa.norm();
    let k = skew(aa);
    if angle < 1e-8 {
        return Matrix3::identity() + 0.5 * k + k * k / 6.0;
    }
    let a2 = angle * angle;
    Matrix3::identity()
        + ((1.0 - angle.cos()) / a2) * k
        + ((angle - angle.sin()) / (a2 * angle)) * k * k
}

/// Rewrites an axis-angle vector so that its magnitude is below π.
pub fn canonicalize_axis_angle(aa: &Vector3<f64>) -> Vector3<f64> {
    let angle = aa.norm();
    if angle < std::f64::consts::PI {
        return *aa;
    }
    matrix_to_axis_angle(&axis_angle_to_matrix(aa))
}

/// A proper rigid motion `x ↦ R x + t`.
///
/// Camera extrinsics use the world→camera direction.
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
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, CamGeomError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= ORTHONORMAL_TOL) || !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(CamGeomError::InvalidRotation { orthogonality: ortho, determinant: det });
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(CamGeomError::NonFinite);
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_axis_angle(aa: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: axis_angle_to_matrix(aa), translation }
    }

    /// Exponential map of a twist `[ω, v]` where the translation is taken verbatim
    /// (a "split" parameterization, not the SE(3) exponential).
    pub fn from_params(params: &[f64; 6]) -> Self {
        Self::from_axis_angle(
            &Vector3::new(params[0], params[1], params[2]),
            Vector3::new(params[3], params[4], params[5]),
        )
    }

    pub fn to_params(&self) -> [f64; 6] {
        let w = matrix_to_axis_angle(&self.rotation);
        [w.x, w.y, w.z, self.translation.x, self.translation.y, self.translation.z]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Rotation angle (radians) of the relative motion between `self` and `other`.
    pub fn rotation_distance(&self, other: &RigidTransform) -> f64 {
        matrix_to_axis_angle(&(self.rotation.transpose() * other.rotation)).norm()
    }

    /// Re-orthonormalizes the rotation (polar projection via SVD).
    pub fn orthonormalized(&self) -> RigidTransform {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        RigidTransform { rotation: u * d * vt, translation: self.translation }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-5.0..5.0f64)).prop_map(
            |(w, t)| RigidTransform::from_axis_angle(&Vector3::from(w), Vector3::from(t)),
        )
    }

    #[test]
    fn rejects_reflection() {
        let mut r = Matrix3::identity();
        r[(2, 2)] = -1.0;
        assert!(matches!(
            RigidTransform::new(r, Vector3::zeros()),
            Err(CamGeomError::InvalidRotation { .. })
        ));
    }

    #[test]
    fn axis_angle_roundtrip_near_pi() {
        let aa = Vector3::new(0.0, 0.0, std::f64::consts::PI - 1e-7);
        let back = matrix_to_axis_angle(&axis_angle_to_matrix(&aa));
        assert!((back - aa).norm() < 1e-8);
    }

    #[test]
    fn left_jacobian_matches_finite_difference() {
        let aa = Vector3::new(0.3, -0.7, 0.4);
        let r = axis_angle_to_matrix(&aa);
        let jl = so3_left_jacobian(&aa);
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = 1e-6;
            let fd = (axis_angle_to_matrix(&(aa + e)) - axis_angle_to_matrix(&(aa - e))) / 2e-6;
            let analytic = skew(&(jl.column(k).into_owned())) * r;
            assert!((fd - analytic).abs().max() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!((left.rotation - right.rotation).abs().max() < 1e-12);
            prop_assert!((left.translation - right.translation).abs().max() < 1e-12);
        }

        #[test]
        fn inverse_cancels(a in arb_transform()) {
            let id = a.inverse().compose(&a);
            prop_assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-12);
            prop_assert!(id.translation.abs().max() < 1e-12);
        }

        #[test]
        fn canonical_angle_below_pi(w in prop::array::uniform3(-9.0..9.0f64)) {
            let aa = Vector3::from(w);
            let c = canonicalize_axis_angle(&aa);
            prop_assert!(c.norm() <= std::f64::consts::PI + 1e-12);
            let diff = axis_angle_to_matrix(&aa) - axis_angle_to_matrix(&c);
            prop_assert!(diff.abs().max() < 1e-9);
        }
    }
}
