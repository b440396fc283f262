use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{BodyError, JOINT_NAMES, NUM_JOINTS};
use crate::camgeom::{axis_angle_to_matrix, skew, so3_left_jacobian};

/// Within this distance of ±π/2 the middle angle is reported as gimbal locked.
pub const GIMBAL_TOLERANCE: f64 = 1e-6;

/// Per-joint Euler frames. Column `i` of a frame is the joint's X, Y or Z axis
/// expressed in the rest-pose (world-aligned) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EulerConvention {
    frames: Vec<Matrix3<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles {
    /// Intrinsic X, Y, Z angles (radians).
    pub angles: [f64; 3],
    pub gimbal_lock: bool,
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `Rx(a) · Ry(b) · Rz(c)`.
pub fn euler_to_matrix(angles: &[f64; 3]) -> Matrix3<f64> {
    rot_x(angles[0]) * rot_y(angles[1]) * rot_z(angles[2])
}

/// Intrinsic X-Y-Z decomposition with the middle angle in `[−π/2, π/2]`.
pub fn matrix_to_euler(r: &Matrix3<f64>) -> EulerAngles {
    let sb = r[(0, 2)].clamp(-1.0, 1.0);
    let b = sb.asin();
    let gimbal_lock = (b.abs() - std::f64::consts::FRAC_PI_2).abs() < GIMBAL_TOLERANCE;
    let cb2 = r[(1, 2)].powi(2) + r[(2, 2)].powi(2);
    let angles = if cb2 < 1e-24 {
        // only a ± c is defined; put it all on the first axis
        [r[(2, 1)].atan2(r[(1, 1)]), b, 0.0]
    } else {
        [(-r[(1, 2)]).atan2(r[(2, 2)]), b, (-r[(0, 1)]).atan2(r[(0, 0)])]
    };
    EulerAngles { angles, gimbal_lock }
}

/// Derivatives of the three angles with respect to the entries of `r`, as
/// `dangle_i = Σ grads[i][(r, c)] · dR[(r, c)]`.
fn euler_partials(r: &Matrix3<f64>) -> [Matrix3<f64>; 3] {
    let mut da = Matrix3::zeros();
    let mut db = Matrix3::zeros();
    let mut dc = Matrix3::zeros();
    let n_a = r[(1, 2)].powi(2) + r[(2, 2)].powi(2);
    if n_a > 1e-24 {
        da[(1, 2)] = -r[(2, 2)] / n_a;
        da[(2, 2)] = r[(1, 2)] / n_a;
    }
    let cb = (1.0 - r[(0, 2)].powi(2)).max(0.0).sqrt();
    if cb > 1e-12 {
        db[(0, 2)] = 1.0 / cb;
    }
    let n_c = r[(0, 0)].powi(2) + r[(0, 1)].powi(2);
    if n_c > 1e-24 {
        dc[(0, 1)] = -r[(0, 0)] / n_c;
        dc[(0, 0)] = r[(0, 1)] / n_c;
    }
    [da, db, dc]
}

impl EulerConvention {
    pub fn new(frames: Vec<Matrix3<f64>>) -> Result<Self, BodyError> {
        if frames.len() != NUM_JOINTS {
            return Err(BodyError::InvalidConvention(format!("{} frames, expected {NUM_JOINTS}", frames.len())));
        }
        for (j, f) in frames.iter().enumerate() {
            let ortho = (f.transpose() * f - Matrix3::identity()).abs().max();
            if ortho > 1e-9 || (f.determinant() - 1.0).abs() > 1e-9 {
                return Err(BodyError::InvalidConvention(format!("frame of joint {j} is not a right-handed orthonormal basis")));
            }
        }
        Ok(Self { frames })
    }

    /// Z along the child bone at rest; X is world x made perpendicular to Z
    /// (world y when the bone runs along x); Y completes the right-handed frame.
    pub fn from_rest_joints(rest: &[Vector3<f64>], parents: &[Option<usize>]) -> Self {
        let frames = (0..rest.len())
            .map(|j| {
                let child = (0..rest.len()).find(|&c| parents[c] == Some(j));
                let dir = match (child, parents[j]) {
                    (Some(c), _) => rest[c] - rest[j],
                    (None, Some(p)) => rest[j] - rest[p],
                    (None, None) => Vector3::y(),
                };
                let z = dir.normalize();
                let seed = if z.x.abs() > 0.9 { Vector3::y() } else { Vector3::x() };
                let x = (seed - z * z.dot(&seed)).normalize();
                let y = z.cross(&x);
                Matrix3::from_columns(&[x, y, z])
            })
            .collect();
        Self { frames }
    }

    pub fn frame(&self, joint: usize) -> &Matrix3<f64> {
        &self.frames[joint]
    }

    pub fn frames(&self) -> &[Matrix3<f64>] {
        &self.frames
    }

    /// Euler angles of a joint's axis-angle rotation expressed in its frame.
    pub fn axis_angle_to_euler(&self, joint: usize, aa: &Vector3<f64>) -> EulerAngles {
        let f = &self.frames[joint];
        matrix_to_euler(&(f.transpose() * axis_angle_to_matrix(aa) * f))
    }

    /// Rotation matrix (rest frame) of a joint's Euler angles.
    pub fn euler_to_rotation(&self, joint: usize, angles: &[f64; 3]) -> Matrix3<f64> {
        let f = &self.frames[joint];
        f * euler_to_matrix(angles) * f.transpose()
    }

    /// Euler angles and their 3×3 Jacobian `∂angle_i / ∂aa_k`.
    pub fn euler_with_jacobian(&self, joint: usize, aa: &Vector3<f64>) -> (EulerAngles, Matrix3<f64>) {
        let f = &self.frames[joint];
        let r = axis_angle_to_matrix(aa);
        let rl = f.transpose() * r * f;
        let euler = matrix_to_euler(&rl);
        let partials = euler_partials(&rl);
        let jl = so3_left_jacobian(aa);
        let mut jac = Matrix3::zeros();
        for k in 0..3 {
            let d_r = skew(&(jl * Vector3::ith(k, 1.0))) * r;
            let d_rl = f.transpose() * d_r * f;
            for i in 0..3 {
                jac[(i, k)] = partials[i].component_mul(&d_rl).sum();
            }
        }
        (euler, jac)
    }
}

/// Per-joint Euler-angle ranges `[lower, upper]` (radians), indexed by joint.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLimits {
    pub lower: Vec<[f64; 3]>,
    pub upper: Vec<[f64; 3]>,
}

impl JointLimits {
    pub fn new(lower: Vec<[f64; 3]>, upper: Vec<[f64; 3]>) -> Result<Self, BodyError> {
        if lower.len() != NUM_JOINTS || upper.len() != NUM_JOINTS {
            return Err(BodyError::InvalidLimits(format!("need {NUM_JOINTS} joints")));
        }
        for j in 0..NUM_JOINTS {
            for a in 0..3 {
                if !(lower[j][a] <= upper[j][a]) {
                    return Err(BodyError::InvalidLimits(format!("joint {} axis {a}: lower > upper", JOINT_NAMES[j])));
                }
            }
        }
        Ok(Self { lower, upper })
    }

    /// `±π` on every axis.
    pub fn permissive() -> Self {
        let pi = std::f64::consts::PI;
        Self { lower: vec![[-pi; 3]; NUM_JOINTS], upper: vec![[pi; 3]; NUM_JOINTS] }
    }

    /// Rough anatomical ranges for the procedural body in its default convention.
    /// Hinge joints (knees, elbows) bend one way about X.
    pub fn anatomical() -> Self {
        let mut lower = vec![[-0.8, -0.6, -0.6]; NUM_JOINTS];
        let mut upper = vec![[0.8, 0.6, 0.6]; NUM_JOINTS];
        let set = |lo: &mut Vec<[f64; 3]>, hi: &mut Vec<[f64; 3]>, j: usize, l: [f64; 3], u: [f64; 3]| {
            lo[j] = l;
            hi[j] = u;
        };
        for j in [1, 2] {
            set(&mut lower, &mut upper, j, [-1.6, -0.7, -0.6], [0.5, 0.7, 0.6]);
        }
        for j in [4, 5] {
            set(&mut lower, &mut upper, j, [0.0, -0.1, -0.2], [2.4, 0.1, 0.2]);
        }
        // forward flexion is −X on the left arm, +X on the right
        set(&mut lower, &mut upper, 18, [-2.4, -0.2, -1.0], [0.0, 0.2, 1.0]);
        set(&mut lower, &mut upper, 19, [0.0, -0.2, -1.0], [2.4, 0.2, 1.0]);
        for j in [16, 17] {
            set(&mut lower, &mut upper, j, [-1.3, -1.3, -1.0], [1.3, 1.3, 1.0]);
        }
        Self { lower, upper }
    }

    /// Keyed by joint name, three `[lower, upper]` pairs each. Joints not
    /// listed keep `±π`.
    pub fn from_named(named: &BTreeMap<String, [[f64; 2]; 3]>) -> Result<Self, BodyError> {
        let mut out = Self::permissive();
        for (name, ranges) in named {
            let j = JOINT_NAMES
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| BodyError::InvalidLimits(format!("unknown joint {name:?}")))?;
            for a in 0..3 {
                out.lower[j][a] = ranges[a][0];
                out.upper[j][a] = ranges[a][1];
            }
        }
        Self::new(out.lower, out.upper)
    }

    pub fn to_named(&self) -> BTreeMap<String, [[f64; 2]; 3]> {
        (0..NUM_JOINTS)
            .map(|j| {
                let r = [0, 1, 2].map(|a| [self.lower[j][a], self.upper[j][a]]);
                (JOINT_NAMES[j].to_string(), r)
            })
            .collect()
    }

    pub fn contains(&self, joint: usize, angles: &[f64; 3], slack: f64) -> bool {
        (0..3).all(|a| angles[a] >= self.lower[joint][a] - slack && angles[a] <= self.upper[joint][a] + slack)
    }
}

impl Serialize for JointLimits {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_named().serialize(s)
    }
}

impl<'de> Deserialize<'de> for JointLimits {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let named = BTreeMap::<String, [[f64; 2]; 3]>::deserialize(d)?;
        Self::from_named(&named).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::central_difference;
    use proptest::prelude::*;

    fn convention() -> EulerConvention {
        let model = crate::bodymodel::BodyModel::procedural();
        model.default_convention()
    }

    #[test]
    fn zero_rotation_gives_zero_angles() {
        let c = convention();
        for j in 0..NUM_JOINTS {
            let e = c.axis_angle_to_euler(j, &Vector3::zeros());
            assert!(e.angles.iter().all(|a| a.abs() < 1e-15));
            assert!(!e.gimbal_lock);
        }
    }

    #[test]
    fn single_axis_rotation() {
        let c = convention();
        for j in 0..NUM_JOINTS {
            let x_axis = c.frame(j).column(0).into_owned();
            let e = c.axis_angle_to_euler(j, &(x_axis * 0.3));
            assert!((e.angles[0] - 0.3).abs() < 1e-12 && e.angles[1].abs() < 1e-12 && e.angles[2].abs() < 1e-12, "{e:?}");
        }
    }

    #[test]
    fn frames_follow_child_bone() {
        let model = crate::bodymodel::BodyModel::procedural();
        let c = model.default_convention();
        let rest = model.rest_joints(&[0.0; 10]);
        // left elbow → left wrist
        let bone = (rest[20] - rest[18]).normalize();
        assert!((c.frame(18).column(2) - bone).norm() < 1e-12);
        assert!(EulerConvention::new(c.frames().to_vec()).is_ok());
    }

    #[test]
    fn gimbal_lock_is_flagged_and_still_round_trips() {
        let r = euler_to_matrix(&[0.4, std::f64::consts::FRAC_PI_2, -0.2]);
        let e = matrix_to_euler(&r);
        assert!(e.gimbal_lock);
        assert!((euler_to_matrix(&e.angles) - r).abs().max() < 1e-9);
    }

    #[test]
    fn limits_json_round_trip() {
        let l = JointLimits::anatomical();
        let s = serde_json::to_string(&l).unwrap();
        assert_eq!(serde_json::from_str::<JointLimits>(&s).unwrap(), l);
        assert!(serde_json::from_str::<JointLimits>(r#"{"nope": [[0,1],[0,1],[0,1]]}"#).is_err());
        assert!(serde_json::from_str::<JointLimits>(r#"{"head": [[1,0],[0,1],[0,1]]}"#).is_err());
    }

    proptest! {
        #[test]
        fn euler_round_trip(j in 0usize..24, x in -3.0..3.0f64, y in -3.0..3.0f64, z in -3.0..3.0f64) {
            let c = convention();
            let aa = Vector3::new(x, y, z);
            let e = c.axis_angle_to_euler(j, &aa);
            let back = c.euler_to_rotation(j, &e.angles);
            prop_assert!((back - axis_angle_to_matrix(&aa)).abs().max() < 1e-9);
        }

        #[test]
        fn euler_jacobian_matches_differences(j in 1usize..24, x in -1.2..1.2f64, y in -1.2..1.2f64, z in -1.2..1.2f64) {
            let c = convention();
            let aa = Vector3::new(x, y, z);
            let (e, jac) = c.euler_with_jacobian(j, &aa);
            prop_assume!(!e.gimbal_lock && e.angles[1].abs() < 1.4);
            for i in 0..3 {
                let g = central_difference(|v| c.axis_angle_to_euler(j, &Vector3::new(v[0], v[1], v[2])).angles[i], &[x, y, z], 1e-6);
                for k in 0..3 {
                    prop_assert!((g[k] - jac[(i, k)]).abs() < 1e-6 * (1.0 + g[k].abs()), "{} {} {} {}", i, k, g[k], jac[(i, k)]);
                }
            }
        }
    }
}
