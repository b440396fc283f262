//! Articulated parametric body: shape blendshapes, forward kinematics, linear
//! blend skinning and a linear joint regressor.

mod euler;
mod procedural;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camgeom::{axis_angle_to_matrix, canonicalize_axis_angle, so3_left_jacobian};

pub use euler::{euler_to_matrix, matrix_to_euler, EulerAngles, EulerConvention, JointLimits, GIMBAL_TOLERANCE};

pub const NUM_JOINTS: usize = 24;
pub const NUM_BETAS: usize = 10;
pub const NUM_POSE: usize = 3 * NUM_JOINTS;
/// Flat parameter layout: translation (3), pose (72), shape (10).
pub const NUM_PARAMS: usize = 3 + NUM_POSE + NUM_BETAS;
pub const THETA_OFFSET: usize = 3;
pub const BETA_OFFSET: usize = 3 + NUM_POSE;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

pub const PARENTS: [i64; NUM_JOINTS] = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BodyError {
    #[error("invalid model asset: {0}")]
    InvalidAsset(String),
    #[error("invalid body parameters: {0}")]
    InvalidParams(String),
    #[error("invalid Euler convention: {0}")]
    InvalidConvention(String),
    #[error("invalid joint limits: {0}")]
    InvalidLimits(String),
}

/// On-disk model description; all arrays dense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAsset {
    pub joint_names: Vec<String>,
    pub template_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    /// Parent joint index, `-1` for the root.
    pub parents: Vec<i64>,
    /// `NUM_JOINTS × V`.
    pub joint_regressor: Vec<Vec<f64>>,
    /// `V × 3 × NUM_BETAS` (meters per unit coefficient).
    pub shape_blendshapes: Vec<[[f64; NUM_BETAS]; 3]>,
    /// `V × NUM_JOINTS`.
    pub skinning_weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    /// 24 axis-angle triplets (radians), root first.
    pub theta: Vec<f64>,
    pub beta: [f64; NUM_BETAS],
    pub translation: [f64; 3],
}

impl Default for BodyParams {
    fn default() -> Self {
        Self { theta: vec![0.0; NUM_POSE], beta: [0.0; NUM_BETAS], translation: [0.0; 3] }
    }
}

impl BodyParams {
    pub fn validate(&self) -> Result<(), BodyError> {
        if self.theta.len() != NUM_POSE {
            return Err(BodyError::InvalidParams(format!("theta has {} entries, expected {NUM_POSE}", self.theta.len())));
        }
        let finite = self.theta.iter().chain(&self.beta).chain(&self.translation).all(|v| v.is_finite());
        if !finite {
            return Err(BodyError::InvalidParams("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn joint_rotation(&self, j: usize) -> Vector3<f64> {
        Vector3::new(self.theta[3 * j], self.theta[3 * j + 1], self.theta[3 * j + 2])
    }

    pub fn set_joint_rotation(&mut self, j: usize, aa: &Vector3<f64>) {
        self.theta[3 * j..3 * j + 3].copy_from_slice(aa.as_slice());
    }

    /// Every joint rotation rewritten with angle below π.
    pub fn canonicalized(&self) -> Self {
        let mut out = self.clone();
        for j in 0..NUM_JOINTS {
            out.set_joint_rotation(j, &canonicalize_axis_angle(&self.joint_rotation(j)));
        }
        out
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(NUM_PARAMS);
        v.extend_from_slice(&self.translation);
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn from_vector(v: &[f64]) -> Self {
        assert_eq!(v.len(), NUM_PARAMS, "parameter vector has wrong length");
        let mut beta = [0.0; NUM_BETAS];
        beta.copy_from_slice(&v[BETA_OFFSET..]);
        Self { theta: v[THETA_OFFSET..BETA_OFFSET].to_vec(), beta, translation: [v[0], v[1], v[2]] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyOutput {
    pub vertices: Vec<Vector3<f64>>,
    pub joints: Vec<Vector3<f64>>,
}

/// Intermediate quantities of one forward pass, kept for gradients.
#[derive(Debug, Clone)]
pub struct PoseState {
    shaped: Vec<Vector3<f64>>,
    rest_joints: Vec<Vector3<f64>>,
    local_jacobians: Vec<Matrix3<f64>>,
    global_rotations: Vec<Matrix3<f64>>,
    /// Posed joint origins before translation.
    joint_origins: Vec<Vector3<f64>>,
    pub output: BodyOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    template: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    parents: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    regressor: Vec<Vec<(usize, f64)>>,
    shape_dirs: Vec<[Vector3<f64>; NUM_BETAS]>,
    skin: Vec<Vec<(usize, f64)>>,
    joint_shape_dirs: Vec<[Vector3<f64>; NUM_BETAS]>,
    joint_names: Vec<String>,
}

fn sparse(row: &[f64]) -> Vec<(usize, f64)> {
    row.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(i, w)| (i, *w)).collect()
}

impl BodyModel {
    pub fn from_asset(asset: &ModelAsset) -> Result<Self, BodyError> {
        let bad = |m: String| Err(BodyError::InvalidAsset(m));
        let v = asset.template_vertices.len();
        if v == 0 {
            return bad("no template vertices".into());
        }
        if asset.parents.len() != NUM_JOINTS || asset.joint_names.len() != NUM_JOINTS {
            return bad(format!("need {NUM_JOINTS} joints and names"));
        }
        let mut parents = Vec::with_capacity(NUM_JOINTS);
        for (j, &p) in asset.parents.iter().enumerate() {
            match (j, p) {
                (0, -1) => parents.push(None),
                (0, _) => return bad("joint 0 must be the root".into()),
                (_, p) if p >= 0 && (p as usize) < j => parents.push(Some(p as usize)),
                _ => return bad(format!("joint {j} has parent {p}; parents must precede children and only joint 0 is a root")),
            }
        }
        if asset.shape_blendshapes.len() != v || asset.skinning_weights.len() != v || asset.joint_regressor.len() != NUM_JOINTS {
            return bad("array sizes disagree with the vertex or joint count".into());
        }
        for (i, f) in asset.faces.iter().enumerate() {
            if f.iter().any(|&k| k >= v) {
                return bad(format!("face {i} indexes past {v} vertices"));
            }
        }
        let check_row = |row: &[f64], len: usize, what: &str| -> Result<(), BodyError> {
            if row.len() != len {
                return Err(BodyError::InvalidAsset(format!("{what} row has {} entries, expected {len}", row.len())));
            }
            if row.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(BodyError::InvalidAsset(format!("{what} has negative or non-finite weights")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(BodyError::InvalidAsset(format!("{what} row sums to {s}")));
            }
            Ok(())
        };
        for row in &asset.skinning_weights {
            check_row(row, NUM_JOINTS, "skinning weight")?;
        }
        for row in &asset.joint_regressor {
            check_row(row, v, "joint regressor")?;
        }
        let finite = asset.template_vertices.iter().flatten().chain(asset.shape_blendshapes.iter().flatten().flatten()).all(|x| x.is_finite());
        if !finite {
            return bad("non-finite vertex data".into());
        }

        let template: Vec<Vector3<f64>> = asset.template_vertices.iter().map(|p| Vector3::from(*p)).collect();
        let shape_dirs: Vec<[Vector3<f64>; NUM_BETAS]> = asset
            .shape_blendshapes
            .iter()
            .map(|s| std::array::from_fn(|b| Vector3::new(s[0][b], s[1][b], s[2][b])))
            .collect();
        let regressor: Vec<Vec<(usize, f64)>> = asset.joint_regressor.iter().map(|r| sparse(r)).collect();
        let joint_shape_dirs = regressor
            .iter()
            .map(|row| std::array::from_fn(|b| row.iter().map(|&(i, w)| shape_dirs[i][b] * w).sum()))
            .collect();
        let mut children = vec![Vec::new(); NUM_JOINTS];
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(j);
            }
        }
        Ok(Self {
            template,
            faces: asset.faces.clone(),
            parents,
            children,
            regressor,
            shape_dirs,
            skin: asset.skinning_weights.iter().map(|r| sparse(r)).collect(),
            joint_shape_dirs,
            joint_names: asset.joint_names.clone(),
        })
    }

    pub fn to_asset(&self) -> ModelAsset {
        let v = self.template.len();
        let dense = |row: &[(usize, f64)], n: usize| {
            let mut out = vec![0.0; n];
            for &(i, w) in row {
                out[i] = w;
            }
            out
        };
        ModelAsset {
            joint_names: self.joint_names.clone(),
            template_vertices: self.template.iter().map(|p| [p.x, p.y, p.z]).collect(),
            faces: self.faces.clone(),
            parents: self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            joint_regressor: self.regressor.iter().map(|r| dense(r, v)).collect(),
            shape_blendshapes: self.shape_dirs.iter().map(|s| std::array::from_fn(|c| std::array::from_fn(|b| s[b][c]))).collect(),
            skinning_weights: self.skin.iter().map(|r| dense(r, NUM_JOINTS)).collect(),
        }
    }

    /// The in-repo low-poly body (450 vertices, 24 joints).
    pub fn procedural() -> Self {
        Self::from_asset(&procedural::build()).expect("procedural asset is valid")
    }

    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn template(&self) -> &[Vector3<f64>] {
        &self.template
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn skinning_weights(&self, v: usize) -> &[(usize, f64)] {
        &self.skin[v]
    }

    /// Replaces the skinning weights (rows must be non-negative and sum to 1).
    pub fn with_skinning(&self, weights: Vec<Vec<f64>>) -> Result<Self, BodyError> {
        let mut asset = self.to_asset();
        asset.skinning_weights = weights;
        Self::from_asset(&asset)
    }

    fn shaped_vertices(&self, beta: &[f64; NUM_BETAS]) -> Vec<Vector3<f64>> {
        self.template
            .iter()
            .zip(&self.shape_dirs)
            .map(|(t, dirs)| t + dirs.iter().zip(beta).map(|(d, b)| d * *b).sum::<Vector3<f64>>())
            .collect()
    }

    fn regress(&self, verts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.regressor.iter().map(|row| row.iter().map(|&(i, w)| verts[i] * w).sum()).collect()
    }

    /// Regressed joints of the shaped template at rest.
    pub fn rest_joints(&self, beta: &[f64; NUM_BETAS]) -> Vec<Vector3<f64>> {
        self.regress(&self.shaped_vertices(beta))
    }

    /// Euler frames with Z along each joint's child bone in the rest pose.
    pub fn default_convention(&self) -> EulerConvention {
        EulerConvention::from_rest_joints(&self.rest_joints(&[0.0; NUM_BETAS]), &self.parents)
    }

    pub fn forward(&self, params: &BodyParams) -> BodyOutput {
        self.forward_state(params).output
    }

    pub fn forward_state(&self, params: &BodyParams) -> PoseState {
        let shaped = self.shaped_vertices(&params.beta);
        let rest_joints = self.regress(&shaped);
        let mut global_rotations = vec![Matrix3::identity(); NUM_JOINTS];
        let mut joint_origins = vec![Vector3::zeros(); NUM_JOINTS];
        let mut local_jacobians = vec![Matrix3::identity(); NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            let aa = params.joint_rotation(j);
            let r = axis_angle_to_matrix(&aa);
            local_jacobians[j] = so3_left_jacobian(&aa);
            match self.parents[j] {
                None => {
                    global_rotations[j] = r;
                    joint_origins[j] = rest_joints[j];
                }
                Some(p) => {
                    global_rotations[j] = global_rotations[p] * r;
                    joint_origins[j] = joint_origins[p] + global_rotations[p] * (rest_joints[j] - rest_joints[p]);
                }
            }
        }
        let t = Vector3::from(params.translation);
        let vertices: Vec<Vector3<f64>> = shaped
            .iter()
            .zip(&self.skin)
            .map(|(v, weights)| {
                weights.iter().map(|&(l, w)| (global_rotations[l] * (v - rest_joints[l]) + joint_origins[l]) * w).sum::<Vector3<f64>>() + t
            })
            .collect();
        let joints = self.regress(&vertices);
        PoseState { shaped, rest_joints, local_jacobians, global_rotations, joint_origins, output: BodyOutput { vertices, joints } }
    }

    /// Gradient of a scalar with respect to the flat parameter vector, given
    /// its gradients with respect to the posed vertices and regressed joints.
    pub fn backprop(&self, state: &PoseState, grad_vertices: Option<&[Vector3<f64>]>, grad_joints: Option<&[Vector3<f64>]>) -> Vec<f64> {
        let nv = self.num_vertices();
        let mut gv: Vec<Vector3<f64>> = grad_vertices.map_or_else(|| vec![Vector3::zeros(); nv], <[_]>::to_vec);
        if let Some(gj) = grad_joints {
            for (row, g) in self.regressor.iter().zip(gj) {
                for &(i, w) in row {
                    gv[i] += g * w;
                }
            }
        }
        let mut out = vec![0.0; NUM_PARAMS];
        let gt: Vector3<f64> = gv.iter().sum();
        out[..3].copy_from_slice(gt.as_slice());

        let rg = &state.global_rotations;
        let origin = &state.joint_origins;
        // per-joint moment Σ w A_l(v) × G_v and force Σ w G_v; shape pull Σ w R_lᵀ G_v per vertex
        let mut moment = vec![Vector3::zeros(); NUM_JOINTS];
        let mut force = vec![Vector3::zeros(); NUM_JOINTS];
        let mut dbeta = [0.0; NUM_BETAS];
        for (v, weights) in self.skin.iter().enumerate() {
            let g = gv[v];
            let mut h = Vector3::zeros();
            for &(l, w) in weights {
                let a = rg[l] * (state.shaped[v] - state.rest_joints[l]) + origin[l];
                moment[l] += a.cross(&g) * w;
                force[l] += g * w;
                h += rg[l].transpose() * g * w;
            }
            for (b, d) in dbeta.iter_mut().enumerate() {
                *d += h.dot(&self.shape_dirs[v][b]);
            }
        }

        // shape terms acting through the rest joints
        let js = &self.joint_shape_dirs;
        let mut d_origin = vec![[Vector3::zeros(); NUM_BETAS]; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            d_origin[j] = match self.parents[j] {
                None => js[j],
                Some(p) => std::array::from_fn(|b| d_origin[p][b] + rg[p] * (js[j][b] - js[p][b])),
            };
            let pulled = rg[j].transpose() * force[j];
            for b in 0..NUM_BETAS {
                dbeta[b] += force[j].dot(&d_origin[j][b]) - pulled.dot(&js[j][b]);
            }
        }
        out[BETA_OFFSET..].copy_from_slice(&dbeta);

        // subtree sums, children after parents
        let mut moment_sub = moment;
        let mut force_sub = force;
        for j in (1..NUM_JOINTS).rev() {
            let p = self.parents[j].unwrap();
            let (m, f) = (moment_sub[j], force_sub[j]);
            moment_sub[p] += m;
            force_sub[p] += f;
        }
        for j in 0..NUM_JOINTS {
            let torque = moment_sub[j] - origin[j].cross(&force_sub[j]);
            let parent_rot = self.parents[j].map_or_else(Matrix3::identity, |p| rg[p]);
            let g = state.local_jacobians[j].transpose() * parent_rot.transpose() * torque;
            out[THETA_OFFSET + 3 * j..THETA_OFFSET + 3 * j + 3].copy_from_slice(g.as_slice());
        }
        out
    }
}
