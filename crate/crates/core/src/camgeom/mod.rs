//! Pinhole cameras, rigid transforms and linear triangulation.
//!
//! Images are assumed rectified (no lens distortion). Pixel coordinates place
//! the center of pixel `(col, row)` at `(col, row)`.

mod transform;
mod triangulate;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use transform::{
    axis_angle_to_matrix, canonicalize_axis_angle, matrix_to_axis_angle, skew, so3_left_jacobian,
    RigidTransform,
};
pub use triangulate::triangulate_dlt;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CamGeomError {
    #[error("point lies behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("triangulation needs at least 2 views, got {0}")]
    InsufficientViews(usize),
    #[error("degenerate triangulation geometry")]
    DegenerateGeometry,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal (|RᵀR − I| = {orthogonality:e}, det = {determinant})")]
    InvalidRotation { orthogonality: f64, determinant: f64 },
    #[error("non-finite value")]
    NonFinite,
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("duplicate camera id {0}")]
    DuplicateCameraId(CameraId),
    #[error("unknown camera id {0}")]
    UnknownCamera(CameraId),
}

/// Device identifier, unique within a rig.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CameraId(pub u32);

impl fmt::Display for CameraId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for CameraId {
    type Err = std::num::ParseIntError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim().parse().map(CameraId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, CamGeomError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), CamGeomError> {
        let bad = |msg: String| Err(CamGeomError::InvalidIntrinsics(msg));
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return bad(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad(format!("cx={} outside [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad(format!("cy={} outside [0, {})", self.cy, self.height));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Intrinsics for the same optics sampled at `1/factor` the resolution.
    pub fn downscaled(&self, factor: u32) -> Intrinsics {
        let f = factor as f64;
        Intrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            // pixel-center convention: centers map as (c + 0.5) / f - 0.5
            cx: (self.cx + 0.5) / f - 0.5,
            cy: (self.cy + 0.5) / f - 0.5,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: CameraId,
    pub intrinsics: Intrinsics,
    /// World → camera.
    pub extrinsics: RigidTransform,
}

impl Camera {
    pub fn new(id: CameraId, intrinsics: Intrinsics, extrinsics: RigidTransform) -> Self {
        Self { id, intrinsics, extrinsics }
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.extrinsics.inverse().translation().to_owned()
    }

    pub fn to_camera_frame(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.extrinsics.apply(world)
    }

    /// `K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(self.extrinsics.rotation());
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(self.extrinsics.translation());
        self.intrinsics.matrix() * rt
    }

    pub fn project(&self, point: &Vector3<f64>) -> Result<Vector2<f64>, CamGeomError> {
        if !point.iter().all(|v| v.is_finite()) {
            return Err(CamGeomError::NonFinite);
        }
        let pc = self.to_camera_frame(point);
        project_camera_frame(&self.intrinsics, &pc)
    }

    /// Lifts pixel `(u, v)` at camera-frame depth `depth` to world coordinates.
    pub fn lift(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let pc = Vector3::new((pixel.x - k.cx) / k.fx * depth, (pixel.y - k.cy) / k.fy * depth, depth);
        self.extrinsics.inverse().apply(&pc)
    }

    /// Same pose, depth-sensor style downsampled intrinsics.
    pub fn downscaled(&self, factor: u32) -> Camera {
        Camera { intrinsics: self.intrinsics.downscaled(factor), ..self.clone() }
    }
}

pub(crate) fn project_camera_frame(k: &Intrinsics, pc: &Vector3<f64>) -> Result<Vector2<f64>, CamGeomError> {
    if !(pc.z > 0.0) {
        return Err(CamGeomError::BehindCamera { depth: pc.z });
    }
    Ok(Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
}

/// Euclidean pixel distance between the projection of `point` and `obs`.
pub fn reprojection_error(camera: &Camera, point: &Vector3<f64>, obs: &Vector2<f64>) -> Result<f64, CamGeomError> {
    Ok((camera.project(point)? - obs).norm())
}

/// A detected 2D keypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation2D {
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

impl Observation2D {
    pub fn new(u: f64, v: f64, confidence: f64) -> Result<Self, CamGeomError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(CamGeomError::InvalidConfidence(confidence));
        }
        if !u.is_finite() || !v.is_finite() {
            return Err(CamGeomError::NonFinite);
        }
        Ok(Self { u, v, confidence })
    }

    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

/// A set of cameras with unique ids, kept in ascending id order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rig {
    cameras: Vec<Camera>,
}

impl Rig {
    pub fn new(mut cameras: Vec<Camera>) -> Result<Self, CamGeomError> {
        cameras.sort_by_key(|c| c.id);
        let mut seen = BTreeSet::new();
        for c in &cameras {
            if !seen.insert(c.id) {
                return Err(CamGeomError::DuplicateCameraId(c.id));
            }
            c.intrinsics.validate()?;
        }
        Ok(Self { cameras })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn get(&self, id: CameraId) -> Option<&Camera> {
        self.cameras.binary_search_by_key(&id, |c| c.id).ok().map(|i| &self.cameras[i])
    }

    pub fn camera(&self, id: CameraId) -> Result<&Camera, CamGeomError> {
        self.get(id).ok_or(CamGeomError::UnknownCamera(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = CameraId> + '_ {
        self.cameras.iter().map(|c| c.id)
    }

    pub fn with_extrinsics(&self, id: CameraId, extrinsics: RigidTransform) -> Result<Rig, CamGeomError> {
        let mut out = self.clone();
        let i = out.cameras.binary_search_by_key(&id, |c| c.id).map_err(|_| CamGeomError::UnknownCamera(id))?;
        out.cameras[i].extrinsics = extrinsics;
        Ok(out)
    }
}
