//! Multi-view keypoint annotation: confidence filtering, iterative camera
//! selection around DLT triangulation, and temporal refinement of whole
//! sequences under smoothness and bone-length constraints.

mod annotate;
mod refine;

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camgeom::{CamGeomError, CameraId, Observation2D, Rig};

pub use annotate::{annotate_frame, annotate_sequence, consistent_views, filter_keypoints, select_cameras, FrameAnnotation, KeypointStatus};
pub use refine::{median_bone_lengths, refine_sequence, sequence_objective, EnergyBreakdown, RefineReport};

/// Keypoint count of the whole-body detector layout.
pub const DEFAULT_NUM_KEYPOINTS: usize = 133;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KpError {
    #[error("view {view} has {got} keypoints, expected {expected}")]
    KeypointCountMismatch { view: CameraId, got: usize, expected: usize },
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid annotation config: {0}")]
    InvalidConfig(String),
    #[error("bone {0} is never observed with both endpoints present")]
    BoneNeverObserved(usize),
    #[error("keypoint {0}: camera selection exhausted the reprojection threshold")]
    AnnotationFailed(usize),
    #[error("refinement diverged: {0}")]
    OptimizationDiverged(String),
    #[error("sequence has {got} frames, need at least {need}")]
    TooFewFrames { got: usize, need: usize },
    #[error("{got} 2D frames supplied for a {expected}-frame sequence")]
    FrameCountMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Geometry(#[from] CamGeomError),
}

/// Per-view 2D detections for one time instant; `None` marks an absent keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame2D {
    num_keypoints: usize,
    views: BTreeMap<CameraId, Vec<Option<Observation2D>>>,
}

impl KeypointFrame2D {
    pub fn new(num_keypoints: usize, views: BTreeMap<CameraId, Vec<Option<Observation2D>>>) -> Result<Self, KpError> {
        for (id, obs) in &views {
            if obs.len() != num_keypoints {
                return Err(KpError::KeypointCountMismatch { view: *id, got: obs.len(), expected: num_keypoints });
            }
            for o in obs.iter().flatten() {
                if !(0.0..=1.0).contains(&o.confidence) {
                    return Err(CamGeomError::InvalidConfidence(o.confidence).into());
                }
            }
        }
        Ok(Self { num_keypoints, views })
    }

    pub fn empty(num_keypoints: usize) -> Self {
        Self { num_keypoints, views: BTreeMap::new() }
    }

    pub fn num_keypoints(&self) -> usize {
        self.num_keypoints
    }

    pub fn views(&self) -> &BTreeMap<CameraId, Vec<Option<Observation2D>>> {
        &self.views
    }

    pub fn view(&self, id: CameraId) -> Option<&[Option<Observation2D>]> {
        self.views.get(&id).map(Vec::as_slice)
    }

    pub fn insert_view(&mut self, id: CameraId, obs: Vec<Option<Observation2D>>) -> Result<(), KpError> {
        if obs.len() != self.num_keypoints {
            return Err(KpError::KeypointCountMismatch { view: id, got: obs.len(), expected: self.num_keypoints });
        }
        self.views.insert(id, obs);
        Ok(())
    }

    /// Views holding a detection for keypoint `k`, in ascending id order.
    pub fn observations_of(&self, k: usize) -> impl Iterator<Item = (CameraId, &Observation2D)> + '_ {
        self.views.iter().filter_map(move |(id, obs)| obs[k].as_ref().map(|o| (*id, o)))
    }
}

/// Reprojected 2D keypoints per view.
pub type Projections2D = BTreeMap<CameraId, Vec<Option<Vector2<f64>>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSequence3D {
    pub frames: Vec<Vec<Option<Vector3<f64>>>>,
    pub frame_rate: f64,
}

impl KeypointSequence3D {
    pub fn new(frames: Vec<Vec<Option<Vector3<f64>>>>, frame_rate: f64) -> Result<Self, KpError> {
        if frames.is_empty() {
            return Err(KpError::TooFewFrames { got: 0, need: 1 });
        }
        let p = frames[0].len();
        for f in &frames {
            if f.len() != p {
                return Err(KpError::InvalidConfig(format!("ragged sequence: {} vs {} keypoints", f.len(), p)));
            }
            if f.iter().flatten().any(|x| !x.iter().all(|v| v.is_finite())) {
                return Err(CamGeomError::NonFinite.into());
            }
        }
        if !(frame_rate > 0.0) {
            return Err(KpError::InvalidConfig(format!("frame rate must be positive, got {frame_rate}")));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_keypoints(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// Projects every present keypoint into every camera of `rig`.
    pub fn reproject(&self, rig: &Rig) -> Vec<Projections2D> {
        self.frames
            .iter()
            .map(|frame| {
                rig.cameras()
                    .iter()
                    .map(|cam| (cam.id, frame.iter().map(|p| p.and_then(|p| cam.project(&p).ok())).collect()))
                    .collect()
            })
            .collect()
    }
}

/// Bones as `(parent, child)` keypoint index pairs forming a forest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkeletonTopology {
    bones: Vec<(usize, usize)>,
}

impl SkeletonTopology {
    pub fn new(bones: Vec<(usize, usize)>, num_keypoints: usize) -> Result<Self, KpError> {
        let mut root: Vec<usize> = (0..num_keypoints).collect();
        fn find(root: &mut [usize], mut i: usize) -> usize {
            while root[i] != i {
                root[i] = root[root[i]];
                i = root[i];
            }
            i
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(a, b) in &bones {
            if a >= num_keypoints || b >= num_keypoints {
                return Err(KpError::InvalidTopology(format!("bone ({a}, {b}) indexes past {num_keypoints} keypoints")));
            }
            if a == b {
                return Err(KpError::InvalidTopology(format!("self-loop at {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(KpError::InvalidTopology(format!("duplicate bone ({a}, {b})")));
            }
            let (ra, rb) = (find(&mut root, a), find(&mut root, b));
            if ra == rb {
                return Err(KpError::InvalidTopology(format!("bone ({a}, {b}) closes a cycle")));
            }
            root[ra] = rb;
        }
        Ok(Self { bones })
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    pub fn len(&self) -> usize {
        self.bones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bones.is_empty()
    }
}

/// Reference length (meters) per bone, aligned with [`SkeletonTopology::bones`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoneLengths(pub Vec<f64>);

/// How the bone-length term compares against the reference lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoneTerm {
    /// `Σ_t Σ_bones |B − len_t|`: every frame is pulled toward the reference.
    #[default]
    PerFrame,
    /// `Σ_bones |B − mean_t len_t|`: only the sequence-average length is constrained.
    SequenceMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationConfig {
    /// Detections below this confidence are discarded.
    pub tau_k: f64,
    /// Initial reprojection threshold for camera selection (pixels).
    pub tau_min: f64,
    /// Largest reprojection threshold tried before giving up (pixels).
    pub tau_max: f64,
    /// Threshold escalation step (pixels).
    pub delta_c: f64,
    /// How many best views to keep; `None` keeps all that pass the threshold.
    pub n_c: Option<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Speed floor (m/s) of the adaptive smoothness weight.
    pub speed_eps: f64,
    pub bone_term: BoneTerm,
    pub max_refine_iterations: usize,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            tau_k: 0.5,
            tau_min: 5.0,
            tau_max: 50.0,
            delta_c: 5.0,
            n_c: None,
            lambda1: 1.0,
            lambda2: 1.0,
            speed_eps: 0.05,
            bone_term: BoneTerm::default(),
            max_refine_iterations: 3000,
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<(), KpError> {
        let bad = |m: &str| Err(KpError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.tau_k) {
            return bad("tau_k must lie in [0, 1]");
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_max) {
            return bad("need 0 < tau_min <= tau_max");
        }
        if !(self.delta_c > 0.0) {
            return bad("delta_c must be positive");
        }
        if matches!(self.n_c, Some(n) if n < 2) {
            return bad("n_c must be at least 2");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda weights must be non-negative");
        }
        if !(self.speed_eps > 0.0) {
            return bad("speed_eps must be positive");
        }
        Ok(())
    }
}
