//! Synthetic capture scenes with exact ground truth.
//!
//! A ring of cameras looks at an articulated keypoint skeleton that follows a
//! keyframed motion script; detections are exact projections perturbed by a
//! configurable noise model. Everything is driven by a single seed.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camgeom::{axis_angle_to_matrix, CamGeomError, Camera, CameraId, Intrinsics, Observation2D, RigidTransform, Rig};
use crate::kpanno::{KeypointFrame2D, KeypointSequence3D, KpError, SkeletonTopology};

/// Identifier recorded in manifests for the generator behind every seeded stream.
pub const PRNG_ALGORITHM: &str = "chacha20 (rand_chacha 0.9, seed_from_u64)";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error(transparent)]
    Geometry(#[from] CamGeomError),
    #[error(transparent)]
    Keypoints(#[from] KpError),
}

/// Rest pose and bone forest of the synthetic subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub names: Vec<String>,
    /// Rest positions in meters; y up, subject faces +z.
    pub rest: Vec<[f64; 3]>,
    /// `(parent, child)` pairs.
    pub bones: Vec<(usize, usize)>,
}

impl SkeletonSpec {
    /// The 17-keypoint body layout (nose, eyes, ears, shoulders, elbows,
    /// wrists, hips, knees, ankles), rooted at the left hip.
    pub fn body17() -> Self {
        let names = [
            "nose", "left_eye", "right_eye", "left_ear", "right_ear", "left_shoulder", "right_shoulder",
            "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hip", "right_hip", "left_knee",
            "right_knee", "left_ankle", "right_ankle",
        ];
        let rest = vec![
            [0.0, 0.68, 0.10],
            [0.035, 0.71, 0.08],
            [-0.035, 0.71, 0.08],
            [0.075, 0.69, 0.0],
            [-0.075, 0.69, 0.0],
            [0.18, 0.50, 0.0],
            [-0.18, 0.50, 0.0],
            [0.20, 0.22, 0.02],
            [-0.20, 0.22, 0.02],
            [0.22, -0.02, 0.06],
            [-0.22, -0.02, 0.06],
            [0.10, 0.0, 0.0],
            [-0.10, 0.0, 0.0],
            [0.10, -0.42, 0.02],
            [-0.10, -0.42, 0.02],
            [0.10, -0.84, 0.0],
            [-0.10, -0.84, 0.0],
        ];
        let bones = vec![
            (11, 12),
            (11, 13),
            (13, 15),
            (12, 14),
            (14, 16),
            (11, 5),
            (5, 6),
            (5, 7),
            (7, 9),
            (6, 8),
            (8, 10),
            (5, 0),
            (0, 1),
            (0, 2),
            (1, 3),
            (2, 4),
        ];
        Self { names: names.iter().map(|s| s.to_string()).collect(), rest, bones }
    }

    pub fn num_keypoints(&self) -> usize {
        self.rest.len()
    }

    pub fn topology(&self) -> Result<SkeletonTopology, KpError> {
        SkeletonTopology::new(self.bones.clone(), self.num_keypoints())
    }

    fn parents(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.num_keypoints()];
        for &(p, c) in &self.bones {
            parent[c] = Some(p);
        }
        parent
    }

    /// Keypoints ordered so that parents precede children.
    fn topological_order(&self) -> Vec<usize> {
        let parent = self.parents();
        let mut order: Vec<usize> = (0..self.num_keypoints()).filter(|&k| parent[k].is_none()).collect();
        let mut i = 0;
        while i < order.len() {
            let p = order[i];
            order.extend(self.bones.iter().filter(|b| b.0 == p).map(|b| b.1));
            i += 1;
        }
        order
    }

    /// Forward kinematics: each keypoint's rotation turns the bones leaving it.
    pub fn pose(&self, translation: &Vector3<f64>, rotations: &BTreeMap<usize, Vector3<f64>>) -> Vec<Vector3<f64>> {
        let parent = self.parents();
        let rest: Vec<Vector3<f64>> = self.rest.iter().map(|r| Vector3::from(*r)).collect();
        let mut global = vec![Matrix3::identity(); rest.len()];
        let mut pos = vec![Vector3::zeros(); rest.len()];
        for k in self.topological_order() {
            let local = rotations.get(&k).map_or_else(Matrix3::identity, axis_angle_to_matrix);
            match parent[k] {
                None => {
                    pos[k] = rest[k] + translation;
                    global[k] = local;
                }
                Some(p) => {
                    pos[k] = pos[p] + global[p] * (rest[k] - rest[p]);
                    global[k] = global[p] * local;
                }
            }
        }
        pos
    }
}

impl Default for SkeletonSpec {
    fn default() -> Self {
        Self::body17()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub time: f64,
    pub translation: [f64; 3],
    /// Axis-angle rotation per keypoint index; missing entries are identity.
    #[serde(default)]
    pub rotations: BTreeMap<usize, [f64; 3]>,
}

/// Piecewise-linear keyframed motion (translation and per-keypoint axis-angle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionScript {
    pub keyframes: Vec<Keyframe>,
}

impl MotionScript {
    pub fn still() -> Self {
        Self { keyframes: vec![Keyframe { time: 0.0, translation: [0.0; 3], rotations: BTreeMap::new() }] }
    }

    /// Arm raises, a knee bend and a short sidestep over ~3.3 s.
    pub fn wave_and_step() -> Self {
        let kf = |time: f64, tx: f64, rots: &[(usize, [f64; 3])]| Keyframe {
            time,
            translation: [tx, 0.0, 0.0],
            rotations: rots.iter().copied().collect(),
        };
        Self {
            keyframes: vec![
                kf(0.0, 0.0, &[]),
                kf(1.0, 0.05, &[(5, [0.0, 0.0, 0.15]), (7, [0.0, 0.0, 1.2]), (9, [0.3, 0.0, 0.0]), (14, [0.6, 0.0, 0.0])]),
                kf(2.0, 0.15, &[(6, [0.0, 0.0, -1.0]), (8, [0.8, 0.0, 0.0]), (13, [0.5, 0.0, 0.0]), (11, [0.0, 0.3, 0.0])]),
                kf(3.4, 0.10, &[(7, [0.0, 0.0, 0.4]), (8, [0.0, 0.0, -0.4]), (11, [0.0, -0.2, 0.0])]),
            ],
        }
    }

    pub fn sample(&self, time: f64) -> (Vector3<f64>, BTreeMap<usize, Vector3<f64>>) {
        let kfs = &self.keyframes;
        if kfs.is_empty() {
            return (Vector3::zeros(), BTreeMap::new());
        }
        let convert = |k: &Keyframe| -> (Vector3<f64>, BTreeMap<usize, Vector3<f64>>) {
            (Vector3::from(k.translation), k.rotations.iter().map(|(i, r)| (*i, Vector3::from(*r))).collect())
        };
        if time <= kfs[0].time {
            return convert(&kfs[0]);
        }
        let Some(i) = kfs.windows(2).position(|w| time >= w[0].time && time <= w[1].time) else {
            return convert(kfs.last().unwrap());
        };
        let (a, b) = (&kfs[i], &kfs[i + 1]);
        let span = b.time - a.time;
        let s = if span > 0.0 { (time - a.time) / span } else { 1.0 };
        let ta = Vector3::from(a.translation);
        let tb = Vector3::from(b.translation);
        let mut rots = BTreeMap::new();
        for &k in a.rotations.keys().chain(b.rotations.keys()) {
            let ra = a.rotations.get(&k).map_or_else(Vector3::zeros, |r| Vector3::from(*r));
            let rb = b.rotations.get(&k).map_or_else(Vector3::zeros, |r| Vector3::from(*r));
            rots.insert(k, ra * (1.0 - s) + rb * s);
        }
        (ta * (1.0 - s) + tb * s, rots)
    }
}

impl Default for MotionScript {
    fn default() -> Self {
        Self::wave_and_step()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Isotropic Gaussian detection noise (pixels).
    pub pixel_sigma: f64,
    /// Chance that a whole view is displaced in a frame.
    pub outlier_view_prob: f64,
    /// Displacement magnitude of an outlier view (pixels), random direction.
    pub outlier_px: f64,
    /// Gaussian depth noise (meters) for rendered depth maps.
    pub depth_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { pixel_sigma: 2.0, outlier_view_prob: 0.0, outlier_px: 50.0, depth_sigma: 0.0 }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self { pixel_sigma: 0.0, outlier_view_prob: 0.0, outlier_px: 0.0, depth_sigma: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub num_cameras: usize,
    /// Ring radius (meters).
    pub radius: f64,
    /// Height of the camera ring above the look-at target (meters).
    pub camera_height: f64,
    pub focal_px: f64,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub duration_s: f64,
    pub skeleton: SkeletonSpec,
    pub motion: MotionScript,
    pub noise: NoiseModel,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_cameras: 10,
            radius: 2.0,
            camera_height: 0.5,
            focal_px: 1000.0,
            width: 1920,
            height: 1080,
            fps: 30.0,
            duration_s: 100.0 / 30.0,
            skeleton: SkeletonSpec::default(),
            motion: MotionScript::default(),
            noise: NoiseModel::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidScene(m.to_string()));
        if self.num_cameras < 2 {
            return bad("need at least 2 cameras");
        }
        if !(self.radius > 0.0) {
            return bad("radius must be positive");
        }
        if !(self.fps > 0.0) || !(self.duration_s >= 0.0) {
            return bad("fps must be positive and duration non-negative");
        }
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.outlier_view_prob) {
            return bad("outlier probability must lie in [0, 1]");
        }
        if !(n.pixel_sigma >= 0.0 && n.depth_sigma >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if self.skeleton.rest.is_empty() {
            return bad("skeleton has no keypoints");
        }
        self.skeleton.topology()?;
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }
}

/// World→camera transform of a camera at `eye` looking at `target` with world +y up.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> RigidTransform {
    let z = (target - eye).normalize();
    let up = Vector3::y();
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    RigidTransform::new(r, -(r * eye)).expect("look-at basis is orthonormal")
}

/// Cameras evenly spaced on a horizontal ring, all aimed at the origin.
/// Camera `i` sits at azimuth `2π i / n`, position `(r cos a, h, r sin a)`.
pub fn synth_rig(spec: &SceneSpec) -> Result<Rig, SynthError> {
    spec.validate()?;
    let k = Intrinsics::new(
        spec.focal_px,
        spec.focal_px,
        spec.width as f64 / 2.0,
        spec.height as f64 / 2.0,
        spec.width,
        spec.height,
    )?;
    let cams = (0..spec.num_cameras)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / spec.num_cameras as f64;
            let eye = Vector3::new(spec.radius * a.cos(), spec.camera_height, spec.radius * a.sin());
            Camera::new(CameraId(i as u32), k, look_at(&eye, &Vector3::zeros()))
        })
        .collect();
    Ok(Rig::new(cams)?)
}

/// Ground-truth keypoint trajectories of the scene's motion script.
pub fn ground_truth(spec: &SceneSpec) -> Result<KeypointSequence3D, SynthError> {
    spec.validate()?;
    let frames = (0..spec.num_frames().max(1))
        .map(|t| {
            let (tr, rots) = spec.motion.sample(t as f64 / spec.fps);
            spec.skeleton.pose(&tr, &rots).into_iter().map(Some).collect()
        })
        .collect();
    Ok(KeypointSequence3D::new(frames, spec.fps)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub ground_truth: KeypointSequence3D,
    pub frames2d: Vec<KeypointFrame2D>,
    /// `(frame, camera)` pairs whose detections were displaced as outliers.
    pub outlier_views: Vec<(usize, CameraId)>,
}

/// Projects every frame of `truth` into `rig` with the given noise.
///
/// Keypoints behind a camera or outside its image are absent in that view.
pub fn observe(truth: &KeypointSequence3D, rig: &Rig, noise: &NoiseModel, seed: u64) -> SyntheticSequence {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let mut frames2d = Vec::with_capacity(truth.len());
    let mut outlier_views = Vec::new();
    for (t, frame) in truth.frames.iter().enumerate() {
        let mut views = BTreeMap::new();
        for cam in rig.cameras() {
            let outlier = noise.outlier_view_prob > 0.0 && rng.random::<f64>() < noise.outlier_view_prob;
            let shift = if outlier {
                outlier_views.push((t, cam.id));
                let a = rng.random::<f64>() * std::f64::consts::TAU;
                Vector2::new(a.cos(), a.sin()) * noise.outlier_px
            } else {
                Vector2::zeros()
            };
            let obs = frame
                .iter()
                .map(|p| {
                    let jitter = Vector2::new(gauss.sample(&mut rng), gauss.sample(&mut rng)) * noise.pixel_sigma;
                    let px = cam.project(&(*p)?).ok()? + jitter + shift;
                    let k = &cam.intrinsics;
                    let inside = px.x >= 0.0 && px.y >= 0.0 && px.x < k.width as f64 && px.y < k.height as f64;
                    inside.then(|| Observation2D { u: px.x, v: px.y, confidence: 1.0 })
                })
                .collect();
            views.insert(cam.id, obs);
        }
        frames2d.push(KeypointFrame2D::new(truth.num_keypoints(), views).expect("synthetic frames are well formed"));
    }
    SyntheticSequence { ground_truth: truth.clone(), frames2d, outlier_views }
}

/// Ground truth plus noisy multi-view detections for `spec`.
pub fn synth_sequence(spec: &SceneSpec, rig: &Rig, seed: u64) -> Result<SyntheticSequence, SynthError> {
    let truth = ground_truth(spec)?;
    Ok(observe(&truth, rig, &spec.noise, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_spacing_is_even() {
        let rig = synth_rig(&SceneSpec::default()).unwrap();
        let c: Vec<Vector3<f64>> = rig.cameras().iter().map(|c| c.center()).collect();
        for i in 0..10 {
            let a = Vector3::new(c[i].x, 0.0, c[i].z);
            let b = Vector3::new(c[(i + 1) % 10].x, 0.0, c[(i + 1) % 10].z);
            let ang = (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos();
            assert!((ang - 36f64.to_radians()).abs() < 1e-12);
        }
    }

    #[test]
    fn ring_positions_match_trig() {
        let spec = SceneSpec::default();
        let rig = synth_rig(&spec).unwrap();
        for (i, cam) in rig.cameras().iter().enumerate() {
            let a = 2.0 * std::f64::consts::PI * (i as f64) / 10.0;
            let expected = Vector3::new(2.0 * a.cos(), 0.5, 2.0 * a.sin());
            assert!((cam.center() - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn origin_hits_principal_point() {
        let rig = synth_rig(&SceneSpec::default()).unwrap();
        for cam in rig.cameras() {
            let px = cam.project(&Vector3::zeros()).unwrap();
            assert!((px - Vector2::new(960.0, 540.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn fk_preserves_bone_lengths() {
        let sk = SkeletonSpec::body17();
        let rest = sk.pose(&Vector3::zeros(), &BTreeMap::new());
        let mut rots = BTreeMap::new();
        rots.insert(5, Vector3::new(0.3, -0.2, 0.9));
        rots.insert(11, Vector3::new(0.0, 1.0, 0.1));
        let posed = sk.pose(&Vector3::new(1.0, 0.0, 0.0), &rots);
        for &(a, b) in &sk.bones {
            assert!(((rest[a] - rest[b]).norm() - (posed[a] - posed[b]).norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_sequence_is_reproducible() {
        let spec = SceneSpec { duration_s: 0.5, ..Default::default() };
        let rig = synth_rig(&spec).unwrap();
        let a = synth_sequence(&spec, &rig, 7).unwrap();
        let b = synth_sequence(&spec, &rig, 7).unwrap();
        assert_eq!(a, b);
        let c = synth_sequence(&spec, &rig, 8).unwrap();
        assert_ne!(a.frames2d, c.frames2d);
    }

    #[test]
    fn noiseless_detections_are_exact_projections() {
        let spec = SceneSpec { duration_s: 0.2, noise: NoiseModel::noiseless(), ..Default::default() };
        let rig = synth_rig(&spec).unwrap();
        let s = synth_sequence(&spec, &rig, 1).unwrap();
        for (t, f) in s.frames2d.iter().enumerate() {
            for cam in rig.cameras() {
                for (k, o) in f.view(cam.id).unwrap().iter().enumerate() {
                    let px = cam.project(&s.ground_truth.frames[t][k].unwrap()).unwrap();
                    assert_eq!(o.unwrap().pixel(), px);
                }
            }
        }
    }

    #[test]
    fn pixel_noise_has_requested_sigma() {
        // 10⁵ residual samples: 100 frames × 10 views × 17 keypoints × 2 axes ≈ 34 000,
        // so run three seeds.
        let spec = SceneSpec::default();
        let rig = synth_rig(&spec).unwrap();
        let mut sum2 = 0.0;
        let mut n = 0usize;
        for seed in 0..3 {
            let s = synth_sequence(&spec, &rig, seed).unwrap();
            for (t, f) in s.frames2d.iter().enumerate() {
                for cam in rig.cameras() {
                    for (k, o) in f.view(cam.id).unwrap().iter().enumerate() {
                        let px = cam.project(&s.ground_truth.frames[t][k].unwrap()).unwrap();
                        let d = o.unwrap().pixel() - px;
                        sum2 += d.x * d.x + d.y * d.y;
                        n += 2;
                    }
                }
            }
        }
        assert!(n >= 100_000);
        let sigma = (sum2 / n as f64).sqrt();
        assert!((sigma - 2.0).abs() < 0.1, "sigma {sigma}");
    }
}
