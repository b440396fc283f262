use nalgebra::Vector3;

use super::annotate::{consistent_views, filter_keypoints};
use super::{AnnotationConfig, BoneLengths, BoneTerm, KeypointFrame2D, KeypointSequence3D, KpError, SkeletonTopology};
use crate::camgeom::{reprojection_error, Rig};
use crate::optim::{minimize, MinimizeConfig, Objective};

/// Smoothing radius (meters) of the Euclidean norms in the refinement energy.
/// Keeps the energy differentiable where consecutive keypoints coincide.
const NORM_EPS: f64 = 1e-4;

/// Half-width (frames) of the window used to estimate keypoint speed.
const SPEED_HALF_WINDOW: usize = 2;

#[inline]
fn soft_norm(n2: f64) -> f64 {
    (n2 + NORM_EPS * NORM_EPS).sqrt() - NORM_EPS
}

/// Median bone length over all frames where both endpoints are present.
/// Even counts take the lower median.
pub fn median_bone_lengths(seq: &KeypointSequence3D, topo: &SkeletonTopology) -> Result<BoneLengths, KpError> {
    let mut out = Vec::with_capacity(topo.len());
    for (b, &(i, j)) in topo.bones().iter().enumerate() {
        let mut lens: Vec<f64> = seq
            .frames
            .iter()
            .filter_map(|f| match (f.get(i).copied().flatten(), f.get(j).copied().flatten()) {
                (Some(a), Some(c)) => Some((a - c).norm()),
                _ => None,
            })
            .collect();
        if lens.is_empty() {
            return Err(KpError::BoneNeverObserved(b));
        }
        lens.sort_by(f64::total_cmp);
        out.push(lens[(lens.len() - 1) / 2]);
    }
    Ok(BoneLengths(out))
}

struct DataTerm {
    block: usize,
    rotation: nalgebra::Matrix3<f64>,
    translation: Vector3<f64>,
    /// Observed normalized image coordinates.
    target: (f64, f64),
    /// Camera-frame depth at the initial estimate; converts the normalized
    /// residual into meters.
    scale: f64,
}

struct SequenceEnergy {
    num_blocks: usize,
    data: Vec<DataTerm>,
    /// `(block a, block b, weight)` for consecutive frames of one keypoint.
    smooth: Vec<(usize, usize, f64)>,
    /// Per bone: endpoint blocks in every frame where both are present.
    bones: Vec<(f64, Vec<(usize, usize)>)>,
    bone_term: BoneTerm,
    lambda2: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EnergyBreakdown {
    pub data: f64,
    pub smoothness: f64,
    pub bone: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.data + self.smoothness + self.bone
    }
}

impl SequenceEnergy {
    fn point(x: &[f64], b: usize) -> Vector3<f64> {
        Vector3::new(x[3 * b], x[3 * b + 1], x[3 * b + 2])
    }

    fn add(g: &mut [f64], b: usize, v: &Vector3<f64>) {
        g[3 * b] += v.x;
        g[3 * b + 1] += v.y;
        g[3 * b + 2] += v.z;
    }

    fn evaluate(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> EnergyBreakdown {
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut e = EnergyBreakdown::default();

        for d in &self.data {
            let p = Self::point(x, d.block);
            let pc = d.rotation * p + d.translation;
            let (xn, yn) = (pc.x / pc.z, pc.y / pc.z);
            let (rx, ry) = (d.scale * (xn - d.target.0), d.scale * (yn - d.target.1));
            e.data += rx * rx + ry * ry;
            if let Some(g) = grad.as_deref_mut() {
                let r0 = d.rotation.row(0).transpose();
                let r1 = d.rotation.row(1).transpose();
                let r2 = d.rotation.row(2).transpose();
                let dxn = (r0 - r2 * xn) / pc.z;
                let dyn_ = (r1 - r2 * yn) / pc.z;
                Self::add(g, d.block, &(2.0 * d.scale * (rx * dxn + ry * dyn_)));
            }
        }

        for &(a, b, w) in &self.smooth {
            let diff = Self::point(x, b) - Self::point(x, a);
            let n2 = diff.norm_squared();
            e.smoothness += w * soft_norm(n2);
            if let Some(g) = grad.as_deref_mut() {
                let dir = diff * (w / (n2 + NORM_EPS * NORM_EPS).sqrt());
                Self::add(g, b, &dir);
                Self::add(g, a, &-dir);
            }
        }

        if self.lambda2 > 0.0 {
            for (reference, pairs) in &self.bones {
                match self.bone_term {
                    BoneTerm::PerFrame => {
                        for &(a, b) in pairs {
                            let diff = Self::point(x, b) - Self::point(x, a);
                            let len = diff.norm();
                            let r = reference - len;
                            e.bone += self.lambda2 * soft_norm(r * r);
                            if let Some(g) = grad.as_deref_mut() {
                                if len > 0.0 {
                                    let dr = r / (r * r + NORM_EPS * NORM_EPS).sqrt();
                                    let dl = diff / len;
                                    Self::add(g, b, &(-self.lambda2 * dr * dl));
                                    Self::add(g, a, &(self.lambda2 * dr * dl));
                                }
                            }
                        }
                    }
                    BoneTerm::SequenceMean => {
                        if pairs.is_empty() {
                            continue;
                        }
                        let n = pairs.len() as f64;
                        let mean: f64 = pairs.iter().map(|&(a, b)| (Self::point(x, b) - Self::point(x, a)).norm()).sum::<f64>() / n;
                        let r = reference - mean;
                        e.bone += self.lambda2 * soft_norm(r * r);
                        if let Some(g) = grad.as_deref_mut() {
                            let dr = r / (r * r + NORM_EPS * NORM_EPS).sqrt();
                            for &(a, b) in pairs {
                                let diff = Self::point(x, b) - Self::point(x, a);
                                let len = diff.norm();
                                if len > 0.0 {
                                    let dl = diff / (len * n);
                                    Self::add(g, b, &(-self.lambda2 * dr * dl));
                                    Self::add(g, a, &(self.lambda2 * dr * dl));
                                }
                            }
                        }
                    }
                }
            }
        }
        e
    }
}

impl Objective for SequenceEnergy {
    fn dim(&self) -> usize {
        3 * self.num_blocks
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.evaluate(x, None).total()
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluate(x, Some(grad)).total()
    }
}

/// Mean speed (m/s) of keypoint `k` over a centered window around frame `t`,
/// measured as net displacement between the outermost present frames.
fn window_speed(seq: &KeypointSequence3D, k: usize, t: usize) -> f64 {
    let lo = t.saturating_sub(SPEED_HALF_WINDOW);
    let hi = (t + SPEED_HALF_WINDOW).min(seq.len() - 1);
    let present: Vec<usize> = (lo..=hi).filter(|&s| seq.frames[s][k].is_some()).collect();
    match (present.first(), present.last()) {
        (Some(&a), Some(&b)) if b > a => {
            let d = (seq.frames[b][k].unwrap() - seq.frames[a][k].unwrap()).norm();
            d * seq.frame_rate / (b - a) as f64
        }
        _ => 0.0,
    }
}

struct Layout {
    index: Vec<Vec<Option<usize>>>,
    x0: Vec<f64>,
}

fn layout(seq: &KeypointSequence3D) -> Layout {
    let mut index = Vec::with_capacity(seq.len());
    let mut x0 = Vec::new();
    for frame in &seq.frames {
        let row = frame
            .iter()
            .map(|p| {
                p.map(|p| {
                    x0.extend_from_slice(&[p.x, p.y, p.z]);
                    x0.len() / 3 - 1
                })
            })
            .collect();
        index.push(row);
    }
    Layout { index, x0 }
}

fn build_energy(
    seq: &KeypointSequence3D,
    topo: &SkeletonTopology,
    bones: &BoneLengths,
    frames2d: &[KeypointFrame2D],
    rig: &Rig,
    config: &AnnotationConfig,
    lay: &Layout,
) -> Result<SequenceEnergy, KpError> {
    let p = seq.num_keypoints();
    let mut data = Vec::new();
    for (t, frame) in frames2d.iter().enumerate() {
        let filtered = filter_keypoints(frame, config.tau_k);
        for k in 0..p.min(frame.num_keypoints()) {
            let (Some(block), Some(point)) = (lay.index[t][k], seq.frames[t][k]) else {
                continue;
            };
            let mut errors = std::collections::BTreeMap::new();
            for (id, o) in filtered.observations_of(k) {
                let cam = rig.camera(id)?;
                errors.insert(id, reprojection_error(cam, &point, &o.pixel()).unwrap_or(f64::INFINITY));
            }
            let Some((views, _)) = consistent_views(&errors, config, 0) else {
                continue;
            };
            for (id, o) in filtered.observations_of(k) {
                if !views.contains(&id) {
                    continue;
                }
                let cam = rig.camera(id)?;
                let kk = &cam.intrinsics;
                let depth = cam.to_camera_frame(&point).z;
                data.push(DataTerm {
                    block,
                    rotation: *cam.extrinsics.rotation(),
                    translation: *cam.extrinsics.translation(),
                    target: ((o.u - kk.cx) / kk.fx, (o.v - kk.cy) / kk.fy),
                    scale: depth,
                });
            }
        }
    }

    let mut smooth = Vec::new();
    if config.lambda1 > 0.0 {
        for k in 0..p {
            let weights: Vec<f64> = (0..seq.len())
                .map(|t| config.speed_eps / window_speed(seq, k, t).max(config.speed_eps))
                .collect();
            for t in 0..seq.len() - 1 {
                if let (Some(a), Some(b)) = (lay.index[t][k], lay.index[t + 1][k]) {
                    smooth.push((a, b, config.lambda1 * 0.5 * (weights[t] + weights[t + 1])));
                }
            }
        }
    }

    let bone_pairs = topo
        .bones()
        .iter()
        .zip(&bones.0)
        .map(|(&(i, j), &len)| {
            let pairs = lay.index.iter().filter_map(|row| Some((row.get(i).copied()??, row.get(j).copied()??))).collect();
            (len, pairs)
        })
        .collect();

    Ok(SequenceEnergy {
        num_blocks: lay.x0.len() / 3,
        data,
        smooth,
        bones: bone_pairs,
        bone_term: config.bone_term,
        lambda2: config.lambda2,
    })
}

fn check_inputs(
    seq: &KeypointSequence3D,
    topo: &SkeletonTopology,
    bones: &BoneLengths,
    frames2d: &[KeypointFrame2D],
    config: &AnnotationConfig,
) -> Result<(), KpError> {
    config.validate()?;
    if seq.len() < 2 {
        return Err(KpError::TooFewFrames { got: seq.len(), need: 2 });
    }
    if frames2d.len() != seq.len() {
        return Err(KpError::FrameCountMismatch { got: frames2d.len(), expected: seq.len() });
    }
    if bones.0.len() != topo.len() {
        return Err(KpError::InvalidTopology(format!("{} bone lengths for {} bones", bones.0.len(), topo.len())));
    }
    if let Some(&(i, j)) = topo.bones().iter().find(|&&(i, j)| i.max(j) >= seq.num_keypoints()) {
        return Err(KpError::InvalidTopology(format!("bone ({i}, {j}) outside {} keypoints", seq.num_keypoints())));
    }
    Ok(())
}

/// Energy terms of `seq` with the adaptive weights derived from `seq` itself.
pub fn sequence_objective(
    seq: &KeypointSequence3D,
    topo: &SkeletonTopology,
    bones: &BoneLengths,
    frames2d: &[KeypointFrame2D],
    rig: &Rig,
    config: &AnnotationConfig,
) -> Result<EnergyBreakdown, KpError> {
    check_inputs(seq, topo, bones, frames2d, config)?;
    let lay = layout(seq);
    let energy = build_energy(seq, topo, bones, frames2d, rig, config, &lay)?;
    Ok(energy.evaluate(&lay.x0, None))
}

#[derive(Debug, Clone)]
pub struct RefineReport {
    pub sequence: KeypointSequence3D,
    pub initial: EnergyBreakdown,
    pub fin: EnergyBreakdown,
    pub iterations: usize,
    pub converged: bool,
}

/// Jointly refines a triangulated sequence under the reprojection data term,
/// the speed-adaptive smoothness term and the bone-length term.
///
/// The smoothness weight of keypoint `k` between frames `t` and `t+1` is
/// `λ1 · speed_eps / max(v̄, speed_eps)`, with `v̄` the keypoint's mean speed
/// over a centered five-frame window of the input. Data residuals are
/// reprojection errors over the consistently selected views, expressed in
/// meters at the initial depth. Absent keypoints stay absent.
pub fn refine_sequence(
    seq: &KeypointSequence3D,
    topo: &SkeletonTopology,
    bones: &BoneLengths,
    frames2d: &[KeypointFrame2D],
    rig: &Rig,
    config: &AnnotationConfig,
) -> Result<RefineReport, KpError> {
    check_inputs(seq, topo, bones, frames2d, config)?;
    let lay = layout(seq);
    let energy = build_energy(seq, topo, bones, frames2d, rig, config, &lay)?;
    let initial = energy.evaluate(&lay.x0, None);

    let cfg = MinimizeConfig {
        max_iterations: config.max_refine_iterations,
        relative_tolerance: 1e-12,
        absolute_tolerance: 0.0,
        gradient_tolerance: 1e-10,
        memory: 12,
        initial_step: 1e-3,
        ..Default::default()
    };
    let report = minimize(&energy, &lay.x0, &cfg).map_err(|e| KpError::OptimizationDiverged(e.to_string()))?;
    let fin = energy.evaluate(&report.x, None);
    if !fin.total().is_finite() || fin.total() > initial.total() * (1.0 + 1e-12) + 1e-15 {
        return Err(KpError::OptimizationDiverged(format!("objective rose from {} to {}", initial.total(), fin.total())));
    }

    let frames = lay
        .index
        .iter()
        .map(|row| row.iter().map(|b| b.map(|b| SequenceEnergy::point(&report.x, b))).collect())
        .collect();
    Ok(RefineReport {
        sequence: KeypointSequence3D { frames, frame_rate: seq.frame_rate },
        initial,
        fin,
        iterations: report.iterations,
        converged: report.converged(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_from_lengths(lens: &[f64]) -> KeypointSequence3D {
        let frames = lens.iter().map(|&l| vec![Some(Vector3::zeros()), Some(Vector3::new(l, 0.0, 0.0))]).collect();
        KeypointSequence3D::new(frames, 30.0).unwrap()
    }

    #[test]
    fn median_is_robust_to_outlier_frame() {
        let topo = SkeletonTopology::new(vec![(0, 1)], 2).unwrap();
        assert_eq!(median_bone_lengths(&seq_from_lengths(&[1.0, 1.0, 5.0]), &topo).unwrap().0, vec![1.0]);
        // even count takes the lower median
        assert_eq!(median_bone_lengths(&seq_from_lengths(&[4.0, 1.0, 3.0, 2.0]), &topo).unwrap().0, vec![2.0]);
    }

    #[test]
    fn median_of_unobserved_bone_fails() {
        let topo = SkeletonTopology::new(vec![(0, 1)], 2).unwrap();
        let seq = KeypointSequence3D::new(vec![vec![Some(Vector3::zeros()), None]], 30.0).unwrap();
        assert_eq!(median_bone_lengths(&seq, &topo), Err(KpError::BoneNeverObserved(0)));
    }

    #[test]
    fn window_speed_of_linear_motion() {
        let frames = (0..10).map(|t| vec![Some(Vector3::new(t as f64 / 30.0, 0.0, 0.0))]).collect();
        let seq = KeypointSequence3D::new(frames, 30.0).unwrap();
        for t in 0..10 {
            assert!((window_speed(&seq, 0, t) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn refinement_needs_two_frames() {
        let topo = SkeletonTopology::new(vec![(0, 1)], 2).unwrap();
        let seq = seq_from_lengths(&[1.0]);
        let bones = BoneLengths(vec![1.0]);
        let err = refine_sequence(&seq, &topo, &bones, &[KeypointFrame2D::empty(2)], &Rig::default(), &AnnotationConfig::default());
        assert!(matches!(err, Err(KpError::TooFewFrames { .. })));
    }
}
