use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use rayon::prelude::*;

use super::{AnnotationConfig, KeypointFrame2D, KpError, Projections2D};
use crate::camgeom::{reprojection_error, triangulate_dlt, CameraId, Rig};

/// Fewest views a keypoint may be triangulated from during camera selection.
pub(crate) const MIN_SELECTED_VIEWS: usize = 3;

/// Drops detections whose confidence is below `tau_k`.
pub fn filter_keypoints(frame: &KeypointFrame2D, tau_k: f64) -> KeypointFrame2D {
    let views = frame
        .views()
        .iter()
        .map(|(id, obs)| (*id, obs.iter().map(|o| o.filter(|o| o.confidence >= tau_k)).collect()))
        .collect();
    KeypointFrame2D::new(frame.num_keypoints(), views).expect("filtering preserves frame invariants")
}

/// Keeps the `n_c` views with the smallest error that are also within `tau_c`.
///
/// Ties are broken by ascending camera id; non-finite errors never qualify.
pub fn select_cameras(errors: &BTreeMap<CameraId, f64>, tau_c: f64, n_c: usize) -> BTreeSet<CameraId> {
    let mut ranked: Vec<(f64, CameraId)> = errors.iter().filter(|(_, e)| e.is_finite()).map(|(id, e)| (*e, *id)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(n_c).filter(|(e, _)| *e <= tau_c).map(|(_, id)| id).collect()
}

/// Escalates the reprojection threshold from step `start_step` until at least
/// three views pass. Returns the selection and the threshold step it used.
pub fn consistent_views(
    errors: &BTreeMap<CameraId, f64>,
    config: &AnnotationConfig,
    start_step: usize,
) -> Option<(BTreeSet<CameraId>, usize)> {
    let n_c = config.n_c.unwrap_or(errors.len());
    let mut step = start_step;
    loop {
        let tau_c = config.tau_min + step as f64 * config.delta_c;
        if tau_c > config.tau_max {
            return None;
        }
        let sel = select_cameras(errors, tau_c, n_c);
        if sel.len() >= MIN_SELECTED_VIEWS {
            return Some((sel, step));
        }
        step += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeypointStatus {
    Triangulated,
    /// Fewer than three views survived confidence filtering.
    InsufficientViews,
    /// Camera selection could not settle on a consistent set below `tau_max`.
    AnnotationFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnnotation {
    pub points: Vec<Option<Vector3<f64>>>,
    /// The triangulated points projected into every rig camera.
    pub reprojected: Projections2D,
    /// Views used for the final triangulation of each keypoint.
    pub selected: Vec<BTreeSet<CameraId>>,
    pub status: Vec<KeypointStatus>,
}

fn view_errors(frame: &KeypointFrame2D, rig: &Rig, k: usize, point: &Vector3<f64>) -> Result<BTreeMap<CameraId, f64>, KpError> {
    frame
        .observations_of(k)
        .map(|(id, o)| {
            let cam = rig.camera(id)?;
            Ok((id, reprojection_error(cam, point, &o.pixel()).unwrap_or(f64::INFINITY)))
        })
        .collect()
}

fn triangulate_subset(frame: &KeypointFrame2D, rig: &Rig, k: usize, views: &BTreeSet<CameraId>) -> Result<Option<Vector3<f64>>, KpError> {
    let mut obs = Vec::with_capacity(views.len());
    for (id, o) in frame.observations_of(k) {
        if views.contains(&id) {
            obs.push((rig.camera(id)?, o.pixel()));
        }
    }
    Ok(triangulate_dlt(&obs).ok())
}

fn annotate_keypoint(
    filtered: &KeypointFrame2D,
    rig: &Rig,
    config: &AnnotationConfig,
    k: usize,
) -> Result<(Option<Vector3<f64>>, BTreeSet<CameraId>, KeypointStatus), KpError> {
    let mut cams: BTreeSet<CameraId> = filtered.observations_of(k).map(|(id, _)| id).collect();
    if cams.len() < MIN_SELECTED_VIEWS {
        return Ok((None, BTreeSet::new(), KeypointStatus::InsufficientViews));
    }
    let failed = Ok((None, BTreeSet::new(), KeypointStatus::AnnotationFailed));
    let mut step = 0;
    // Each pass either terminates or changes the selection; bound the passes so
    // that an oscillating selection counts as a failure.
    for _ in 0..=2 * cams.len() {
        let Some(point) = triangulate_subset(filtered, rig, k, &cams)? else {
            return failed;
        };
        let errors = view_errors(filtered, rig, k, &point)?;
        let Some((selected, used_step)) = consistent_views(&errors, config, step) else {
            return failed;
        };
        step = used_step;
        if selected == cams {
            return Ok((Some(point), selected, KeypointStatus::Triangulated));
        }
        cams = selected;
    }
    failed
}

/// Triangulates every keypoint of one frame with iterative camera selection.
///
/// Per keypoint: filter by confidence, triangulate from the surviving views,
/// reproject, and select the views within the current threshold (escalated
/// from `tau_min` by `delta_c` until at least three agree). The keypoint is
/// re-triangulated from the selection until the selection stops changing.
/// Keypoints that never settle are marked absent.
pub fn annotate_frame(frame: &KeypointFrame2D, rig: &Rig, config: &AnnotationConfig) -> Result<FrameAnnotation, KpError> {
    config.validate()?;
    if rig.len() < 2 {
        return Err(KpError::InvalidConfig(format!("rig has {} cameras, need at least 2", rig.len())));
    }
    for id in frame.views().keys() {
        rig.camera(*id)?;
    }
    let filtered = filter_keypoints(frame, config.tau_k);
    let p = frame.num_keypoints();
    let mut points = Vec::with_capacity(p);
    let mut selected = Vec::with_capacity(p);
    let mut status = Vec::with_capacity(p);
    for k in 0..p {
        let (pt, sel, st) = annotate_keypoint(&filtered, rig, config, k)?;
        points.push(pt);
        selected.push(sel);
        status.push(st);
    }
    let reprojected = rig
        .cameras()
        .iter()
        .map(|cam| (cam.id, points.iter().map(|pt| pt.and_then(|pt| cam.project(&pt).ok())).collect()))
        .collect();
    Ok(FrameAnnotation { points, reprojected, selected, status })
}

/// Runs [`annotate_frame`] over all frames in parallel; output order follows input order.
pub fn annotate_sequence(frames: &[KeypointFrame2D], rig: &Rig, config: &AnnotationConfig) -> Result<Vec<FrameAnnotation>, KpError> {
    frames.par_iter().map(|f| annotate_frame(f, rig, config)).collect()
}
