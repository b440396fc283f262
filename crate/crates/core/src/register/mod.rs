//! Body-model registration. Stage I fits pose, shape and translation to a
//! static scan plus 3D keypoints; stage II fits per-frame pose and translation
//! to keypoint sequences with the shape frozen.

mod energy;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bodymodel::{BodyError, BodyModel, BodyParams, EulerConvention, JointLimits, BETA_OFFSET, NUM_BETAS, NUM_JOINTS, NUM_PARAMS, THETA_OFFSET};
use crate::optim::{minimize, Masked, MinimizeConfig, Objective, OptimError};
use crate::spatial::KdTree;

pub use energy::{
    angle_prior, angle_prior_with_gradient, chamfer_energy, chamfer_with_gradient, keypoint_energy, nearest_neighbors, unidirectional_chamfer,
    EnergyTerms, FitObjective, BRUTE_FORCE_PAIRS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegisterError {
    #[error("vertex set is empty")]
    EmptyVertexSet,
    #[error("no keypoint targets present")]
    NoTargets,
    #[error("invalid registration input: {0}")]
    InvalidInput(String),
    #[error("optimization diverged: {0}")]
    OptimizationDiverged(String),
    #[error(transparent)]
    Body(#[from] BodyError),
}

impl From<OptimError> for RegisterError {
    fn from(e: OptimError) -> Self {
        RegisterError::OptimizationDiverged(e.to_string())
    }
}

/// Euler frames plus the limit table they are read against.
#[derive(Debug, Clone, PartialEq)]
pub struct AnglePrior {
    pub convention: EulerConvention,
    pub limits: JointLimits,
}

impl AnglePrior {
    pub fn new(convention: EulerConvention, limits: JointLimits) -> Self {
        Self { convention, limits }
    }

    /// The model's default frames with `±π` limits.
    pub fn permissive(model: &BodyModel) -> Self {
        Self::new(model.default_convention(), JointLimits::permissive())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Analytic,
    /// Central differences of the objective; slow reference path.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Frame t starts from frame t−1's solution.
    #[default]
    Previous,
    /// Every frame starts from the rest pose.
    Rest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub w_keypoint: f64,
    pub w_surface: f64,
    pub w_prior: f64,
    /// Iteration cap of each block solve.
    pub max_iterations: usize,
    /// Relative objective decrease below which a solve stops.
    pub tolerance: f64,
    /// Objective values at or below this count as an exact fit.
    pub absolute_tolerance: f64,
    /// Passes over the parameter blocks.
    pub max_cycles: usize,
    pub init: InitPolicy,
    pub gradient: GradientMode,
    /// Charbonnier widths (meters) of the warm-up solves that precede the
    /// solve on the exact energy; empty skips the warm-up.
    pub continuation: Vec<f64>,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            w_keypoint: 1.0,
            w_surface: 1.0,
            w_prior: 0.1,
            max_iterations: 500,
            tolerance: 1e-8,
            absolute_tolerance: 1e-12,
            max_cycles: 4,
            init: InitPolicy::default(),
            gradient: GradientMode::default(),
            continuation: vec![1e-2, 1e-3, 1e-4],
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegisterError> {
        let w = [self.w_keypoint, self.w_surface, self.w_prior];
        if w.iter().any(|w| !(*w >= 0.0)) {
            return Err(RegisterError::InvalidInput("energy weights must be non-negative".into()));
        }
        if self.max_iterations == 0 || self.max_cycles == 0 {
            return Err(RegisterError::InvalidInput("iteration caps must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) || !(self.absolute_tolerance >= 0.0) {
            return Err(RegisterError::InvalidInput("tolerance must be positive".into()));
        }
        if self.continuation.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(RegisterError::InvalidInput("continuation widths must be positive".into()));
        }
        Ok(())
    }

    fn minimize_config(&self) -> MinimizeConfig {
        MinimizeConfig {
            max_iterations: self.max_iterations,
            relative_tolerance: self.tolerance,
            absolute_tolerance: self.absolute_tolerance,
            gradient_tolerance: 1e-14,
            memory: 20,
            initial_step: 1e-3,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeFit {
    pub params: BodyParams,
    pub energy: EnergyTerms,
    pub initial_objective: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub frames: Vec<BodyParams>,
    pub energies: Vec<EnergyTerms>,
    pub converged: Vec<bool>,
}

/// Model joint `j` takes keypoint `map[j]`; `None` leaves the joint unconstrained.
pub fn map_keypoints(frame: &[Option<Vector3<f64>>], map: &[Option<usize>]) -> Result<Vec<Option<Vector3<f64>>>, RegisterError> {
    if map.len() != NUM_JOINTS {
        return Err(RegisterError::InvalidInput(format!("joint map has {} entries, expected {NUM_JOINTS}", map.len())));
    }
    map.iter()
        .map(|m| match m {
            None => Ok(None),
            Some(k) => frame.get(*k).copied().ok_or_else(|| RegisterError::InvalidInput(format!("keypoint index {k} out of range"))),
        })
        .collect()
}

/// Translation that moves the rest pelvis onto the target pelvis (or the
/// rest joint centroid onto the target centroid when the pelvis is missing).
fn initial_translation(model: &BodyModel, beta: &[f64; NUM_BETAS], targets: &[Option<Vector3<f64>>]) -> [f64; 3] {
    let rest = model.rest_joints(beta);
    let t = match targets[0] {
        Some(p) => p - rest[0],
        None => {
            let pairs: Vec<_> = targets.iter().zip(&rest).filter_map(|(t, r)| t.map(|t| t - r)).collect();
            pairs.iter().sum::<Vector3<f64>>() / pairs.len().max(1) as f64
        }
    };
    [t.x, t.y, t.z]
}

/// Runs block-coordinate passes over `blocks` until a full pass stops improving.
fn block_descent(obj: &FitObjective, x0: Vec<f64>, blocks: &[Vec<usize>], config: &RegistrationConfig) -> Result<(Vec<f64>, f64, usize, bool), RegisterError> {
    let mcfg = config.minimize_config();
    let mut x = x0;
    let mut f = obj.value(&x);
    if !f.is_finite() {
        return Err(RegisterError::OptimizationDiverged("objective is not finite at the initial point".into()));
    }
    let mut iterations = 0;
    let mut converged = f <= config.absolute_tolerance;
    for _ in 0..config.max_cycles {
        if converged {
            break;
        }
        let start = f;
        let mut all_converged = true;
        for block in blocks {
            let masked = Masked::new(obj, &x, block.clone());
            let report = minimize(&masked, &masked.restrict(&x), &mcfg)?;
            if report.value > f {
                return Err(RegisterError::OptimizationDiverged(format!("block objective rose from {f} to {}", report.value)));
            }
            iterations += report.iterations;
            all_converged &= report.converged();
            x = masked.expand(&report.x);
            f = report.value;
            if f <= config.absolute_tolerance {
                break;
            }
        }
        converged = f <= config.absolute_tolerance || (all_converged && start - f <= config.tolerance * start.abs());
    }
    Ok((x, f, iterations, converged))
}

/// Block descent on each Charbonnier-smoothed surrogate in turn, then on the
/// exact energy. The reported objective is the exact one.
fn continuation_descent(obj: &mut FitObjective, x0: Vec<f64>, blocks: &[Vec<usize>], config: &RegistrationConfig) -> Result<(Vec<f64>, f64, usize, bool), RegisterError> {
    obj.smoothing = 0.0;
    if obj.value(&x0) <= config.absolute_tolerance {
        return block_descent(obj, x0, blocks, config);
    }
    let mut x = x0;
    let mut iterations = 0;
    for &eps in &config.continuation {
        obj.smoothing = eps;
        let (xs, _, it, _) = block_descent(obj, x, blocks, config)?;
        x = xs;
        iterations += it;
    }
    obj.smoothing = 0.0;
    let polish = RegistrationConfig { max_cycles: 1, ..config.clone() };
    let (x, f, it, converged) = block_descent(obj, x, blocks, &polish)?;
    Ok((x, f, iterations + it, converged))
}

const TWIST_ROUNDS: usize = 4;
const TWIST_CANDIDATES: usize = 6;
const TWIST_STEP_DEG: f64 = 15.0;

/// Pose parameters of `joint` and every joint below it.
fn subtree_block(model: &BodyModel, joint: usize) -> Vec<usize> {
    let parents = model.parents();
    let below = |mut j: usize| loop {
        if j == joint {
            return true;
        }
        match parents[j] {
            Some(p) => j = p,
            None => return false,
        }
    };
    (0..NUM_JOINTS).filter(|&j| below(j)).flat_map(|j| THETA_OFFSET + 3 * j..THETA_OFFSET + 3 * j + 3).collect()
}

/// Every single-child joint turned about its bone on a fixed angle grid, with
/// and without the child undoing the turn, ranked by objective.
fn twist_candidates(obj: &FitObjective, model: &BodyModel, x: &[f64]) -> Vec<(f64, usize, Vec<f64>)> {
    use crate::camgeom::{axis_angle_to_matrix, matrix_to_axis_angle};
    use nalgebra::{Rotation3, Unit};
    let params = BodyParams::from_vector(x);
    let rest = model.rest_joints(&params.beta);
    let parents = model.parents();
    let steps = (360.0 / TWIST_STEP_DEG) as usize;
    let mut out = Vec::new();
    for j in 1..NUM_JOINTS {
        let mut children = (0..NUM_JOINTS).filter(|&c| parents[c] == Some(j));
        let (Some(c), None) = (children.next(), children.next()) else { continue };
        let Some(axis) = Unit::try_new(rest[c] - rest[j], 1e-9) else { continue };
        let (rj, rc) = (axis_angle_to_matrix(&params.joint_rotation(j)), axis_angle_to_matrix(&params.joint_rotation(c)));
        for k in 1..steps {
            let twist = Rotation3::from_axis_angle(&axis, (k as f64 * TWIST_STEP_DEG).to_radians()).into_inner();
            for undo in [true, false] {
                let mut p = params.clone();
                p.set_joint_rotation(j, &matrix_to_axis_angle(&(rj * twist)));
                if undo {
                    p.set_joint_rotation(c, &matrix_to_axis_angle(&(twist.transpose() * rc)));
                }
                let v = p.to_vector();
                let f = obj.value(&v);
                if f.is_finite() {
                    out.push((f, j, v));
                }
            }
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn check_targets(targets: &[Option<Vector3<f64>>]) -> Result<(), RegisterError> {
    if targets.len() != NUM_JOINTS {
        return Err(RegisterError::InvalidInput(format!("{} targets, expected {NUM_JOINTS}", targets.len())));
    }
    if targets.iter().flatten().next().is_none() {
        return Err(RegisterError::NoTargets);
    }
    if targets.iter().flatten().any(|t| !t.iter().all(|v| v.is_finite())) {
        return Err(RegisterError::InvalidInput("non-finite target".into()));
    }
    Ok(())
}

/// Stage I: fits `(θ, β, t)` to a static scan and its 3D keypoints.
///
/// Blocks are solved in the order translation, root orientation, full pose,
/// shape, then everything jointly, repeated until a pass stops improving.
pub fn register_shape(
    scan: &[Vector3<f64>],
    keypoints: &[Option<Vector3<f64>>],
    model: &BodyModel,
    prior: &AnglePrior,
    config: &RegistrationConfig,
) -> Result<ShapeFit, RegisterError> {
    config.validate()?;
    if scan.is_empty() {
        return Err(RegisterError::EmptyVertexSet);
    }
    if scan.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(RegisterError::InvalidInput("non-finite scan vertex".into()));
    }
    check_targets(keypoints)?;
    let tree = KdTree::new(scan);
    let mut obj = FitObjective {
        model,
        prior,
        targets: Some(keypoints),
        scan: Some((scan, &tree)),
        weights: [config.w_keypoint, config.w_surface, config.w_prior],
        mode: config.gradient,
        smoothing: 0.0,
    };
    let mut init = BodyParams::default();
    init.translation = initial_translation(model, &init.beta, keypoints);
    let x0 = init.to_vector();
    let initial_objective = obj.value(&x0);

    let t: Vec<usize> = (0..3).collect();
    let root: Vec<usize> = (0..THETA_OFFSET + 3).collect();
    let pose: Vec<usize> = (0..BETA_OFFSET).collect();
    let shape: Vec<usize> = (BETA_OFFSET..NUM_PARAMS).collect();
    let all: Vec<usize> = (0..NUM_PARAMS).collect();
    let blocks = [t, root, pose, shape, all];
    let (mut x, mut objective, mut iterations, mut converged) = continuation_descent(&mut obj, x0, &blocks, config)?;
    // A limb turned about its own bone keeps every joint in place, so only the
    // surface term sees it and that term has minima a large twist away.
    for _ in 0..TWIST_ROUNDS {
        if objective <= config.absolute_tolerance {
            break;
        }
        let mut best: Option<(Vec<f64>, f64, usize)> = None;
        for (_, joint, candidate) in twist_candidates(&obj, model, &x).into_iter().take(TWIST_CANDIDATES) {
            let (xt, ft, it, _) = block_descent(&obj, candidate, &[subtree_block(model, joint)], config)?;
            iterations += it;
            if ft < best.as_ref().map_or(objective, |b| b.1) {
                best = Some((xt, ft, joint));
            }
        }
        let Some((xt, _, _)) = best else { break };
        let (xt, ft, it, conv) = block_descent(&obj, xt, &blocks, config)?;
        iterations += it;
        if ft >= objective {
            break;
        }
        (x, objective, converged) = (xt, ft, conv);
    }
    let params = BodyParams::from_vector(&x).canonicalized();
    let energy = obj.terms(&params)?;
    Ok(ShapeFit { params, energy, initial_objective, objective, iterations, converged })
}

/// Stage II: per-frame `(θ, t)` with `β` frozen. Frames run in order; each
/// starts from the previous solution (or the rest pose, per the config).
/// A frame without targets repeats the previous parameters and is flagged
/// unconverged.
pub fn register_pose(
    targets: &[Vec<Option<Vector3<f64>>>],
    beta: &[f64; NUM_BETAS],
    model: &BodyModel,
    prior: &AnglePrior,
    config: &RegistrationConfig,
) -> Result<RegistrationResult, RegisterError> {
    config.validate()?;
    if targets.is_empty() {
        return Err(RegisterError::InvalidInput("empty sequence".into()));
    }
    let t_block: Vec<usize> = (0..3).collect();
    let root_block: Vec<usize> = (0..THETA_OFFSET + 3).collect();
    let pose_block: Vec<usize> = (0..BETA_OFFSET).collect();
    let blocks = [t_block, root_block, pose_block];

    let rest = BodyParams { beta: *beta, ..Default::default() };
    let mut prev: Option<BodyParams> = None;
    let mut result = RegistrationResult { frames: Vec::new(), energies: Vec::new(), converged: Vec::new() };
    for frame in targets {
        let have_targets = match check_targets(frame) {
            Ok(()) => true,
            Err(RegisterError::NoTargets) => false,
            Err(e) => return Err(e),
        };
        let mut obj = FitObjective {
            model,
            prior,
            targets: Some(frame),
            scan: None,
            weights: [config.w_keypoint, 0.0, config.w_prior],
            mode: config.gradient,
            smoothing: 0.0,
        };
        if !have_targets {
            let p = prev.clone().unwrap_or_else(|| rest.clone());
            result.energies.push(EnergyTerms { prior: angle_prior(&p.theta, prior), ..Default::default() });
            result.frames.push(p);
            result.converged.push(false);
            continue;
        }
        let init = match (&prev, config.init) {
            (Some(p), InitPolicy::Previous) => p.clone(),
            _ => BodyParams { translation: initial_translation(model, beta, frame), ..rest.clone() },
        };
        let (x, _, _, converged) = continuation_descent(&mut obj, init.to_vector(), &blocks, config)?;
        let mut params = BodyParams::from_vector(&x).canonicalized();
        params.beta = *beta;
        result.energies.push(obj.terms(&params)?);
        result.frames.push(params.clone());
        result.converged.push(converged);
        prev = Some(params);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scan_rejected() {
        let model = BodyModel::procedural();
        let joints: Vec<_> = model.forward(&BodyParams::default()).joints.into_iter().map(Some).collect();
        let prior = AnglePrior::permissive(&model);
        let r = register_shape(&[], &joints, &model, &prior, &RegistrationConfig::default());
        assert_eq!(r, Err(RegisterError::EmptyVertexSet));
    }

    #[test]
    fn exact_initialization_exits_immediately() {
        let model = BodyModel::procedural();
        let out = model.forward(&BodyParams::default());
        let joints: Vec<_> = out.joints.iter().copied().map(Some).collect();
        let prior = AnglePrior::permissive(&model);
        let fit = register_shape(&out.vertices, &joints, &model, &prior, &RegistrationConfig::default()).unwrap();
        assert_eq!(fit.iterations, 0);
        assert!(fit.params.to_vector().iter().all(|v| v.abs() < 1e-12));
        assert!(fit.converged);
    }

    #[test]
    fn rest_targets_give_rest_pose() {
        let model = BodyModel::procedural();
        let joints: Vec<_> = model.forward(&BodyParams::default()).joints.into_iter().map(Some).collect();
        let prior = AnglePrior::new(model.default_convention(), JointLimits::anatomical());
        let r = register_pose(&[joints], &[0.0; NUM_BETAS], &model, &prior, &RegistrationConfig::default()).unwrap();
        assert!(r.frames[0].theta.iter().all(|v| v.abs() < 1e-9));
        assert_eq!(r.energies[0].prior, 0.0);
    }

    #[test]
    fn joint_map_validation() {
        let frame = vec![Some(Vector3::zeros()); 5];
        let mut map = vec![None; NUM_JOINTS];
        map[0] = Some(4);
        assert_eq!(map_keypoints(&frame, &map).unwrap()[0], Some(Vector3::zeros()));
        map[1] = Some(9);
        assert!(map_keypoints(&frame, &map).is_err());
    }
}
