use nalgebra::Vector3;

use super::{AnglePrior, GradientMode, RegisterError};
use crate::bodymodel::{BodyModel, BodyParams, NUM_JOINTS, NUM_PARAMS, THETA_OFFSET};
use crate::optim::{central_difference, Objective};
use crate::spatial::KdTree;

/// Above this many point pairs nearest neighbours go through a k-d tree.
pub const BRUTE_FORCE_PAIRS: usize = 1_000_000;

/// `sqrt(d² + ε²) − ε` and its derivative factor `1 / sqrt(d² + ε²)`; exact norm at ε = 0.
fn smoothed(d: f64, eps: f64) -> (f64, f64) {
    if eps == 0.0 {
        return (d, if d > 0.0 { 1.0 / d } else { 0.0 });
    }
    let r = (d * d + eps * eps).sqrt();
    (r - eps, 1.0 / r)
}

/// Index and distance of the nearest `to` point for every `from` point.
/// Ties go to the lowest index.
pub fn nearest_neighbors(from: &[Vector3<f64>], to: &[Vector3<f64>], to_tree: Option<&KdTree>) -> Vec<(usize, f64)> {
    if from.len() * to.len() <= BRUTE_FORCE_PAIRS && to_tree.is_none() {
        return from
            .iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (i, q) in to.iter().enumerate() {
                    let d = (p - q).norm_squared();
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                (best.0, best.1.sqrt())
            })
            .collect();
    }
    let owned;
    let tree = match to_tree {
        Some(t) => t,
        None => {
            owned = KdTree::new(to);
            &owned
        }
    };
    from.iter()
        // a non-finite query has no neighbour; NaN lets callers reject the point
        .map(|p| tree.nearest(p).map_or((0, f64::NAN), |n| (n.index, n.distance)))
        .collect()
}

/// `(1/N) Σ_h min_s |h − s|`.
pub fn unidirectional_chamfer(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Result<f64, RegisterError> {
    if from.is_empty() || to.is_empty() {
        return Err(RegisterError::EmptyVertexSet);
    }
    Ok(nearest_neighbors(from, to, None).iter().map(|n| n.1).sum::<f64>() / from.len() as f64)
}

/// Bidirectional mean nearest-neighbour distance between two vertex sets.
pub fn chamfer_energy(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64, RegisterError> {
    Ok(unidirectional_chamfer(a, b)? + unidirectional_chamfer(b, a)?)
}

/// Chamfer energy and its gradient with respect to the `model` vertices.
pub fn chamfer_with_gradient(model: &[Vector3<f64>], scan: &[Vector3<f64>], scan_tree: Option<&KdTree>) -> Result<(f64, Vec<Vector3<f64>>), RegisterError> {
    smoothed_chamfer(model, scan, scan_tree, 0.0)
}

fn smoothed_chamfer(model: &[Vector3<f64>], scan: &[Vector3<f64>], scan_tree: Option<&KdTree>, eps: f64) -> Result<(f64, Vec<Vector3<f64>>), RegisterError> {
    if model.is_empty() || scan.is_empty() {
        return Err(RegisterError::EmptyVertexSet);
    }
    let (n, m) = (model.len() as f64, scan.len() as f64);
    let mut grad = vec![Vector3::zeros(); model.len()];
    let mut value = 0.0;
    for (i, (j, d)) in nearest_neighbors(model, scan, scan_tree).into_iter().enumerate() {
        let (v, k) = smoothed(d, eps);
        value += v / n;
        grad[i] += (model[i] - scan[j]) * (k / n);
    }
    for (s, (i, d)) in nearest_neighbors(scan, model, None).into_iter().enumerate() {
        let (v, k) = smoothed(d, eps);
        value += v / m;
        grad[i] += (model[i] - scan[s]) * (k / m);
    }
    Ok((value, grad))
}

fn present_count(targets: &[Option<Vector3<f64>>]) -> usize {
    targets.iter().flatten().count()
}

/// Mean distance between regressed joints and the present targets.
pub fn keypoint_energy(model: &BodyModel, params: &BodyParams, targets: &[Option<Vector3<f64>>]) -> Result<f64, RegisterError> {
    let joints = model.forward(params).joints;
    keypoint_terms(&joints, targets, 0.0).map(|(v, _)| v)
}

fn keypoint_terms(joints: &[Vector3<f64>], targets: &[Option<Vector3<f64>>], eps: f64) -> Result<(f64, Vec<Vector3<f64>>), RegisterError> {
    if targets.len() != NUM_JOINTS {
        return Err(RegisterError::InvalidInput(format!("{} targets, expected {NUM_JOINTS}", targets.len())));
    }
    let count = present_count(targets);
    if count == 0 {
        return Err(RegisterError::NoTargets);
    }
    let mut grad = vec![Vector3::zeros(); NUM_JOINTS];
    let mut value = 0.0;
    for (j, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let d = joints[j] - t;
            let (v, k) = smoothed(d.norm(), eps);
            value += v;
            grad[j] = d * (k / count as f64);
        }
    }
    Ok((value / count as f64, grad))
}

/// Per-axis limit penalty on the 23 non-root joints:
/// `(1/69) Σ exp(max(θ − θu, 0) + max(θl − θ, 0)) − 1`.
pub fn angle_prior(theta: &[f64], prior: &AnglePrior) -> f64 {
    angle_prior_with_gradient(theta, prior).0
}

pub fn angle_prior_with_gradient(theta: &[f64], prior: &AnglePrior) -> (f64, Vec<f64>) {
    let terms = (3 * (NUM_JOINTS - 1)) as f64;
    let mut grad = vec![0.0; theta.len()];
    let mut sum = 0.0;
    for j in 1..NUM_JOINTS {
        let aa = Vector3::new(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]);
        let (euler, jac) = prior.convention.euler_with_jacobian(j, &aa);
        for a in 0..3 {
            let e = euler.angles[a];
            let (lo, hi) = (prior.limits.lower[j][a], prior.limits.upper[j][a]);
            let over = (e - hi).max(0.0);
            let under = (lo - e).max(0.0);
            let term = (over + under).exp();
            sum += term;
            let slope = if e > hi { term } else if e < lo { -term } else { 0.0 };
            if slope != 0.0 {
                for k in 0..3 {
                    grad[3 * j + k] += slope * jac[(a, k)] / terms;
                }
            }
        }
    }
    (sum / terms - 1.0, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyTerms {
    pub keypoint: f64,
    pub surface: f64,
    pub prior: f64,
}

/// Weighted registration objective over the flat parameter vector.
pub struct FitObjective<'a> {
    pub model: &'a BodyModel,
    pub prior: &'a AnglePrior,
    pub targets: Option<&'a [Option<Vector3<f64>>]>,
    pub scan: Option<(&'a [Vector3<f64>], &'a KdTree)>,
    pub weights: [f64; 3],
    pub mode: GradientMode,
    /// Charbonnier width (meters) applied to the keypoint and surface norms
    /// while optimising; 0 gives the exact energies.
    pub smoothing: f64,
}

impl FitObjective<'_> {
    /// Exact (unsmoothed) energy terms.
    pub fn terms(&self, params: &BodyParams) -> Result<EnergyTerms, RegisterError> {
        self.terms_with(params, 0.0)
    }

    fn terms_with(&self, params: &BodyParams, eps: f64) -> Result<EnergyTerms, RegisterError> {
        let out = self.model.forward(params);
        let keypoint = match self.targets {
            Some(t) => keypoint_terms(&out.joints, t, eps)?.0,
            None => 0.0,
        };
        let surface = match self.scan {
            Some((pts, tree)) => smoothed_chamfer(&out.vertices, pts, Some(tree), eps)?.0,
            None => 0.0,
        };
        Ok(EnergyTerms { keypoint, surface, prior: angle_prior(&params.theta, self.prior) })
    }

    fn total(&self, x: &[f64]) -> f64 {
        let t = self.terms_with(&BodyParams::from_vector(x), self.smoothing).expect("inputs validated before optimisation");
        self.weights[0] * t.keypoint + self.weights[1] * t.surface + self.weights[2] * t.prior
    }

    fn analytic(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let params = BodyParams::from_vector(x);
        let state = self.model.forward_state(&params);
        let mut value = 0.0;
        let mut gj = None;
        if let Some(t) = self.targets {
            let (v, g) = keypoint_terms(&state.output.joints, t, self.smoothing).expect("inputs validated before optimisation");
            value += self.weights[0] * v;
            gj = Some(g.into_iter().map(|g| g * self.weights[0]).collect::<Vec<_>>());
        }
        let mut gv = None;
        if let Some((pts, tree)) = self.scan {
            let (v, g) = smoothed_chamfer(&state.output.vertices, pts, Some(tree), self.smoothing).expect("inputs validated before optimisation");
            value += self.weights[1] * v;
            gv = Some(g.into_iter().map(|g| g * self.weights[1]).collect::<Vec<_>>());
        }
        let body = self.model.backprop(&state, gv.as_deref(), gj.as_deref());
        let (prior, gp) = angle_prior_with_gradient(&params.theta, self.prior);
        value += self.weights[2] * prior;
        grad[..NUM_PARAMS].copy_from_slice(&body[..NUM_PARAMS]);
        for (i, g) in gp.iter().enumerate() {
            grad[THETA_OFFSET + i] += self.weights[2] * g;
        }
        value
    }
}

impl Objective for FitObjective<'_> {
    fn dim(&self) -> usize {
        NUM_PARAMS
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.total(x)
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match self.mode {
            GradientMode::Analytic => self.analytic(x, grad),
            GradientMode::FiniteDifference => {
                let g = central_difference(|y| self.total(y), x, 1e-7);
                grad.copy_from_slice(&g);
                self.total(x)
            }
        }
    }
}
