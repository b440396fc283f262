use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::camgeom::{matrix_to_axis_angle, CameraId, RigidTransform};

/// Relative-pose measurement: `measured ≈ E_to ∘ E_from⁻¹`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEdge {
    pub to: CameraId,
    pub from: CameraId,
    pub measured: RigidTransform,
    pub weight: f64,
}

const MAX_ITERATIONS: usize = 100;
const FD_STEP: f64 = 1e-7;

fn edge_residual(ext: &BTreeMap<CameraId, RigidTransform>, e: &PoseEdge, out: &mut [f64]) {
    let err = e.measured.inverse().compose(&ext[&e.to]).compose(&ext[&e.from].inverse());
    let w = matrix_to_axis_angle(err.rotation());
    let t = err.translation();
    for k in 0..3 {
        out[k] = e.weight * w[k];
        out[3 + k] = e.weight * t[k];
    }
}

fn residuals(ext: &BTreeMap<CameraId, RigidTransform>, edges: &[PoseEdge]) -> DVector<f64> {
    let mut r = DVector::zeros(6 * edges.len());
    for (i, e) in edges.iter().enumerate() {
        edge_residual(ext, e, &mut r.as_mut_slice()[6 * i..6 * i + 6]);
    }
    r
}

/// Σ over edges of `w² (|log R_err|² + |t_err|²)`.
pub fn pose_graph_cost(ext: &BTreeMap<CameraId, RigidTransform>, edges: &[PoseEdge]) -> f64 {
    residuals(ext, edges).norm_squared()
}

fn perturbed(ext: &BTreeMap<CameraId, RigidTransform>, free: &[CameraId], delta: &[f64]) -> BTreeMap<CameraId, RigidTransform> {
    let mut out = ext.clone();
    for (k, id) in free.iter().enumerate() {
        let d: [f64; 6] = std::array::from_fn(|i| delta[6 * k + i]);
        out.insert(*id, RigidTransform::from_params(&d).compose(&ext[id]));
    }
    out
}

/// Levenberg-Marquardt over a left perturbation of every non-gauge camera.
/// Steps are taken only when they lower the cost; the gauge entry is copied
/// through untouched.
pub fn solve_pose_graph(init: &BTreeMap<CameraId, RigidTransform>, edges: &[PoseEdge], gauge: CameraId) -> BTreeMap<CameraId, RigidTransform> {
    let free: Vec<CameraId> = init.keys().copied().filter(|id| *id != gauge).collect();
    let n = 6 * free.len();
    let mut ext = init.clone();
    if edges.is_empty() || n == 0 {
        return ext;
    }
    let mut r = residuals(&ext, edges);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-6;
    for _ in 0..MAX_ITERATIONS {
        let mut jac = DMatrix::zeros(r.len(), n);
        let mut delta = vec![0.0; n];
        for c in 0..n {
            delta[c] = FD_STEP;
            let plus = residuals(&perturbed(&ext, &free, &delta), edges);
            delta[c] = -FD_STEP;
            let minus = residuals(&perturbed(&ext, &free, &delta), edges);
            delta[c] = 0.0;
            jac.set_column(c, &((plus - minus) / (2.0 * FD_STEP)));
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut accepted = false;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-&jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let cand = perturbed(&ext, &free, step.as_slice());
            let cand_r = residuals(&cand, edges);
            let cand_cost = cand_r.norm_squared();
            if cand_cost < cost {
                let gain = cost - cand_cost;
                ext = cand;
                r = cand_r;
                cost = cand_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if step.amax() < 1e-13 || gain <= 1e-16 * cost.max(1e-300) {
                    return ext;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    ext
}
