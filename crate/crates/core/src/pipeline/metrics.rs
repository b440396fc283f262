//! Joint-position error metrics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("frame {0}: points are collinear or coincident; similarity alignment is undefined")]
    DegenerateConfiguration(usize),
    #[error("no joints to evaluate")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean per-joint position error (millimeters).
    pub mpjpe: f64,
    /// MPJPE after per-frame similarity alignment (millimeters).
    pub pa_mpjpe: f64,
    pub per_frame_mpjpe: Vec<f64>,
    pub per_frame_pa_mpjpe: Vec<f64>,
}

fn check(pred: &[Vec<Vector3<f64>>], gt: &[Vec<Vector3<f64>>]) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch(format!("prediction has {} frames, ground truth {}", pred.len(), gt.len())));
    }
    for (t, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(MetricsError::ShapeMismatch(format!("frame {t}: prediction has {} joints, ground truth {}", p.len(), g.len())));
        }
    }
    if gt.iter().all(Vec::is_empty) {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Mean joint distance in millimeters.
fn frame_error(p: &[Vector3<f64>], g: &[Vector3<f64>]) -> f64 {
    1000.0 * p.iter().zip(g).map(|(a, b)| (a - b).norm()).sum::<f64>() / p.len().max(1) as f64
}

/// Similarity transform `(s, R, t)` minimizing `Σ w_i |s R x_i + t − y_i|²`.
fn weighted_similarity(x: &[Vector3<f64>], y: &[Vector3<f64>], w: &[f64]) -> Option<Similarity> {
    let wsum: f64 = w.iter().sum();
    if x.len() < 3 || !(wsum > 0.0) {
        return None;
    }
    let mx = x.iter().zip(w).map(|(p, wi)| p * *wi).sum::<Vector3<f64>>() / wsum;
    let my = y.iter().zip(w).map(|(p, wi)| p * *wi).sum::<Vector3<f64>>() / wsum;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for ((a, b), wi) in x.iter().zip(y).zip(w) {
        let (da, db) = (a - mx, b - my);
        cov += *wi * db * da.transpose();
        var_x += wi * da.norm_squared();
    }
    if var_x <= 1e-18 {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let d = if u.determinant() * vt.determinant() < 0.0 { -1.0 } else { 1.0 };
    // singular values are unsorted; the reflection fix goes on the smallest
    let smallest = (0..3).min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b])).unwrap();
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    s_diag[smallest] = d;
    let r = u * Matrix3::from_diagonal(&s_diag) * vt;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * s_diag[i]).sum();
    let s = trace / var_x;
    Some(Similarity { scale: s, rotation: r, translation: my - s * r * mx })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * p + self.translation
    }
}

fn distance_sum(t: &Similarity, x: &[Vector3<f64>], y: &[Vector3<f64>]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (t.apply(a) - b).norm()).sum()
}

fn non_collinear(y: &[Vector3<f64>]) -> bool {
    if y.len() < 3 {
        return false;
    }
    let my = y.iter().sum::<Vector3<f64>>() / y.len() as f64;
    let scatter = y.iter().fold(Matrix3::zeros(), |acc, p| acc + (p - my) * (p - my).transpose());
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[0] > 1e-18 && ev[1] > 1e-12 * ev[0]
}

/// Least-squares similarity (Umeyama) aligning `x` onto `y`.
pub fn similarity_align(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Option<Similarity> {
    if !non_collinear(y) {
        return None;
    }
    weighted_similarity(x, y, &vec![1.0; x.len()])
}

/// Similarity minimizing the mean joint distance.
///
/// Starts from the better of the least-squares fit and the identity, then runs
/// iteratively reweighted Procrustes; each accepted step lowers the distance
/// sum, so the result is never worse than leaving `x` unaligned.
pub fn mean_distance_align(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Option<Similarity> {
    let ls = similarity_align(x, y)?;
    let id = Similarity::identity();
    let (mut best, mut cost) = {
        let (c_ls, c_id) = (distance_sum(&ls, x, y), distance_sum(&id, x, y));
        if c_ls <= c_id { (ls, c_ls) } else { (id, c_id) }
    };
    for _ in 0..100 {
        let w: Vec<f64> = x.iter().zip(y).map(|(a, b)| 1.0 / (best.apply(a) - b).norm().max(1e-12)).collect();
        let Some(next) = weighted_similarity(x, y, &w) else { break };
        let c = distance_sum(&next, x, y);
        if !(c < cost) {
            break;
        }
        let done = cost - c <= 1e-14 * cost;
        best = next;
        cost = c;
        if done {
            break;
        }
    }
    Some(best)
}

pub fn mpjpe(pred: &[Vec<Vector3<f64>>], gt: &[Vec<Vector3<f64>>]) -> Result<f64, MetricsError> {
    Ok(evaluate_parts(pred, gt, false)?.0)
}

pub fn pa_mpjpe(pred: &[Vec<Vector3<f64>>], gt: &[Vec<Vector3<f64>>]) -> Result<f64, MetricsError> {
    Ok(evaluate_parts(pred, gt, true)?.0)
}

fn evaluate_parts(pred: &[Vec<Vector3<f64>>], gt: &[Vec<Vector3<f64>>], align: bool) -> Result<(f64, Vec<f64>), MetricsError> {
    check(pred, gt)?;
    let mut per_frame = Vec::with_capacity(gt.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, (p, g)) in pred.iter().zip(gt).enumerate() {
        if g.is_empty() {
            per_frame.push(0.0);
            continue;
        }
        let e = if align {
            let sim = mean_distance_align(p, g).ok_or(MetricsError::DegenerateConfiguration(t))?;
            let aligned: Vec<Vector3<f64>> = p.iter().map(|x| sim.apply(x)).collect();
            frame_error(&aligned, g)
        } else {
            frame_error(p, g)
        };
        total += e * g.len() as f64;
        count += g.len();
        per_frame.push(e);
    }
    Ok((total / count as f64, per_frame))
}

pub fn evaluate(pred: &[Vec<Vector3<f64>>], gt: &[Vec<Vector3<f64>>]) -> Result<Metrics, MetricsError> {
    let (mpjpe, per_frame_mpjpe) = evaluate_parts(pred, gt, false)?;
    let (pa_mpjpe, per_frame_pa_mpjpe) = evaluate_parts(pred, gt, true)?;
    Ok(Metrics { mpjpe, pa_mpjpe, per_frame_mpjpe, per_frame_pa_mpjpe })
}
