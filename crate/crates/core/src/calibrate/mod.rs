//! Extrinsic refinement from depth geometry: pairwise ICP between overlapping
//! views, then a gauge-fixed pose graph over the consistent pairwise results.

mod posegraph;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camgeom::{CameraId, RigidTransform};
use crate::cloudproc::PointCloud;
use crate::spatial::KdTree;

pub use posegraph::{pose_graph_cost, solve_pose_graph, PoseEdge};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("only {found} correspondences within the distance cap, need {required}")]
    InsufficientCorrespondences { found: usize, required: usize },
    #[error("overlap graph is disconnected; unreachable from the gauge camera: {0:?}")]
    DisconnectedGraph(Vec<CameraId>),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcpMethod {
    /// Closed-form rigid fit to the matched points.
    PointToPoint,
    /// Gauss-Newton on distances along target normals estimated by local PCA.
    PointToPlane,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub method: IcpMethod,
    pub max_iterations: usize,
    /// Initial correspondence cap (meters); pairs farther apart are ignored.
    pub max_correspondence_distance: f64,
    /// The cap halves each time the RMSE stalls until it reaches this value.
    pub min_correspondence_distance: f64,
    /// Stop once the RMSE drops by less than this (meters) in one iteration.
    pub rmse_tolerance: f64,
    pub min_correspondences: usize,
    /// Pose-graph edges disagreeing with the solution by more than this
    /// (meters, with radians counted at one meter) are pruned.
    pub edge_outlier_distance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            method: IcpMethod::PointToPlane,
            max_iterations: 100,
            max_correspondence_distance: 0.05,
            min_correspondence_distance: 0.01,
            rmse_tolerance: 1e-10,
            min_correspondences: 500,
            edge_outlier_distance: 0.005,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), CalibError> {
        if self.max_iterations == 0 || self.min_correspondences == 0 {
            return Err(CalibError::InvalidInput("iteration cap and minimum correspondences must be positive".into()));
        }
        if !(self.min_correspondence_distance > 0.0 && self.min_correspondence_distance <= self.max_correspondence_distance) {
            return Err(CalibError::InvalidInput("need 0 < min_correspondence_distance <= max_correspondence_distance".into()));
        }
        if !(self.rmse_tolerance > 0.0 && self.edge_outlier_distance > 0.0) {
            return Err(CalibError::InvalidInput("tolerance and outlier distance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source coordinates into the target frame.
    pub transform: RigidTransform,
    /// RMSE over the matched pairs.
    pub rmse: f64,
    /// RMSE over all source points with distances capped at the final
    /// correspondence limit.
    pub truncated_rmse: f64,
    pub correspondences: usize,
    pub iterations: usize,
    /// Correspondence cap in force at the end.
    pub cap: f64,
}

/// Least-squares rigid motion taking `src[i]` onto `dst[i]` (Kabsch).
pub fn rigid_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<RigidTransform> {
    if src.len() != dst.len() || src.len() < 3 {
        return None;
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut fix = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * fix * u.transpose();
    RigidTransform::new(r, cd - r * cs).ok()
}

/// Neighbors used for each target normal.
const NORMAL_NEIGHBORS: usize = 10;
/// Step halvings tried before a point-to-plane update counts as stalled.
const MAX_HALVINGS: usize = 6;
/// Point-to-plane matches whose normals differ by more than 30° are dropped.
const NORMAL_AGREEMENT: f64 = 0.866;

struct Matches {
    src: Vec<Vector3<f64>>,
    dst: Vec<usize>,
    rmse: f64,
    truncated: f64,
    /// Truncated objective minimized by the chosen method (squared meters).
    cost: f64,
}

/// Unit normal per point from the smallest principal axis of its
/// neighborhood; the sign is arbitrary.
fn estimate_normals(points: &[Vector3<f64>], tree: &KdTree) -> Vec<Vector3<f64>> {
    points
        .par_iter()
        .map(|p| {
            let nb = tree.knn(p, NORMAL_NEIGHBORS, None);
            let mean = nb.iter().map(|n| points[n.index]).sum::<Vector3<f64>>() / nb.len() as f64;
            let mut cov = Matrix3::zeros();
            for n in &nb {
                let d = points[n.index] - mean;
                cov += d * d.transpose();
            }
            let eig = cov.symmetric_eigen();
            let (k, _) = eig.eigenvalues.argmin();
            eig.eigenvectors.column(k).into_owned()
        })
        .collect()
}

struct Target<'a> {
    points: &'a [Vector3<f64>],
    tree: KdTree,
    normals: Option<Vec<Vector3<f64>>>,
    /// Normals of the source cloud in its own frame.
    source_normals: Option<Vec<Vector3<f64>>>,
}

impl Target<'_> {
    fn residual(&self, p: &Vector3<f64>, i: usize) -> f64 {
        let d = p - self.points[i];
        match &self.normals {
            Some(n) => n[i].dot(&d).powi(2),
            None => d.norm_squared(),
        }
    }

    fn matches(&self, source: &[Vector3<f64>], t: &RigidTransform, cap: f64) -> Matches {
        let found: Vec<Option<(Vector3<f64>, usize, f64, f64)>> = source
            .par_iter()
            .enumerate()
            .map(|(k, p)| {
                let q = t.apply(p);
                let n = self.tree.nearest_within(&q, cap)?;
                if let (Some(sn), Some(tn)) = (&self.source_normals, &self.normals) {
                    if t.apply_vector(&sn[k]).dot(&tn[n.index]).abs() < NORMAL_AGREEMENT {
                        return None;
                    }
                }
                Some((*p, n.index, n.distance, self.residual(&q, n.index)))
            })
            .collect();
        let n = found.len();
        let mut m = Matches { src: Vec::new(), dst: Vec::new(), rmse: 0.0, truncated: 0.0, cost: 0.0 };
        let (mut sq, mut res) = (0.0, 0.0);
        for (p, i, d, r) in found.into_iter().flatten() {
            m.src.push(p);
            m.dst.push(i);
            sq += d * d;
            res += r;
        }
        let k = m.src.len();
        let outside = (n - k) as f64 * cap * cap;
        m.rmse = if k == 0 { 0.0 } else { (sq / k as f64).sqrt() };
        m.truncated = ((sq + outside) / n.max(1) as f64).sqrt();
        m.cost = (res + outside) / n.max(1) as f64;
        m
    }

    /// Linearized point-to-plane update, applied on the left of `t`.
    fn plane_step(&self, m: &Matches, t: &RigidTransform) -> Option<[f64; 6]> {
        let normals = self.normals.as_ref()?;
        let mut jtj = nalgebra::Matrix6::<f64>::zeros();
        let mut jtr = nalgebra::Vector6::<f64>::zeros();
        for (p, &i) in m.src.iter().zip(&m.dst) {
            let q = t.apply(p);
            let n = normals[i];
            let c = q.cross(&n);
            let j = nalgebra::Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
            let r = n.dot(&(q - self.points[i]));
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let step = jtj.cholesky()?.solve(&(-jtr));
        Some(std::array::from_fn(|k| step[k]))
    }
}

/// Correspondence count and RMSE of `source` moved by `t` against `target`.
pub fn overlap(source: &PointCloud, target: &PointCloud, t: &RigidTransform, cap: f64) -> (usize, f64) {
    let tgt = Target { points: &target.points, tree: KdTree::new(&target.points), normals: None, source_normals: None };
    let m = tgt.matches(&source.points, t, cap);
    (m.src.len(), m.rmse)
}

/// ICP of `source` onto `target` from `init`. Each iteration matches every
/// source point to its nearest target point within the cap, then either
/// solves the closed-form rigid fit (point-to-point) or takes a Gauss-Newton
/// step on distances along the target normals (point-to-plane). When the
/// objective stalls the cap is halved, down to the configured minimum, as
/// long as enough correspondences survive.
///
/// Steps are judged on the objective with unmatched points charged the full
/// cap, so it never increases at a fixed cap.
pub fn icp_pairwise(source: &PointCloud, target: &PointCloud, init: &RigidTransform, config: &IcpConfig) -> Result<IcpResult, CalibError> {
    config.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(CalibError::EmptyCloud);
    }
    let tree = KdTree::new(&target.points);
    let (normals, source_normals) = match config.method {
        IcpMethod::PointToPlane => {
            let own = KdTree::new(&source.points);
            (Some(estimate_normals(&target.points, &tree)), Some(estimate_normals(&source.points, &own)))
        }
        IcpMethod::PointToPoint => (None, None),
    };
    let tgt = Target { points: &target.points, tree, normals, source_normals };
    let mut cap = config.max_correspondence_distance;
    let mut t = *init;
    let mut m = tgt.matches(&source.points, &t, cap);
    if m.src.len() < config.min_correspondences {
        return Err(CalibError::InsufficientCorrespondences { found: m.src.len(), required: config.min_correspondences });
    }
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let accepted = match config.method {
            IcpMethod::PointToPoint => {
                let dst: Vec<Vector3<f64>> = m.dst.iter().map(|&i| target.points[i]).collect();
                rigid_align(&m.src, &dst).map(|next| next.orthonormalized()).and_then(|next| {
                    let cand = tgt.matches(&source.points, &next, cap);
                    (cand.src.len() >= config.min_correspondences && cand.cost <= m.cost).then_some((next, cand))
                })
            }
            IcpMethod::PointToPlane => tgt.plane_step(&m, &t).and_then(|step| {
                let mut scale = 1.0;
                for _ in 0..MAX_HALVINGS {
                    let d: [f64; 6] = std::array::from_fn(|k| scale * step[k]);
                    let next = RigidTransform::from_params(&d).compose(&t).orthonormalized();
                    let cand = tgt.matches(&source.points, &next, cap);
                    if cand.src.len() >= config.min_correspondences && cand.cost <= m.cost {
                        return Some((next, cand));
                    }
                    scale *= 0.5;
                }
                None
            }),
        };
        let stalled = match accepted {
            None => true,
            Some((next, cand)) => {
                iterations += 1;
                let drop = m.cost.sqrt() - cand.cost.sqrt();
                t = next;
                m = cand;
                drop < config.rmse_tolerance
            }
        };
        if stalled {
            if cap <= config.min_correspondence_distance {
                break;
            }
            let smaller = (0.5 * cap).max(config.min_correspondence_distance);
            let cand = tgt.matches(&source.points, &t, smaller);
            if cand.src.len() < config.min_correspondences {
                break;
            }
            cap = smaller;
            m = cand;
        }
    }
    Ok(IcpResult { transform: t, rmse: m.rmse, truncated_rmse: m.truncated, correspondences: m.src.len(), iterations, cap })
}

/// One overlapping camera pair after ICP.
#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    /// Camera whose cloud is the ICP target (`from` maps into `to`).
    pub to: CameraId,
    pub from: CameraId,
    pub icp: IcpResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiwayResult {
    pub extrinsics: BTreeMap<CameraId, RigidTransform>,
    /// Pairs whose ICP results entered the final pose graph.
    pub pairs: Vec<PairResult>,
    /// `(to, from)` pairs registered but dropped as inconsistent.
    pub pruned: Vec<(CameraId, CameraId)>,
    /// Sum of pairwise RMSE over the overlapping pairs (meters).
    pub initial_total_rmse: f64,
    pub final_total_rmse: f64,
    pub initial_graph_cost: f64,
    pub final_graph_cost: f64,
}

/// `E_to ∘ E_from⁻¹`: camera `from`'s frame expressed in camera `to`'s frame.
fn relative(ext: &BTreeMap<CameraId, RigidTransform>, to: CameraId, from: CameraId) -> RigidTransform {
    ext[&to].compose(&ext[&from].inverse())
}

/// Cameras not reachable from `gauge` over `edges`.
fn unreachable_from(gauge: CameraId, ids: &[CameraId], edges: impl Iterator<Item = (CameraId, CameraId)>) -> Vec<CameraId> {
    let mut adjacency: BTreeMap<CameraId, Vec<CameraId>> = BTreeMap::new();
    for (a, b) in edges {
        adjacency.entry(a).or_default().push(b);
        adjacency.entry(b).or_default().push(a);
    }
    let mut seen = BTreeSet::from([gauge]);
    let mut queue = VecDeque::from([gauge]);
    while let Some(c) = queue.pop_front() {
        for &n in adjacency.get(&c).into_iter().flatten() {
            if seen.insert(n) {
                queue.push_back(n);
            }
        }
    }
    ids.iter().copied().filter(|c| !seen.contains(c)).collect()
}

/// Unweighted residual of one edge: translation error plus rotation error
/// in radians, both taken as meters at one meter range.
fn edge_disagreement(ext: &BTreeMap<CameraId, RigidTransform>, e: &PoseEdge) -> f64 {
    let err = e.measured.inverse().compose(&relative(ext, e.to, e.from));
    (err.rotation_distance(&RigidTransform::identity()).powi(2) + err.translation().norm_squared()).sqrt()
}

fn total_rmse(clouds: &BTreeMap<CameraId, PointCloud>, ext: &BTreeMap<CameraId, RigidTransform>, pairs: &[(CameraId, CameraId)], cap: f64) -> f64 {
    pairs.iter().map(|&(to, from)| overlap(&clouds[&from], &clouds[&to], &relative(ext, to, from), cap).1).sum()
}

/// Refines world→camera extrinsics from camera-frame clouds. The lowest camera
/// id is the gauge and keeps its extrinsics bit for bit.
///
/// Pairs with at least `min_correspondences` matches under the initial
/// extrinsics are registered with ICP; the pose graph over those relative
/// transforms is then solved for the remaining cameras. Edges that disagree
/// with the solution by more than `edge_outlier_distance` are dropped one at
/// a time, worst first, as long as the graph stays connected. If the result
/// would raise the summed pairwise RMSE, the initial extrinsics are returned.
pub fn multiway_refine(
    clouds: &BTreeMap<CameraId, PointCloud>,
    init: &BTreeMap<CameraId, RigidTransform>,
    config: &IcpConfig,
) -> Result<MultiwayResult, CalibError> {
    config.validate()?;
    if clouds.len() < 2 {
        return Err(CalibError::InvalidInput(format!("need at least 2 cameras, got {}", clouds.len())));
    }
    if clouds.keys().ne(init.keys()) {
        return Err(CalibError::InvalidInput("clouds and extrinsics cover different cameras".into()));
    }
    let ids: Vec<CameraId> = clouds.keys().copied().collect();
    let cap = config.max_correspondence_distance;
    let candidates: Vec<(CameraId, CameraId)> = ids.iter().enumerate().flat_map(|(a, &i)| ids[a + 1..].iter().map(move |&j| (i, j))).collect();

    let results: Vec<Option<PairResult>> = candidates
        .par_iter()
        .map(|&(to, from)| {
            if clouds[&to].is_empty() || clouds[&from].is_empty() {
                return Ok(None);
            }
            let rel = relative(init, to, from);
            let (n, _) = overlap(&clouds[&from], &clouds[&to], &rel, cap);
            if n < config.min_correspondences {
                return Ok(None);
            }
            match icp_pairwise(&clouds[&from], &clouds[&to], &rel, config) {
                Ok(icp) if icp.cap <= config.min_correspondence_distance => Ok(Some(PairResult { to, from, icp })),
                Ok(_) => Ok(None),
                Err(CalibError::InsufficientCorrespondences { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, _>>()?;
    let pairs: Vec<PairResult> = results.into_iter().flatten().collect();

    let gauge = ids[0];
    let unreachable = unreachable_from(gauge, &ids, pairs.iter().map(|p| (p.to, p.from)));
    if !unreachable.is_empty() {
        return Err(CalibError::DisconnectedGraph(unreachable));
    }

    let max_n = pairs.iter().map(|p| p.icp.correspondences).max().unwrap_or(1) as f64;
    let mut edges: Vec<PoseEdge> = pairs
        .iter()
        .map(|p| PoseEdge { to: p.to, from: p.from, measured: p.icp.transform, weight: (p.icp.correspondences as f64 / max_n).sqrt() })
        .collect();
    let initial_graph_cost = pose_graph_cost(init, &edges);
    let mut refined = solve_pose_graph(init, &edges, gauge);
    let mut pruned = Vec::new();
    // drop the least consistent edge while it disagrees with the solution and
    // the graph stays connected without it
    loop {
        let mut ranked: Vec<(f64, usize)> = edges.iter().enumerate().map(|(k, e)| (edge_disagreement(&refined, e), k)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let drop = ranked.iter().take_while(|(d, _)| *d > config.edge_outlier_distance).find(|&&(_, k)| {
            let rest = edges.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, e)| (e.to, e.from));
            unreachable_from(gauge, &ids, rest).is_empty()
        });
        let Some(&(_, k)) = drop else { break };
        let e = edges.remove(k);
        pruned.push((e.to, e.from));
        refined = solve_pose_graph(&refined, &edges, gauge);
    }
    let pairs: Vec<PairResult> = pairs.into_iter().filter(|p| !pruned.contains(&(p.to, p.from))).collect();
    let initial_graph_cost = if pruned.is_empty() { initial_graph_cost } else { pose_graph_cost(init, &edges) };
    let final_graph_cost = pose_graph_cost(&refined, &edges);

    let pair_ids: Vec<(CameraId, CameraId)> = pairs.iter().map(|p| (p.to, p.from)).collect();
    let fine = config.min_correspondence_distance;
    let initial_total_rmse = total_rmse(clouds, init, &pair_ids, fine);
    let refined_total = total_rmse(clouds, &refined, &pair_ids, fine);
    let (extrinsics, final_total_rmse, final_graph_cost) = if refined_total <= initial_total_rmse {
        (refined, refined_total, final_graph_cost)
    } else {
        (init.clone(), initial_total_rmse, initial_graph_cost)
    };
    Ok(MultiwayResult { extrinsics, pairs, pruned, initial_total_rmse, final_total_rmse, initial_graph_cost, final_graph_cost })
}
