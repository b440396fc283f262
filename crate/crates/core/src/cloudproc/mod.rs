//! Depth images, point clouds and the filters that clean them: lifting,
//! boundary masking, statistical outlier removal and depth-consistency masks.

mod mask;

use nalgebra::Vector3;
use thiserror::Error;

use crate::camgeom::{Camera, Intrinsics};
use crate::spatial::KdTree;

pub use mask::{boundary_mask, depth_consistency_mask, dilate, texture_mask, MaskConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("resolution mismatch: {got_w}x{got_h} vs expected {want_w}x{want_h}")]
    ResolutionMismatch { got_w: u32, got_h: u32, want_w: u32, want_h: u32 },
    #[error("need more than {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

fn mismatch(got: (u32, u32), want: (u32, u32)) -> CloudError {
    CloudError::ResolutionMismatch { got_w: got.0, got_h: got.1, want_w: want.0, want_h: want.1 }
}

/// Row-major depth raster in meters; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: u32,
    height: u32,
    depths: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, depths: Vec<f32>) -> Result<Self, CloudError> {
        if depths.len() != width as usize * height as usize {
            return Err(CloudError::InvalidInput(format!("{} depths for a {width}x{height} image", depths.len())));
        }
        if let Some(d) = depths.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(CloudError::InvalidInput(format!("depth {d} is not a finite non-negative value")));
        }
        Ok(Self { width, height, depths })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self { width, height, depths: vec![0.0; width as usize * height as usize] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn depths(&self) -> &[f32] {
        &self.depths
    }

    pub fn get(&self, col: u32, row: u32) -> f32 {
        self.depths[(row * self.width + col) as usize]
    }

    /// Panics on negative or non-finite depths.
    pub fn set(&mut self, col: u32, row: u32, depth: f32) {
        assert!(depth.is_finite() && depth >= 0.0, "invalid depth {depth}");
        self.depths[(row * self.width + col) as usize] = depth;
    }

    pub fn is_valid(&self, col: u32, row: u32) -> bool {
        self.get(col, row) > 0.0
    }

    pub fn num_valid(&self) -> usize {
        self.depths.iter().filter(|d| **d > 0.0).count()
    }

    fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }
}

/// One bit per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, CloudError> {
        if bits.len() != width as usize * height as usize {
            return Err(CloudError::InvalidInput(format!("{} bits for a {width}x{height} mask", bits.len())));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; width as usize * height as usize] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, col: u32, row: u32) -> bool {
        self.bits[(row * self.width + col) as usize]
    }

    pub fn set(&mut self, col: u32, row: u32, value: bool) {
        self.bits[(row * self.width + col) as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// RGB in [0, 1], aligned with `points`.
    pub colors: Option<Vec<[f32; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, colors: Option<Vec<[f32; 3]>>) -> Result<Self, CloudError> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(CloudError::InvalidInput("non-finite point".into()));
        }
        if let Some(c) = &colors {
            if c.len() != points.len() {
                return Err(CloudError::InvalidInput(format!("{} colors for {} points", c.len(), points.len())));
            }
            if c.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(CloudError::InvalidInput("color outside [0, 1]".into()));
            }
        }
        Ok(Self { points, colors })
    }

    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        Self { points, colors: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points with `keep[i]` set, in input order.
    pub fn select(&self, keep: &[bool]) -> PointCloud {
        let points = self.points.iter().zip(keep).filter(|(_, k)| **k).map(|(p, _)| *p).collect();
        let colors = self.colors.as_ref().map(|c| c.iter().zip(keep).filter(|(_, k)| **k).map(|(c, _)| *c).collect());
        PointCloud { points, colors }
    }

    pub fn transformed(&self, t: &crate::camgeom::RigidTransform) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| t.apply(p)).collect(), colors: self.colors.clone() }
    }
}

/// Valid, unmasked pixels lifted to the camera frame.
pub fn depth_to_camera_points(depth: &DepthImage, intrinsics: &Intrinsics, mask: Option<&BinaryMask>) -> Result<PointCloud, CloudError> {
    if depth.dims() != (intrinsics.width, intrinsics.height) {
        return Err(mismatch(depth.dims(), (intrinsics.width, intrinsics.height)));
    }
    if let Some(m) = mask {
        if (m.width, m.height) != depth.dims() {
            return Err(mismatch((m.width, m.height), depth.dims()));
        }
    }
    let mut points = Vec::with_capacity(depth.num_valid());
    for row in 0..depth.height {
        for col in 0..depth.width {
            let d = depth.get(col, row) as f64;
            if d <= 0.0 || mask.is_some_and(|m| m.get(col, row)) {
                continue;
            }
            points.push(Vector3::new((col as f64 - intrinsics.cx) / intrinsics.fx * d, (row as f64 - intrinsics.cy) / intrinsics.fy * d, d));
        }
    }
    Ok(PointCloud::from_points(points))
}

/// Valid, unmasked pixels lifted through the intrinsics and then the inverse
/// extrinsics into world coordinates.
pub fn depth_to_points(depth: &DepthImage, camera: &Camera, mask: Option<&BinaryMask>) -> Result<PointCloud, CloudError> {
    let local = depth_to_camera_points(depth, &camera.intrinsics, mask)?;
    Ok(local.transformed(&camera.extrinsics.inverse()))
}

/// Per-point mean distance to the `k` nearest other points.
pub fn knn_mean_distances(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    let tree = KdTree::new(points);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = tree.knn(p, k, Some(i));
            nn.iter().map(|n| n.distance).sum::<f64>() / nn.len() as f64
        })
        .collect()
}

/// Keeps points whose mean k-NN distance is at most
/// `mean + std_ratio · std` (population statistics over all points).
pub fn statistical_outlier_removal(cloud: &PointCloud, k: usize, std_ratio: f64) -> Result<PointCloud, CloudError> {
    Ok(cloud.select(&sor_inliers(&cloud.points, k, std_ratio)?))
}

pub fn sor_inliers(points: &[Vector3<f64>], k: usize, std_ratio: f64) -> Result<Vec<bool>, CloudError> {
    if k == 0 {
        return Err(CloudError::InvalidInput("k must be at least 1".into()));
    }
    if !(std_ratio > 0.0) {
        return Err(CloudError::InvalidInput("std_ratio must be positive".into()));
    }
    if points.len() <= k {
        return Err(CloudError::TooFewPoints { n: points.len(), k });
    }
    let d = knn_mean_distances(points, k);
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let limit = mean + std_ratio * std;
    Ok(d.iter().map(|v| *v <= limit).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camgeom::{CameraId, RigidTransform};
    use nalgebra::Vector2;
    use proptest::prelude::*;

    fn intrinsics(w: u32, h: u32) -> Intrinsics {
        Intrinsics::new(100.0, 110.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    #[test]
    fn constant_depth_lifts_to_plane() {
        let depth = DepthImage::new(8, 6, vec![2.5; 48]).unwrap();
        let cam = Camera::new(CameraId(0), intrinsics(8, 6), RigidTransform::identity());
        let cloud = depth_to_points(&depth, &cam, None).unwrap();
        assert_eq!(cloud.len(), 48);
        assert!(cloud.points.iter().all(|p| (p.z - 2.5).abs() < 1e-12));
    }

    #[test]
    fn zero_depth_is_empty() {
        let cam = Camera::new(CameraId(0), intrinsics(8, 6), RigidTransform::identity());
        assert!(depth_to_points(&DepthImage::zeros(8, 6), &cam, None).unwrap().is_empty());
    }

    #[test]
    fn resolution_must_match() {
        let cam = Camera::new(CameraId(0), intrinsics(8, 6), RigidTransform::identity());
        assert!(matches!(depth_to_points(&DepthImage::zeros(4, 6), &cam, None), Err(CloudError::ResolutionMismatch { .. })));
    }

    #[test]
    fn lift_then_project_hits_pixel_centers() {
        let mut depth = DepthImage::zeros(16, 12);
        for row in 0..12 {
            for col in 0..16 {
                depth.set(col, row, 1.0 + 0.1 * ((col * 7 + row * 3) % 11) as f32);
            }
        }
        let cam = Camera::new(CameraId(3), intrinsics(16, 12), RigidTransform::from_axis_angle(&Vector3::new(0.1, -0.4, 0.2), Vector3::new(0.3, 0.1, 2.0)));
        let cloud = depth_to_points(&depth, &cam, None).unwrap();
        let mut i = 0;
        for row in 0..12 {
            for col in 0..16 {
                let px = cam.project(&cloud.points[i]).unwrap();
                assert!((px - Vector2::new(col as f64, row as f64)).norm() < 1e-9);
                i += 1;
            }
        }
    }

    #[test]
    fn masked_pixels_are_skipped() {
        let depth = DepthImage::new(4, 4, vec![1.0; 16]).unwrap();
        let mut mask = BinaryMask::empty(4, 4);
        mask.set(1, 2, true);
        mask.set(3, 0, true);
        let cloud = depth_to_camera_points(&depth, &intrinsics(4, 4), Some(&mask)).unwrap();
        assert_eq!(cloud.len(), 14);
    }

    fn grid_with_far_point() -> PointCloud {
        let mut pts: Vec<_> = (0..100).map(|i| Vector3::new((i % 10) as f64, (i / 10) as f64, 0.0)).collect();
        pts.push(Vector3::new(4.5, 4.5, 100.0));
        PointCloud::from_points(pts)
    }

    #[test]
    fn sor_removes_only_the_far_point() {
        let cloud = grid_with_far_point();
        let keep = sor_inliers(&cloud.points, 8, 2.0).unwrap();
        assert_eq!(keep.iter().filter(|k| !**k).count(), 1);
        assert!(!keep[100]);
        let out = statistical_outlier_removal(&cloud, 8, 2.0).unwrap();
        assert_eq!(out.points, cloud.points[..100].to_vec());
    }

    #[test]
    fn sor_matches_brute_force_statistics() {
        let cloud = grid_with_far_point();
        let brute: Vec<f64> = cloud
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut d: Vec<(f64, usize)> = cloud.points.iter().enumerate().filter(|(j, _)| *j != i).map(|(j, q)| ((p - q).norm(), j)).collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                d[..8].iter().map(|x| x.0).sum::<f64>() / 8.0
            })
            .collect();
        let fast = knn_mean_distances(&cloud.points, 8);
        for (a, b) in brute.iter().zip(&fast) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sor_keeps_uniform_ring() {
        // every point of a closed ring sees the same neighbourhood
        let ring: Vec<_> = (0..40)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 40.0;
                Vector3::new(a.cos(), a.sin(), 0.0)
            })
            .collect();
        let out = statistical_outlier_removal(&PointCloud::from_points(ring.clone()), 4, 2.0).unwrap();
        assert_eq!(out.points, ring);
    }

    #[test]
    fn sor_needs_more_points_than_k() {
        let cloud = PointCloud::from_points(vec![Vector3::zeros(); 5]);
        assert_eq!(statistical_outlier_removal(&cloud, 5, 2.0), Err(CloudError::TooFewPoints { n: 5, k: 5 }));
    }

    #[test]
    fn sor_carries_colors() {
        let mut cloud = grid_with_far_point();
        cloud.colors = Some((0..101).map(|i| [i as f32 / 101.0, 0.0, 0.0]).collect());
        let out = statistical_outlier_removal(&cloud, 8, 2.0).unwrap();
        assert_eq!(out.colors.unwrap().len(), 100);
    }

    proptest! {
        #[test]
        fn sor_output_is_a_subsequence(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let pts: Vec<_> = (0..60).map(|_| Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>() * 0.1)).collect();
            let out = statistical_outlier_removal(&PointCloud::from_points(pts.clone()), 5, 1.0).unwrap();
            let mut it = pts.iter();
            for p in &out.points {
                prop_assert!(it.any(|q| q == p));
            }
        }
    }
}
