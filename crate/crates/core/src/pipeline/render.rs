//! Depth-only z-buffer rasterizer and the cube-stack calibration scene.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use crate::camgeom::{Camera, CameraId, Intrinsics, Rig};
use crate::cloudproc::{depth_to_camera_points, DepthImage, PointCloud};

/// Triangles closer than this to the camera plane are dropped (no clipping).
const NEAR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn append(&mut self, other: &TriangleMesh) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.faces.extend(other.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
    }
}

/// Box with the given half extents, turned by `yaw` about +y.
pub fn box_mesh(center: Vector3<f64>, half: Vector3<f64>, yaw: f64) -> TriangleMesh {
    let (s, c) = yaw.sin_cos();
    let rot = Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
    let vertices = (0..8)
        .map(|i| {
            let corner = Vector3::new(
                if i & 1 == 0 { -half.x } else { half.x },
                if i & 2 == 0 { -half.y } else { half.y },
                if i & 4 == 0 { -half.z } else { half.z },
            );
            center + rot * corner
        })
        .collect();
    let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    let faces = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
    TriangleMesh { vertices, faces }
}

/// Five boxes of assorted sizes and orientations stacked in free space, roughly
/// person-sized and centred on the origin.
pub fn cube_stack() -> TriangleMesh {
    let mut mesh = TriangleMesh::default();
    for (c, h, yaw) in [
        ([0.0, -0.62, 0.0], [0.40, 0.30, 0.30], 0.2),
        ([0.05, -0.07, 0.05], [0.25, 0.25, 0.20], -0.5),
        ([-0.05, 0.33, 0.0], [0.15, 0.15, 0.15], 0.9),
        ([0.58, -0.77, 0.35], [0.12, 0.15, 0.12], 0.3),
        ([-0.45, -0.72, -0.45], [0.10, 0.20, 0.16], -0.7),
    ] {
        mesh.append(&box_mesh(Vector3::from(c), Vector3::from(h), yaw));
    }
    mesh
}

/// Camera-frame depth of the nearest surface at every pixel centre; 0 where
/// nothing is hit.
pub fn render_depth(mesh: &TriangleMesh, camera: &Camera) -> DepthImage {
    let k = &camera.intrinsics;
    let (w, h) = (k.width as i64, k.height as i64);
    let mut zbuf = vec![f64::INFINITY; (w * h) as usize];
    let cam_pts: Vec<Vector3<f64>> = mesh.vertices.iter().map(|v| camera.to_camera_frame(v)).collect();
    for f in &mesh.faces {
        let p = [cam_pts[f[0]], cam_pts[f[1]], cam_pts[f[2]]];
        if p.iter().any(|q| q.z < NEAR) {
            continue;
        }
        let s: [(f64, f64); 3] = std::array::from_fn(|i| (k.fx * p[i].x / p[i].z + k.cx, k.fy * p[i].y / p[i].z + k.cy));
        let area = (s[1].0 - s[0].0) * (s[2].1 - s[0].1) - (s[2].0 - s[0].0) * (s[1].1 - s[0].1);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = s.iter().map(|q| q.0).fold(f64::INFINITY, f64::min).ceil().max(0.0) as i64;
        let max_x = s.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max).floor().min((w - 1) as f64) as i64;
        let min_y = s.iter().map(|q| q.1).fold(f64::INFINITY, f64::min).ceil().max(0.0) as i64;
        let max_y = s.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max).floor().min((h - 1) as f64) as i64;
        for y in min_y..=max_y {
            for x in min_x..=max_x {
                let (px, py) = (x as f64, y as f64);
                let edge = |a: (f64, f64), b: (f64, f64)| ((b.0 - a.0) * (py - a.1) - (px - a.0) * (b.1 - a.1)) / area;
                let b0 = edge(s[1], s[2]);
                let b1 = edge(s[2], s[0]);
                let b2 = edge(s[0], s[1]);
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                // 1/z is affine in screen space
                let z = 1.0 / (b0 / p[0].z + b1 / p[1].z + b2 / p[2].z);
                let slot = &mut zbuf[(y * w + x) as usize];
                if z < *slot {
                    *slot = z;
                }
            }
        }
    }
    let depths = zbuf.into_iter().map(|z| if z.is_finite() { z as f32 } else { 0.0 }).collect();
    DepthImage::new(k.width, k.height, depths).expect("rasterized depths are finite and positive")
}

/// Depth-sensor intrinsics (Kinect-like 640×576 when `scale` = 1).
pub fn depth_intrinsics(scale: f64) -> Intrinsics {
    let (w, h) = ((640.0 * scale).round() as u32, (576.0 * scale).round() as u32);
    Intrinsics::new(504.0 * scale, 504.0 * scale, w as f64 / 2.0, h as f64 / 2.0, w, h).expect("valid intrinsics")
}

/// `rig` with every camera's intrinsics replaced.
pub fn with_intrinsics(rig: &Rig, intrinsics: Intrinsics) -> Rig {
    Rig::new(rig.cameras().iter().map(|c| Camera::new(c.id, intrinsics, c.extrinsics)).collect()).expect("ids unchanged")
}

/// Renders `mesh` from every camera and lifts each depth map to a
/// camera-frame cloud.
pub fn render_clouds(mesh: &TriangleMesh, rig: &Rig) -> BTreeMap<CameraId, PointCloud> {
    use rayon::prelude::*;
    let clouds: Vec<_> = rig
        .cameras()
        .par_iter()
        .map(|cam| {
            let depth = render_depth(mesh, cam);
            (cam.id, depth_to_camera_points(&depth, &cam.intrinsics, None).expect("resolution matches"))
        })
        .collect();
    clouds.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camgeom::RigidTransform;

    fn camera(w: u32, h: u32) -> Camera {
        Camera::new(CameraId(0), Intrinsics::new(50.0, 50.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(), RigidTransform::identity())
    }

    #[test]
    fn fronto_parallel_square() {
        // a square at z = 2 spanning x, y in [-0.5, 0.5] covers |u - cx| <= 12.5 px
        let mesh = TriangleMesh {
            vertices: vec![Vector3::new(-0.5, -0.5, 2.0), Vector3::new(0.5, -0.5, 2.0), Vector3::new(0.5, 0.5, 2.0), Vector3::new(-0.5, 0.5, 2.0)],
            faces: vec![[0, 1, 2], [0, 2, 3]],
        };
        let d = render_depth(&mesh, &camera(40, 40));
        assert_eq!(d.get(20, 20), 2.0);
        assert_eq!(d.get(8, 20), 2.0);
        assert_eq!(d.get(7, 20), 0.0);
        assert_eq!(d.num_valid(), 25 * 25);
    }

    #[test]
    fn slanted_plane_depth_is_exact() {
        // plane z = 2 + 0.5 x
        let mesh = TriangleMesh {
            vertices: vec![Vector3::new(-1.0, -1.0, 1.5), Vector3::new(1.0, -1.0, 2.5), Vector3::new(1.0, 1.0, 2.5), Vector3::new(-1.0, 1.0, 1.5)],
            faces: vec![[0, 1, 2], [0, 2, 3]],
        };
        let cam = camera(30, 30);
        let d = render_depth(&mesh, &cam);
        for (col, row) in [(15, 15), (5, 12), (22, 3)] {
            let z = d.get(col, row) as f64;
            let x = (col as f64 - 15.0) / 50.0 * z;
            assert!((z - (2.0 + 0.5 * x)).abs() < 1e-6);
        }
    }

    #[test]
    fn nearer_surface_wins() {
        let mut mesh = box_mesh(Vector3::new(0.0, 0.0, 3.0), Vector3::new(1.0, 1.0, 0.1), 0.0);
        mesh.append(&box_mesh(Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.1, 0.1, 0.1), 0.0));
        let d = render_depth(&mesh, &camera(40, 40));
        assert!((d.get(20, 20) - 1.9).abs() < 1e-6);
        assert!((d.get(6, 20) - 2.9).abs() < 1e-6);
    }

    #[test]
    fn box_faces_point_outward() {
        let m = box_mesh(Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0), 0.4);
        for f in &m.faces {
            let (a, b, c) = (m.vertices[f[0]], m.vertices[f[1]], m.vertices[f[2]]);
            let n = (b - a).cross(&(c - a));
            assert!(n.dot(&((a + b + c) / 3.0)) > 0.0);
        }
    }
}
