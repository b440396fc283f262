use nalgebra::{DMatrix, Vector2, Vector3};

use super::{CamGeomError, Camera};

/// Linear (algebraic) triangulation from two or more calibrated views.
///
/// Each observation contributes the two rows of `[x]× P X = 0`, written in
/// normalized image coordinates so that the system is well conditioned. The
/// solution is the right singular vector of the smallest singular value.
pub fn triangulate_dlt(observations: &[(&Camera, Vector2<f64>)]) -> Result<Vector3<f64>, CamGeomError> {
    let n = observations.len();
    if n < 2 {
        return Err(CamGeomError::InsufficientViews(n));
    }
    if observations.iter().any(|(_, px)| !px.iter().all(|v| v.is_finite())) {
        return Err(CamGeomError::NonFinite);
    }

    let first_center = observations[0].0.center();
    let baseline = observations
        .iter()
        .map(|(c, _)| (c.center() - first_center).norm())
        .fold(0.0f64, f64::max);
    if baseline < 1e-9 {
        return Err(CamGeomError::DegenerateGeometry);
    }

    let mut a = DMatrix::<f64>::zeros(2 * n, 4);
    for (i, (cam, px)) in observations.iter().enumerate() {
        let k = &cam.intrinsics;
        let xn = (px.x - k.cx) / k.fx;
        let yn = (px.y - k.cy) / k.fy;
        let r = cam.extrinsics.rotation();
        let t = cam.extrinsics.translation();
        for c in 0..3 {
            a[(2 * i, c)] = xn * r[(2, c)] - r[(0, c)];
            a[(2 * i + 1, c)] = yn * r[(2, c)] - r[(1, c)];
        }
        a[(2 * i, 3)] = xn * t.z - t.x;
        a[(2 * i + 1, 3)] = yn * t.z - t.y;
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(CamGeomError::DegenerateGeometry)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    if order.len() < 4 {
        return Err(CamGeomError::DegenerateGeometry);
    }
    let largest = svd.singular_values[order[3]];
    let second = svd.singular_values[order[1]];
    if !(largest > 0.0) || second / largest < 1e-12 {
        return Err(CamGeomError::DegenerateGeometry);
    }

    let h = v_t.row(order[0]);
    let w = h[3];
    let xyz = Vector3::new(h[0], h[1], h[2]);
    if w.abs() < 1e-12 * xyz.norm().max(1.0) {
        return Err(CamGeomError::DegenerateGeometry);
    }
    Ok(xyz / w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camgeom::{CameraId, Intrinsics, RigidTransform};
    use proptest::prelude::*;

    fn look_at(id: u32, eye: Vector3<f64>) -> Camera {
        let z = (-eye).normalize();
        let up = Vector3::new(0.0, -1.0, 0.0);
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        let r = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let ext = RigidTransform::new(r, -(r * eye)).unwrap();
        Camera::new(CameraId(id), Intrinsics::new(1000.0, 1000.0, 960.0, 540.0, 1920, 1080).unwrap(), ext)
    }

    #[test]
    fn two_view_exact() {
        let a = look_at(0, Vector3::new(2.0, 0.3, 0.1));
        let b = look_at(1, Vector3::new(0.2, 0.5, 2.0));
        let p = Vector3::new(0.1, -0.2, 0.05);
        let obs = [(&a, a.project(&p).unwrap()), (&b, b.project(&p).unwrap())];
        let x = triangulate_dlt(&obs).unwrap();
        assert!((x - p).norm() < 1e-9, "{}", (x - p).norm());
    }

    #[test]
    fn one_view_is_insufficient() {
        let a = look_at(0, Vector3::new(2.0, 0.3, 0.1));
        assert_eq!(triangulate_dlt(&[(&a, Vector2::new(1.0, 1.0))]), Err(CamGeomError::InsufficientViews(1)));
        assert_eq!(triangulate_dlt(&[]), Err(CamGeomError::InsufficientViews(0)));
    }

    #[test]
    fn coincident_centers_are_degenerate() {
        let a = look_at(0, Vector3::new(2.0, 0.3, 0.1));
        let b = Camera { id: CameraId(1), ..a.clone() };
        let obs = [(&a, Vector2::new(900.0, 500.0)), (&b, Vector2::new(950.0, 530.0))];
        assert_eq!(triangulate_dlt(&obs), Err(CamGeomError::DegenerateGeometry));
    }

    proptest! {
        #[test]
        fn noiseless_recovery(
            p in prop::array::uniform3(-0.8..0.8f64),
            az in prop::collection::vec(0.0..std::f64::consts::TAU, 2..6),
        ) {
            let cams: Vec<Camera> = az.iter().enumerate()
                .map(|(i, a)| look_at(i as u32, Vector3::new(2.5 * a.cos(), 0.4 + 0.1 * i as f64, 2.5 * a.sin())))
                .collect();
            let p = Vector3::from(p);
            let obs: Vec<_> = cams.iter().map(|c| (c, c.project(&p).unwrap())).collect();
            // near-coincident azimuths give tiny baselines; skip those draws
            let min_sep = cams.iter().flat_map(|a| cams.iter().map(move |b| (a, b)))
                .filter(|(a, b)| a.id != b.id)
                .map(|(a, b)| (a.center() - b.center()).norm())
                .fold(f64::INFINITY, f64::min);
            prop_assume!(min_sep > 0.05);
            let x = triangulate_dlt(&obs).unwrap();
            prop_assert!((x - p).norm() < 1e-9);
        }
    }
}
