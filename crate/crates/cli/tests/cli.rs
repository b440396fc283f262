use std::path::Path;
use std::process::{Command, Output};

use mvcap_core::bodymodel::{BodyModel, BodyParams};
use mvcap_core::cloudproc::PointCloud;
use mvcap_core::kpanno::KeypointSequence3D;
use mvcap_core::pipeline::io;
use nalgebra::Vector3;
use tempfile::TempDir;

fn mvcap(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvcap")).args(args).current_dir(dir).env_remove("HUMMAN_TOOLCHAIN_THREADS").output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    o
}

/// Synthesizes a scene into `run/` and triangulates it.
fn synth_and_annotate(dir: &Path, seed: &str) {
    ok(mvcap(&["synth", "--out", "run", "--seed", seed], dir));
    ok(mvcap(&["annotate", "--rig", "run/rig.json", "--kp2d", "run/kp2d.json", "--out", "run/kp3d.json", "--seed", seed], dir));
}

#[test]
fn annotate_golden_path() {
    let tmp = TempDir::new().unwrap();
    synth_and_annotate(tmp.path(), "3");
    let seq = io::kp3d_from_json(&std::fs::read_to_string(tmp.path().join("run/kp3d.json")).unwrap()).unwrap();
    assert_eq!(seq.frames.len(), 100);
    let manifest = io::Manifest::from_json(&std::fs::read_to_string(tmp.path().join("run/kp3d.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.seed, 3);
    assert_eq!(manifest.config_hash, io::config_hash(&manifest.config));
}

#[test]
fn missing_flag_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = mvcap(&["annotate", "--rig", "rig.json"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(mvcap(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(mvcap(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn unreadable_input_is_a_data_error_naming_the_file() {
    let tmp = TempDir::new().unwrap();
    let o = mvcap(&["eval", "--pred", "absent.json", "--gt", "absent_gt.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.json"), "{}", stderr(&o));

    std::fs::write(tmp.path().join("bad.json"), r#"{"fps": 30, "frames": [[[0, 0]]]}"#).unwrap();
    let o = mvcap(&["eval", "--pred", "bad.json", "--gt", "bad.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.json"), "{}", stderr(&o));
}

#[test]
fn config_overrides_are_checked_and_recorded() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("typo.json"), r#"{"annotation": {"tau_mni": 3}}"#).unwrap();
    let o = mvcap(&["synth", "--out", "run", "--config", "typo.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("annotation.tau_mni"), "{}", stderr(&o));

    std::fs::write(tmp.path().join("small.json"), r#"{"scene": {"num_cameras": 4, "duration_s": 0.2}}"#).unwrap();
    ok(mvcap(&["synth", "--out", "run", "--config", "small.json"], tmp.path()));
    let rig = io::rig_from_json(&std::fs::read_to_string(tmp.path().join("run/rig.json")).unwrap()).unwrap();
    assert_eq!(rig.cameras().len(), 4);
    let manifest = io::Manifest::from_json(&std::fs::read_to_string(tmp.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config["scene"]["num_cameras"], 4);
}

#[test]
fn thread_variable_must_be_positive() {
    let tmp = TempDir::new().unwrap();
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_mvcap"))
            .args(["synth", "--out", "run"])
            .current_dir(tmp.path())
            .env("HUMMAN_TOOLCHAIN_THREADS", v)
            .output()
            .unwrap()
    };
    assert_eq!(run("0").status.code(), Some(1));
    assert_eq!(run("many").status.code(), Some(1));
    assert_eq!(run("1").status.code(), Some(0));
}

#[test]
fn eval_reports_errors_below_thresholds() {
    let tmp = TempDir::new().unwrap();
    synth_and_annotate(tmp.path(), "11");
    let o = ok(mvcap(&["eval", "--pred", "run/kp3d.json", "--gt", "run/kp3d_gt.json", "--out", "metrics.json"], tmp.path()));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let (mpjpe, pa) = (summary["mpjpe_mm"].as_f64().unwrap(), summary["pa_mpjpe_mm"].as_f64().unwrap());
    assert!(mpjpe < 10.0, "MPJPE {mpjpe} mm");
    assert!(pa <= mpjpe + 1e-9);
    assert!(tmp.path().join("metrics.json").exists());
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    synth_and_annotate(a.path(), "42");
    synth_and_annotate(b.path(), "42");
    let mut names: Vec<_> = std::fs::read_dir(a.path().join("run")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 7);
    for n in names {
        let (x, y) = (std::fs::read(a.path().join("run").join(&n)).unwrap(), std::fs::read(b.path().join("run").join(&n)).unwrap());
        assert!(x == y, "{n:?} differs between runs");
    }
    let c = TempDir::new().unwrap();
    synth_and_annotate(c.path(), "43");
    assert_ne!(std::fs::read(a.path().join("run/kp2d.json")).unwrap(), std::fs::read(c.path().join("run/kp2d.json")).unwrap());
}

#[test]
fn sync_prints_csv_mapping() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("k.json"), "[0.0, 0.0333, 0.0667, 1.0]").unwrap();
    std::fs::write(tmp.path().join("i.json"), "[0.01, 0.0267, 0.0433, 0.06, 0.0767]").unwrap();
    let o = ok(mvcap(&["sync", "--kinect", "k.json", "--iphone", "i.json", "--offset", "0.005"], tmp.path()));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, ["kinect_idx,iphone_idx,skew_ms", "0,0,5.000", "1,2,5.000", "2,4,5.000"]);
    let o = mvcap(&["sync", "--kinect", "k.json", "--iphone", "i.json"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = mvcap(&["sync", "--kinect", "i.json", "--iphone", "k.json", "--offset", "0", "--max-skew", "-1"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn denoise_drops_far_points() {
    let tmp = TempDir::new().unwrap();
    let mut pts: Vec<Vector3<f64>> = (0..100).map(|i| Vector3::new((i % 10) as f64, (i / 10) as f64, 0.0)).collect();
    pts.push(Vector3::new(50.0, 50.0, 100.0));
    std::fs::write(tmp.path().join("in.ply"), io::ply_encode(&PointCloud::from_points(pts), io::PlyFormat::Ascii)).unwrap();
    ok(mvcap(&["denoise", "--input", "in.ply", "--out", "out.ply"], tmp.path()));
    let out = io::ply_decode(&std::fs::read(tmp.path().join("out.ply")).unwrap()).unwrap();
    assert_eq!(out.len(), 100);
    assert!(out.points.iter().all(|p| p.z == 0.0));
}

#[test]
fn calibrate_keeps_true_extrinsics_and_gauge() {
    let tmp = TempDir::new().unwrap();
    ok(mvcap(&["synth", "--out", "run", "--depth", "--depth-scale", "0.25"], tmp.path()));
    ok(mvcap(&["calibrate", "--rig", "run/depth/rig.json", "--depth-dir", "run/depth", "--out", "cal.json"], tmp.path()));
    let before = io::rig_from_json(&std::fs::read_to_string(tmp.path().join("run/depth/rig.json")).unwrap()).unwrap();
    let after = io::rig_from_json(&std::fs::read_to_string(tmp.path().join("cal.json")).unwrap()).unwrap();
    assert_eq!(before.cameras()[0], after.cameras()[0]);
    for (x, y) in before.cameras().iter().zip(after.cameras()) {
        assert!(x.extrinsics.rotation_distance(&y.extrinsics) < 1e-3_f64.to_radians());
        assert!((x.extrinsics.translation() - y.extrinsics.translation()).norm() < 1e-4);
    }
}

#[test]
fn register_fits_scan_and_keypoints() {
    let tmp = TempDir::new().unwrap();
    let model = BodyModel::procedural();
    let mut params = BodyParams::default();
    params.beta[0] = 0.5;
    params.translation = [0.1, 0.0, 0.05];
    let out = model.forward(&params);
    std::fs::write(tmp.path().join("scan.obj"), io::obj_encode(&out.vertices, model.faces())).unwrap();
    let joints: Vec<Option<Vector3<f64>>> = out.joints.iter().copied().map(Some).collect();
    let seq = KeypointSequence3D::new(vec![joints.clone(), joints], 30.0).unwrap();
    std::fs::write(tmp.path().join("kp3d.json"), io::kp3d_to_json(&seq)).unwrap();
    ok(mvcap(&["register", "--scan", "scan.obj", "--kp3d", "kp3d.json", "--out", "params.json"], tmp.path()));
    let fit = io::params_from_json(&std::fs::read_to_string(tmp.path().join("params.json")).unwrap()).unwrap();
    assert_eq!(fit.len(), 2);
    assert!((fit[0].beta[0] - 0.5).abs() < 0.05, "beta {:?}", fit[0].beta);
    for p in &fit {
        let j = model.forward(p).joints;
        let err = j.iter().zip(&out.joints).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 5e-3, "joint error {err}");
    }
}
