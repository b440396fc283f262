use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use nalgebra::Vector3;
use rayon::prelude::*;

use mvcap_core::bodymodel::{BodyModel, JointLimits, NUM_JOINTS};
use mvcap_core::calibrate::{multiway_refine, IcpConfig};
use mvcap_core::camgeom::{Camera, CameraId, Rig};
use mvcap_core::cloudproc::{depth_to_camera_points, depth_to_points, statistical_outlier_removal, texture_mask, MaskConfig};
use mvcap_core::kpanno::{annotate_sequence, median_bone_lengths, refine_sequence, AnnotationConfig, KeypointSequence3D};
use mvcap_core::pipeline::io::{self, Manifest, PlyFormat};
use mvcap_core::pipeline::metrics::evaluate;
use mvcap_core::pipeline::render::{cube_stack, depth_intrinsics, render_depth, with_intrinsics};
use mvcap_core::pipeline::synth::{synth_rig, synth_sequence, SceneSpec};
use mvcap_core::register::{map_keypoints, register_pose, register_shape, AnglePrior, RegistrationConfig};
use mvcap_core::syncsim::{map_frames, offset_round_trip, SyncConfig};

use crate::config::{DenoiseConfig, Effective, Overrides};
use crate::{AnnotateArgs, CalibrateArgs, Cli, Command, DenoiseArgs, EvalArgs, Failure, RegisterArgs, SkewPreset, SynthArgs, SyncArgs};

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let overrides = Overrides::load(cli.common.config.as_deref())?;
    let seed = cli.common.seed;
    match &cli.command {
        Command::Synth(a) => synth(a, &overrides, seed),
        Command::Annotate(a) => annotate(a, &overrides, seed),
        Command::Register(a) => register(a, &overrides, seed),
        Command::Calibrate(a) => calibrate(a, &overrides, seed),
        Command::Sync(a) => sync(a, &overrides, seed),
        Command::Denoise(a) => denoise(a, &overrides, seed),
        Command::Eval(a) => eval(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    Ok(io::read_text(path)?)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(io::write_bytes(path, bytes)?)
}

/// Parses `path` with `decode`, naming the file on failure.
fn load<T>(path: &Path, decode: impl FnOnce(&str) -> Result<T, io::IoError>) -> Result<T> {
    decode(&read_text(path)?).with_context(|| format!("in {}", path.display()))
}

/// `<out>.manifest.json` beside a single-file output.
fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn write_manifest(path: &Path, command: &str, seed: u64, effective: &Effective, outputs: Vec<String>) -> Result<()> {
    write(path, Manifest::new(command, seed, effective.to_value(), outputs).to_json())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn synth(a: &SynthArgs, o: &Overrides, seed: u64) -> Result<(), Failure> {
    let spec: SceneSpec = o.resolve("scene")?;
    spec.validate().context("config section \"scene\"")?;
    if !(a.depth_scale > 0.0 && a.depth_scale <= 4.0) {
        return Err(Failure::Usage(format!("--depth-scale must lie in (0, 4], got {}", a.depth_scale)));
    }
    let rig = synth_rig(&spec).context("building rig")?;
    let seq = synth_sequence(&spec, &rig, seed).context("generating sequence")?;
    let topo = spec.skeleton.topology().context("skeleton")?;
    let times: Vec<f64> = (0..seq.frames2d.len()).map(|t| t as f64 / spec.fps).collect();

    let mut outputs = vec![
        ("rig.json", io::rig_to_json(&rig)),
        ("kp2d.json", io::kp2d_to_json(&seq.frames2d, spec.fps, spec.skeleton.num_keypoints())),
        ("kp3d_gt.json", io::kp3d_to_json(&seq.ground_truth)),
        ("topology.json", io::topology_to_json(&topo)),
        ("timestamps.json", io::timestamps_to_json(&times)),
    ];
    let mut names: Vec<String> = outputs.iter().map(|(n, _)| n.to_string()).collect();
    for (name, text) in outputs.drain(..) {
        write(&a.out.join(name), text)?;
    }
    if a.depth {
        let depth_rig = with_intrinsics(&rig, depth_intrinsics(a.depth_scale));
        let mesh = cube_stack();
        let maps: Vec<_> = depth_rig.cameras().par_iter().map(|c| (c.id, render_depth(&mesh, c))).collect();
        write(&a.out.join("depth/rig.json"), io::rig_to_json(&depth_rig))?;
        names.push("depth/rig.json".into());
        for (id, map) in maps {
            let stem = format!("depth/cam{:02}", id.0);
            io::write_depth(&a.out.join(&stem), &map, id, 0.0)?;
            names.extend([format!("{stem}.pf32"), format!("{stem}.json")]);
        }
    }
    let effective = Effective { scene: Some(spec), ..Effective::none() };
    write_manifest(&a.out.join("manifest.json"), "synth", seed, &effective, names)?;
    Ok(())
}

fn annotate(a: &AnnotateArgs, o: &Overrides, seed: u64) -> Result<(), Failure> {
    let config: AnnotationConfig = o.resolve("annotation")?;
    config.validate().context("config section \"annotation\"")?;
    let rig = load(&a.rig, io::rig_from_json)?;
    let (frames, fps) = load(&a.kp2d, io::kp2d_from_json)?;
    let annotated = annotate_sequence(&frames, &rig, &config).with_context(|| format!("annotating {}", a.kp2d.display()))?;
    let seq = KeypointSequence3D::new(annotated.into_iter().map(|f| f.points).collect(), fps).context("assembling sequence")?;
    let seq = match &a.topology {
        Some(path) if a.refine => {
            let topo = load(path, |s| io::topology_from_json(s, frames.first().map_or(0, |f| f.num_keypoints())))?;
            let bones = median_bone_lengths(&seq, &topo).context("estimating bone lengths")?;
            refine_sequence(&seq, &topo, &bones, &frames, &rig, &config).context("refining sequence")?.sequence
        }
        _ => seq,
    };
    write(&a.out, io::kp3d_to_json(&seq))?;
    let effective = Effective { annotation: Some(config), ..Effective::none() };
    write_manifest(&manifest_path(&a.out), "annotate", seed, &effective, vec![file_name(&a.out)])?;
    Ok(())
}

fn register(a: &RegisterArgs, o: &Overrides, seed: u64) -> Result<(), Failure> {
    let config: RegistrationConfig = o.resolve("registration")?;
    config.validate().context("config section \"registration\"")?;
    let model = match &a.model {
        Some(p) => BodyModel::from_asset(&load(p, io::model_from_json)?).with_context(|| format!("in {}", p.display()))?,
        None => BodyModel::procedural(),
    };
    let limits = match &a.limits {
        Some(p) => load(p, io::limits_from_json)?,
        None => JointLimits::anatomical(),
    };
    let prior = AnglePrior::new(model.default_convention(), limits);
    let seq = load(&a.kp3d, io::kp3d_from_json)?;
    let targets: Vec<Vec<Option<Vector3<f64>>>> = match &a.joint_map {
        Some(p) => {
            let map: Vec<Option<usize>> =
                serde_json::from_str(&read_text(p)?).with_context(|| format!("parsing joint map {}", p.display()))?;
            seq.frames.iter().map(|f| map_keypoints(f, &map)).collect::<Result<_, _>>().with_context(|| format!("applying {}", p.display()))?
        }
        None => {
            if let Some(f) = seq.frames.first().filter(|f| f.len() != NUM_JOINTS) {
                return Err(anyhow!("{}: frames hold {} keypoints but the model has {NUM_JOINTS} joints; pass --joint-map", a.kp3d.display(), f.len()).into());
            }
            seq.frames.clone()
        }
    };
    let Some(shape_targets) = targets.get(a.shape_frame) else {
        return Err(anyhow!("{}: --shape-frame {} but only {} frames", a.kp3d.display(), a.shape_frame, targets.len()).into());
    };
    let (scan, _) = load(&a.scan, io::obj_decode)?;
    let shape = register_shape(&scan, shape_targets, &model, &prior, &config).context("shape stage")?;
    let poses = register_pose(&targets, &shape.params.beta, &model, &prior, &config).context("pose stage")?;
    write(&a.out, io::params_to_json(&poses.frames)?)?;
    let unconverged = poses.converged.iter().filter(|c| !**c).count();
    if unconverged > 0 {
        eprintln!("warning: {unconverged} of {} frames stopped at the iteration cap", poses.frames.len());
    }
    let effective = Effective { registration: Some(config), ..Effective::none() };
    write_manifest(&manifest_path(&a.out), "register", seed, &effective, vec![file_name(&a.out)])?;
    Ok(())
}

fn calibrate(a: &CalibrateArgs, o: &Overrides, seed: u64) -> Result<(), Failure> {
    let config: IcpConfig = o.resolve("icp")?;
    config.validate().context("config section \"icp\"")?;
    let rig = load(&a.rig, io::rig_from_json)?;
    let mut stems: Vec<PathBuf> = std::fs::read_dir(&a.depth_dir)
        .with_context(|| format!("listing {}", a.depth_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pf32"))
        .map(|p| p.with_extension(""))
        .collect();
    stems.sort();
    let mut clouds = BTreeMap::new();
    for stem in &stems {
        let (depth, header) = io::read_depth(stem)?;
        let id = CameraId(header.camera_id);
        let cam = rig.get(id).ok_or_else(|| anyhow!("{}: camera {} is not in {}", stem.display(), id.0, a.rig.display()))?;
        let cloud = depth_to_camera_points(&depth, &cam.intrinsics, None).with_context(|| format!("{}: camera {}", stem.display(), id.0))?;
        if clouds.insert(id, cloud).is_some() {
            return Err(anyhow!("{}: second depth map for camera {}", stem.display(), id.0).into());
        }
    }
    let init: BTreeMap<CameraId, _> = clouds.keys().map(|id| (*id, rig.get(*id).expect("checked above").extrinsics)).collect();
    let result = multiway_refine(&clouds, &init, &config).context("multiway refinement")?;
    let cams: Vec<Camera> = rig
        .cameras()
        .iter()
        .map(|c| Camera::new(c.id, c.intrinsics, result.extrinsics.get(&c.id).copied().unwrap_or(c.extrinsics)))
        .collect();
    write(&a.out, io::rig_to_json(&Rig::new(cams).context("refined rig")?))?;
    eprintln!(
        "pairwise RMSE sum {:.6} -> {:.6} m over {} pairs ({} pruned)",
        result.initial_total_rmse,
        result.final_total_rmse,
        result.pairs.len(),
        result.pruned.len()
    );
    let effective = Effective { icp: Some(config), ..Effective::none() };
    write_manifest(&manifest_path(&a.out), "calibrate", seed, &effective, vec![file_name(&a.out)])?;
    Ok(())
}

fn sync(a: &SyncArgs, o: &Overrides, seed: u64) -> Result<(), Failure> {
    let mut config: SyncConfig = o.resolve("sync")?;
    match (a.preset, a.max_skew) {
        (Some(SkewPreset::Frame), _) => config = SyncConfig::frame_period(),
        (Some(SkewPreset::HalfPhone), _) => config = SyncConfig::half_phone_period(),
        (None, Some(s)) if s > 0.0 => config.max_skew = s,
        (None, Some(s)) => return Err(Failure::Usage(format!("--max-skew must be positive, got {s}"))),
        (None, None) => {}
    }
    let offset = match (&a.offset, &a.round_trip) {
        (Some(off), _) => *off,
        (None, Some(rt)) => offset_round_trip(rt[0], rt[1], rt[2]).context("--round-trip")?,
        (None, None) => unreachable!("clap enforces one clock source"),
    };
    let kinect = load(&a.kinect, io::timestamps_from_json)?;
    let iphone = load(&a.iphone, io::timestamps_from_json)?;
    let mapping = map_frames(&kinect, &iphone, offset, config.max_skew).context("mapping frames")?;
    let mut csv = String::from("kinect_idx,iphone_idx,skew_ms\n");
    for p in &mapping.pairs {
        writeln!(csv, "{},{},{:.3}", p.kinect, p.iphone, p.skew * 1000.0).expect("string write");
    }
    eprintln!("{} pairs, {} depth frames rejected", mapping.pairs.len(), mapping.rejected.len());
    let effective = Effective { sync: Some(config), ..Effective::none() };
    match &a.out {
        Some(out) => {
            write(out, csv)?;
            write_manifest(&manifest_path(out), "sync", seed, &effective, vec![file_name(out)])?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn denoise(a: &DenoiseArgs, o: &Overrides, seed: u64) -> Result<(), Failure> {
    let config: DenoiseConfig = o.resolve("denoise")?;
    if config.k == 0 || !(config.std_ratio > 0.0) {
        return Err(anyhow!("config section \"denoise\": k must be ≥ 1 and std_ratio positive").into());
    }
    let mut effective = Effective { denoise: Some(config), ..Effective::none() };
    let cloud = match (&a.input, &a.depth, &a.rig) {
        (Some(input), _, _) => io::ply_decode(&io::read_bytes(input)?).with_context(|| format!("in {}", input.display()))?,
        (None, Some(stem), Some(rig)) => {
            let mask_config: MaskConfig = o.resolve("mask")?;
            let rig = load(rig, io::rig_from_json)?;
            let (depth, header) = io::read_depth(stem)?;
            let cam = rig.get(CameraId(header.camera_id)).ok_or_else(|| anyhow!("{}: camera {} not in rig", stem.display(), header.camera_id))?;
            let mask = texture_mask(&depth, &mask_config, false).with_context(|| format!("masking {}", stem.display()))?;
            effective.mask = Some(mask_config);
            depth_to_points(&depth, cam, Some(&mask)).with_context(|| format!("lifting {}", stem.display()))?
        }
        _ => unreachable!("clap enforces one source"),
    };
    let before = cloud.len();
    let kept = statistical_outlier_removal(&cloud, config.k, config.std_ratio).context("outlier removal")?;
    eprintln!("kept {} of {} points", kept.len(), before);
    let format = if a.ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
    write(&a.out, io::ply_encode(&kept, format))?;
    write_manifest(&manifest_path(&a.out), "denoise", seed, &effective, vec![file_name(&a.out)])?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let pred = load(&a.pred, io::kp3d_from_json)?;
    let gt = load(&a.gt, io::kp3d_from_json)?;
    if pred.frames.len() != gt.frames.len() {
        return Err(anyhow!("{} has {} frames, {} has {}", a.pred.display(), pred.frames.len(), a.gt.display(), gt.frames.len()).into());
    }
    // score only keypoints present in both
    let mut missing = 0usize;
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for (t, (pf, gf)) in pred.frames.iter().zip(&gt.frames).enumerate() {
        if pf.len() != gf.len() {
            return Err(anyhow!("frame {t}: {} keypoints predicted, {} in ground truth", pf.len(), gf.len()).into());
        }
        let pairs: Vec<_> = pf.iter().zip(gf).filter_map(|(x, y)| Some(((*x)?, (*y)?))).collect();
        missing += pf.len() - pairs.len();
        p.push(pairs.iter().map(|(x, _)| *x).collect::<Vec<_>>());
        g.push(pairs.iter().map(|(_, y)| *y).collect::<Vec<_>>());
    }
    let m = evaluate(&p, &g).context("computing metrics")?;
    let summary = serde_json::json!({ "mpjpe_mm": m.mpjpe, "pa_mpjpe_mm": m.pa_mpjpe, "frames": p.len(), "missing_keypoints": missing });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    if let Some(out) = &a.out {
        write(out, serde_json::to_string_pretty(&m).expect("json"))?;
    }
    Ok(())
}
