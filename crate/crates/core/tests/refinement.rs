use mvcap_core::kpanno::{median_bone_lengths, refine_sequence, AnnotationConfig, BoneTerm, KeypointSequence3D, SkeletonTopology};
use mvcap_core::pipeline::synth::{observe, synth_rig, NoiseModel, SceneSpec, SkeletonSpec};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

fn mean_step(seq: &KeypointSequence3D) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for w in seq.frames.windows(2) {
        for (a, b) in w[0].iter().zip(&w[1]) {
            if let (Some(a), Some(b)) = (a, b) {
                sum += (b - a).norm();
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn bone_deviation(seq: &KeypointSequence3D, topo: &SkeletonTopology, lens: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for f in &seq.frames {
        for (&(i, j), l) in topo.bones().iter().zip(lens) {
            sum += ((f[i].unwrap() - f[j].unwrap()).norm() - l).abs();
            n += 1;
        }
    }
    sum / n as f64
}

fn static_scene(seed: u64) -> (mvcap_core::camgeom::Rig, SkeletonTopology, KeypointSequence3D, KeypointSequence3D) {
    let rig = synth_rig(&SceneSpec::default()).unwrap();
    let skel = SkeletonSpec::body17();
    let pose = skel.pose(&Vector3::zeros(), &BTreeMap::new());
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).unwrap();
    let frames = (0..30)
        .map(|_| pose.iter().map(|p| Some(p + Vector3::from_fn(|_, _| normal.sample(&mut rng)))).collect())
        .collect();
    let truth = KeypointSequence3D::new(vec![pose.iter().copied().map(Some).collect(); 30], 30.0).unwrap();
    (rig, skel.topology().unwrap(), truth, KeypointSequence3D::new(frames, 30.0).unwrap())
}

#[test]
fn jitter_is_halved_when_views_agree_with_it() {
    let (rig, topo, _, jittered) = static_scene(3);
    let bones = median_bone_lengths(&jittered, &topo).unwrap();
    let obs = observe(&jittered, &rig, &NoiseModel::noiseless(), 0);
    let r = refine_sequence(&jittered, &topo, &bones, &obs.frames2d, &rig, &AnnotationConfig::default()).unwrap();
    assert!(mean_step(&r.sequence) <= 0.5 * mean_step(&jittered));
    assert!(bone_deviation(&r.sequence, &topo, &bones.0) <= 0.5 * bone_deviation(&jittered, &topo, &bones.0));
    assert!(r.fin.total() <= r.initial.total());
}

#[test]
fn both_bone_terms_remove_jitter_against_clean_views() {
    let (rig, topo, truth, jittered) = static_scene(4);
    let bones = median_bone_lengths(&jittered, &topo).unwrap();
    let obs = observe(&truth, &rig, &NoiseModel::noiseless(), 0);
    for bone_term in [BoneTerm::PerFrame, BoneTerm::SequenceMean] {
        let config = AnnotationConfig { bone_term, ..Default::default() };
        let r = refine_sequence(&jittered, &topo, &bones, &obs.frames2d, &rig, &config).unwrap();
        assert!(mean_step(&r.sequence) <= 0.5 * mean_step(&jittered), "{bone_term:?}");
        assert!(bone_deviation(&r.sequence, &topo, &bones.0) <= 0.5 * bone_deviation(&jittered, &topo, &bones.0), "{bone_term:?}");
    }
}

#[test]
fn fast_motion_keeps_endpoints() {
    let rig = synth_rig(&SceneSpec::default()).unwrap();
    let skel = SkeletonSpec::body17();
    let topo = skel.topology().unwrap();
    let pose = skel.pose(&Vector3::zeros(), &BTreeMap::new());
    let frames = (0..30)
        .map(|t| pose.iter().map(|p| Some(p + Vector3::new(t as f64 / 30.0 - 0.5, 0.0, 0.0))).collect())
        .collect();
    let moving = KeypointSequence3D::new(frames, 30.0).unwrap();
    let bones = median_bone_lengths(&moving, &topo).unwrap();
    let obs = observe(&moving, &rig, &NoiseModel::noiseless(), 0);
    let r = refine_sequence(&moving, &topo, &bones, &obs.frames2d, &rig, &AnnotationConfig::default()).unwrap();
    for t in [0, 29] {
        for (a, b) in r.sequence.frames[t].iter().zip(&moving.frames[t]) {
            assert!((a.unwrap() - b.unwrap()).norm() < 5e-3, "frame {t}");
        }
    }
}

#[test]
fn clean_static_sequence_is_a_fixed_point() {
    let (rig, topo, truth, _) = static_scene(0);
    let bones = median_bone_lengths(&truth, &topo).unwrap();
    let obs = observe(&truth, &rig, &NoiseModel::noiseless(), 0);
    let r = refine_sequence(&truth, &topo, &bones, &obs.frames2d, &rig, &AnnotationConfig::default()).unwrap();
    for (fa, fb) in r.sequence.frames.iter().zip(&truth.frames) {
        for (a, b) in fa.iter().zip(fb) {
            assert!((a.unwrap() - b.unwrap()).norm() < 1e-6);
        }
    }
}
