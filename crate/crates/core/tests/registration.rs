use mvcap_core::bodymodel::{BodyModel, BodyParams, JointLimits, NUM_BETAS, NUM_JOINTS};
use mvcap_core::camgeom::matrix_to_axis_angle;
use mvcap_core::register::{register_pose, register_shape, AnglePrior, RegistrationConfig};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn sample_params(prior: &AnglePrior, rng: &mut ChaCha20Rng, frac: f64) -> BodyParams {
    let mut p = BodyParams::default();
    for j in 1..NUM_JOINTS {
        let e: [f64; 3] = std::array::from_fn(|a| {
            let (lo, hi) = (prior.limits.lower[j][a], prior.limits.upper[j][a]);
            let mid = 0.5 * (lo + hi);
            mid + frac * 0.5 * (hi - lo) * rng.random_range(-1.0..1.0)
        });
        p.set_joint_rotation(j, &matrix_to_axis_angle(&prior.convention.euler_to_rotation(j, &e)));
    }
    p.set_joint_rotation(0, &Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)));
    for b in p.beta.iter_mut() {
        *b = rng.random_range(-1.5..1.5);
    }
    p.translation = [rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2), rng.random_range(-0.5..0.5)];
    p
}

#[test]
fn shape_fit_recovers_sampled_body() {
    let model = BodyModel::procedural();
    let prior = AnglePrior::new(model.default_convention(), JointLimits::anatomical());
    for seed in 0..3 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let truth = sample_params(&prior, &mut rng, 0.5);
        let out = model.forward(&truth);
        let kps: Vec<_> = out.joints.iter().copied().map(Some).collect();
        let fit = register_shape(&out.vertices, &kps, &model, &prior, &RegistrationConfig::default()).unwrap();
        let db = (0..NUM_BETAS).map(|b| (fit.params.beta[b] - truth.beta[b]).abs()).fold(0.0, f64::max);
        assert!(db < 0.05, "seed {seed}: beta error {db}");
        assert!(fit.energy.surface < 1e-3, "seed {seed}: surface {}", fit.energy.surface);
        assert!(fit.objective <= fit.initial_objective);
    }
}

#[test]
fn pose_fit_tracks_interpolated_motion() {
    let model = BodyModel::procedural();
    let prior = AnglePrior::new(model.default_convention(), JointLimits::anatomical());
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let a = sample_params(&prior, &mut rng, 0.4);
    let b = sample_params(&prior, &mut rng, 0.4);
    let frames: Vec<BodyParams> = (0..50)
        .map(|i| {
            let s = i as f64 / 49.0;
            let mut p = a.clone();
            for k in 0..p.theta.len() {
                p.theta[k] = a.theta[k] * (1.0 - s) + b.theta[k] * s;
            }
            for k in 0..3 {
                p.translation[k] = a.translation[k] * (1.0 - s) + b.translation[k] * s;
            }
            p
        })
        .collect();
    let targets: Vec<Vec<_>> = frames.iter().map(|p| model.forward(p).joints.into_iter().map(Some).collect()).collect();
    let r = register_pose(&targets, &a.beta, &model, &prior, &RegistrationConfig::default()).unwrap();
    let mut worst: f64 = 0.0;
    for (f, truth) in r.frames.iter().zip(&targets) {
        let j = model.forward(f).joints;
        let e = j.iter().zip(truth).map(|(p, q)| (p - q.unwrap()).norm()).sum::<f64>() / j.len() as f64;
        worst = worst.max(e);
    }
    assert!(worst < 5e-3, "worst frame error {worst}");
    assert!(r.frames.iter().all(|f| f.beta.map(f64::to_bits) == a.beta.map(f64::to_bits)));
}

#[test]
fn heavy_prior_keeps_elbow_in_limits() {
    let model = BodyModel::procedural();
    let prior = AnglePrior::new(model.default_convention(), JointLimits::anatomical());
    // left elbow bent 1 rad the wrong way
    let mut bad = BodyParams::default();
    let e = [1.0, 0.0, 0.0];
    bad.set_joint_rotation(18, &matrix_to_axis_angle(&prior.convention.euler_to_rotation(18, &e)));
    let targets: Vec<_> = model.forward(&bad).joints.into_iter().map(Some).collect();
    let config = RegistrationConfig { w_prior: 100.0, ..Default::default() };
    let r = register_pose(&[targets], &[0.0; NUM_BETAS], &model, &prior, &config).unwrap();
    let elbow = prior.convention.axis_angle_to_euler(18, &r.frames[0].joint_rotation(18));
    assert!(elbow.angles[0] <= prior.limits.upper[18][0] + 0.02, "{:?}", elbow.angles);
    assert!(r.energies[0].keypoint > 0.0);
}
