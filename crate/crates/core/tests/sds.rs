use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use soar::avatar::PosedAvatar;
use soar::image::Image;
use soar::loss::PyramidDistance;
use soar::raster::Background;
use soar::scene::PoseSequence;
use soar::toy::{toy_camera, toy_pose, ToyScene, ToySceneConfig};
use soar::train::{
    reconstruct, sds_refine, DenoiseRequest, IdentityDenoiser, OracleDenoiser, ReconstructionConfig, SdsConfig, SdsHook, SdsPhase, StepHook,
    Trainer, TrainingData,
};

/// Capsule avatar that never turns: the camera only ever sees its front.
fn front_only_scene(frames: usize, size: usize) -> ToyScene {
    let config = ToySceneConfig { frames, size, ..Default::default() };
    let template = soar::toy::capsule_avatar();
    let poses = (0..frames)
        .map(|t| {
            let mut p = toy_pose(t as f64 / frames as f64);
            p.axis_angles[0] = Default::default();
            p
        })
        .collect();
    let sequence = PoseSequence { betas: soar::toy::TOY_BETAS.to_vec(), poses };
    let cameras = vec![toy_camera(&config, 0.0, 0.0); frames];
    ToyScene::with_cameras(template, sequence, &cameras, config).unwrap()
}

#[test]
fn identity_denoiser_gives_zero_gradient() {
    let scene = front_only_scene(2, 32);
    let cloud = scene.initial_cloud(0).unwrap();
    let config = SdsConfig::default();
    let mut denoiser = IdentityDenoiser;
    let phase = SdsPhase { steps: 10, lambda_rgb: 1e-4, lambda_normal: 1e-4 };
    let mut hook = SdsHook { denoiser: &mut denoiser, phase, config: &config, frames: &scene.frames, prompt: "", background: Background::default(), phase_start: 0 };
    let bones = scene.sequence.bones(&scene.template, 0).unwrap();
    let avatar = PosedAvatar::new(&cloud, &bones).unwrap();
    let (value, grads) = hook.contribute(&avatar, &bones, 0, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let g = grads.unwrap();
    assert_eq!(value, 0.0);
    assert!(g.positions.iter().chain(&g.colors).all(|v| v.iter().all(|&x| x == 0.0)));
    assert!(g.rotations.iter().all(|m| m.iter().all(|&x| x == 0.0)));
    assert!(g.scales.iter().chain(&g.occlusion).all(|&x| x == 0.0));
}

#[test]
fn zero_weights_and_identity_match_reconstruct() {
    let scene = front_only_scene(3, 32);
    let start = scene.initial_cloud(0).unwrap();
    let perceptual = PyramidDistance::default();
    let data = TrainingData { template: &scene.template, sequence: &scene.sequence, frames: &scene.frames, perceptual: &perceptual };
    let recon = ReconstructionConfig { steps: 7, ..Default::default() };
    let mut baseline = start.clone();
    let report = reconstruct(&mut baseline, &data, &recon, 11).unwrap();

    let zero = SdsConfig {
        shape: SdsPhase { steps: 3, lambda_rgb: 0.0, lambda_normal: 0.0 },
        texture: SdsPhase { steps: 4, lambda_rgb: 0.0, lambda_normal: 0.0 },
        ..SdsConfig::default()
    };
    let mut cloud = start.clone();
    let mut trainer = Trainer::new(&cloud, &recon, 11);
    let sds = sds_refine(&mut cloud, &mut trainer, &data, &recon, &zero, &mut IdentityDenoiser, "a person").unwrap();
    let history: Vec<_> = sds.shape.iter().chain(&sds.texture).copied().collect();
    assert_eq!(history, report.history);
    assert_eq!(cloud, baseline);

    let identity = SdsConfig {
        shape: SdsPhase { steps: 3, lambda_rgb: 0.0, lambda_normal: 1e-4 },
        texture: SdsPhase { steps: 4, lambda_rgb: 1e-4, lambda_normal: 0.0 },
        ..SdsConfig::default()
    };
    let mut cloud = start.clone();
    let mut trainer = Trainer::new(&cloud, &recon, 11);
    sds_refine(&mut cloud, &mut trainer, &data, &recon, &identity, &mut IdentityDenoiser, "a person").unwrap();
    assert_eq!(cloud, baseline, "identity residuals leave only the reconstruction losses");
}

#[test]
fn bad_denoiser_output_aborts() {
    let scene = front_only_scene(2, 32);
    let mut cloud = scene.initial_cloud(0).unwrap();
    let before = cloud.clone();
    let perceptual = PyramidDistance::default();
    let data = TrainingData { template: &scene.template, sequence: &scene.sequence, frames: &scene.frames, perceptual: &perceptual };
    let recon = ReconstructionConfig::default();
    let mut trainer = Trainer::new(&cloud, &recon, 0);
    let mut bad = OracleDenoiser::new(|_: &DenoiseRequest| Ok(Image::new(3, 3, 3)));
    let err = sds_refine(&mut cloud, &mut trainer, &data, &recon, &SdsConfig::default(), &mut bad, "").unwrap_err();
    assert!(err.to_string().contains("oracle returned"), "{err}");
    assert_eq!(cloud, before);
}
