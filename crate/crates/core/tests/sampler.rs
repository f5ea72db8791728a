use rescalekit::guidance::{GuidanceConfig, GuidanceMode};
use rescalekit::sampler::{dump_steps, sample, SamplerConfig};
use rescalekit::unet::plan::{AdaptationPlan, BlockName, ResolvedPlan};
use rescalekit::unet::{UNet, UNetConfig};

fn net() -> UNet {
    let cfg = UNetConfig { base_channels: 16, groups: 4, embed_dim: 32, ..UNetConfig::default() };
    UNet::random(&cfg, 3).unwrap()
}

fn cfg(latent: [usize; 3]) -> SamplerConfig {
    SamplerConfig { steps: 10, tau: 6, seed: 11, latent, ..SamplerConfig::default() }
}

#[test]
fn shape_preserved_for_divisible_latents() {
    let net = net();
    for latent in [[4, 8, 8], [4, 16, 24], [4, 32, 16]] {
        let out = sample(&net, &ResolvedPlan::empty(), &cfg(latent)).unwrap();
        assert_eq!(out.latent.shape(), [1, latent[0], latent[1], latent[2]]);
        assert_eq!(out.steps.len(), 10);
    }
    assert!(sample(&net, &ResolvedPlan::empty(), &cfg([4, 12, 12])).is_err());
}

#[test]
fn identical_runs_give_identical_bytes() {
    let net = net();
    let plan = net.resolve(&AdaptationPlan::redilate(&[BlockName::Mid], 2.0), None).unwrap();
    let a = sample(&net, &plan, &cfg([4, 16, 16])).unwrap();
    let b = sample(&net, &plan, &cfg([4, 16, 16])).unwrap();
    assert_eq!(a.latent.to_le_bytes(), b.latent.to_le_bytes());
    let other_seed = SamplerConfig { seed: 12, ..cfg([4, 16, 16]) };
    assert_ne!(sample(&net, &plan, &other_seed).unwrap().latent, a.latent);
}

#[test]
fn noise_damped_with_identical_models_equals_standard() {
    let net = net();
    let plan = net
        .resolve(&AdaptationPlan::redilate(&[BlockName::Down(3), BlockName::Mid, BlockName::Up(0)], 2.0), None)
        .unwrap();
    let standard = cfg([4, 16, 16]);
    let damped = SamplerConfig { guidance: GuidanceConfig { mode: GuidanceMode::NoiseDamped, ..standard.guidance }, ..standard.clone() };
    let a = sample(&net, &plan, &standard).unwrap();
    let b = sample(&net, &plan, &damped).unwrap();
    assert_eq!(a.latent.to_le_bytes(), b.latent.to_le_bytes());
}

#[test]
fn reverting_every_adapted_block_degenerates() {
    let net = net();
    let blocks = [BlockName::Down(3), BlockName::Mid, BlockName::Up(0)];
    let mut plan = AdaptationPlan::redilate(&blocks, 1.0);
    plan.noise_damped = blocks.to_vec();
    let resolved = net.resolve(&plan, None).unwrap();
    let c = SamplerConfig { guidance: GuidanceConfig { w: 7.5, mode: GuidanceMode::NoiseDamped }, ..cfg([4, 16, 16]) };
    let a = sample(&net, &resolved, &c).unwrap();
    let b = sample(&net, &ResolvedPlan::empty(), &cfg([4, 16, 16])).unwrap();
    assert!(a.latent.max_abs_diff(&b.latent).unwrap() <= 1e-6);
}

#[test]
fn step_frames_are_written() {
    let net = net();
    let c = SamplerConfig { record_steps: true, ..cfg([4, 8, 8]) };
    let out = sample(&net, &ResolvedPlan::empty(), &c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = dump_steps(&out, dir.path()).unwrap();
    assert_eq!(files.len(), 40);
    let bytes = std::fs::read(&files[0]).unwrap();
    assert!(bytes.starts_with(b"P5\n32 8\n255\n"));
}
