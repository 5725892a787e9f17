use trajdiff::denoiser::OracleDenoiser;
use trajdiff::evaluate::{sliced_wasserstein, SW_PROJECTIONS};
use trajdiff::harness::standard_suite;
use trajdiff::latent::{agent_rows, pushforward_gmm, train_linear_map, TrainConfig};
use trajdiff::prior::optimal_prior_at;
use trajdiff::sampler::{generate, PriorKind, SamplerConfig, SamplerMethod};
use trajdiff::scenario::make_scene;
use trajdiff::schedule::make_vp_schedule;
use trajdiff::stats::{gmm_moments, GaussianMixture, Vector};

fn ogd_samples(data: &GaussianMixture, t: usize, n: usize, seed: u64) -> Vec<Vector> {
    let sched = make_vp_schedule(t, 1e-4, 0.05).unwrap();
    let prior = optimal_prior_at(&gmm_moments(data), &sched, t).unwrap();
    let kernel = prior.kernel().unwrap();
    let model = OracleDenoiser::new(data.clone(), sched.clone(), kernel.clone()).unwrap();
    let cfg = SamplerConfig { start_t: t, stride: 1, method: SamplerMethod::Ddpm, n_samples: n, seed };
    generate(&model, &PriorKind::Ogd(prior), &sched, &kernel, &cfg).unwrap().samples
}

#[test]
fn latent_space_diffusion_matches_trajectory_space_quality() {
    let scene = &standard_suite()[1];
    let joint = make_scene(&scene.spec, scene.seed).unwrap();
    let x = scene.spec.agent_dim();
    let train = joint.mixture.sample_n(1500, 11);
    let (map, _) = train_linear_map(&agent_rows(&train, x), &TrainConfig::new(4, 9)).unwrap();
    let latent = pushforward_gmm(&map, &joint).unwrap();
    assert_eq!(latent.dim(), joint.n_agents() * 4);

    let gt = joint.mixture.sample_n(1000, 12);
    let direct = ogd_samples(&joint.mixture, 40, 1000, 13);
    let decoded: Vec<Vector> =
        ogd_samples(&latent, 40, 1000, 13).iter().map(|z| map.decode_joint(z).unwrap()).collect();
    let sw_direct = sliced_wasserstein(&direct, &gt, SW_PROJECTIONS, 14).unwrap();
    let sw_latent = sliced_wasserstein(&decoded, &gt, SW_PROJECTIONS, 14).unwrap();
    assert!(sw_latent <= 2.0 * sw_direct, "latent {sw_latent} direct {sw_direct}");
}
