use proptest::prelude::*;

use trajdiff::denoiser::OracleDenoiser;
use trajdiff::evaluate::{cluster_samples, controllable_metrics, sliced_wasserstein, wasserstein_1d, MERGE_THRESHOLD};
use trajdiff::guidance::{
    ecmr_reference_swap, goal_cost, make_task, nnm_update, CandidateSet, GuidanceConfig, GuidanceCost, GuidanceMethod,
    RouteSetKind, RouteTask, SpeedSetting, DEFAULT_SWAP_CAP,
};
use trajdiff::persistence::{from_binary, from_text, to_binary, to_text};
use trajdiff::prior::{optimal_prior, optimal_prior_blockdiag};
use trajdiff::sampler::{generate, PriorKind, SamplerConfig, SamplerMethod};
use trajdiff::scenario::{make_scene, marginal_sample_set, marginalize, JointGmm, MarginalEntry, MarginalSampleSet, SceneSpec};
use trajdiff::schedule::{make_vp_schedule, perturbed_gmm, PerturbationKernel};
use trajdiff::stats::{kl_gaussian, random_mixture, DataStats, Gaussian, GaussianMixture, Matrix, Vector};

fn spd(dim: usize, entries: &[f64], ridge: f64) -> Matrix {
    let a = Matrix::from_iterator(dim, dim, entries.iter().copied().cycle().take(dim * dim));
    &a * a.transpose() + Matrix::identity(dim, dim) * ridge
}

fn spd_strategy(max_dim: usize) -> impl Strategy<Value = (usize, Matrix)> {
    (1..=max_dim, prop::collection::vec(-2.0..2.0f64, max_dim * max_dim), 0.05..1.0f64)
        .prop_map(|(d, e, r)| (d, spd(d, &e, r)))
}

fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

fn straight_task(n: usize, h: usize, offsets: &[f64], speed: SpeedSetting) -> RouteTask {
    let routes = (0..n).map(|i| (0..h).map(|k| [k as f64, offsets[i % offsets.len()] + i as f64]).collect()).collect();
    RouteTask::new(routes, h, RouteSetKind::U, speed).unwrap()
}

fn speed_strategy() -> impl Strategy<Value = SpeedSetting> {
    prop_oneof![Just(SpeedSetting::N), Just(SpeedSetting::A), Just(SpeedSetting::D)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gaussians_are_symmetric_and_positive((d, cov) in spd_strategy(6), shift in -3.0..3.0f64) {
        let g = Gaussian::new(Vector::from_element(d, shift), cov).unwrap();
        prop_assert!(max_abs(&(g.cov() - g.cov().transpose())) <= 1e-10);
        prop_assert!(g.cov().clone().symmetric_eigen().eigenvalues.iter().all(|&e| e > 0.0));
        prop_assert_eq!(g.mean().len(), g.cov().nrows());
    }

    #[test]
    fn mixture_weights_are_normalized(raw in prop::collection::vec(0.01..10.0f64, 1..6), d in 1usize..4) {
        let comps = raw.iter().map(|_| Gaussian::standard(d)).collect();
        let m = GaussianMixture::from_unnormalized(raw, comps).unwrap();
        prop_assert!((m.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(m.weights().iter().all(|&w| w >= 0.0));
        prop_assert!(m.components().iter().all(|c| c.dim() == d));
    }

    #[test]
    fn gaussian_kl_is_nonnegative_and_zero_on_self(
        (d, a) in spd_strategy(5),
        b_entries in prop::collection::vec(-2.0..2.0f64, 25),
        mu in prop::collection::vec(-2.0..2.0f64, 5),
    ) {
        let p = Gaussian::new(Vector::zeros(d), a).unwrap();
        let q = Gaussian::new(Vector::from_iterator(d, mu.iter().copied().take(d)), spd(d, &b_entries, 0.1)).unwrap();
        prop_assert!(kl_gaussian(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kl_gaussian(&p, &p).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn linear_schedule_invariants(t in 2usize..600, b0 in 1e-5..1e-3f64, span in 1e-3..0.1f64) {
        let s = make_vp_schedule(t, b0, b0 + span).unwrap();
        prop_assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        prop_assert!(s.betas().windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn kernels_have_unit_determinant((d, cov) in spd_strategy(6), z in prop::collection::vec(-3.0..3.0f64, 6)) {
        let k = PerturbationKernel::new(cov).unwrap();
        prop_assert!((k.sigma().determinant() - 1.0).abs() <= 1e-6);
        let z = Vector::from_iterator(d, z.iter().copied().take(d));
        prop_assert!((k.whiten(&k.color(&z)) - &z).amax() <= 1e-9);
    }

    #[test]
    fn standard_normal_is_preserved(d in 1usize..6, t in 1usize..200) {
        let sched = make_vp_schedule(200, 1e-4, 0.05).unwrap();
        let p = perturbed_gmm(&GaussianMixture::single(Gaussian::standard(d)), t, &sched, &PerturbationKernel::identity(d)).unwrap();
        let c = &p.components()[0];
        prop_assert!(c.mean().amax() <= 1e-15);
        prop_assert!(max_abs(&(c.cov() - Matrix::identity(d, d))) <= 1e-15);
    }

    #[test]
    fn optimal_prior_shape((d, cov) in spd_strategy(6), ab in 0.001..1.0f64) {
        let mean = Vector::from_fn(d, |i, _| i as f64 - 1.0);
        let p = optimal_prior(&DataStats::new(mean.clone(), cov.clone()).unwrap(), ab).unwrap();
        prop_assert!((p.sigma_p_star.determinant() - 1.0).abs() <= 1e-6);
        prop_assert!(p.gaussian().is_ok());
        // Σ* is a scalar multiple of Σ_d
        let c = ab + (1.0 - ab) / cov.determinant().powf(1.0 / d as f64);
        prop_assert!(max_abs(&(&p.sigma_star - &cov * c)) <= 1e-9 * max_abs(&cov).max(1.0));
        prop_assert!((&p.mu_star - mean * ab.sqrt()).amax() <= 1e-15);
    }

    #[test]
    fn block_prior_matches_full_prior_on_block_diagonal_data(
        (d1, c1) in spd_strategy(3),
        (d2, c2) in spd_strategy(3),
        ab in 0.01..1.0f64,
    ) {
        let s1 = DataStats::new(Vector::from_element(d1, 1.0), c1.clone()).unwrap();
        let s2 = DataStats::new(Vector::from_element(d2, -2.0), c2.clone()).unwrap();
        let mut cov = Matrix::zeros(d1 + d2, d1 + d2);
        cov.view_mut((0, 0), (d1, d1)).copy_from(&c1);
        cov.view_mut((d1, d1), (d2, d2)).copy_from(&c2);
        let mean = Vector::from_iterator(d1 + d2, s1.mean.iter().chain(s2.mean.iter()).copied());
        let full = optimal_prior(&DataStats::new(mean, cov).unwrap(), ab).unwrap();
        let block = optimal_prior_blockdiag(&[s1, s2], ab).unwrap();
        prop_assert!(max_abs(&(&full.sigma_star - &block.sigma_star)) <= 1e-12);
        prop_assert!((&full.mu_star - &block.mu_star).amax() <= 1e-12);
    }

    #[test]
    fn guidance_times_match_network_steps(k in 1usize..20, stride in 1usize..10) {
        let sched = make_vp_schedule(200, 1e-4, 0.05).unwrap();
        let cfg = GuidanceConfig::new(GuidanceMethod::Ecm, 1.0, k * stride, stride);
        let times = cfg.times(&sched).unwrap();
        prop_assert_eq!(times.len(), k);
        prop_assert!(times.windows(2).all(|w| w[0] > w[1]));
        prop_assert_eq!(*times.last().unwrap(), stride);
    }

    #[test]
    fn speed_indices(h in 3usize..40, speed in speed_strategy()) {
        let (d, g) = speed.indices(h);
        prop_assert!(d <= h && g <= h);
        match speed {
            SpeedSetting::N => prop_assert!(d == h && g == h),
            SpeedSetting::A => prop_assert!(d < g),
            SpeedSetting::D => prop_assert!(g < d),
        }
    }

    #[test]
    fn goal_cost_gradient_matches_differences(
        n in 1usize..4,
        xs in prop::collection::vec(-5.0..5.0f64, 72),
        speed in speed_strategy(),
    ) {
        let h = 12;
        let task = straight_task(n, h, &[0.5, -1.0, 2.0], speed);
        let x = Vector::from_iterator(2 * n * h, xs.iter().copied().take(2 * n * h));
        let g = task.grad(&x);
        for j in 0..x.len() {
            let e = 1e-5;
            let mut up = x.clone();
            up[j] += e;
            let mut dn = x.clone();
            dn[j] -= e;
            let fd = (goal_cost(&up, &task) - goal_cost(&dn, &task)) / (2.0 * e);
            prop_assert!((fd - g[j]).abs() <= 1e-6 * (1.0 + g[j].abs()));
        }
    }

    #[test]
    fn one_dimensional_wasserstein_of_a_shift(a in prop::collection::vec(-10.0..10.0f64, 1..50), c in -5.0..5.0f64) {
        let mut x = a.clone();
        let mut y: Vec<f64> = a.iter().map(|v| v + c).collect();
        prop_assert!((wasserstein_1d(&mut x, &mut y) - c.abs()).abs() <= 1e-9);
    }

    #[test]
    fn sliced_distance_is_symmetric_and_nonnegative(
        a in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 3), 2..30),
        b in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 3), 2..30),
        seed in any::<u64>(),
    ) {
        let va: Vec<Vector> = a.into_iter().map(Vector::from_vec).collect();
        let vb: Vec<Vector> = b.into_iter().map(Vector::from_vec).collect();
        let ab = sliced_wasserstein(&va, &vb, 20, seed).unwrap();
        let ba = sliced_wasserstein(&vb, &va, 20, seed).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(sliced_wasserstein(&va, &va, 20, seed).unwrap() == 0.0);
    }

    #[test]
    fn persisted_mixtures_round_trip_exactly(d in 1usize..5, m in 1usize..4, seed in any::<u64>()) {
        let mix = random_mixture(d, m, 2.0, seed).unwrap();
        prop_assert_eq!(&from_text::<GaussianMixture>(&to_text(&mix).unwrap()).unwrap(), &mix);
        prop_assert_eq!(&from_binary::<GaussianMixture>(&to_binary(&mix).unwrap()).unwrap(), &mix);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scenes_are_reproducible_with_expected_dimension(
        n in 1usize..4,
        h in 2usize..14,
        coupling in 0.0..1.0f64,
        seed in any::<u64>(),
    ) {
        let spec = SceneSpec { n_agents: n, horizon: h, interaction_coupling: coupling, ..SceneSpec::default() };
        let a = make_scene(&spec, seed).unwrap();
        let b = make_scene(&spec, seed).unwrap();
        prop_assert_eq!(a.dim(), 2 * n * h);
        prop_assert_eq!(to_text(&a).unwrap(), to_text(&b).unwrap());
    }

    #[test]
    fn marginalization_commutes_with_perturbation(n in 1usize..4, seed in 0u64..1000, t in 1usize..100) {
        let spec = SceneSpec { n_agents: n, ..SceneSpec::default() };
        let joint = make_scene(&spec, seed).unwrap();
        let sched = make_vp_schedule(100, 1e-4, 0.05).unwrap();
        let pert = JointGmm {
            mixture: perturbed_gmm(&joint.mixture, t, &sched, &PerturbationKernel::identity(joint.dim())).unwrap(),
            ..joint.clone()
        };
        let x = spec.agent_dim();
        for i in 0..n {
            let lhs = marginalize(&pert, i).unwrap();
            let rhs = perturbed_gmm(&marginalize(&joint, i).unwrap(), t, &sched, &PerturbationKernel::identity(x)).unwrap();
            prop_assert_eq!(lhs.len(), rhs.len());
            for (w1, w2) in lhs.weights().iter().zip(rhs.weights()) {
                prop_assert!((w1 - w2).abs() <= 1e-12);
            }
            for (c1, c2) in lhs.components().iter().zip(rhs.components()) {
                prop_assert!((c1.mean() - c2.mean()).amax() <= 1e-12);
                prop_assert!(max_abs(&(c1.cov() - c2.cov())) <= 1e-12);
            }
        }
    }

    #[test]
    fn whitened_sampling_equals_colored_sampling(
        (d, cov) in spd_strategy(4),
        seed in any::<u64>(),
        ddpm in any::<bool>(),
    ) {
        let sched = make_vp_schedule(30, 1e-4, 0.05).unwrap();
        let data = random_mixture(d, 2, 1.5, seed).unwrap();
        let kernel = PerturbationKernel::new(cov).unwrap();
        let l = kernel.chol().clone();
        let li = l.clone().try_inverse().unwrap();
        let white = GaussianMixture::new(
            data.weights().to_vec(),
            data.components()
                .iter()
                .map(|c| Gaussian::new(&li * c.mean(), &li * c.cov() * li.transpose()).unwrap())
                .collect(),
        )
        .unwrap();
        let cfg = SamplerConfig {
            start_t: 30,
            stride: if ddpm { 1 } else { 5 },
            method: if ddpm { SamplerMethod::Ddpm } else { SamplerMethod::Ddim },
            n_samples: 4,
            seed,
        };
        let colored = OracleDenoiser::new(data, sched.clone(), kernel.clone()).unwrap();
        let identity = PerturbationKernel::identity(d);
        let plain = OracleDenoiser::new(white, sched.clone(), identity.clone()).unwrap();
        let a = generate(&colored, &PriorKind::Standard, &sched, &kernel, &cfg).unwrap();
        let b = generate(&plain, &PriorKind::Standard, &sched, &identity, &cfg).unwrap();
        for (x, w) in a.samples.iter().zip(&b.samples) {
            prop_assert!((x - &l * w).amax() <= 1e-10 * (1.0 + x.amax()));
        }
    }

    #[test]
    fn controllable_metrics_are_ordered_and_permutation_invariant(
        n in 1usize..4,
        seed in 0u64..500,
        perm_seed in any::<u64>(),
        speed in speed_strategy(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let spec = SceneSpec { n_agents: n, ..SceneSpec::default() };
        let joint = make_scene(&spec, seed).unwrap();
        let refs = marginal_sample_set(&joint, 6).unwrap();
        let task = make_task(&joint, &refs, RouteSetKind::U, speed, seed + 1).unwrap();
        let xs = joint.mixture.sample_n(12, seed + 2);
        let m = controllable_metrics(&xs, &task).unwrap();
        prop_assert!(m.min_jfde <= m.mean_jfde && m.min_jrde <= m.mean_jrde);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
        let mut shuffled = xs.clone();
        shuffled.shuffle(&mut rng);
        let ms = controllable_metrics(&shuffled, &task).unwrap();
        prop_assert!((ms.min_jfde - m.min_jfde).abs() <= 1e-12 && (ms.mean_jfde - m.mean_jfde).abs() <= 1e-12);
        prop_assert!((ms.min_jrde - m.min_jrde).abs() <= 1e-12 && (ms.mean_jrde - m.mean_jrde).abs() <= 1e-12);

        // relabel agents in both samples and routes
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let x = spec.agent_dim();
        let relabel = |v: &Vector| Vector::from_iterator(v.len(), order.iter().flat_map(|&i| v.rows(i * x, x).iter().copied().collect::<Vec<_>>()));
        let xr: Vec<Vector> = xs.iter().map(relabel).collect();
        let tr = RouteTask::new(order.iter().map(|&i| task.routes[i].clone()).collect(), task.horizon, task.kind, task.speed).unwrap();
        let mr = controllable_metrics(&xr, &tr).unwrap();
        prop_assert!((mr.min_jfde - m.min_jfde).abs() <= 1e-12 && (mr.mean_jfde - m.mean_jfde).abs() <= 1e-12);
        prop_assert!((mr.min_jrde - m.min_jrde).abs() <= 1e-12 && (mr.mean_jrde - m.mean_jrde).abs() <= 1e-12);
    }

    #[test]
    fn clusters_are_normalized_and_stable(n in 1usize..4, seed in 0u64..500, count in 1usize..60) {
        let spec = SceneSpec { n_agents: n, ..SceneSpec::default() };
        let joint = make_scene(&spec, seed).unwrap();
        let refs = marginal_sample_set(&joint, 6).unwrap();
        let xs = joint.mixture.sample_n(count, seed + 3);
        let c = cluster_samples(&xs, &refs, MERGE_THRESHOLD).unwrap();
        prop_assert!((c.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(c.representatives.len() <= count);
        prop_assert_eq!(c.member_counts.iter().sum::<usize>(), count);
        for (p, m) in c.probabilities.iter().zip(&c.member_counts) {
            prop_assert!((p - *m as f64 / count as f64).abs() <= 1e-12);
        }
        prop_assert_eq!(cluster_samples(&xs, &refs, MERGE_THRESHOLD).unwrap(), c);
    }

    #[test]
    fn reference_swap_never_raises_the_cost(
        n in 1usize..4,
        l in 1usize..5,
        vals in prop::collection::vec(-4.0..4.0f64, 400),
        speed in speed_strategy(),
    ) {
        let h = 4;
        let x = 2 * h;
        let task = straight_task(n, h, &[0.0, 1.0, -1.0], speed);
        let mut it = vals.iter().copied().cycle();
        let mut draw = |k: usize| Vector::from_iterator(k, it.by_ref().take(k));
        let x_hat = draw(n * x);
        let refs = MarginalSampleSet {
            entries: (0..n)
                .map(|_| MarginalEntry {
                    samples: (0..l).map(|_| draw(x)).collect(),
                    scores: vec![1.0 / l as f64; l],
                    base_covs: vec![Matrix::identity(x, x); l],
                })
                .collect(),
        };
        let cands = CandidateSet::new(&refs, &x_hat).unwrap();
        let swapped = ecmr_reference_swap(&cands, &task, DEFAULT_SWAP_CAP).unwrap();
        prop_assert!(task.cost(&swapped) <= task.cost(&x_hat));
    }

    #[test]
    fn nnm_increments_respect_the_clip_bound(
        xs in prop::collection::vec(-20.0..20.0f64, 24),
        eps in prop::collection::vec(-2.0..2.0f64, 24),
        zeta in 0.0..1e4f64,
        k in 1usize..10,
    ) {
        let sched = make_vp_schedule(100, 1e-4, 0.05).unwrap();
        let task = straight_task(1, 12, &[3.0], SpeedSetting::D);
        let kernel = PerturbationKernel::new(spd(24, &xs, 0.5)).unwrap();
        let cfg = GuidanceConfig::new(GuidanceMethod::Nnm, zeta, 100, 10);
        let (tau, prev) = (k * 10, (k - 1) * 10);
        let (_, step) =
            nnm_update(&Vector::from_vec(xs), &Vector::from_vec(eps), tau, prev, &sched, &kernel, &cfg, &task).unwrap();
        let bound = kernel.marginal_std() * (1.0 - sched.alpha_bar(tau) / sched.alpha_bar(prev)).sqrt();
        for j in 0..step.len() {
            prop_assert!(step[j].abs() <= bound[j]);
        }
    }
}
