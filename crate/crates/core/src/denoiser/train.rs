use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MlpDenoiser;
use crate::error::{check_dim, Error, Result};
use crate::rng::{rng_from_seed, standard_normal};
use crate::schedule::{perturb, DiffusionSchedule, PerturbationKernel};
use crate::stats::{GaussianMixture, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 64, lr: 1e-3, momentum: 0.9, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MlpDenoiser,
    pub losses: Vec<f64>,
}

/// Momentum SGD on `E‖ε − ε_θ(√ᾱ x₀ + √(1−ᾱ) ε, τ)‖²` with `τ` uniform on
/// `1..=T` and `ε ~ N(0, Σ_p)`.
pub fn train_ddpm(
    mut model: MlpDenoiser,
    data: &GaussianMixture,
    sched: &DiffusionSchedule,
    kernel: &PerturbationKernel,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_dim(model.arch().dim, data.dim())?;
    check_dim(kernel.dim(), data.dim())?;
    if cfg.batch == 0 || !(cfg.lr >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidConfig("batch must be positive, lr non-negative, momentum in [0, 1)".into()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut params = model.params();
    let mut velocity = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut xs = Vec::with_capacity(cfg.batch);
    let mut taus = Vec::with_capacity(cfg.batch);
    let mut targets = Vec::with_capacity(cfg.batch);
    for step in 0..cfg.steps {
        xs.clear();
        taus.clear();
        targets.clear();
        for _ in 0..cfg.batch {
            let x0 = data.sample(&mut rng);
            let tau = rng.random_range(1..=sched.steps());
            let z: Vector = standard_normal(&mut rng, data.dim());
            xs.push(perturb(&x0, tau, sched, kernel, &z)?);
            taus.push(tau);
            targets.push(kernel.color(&z));
        }
        let (loss, grad) = model.loss_and_grad(&xs, &taus, &targets)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged(step));
        }
        losses.push(loss);
        for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = cfg.momentum * *v - cfg.lr * g;
            *p += *v;
        }
        model.set_params(&params)?;
    }
    Ok(TrainOutcome { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Denoiser, MlpArch, OracleDenoiser};
    use crate::schedule::make_vp_schedule;
    use crate::stats::{Gaussian, Matrix};

    fn gaussian_1d(mean: f64, var: f64) -> GaussianMixture {
        GaussianMixture::single(Gaussian::new(Vector::from_element(1, mean), Matrix::from_element(1, 1, var)).unwrap())
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let sched = make_vp_schedule(100, 1e-4, 0.05).unwrap();
        let net = MlpDenoiser::new(MlpArch::new(1, 8), 1).unwrap();
        let cfg = TrainConfig { steps: 20, batch: 8, lr: 0.0, ..TrainConfig::default() };
        let out = train_ddpm(net.clone(), &gaussian_1d(0.0, 1.0), &sched, &PerturbationKernel::identity(1), &cfg).unwrap();
        assert_eq!(out.model, net);
        assert_eq!(out.losses.len(), 20);
    }

    #[test]
    fn training_is_deterministic() {
        let sched = make_vp_schedule(100, 1e-4, 0.05).unwrap();
        let net = MlpDenoiser::new(MlpArch::new(2, 8), 1).unwrap();
        let data = GaussianMixture::single(Gaussian::standard(2));
        let cfg = TrainConfig { steps: 30, batch: 8, lr: 1e-3, ..TrainConfig::default() };
        let k = PerturbationKernel::identity(2);
        let a = train_ddpm(net.clone(), &data, &sched, &k, &cfg).unwrap();
        let b = train_ddpm(net, &data, &sched, &k, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let sched = make_vp_schedule(100, 1e-4, 0.05).unwrap();
        let net = MlpDenoiser::new(MlpArch::new(1, 8), 1).unwrap();
        let cfg = TrainConfig { steps: 500, batch: 8, lr: 1e200, ..TrainConfig::default() };
        let err = train_ddpm(net, &gaussian_1d(0.0, 1.0), &sched, &PerturbationKernel::identity(1), &cfg).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged(_)));
    }

    #[test]
    fn one_dimensional_loss_approaches_oracle_floor() {
        let sched = make_vp_schedule(100, 1e-4, 0.05).unwrap();
        let data = gaussian_1d(1.0, 0.25);
        let kernel = PerturbationKernel::identity(1);
        let net = MlpDenoiser::new(MlpArch::new(1, 32), 7).unwrap();
        let cfg = TrainConfig { steps: 4000, batch: 64, lr: 2e-3, momentum: 0.9, seed: 3 };
        let out = train_ddpm(net, &data, &sched, &kernel, &cfg).unwrap();

        // irreducible loss of the exact predictor over the same noising process
        let oracle = OracleDenoiser::new(data.clone(), sched.clone(), kernel.clone()).unwrap();
        let mut rng = rng_from_seed(99);
        let n = 20_000;
        let (mut floor, mut learned) = (0.0, 0.0);
        for _ in 0..n {
            let x0 = data.sample(&mut rng);
            let tau = rng.random_range(1..=100);
            let z = standard_normal(&mut rng, 1);
            let xt = perturb(&x0, tau, &sched, &kernel, &z).unwrap();
            floor += (oracle.eps(&xt, tau).unwrap() - &z).norm_squared();
            learned += (out.model.eps(&xt, tau).unwrap() - &z).norm_squared();
        }
        floor /= n as f64;
        learned /= n as f64;
        assert!(learned <= 1.1 * floor, "learned {learned} floor {floor}");
    }
    #[test]
    fn standard_normal_fit_tracks_oracle() {
        let d = 3;
        let sched = make_vp_schedule(100, 1e-4, 0.05).unwrap();
        let data = GaussianMixture::single(Gaussian::standard(d));
        let kernel = PerturbationKernel::identity(d);
        let net = MlpDenoiser::new(MlpArch::new(d, 32), 5).unwrap();
        let cfg = TrainConfig { steps: 4000, batch: 64, lr: 2e-3, momentum: 0.9, seed: 11 };
        let out = train_ddpm(net, &data, &sched, &kernel, &cfg).unwrap();

        // p_t stays N(0, I), so the exact predictor is sqrt(1 - abar) * x_t
        let mut rng = rng_from_seed(21);
        let n = 5000;
        let mut gap = 0.0;
        for _ in 0..n {
            let tau = rng.random_range(1..=100);
            let xt = standard_normal(&mut rng, d);
            let exact = &xt * (1.0 - sched.alpha_bar(tau)).sqrt();
            gap += (out.model.eps(&xt, tau).unwrap() - exact).norm_squared();
        }
        gap /= n as f64;
        assert!(gap < 0.05 * d as f64, "gap {gap}");
    }
}
