//! Reverse-diffusion samplers.
//!
//! Time `τ = 0` is clean data. A DDIM chain with stride `k` from `start`
//! visits `start, start − k, …, k, 0`; a DDPM chain visits every integer.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{check_dim, Error, Result};
use crate::prior::OptimalPrior;
use crate::rng::{derive_seed, rng_from_seed, standard_normal, SeededRng};
use crate::schedule::{DiffusionSchedule, PerturbationKernel};
use crate::stats::{Gaussian, Vector};

/// Where the reverse chain starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PriorKind {
    /// `N(0, Σ_p)`.
    Standard,
    /// `N(μ*, Σ*)`.
    Ogd(OptimalPrior),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMethod {
    Ddpm,
    Ddim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub start_t: usize,
    pub stride: usize,
    pub method: SamplerMethod,
    pub n_samples: usize,
    pub seed: u64,
}

impl SamplerConfig {
    /// Times visited by the chain, from `start_t` down to 0.
    pub fn times(&self, sched: &DiffusionSchedule) -> Result<Vec<usize>> {
        sched.check_time(self.start_t)?;
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be at least 1".into()));
        }
        if self.method == SamplerMethod::Ddpm && self.stride != 1 {
            return Err(Error::InvalidConfig("ancestral sampling requires stride 1".into()));
        }
        if !self.start_t.is_multiple_of(self.stride) {
            return Err(Error::InvalidConfig(format!(
                "start time {} is not a multiple of stride {}",
                self.start_t, self.stride
            )));
        }
        Ok((0..=self.start_t / self.stride).rev().map(|k| k * self.stride).collect())
    }
}

/// One independent random stream per sample, derived from the run seed.
pub fn sample_streams(seed: u64, n: usize) -> Vec<SeededRng> {
    (0..n).map(|i| rng_from_seed(derive_seed(seed, i as u64))).collect()
}

fn prior_gaussian(prior: &PriorKind, kernel: &PerturbationKernel) -> Result<Option<Gaussian>> {
    match prior {
        PriorKind::Standard => Ok(None),
        PriorKind::Ogd(p) => {
            check_dim(kernel.dim(), p.dim())?;
            Ok(Some(p.gaussian()?))
        }
    }
}

fn draw_prior(g: &Option<Gaussian>, kernel: &PerturbationKernel, rng: &mut SeededRng) -> Vector {
    let z = standard_normal(rng, kernel.dim());
    match g {
        None => kernel.color(&z),
        Some(g) => g.color(&z),
    }
}

/// Draws from the prior using the first values of each per-sample stream.
pub fn sample_prior(prior: &PriorKind, kernel: &PerturbationKernel, n: usize, seed: u64) -> Result<Vec<Vector>> {
    let g = prior_gaussian(prior, kernel)?;
    Ok(sample_streams(seed, n).iter_mut().map(|rng| draw_prior(&g, kernel, rng)).collect())
}

/// Tweedie estimate `x̂₀ = (x − √(1−ᾱ) ε) / √ᾱ`.
pub fn tweedie(x: &Vector, eps: &Vector, tau: usize, sched: &DiffusionSchedule) -> Vector {
    let ab = sched.alpha_bar(tau);
    (x - eps * (1.0 - ab).sqrt()) / ab.sqrt()
}

/// Ancestral mean `(x − β/√(1−ᾱ) ε)/√α`, plus `√β · chol · noise` when given.
pub fn ddpm_update(
    x: &Vector,
    eps: &Vector,
    tau: usize,
    sched: &DiffusionSchedule,
    kernel: &PerturbationKernel,
    noise: Option<&Vector>,
) -> Result<Vector> {
    if tau == 0 {
        return Err(Error::InvalidStepIndex { index: 0, steps: sched.steps() });
    }
    sched.check_time(tau)?;
    let beta = sched.beta(tau);
    let mut m = (x - eps * (beta / (1.0 - sched.alpha_bar(tau)).sqrt())) / sched.alpha(tau).sqrt();
    if let Some(z) = noise {
        m += kernel.color(z) * beta.sqrt();
    }
    Ok(m)
}

/// Deterministic update from `tau` to `tau_prev` (η = 0).
pub fn ddim_update(x: &Vector, eps: &Vector, tau: usize, tau_prev: usize, sched: &DiffusionSchedule) -> Result<Vector> {
    sched.check_time(tau)?;
    if tau_prev > tau {
        return Err(Error::InvalidStepIndex { index: tau_prev, steps: sched.steps() });
    }
    if tau_prev == tau {
        return Ok(x.clone());
    }
    let x0 = tweedie(x, eps, tau, sched);
    let ab = sched.alpha_bar(tau_prev);
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

pub fn ddpm_step<D: Denoiser + ?Sized>(
    x: &Vector,
    tau: usize,
    model: &D,
    sched: &DiffusionSchedule,
    kernel: &PerturbationKernel,
    noise: Option<&Vector>,
) -> Result<Vector> {
    let eps = model.eps(x, tau)?;
    ddpm_update(x, &eps, tau, sched, kernel, noise)
}

pub fn ddim_step<D: Denoiser + ?Sized>(
    x: &Vector,
    tau: usize,
    tau_prev: usize,
    model: &D,
    sched: &DiffusionSchedule,
) -> Result<Vector> {
    if tau_prev == tau {
        return Ok(x.clone());
    }
    let eps = model.eps(x, tau)?;
    ddim_update(x, &eps, tau, tau_prev, sched)
}

#[derive(Clone, Debug)]
pub struct GenerateOutput {
    pub samples: Vec<Vector>,
    /// Wall-clock seconds of each network step, in chain order.
    pub step_seconds: Vec<f64>,
    pub network_steps: usize,
}

/// Runs the whole batch in lockstep from the prior down to `τ = 0`.
pub fn generate<D: Denoiser + ?Sized>(
    model: &D,
    prior: &PriorKind,
    sched: &DiffusionSchedule,
    kernel: &PerturbationKernel,
    cfg: &SamplerConfig,
) -> Result<GenerateOutput> {
    check_dim(model.dim(), kernel.dim())?;
    let times = cfg.times(sched)?;
    if cfg.n_samples == 0 {
        return Ok(GenerateOutput { samples: Vec::new(), step_seconds: Vec::new(), network_steps: 0 });
    }
    let g = prior_gaussian(prior, kernel)?;
    let mut streams = sample_streams(cfg.seed, cfg.n_samples);
    let mut xs: Vec<Vector> = streams.iter_mut().map(|rng| draw_prior(&g, kernel, rng)).collect();
    let mut step_seconds = Vec::with_capacity(times.len());
    for w in times.windows(2) {
        let (tau, prev) = (w[0], w[1]);
        let start = Instant::now();
        let eps = model.eps_batch(&xs, tau)?;
        xs = match cfg.method {
            SamplerMethod::Ddim => {
                xs.iter().zip(&eps).map(|(x, e)| ddim_update(x, e, tau, prev, sched)).collect::<Result<_>>()?
            }
            SamplerMethod::Ddpm => xs
                .iter()
                .zip(&eps)
                .zip(streams.iter_mut())
                .map(|((x, e), rng)| {
                    let z = (prev > 0).then(|| standard_normal(rng, x.len()));
                    ddpm_update(x, e, tau, sched, kernel, z.as_ref())
                })
                .collect::<Result<_>>()?,
        };
        step_seconds.push(start.elapsed().as_secs_f64());
    }
    let network_steps = step_seconds.len();
    Ok(GenerateOutput { samples: xs, step_seconds, network_steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::OracleDenoiser;
    use crate::prior::optimal_prior_at;
    use crate::schedule::make_vp_schedule;
    use crate::stats::{gmm_moments, sample_moments, GaussianMixture, Matrix};

    struct Zero(usize);

    impl Denoiser for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn eps(&self, _: &Vector, _: usize) -> Result<Vector> {
            Ok(Vector::zeros(self.0))
        }
    }

    fn sched() -> DiffusionSchedule {
        make_vp_schedule(100, 1e-4, 0.05).unwrap()
    }

    #[test]
    fn time_grids() {
        let s = sched();
        let cfg = SamplerConfig { start_t: 40, stride: 10, method: SamplerMethod::Ddim, n_samples: 1, seed: 0 };
        assert_eq!(cfg.times(&s).unwrap(), vec![40, 30, 20, 10, 0]);
        assert!(SamplerConfig { start_t: 45, ..cfg.clone() }.times(&s).is_err());
        assert!(SamplerConfig { method: SamplerMethod::Ddpm, ..cfg.clone() }.times(&s).is_err());
        assert!(SamplerConfig { start_t: 200, ..cfg }.times(&s).is_err());
    }

    #[test]
    fn zero_eps_ddpm_rescales() {
        let s = sched();
        let x = Vector::from_vec(vec![1.0, -2.0]);
        let out = ddpm_step(&x, 7, &Zero(2), &s, &PerturbationKernel::identity(2), None).unwrap();
        assert!((out - &x / s.alpha(7).sqrt()).amax() < 1e-15);
    }

    #[test]
    fn ddim_same_time_is_identity() {
        let x = Vector::from_vec(vec![0.5, 0.25]);
        assert_eq!(ddim_step(&x, 30, 30, &Zero(2), &sched()).unwrap(), x);
    }

    #[test]
    fn point_mass_tweedie_recovers_the_point() {
        let target = Vector::from_vec(vec![2.0, -1.0]);
        let data = GaussianMixture::single(Gaussian::new(target.clone(), Matrix::identity(2, 2) * 1e-12).unwrap());
        let o = OracleDenoiser::new(data, sched(), PerturbationKernel::identity(2)).unwrap();
        let x = Vector::from_vec(vec![0.3, 0.9]);
        let eps = o.eps(&x, 60).unwrap();
        assert!((tweedie(&x, &eps, 60, &sched()) - target).amax() < 1e-6);
    }

    #[test]
    fn ddpm_last_step_posterior_mean_one_dimensional() {
        // from τ = 1 with exact ε the output is E[x₀ | x₁]
        let (mu, var) = (1.5, 0.7);
        let data = GaussianMixture::single(Gaussian::new(Vector::from_element(1, mu), Matrix::from_element(1, 1, var)).unwrap());
        let s = sched();
        let o = OracleDenoiser::new(data, s.clone(), PerturbationKernel::identity(1)).unwrap();
        let x = Vector::from_element(1, 0.4);
        let out = ddpm_step(&x, 1, &o, &s, &PerturbationKernel::identity(1), None).unwrap();
        let ab = s.alpha_bar(1);
        let post = mu + ab.sqrt() * var / (ab * var + 1.0 - ab) * (x[0] - ab.sqrt() * mu);
        assert!((out[0] - post).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_and_determinism() {
        let s = sched();
        let o = OracleDenoiser::new(GaussianMixture::single(Gaussian::standard(2)), s.clone(), PerturbationKernel::identity(2)).unwrap();
        let mut cfg = SamplerConfig { start_t: 100, stride: 1, method: SamplerMethod::Ddpm, n_samples: 0, seed: 4 };
        let out = generate(&o, &PriorKind::Standard, &s, &PerturbationKernel::identity(2), &cfg).unwrap();
        assert!(out.samples.is_empty());
        assert_eq!(out.network_steps, 0);
        cfg.n_samples = 5;
        let a = generate(&o, &PriorKind::Standard, &s, &PerturbationKernel::identity(2), &cfg).unwrap();
        let b = generate(&o, &PriorKind::Standard, &s, &PerturbationKernel::identity(2), &cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.network_steps, 100);
    }

    #[test]
    fn gaussian_chains_reproduce_data_moments() {
        let mean = Vector::from_vec(vec![2.0, -1.0]);
        let cov = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let data = GaussianMixture::single(Gaussian::new(mean.clone(), cov.clone()).unwrap());
        let s = sched();
        let ogd = optimal_prior_at(&gmm_moments(&data), &s, 100).unwrap();
        let k = ogd.kernel().unwrap();
        let o = OracleDenoiser::new(data.clone(), s.clone(), k.clone()).unwrap();
        let prior = PriorKind::Ogd(ogd);
        let n = 4000;
        for method in [SamplerMethod::Ddpm, SamplerMethod::Ddim] {
            let cfg = SamplerConfig { start_t: 100, stride: 1, method, n_samples: n, seed: 9 };
            let out = generate(&o, &prior, &s, &k, &cfg).unwrap();
            let (m, c) = sample_moments(&out.samples).unwrap();
            for j in 0..2 {
                let se = (cov[(j, j)] / n as f64).sqrt();
                assert!((m[j] - mean[j]).abs() < 4.0 * se, "{method:?} mean {m}");
            }
            let rel = (c - &cov).norm() / cov.norm();
            assert!(rel < 0.08, "{method:?} {rel}");
        }
    }

    #[test]
    fn whitened_space_run_is_equivalent() {
        let kernel = PerturbationKernel::new(Matrix::from_row_slice(2, 2, &[3.0, 0.8, 0.8, 1.0])).unwrap();
        let a = Gaussian::new(Vector::from_vec(vec![1.0, 2.0]), Matrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3])).unwrap();
        let b = Gaussian::new(Vector::from_vec(vec![-2.0, 0.0]), Matrix::identity(2, 2) * 0.4).unwrap();
        let data = GaussianMixture::new(vec![0.4, 0.6], vec![a, b]).unwrap();
        let l = kernel.chol().clone();
        let linv = l.clone().try_inverse().unwrap();
        let white_comps = data
            .components()
            .iter()
            .map(|c| Gaussian::new(&linv * c.mean(), &linv * c.cov() * linv.transpose()).unwrap())
            .collect();
        let white = GaussianMixture::new(data.weights().to_vec(), white_comps).unwrap();
        let s = sched();
        let id = PerturbationKernel::identity(2);
        let direct = OracleDenoiser::new(data, s.clone(), kernel.clone()).unwrap();
        let whitened = OracleDenoiser::new(white, s.clone(), id.clone()).unwrap();
        for (method, stride) in [(SamplerMethod::Ddpm, 1), (SamplerMethod::Ddim, 10)] {
            let cfg = SamplerConfig { start_t: 100, stride, method, n_samples: 20, seed: 5 };
            let x = generate(&direct, &PriorKind::Standard, &s, &kernel, &cfg).unwrap();
            let y = generate(&whitened, &PriorKind::Standard, &s, &id, &cfg).unwrap();
            for (xi, yi) in x.samples.iter().zip(&y.samples) {
                assert!((xi - &l * yi).amax() < 1e-10, "{method:?}");
            }
        }
    }
}
