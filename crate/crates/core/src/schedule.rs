//! Variance-preserving noise schedule and the (possibly anisotropic)
//! perturbation kernel `N(√ᾱ_τ x₀, (1 − ᾱ_τ) Σ_p)`.
//!
//! Diffusion time `τ` runs over `0..=T`. `τ = 0` is clean data (`ᾱ = 1`);
//! `τ ≥ 1` reads the stored arrays at index `τ − 1`, so `betas()[0]` is the
//! first noising step.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::stats::{cholesky_lower, log_det_from_chol, symmetrized, Gaussian, GaussianMixture, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: 100, beta_start: 1e-4, beta_end: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear-β variance-preserving schedule with `steps` noising steps.
pub fn make_vp_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("step count must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        let inc = (beta_end - beta_start) / (steps - 1) as f64;
        (0..steps).map(|t| beta_start + t as f64 * inc).collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(DiffusionSchedule { params: ScheduleParams { steps, beta_start, beta_end }, betas, alphas, alpha_bars })
}

impl DiffusionSchedule {
    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        make_vp_schedule(p.steps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    /// Number of noising steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_time(&self, tau: usize) -> Result<()> {
        if tau > self.steps() {
            return Err(Error::InvalidStepIndex { index: tau, steps: self.steps() });
        }
        Ok(())
    }

    /// `ᾱ_τ`, with `ᾱ_0 = 1`. Panics if `τ > T`.
    pub fn alpha_bar(&self, tau: usize) -> f64 {
        if tau == 0 {
            1.0
        } else {
            self.alpha_bars[tau - 1]
        }
    }

    /// `β_τ` for `τ ≥ 1`. Panics outside `1..=T`.
    pub fn beta(&self, tau: usize) -> f64 {
        self.betas[tau - 1]
    }

    pub fn alpha(&self, tau: usize) -> f64 {
        self.alphas[tau - 1]
    }
}

/// Noise covariance `Σ_p`, rescaled at construction so that `|Σ_p| = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationKernel {
    sigma: Matrix,
    chol: Matrix,
    marginal_std: Vector,
}

impl PerturbationKernel {
    /// Normalizes `sigma` by the `D`-th root of its determinant.
    pub fn new(sigma: Matrix) -> Result<Self> {
        let sigma = symmetrized(&sigma)?;
        let chol = cholesky_lower(&sigma)?;
        let d = sigma.nrows() as f64;
        let log_det = log_det_from_chol(&chol);
        let scale = (-log_det / d).exp();
        let sigma = sigma * scale;
        let chol = chol * scale.sqrt();
        let marginal_std = sigma.diagonal().map(f64::sqrt);
        Ok(Self { sigma, chol, marginal_std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            sigma: Matrix::identity(dim, dim),
            chol: Matrix::identity(dim, dim),
            marginal_std: Vector::from_element(dim, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    pub fn chol(&self) -> &Matrix {
        &self.chol
    }

    /// Elementwise square roots of `diag(Σ_p)`.
    pub fn marginal_std(&self) -> &Vector {
        &self.marginal_std
    }

    pub fn log_det(&self) -> f64 {
        log_det_from_chol(&self.chol)
    }

    /// Colour a whitened draw: `chol · z ~ N(0, Σ_p)`.
    pub fn color(&self, z: &Vector) -> Vector {
        &self.chol * z
    }

    /// `chol⁻¹ v`.
    pub fn whiten(&self, v: &Vector) -> Vector {
        let mut out = v.clone();
        self.chol.solve_lower_triangular_mut(&mut out);
        out
    }

    /// `N(0, Σ_p)` as a Gaussian.
    pub fn as_gaussian(&self) -> Gaussian {
        Gaussian::new(Vector::zeros(self.dim()), self.sigma.clone()).expect("kernel covariance is positive definite")
    }
}

/// `√ᾱ_τ x₀ + √(1 − ᾱ_τ) · chol · noise` for a whitened `noise`.
pub fn perturb(
    x0: &Vector,
    tau: usize,
    sched: &DiffusionSchedule,
    kernel: &PerturbationKernel,
    noise: &Vector,
) -> Result<Vector> {
    sched.check_time(tau)?;
    check_dim(kernel.dim(), x0.len())?;
    check_dim(kernel.dim(), noise.len())?;
    let ab = sched.alpha_bar(tau);
    Ok(x0 * ab.sqrt() + kernel.color(noise) * (1.0 - ab).sqrt())
}

/// Exact marginal `p_τ` of a mixture pushed through the perturbation kernel.
pub fn perturbed_gmm(
    gmm: &GaussianMixture,
    tau: usize,
    sched: &DiffusionSchedule,
    kernel: &PerturbationKernel,
) -> Result<GaussianMixture> {
    sched.check_time(tau)?;
    check_dim(kernel.dim(), gmm.dim())?;
    let ab = sched.alpha_bar(tau);
    let noise_cov = kernel.sigma() * (1.0 - ab);
    let comps = gmm
        .components()
        .iter()
        .map(|c| Gaussian::new(c.mean() * ab.sqrt(), c.cov() * ab + &noise_cov))
        .collect::<Result<Vec<_>>>()?;
    GaussianMixture::new(gmm.weights().to_vec(), comps)
}
