use std::sync::OnceLock;

use rayon::prelude::*;

use super::Denoiser;
use crate::error::{check_dim, Result};
use crate::schedule::{perturbed_gmm, DiffusionSchedule, PerturbationKernel};
use crate::stats::{GaussianMixture, Matrix, Vector};

const BATCH_CHUNK: usize = 256;

/// Exact noise predictor for mixture data: `ε = −√(1−ᾱ) Σ_p ∇log p_τ(x)`.
///
/// The perturbed mixture for each time is built on first use and cached.
pub struct OracleDenoiser {
    data: GaussianMixture,
    sched: DiffusionSchedule,
    kernel: PerturbationKernel,
    perturbed: Vec<OnceLock<GaussianMixture>>,
}

impl OracleDenoiser {
    pub fn new(data: GaussianMixture, sched: DiffusionSchedule, kernel: PerturbationKernel) -> Result<Self> {
        check_dim(data.dim(), kernel.dim())?;
        let perturbed = (0..=sched.steps()).map(|_| OnceLock::new()).collect();
        Ok(Self { data, sched, kernel, perturbed })
    }

    pub fn data(&self) -> &GaussianMixture {
        &self.data
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    pub fn kernel(&self) -> &PerturbationKernel {
        &self.kernel
    }

    /// The exact marginal `p_τ`.
    pub fn perturbed(&self, tau: usize) -> Result<&GaussianMixture> {
        self.sched.check_time(tau)?;
        if let Some(p) = self.perturbed[tau].get() {
            return Ok(p);
        }
        let p = perturbed_gmm(&self.data, tau, &self.sched, &self.kernel)?;
        Ok(self.perturbed[tau].get_or_init(|| p))
    }

    fn scale(&self, tau: usize) -> f64 {
        -(1.0 - self.sched.alpha_bar(tau)).sqrt()
    }
}

impl Denoiser for OracleDenoiser {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn eps(&self, x: &Vector, tau: usize) -> Result<Vector> {
        check_dim(self.dim(), x.len())?;
        let p = self.perturbed(tau)?;
        Ok(self.kernel.sigma() * p.score(x) * self.scale(tau))
    }

    fn eps_batch(&self, xs: &[Vector], tau: usize) -> Result<Vec<Vector>> {
        let p = self.perturbed(tau)?;
        for x in xs {
            check_dim(self.dim(), x.len())?;
        }
        let c = self.scale(tau);
        // chunks keep the dense intermediates small and give rayon work units
        Ok(xs
            .par_chunks(BATCH_CHUNK)
            .flat_map_iter(|chunk| {
                let scores = Matrix::from_columns(&p.score_batch(chunk));
                let mut eps = self.kernel.sigma() * scores;
                eps *= c;
                eps.column_iter().map(|col| col.into_owned()).collect::<Vec<_>>()
            })
            .collect())
    }

    fn vjp(&self, x: &Vector, tau: usize, cot: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), cot.len())?;
        let p = self.perturbed(tau)?;
        let v = self.kernel.sigma() * cot;
        let (_, hv) = p.score_and_hessian_vec(x, &v);
        Ok(hv * self.scale(tau))
    }

    fn vjp_batch(&self, xs: &[Vector], tau: usize, cots: &[Vector]) -> Result<Vec<Vector>> {
        self.perturbed(tau)?;
        xs.par_iter().zip(cots).map(|(x, c)| self.vjp(x, tau, c)).collect()
    }
}
