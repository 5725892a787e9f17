//! Noise predictors `ε_θ(x_τ, τ)`.

mod mlp;
mod oracle;
mod train;

pub use mlp::{MlpArch, MlpCheckpoint, MlpDenoiser};
pub use oracle::OracleDenoiser;
pub use train::{train_ddpm, TrainConfig, TrainOutcome};

use crate::error::Result;
use crate::stats::Vector;

/// Step used by the finite-difference Jacobian fallback.
pub const FD_STEP: f64 = 1e-5;

pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    fn eps(&self, x: &Vector, tau: usize) -> Result<Vector>;

    fn eps_batch(&self, xs: &[Vector], tau: usize) -> Result<Vec<Vector>> {
        xs.iter().map(|x| self.eps(x, tau)).collect()
    }

    /// `(∂ε/∂x)ᵀ · cot`. Defaults to central finite differences.
    fn vjp(&self, x: &Vector, tau: usize, cot: &Vector) -> Result<Vector> {
        finite_difference_vjp(self, x, tau, cot, FD_STEP)
    }

    fn vjp_batch(&self, xs: &[Vector], tau: usize, cots: &[Vector]) -> Result<Vec<Vector>> {
        xs.iter().zip(cots).map(|(x, c)| self.vjp(x, tau, c)).collect()
    }
}

/// Central-difference vector-Jacobian product, `2·D` network calls.
pub fn finite_difference_vjp<M: Denoiser + ?Sized>(
    model: &M,
    x: &Vector,
    tau: usize,
    cot: &Vector,
    step: f64,
) -> Result<Vector> {
    crate::error::check_dim(model.dim(), cot.len())?;
    let mut out = Vector::zeros(x.len());
    let mut probe = x.clone();
    for j in 0..x.len() {
        probe[j] = x[j] + step;
        let hi = model.eps(&probe, tau)?;
        probe[j] = x[j] - step;
        let lo = model.eps(&probe, tau)?;
        probe[j] = x[j];
        out[j] = (hi - lo).dot(cot) / (2.0 * step);
    }
    Ok(out)
}
