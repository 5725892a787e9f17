//! Dense Gaussian and Gaussian-mixture primitives.
//!
//! Covariances are factored by Cholesky at construction; a failed
//! factorization is how a non-positive-definite matrix is rejected. Mixture
//! densities, responsibilities and scores are evaluated in log-space so that
//! they stay finite far away from every component.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::rng::{derive_seed, rng_from_seed, standard_normal};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

const SYMMETRY_TOL: f64 = 1e-10;

fn max_asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Symmetrize `cov` after checking it is symmetric up to a scale-aware tolerance.
pub(crate) fn symmetrized(cov: &Matrix) -> Result<Matrix> {
    if cov.nrows() != cov.ncols() {
        return Err(Error::DimensionMismatch { expected: cov.nrows(), got: cov.ncols() });
    }
    let scale = cov.amax().max(1.0);
    let asym = max_asymmetry(cov);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::AsymmetricCovariance(asym));
    }
    Ok((cov + cov.transpose()) * 0.5)
}

/// Lower Cholesky factor, or `SingularCovariance` when the matrix is not positive definite.
pub fn cholesky_lower(cov: &Matrix) -> Result<Matrix> {
    let chol = nalgebra::Cholesky::new(cov.clone()).ok_or(Error::SingularCovariance)?;
    let l = chol.l();
    if l.diagonal().iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::SingularCovariance);
    }
    Ok(l)
}

pub(crate) fn log_det_from_chol(l: &Matrix) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Numerically stable `log(sum(exp(v)))`; `-inf` entries are ignored.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Multivariate normal with a cached lower Cholesky factor.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "GaussianRecord", into = "GaussianRecord")]
pub struct Gaussian {
    mean: Vector,
    cov: Matrix,
    chol: Matrix,
    chol_inv: Matrix,
    chol_inv_t: Matrix,
    log_det: f64,
}

impl Gaussian {
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        let cov = symmetrized(&cov)?;
        let chol = cholesky_lower(&cov)?;
        let log_det = log_det_from_chol(&chol);
        let mut chol_inv = Matrix::identity(chol.nrows(), chol.nrows());
        chol.solve_lower_triangular_mut(&mut chol_inv);
        let chol_inv_t = chol_inv.transpose();
        Ok(Self { mean, cov, chol, chol_inv, chol_inv_t, log_det })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: Vector::zeros(dim),
            cov: Matrix::identity(dim, dim),
            chol: Matrix::identity(dim, dim),
            chol_inv: Matrix::identity(dim, dim),
            chol_inv_t: Matrix::identity(dim, dim),
            log_det: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    /// Lower-triangular `L` with `L Lᵀ = cov`.
    pub fn chol(&self) -> &Matrix {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `L⁻¹ v`.
    pub fn whiten(&self, v: &Vector) -> Vector {
        let mut out = v.clone();
        self.chol.solve_lower_triangular_mut(&mut out);
        out
    }

    /// `Σ⁻¹ v`.
    pub fn precision_mul(&self, v: &Vector) -> Vector {
        let mut out = v.clone();
        self.chol.solve_lower_triangular_mut(&mut out);
        self.chol.tr_solve_lower_triangular_mut(&mut out);
        out
    }

    pub fn log_pdf(&self, x: &Vector) -> f64 {
        let y = self.whiten(&(x - &self.mean));
        -0.5 * (y.norm_squared() + self.log_det + self.dim() as f64 * LN_2PI)
    }

    /// `μ + L z` for a whitened draw `z`.
    pub fn color(&self, z: &Vector) -> Vector {
        &self.mean + &self.chol * z
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        self.color(&standard_normal(rng, self.dim()))
    }
}

impl PartialEq for Gaussian {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

/// First two moments of a data distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct DataStats {
    pub mean: Vector,
    pub cov: Matrix,
}

impl DataStats {
    /// Validates symmetry and positive semi-definiteness (eigenvalues ≥ -1e-10·scale).
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        let cov = symmetrized(&cov)?;
        let scale = cov.amax().max(1.0);
        let eig = nalgebra::SymmetricEigen::new(cov.clone());
        if eig.eigenvalues.iter().any(|e| *e < -1e-10 * scale) {
            return Err(Error::InvalidMixture("covariance is not positive semi-definite".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Finite mixture of Gaussians sharing a dimension.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
struct GaussianRecord {
    mean: Vector,
    cov: Matrix,
}

impl From<Gaussian> for GaussianRecord {
    fn from(g: Gaussian) -> Self {
        GaussianRecord { mean: g.mean, cov: g.cov }
    }
}

impl TryFrom<GaussianRecord> for Gaussian {
    type Error = Error;

    fn try_from(r: GaussianRecord) -> Result<Self> {
        Gaussian::new(r.mean, r.cov)
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
struct MixtureRecord {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl From<GaussianMixture> for MixtureRecord {
    fn from(m: GaussianMixture) -> Self {
        MixtureRecord { weights: m.weights, components: m.components }
    }
}

impl TryFrom<MixtureRecord> for GaussianMixture {
    type Error = Error;

    fn try_from(r: MixtureRecord) -> Result<Self> {
        GaussianMixture::new(r.weights, r.components)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "MixtureRecord", into = "MixtureRecord")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidMixture("mixture has no components".into()));
        }
        if weights.len() != components.len() {
            return Err(Error::InvalidMixture(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMixture("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        let dim = components[0].dim();
        for c in &components {
            check_dim(dim, c.dim())?;
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { weights, log_weights, components })
    }

    /// Build a mixture from unnormalized nonnegative weights.
    pub fn from_unnormalized(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidMixture("weights sum to zero".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect(), components)
    }

    pub fn single(component: Gaussian) -> Self {
        Self { weights: vec![1.0], log_weights: vec![0.0], components: vec![component] }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    /// Per-component `log w_m + log N(x; μ_m, Σ_m)` and `Σ_m⁻¹(μ_m − x)`.
    fn component_terms(&self, x: &Vector) -> (Vec<f64>, Vec<Vector>) {
        let mut log_terms = Vec::with_capacity(self.len());
        let mut pulls = Vec::with_capacity(self.len());
        for (c, lw) in self.components.iter().zip(&self.log_weights) {
            let mut y = &c.mean - x;
            c.chol.solve_lower_triangular_mut(&mut y);
            log_terms.push(lw - 0.5 * (y.norm_squared() + c.log_det + c.dim() as f64 * LN_2PI));
            c.chol.tr_solve_lower_triangular_mut(&mut y);
            pulls.push(y);
        }
        (log_terms, pulls)
    }

    pub fn log_pdf(&self, x: &Vector) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_pdf(x))
            .collect();
        log_sum_exp(&terms)
    }

    fn normalize(log_terms: &[f64]) -> Vec<f64> {
        let lse = log_sum_exp(log_terms);
        log_terms.iter().map(|t| (t - lse).exp()).collect()
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &Vector) -> Vec<f64> {
        Self::normalize(&self.component_terms(x).0)
    }

    /// `∇ₓ log p(x)`.
    pub fn score(&self, x: &Vector) -> Vector {
        let (log_terms, pulls) = self.component_terms(x);
        let resp = Self::normalize(&log_terms);
        let mut s = Vector::zeros(self.dim());
        for (r, p) in resp.iter().zip(&pulls) {
            s.axpy(*r, p, 1.0);
        }
        s
    }

    /// Score at `x` together with the Hessian-vector product `∇² log p(x) · v`.
    pub fn score_and_hessian_vec(&self, x: &Vector, v: &Vector) -> (Vector, Vector) {
        let (log_terms, pulls) = self.component_terms(x);
        let resp = Self::normalize(&log_terms);
        let mut s = Vector::zeros(self.dim());
        let mut hv = Vector::zeros(self.dim());
        for ((r, p), c) in resp.iter().zip(&pulls).zip(&self.components) {
            if *r == 0.0 {
                continue;
            }
            s.axpy(*r, p, 1.0);
            let pv = c.precision_mul(v);
            hv.axpy(-*r, &pv, 1.0);
            hv.axpy(*r * p.dot(v), p, 1.0);
        }
        let sv = s.dot(v);
        hv.axpy(-sv, &s, 1.0);
        (s, hv)
    }

    /// Scores of many points, evaluated with dense products per component.
    /// Agrees with [`Self::score`] up to rounding.
    pub fn score_batch(&self, xs: &[Vector]) -> Vec<Vector> {
        let n = xs.len();
        if n == 0 {
            return Vec::new();
        }
        let d = self.dim();
        let x = Matrix::from_columns(xs);
        let mut log_terms = Matrix::zeros(self.len(), n);
        let mut whitened = Vec::with_capacity(self.len());
        for (m, (c, lw)) in self.components.iter().zip(&self.log_weights).enumerate() {
            let mut r = x.clone();
            for mut col in r.column_iter_mut() {
                col -= &c.mean;
            }
            let y = &c.chol_inv * r;
            let base = lw - 0.5 * (c.log_det + d as f64 * LN_2PI);
            for (j, col) in y.column_iter().enumerate() {
                log_terms[(m, j)] = base - 0.5 * col.norm_squared();
            }
            whitened.push(y);
        }
        for j in 0..n {
            let col: Vec<f64> = log_terms.column(j).iter().copied().collect();
            let lse = log_sum_exp(&col);
            for (m, t) in col.iter().enumerate() {
                log_terms[(m, j)] = (t - lse).exp();
            }
        }
        let mut acc = Matrix::zeros(d, n);
        for (m, (c, mut y)) in self.components.iter().zip(whitened).enumerate() {
            for (j, mut col) in y.column_iter_mut().enumerate() {
                col *= log_terms[(m, j)];
            }
            acc.gemm(-1.0, &c.chol_inv_t, &y, 1.0);
        }
        acc.column_iter().map(|c| c.into_owned()).collect()
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (m, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return m;
            }
        }
        // rounding left a sliver above the cumulative sum
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let m = self.sample_component(rng);
        self.components[m].sample(rng)
    }

    pub fn sample_n(&self, n: usize, seed: u64) -> Vec<Vector> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }

    pub fn moments(&self) -> DataStats {
        gmm_moments(self)
    }
}

/// Exact mean and covariance of a mixture.
pub fn gmm_moments(gmm: &GaussianMixture) -> DataStats {
    let d = gmm.dim();
    let mut mean = Vector::zeros(d);
    for (w, c) in gmm.weights.iter().zip(&gmm.components) {
        mean.axpy(*w, &c.mean, 1.0);
    }
    let mut cov = Matrix::zeros(d, d);
    for (w, c) in gmm.weights.iter().zip(&gmm.components) {
        let diff = &c.mean - &mean;
        cov += (&c.cov + &diff * diff.transpose()) * *w;
    }
    let cov = (&cov + cov.transpose()) * 0.5;
    DataStats { mean, cov }
}

/// Closed-form `KL(p ‖ q)` between two Gaussians.
pub fn kl_gaussian(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    check_dim(q.dim(), p.dim())?;
    let d = p.dim() as f64;
    let mut m = p.chol.clone();
    q.chol.solve_lower_triangular_mut(&mut m);
    let trace = m.norm_squared();
    let maha = q.whiten(&(&q.mean - &p.mean)).norm_squared();
    let kl = 0.5 * (trace + maha - d + q.log_det - p.log_det);
    Ok(kl.max(0.0))
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self { value: mean, std_error: (var / n as f64).sqrt(), n }
    }
}

const MC_BLOCK: usize = 1024;

/// Draw `n` samples from `gmm` in fixed blocks with derived seeds.
///
/// The result depends only on `(n, seed)`, never on the worker count.
pub fn sample_mixture_blocked(gmm: &GaussianMixture, n: usize, seed: u64) -> Vec<Vector> {
    let blocks = n.div_ceil(MC_BLOCK);
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let len = MC_BLOCK.min(n - b * MC_BLOCK);
            gmm.sample_n(len, derive_seed(seed, b as u64))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Monte Carlo `KL(p ‖ q)` for a mixture `p` and Gaussian `q`.
pub fn kl_gmm_vs_gaussian(p: &GaussianMixture, q: &Gaussian, n_draws: usize, seed: u64) -> Result<McEstimate> {
    check_dim(p.dim(), q.dim())?;
    if n_draws < 1000 {
        return Err(Error::InvalidConfig(format!("n_draws must be at least 1000, got {n_draws}")));
    }
    let draws = sample_mixture_blocked(p, n_draws, seed);
    let values: Vec<f64> = draws.par_iter().map(|x| p.log_pdf(x) - q.log_pdf(x)).collect();
    Ok(McEstimate::from_values(&values))
}

/// Random mixture with `m` full-covariance components, for tests and benchmarks.
///
/// Means are drawn from `N(0, spread² I)`; covariances are `AAᵀ/D + 0.1 I`
/// with standard-normal `A`; weights are uniform on `[0.2, 1]` then normalized.
pub fn random_mixture(dim: usize, m: usize, spread: f64, seed: u64) -> Result<GaussianMixture> {
    let mut rng = rng_from_seed(seed);
    let mut weights = Vec::with_capacity(m);
    let mut comps = Vec::with_capacity(m);
    for _ in 0..m {
        weights.push(rng.random_range(0.2..1.0));
        let mean = standard_normal(&mut rng, dim) * spread;
        let a = Matrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let cov = &a * a.transpose() / dim as f64 + Matrix::identity(dim, dim) * 0.1;
        comps.push(Gaussian::new(mean, cov)?);
    }
    GaussianMixture::from_unnormalized(weights, comps)
}

/// Sample mean and unbiased sample covariance.
pub fn sample_moments(samples: &[Vector]) -> Result<(Vector, Matrix)> {
    let first = samples.first().ok_or(Error::NoSamples)?;
    let d = first.len();
    let n = samples.len() as f64;
    let mut mean = Vector::zeros(d);
    for s in samples {
        check_dim(d, s.len())?;
        mean += s;
    }
    mean /= n;
    let mut cov = Matrix::zeros(d, d);
    for s in samples {
        let diff = s - &mean;
        cov.ger(1.0, &diff, &diff, 1.0);
    }
    if samples.len() > 1 {
        cov /= n - 1.0;
    }
    Ok((mean, cov))
}
