//! Linear latent map trained to be distance preserving with equalized
//! per-dimension latent spread.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::rng_from_seed;
use crate::scenario::JointGmm;
use crate::stats::{Gaussian, GaussianMixture, Matrix, Vector};

/// Encoder `z = xU` and decoder `x = zV` on row vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    /// `X × Z`.
    pub u: Matrix,
    /// `Z × X`.
    pub v: Matrix,
    /// Target latent standard deviation, in data units.
    pub eta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub reg: f64,
    pub var: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rec: 1.0, reg: 1.0, var: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub weights: LossWeights,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(latent_dim: usize, seed: u64) -> Self {
        TrainConfig { latent_dim, weights: LossWeights::default(), steps: 4000, lr: 0.01, seed }
    }
}

/// Per-step loss values, in normalized units.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub rec: Vec<f64>,
    pub reg: Vec<f64>,
    pub var: Vec<f64>,
    pub total: Vec<f64>,
}

/// Individual loss terms on a batch of row vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub rec: f64,
    pub reg: f64,
    pub var: f64,
}

impl Losses {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.rec * self.rec + w.reg * self.reg + w.var * self.var
    }
}

struct Grads {
    u: Matrix,
    v: Matrix,
    eta: f64,
}

fn column_std(z: &Matrix) -> (Vector, Vector) {
    let n = z.nrows() as f64;
    let mean = Vector::from_iterator(z.ncols(), z.column_iter().map(|c| c.sum() / n));
    let std = Vector::from_iterator(
        z.ncols(),
        z.column_iter().zip(mean.iter()).map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()),
    );
    (mean, std)
}

fn losses_and_grads(data: &Matrix, u: &Matrix, v: &Matrix, eta: f64, w: &LossWeights) -> (Losses, Grads) {
    let n = data.nrows() as f64;
    let z = data * u;
    let resid = &z * v - data;
    let rec = resid.norm_squared() / n;
    let mut dz = &resid * v.transpose() * (2.0 * w.rec / n);
    let gv = z.transpose() * &resid * (2.0 * w.rec / n);

    let mut reg = 0.0;
    for r in 0..data.nrows() {
        let gap = data.row(r).norm_squared() - z.row(r).norm_squared();
        reg += gap * gap / n;
        let scale = -4.0 * w.reg * gap / n;
        for c in 0..z.ncols() {
            dz[(r, c)] += scale * z[(r, c)];
        }
    }

    let (mean, std) = column_std(&z);
    let mut var = 0.0;
    let mut geta = 0.0;
    for c in 0..z.ncols() {
        let d = std[c] - eta;
        var += d * d;
        geta -= 2.0 * w.var * d;
        if std[c] > 0.0 {
            let coef = 2.0 * w.var * d / (n * std[c]);
            for r in 0..z.nrows() {
                dz[(r, c)] += coef * (z[(r, c)] - mean[c]);
            }
        }
    }
    let gu = data.transpose() * dz;
    (Losses { rec, reg, var }, Grads { u: gu, v: gv, eta: geta })
}

fn rows_to_matrix(rows: &[Vector]) -> Result<Matrix> {
    let first = rows.first().ok_or(Error::NoSamples)?;
    let x = first.len();
    for r in rows {
        check_dim(x, r.len())?;
    }
    Ok(Matrix::from_fn(rows.len(), x, |i, j| rows[i][j]))
}

fn random_orthonormal(x: usize, z: usize, seed: u64) -> Matrix {
    let mut rng = rng_from_seed(seed);
    let g = Matrix::from_fn(x, z, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
    g.qr().q().columns(0, z).into_owned()
}

struct Adam {
    m: Vec<f64>,
    s: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], s: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((p, g), (m, s)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.s.iter_mut())) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *s = Self::B2 * *s + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*s / c2).sqrt() + 1e-12);
        }
    }
}

/// Fits the map on row-vector trajectories by Adam on the weighted loss.
///
/// Data are divided by their RMS norm before training; since the map is
/// linear only `η` needs rescaling afterwards. The learning rate follows a
/// cosine decay to 1% of its initial value.
pub fn train_linear_map(trajectories: &[Vector], cfg: &TrainConfig) -> Result<(LinearMap, LossCurves)> {
    let raw = rows_to_matrix(trajectories)?;
    let (n, x) = raw.shape();
    let z = cfg.latent_dim;
    if z == 0 || z >= x {
        return Err(Error::InvalidConfig(format!("latent width {z} must be in 1..{x}")));
    }
    if n < 10 * x {
        return Err(Error::InvalidConfig(format!("need at least {} trajectories, got {n}", 10 * x)));
    }
    if cfg.steps == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("training needs positive steps and learning rate".into()));
    }
    let scale = (raw.norm_squared() / n as f64).sqrt();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidConfig("trajectories must be finite and nonzero".into()));
    }
    let data = raw / scale;

    let mut u = random_orthonormal(x, z, cfg.seed);
    let mut v = u.transpose();
    let mut eta = 1.0;
    let mut adam = Adam::new(2 * x * z + 1);
    let mut params = vec![0.0; 2 * x * z + 1];
    let mut grads = vec![0.0; 2 * x * z + 1];
    let mut curves = LossCurves::default();
    for step in 0..cfg.steps {
        let (l, g) = losses_and_grads(&data, &u, &v, eta, &cfg.weights);
        let total = l.weighted(&cfg.weights);
        if !total.is_finite() {
            return Err(Error::TrainingDiverged(step));
        }
        curves.rec.push(l.rec);
        curves.reg.push(l.reg);
        curves.var.push(l.var);
        curves.total.push(total);

        params[..x * z].copy_from_slice(u.as_slice());
        params[x * z..2 * x * z].copy_from_slice(v.as_slice());
        params[2 * x * z] = eta;
        grads[..x * z].copy_from_slice(g.u.as_slice());
        grads[x * z..2 * x * z].copy_from_slice(g.v.as_slice());
        grads[2 * x * z] = g.eta;

        let progress = step as f64 / cfg.steps as f64;
        let lr = cfg.lr * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        adam.step(&mut params, &grads, lr);
        u.as_mut_slice().copy_from_slice(&params[..x * z]);
        v.as_mut_slice().copy_from_slice(&params[x * z..2 * x * z]);
        eta = params[2 * x * z];
    }
    if !(u.iter().chain(v.iter()).all(|p| p.is_finite()) && eta.is_finite()) {
        return Err(Error::TrainingDiverged(cfg.steps));
    }
    Ok((LinearMap { u, v, eta: eta * scale }, curves))
}

impl LinearMap {
    /// Identity map of width `dim`.
    pub fn identity(dim: usize) -> Self {
        LinearMap { u: Matrix::identity(dim, dim), v: Matrix::identity(dim, dim), eta: 1.0 }
    }

    pub fn input_dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn encode(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.input_dim(), x.len())?;
        Ok(self.u.tr_mul(x))
    }

    pub fn decode(&self, z: &Vector) -> Result<Vector> {
        check_dim(self.latent_dim(), z.len())?;
        Ok(self.v.tr_mul(z))
    }

    /// Loss terms of this map on raw trajectories.
    pub fn losses(&self, trajectories: &[Vector]) -> Result<Losses> {
        let data = rows_to_matrix(trajectories)?;
        check_dim(self.input_dim(), data.ncols())?;
        Ok(losses_and_grads(&data, &self.u, &self.v, self.eta, &LossWeights::default()).0)
    }

    /// Applies the encoder to every agent block of a joint vector.
    pub fn encode_joint(&self, x: &Vector) -> Result<Vector> {
        let n = self.blocks(x.len(), self.input_dim())?;
        let mut out = Vector::zeros(n * self.latent_dim());
        for i in 0..n {
            let z = self.u.tr_mul(&x.rows(i * self.input_dim(), self.input_dim()).into_owned());
            out.rows_mut(i * self.latent_dim(), self.latent_dim()).copy_from(&z);
        }
        Ok(out)
    }

    /// Applies the decoder to every agent block of a joint latent vector.
    pub fn decode_joint(&self, z: &Vector) -> Result<Vector> {
        let n = self.blocks(z.len(), self.latent_dim())?;
        let mut out = Vector::zeros(n * self.input_dim());
        for i in 0..n {
            let x = self.v.tr_mul(&z.rows(i * self.latent_dim(), self.latent_dim()).into_owned());
            out.rows_mut(i * self.input_dim(), self.input_dim()).copy_from(&x);
        }
        Ok(out)
    }

    fn blocks(&self, len: usize, width: usize) -> Result<usize> {
        if width == 0 || !len.is_multiple_of(width) || len == 0 {
            return Err(Error::DimensionMismatch { expected: width, got: len });
        }
        Ok(len / width)
    }

    /// Block-diagonal encoder for `n` agents, `nX × nZ`.
    pub fn joint_encoder(&self, n: usize) -> Matrix {
        let (x, z) = self.u.shape();
        let mut out = Matrix::zeros(n * x, n * z);
        for i in 0..n {
            out.view_mut((i * x, i * z), (x, z)).copy_from(&self.u);
        }
        out
    }
}

/// Image of a mixture under the block-diagonal encoder.
pub fn pushforward_mixture(map: &LinearMap, gmm: &GaussianMixture) -> Result<GaussianMixture> {
    let n = map.blocks(gmm.dim(), map.input_dim())?;
    let u = map.joint_encoder(n);
    let comps = gmm
        .components()
        .iter()
        .map(|c| Gaussian::new(u.tr_mul(c.mean()), u.transpose() * c.cov() * &u))
        .collect::<Result<Vec<_>>>()?;
    GaussianMixture::new(gmm.weights().to_vec(), comps)
}

pub fn pushforward_gmm(map: &LinearMap, joint: &JointGmm) -> Result<GaussianMixture> {
    pushforward_mixture(map, &joint.mixture)
}

/// Splits joint vectors into per-agent rows of width `x`.
pub fn agent_rows(joint_samples: &[Vector], x: usize) -> Vec<Vector> {
    joint_samples
        .iter()
        .flat_map(|s| (0..s.len() / x).map(move |i| s.rows(i * x, x).into_owned()))
        .collect()
}
