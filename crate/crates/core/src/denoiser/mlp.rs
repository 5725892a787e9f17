use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::Denoiser;
use crate::error::{check_dim, Error, Result};
use crate::rng::rng_from_seed;
use crate::stats::{Matrix, Vector};

/// Shape of the three-layer network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    pub dim: usize,
    pub hidden: usize,
    /// Width of the sinusoidal time embedding; must be even.
    pub time_emb: usize,
    /// Length of the flattened conditioning vector (0 for none).
    pub cond_dim: usize,
    /// Inputs are multiplied by this before the first layer.
    pub input_scale: f64,
}

impl MlpArch {
    pub fn new(dim: usize, hidden: usize) -> Self {
        Self { dim, hidden, time_emb: 16, cond_dim: 0, input_scale: 1.0 }
    }

    fn input_width(&self) -> usize {
        self.dim + self.time_emb + self.cond_dim
    }

    fn shapes(&self) -> [(usize, usize); 3] {
        [(self.hidden, self.input_width()), (self.hidden, self.hidden), (self.dim, self.hidden)]
    }

    pub fn n_params(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c + r).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("network widths must be positive".into()));
        }
        if !self.time_emb.is_multiple_of(2) {
            return Err(Error::InvalidConfig("time embedding width must be even".into()));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::InvalidConfig("input scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    w: Matrix,
    b: Vector,
}

/// Fully connected `ε`-predictor with tanh activations.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpDenoiser {
    arch: MlpArch,
    layers: Vec<Layer>,
    cond: Vector,
}

/// Activations kept for the backward pass, one column per batch element.
struct Tape {
    input: Matrix,
    h1: Matrix,
    h2: Matrix,
    out: Matrix,
}

fn time_embedding(width: usize, tau: usize) -> impl Iterator<Item = f64> {
    let half = width / 2;
    let freqs: Vec<f64> = (0..half).map(|k| (-(10_000f64).ln() * k as f64 / half as f64).exp()).collect();
    let t = tau as f64;
    let sines: Vec<f64> = freqs.iter().map(|f| (t * f).sin()).collect();
    let cosines: Vec<f64> = freqs.iter().map(|f| (t * f).cos()).collect();
    sines.into_iter().chain(cosines)
}

fn add_bias(m: &mut Matrix, b: &Vector) {
    for mut col in m.column_iter_mut() {
        col += b;
    }
}

fn tanh_backward(grad: &mut Matrix, act: &Matrix) {
    grad.zip_apply(act, |g, a| *g *= 1.0 - a * a);
}

impl MlpDenoiser {
    /// Network with all weights and biases zero.
    pub fn zeros(arch: MlpArch) -> Result<Self> {
        arch.validate()?;
        let layers = arch.shapes().iter().map(|(r, c)| Layer { w: Matrix::zeros(*r, *c), b: Vector::zeros(*r) }).collect();
        let cond = Vector::zeros(arch.cond_dim);
        Ok(Self { arch, layers, cond })
    }

    /// Uniform Glorot initialization, biases zero.
    pub fn new(arch: MlpArch, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let mut rng = rng_from_seed(seed);
        for layer in &mut net.layers {
            let (rows, cols) = layer.w.shape();
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            layer.w = Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng));
        }
        Ok(net)
    }

    pub fn with_condition(mut self, cond: Vec<f64>) -> Result<Self> {
        check_dim(self.arch.cond_dim, cond.len())?;
        self.cond = Vector::from_vec(cond);
        Ok(self)
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn condition(&self) -> &[f64] {
        self.cond.as_slice()
    }

    pub fn n_params(&self) -> usize {
        self.arch.n_params()
    }

    /// Flat parameters: `W1, b1, W2, b2, W3, b3`, matrices column-major.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.n_params(), flat.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn inputs(&self, xs: &[Vector], taus: &[usize]) -> Result<Matrix> {
        let a = &self.arch;
        let mut input = Matrix::zeros(a.input_width(), xs.len());
        for (j, (x, tau)) in xs.iter().zip(taus).enumerate() {
            check_dim(a.dim, x.len())?;
            let mut col = input.column_mut(j);
            for (k, v) in x.iter().enumerate() {
                col[k] = v * a.input_scale;
            }
            for (k, v) in time_embedding(a.time_emb, *tau).enumerate() {
                col[a.dim + k] = v;
            }
            for (k, v) in self.cond.iter().enumerate() {
                col[a.dim + a.time_emb + k] = *v;
            }
        }
        Ok(input)
    }

    fn forward(&self, xs: &[Vector], taus: &[usize]) -> Result<Tape> {
        let input = self.inputs(xs, taus)?;
        let [l1, l2, l3] = &self.layers[..] else { unreachable!("three layers") };
        let mut h1 = &l1.w * &input;
        add_bias(&mut h1, &l1.b);
        h1.apply(|v| *v = v.tanh());
        let mut h2 = &l2.w * &h1;
        add_bias(&mut h2, &l2.b);
        h2.apply(|v| *v = v.tanh());
        let mut out = &l3.w * &h2;
        add_bias(&mut out, &l3.b);
        Ok(Tape { input, h1, h2, out })
    }

    /// Backpropagates `d_out`, returning the gradient w.r.t. the raw inputs
    /// (first `dim` rows, unscaled) and optionally the parameter gradient.
    fn backward(&self, tape: &Tape, d_out: &Matrix, want_params: bool) -> (Matrix, Option<Vec<f64>>) {
        let [l1, l2, l3] = &self.layers[..] else { unreachable!("three layers") };
        let mut grads = Vec::new();
        if want_params {
            grads.push((d_out * tape.h2.transpose(), d_out.column_sum()));
        }
        let mut d_h2 = l3.w.tr_mul(d_out);
        tanh_backward(&mut d_h2, &tape.h2);
        if want_params {
            grads.push((&d_h2 * tape.h1.transpose(), d_h2.column_sum()));
        }
        let mut d_h1 = l2.w.tr_mul(&d_h2);
        tanh_backward(&mut d_h1, &tape.h1);
        if want_params {
            grads.push((&d_h1 * tape.input.transpose(), d_h1.column_sum()));
        }
        let d_in = l1.w.tr_mul(&d_h1).rows(0, self.arch.dim) * self.arch.input_scale;
        let flat = want_params.then(|| {
            let mut flat = Vec::with_capacity(self.n_params());
            for (w, b) in grads.iter().rev() {
                flat.extend_from_slice(w.as_slice());
                flat.extend_from_slice(b.as_slice());
            }
            flat
        });
        (d_in, flat)
    }

    /// Mean over the batch of `‖ε_θ(x, τ) − target‖²` and its parameter gradient.
    pub fn loss_and_grad(&self, xs: &[Vector], taus: &[usize], targets: &[Vector]) -> Result<(f64, Vec<f64>)> {
        if xs.is_empty() {
            return Err(Error::NoSamples);
        }
        let tape = self.forward(xs, taus)?;
        let b = xs.len() as f64;
        let mut d_out = tape.out.clone();
        for (j, t) in targets.iter().enumerate() {
            check_dim(self.arch.dim, t.len())?;
            let mut col = d_out.column_mut(j);
            col -= t;
        }
        let loss = d_out.norm_squared() / b;
        d_out *= 2.0 / b;
        let (_, grad) = self.backward(&tape, &d_out, true);
        Ok((loss, grad.expect("requested")))
    }

    pub fn loss(&self, xs: &[Vector], taus: &[usize], targets: &[Vector]) -> Result<f64> {
        let tape = self.forward(xs, taus)?;
        let mut total = 0.0;
        for (j, t) in targets.iter().enumerate() {
            total += (tape.out.column(j) - t).norm_squared();
        }
        Ok(total / xs.len() as f64)
    }

    fn columns(m: &Matrix) -> Vec<Vector> {
        m.column_iter().map(|c| c.into_owned()).collect()
    }
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn eps(&self, x: &Vector, tau: usize) -> Result<Vector> {
        let tape = self.forward(std::slice::from_ref(x), &[tau])?;
        Ok(tape.out.column(0).into_owned())
    }

    fn eps_batch(&self, xs: &[Vector], tau: usize) -> Result<Vec<Vector>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let tape = self.forward(xs, &vec![tau; xs.len()])?;
        Ok(Self::columns(&tape.out))
    }

    fn vjp(&self, x: &Vector, tau: usize, cot: &Vector) -> Result<Vector> {
        Ok(self.vjp_batch(std::slice::from_ref(x), tau, std::slice::from_ref(cot))?.remove(0))
    }

    fn vjp_batch(&self, xs: &[Vector], tau: usize, cots: &[Vector]) -> Result<Vec<Vector>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let tape = self.forward(xs, &vec![tau; xs.len()])?;
        let mut d_out = Matrix::zeros(self.arch.dim, xs.len());
        for (j, c) in cots.iter().enumerate() {
            check_dim(self.arch.dim, c.len())?;
            d_out.set_column(j, c);
        }
        let (d_in, _) = self.backward(&tape, &d_out, false);
        Ok(Self::columns(&d_in))
    }
}

/// Serializable snapshot of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub arch: MlpArch,
    pub params: Vec<f64>,
    pub cond: Vec<f64>,
}

impl From<&MlpDenoiser> for MlpCheckpoint {
    fn from(net: &MlpDenoiser) -> Self {
        Self { arch: net.arch.clone(), params: net.params(), cond: net.cond.as_slice().to_vec() }
    }
}

impl TryFrom<MlpCheckpoint> for MlpDenoiser {
    type Error = Error;

    fn try_from(ck: MlpCheckpoint) -> Result<Self> {
        let mut net = MlpDenoiser::zeros(ck.arch)?.with_condition(ck.cond)?;
        net.set_params(&ck.params)?;
        Ok(net)
    }
}

/// Random parameter perturbation used by gradient checks.
#[cfg(test)]
pub(crate) fn jitter_params<R: rand::Rng>(net: &mut MlpDenoiser, scale: f64, rng: &mut R) {
    let p: Vec<f64> = net.params().iter().map(|v| v + scale * (rng.random::<f64>() - 0.5)).collect();
    net.set_params(&p).expect("same length");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::finite_difference_vjp;
    use crate::rng::standard_normal;

    fn small_arch() -> MlpArch {
        MlpArch { dim: 4, hidden: 8, time_emb: 6, cond_dim: 3, input_scale: 0.7 }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = MlpDenoiser::zeros(small_arch()).unwrap();
        let e = net.eps(&Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]), 7).unwrap();
        assert_eq!(e, Vector::zeros(4));
    }

    #[test]
    fn params_round_trip() {
        let net = MlpDenoiser::new(small_arch(), 3).unwrap().with_condition(vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(net.params().len(), net.n_params());
        let back = MlpDenoiser::try_from(MlpCheckpoint::from(&net)).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn batch_matches_single() {
        let net = MlpDenoiser::new(small_arch(), 5).unwrap();
        let mut rng = rng_from_seed(1);
        let xs: Vec<Vector> = (0..5).map(|_| standard_normal(&mut rng, 4)).collect();
        let batch = net.eps_batch(&xs, 12).unwrap();
        for (x, b) in xs.iter().zip(&batch) {
            assert!((net.eps(x, 12).unwrap() - b).amax() < 1e-14);
        }
    }

    #[test]
    fn input_vjp_matches_finite_differences() {
        let net = MlpDenoiser::new(small_arch(), 9).unwrap().with_condition(vec![0.5, -0.5, 1.0]).unwrap();
        let mut rng = rng_from_seed(2);
        for tau in [1, 30, 99] {
            let x = standard_normal(&mut rng, 4);
            let cot = standard_normal(&mut rng, 4);
            let an = net.vjp(&x, tau, &cot).unwrap();
            let fd = finite_difference_vjp(&net, &x, tau, &cot, 1e-5).unwrap();
            assert!((&an - &fd).norm() <= 1e-4 * an.norm(), "{an} {fd}");
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let mut net = MlpDenoiser::new(small_arch(), 4).unwrap().with_condition(vec![0.3, 0.0, -0.2]).unwrap();
        let mut rng = rng_from_seed(8);
        jitter_params(&mut net, 0.2, &mut rng);
        let xs: Vec<Vector> = (0..6).map(|_| standard_normal(&mut rng, 4)).collect();
        let ts: Vec<Vector> = (0..6).map(|_| standard_normal(&mut rng, 4)).collect();
        let taus = [1, 5, 20, 50, 80, 100];
        let (_, grad) = net.loss_and_grad(&xs, &taus, &ts).unwrap();
        let base = net.params();
        let h = 1e-5;
        let mut fd = vec![0.0; base.len()];
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += h;
            net.set_params(&p).unwrap();
            let hi = net.loss(&xs, &taus, &ts).unwrap();
            p[k] -= 2.0 * h;
            net.set_params(&p).unwrap();
            let lo = net.loss(&xs, &taus, &ts).unwrap();
            fd[k] = (hi - lo) / (2.0 * h);
        }
        let g = Vector::from_vec(grad);
        let f = Vector::from_vec(fd);
        assert!((&g - &f).norm() <= 1e-4 * g.norm(), "{}", (&g - &f).norm() / g.norm());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(MlpDenoiser::zeros(MlpArch { time_emb: 3, ..small_arch() }).is_err());
        assert!(MlpDenoiser::zeros(small_arch()).unwrap().with_condition(vec![1.0]).is_err());
        let net = MlpDenoiser::zeros(small_arch()).unwrap();
        assert!(net.eps(&Vector::zeros(3), 1).is_err());
    }
}
