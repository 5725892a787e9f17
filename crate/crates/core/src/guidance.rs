//! Goal-point guidance and the four guided samplers.
//!
//! NNM and SF nudge an ordinary DDIM chain. ECM and ECMR instead iterate
//! inject-noise → denoise → gradient step on the clean estimate, with ECMR
//! first swapping each agent for its lowest-cost reference trajectory.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{check_dim, Error, Result};
use crate::rng::{rng_from_seed, standard_normal, SeededRng};
use crate::sampler::{ddim_update, sample_streams, tweedie, PriorKind};
use crate::scenario::{agent_positions, JointGmm, MarginalSampleSet};
use crate::schedule::{DiffusionSchedule, PerturbationKernel};
use crate::stats::{Gaussian, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteSetKind {
    /// Fresh ground-truth joint draws.
    Gt,
    /// Uniform per-agent picks from the marginal predictions.
    U,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpeedSetting {
    /// Reach the route end at the horizon.
    N,
    /// Reach the route end two steps early.
    A,
    /// Reach the point two steps before the route end at the horizon.
    D,
}

impl SpeedSetting {
    /// `(τ_d, τ_g)` for horizon `h`, both 1-based step indices.
    pub fn indices(self, h: usize) -> (usize, usize) {
        match self {
            SpeedSetting::N => (h, h),
            SpeedSetting::A => (h - 2, h),
            SpeedSetting::D => (h, h - 2),
        }
    }
}

/// Per-agent target routes with the trajectory and route time indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteTask {
    pub kind: RouteSetKind,
    pub speed: SpeedSetting,
    pub horizon: usize,
    pub tau_d: usize,
    pub tau_g: usize,
    pub routes: Vec<Vec<[f64; 2]>>,
}

impl RouteTask {
    pub fn new(routes: Vec<Vec<[f64; 2]>>, horizon: usize, kind: RouteSetKind, speed: SpeedSetting) -> Result<Self> {
        if horizon < 3 {
            return Err(Error::InvalidConfig("route tasks need a horizon of at least 3".into()));
        }
        if routes.is_empty() || routes.iter().any(|r| r.len() != horizon) {
            return Err(Error::InvalidConfig("every agent needs a route with one point per step".into()));
        }
        let (tau_d, tau_g) = speed.indices(horizon);
        Ok(Self { kind, speed, horizon, tau_d, tau_g, routes })
    }

    pub fn n_agents(&self) -> usize {
        self.routes.len()
    }

    pub fn goal(&self, agent: usize) -> [f64; 2] {
        self.routes[agent][self.tau_g - 1]
    }

    fn pos_index(&self, agent: usize) -> usize {
        agent * 2 * self.horizon + 2 * (self.tau_d - 1)
    }
}

/// Builds a task on `joint`: GT routes are a fresh joint draw, U routes are
/// uniform per-agent picks among the marginal predictions.
pub fn make_task(
    joint: &JointGmm,
    marginals: &MarginalSampleSet,
    kind: RouteSetKind,
    speed: SpeedSetting,
    seed: u64,
) -> Result<RouteTask> {
    let h = joint.spec.horizon;
    let n = joint.n_agents();
    check_dim(n, marginals.n_agents())?;
    let mut rng = rng_from_seed(seed);
    let routes = match kind {
        RouteSetKind::Gt => {
            let x = joint.mixture.sample(&mut rng);
            (0..n).map(|i| agent_positions(&x, i, h)).collect()
        }
        RouteSetKind::U => marginals
            .entries
            .iter()
            .map(|e| {
                let l = rng.random_range(0..e.samples.len());
                agent_positions(&e.samples[l], 0, h)
            })
            .collect(),
    };
    RouteTask::new(routes, h, kind, speed)
}

/// A differentiable cost on clean joint trajectories.
pub trait GuidanceCost: Sync {
    fn dim(&self) -> usize;

    fn cost(&self, x: &Vector) -> f64;

    fn grad(&self, x: &Vector) -> Vector;

    /// Contribution of one agent's slice when the cost is a sum over agents.
    fn agent_cost(&self, _agent: usize, _slice: &[f64]) -> Option<f64> {
        None
    }
}

impl GuidanceCost for RouteTask {
    fn dim(&self) -> usize {
        self.n_agents() * 2 * self.horizon
    }

    fn cost(&self, x: &Vector) -> f64 {
        goal_cost(x, self)
    }

    fn grad(&self, x: &Vector) -> Vector {
        goal_cost_grad(x, self)
    }

    fn agent_cost(&self, agent: usize, slice: &[f64]) -> Option<f64> {
        let k = 2 * (self.tau_d - 1);
        let g = self.goal(agent);
        Some(((slice[k] - g[0]).powi(2) + (slice[k + 1] - g[1]).powi(2)) / self.n_agents() as f64)
    }
}

/// `(1/n) Σᵢ ‖posᵢ(τ_d) − routeᵢ(τ_g)‖²`.
pub fn goal_cost(x: &Vector, task: &RouteTask) -> f64 {
    let n = task.n_agents();
    (0..n)
        .map(|i| {
            let k = task.pos_index(i);
            let g = task.goal(i);
            (x[k] - g[0]).powi(2) + (x[k + 1] - g[1]).powi(2)
        })
        .sum::<f64>()
        / n as f64
}

pub fn goal_cost_grad(x: &Vector, task: &RouteTask) -> Vector {
    let n = task.n_agents();
    let mut g = Vector::zeros(x.len());
    for i in 0..n {
        let k = task.pos_index(i);
        let goal = task.goal(i);
        g[k] = 2.0 * (x[k] - goal[0]) / n as f64;
        g[k + 1] = 2.0 * (x[k + 1] - goal[1]) / n as f64;
    }
    g
}

/// Elementwise clamp of `v` to `[-bound, bound]`.
pub fn clip_elementwise(v: &Vector, bound: &Vector) -> Vector {
    v.zip_map(bound, |a, b| a.clamp(-b, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuidanceMethod {
    None,
    Nnm,
    Sf,
    Ecm,
    Ecmr,
}

impl GuidanceMethod {
    pub fn name(self) -> &'static str {
        match self {
            GuidanceMethod::None => "none",
            GuidanceMethod::Nnm => "nnm",
            GuidanceMethod::Sf => "sf",
            GuidanceMethod::Ecm => "ecm",
            GuidanceMethod::Ecmr => "ecmr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseMode {
    /// Re-inject the previous network output.
    Deterministic,
    /// Draw fresh noise at every injection.
    Stochastic,
}

/// Default cap on exhaustive reference-swap enumeration.
pub const DEFAULT_SWAP_CAP: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub method: GuidanceMethod,
    pub zeta: f64,
    pub start_t: usize,
    /// Spacing of network-step times; the loop visits `start_t, …, stride`.
    pub stride: usize,
    pub noise_mode: NoiseMode,
    pub clip_enabled: bool,
    /// Start ECM/ECMR from `x₀ ~ N(0, Σ_p)` and inject fresh noise, instead
    /// of using the prior draw as the first noisy state.
    pub literal_init: bool,
    pub swap_cap: usize,
}

impl GuidanceConfig {
    pub fn new(method: GuidanceMethod, zeta: f64, start_t: usize, stride: usize) -> Self {
        let clip_enabled = matches!(method, GuidanceMethod::Nnm | GuidanceMethod::Sf);
        Self {
            method,
            zeta,
            start_t,
            stride,
            noise_mode: NoiseMode::Deterministic,
            clip_enabled,
            literal_init: false,
            swap_cap: DEFAULT_SWAP_CAP,
        }
    }

    /// Network-step times, `start_t` down to `stride`.
    pub fn times(&self, sched: &DiffusionSchedule) -> Result<Vec<usize>> {
        sched.check_time(self.start_t)?;
        if self.stride == 0 || self.start_t == 0 || !self.start_t.is_multiple_of(self.stride) {
            return Err(Error::InvalidConfig(format!(
                "start time {} must be a positive multiple of stride {}",
                self.start_t, self.stride
            )));
        }
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(Error::InvalidConfig("step size must be finite and non-negative".into()));
        }
        Ok((1..=self.start_t / self.stride).rev().map(|k| k * self.stride).collect())
    }
}

/// Per-agent options `𝓡ᵢ ∪ {x̂₀,ᵢ}`, the current estimate first.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub options: Vec<Vec<Vector>>,
}

impl CandidateSet {
    pub fn new(references: &MarginalSampleSet, x_hat: &Vector) -> Result<Self> {
        let n = references.n_agents();
        if n == 0 || !x_hat.len().is_multiple_of(n) {
            return Err(Error::DimensionMismatch { expected: n, got: x_hat.len() });
        }
        let xdim = x_hat.len() / n;
        let options = references
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let mut opts = vec![x_hat.rows(i * xdim, xdim).into_owned()];
                for r in &e.samples {
                    check_dim(xdim, r.len())?;
                    opts.push(r.clone());
                }
                Ok(opts)
            })
            .collect::<Result<_>>()?;
        Ok(Self { options })
    }

    pub fn product_size(&self) -> Option<usize> {
        self.options.iter().try_fold(1usize, |acc, o| acc.checked_mul(o.len()))
    }

    fn assemble(&self, choice: &[usize]) -> Vector {
        let parts: Vec<f64> = choice.iter().enumerate().flat_map(|(i, c)| self.options[i][*c].iter().copied()).collect();
        Vector::from_vec(parts)
    }
}

/// Lowest-cost element of the candidate product set.
///
/// Uses a per-agent argmin when the cost is separable and exhaustive
/// enumeration (bounded by `cap`) otherwise. Ties keep the current estimate.
pub fn ecmr_reference_swap<C: GuidanceCost + ?Sized>(cands: &CandidateSet, cost: &C, cap: usize) -> Result<Vector> {
    let separable: Option<Vec<usize>> = cands
        .options
        .iter()
        .enumerate()
        .map(|(i, opts)| {
            let mut best: Option<(usize, f64)> = None;
            for (l, o) in opts.iter().enumerate() {
                let c = cost.agent_cost(i, o.as_slice())?;
                if best.is_none_or(|(_, b)| c < b) {
                    best = Some((l, c));
                }
            }
            best.map(|(l, _)| l)
        })
        .collect();
    match separable {
        Some(choice) => Ok(cands.assemble(&choice)),
        None => ecmr_reference_swap_exhaustive(cands, cost, cap),
    }
}

/// Brute-force search over every combination, in odometer order.
pub fn ecmr_reference_swap_exhaustive<C: GuidanceCost + ?Sized>(
    cands: &CandidateSet,
    cost: &C,
    cap: usize,
) -> Result<Vector> {
    let count = cands.product_size().unwrap_or(usize::MAX);
    if count > cap {
        return Err(Error::CandidateExplosion { count, cap });
    }
    let n = cands.options.len();
    let mut choice = vec![0usize; n];
    let mut best = (cost.cost(&cands.assemble(&choice)), choice.clone());
    for _ in 1..count {
        for i in 0..n {
            choice[i] += 1;
            if choice[i] < cands.options[i].len() {
                break;
            }
            choice[i] = 0;
        }
        let c = cost.cost(&cands.assemble(&choice));
        if c < best.0 {
            best = (c, choice.clone());
        }
    }
    Ok(cands.assemble(&best.1))
}

/// NNM on a DDIM step: the unguided next mean minus the clipped cost gradient.
/// Returns the guided state and the applied increment.
#[allow(clippy::too_many_arguments)]
pub fn nnm_update<C: GuidanceCost + ?Sized>(
    x: &Vector,
    eps: &Vector,
    tau: usize,
    tau_prev: usize,
    sched: &DiffusionSchedule,
    kernel: &PerturbationKernel,
    cfg: &GuidanceConfig,
    cost: &C,
) -> Result<(Vector, Vector)> {
    let m = ddim_update(x, eps, tau, tau_prev, sched)?;
    let raw = cost.grad(&m) * cfg.zeta;
    let step = if cfg.clip_enabled {
        let ratio = sched.alpha_bar(tau) / sched.alpha_bar(tau_prev);
        clip_elementwise(&raw, &(kernel.marginal_std() * (1.0 - ratio).sqrt()))
    } else {
        raw
    };
    Ok((m - &step, -step))
}

#[allow(clippy::too_many_arguments)]
pub fn nnm_guided_step<D: Denoiser + ?Sized, C: GuidanceCost + ?Sized>(
    x: &Vector,
    tau: usize,
    tau_prev: usize,
    model: &D,
    sched: &DiffusionSchedule,
    kernel: &PerturbationKernel,
    cfg: &GuidanceConfig,
    cost: &C,
) -> Result<Vector> {
    let eps = model.eps(x, tau)?;
    Ok(nnm_update(x, &eps, tau, tau_prev, sched, kernel, cfg, cost)?.0)
}

/// `∇ₓ J(x̂₀(x))` from the network's vector-Jacobian product `vjp = (∂ε/∂x)ᵀ g`.
pub fn sf_state_gradient(g: &Vector, vjp: &Vector, tau: usize, sched: &DiffusionSchedule) -> Vector {
    let ab = sched.alpha_bar(tau);
    (g - vjp * (1.0 - ab).sqrt()) / ab.sqrt()
}

/// Score-function guidance: biases the score by `−ζ ∇ₓJ`, i.e. shifts `ε` by
/// the clipped, `√(1−ᾱ)`-scaled state gradient so the implied clean estimate
/// moves downhill on the cost.
pub fn sf_biased_eps(
    eps: &Vector,
    grad_x: &Vector,
    tau: usize,
    sched: &DiffusionSchedule,
    kernel: &PerturbationKernel,
    cfg: &GuidanceConfig,
) -> Vector {
    let raw = grad_x * (cfg.zeta * (1.0 - sched.alpha_bar(tau)).sqrt());
    let step = if cfg.clip_enabled { clip_elementwise(&raw, kernel.marginal_std()) } else { raw };
    eps + step
}

#[allow(clippy::too_many_arguments)]
pub fn sf_guided_step<D: Denoiser + ?Sized, C: GuidanceCost + ?Sized>(
    x: &Vector,
    tau: usize,
    tau_prev: usize,
    model: &D,
    sched: &DiffusionSchedule,
    kernel: &PerturbationKernel,
    cfg: &GuidanceConfig,
    cost: &C,
) -> Result<Vector> {
    let eps = model.eps(x, tau)?;
    let g = cost.grad(&tweedie(x, &eps, tau, sched));
    let vjp = model.vjp(x, tau, &g)?;
    let grad_x = sf_state_gradient(&g, &vjp, tau, sched);
    ddim_update(x, &sf_biased_eps(&eps, &grad_x, tau, sched, kernel, cfg), tau, tau_prev, sched)
}

fn ecm_gradient_step<C: GuidanceCost + ?Sized>(
    x_hat: &Vector,
    cost: &C,
    cfg: &GuidanceConfig,
    kernel: &PerturbationKernel,
) -> Vector {
    let raw = cost.grad(x_hat) * cfg.zeta;
    let step = if cfg.clip_enabled { clip_elementwise(&raw, kernel.marginal_std()) } else { raw };
    x_hat - step
}

/// One sample's ECM/ECMR loop starting from the noisy state `x_start` at
/// `cfg.start_t` (or from a clean `x_start` when `literal_init` is set).
#[allow(clippy::too_many_arguments)]
pub fn ecm_iterate<D: Denoiser + ?Sized, C: GuidanceCost + ?Sized>(
    x_start: &Vector,
    model: &D,
    sched: &DiffusionSchedule,
    kernel: &PerturbationKernel,
    cfg: &GuidanceConfig,
    cost: &C,
    references: Option<&MarginalSampleSet>,
    rng: &mut SeededRng,
) -> Result<Vector> {
    let mut state = EcmState::new(vec![x_start.clone()], cfg.literal_init);
    for tau in cfg.times(sched)? {
        state.step(model, sched, kernel, cfg, cost, references, tau, std::slice::from_mut(rng))?;
    }
    Ok(state.x0.remove(0))
}

struct EcmState {
    /// Noisy states waiting for the next network call.
    xt: Vec<Vector>,
    /// Current clean estimates after the gradient step.
    x0: Vec<Vector>,
    prev_eps: Option<Vec<Vector>>,
    needs_injection: bool,
}

impl EcmState {
    fn new(start: Vec<Vector>, literal_init: bool) -> Self {
        if literal_init {
            Self { xt: Vec::new(), x0: start, prev_eps: None, needs_injection: true }
        } else {
            Self { xt: start, x0: Vec::new(), prev_eps: None, needs_injection: false }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn step<D: Denoiser + ?Sized, C: GuidanceCost + ?Sized>(
        &mut self,
        model: &D,
        sched: &DiffusionSchedule,
        kernel: &PerturbationKernel,
        cfg: &GuidanceConfig,
        cost: &C,
        references: Option<&MarginalSampleSet>,
        tau: usize,
        rngs: &mut [SeededRng],
    ) -> Result<()> {
        if self.needs_injection {
            let ab = sched.alpha_bar(tau);
            self.xt = self
                .x0
                .iter()
                .zip(rngs.iter_mut())
                .enumerate()
                .map(|(j, (x0, rng))| {
                    let noise = match (&self.prev_eps, cfg.noise_mode) {
                        (Some(prev), NoiseMode::Deterministic) => prev[j].clone(),
                        _ => kernel.color(&standard_normal(rng, x0.len())),
                    };
                    x0 * ab.sqrt() + noise * (1.0 - ab).sqrt()
                })
                .collect();
        }
        let eps = model.eps_batch(&self.xt, tau)?;
        self.x0 = self
            .xt
            .iter()
            .zip(&eps)
            .map(|(x, e)| {
                let mut x_hat = tweedie(x, e, tau, sched);
                if cfg.method == GuidanceMethod::Ecmr {
                    let refs = references.ok_or_else(|| Error::InvalidConfig("ECMR needs reference trajectories".into()))?;
                    x_hat = ecmr_reference_swap(&CandidateSet::new(refs, &x_hat)?, cost, cfg.swap_cap)?;
                }
                Ok(ecm_gradient_step(&x_hat, cost, cfg, kernel))
            })
            .collect::<Result<_>>()?;
        self.prev_eps = Some(eps);
        self.needs_injection = true;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GuidedOutput {
    pub samples: Vec<Vector>,
    pub step_seconds: Vec<f64>,
    pub network_steps: usize,
    pub guidance_steps: usize,
}

/// Guided batch generation; all samples advance in lockstep.
#[allow(clippy::too_many_arguments)]
pub fn guided_generate<D: Denoiser + ?Sized, C: GuidanceCost + ?Sized>(
    model: &D,
    prior: &PriorKind,
    sched: &DiffusionSchedule,
    kernel: &PerturbationKernel,
    cfg: &GuidanceConfig,
    cost: &C,
    references: Option<&MarginalSampleSet>,
    n_samples: usize,
    seed: u64,
) -> Result<GuidedOutput> {
    check_dim(model.dim(), kernel.dim())?;
    check_dim(model.dim(), cost.dim())?;
    let times = cfg.times(sched)?;
    if cfg.method == GuidanceMethod::Ecmr && references.is_none() {
        return Err(Error::InvalidConfig("ECMR needs reference trajectories".into()));
    }
    let mut streams = sample_streams(seed, n_samples);
    let start_dist = match (prior, cfg.literal_init && matches!(cfg.method, GuidanceMethod::Ecm | GuidanceMethod::Ecmr)) {
        (_, true) | (PriorKind::Standard, false) => kernel.as_gaussian(),
        (PriorKind::Ogd(p), false) => {
            check_dim(kernel.dim(), p.dim())?;
            p.gaussian()?
        }
    };
    let start: Vec<Vector> = streams.iter_mut().map(|rng| draw(&start_dist, rng)).collect();
    let mut step_seconds = Vec::with_capacity(times.len());
    let mut guidance_steps = 0;

    let samples = match cfg.method {
        GuidanceMethod::Ecm | GuidanceMethod::Ecmr => {
            let mut state = EcmState::new(start, cfg.literal_init);
            for &tau in &times {
                let t0 = Instant::now();
                state.step(model, sched, kernel, cfg, cost, references, tau, &mut streams)?;
                step_seconds.push(t0.elapsed().as_secs_f64());
                guidance_steps += 1;
            }
            state.x0
        }
        _ => {
            let mut xs = start;
            for (k, &tau) in times.iter().enumerate() {
                let prev = times.get(k + 1).copied().unwrap_or(0);
                let t0 = Instant::now();
                let eps = model.eps_batch(&xs, tau)?;
                xs = match cfg.method {
                    GuidanceMethod::Nnm => {
                        guidance_steps += 1;
                        xs.iter()
                            .zip(&eps)
                            .map(|(x, e)| Ok(nnm_update(x, e, tau, prev, sched, kernel, cfg, cost)?.0))
                            .collect::<Result<_>>()?
                    }
                    GuidanceMethod::Sf => {
                        guidance_steps += 1;
                        let grads: Vec<Vector> =
                            xs.iter().zip(&eps).map(|(x, e)| cost.grad(&tweedie(x, e, tau, sched))).collect();
                        let vjps = model.vjp_batch(&xs, tau, &grads)?;
                        xs.iter()
                            .zip(&eps)
                            .zip(grads.iter().zip(&vjps))
                            .map(|((x, e), (g, v))| {
                                let grad_x = sf_state_gradient(g, v, tau, sched);
                                ddim_update(x, &sf_biased_eps(e, &grad_x, tau, sched, kernel, cfg), tau, prev, sched)
                            })
                            .collect::<Result<_>>()?
                    }
                    _ => xs.iter().zip(&eps).map(|(x, e)| ddim_update(x, e, tau, prev, sched)).collect::<Result<_>>()?,
                };
                step_seconds.push(t0.elapsed().as_secs_f64());
            }
            xs
        }
    };
    Ok(GuidedOutput { samples, network_steps: step_seconds.len(), step_seconds, guidance_steps })
}

fn draw(g: &Gaussian, rng: &mut SeededRng) -> Vector {
    g.color(&standard_normal(rng, g.dim()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{finite_difference_vjp, OracleDenoiser};
    use crate::sampler::{generate, SamplerConfig, SamplerMethod};
    use crate::scenario::MarginalEntry;
    use crate::schedule::make_vp_schedule;
    use crate::stats::{GaussianMixture, Matrix};

    fn straight(n: usize, h: usize) -> Vec<Vec<[f64; 2]>> {
        (0..n).map(|i| (1..=h).map(|k| [k as f64, i as f64]).collect()).collect()
    }

    fn on_route(task: &RouteTask) -> Vector {
        Vector::from_vec(task.routes.iter().flat_map(|r| r.iter().flat_map(|p| [p[0], p[1]])).collect())
    }

    #[test]
    fn cost_vanishes_on_goals_and_matches_hand_value() {
        let task = RouteTask::new(straight(2, 4), 4, RouteSetKind::Gt, SpeedSetting::N).unwrap();
        let mut x = on_route(&task);
        assert_eq!(goal_cost(&x, &task), 0.0);
        let k = 2 * 3;
        x[k] += 3.0;
        x[k + 1] += 4.0;
        assert_eq!(goal_cost(&x, &task), 12.5);
    }

    #[test]
    fn short_or_ragged_routes_are_rejected() {
        let two = vec![vec![[0.0, 0.0]; 2]];
        assert!(RouteTask::new(two, 2, RouteSetKind::Gt, SpeedSetting::N).is_err());
        let ragged = vec![vec![[0.0, 0.0]; 4], vec![[0.0, 0.0]; 3]];
        assert!(RouteTask::new(ragged, 4, RouteSetKind::Gt, SpeedSetting::N).is_err());
    }

    #[test]
    fn speed_settings_pick_indices() {
        assert_eq!(SpeedSetting::N.indices(12), (12, 12));
        assert_eq!(SpeedSetting::A.indices(12), (10, 12));
        assert_eq!(SpeedSetting::D.indices(12), (12, 10));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let task = RouteTask::new(straight(3, 5), 5, RouteSetKind::U, SpeedSetting::A).unwrap();
        let mut rng = rng_from_seed(4);
        let x = standard_normal(&mut rng, 30) * 3.0;
        let g = goal_cost_grad(&x, &task);
        let h = 1e-6;
        for j in 0..30 {
            let mut p = x.clone();
            p[j] += h;
            let hi = goal_cost(&p, &task);
            p[j] -= 2.0 * h;
            let lo = goal_cost(&p, &task);
            assert!((g[j] - (hi - lo) / (2.0 * h)).abs() < 1e-8, "{j}");
        }
    }

    fn refs(n: usize, l: usize, x: usize, seed: u64) -> MarginalSampleSet {
        let mut rng = rng_from_seed(seed);
        MarginalSampleSet {
            entries: (0..n)
                .map(|_| MarginalEntry {
                    samples: (0..l).map(|_| standard_normal(&mut rng, x) * 2.0).collect(),
                    scores: vec![1.0 / l as f64; l],
                    base_covs: vec![Matrix::identity(x, x); l],
                })
                .collect(),
        }
    }

    #[test]
    fn swap_keeps_an_optimal_estimate() {
        let task = RouteTask::new(straight(2, 3), 3, RouteSetKind::U, SpeedSetting::N).unwrap();
        let x = on_route(&task);
        let cands = CandidateSet::new(&refs(2, 3, 6, 1), &x).unwrap();
        assert_eq!(ecmr_reference_swap(&cands, &task, 4096).unwrap(), x);
    }

    #[test]
    fn swap_matches_brute_force_for_two_agents() {
        let task = RouteTask::new(straight(2, 3), 3, RouteSetKind::U, SpeedSetting::N).unwrap();
        let mut rng = rng_from_seed(2);
        let x = standard_normal(&mut rng, 12) * 3.0;
        let r = refs(2, 3, 6, 7);
        let cands = CandidateSet::new(&r, &x).unwrap();
        assert_eq!(cands.product_size(), Some(16));
        let fast = ecmr_reference_swap(&cands, &task, 4096).unwrap();
        let mut best = f64::INFINITY;
        for a in &cands.options[0] {
            for b in &cands.options[1] {
                let v = Vector::from_iterator(12, a.iter().chain(b.iter()).copied());
                best = best.min(goal_cost(&v, &task));
            }
        }
        assert_eq!(goal_cost(&fast, &task), best);
        assert!(goal_cost(&fast, &task) <= goal_cost(&x, &task));
    }

    struct Coupled(RouteTask);

    impl GuidanceCost for Coupled {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn cost(&self, x: &Vector) -> f64 {
            goal_cost(x, &self.0)
        }
        fn grad(&self, x: &Vector) -> Vector {
            goal_cost_grad(x, &self.0)
        }
    }

    #[test]
    fn non_separable_costs_are_capped() {
        let task = RouteTask::new(straight(3, 3), 3, RouteSetKind::U, SpeedSetting::N).unwrap();
        let cands = CandidateSet::new(&refs(3, 4, 6, 3), &Vector::zeros(18)).unwrap();
        let err = ecmr_reference_swap(&cands, &Coupled(task.clone()), 100).unwrap_err();
        assert!(matches!(err, Error::CandidateExplosion { count: 125, cap: 100 }));
        let slow = ecmr_reference_swap(&cands, &Coupled(task.clone()), 4096).unwrap();
        assert_eq!(slow, ecmr_reference_swap(&cands, &task, 4096).unwrap());
    }

    fn gaussian_setup() -> (OracleDenoiser, DiffusionSchedule, PerturbationKernel) {
        let g = Gaussian::new(Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]), Matrix::identity(4, 4) * 0.5).unwrap();
        let s = make_vp_schedule(100, 1e-4, 0.05).unwrap();
        let k = PerturbationKernel::new(Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 1.0, 0.5, 1.0]))).unwrap();
        (OracleDenoiser::new(GaussianMixture::single(g), s.clone(), k.clone()).unwrap(), s, k)
    }

    #[test]
    fn nnm_with_zero_gradient_is_plain_ddim() {
        let (o, s, k) = gaussian_setup();
        let cfg = GuidanceConfig::new(GuidanceMethod::Nnm, 0.0, 100, 10);
        let x = Vector::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let eps = o.eps(&x, 50).unwrap();
        let zero_cost = ZeroCost(4);
        let (out, inc) = nnm_update(&x, &eps, 50, 40, &s, &k, &cfg, &zero_cost).unwrap();
        assert_eq!(out, ddim_update(&x, &eps, 50, 40, &s).unwrap());
        assert_eq!(inc, Vector::zeros(4));
    }

    struct ZeroCost(usize);

    impl GuidanceCost for ZeroCost {
        fn dim(&self) -> usize {
            self.0
        }
        fn cost(&self, _: &Vector) -> f64 {
            0.0
        }
        fn grad(&self, _: &Vector) -> Vector {
            Vector::zeros(self.0)
        }
    }

    /// `J(x) = ½‖x − c‖²`.
    struct Quadratic(Vector);

    impl GuidanceCost for Quadratic {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn cost(&self, x: &Vector) -> f64 {
            0.5 * (x - &self.0).norm_squared()
        }
        fn grad(&self, x: &Vector) -> Vector {
            x - &self.0
        }
    }

    #[test]
    fn nnm_clips_exactly_at_the_bound() {
        let (o, s, k) = gaussian_setup();
        let x = Vector::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let eps = o.eps(&x, 50).unwrap();
        let target = Vector::from_vec(vec![100.0, -100.0, 0.0, 100.0]);
        let cfg = GuidanceConfig::new(GuidanceMethod::Nnm, 1e6, 100, 10);
        let (_, inc) = nnm_update(&x, &eps, 50, 40, &s, &k, &cfg, &Quadratic(target)).unwrap();
        let bound = k.marginal_std() * (1.0 - s.alpha_bar(50) / s.alpha_bar(40)).sqrt();
        assert_eq!(inc[0], bound[0]);
        assert_eq!(inc[1], -bound[1]);
        assert_eq!(inc[3], bound[3]);
        assert!(inc[2].abs() <= bound[2]);
    }

    #[test]
    fn nnm_two_dimensional_hand_case() {
        let g = Gaussian::new(Vector::zeros(2), Matrix::identity(2, 2)).unwrap();
        let s = make_vp_schedule(100, 1e-4, 0.05).unwrap();
        let k = PerturbationKernel::identity(2);
        let o = OracleDenoiser::new(GaussianMixture::single(g), s.clone(), k.clone()).unwrap();
        let x = Vector::from_vec(vec![0.5, -0.5]);
        let eps = o.eps(&x, 30).unwrap();
        let m = ddim_update(&x, &eps, 30, 20, &s).unwrap();
        let c = Vector::from_vec(vec![m[0] - 0.01, m[1] + 50.0]);
        let cfg = GuidanceConfig::new(GuidanceMethod::Nnm, 2.0, 100, 10);
        let (out, _) = nnm_update(&x, &eps, 30, 20, &s, &k, &cfg, &Quadratic(c)).unwrap();
        let bound = (1.0 - s.alpha_bar(30) / s.alpha_bar(20)).sqrt();
        assert!((out[0] - (m[0] - 0.02)).abs() < 1e-15);
        assert!((out[1] - (m[1] + bound)).abs() < 1e-15);
    }

    #[test]
    fn sf_state_gradient_matches_finite_differences() {
        let (o, s, _) = gaussian_setup();
        let c = Vector::from_vec(vec![0.0, 1.0, -1.0, 2.0]);
        let cost = Quadratic(c);
        let x = Vector::from_vec(vec![0.4, 0.1, -0.3, 0.8]);
        for tau in [5, 50, 95] {
            let eps = o.eps(&x, tau).unwrap();
            let g = cost.grad(&tweedie(&x, &eps, tau, &s));
            let an = sf_state_gradient(&g, &o.vjp(&x, tau, &g).unwrap(), tau, &s);
            let fd_vjp = sf_state_gradient(&g, &finite_difference_vjp(&o, &x, tau, &g, 1e-5).unwrap(), tau, &s);
            let h = 1e-5;
            let mut fd = Vector::zeros(4);
            for j in 0..4 {
                let mut p = x.clone();
                p[j] += h;
                let hi = cost.cost(&tweedie(&p, &o.eps(&p, tau).unwrap(), tau, &s));
                p[j] -= 2.0 * h;
                let lo = cost.cost(&tweedie(&p, &o.eps(&p, tau).unwrap(), tau, &s));
                fd[j] = (hi - lo) / (2.0 * h);
            }
            assert!((&an - &fd).norm() <= 1e-5 * an.norm(), "tau {tau}");
            assert!((&an - &fd_vjp).norm() <= 1e-4 * an.norm(), "tau {tau}");
        }
    }

    #[test]
    fn sf_with_zero_gradient_is_plain_ddim() {
        let (o, s, k) = gaussian_setup();
        let cfg = GuidanceConfig::new(GuidanceMethod::Sf, 1000.0, 100, 10);
        let x = Vector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let out = sf_guided_step(&x, 40, 30, &o, &s, &k, &cfg, &ZeroCost(4)).unwrap();
        assert_eq!(out, crate::sampler::ddim_step(&x, 40, 30, &o, &s).unwrap());
    }

    #[test]
    fn sf_moves_the_clean_estimate_downhill() {
        let (o, s, k) = gaussian_setup();
        let cost = Quadratic(Vector::from_vec(vec![3.0, -1.0, 0.0, 2.0]));
        let cfg = GuidanceConfig::new(GuidanceMethod::Sf, 0.5, 100, 10);
        let x = Vector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let guided = sf_guided_step(&x, 10, 0, &o, &s, &k, &cfg, &cost).unwrap();
        let plain = crate::sampler::ddim_step(&x, 10, 0, &o, &s).unwrap();
        assert!(cost.cost(&guided) < cost.cost(&plain));
    }

    #[test]
    fn ecm_without_guidance_equals_ddim() {
        let (o, s, k) = gaussian_setup();
        let cfg = GuidanceConfig::new(GuidanceMethod::Ecm, 0.0, 100, 10);
        let task = ZeroCost(4);
        let guided = guided_generate(&o, &PriorKind::Standard, &s, &k, &cfg, &task, None, 6, 3).unwrap();
        let plain = generate(
            &o,
            &PriorKind::Standard,
            &s,
            &k,
            &SamplerConfig { start_t: 100, stride: 10, method: SamplerMethod::Ddim, n_samples: 6, seed: 3 },
        )
        .unwrap();
        for (a, b) in guided.samples.iter().zip(&plain.samples) {
            assert!((a - b).amax() < 1e-10);
        }
        assert_eq!(guided.network_steps, 10);
        assert_eq!(guided.guidance_steps, 10);
    }

    #[test]
    fn single_iteration_ecm_by_hand() {
        let (o, s, k) = gaussian_setup();
        let c = Vector::from_vec(vec![3.0, 0.0, 0.0, 0.0]);
        let cfg = GuidanceConfig::new(GuidanceMethod::Ecm, 0.25, 10, 10);
        let x = Vector::from_vec(vec![0.5, 0.5, 0.5, 0.5]);
        let out = ecm_iterate(&x, &o, &s, &k, &cfg, &Quadratic(c.clone()), None, &mut rng_from_seed(0)).unwrap();
        let x_hat = tweedie(&x, &o.eps(&x, 10).unwrap(), 10, &s);
        let expect = &x_hat - (&x_hat - &c) * 0.25;
        assert!((out - expect).amax() < 1e-14);
    }

    #[test]
    fn deterministic_mode_ignores_the_stream() {
        let (o, s, k) = gaussian_setup();
        let cfg = GuidanceConfig::new(GuidanceMethod::Ecm, 0.1, 100, 10);
        let cost = Quadratic(Vector::from_vec(vec![1.0, 1.0, 1.0, 1.0]));
        let x = Vector::from_vec(vec![0.5, 0.5, 0.5, 0.5]);
        let a = ecm_iterate(&x, &o, &s, &k, &cfg, &cost, None, &mut rng_from_seed(0)).unwrap();
        let b = ecm_iterate(&x, &o, &s, &k, &cfg, &cost, None, &mut rng_from_seed(1)).unwrap();
        assert_eq!(a, b);
        let sto = GuidanceConfig { noise_mode: NoiseMode::Stochastic, ..cfg };
        let c = ecm_iterate(&x, &o, &s, &k, &sto, &cost, None, &mut rng_from_seed(0)).unwrap();
        let d = ecm_iterate(&x, &o, &s, &k, &sto, &cost, None, &mut rng_from_seed(1)).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn ecmr_requires_references() {
        let (o, s, k) = gaussian_setup();
        let cfg = GuidanceConfig::new(GuidanceMethod::Ecmr, 1.0, 100, 10);
        assert!(guided_generate(&o, &PriorKind::Standard, &s, &k, &cfg, &ZeroCost(4), None, 2, 0).is_err());
    }
}
