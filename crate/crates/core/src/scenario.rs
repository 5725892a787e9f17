//! Synthetic multi-agent scenes.
//!
//! A scene is a Gaussian mixture over joint trajectories. Each agent drives
//! towards a shared intersection and picks one of a few maneuvers; joint
//! components are the cross product of per-agent maneuvers, with combinations
//! whose mean paths conflict down-weighted by the interaction coupling.
//!
//! Joint layout: agent `i` owns coordinates `i·2H .. (i+1)·2H`, stored as
//! `[x₁, y₁, x₂, y₂, …, x_H, y_H]`.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::stats::{gmm_moments, DataStats, Gaussian, GaussianMixture, Matrix, Vector};

/// Mean paths of two agents closer than this at a common step count as a conflict.
pub const CONFLICT_DISTANCE: f64 = 4.0;

const MIN_SPEED: f64 = 5.0;
const MAX_SPEED: f64 = 8.0;
const LANE_OFFSET: f64 = 1.75;
const POSITION_JITTER: f64 = 0.05;
/// Per-mode speed uncertainty (m/s).
const SPEED_STD: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_agents: usize,
    pub horizon: usize,
    /// Seconds per step.
    pub dt: f64,
    pub modes_per_agent: usize,
    pub interaction_coupling: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { n_agents: 2, horizon: 12, dt: 0.5, modes_per_agent: 3, interaction_coupling: 0.5 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::InvalidConfig("scene needs at least one agent".into()));
        }
        if self.horizon < 2 {
            return Err(Error::InvalidConfig("horizon must be at least 2".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("dt must be positive".into()));
        }
        if !(1..=Maneuver::ALL.len()).contains(&self.modes_per_agent) {
            return Err(Error::InvalidConfig(format!(
                "modes_per_agent must be in 1..={}",
                Maneuver::ALL.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.interaction_coupling) {
            return Err(Error::InvalidConfig("interaction_coupling must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Per-agent dimension `X = 2H`.
    pub fn agent_dim(&self) -> usize {
        2 * self.horizon
    }

    /// Joint dimension `D = n · 2H`.
    pub fn joint_dim(&self) -> usize {
        self.n_agents * self.agent_dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Maneuver {
    Straight,
    LeftArc,
    RightArc,
    Decelerate,
}

impl Maneuver {
    pub const ALL: [Maneuver; 4] = [Maneuver::Straight, Maneuver::LeftArc, Maneuver::RightArc, Maneuver::Decelerate];

    /// Per-step random-walk standard deviation of the position noise.
    fn step_std(self) -> f64 {
        match self {
            Maneuver::Straight => 0.25,
            Maneuver::LeftArc | Maneuver::RightArc => 0.35,
            Maneuver::Decelerate => 0.2,
        }
    }
}

/// Ground-truth joint trajectory distribution of a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointGmm {
    pub spec: SceneSpec,
    pub seed: u64,
    pub mixture: GaussianMixture,
    /// Per component, the maneuver index chosen by each agent.
    pub labels: Vec<Vec<usize>>,
    /// Per component, the number of conflicting agent pairs.
    pub conflicts: Vec<usize>,
}

impl JointGmm {
    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    pub fn n_agents(&self) -> usize {
        self.spec.n_agents
    }
}

struct AgentLayout {
    start: [f64; 2],
    heading: f64,
    speed: f64,
}

fn agent_layout<R: Rng>(i: usize, spec: &SceneSpec, rng: &mut R) -> AgentLayout {
    let heading = (i as f64) * FRAC_PI_2 + rng.random_range(-0.1..0.1);
    let speed = rng.random_range(MIN_SPEED..MAX_SPEED);
    let arrival = 0.5 * spec.horizon as f64 * spec.dt + rng.random_range(-0.25..0.25);
    let dir = [heading.cos(), heading.sin()];
    let right = [dir[1], -dir[0]];
    let back = speed * arrival;
    AgentLayout {
        start: [-back * dir[0] + LANE_OFFSET * right[0], -back * dir[1] + LANE_OFFSET * right[1]],
        heading,
        speed,
    }
}

fn maneuver_path(layout: &AgentLayout, maneuver: Maneuver, spec: &SceneSpec) -> Vec<[f64; 2]> {
    let total = spec.horizon as f64 * spec.dt;
    let (x0, y0) = (layout.start[0], layout.start[1]);
    let (th, v) = (layout.heading, layout.speed);
    (1..=spec.horizon)
        .map(|h| {
            let t = h as f64 * spec.dt;
            match maneuver {
                Maneuver::Straight => [x0 + v * t * th.cos(), y0 + v * t * th.sin()],
                Maneuver::LeftArc | Maneuver::RightArc => {
                    let sign = if maneuver == Maneuver::LeftArc { 1.0 } else { -1.0 };
                    let omega = sign * 0.8 * FRAC_PI_2 / total;
                    let r = v / omega;
                    [
                        x0 + r * ((th + omega * t).sin() - th.sin()),
                        y0 + r * (th.cos() - (th + omega * t).cos()),
                    ]
                }
                Maneuver::Decelerate => {
                    let s = v * (t - 0.3 * t * t / total);
                    [x0 + s * th.cos(), y0 + s * th.sin()]
                }
            }
        })
        .collect()
}

/// Random-walk position noise plus a rank-one speed term: every path is
/// linear in speed about its start, so a speed error `δv` shifts step `h`
/// by `(p_h − start)/v · δv`.
fn maneuver_cov(maneuver: Maneuver, layout: &AgentLayout, path: &[[f64; 2]]) -> Matrix {
    let var = maneuver.step_std().powi(2);
    let horizon = path.len();
    let x = 2 * horizon;
    let mut cov = Matrix::zeros(x, x);
    for h in 0..horizon {
        for g in 0..horizon {
            let v = var * (h.min(g) + 1) as f64;
            cov[(2 * h, 2 * g)] = v;
            cov[(2 * h + 1, 2 * g + 1)] = v;
        }
    }
    let d = Vector::from_iterator(
        x,
        path.iter().flat_map(|p| [(p[0] - layout.start[0]) / layout.speed, (p[1] - layout.start[1]) / layout.speed]),
    );
    cov += &d * d.transpose() * (SPEED_STD * SPEED_STD);
    for k in 0..x {
        cov[(k, k)] += POSITION_JITTER * POSITION_JITTER;
    }
    cov
}

fn paths_conflict(a: &[[f64; 2]], b: &[[f64; 2]]) -> bool {
    a.iter().zip(b).any(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() < CONFLICT_DISTANCE)
}

/// Generate the scene mixture. Bit-reproducible in `(spec, seed)`.
pub fn make_scene(spec: &SceneSpec, seed: u64) -> Result<JointGmm> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let n = spec.n_agents;
    let modes = spec.modes_per_agent;
    let x = spec.agent_dim();

    let mut paths = Vec::with_capacity(n);
    let mut blocks = Vec::with_capacity(n);
    let mut mode_weights = Vec::with_capacity(n);
    for i in 0..n {
        let layout = agent_layout(i, spec, &mut rng);
        let agent_paths: Vec<_> = Maneuver::ALL[..modes].iter().map(|m| maneuver_path(&layout, *m, spec)).collect();
        blocks.push(
            Maneuver::ALL[..modes].iter().zip(&agent_paths).map(|(m, p)| maneuver_cov(*m, &layout, p)).collect::<Vec<_>>(),
        );
        paths.push(agent_paths);
        let raw: Vec<f64> = (0..modes).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        mode_weights.push(raw.into_iter().map(|w| w / total).collect::<Vec<_>>());
    }

    let n_components = modes.pow(n as u32);
    let mut labels = Vec::with_capacity(n_components);
    let mut conflicts = Vec::with_capacity(n_components);
    let mut weights = Vec::with_capacity(n_components);
    let mut components = Vec::with_capacity(n_components);
    for c in 0..n_components {
        let mut code = c;
        let label: Vec<usize> = (0..n)
            .map(|_| {
                let m = code % modes;
                code /= modes;
                m
            })
            .collect();
        let mut conflict_count = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if paths_conflict(&paths[i][label[i]], &paths[j][label[j]]) {
                    conflict_count += 1;
                }
            }
        }
        let prior: f64 = label.iter().enumerate().map(|(i, m)| mode_weights[i][*m]).product();
        weights.push(prior * (1.0 - spec.interaction_coupling).powi(conflict_count as i32));

        let mut mean = Vector::zeros(spec.joint_dim());
        let mut cov = Matrix::zeros(spec.joint_dim(), spec.joint_dim());
        for (i, m) in label.iter().enumerate() {
            for (h, p) in paths[i][*m].iter().enumerate() {
                mean[i * x + 2 * h] = p[0];
                mean[i * x + 2 * h + 1] = p[1];
            }
            cov.view_mut((i * x, i * x), (x, x)).copy_from(&blocks[i][*m]);
        }
        components.push(Gaussian::new(mean, cov)?);
        labels.push(label);
        conflicts.push(conflict_count);
    }
    let mixture = GaussianMixture::from_unnormalized(weights, components)?;
    Ok(JointGmm { spec: spec.clone(), seed, mixture, labels, conflicts })
}

/// Exact marginal mixture over one agent's coordinates.
pub fn marginalize(joint: &JointGmm, agent: usize) -> Result<GaussianMixture> {
    if agent >= joint.n_agents() {
        return Err(Error::InvalidConfig(format!("agent {agent} out of range for {} agents", joint.n_agents())));
    }
    let x = joint.spec.agent_dim();
    let off = agent * x;
    let comps = joint
        .mixture
        .components()
        .iter()
        .map(|c| Gaussian::new(c.mean().rows(off, x).into_owned(), c.cov().view((off, off), (x, x)).into_owned()))
        .collect::<Result<Vec<_>>>()?;
    GaussianMixture::new(joint.mixture.weights().to_vec(), comps)
}

/// One agent's marginal predictions: trajectories, likelihood scores and
/// per-mode covariances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalEntry {
    pub samples: Vec<Vector>,
    pub scores: Vec<f64>,
    pub base_covs: Vec<Matrix>,
}

impl MarginalEntry {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Marginal predictions for every agent of a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalSampleSet {
    pub entries: Vec<MarginalEntry>,
}

impl MarginalSampleSet {
    pub fn n_agents(&self) -> usize {
        self.entries.len()
    }

    /// Flattened `[r_i^l…, p(r_i^l)…]` conditioning vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for e in &self.entries {
            for s in &e.samples {
                out.extend(s.iter());
            }
            out.extend(e.scores.iter());
        }
        out
    }
}

/// Idealized marginal predictor: the `L` highest-weight distinct marginal modes.
///
/// Components sharing a mean are merged first (weights summed, covariances
/// weight-averaged); the kept scores are renormalized.
pub fn marginal_predictor(joint: &JointGmm, agent: usize, l: usize) -> Result<MarginalEntry> {
    if l == 0 {
        return Err(Error::InvalidConfig("marginal sample count must be at least 1".into()));
    }
    let marg = marginalize(joint, agent)?;
    let mut merged: Vec<(Vector, f64, Matrix)> = Vec::new();
    for (w, c) in marg.weights().iter().zip(marg.components()) {
        if let Some(slot) = merged.iter_mut().find(|(m, _, _)| (m - c.mean()).amax() <= 1e-12) {
            slot.2 = (&slot.2 * slot.1 + c.cov() * *w) / (slot.1 + w);
            slot.1 += w;
        } else {
            merged.push((c.mean().clone(), *w, c.cov().clone()));
        }
    }
    let mut order: Vec<usize> = (0..merged.len()).collect();
    order.sort_by(|a, b| merged[*b].1.total_cmp(&merged[*a].1).then(a.cmp(b)));
    order.truncate(l);
    let total: f64 = order.iter().map(|k| merged[*k].1).sum();
    Ok(MarginalEntry {
        samples: order.iter().map(|k| merged[*k].0.clone()).collect(),
        scores: order.iter().map(|k| merged[*k].1 / total).collect(),
        base_covs: order.iter().map(|k| merged[*k].2.clone()).collect(),
    })
}

pub fn marginal_sample_set(joint: &JointGmm, l: usize) -> Result<MarginalSampleSet> {
    let entries = (0..joint.n_agents()).map(|i| marginal_predictor(joint, i, l)).collect::<Result<_>>()?;
    Ok(MarginalSampleSet { entries })
}

/// Jitter added to estimated marginal covariances.
pub const STATS_JITTER: f64 = 1e-8;

/// Weighted mean and scatter-plus-base covariance of one agent's predictions.
pub fn estimate_marginal_stats(entry: &MarginalEntry) -> Result<DataStats> {
    let first = entry.samples.first().ok_or(Error::NoSamples)?;
    let x = first.len();
    let mut mean = Vector::zeros(x);
    for (r, p) in entry.samples.iter().zip(&entry.scores) {
        mean.axpy(*p, r, 1.0);
    }
    let mut cov = Matrix::identity(x, x) * STATS_JITTER;
    for ((r, p), b) in entry.samples.iter().zip(&entry.scores).zip(&entry.base_covs) {
        let diff = r - &mean;
        cov.ger(*p, &diff, &diff, 1.0);
        cov += b * *p;
    }
    DataStats::new(mean, cov)
}

/// Exact joint moments of the scene.
pub fn joint_stats(joint: &JointGmm) -> DataStats {
    gmm_moments(&joint.mixture)
}

/// Polyline positions of agent `agent` in a joint vector, `H` points.
pub fn agent_positions(x: &Vector, agent: usize, horizon: usize) -> Vec<[f64; 2]> {
    let off = agent * 2 * horizon;
    (0..horizon).map(|h| [x[off + 2 * h], x[off + 2 * h + 1]]).collect()
}
