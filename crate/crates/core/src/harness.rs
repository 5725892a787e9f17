//! Experiment orchestration over a fixed benchmark suite: T-sweeps,
//! guidance benches, step-size grids and per-step latency.
//!
//! Metric rows are deterministic in the configuration; wall-clock timings
//! are reported separately so reruns reproduce metric files bit for bit.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, MlpCheckpoint, MlpDenoiser, OracleDenoiser};
use crate::error::{Error, Result};
use crate::evaluate::{controllable_metrics, sliced_wasserstein, ControllableMetrics, SW_PROJECTIONS};
use crate::guidance::{
    guided_generate, make_task, GuidanceConfig, GuidanceMethod, NoiseMode, RouteSetKind, RouteTask, SpeedSetting,
};
use crate::persistence::{config_hash, load_text, KvRow, MetricsTable};
use crate::prior::optimal_prior_at;
use crate::rng::derive_seed;
use crate::sampler::{generate, PriorKind, SamplerConfig, SamplerMethod};
use crate::scenario::{joint_stats, make_scene, marginal_sample_set, JointGmm, MarginalSampleSet, SceneSpec};
use crate::schedule::{make_vp_schedule, DiffusionSchedule, PerturbationKernel};
use crate::stats::Vector;

/// Published step-size grid for NNM, ECM and ECMR.
pub const PAPER_GRID: [f64; 8] = [1.0, 5.0, 7.0, 10.0, 15.0, 30.0, 60.0, 100.0];
/// Published step-size grid for SF.
pub const PAPER_SF_GRID: [f64; 6] = [10.0, 500.0, 1000.0, 2000.0, 3000.0, 5000.0];
/// Scales applied to the default grids to cover desk-scale costs.
pub const DESK_SCALES: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];
pub const SUITE_SIZE: usize = 20;
const COUPLINGS: [f64; 3] = [0.0, 0.5, 0.9];

pub fn default_grid(method: GuidanceMethod) -> Vec<f64> {
    match method {
        GuidanceMethod::Sf => PAPER_SF_GRID.to_vec(),
        _ => PAPER_GRID.to_vec(),
    }
}

/// Union of the default grid at every desk scale, ascending.
pub fn desk_grid(method: GuidanceMethod) -> Vec<f64> {
    let mut out: Vec<f64> =
        DESK_SCALES.iter().flat_map(|s| default_grid(method).into_iter().map(move |z| z * s)).collect();
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteScene {
    pub index: usize,
    pub spec: SceneSpec,
    pub seed: u64,
}

/// Twenty fixed scenes cycling agent count through 1, 2, 3 and coupling
/// through 0, 0.5, 0.9.
pub fn standard_suite() -> Vec<SuiteScene> {
    (0..SUITE_SIZE)
        .map(|i| SuiteScene {
            index: i,
            spec: SceneSpec {
                n_agents: 1 + i % 3,
                interaction_coupling: COUPLINGS[(i / 3) % 3],
                ..SceneSpec::default()
            },
            seed: 1000 + i as u64,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Oracle,
    /// A trained network; the checkpoint must match the scene dimension,
    /// schedule and kernel of the run.
    Trained { checkpoint: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Standard prior, identity kernel.
    Vanilla,
    /// Optimal Gaussian prior with its kernel.
    Ogd,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::Vanilla => "vd",
            Backbone::Ogd => "ogd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenes: Vec<SuiteScene>,
    pub model: ModelKind,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Chain length of the vanilla backbone in guided runs.
    pub vanilla_t: usize,
    /// Chain length of the OGD backbone in guided runs.
    pub guided_t: usize,
    pub stride: usize,
    pub n_samples: usize,
    pub n_sweep_samples: usize,
    pub n_ground_truth: usize,
    /// Marginal predictions per agent.
    pub references: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenes: standard_suite(),
            model: ModelKind::Oracle,
            beta_start: 1e-4,
            beta_end: 0.05,
            vanilla_t: 500,
            guided_t: 100,
            stride: 10,
            n_samples: 128,
            n_sweep_samples: 1000,
            n_ground_truth: 1000,
            references: 6,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes.is_empty() {
            return Err(Error::InvalidConfig("configuration has no scenes".into()));
        }
        for s in &self.scenes {
            s.spec.validate()?;
        }
        if self.n_samples == 0 || self.n_sweep_samples == 0 || self.n_ground_truth == 0 || self.references == 0 {
            return Err(Error::InvalidConfig("sample counts must be positive".into()));
        }
        if let ModelKind::Trained { checkpoint } = &self.model {
            if !checkpoint.exists() {
                return Err(Error::InvalidConfig(format!("checkpoint {} does not exist", checkpoint.display())));
            }
        }
        make_vp_schedule(self.vanilla_t.max(self.guided_t), self.beta_start, self.beta_end)?;
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    /// The same configuration restricted to one scene.
    pub fn single_scene(&self, scene: &SuiteScene) -> Self {
        ExperimentConfig { scenes: vec![scene.clone()], ..self.clone() }
    }

    pub fn schedule(&self, steps: usize) -> Result<DiffusionSchedule> {
        make_vp_schedule(steps, self.beta_start, self.beta_end)
    }

    pub fn sample_seed(&self, scene: &SuiteScene) -> u64 {
        derive_seed(self.seed, 1000 + scene.index as u64)
    }

    pub fn ground_truth_seed(&self, scene: &SuiteScene) -> u64 {
        derive_seed(self.seed, 2000 + scene.index as u64)
    }

    pub fn task_seed(&self, scene: &SuiteScene) -> u64 {
        derive_seed(self.seed, 3000 + scene.index as u64)
    }

    pub fn projection_seed(&self, scene: &SuiteScene) -> u64 {
        derive_seed(self.seed, 4000 + scene.index as u64)
    }
}

/// A scene with its ground truth and marginal predictions.
pub struct SceneContext {
    pub scene: SuiteScene,
    pub joint: JointGmm,
    pub refs: MarginalSampleSet,
}

impl SceneContext {
    pub fn new(cfg: &ExperimentConfig, scene: &SuiteScene) -> Result<Self> {
        let joint = make_scene(&scene.spec, scene.seed)?;
        let refs = marginal_sample_set(&joint, cfg.references)?;
        Ok(SceneContext { scene: scene.clone(), joint, refs })
    }

    pub fn task(&self, cfg: &ExperimentConfig, task: TaskSpec) -> Result<RouteTask> {
        make_task(&self.joint, &self.refs, task.kind, task.speed, cfg.task_seed(&self.scene))
    }
}

/// Schedule, kernel, prior and noise model of one diffusion backbone.
pub struct BackboneRun {
    pub sched: DiffusionSchedule,
    pub kernel: PerturbationKernel,
    pub prior: PriorKind,
    pub model: Box<dyn Denoiser>,
}

pub fn build_backbone(cfg: &ExperimentConfig, ctx: &SceneContext, backbone: Backbone, t: usize) -> Result<BackboneRun> {
    let sched = cfg.schedule(t)?;
    let (kernel, prior) = match backbone {
        Backbone::Vanilla => (PerturbationKernel::identity(ctx.joint.dim()), PriorKind::Standard),
        Backbone::Ogd => {
            let p = optimal_prior_at(&joint_stats(&ctx.joint), &sched, t)?;
            (p.kernel()?, PriorKind::Ogd(p))
        }
    };
    let model: Box<dyn Denoiser> = match &cfg.model {
        ModelKind::Oracle => Box::new(OracleDenoiser::new(ctx.joint.mixture.clone(), sched.clone(), kernel.clone())?),
        ModelKind::Trained { checkpoint } => {
            let net = MlpDenoiser::try_from(load_text::<MlpCheckpoint>(checkpoint)?)?;
            crate::error::check_dim(ctx.joint.dim(), net.dim())?;
            Box::new(net)
        }
    };
    Ok(BackboneRun { sched, kernel, prior, model })
}

fn contexts(cfg: &ExperimentConfig) -> Result<Vec<SceneContext>> {
    cfg.validate()?;
    cfg.scenes.iter().map(|s| SceneContext::new(cfg, s)).collect()
}

// T-sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scene: usize,
    pub backbone: Backbone,
    pub t: usize,
    pub seed: u64,
    /// Sliced Wasserstein distance of whole joint trajectories.
    pub sw: f64,
    /// Sliced Wasserstein distance of final joint positions.
    pub sw_final: f64,
}

fn final_positions(xs: &[Vector], n_agents: usize, horizon: usize) -> Vec<Vector> {
    xs.iter()
        .map(|x| {
            Vector::from_iterator(
                2 * n_agents,
                (0..n_agents).flat_map(|i| {
                    let k = i * 2 * horizon + 2 * (horizon - 1);
                    [x[k], x[k + 1]]
                }),
            )
        })
        .collect()
}

/// Ancestral sampling from `T` to 0 on a length-`T` schedule, scored against
/// held-out ground-truth draws.
pub fn run_t_sweep(cfg: &ExperimentConfig, backbones: &[Backbone], t_values: &[usize]) -> Result<Vec<SweepRow>> {
    let ctxs = contexts(cfg)?;
    let per_scene: Vec<Vec<SweepRow>> = ctxs
        .par_iter()
        .map(|ctx| {
            let gt = ctx.joint.mixture.sample_n(cfg.n_ground_truth, cfg.ground_truth_seed(&ctx.scene));
            let (n, h) = (ctx.joint.n_agents(), ctx.joint.spec.horizon);
            let gt_final = final_positions(&gt, n, h);
            let proj = cfg.projection_seed(&ctx.scene);
            let mut rows = Vec::new();
            for &b in backbones {
                for &t in t_values {
                    let run = build_backbone(cfg, ctx, b, t)?;
                    let seed = cfg.sample_seed(&ctx.scene);
                    let sc = SamplerConfig {
                        start_t: t,
                        stride: 1,
                        method: SamplerMethod::Ddpm,
                        n_samples: cfg.n_sweep_samples,
                        seed,
                    };
                    let out = generate(run.model.as_ref(), &run.prior, &run.sched, &run.kernel, &sc)?;
                    rows.push(SweepRow {
                        scene: ctx.scene.index,
                        backbone: b,
                        t,
                        seed,
                        sw: sliced_wasserstein(&out.samples, &gt, SW_PROJECTIONS, proj)?,
                        sw_final: sliced_wasserstein(&final_positions(&out.samples, n, h), &gt_final, SW_PROJECTIONS, proj)?,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// Suite mean of `sw` per `(backbone, T)`, in first-seen order.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(Backbone, usize, f64)> {
    let mut keys: Vec<(Backbone, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.backbone, r.t)) {
            keys.push((r.backbone, r.t));
        }
    }
    keys.into_iter()
        .map(|(b, t)| {
            let v: Vec<f64> = rows.iter().filter(|r| r.backbone == b && r.t == t).map(|r| r.sw).collect();
            (b, t, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

// Guidance bench

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: RouteSetKind,
    pub speed: SpeedSetting,
}

impl TaskSpec {
    pub fn new(kind: RouteSetKind, speed: SpeedSetting) -> Self {
        TaskSpec { kind, speed }
    }

    pub fn name(&self) -> String {
        let k = match self.kind {
            RouteSetKind::Gt => "GT",
            RouteSetKind::U => "U",
        };
        let s = match self.speed {
            SpeedSetting::N => "N",
            SpeedSetting::A => "A",
            SpeedSetting::D => "D",
        };
        format!("{k}+{s}")
    }

    pub fn all() -> Vec<TaskSpec> {
        let mut out = Vec::new();
        for kind in [RouteSetKind::Gt, RouteSetKind::U] {
            for speed in [SpeedSetting::N, SpeedSetting::A, SpeedSetting::D] {
                out.push(TaskSpec { kind, speed });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    Fixed(f64),
    /// Tuned per scene: lowest minJFDE over the grid.
    Grid(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchMethod {
    pub label: String,
    pub method: GuidanceMethod,
    pub backbone: Backbone,
    pub noise_mode: NoiseMode,
    pub step: StepSize,
}

impl BenchMethod {
    pub fn none(backbone: Backbone) -> Self {
        BenchMethod {
            label: format!("none-{}", backbone.name()),
            method: GuidanceMethod::None,
            backbone,
            noise_mode: NoiseMode::Deterministic,
            step: StepSize::Fixed(0.0),
        }
    }

    /// NNM and SF on the vanilla backbone, ECM and ECMR on OGD.
    pub fn guided(method: GuidanceMethod, step: StepSize) -> Self {
        let backbone = match method {
            GuidanceMethod::Ecm | GuidanceMethod::Ecmr => Backbone::Ogd,
            _ => Backbone::Vanilla,
        };
        BenchMethod { label: method.name().to_string(), method, backbone, noise_mode: NoiseMode::Deterministic, step }
    }

    pub fn with_noise(mut self, mode: NoiseMode) -> Self {
        self.noise_mode = mode;
        let suffix = match mode {
            NoiseMode::Deterministic => "det",
            NoiseMode::Stochastic => "sto",
        };
        self.label = format!("{}-{suffix}", self.method.name());
        self
    }

    fn chain_length(&self, cfg: &ExperimentConfig) -> usize {
        match self.backbone {
            Backbone::Vanilla => cfg.vanilla_t,
            Backbone::Ogd => cfg.guided_t,
        }
    }

    fn guidance_config(&self, cfg: &ExperimentConfig, zeta: f64) -> GuidanceConfig {
        let mut g = GuidanceConfig::new(self.method, zeta, self.chain_length(cfg), cfg.stride);
        g.noise_mode = self.noise_mode;
        g
    }
}

/// The guidance comparison rows: no guidance on both backbones, then NNM,
/// SF, ECM and ECMR tuned on the desk-scale grids.
pub fn comparison_methods() -> Vec<BenchMethod> {
    let mut out = vec![BenchMethod::none(Backbone::Vanilla), BenchMethod::none(Backbone::Ogd)];
    for m in [GuidanceMethod::Nnm, GuidanceMethod::Sf, GuidanceMethod::Ecm, GuidanceMethod::Ecmr] {
        out.push(BenchMethod::guided(m, StepSize::Grid(desk_grid(m))));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub zeta: f64,
    pub metrics: ControllableMetrics,
    pub network_steps: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config_hash: String,
    pub seed: u64,
    pub scene: usize,
    pub n_agents: usize,
    pub coupling: f64,
    pub label: String,
    pub method: GuidanceMethod,
    pub task: TaskSpec,
    pub zeta: f64,
    pub network_steps: usize,
    pub metrics: ControllableMetrics,
    /// Wall-clock per network step; not part of [`BenchRow::to_kv`].
    pub seconds_per_step: f64,
}

impl BenchRow {
    pub fn to_kv(&self) -> KvRow {
        let m = &self.metrics;
        vec![
            ("config_hash".into(), self.config_hash.clone()),
            ("seed".into(), self.seed.to_string()),
            ("scene".into(), self.scene.to_string()),
            ("n_agents".into(), self.n_agents.to_string()),
            ("coupling".into(), self.coupling.to_string()),
            ("method".into(), self.label.clone()),
            ("task".into(), self.task.name()),
            ("zeta".into(), self.zeta.to_string()),
            ("network_steps".into(), self.network_steps.to_string()),
            ("min_jfde".into(), m.min_jfde.to_string()),
            ("mean_jfde".into(), m.mean_jfde.to_string()),
            ("min_jrde".into(), m.min_jrde.to_string()),
            ("mean_jrde".into(), m.mean_jrde.to_string()),
        ]
    }
}

fn run_point(
    cfg: &ExperimentConfig,
    ctx: &SceneContext,
    run: &BackboneRun,
    bm: &BenchMethod,
    task: &RouteTask,
    zeta: f64,
) -> Result<GridPoint> {
    let g = bm.guidance_config(cfg, zeta);
    let start = Instant::now();
    let out = guided_generate(
        run.model.as_ref(),
        &run.prior,
        &run.sched,
        &run.kernel,
        &g,
        task,
        Some(&ctx.refs),
        cfg.n_samples,
        cfg.sample_seed(&ctx.scene),
    )?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(GridPoint {
        zeta,
        metrics: controllable_metrics(&out.samples, task)?,
        network_steps: out.network_steps,
        seconds,
    })
}

/// Index of the lowest minJFDE; ties go to lower meanJFDE, then the earlier entry.
fn best_index(curve: &[GridPoint]) -> usize {
    let mut best = 0;
    for (i, p) in curve.iter().enumerate().skip(1) {
        let b = &curve[best].metrics;
        let key = (p.metrics.min_jfde, p.metrics.mean_jfde);
        if key.0 < b.min_jfde || (key.0 == b.min_jfde && key.1 < b.mean_jfde) {
            best = i;
        }
    }
    best
}

fn scene_curve(
    cfg: &ExperimentConfig,
    ctx: &SceneContext,
    bm: &BenchMethod,
    task_spec: TaskSpec,
    grid: &[f64],
) -> Result<Vec<GridPoint>> {
    let run = build_backbone(cfg, ctx, bm.backbone, bm.chain_length(cfg))?;
    let task = ctx.task(cfg, task_spec)?;
    grid.iter().map(|&z| run_point(cfg, ctx, &run, bm, &task, z)).collect()
}

fn bench_scene(cfg: &ExperimentConfig, hash: &str, ctx: &SceneContext, methods: &[BenchMethod], tasks: &[TaskSpec]) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for bm in methods {
        let grid = match &bm.step {
            StepSize::Fixed(z) => vec![*z],
            StepSize::Grid(g) if g.is_empty() => return Err(Error::InvalidConfig("step-size grid is empty".into())),
            StepSize::Grid(g) => g.clone(),
        };
        for &t in tasks {
            let curve = scene_curve(cfg, ctx, bm, t, &grid)?;
            let p = &curve[best_index(&curve)];
            rows.push(BenchRow {
                config_hash: hash.to_string(),
                seed: cfg.sample_seed(&ctx.scene),
                scene: ctx.scene.index,
                n_agents: ctx.joint.n_agents(),
                coupling: ctx.scene.spec.interaction_coupling,
                label: bm.label.clone(),
                method: bm.method,
                task: t,
                zeta: p.zeta,
                network_steps: p.network_steps,
                metrics: p.metrics,
                seconds_per_step: p.seconds / p.network_steps.max(1) as f64,
            });
        }
    }
    Ok(rows)
}

/// One row per (scene, method, task), scenes in suite order.
pub fn run_guidance_bench(cfg: &ExperimentConfig, methods: &[BenchMethod], tasks: &[TaskSpec]) -> Result<Vec<BenchRow>> {
    if methods.is_empty() || tasks.is_empty() {
        return Ok(Vec::new());
    }
    let hash = cfg.hash()?;
    let ctxs = contexts(cfg)?;
    let per_scene: Vec<Vec<BenchRow>> =
        ctxs.par_iter().map(|ctx| bench_scene(cfg, &hash, ctx, methods, tasks)).collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub label: String,
    pub task: TaskSpec,
    pub scenes: usize,
    pub min_jfde: f64,
    pub mean_jfde: f64,
    pub min_jrde: f64,
    pub mean_jrde: f64,
    pub seconds_per_step: f64,
}

impl BenchSummary {
    pub fn to_kv(&self, hash: &str) -> KvRow {
        vec![
            ("config_hash".into(), hash.to_string()),
            ("method".into(), self.label.clone()),
            ("task".into(), self.task.name()),
            ("scenes".into(), self.scenes.to_string()),
            ("min_jfde".into(), self.min_jfde.to_string()),
            ("mean_jfde".into(), self.mean_jfde.to_string()),
            ("min_jrde".into(), self.min_jrde.to_string()),
            ("mean_jrde".into(), self.mean_jrde.to_string()),
        ]
    }
}

/// Suite means per (method label, task), in first-seen order.
pub fn summarize(rows: &[BenchRow]) -> Vec<BenchSummary> {
    let mut keys: Vec<(String, TaskSpec)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(l, t)| *l == r.label && *t == r.task) {
            keys.push((r.label.clone(), r.task));
        }
    }
    keys.into_iter()
        .map(|(label, task)| {
            let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.label == label && r.task == task).collect();
            let n = sel.len() as f64;
            let mean = |f: &dyn Fn(&BenchRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
            BenchSummary {
                scenes: sel.len(),
                min_jfde: mean(&|r| r.metrics.min_jfde),
                mean_jfde: mean(&|r| r.metrics.mean_jfde),
                min_jrde: mean(&|r| r.metrics.min_jrde),
                mean_jrde: mean(&|r| r.metrics.mean_jrde),
                seconds_per_step: mean(&|r| r.seconds_per_step),
                label,
                task,
            }
        })
        .collect()
}

pub fn bench_table(rows: &[BenchRow]) -> MetricsTable {
    MetricsTable { rows: rows.iter().map(BenchRow::to_kv).collect() }
}

// Step-size grid

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: f64,
    /// Suite-mean metrics per step size, in grid order.
    pub curve: Vec<GridPoint>,
}

/// Runs the method at every grid value on every scene of `cfg` and picks the
/// value with the lowest suite-mean minJFDE.
pub fn run_step_size_grid(cfg: &ExperimentConfig, method: &BenchMethod, task: TaskSpec, grid: &[f64]) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("step-size grid is empty".into()));
    }
    let ctxs = contexts(cfg)?;
    let curves: Vec<Vec<GridPoint>> =
        ctxs.par_iter().map(|ctx| scene_curve(cfg, ctx, method, task, grid)).collect::<Result<_>>()?;
    let n = curves.len() as f64;
    let curve: Vec<GridPoint> = (0..grid.len())
        .map(|k| {
            let mean = |f: &dyn Fn(&GridPoint) -> f64| curves.iter().map(|c| f(&c[k])).sum::<f64>() / n;
            GridPoint {
                zeta: grid[k],
                metrics: ControllableMetrics {
                    min_jfde: mean(&|p| p.metrics.min_jfde),
                    mean_jfde: mean(&|p| p.metrics.mean_jfde),
                    min_jrde: mean(&|p| p.metrics.min_jrde),
                    mean_jrde: mean(&|p| p.metrics.mean_jrde),
                },
                network_steps: curves[0][k].network_steps,
                seconds: curves.iter().map(|c| c[k].seconds).sum(),
            }
        })
        .collect();
    Ok(GridResult { best: grid[best_index(&curve)], curve })
}

// Latency

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub label: String,
    pub runs: usize,
    pub network_steps: usize,
    pub total_seconds: f64,
    pub seconds_per_step: f64,
}

/// Per-step wall clock of each method on one scene, with runs interleaved
/// across methods until each has at least `min_steps` network steps. One
/// untimed warm-up run per method precedes measurement.
pub fn measure_latency(
    cfg: &ExperimentConfig,
    scene: &SuiteScene,
    methods: &[(BenchMethod, f64)],
    task: TaskSpec,
    min_steps: usize,
) -> Result<Vec<LatencyRow>> {
    let ctx = SceneContext::new(cfg, scene)?;
    let route = ctx.task(cfg, task)?;
    let runs: Vec<BackboneRun> =
        methods.iter().map(|(bm, _)| build_backbone(cfg, &ctx, bm.backbone, bm.chain_length(cfg))).collect::<Result<_>>()?;
    let mut rows: Vec<LatencyRow> = methods
        .iter()
        .map(|(bm, _)| LatencyRow { label: bm.label.clone(), runs: 0, network_steps: 0, total_seconds: 0.0, seconds_per_step: 0.0 })
        .collect();
    for ((bm, z), run) in methods.iter().zip(&runs) {
        run_point(cfg, &ctx, run, bm, &route, *z)?;
    }
    while rows.iter().any(|r| r.network_steps < min_steps) {
        for (((bm, z), run), row) in methods.iter().zip(&runs).zip(rows.iter_mut()) {
            if row.network_steps >= min_steps {
                continue;
            }
            let p = run_point(cfg, &ctx, run, bm, &route, *z)?;
            row.runs += 1;
            row.network_steps += p.network_steps;
            row.total_seconds += p.seconds;
        }
    }
    for r in &mut rows {
        r.seconds_per_step = r.total_seconds / r.network_steps.max(1) as f64;
    }
    Ok(rows)
}
