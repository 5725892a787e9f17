use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use trajdiff::denoiser::{train_ddpm, Denoiser, MlpArch, MlpCheckpoint, MlpDenoiser, OracleDenoiser, TrainConfig};
use trajdiff::evaluate::{
    cluster_samples, controllable_metrics, joint_prediction_metrics, sliced_wasserstein, MERGE_THRESHOLD,
    SW_PROJECTIONS,
};
use trajdiff::guidance::{guided_generate, make_task, GuidanceConfig, GuidanceMethod, NoiseMode, RouteSetKind, SpeedSetting};
use trajdiff::harness::{
    bench_table, comparison_methods, default_grid, desk_grid, measure_latency, run_guidance_bench, run_step_size_grid,
    run_t_sweep, standard_suite, summarize, sweep_means, Backbone, BenchMethod, ExperimentConfig, StepSize,
    TaskSpec,
};
use trajdiff::persistence::{
    load_text, save_binary, save_text, series_text, sha256_hex, to_text, write_atomic, MetricsTable, RunManifest,
    SampleBatch,
};
use trajdiff::prior::{optimal_prior_at, validate_optimality};
use trajdiff::rng::derive_seed;
use trajdiff::sampler::{generate, PriorKind, SamplerConfig, SamplerMethod};
use trajdiff::scenario::{joint_stats, make_scene, marginal_sample_set, JointGmm, MarginalSampleSet, SceneSpec};
use trajdiff::schedule::{make_vp_schedule, PerturbationKernel, ScheduleParams};
use trajdiff::stats::{random_mixture, Gaussian, GaussianMixture, Matrix, Vector};

/// Environment variable selecting the worker-thread count.
const WORKERS_ENV: &str = "TRAJDIFF_WORKERS";

#[derive(Parser)]
#[command(name = "trajdiff", version, about = "Optimal Gaussian diffusion and clean-manifold guidance on synthetic scenes")]
struct Cli {
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Generate a scene mixture and its marginal predictions.
    GenScene(GenSceneArgs),
    /// Train a network denoiser on a scene.
    Train(TrainArgs),
    /// Unguided sampling.
    Sample(SampleArgs),
    /// Guided sampling on a route task.
    Guide(GuideArgs),
    /// Sample quality against chain length for OGD and vanilla priors.
    BenchTSweep(SweepArgs),
    /// Guidance comparison over the benchmark suite.
    BenchGuidance(BenchArgs),
    /// Step-size grid search for one method.
    GridZeta(GridArgs),
    /// Closed-form prior optimality and exponent checks.
    ValidatePrior(ValidateArgs),
    /// Metrics of a sample file against its scene.
    Eval(EvalArgs),
    /// Re-run the command recorded in a manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum BackboneArg {
    Vd,
    Ogd,
}

impl From<BackboneArg> for Backbone {
    fn from(b: BackboneArg) -> Self {
        match b {
            BackboneArg::Vd => Backbone::Vanilla,
            BackboneArg::Ogd => Backbone::Ogd,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum SamplerArg {
    Ddpm,
    Ddim,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    None,
    Nnm,
    Sf,
    Ecm,
    Ecmr,
}

impl From<MethodArg> for GuidanceMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::None => GuidanceMethod::None,
            MethodArg::Nnm => GuidanceMethod::Nnm,
            MethodArg::Sf => GuidanceMethod::Sf,
            MethodArg::Ecm => GuidanceMethod::Ecm,
            MethodArg::Ecmr => GuidanceMethod::Ecmr,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum NoiseArg {
    Deterministic,
    Stochastic,
}

impl From<NoiseArg> for NoiseMode {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::Deterministic => NoiseMode::Deterministic,
            NoiseArg::Stochastic => NoiseMode::Stochastic,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum GridArg {
    /// Default per-method grids.
    Reference,
    /// Default grids repeated at several decade scales.
    Desk,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct GenSceneArgs {
    #[arg(long, default_value_t = 2)]
    agents: usize,
    #[arg(long, default_value_t = 12)]
    horizon: usize,
    #[arg(long, default_value_t = 0.5)]
    dt: f64,
    #[arg(long, default_value_t = 3)]
    modes: usize,
    #[arg(long, default_value_t = 0.5)]
    coupling: f64,
    /// Marginal predictions per agent.
    #[arg(long, default_value_t = 6)]
    references: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct ScheduleArgs {
    /// Chain length; defaults to 500 for the vanilla backbone and 100 for OGD.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    beta_start: f64,
    #[arg(long, default_value_t = 0.05)]
    beta_end: f64,
}

impl ScheduleArgs {
    fn params(&self, backbone: Backbone) -> ScheduleParams {
        let steps = self.t.unwrap_or(match backbone {
            Backbone::Vanilla => 500,
            Backbone::Ogd => 100,
        });
        ScheduleParams { steps, beta_start: self.beta_start, beta_end: self.beta_end }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum, default_value = "ogd")]
    backbone: BackboneArg,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct SampleArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Trained checkpoint; the exact oracle is used when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ogd")]
    backbone: BackboneArg,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, value_enum, default_value = "ddpm")]
    sampler: SamplerArg,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct GuideArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long, default_value_t = 1.0)]
    zeta: f64,
    /// Route set and speed, e.g. `U+D` or `GT+N`.
    #[arg(long, default_value = "U+D")]
    task: String,
    /// Backbone; NNM, SF and none default to vanilla, ECM and ECMR to OGD.
    #[arg(long, value_enum)]
    backbone: Option<BackboneArg>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value_t = 10)]
    stride: usize,
    #[arg(long, value_enum, default_value = "deterministic")]
    noise: NoiseArg,
    #[arg(long)]
    clip: Option<bool>,
    #[arg(long, default_value_t = 128)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    task_seed: u64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct SuiteArgs {
    /// Number of suite scenes to use, from the start of the suite.
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SuiteArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let suite = standard_suite();
        if self.scenes == 0 || self.scenes > suite.len() {
            bail!("--scenes must be in 1..={}", suite.len());
        }
        Ok(ExperimentConfig { scenes: suite[..self.scenes].to_vec(), seed: self.seed, ..ExperimentConfig::default() })
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct SweepArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[arg(long, value_delimiter = ',', default_value = "10,20,40,60,80,100")]
    t_values: Vec<usize>,
    /// Extra vanilla chain length compared against OGD.
    #[arg(long, default_value_t = 500)]
    vanilla_t: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct BenchArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[arg(long, value_delimiter = ',', default_value = "U+D")]
    tasks: Vec<String>,
    #[arg(long, value_enum, default_value = "desk")]
    grid: GridArg,
    #[arg(long, default_value_t = 128)]
    samples: usize,
    /// Also time ECM, NNM and SF per network step on the first scene.
    #[arg(long, default_value_t = false)]
    latency: bool,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct GridArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long, default_value = "U+D")]
    task: String,
    #[arg(long, value_enum, default_value = "desk")]
    grid: GridArg,
    /// Explicit grid, overriding `--grid`.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "deterministic")]
    noise: NoiseArg,
    #[arg(long, default_value_t = 128)]
    samples: usize,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct ValidateArgs {
    #[arg(long, default_value_t = 10)]
    mixtures: usize,
    #[arg(long, value_delimiter = ',', default_value = "10,40,100")]
    t_values: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    candidates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    samples: PathBuf,
    /// Route task to score controllability against, e.g. `U+D`.
    #[arg(long)]
    task: Option<String>,
    #[arg(long, default_value_t = 1)]
    task_seed: u64,
    #[arg(long, default_value_t = 1000)]
    ground_truth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

fn parse_task(s: &str) -> Result<TaskSpec> {
    let (k, v) = s.split_once('+').with_context(|| format!("task `{s}` is not of the form KIND+SPEED"))?;
    let kind = match k.to_ascii_uppercase().as_str() {
        "GT" => RouteSetKind::Gt,
        "U" => RouteSetKind::U,
        other => bail!("unknown route set `{other}`"),
    };
    let speed = match v.to_ascii_uppercase().as_str() {
        "N" => SpeedSetting::N,
        "A" => SpeedSetting::A,
        "D" => SpeedSetting::D,
        other => bail!("unknown speed setting `{other}`"),
    };
    Ok(TaskSpec::new(kind, speed))
}

/// Collects output files and manifest fields for one run.
struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn new(dir: &Path, command: &Command) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let config = serde_json::to_value(command)?;
        let name = config["command"].as_str().unwrap_or("unknown").to_string();
        let manifest = RunManifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            command: name,
            config,
            ..RunManifest::default()
        };
        Ok(Run { dir: dir.to_path_buf(), manifest })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.manifest.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.to_string(), value);
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.manifest.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn text<A: trajdiff::persistence::Artifact>(&mut self, name: &str, value: &A) -> Result<()> {
        self.write(name, to_text(value)?.as_bytes())
    }

    fn kv(&mut self, name: &str, table: &MetricsTable) -> Result<()> {
        self.write(name, table.to_kv_text().as_bytes())
    }

    fn timing(&mut self, name: &str, seconds: f64) {
        self.manifest.timings.insert(name.to_string(), seconds);
    }

    fn finish(self) -> Result<()> {
        save_text(&self.dir.join("manifest.txt"), &self.manifest)?;
        Ok(())
    }
}

fn kv(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn load_scene(run: &mut Run, path: &Path) -> Result<JointGmm> {
    run.input(path)?;
    load_text::<JointGmm>(path).with_context(|| format!("loading scene {}", path.display()))
}

struct Backend {
    sched: trajdiff::schedule::DiffusionSchedule,
    kernel: PerturbationKernel,
    prior: PriorKind,
}

fn backend(joint: &JointGmm, backbone: Backbone, params: ScheduleParams) -> Result<Backend> {
    let sched = make_vp_schedule(params.steps, params.beta_start, params.beta_end)?;
    let (kernel, prior) = match backbone {
        Backbone::Vanilla => (PerturbationKernel::identity(joint.dim()), PriorKind::Standard),
        Backbone::Ogd => {
            let p = optimal_prior_at(&joint_stats(joint), &sched, params.steps)?;
            (p.kernel()?, PriorKind::Ogd(p))
        }
    };
    Ok(Backend { sched, kernel, prior })
}

fn gen_scene(a: &GenSceneArgs, run: &mut Run) -> Result<()> {
    let spec = SceneSpec {
        n_agents: a.agents,
        horizon: a.horizon,
        dt: a.dt,
        modes_per_agent: a.modes,
        interaction_coupling: a.coupling,
    };
    let scene = make_scene(&spec, a.seed)?;
    let refs = marginal_sample_set(&scene, a.references)?;
    run.seed("scene", a.seed);
    run.text("scene.txt", &scene)?;
    save_binary(&run.dir.join("scene.bin"), &scene)?;
    let bin = fs::read(run.dir.join("scene.bin"))?;
    run.manifest.outputs.insert("scene.bin".into(), sha256_hex(&bin));
    run.text("marginals.txt", &refs)?;
    Ok(())
}

fn train(a: &TrainArgs, run: &mut Run) -> Result<()> {
    let joint = load_scene(run, &a.scene)?;
    let params = a.schedule.params(a.backbone.into());
    let be = backend(&joint, a.backbone.into(), params)?;
    let stats = joint_stats(&joint);
    let rms = (stats.mean.norm_squared() + stats.cov.trace()).sqrt() / (joint.dim() as f64).sqrt();
    let arch = MlpArch { input_scale: 1.0 / rms.max(1e-12), ..MlpArch::new(joint.dim(), a.hidden) };
    let net = MlpDenoiser::new(arch, derive_seed(a.seed, 0))?;
    let cfg = TrainConfig { steps: a.steps, batch: a.batch, lr: a.lr, seed: derive_seed(a.seed, 1), ..TrainConfig::default() };
    let t0 = Instant::now();
    let outcome = train_ddpm(net, &joint.mixture, &be.sched, &be.kernel, &cfg)?;
    run.timing("train", t0.elapsed().as_secs_f64());
    run.seed("train", a.seed);
    run.manifest.schedule = Some(params);
    run.text("model.txt", &MlpCheckpoint::from(&outcome.model))?;
    let pts: Vec<(f64, f64)> = outcome.losses.iter().enumerate().map(|(i, l)| (i as f64, *l)).collect();
    run.write("loss.series", series_text("step", "loss", &pts).as_bytes())?;
    Ok(())
}

fn model_for(run: &mut Run, joint: &JointGmm, be: &Backend, model: &Option<PathBuf>) -> Result<Box<dyn Denoiser>> {
    Ok(match model {
        None => Box::new(OracleDenoiser::new(joint.mixture.clone(), be.sched.clone(), be.kernel.clone())?),
        Some(path) => {
            run.input(path)?;
            let net = MlpDenoiser::try_from(load_text::<MlpCheckpoint>(path)?)?;
            if net.dim() != joint.dim() {
                bail!("checkpoint dimension {} does not match scene dimension {}", net.dim(), joint.dim());
            }
            Box::new(net)
        }
    })
}

fn sample(a: &SampleArgs, run: &mut Run) -> Result<()> {
    let joint = load_scene(run, &a.scene)?;
    let params = a.schedule.params(a.backbone.into());
    let be = backend(&joint, a.backbone.into(), params)?;
    let model = model_for(run, &joint, &be, &a.model)?;
    let method = match a.sampler {
        SamplerArg::Ddpm => SamplerMethod::Ddpm,
        SamplerArg::Ddim => SamplerMethod::Ddim,
    };
    let cfg = SamplerConfig { start_t: params.steps, stride: a.stride, method, n_samples: a.samples, seed: a.seed };
    let t0 = Instant::now();
    let out = generate(model.as_ref(), &be.prior, &be.sched, &be.kernel, &cfg)?;
    run.timing("generate", t0.elapsed().as_secs_f64());
    run.seed("sample", a.seed);
    run.manifest.schedule = Some(params);
    run.text("samples.txt", &SampleBatch::new(joint.dim(), &out.samples)?)?;
    Ok(())
}

fn guide(a: &GuideArgs, run: &mut Run) -> Result<()> {
    let joint = load_scene(run, &a.scene)?;
    let method: GuidanceMethod = a.method.into();
    let backbone = a.backbone.map(Backbone::from).unwrap_or(match method {
        GuidanceMethod::Ecm | GuidanceMethod::Ecmr => Backbone::Ogd,
        _ => Backbone::Vanilla,
    });
    let params = a.schedule.params(backbone);
    let be = backend(&joint, backbone, params)?;
    let model = OracleDenoiser::new(joint.mixture.clone(), be.sched.clone(), be.kernel.clone())?;
    let refs: MarginalSampleSet = marginal_sample_set(&joint, 6)?;
    let spec = parse_task(&a.task)?;
    let task = make_task(&joint, &refs, spec.kind, spec.speed, a.task_seed)?;
    let mut cfg = GuidanceConfig::new(method, a.zeta, params.steps, a.stride);
    cfg.noise_mode = a.noise.into();
    if let Some(c) = a.clip {
        cfg.clip_enabled = c;
    }
    let t0 = Instant::now();
    let out = guided_generate(&model, &be.prior, &be.sched, &be.kernel, &cfg, &task, Some(&refs), a.samples, a.seed)?;
    let elapsed = t0.elapsed().as_secs_f64();
    run.timing("generate", elapsed);
    run.timing("seconds_per_step", elapsed / out.network_steps.max(1) as f64);
    run.seed("sample", a.seed);
    run.seed("task", a.task_seed);
    run.manifest.schedule = Some(params);
    let m = controllable_metrics(&out.samples, &task)?;
    let table = MetricsTable {
        rows: vec![kv(&[
            ("method", method.name().to_string()),
            ("task", spec.name()),
            ("zeta", a.zeta.to_string()),
            ("network_steps", out.network_steps.to_string()),
            ("min_jfde", m.min_jfde.to_string()),
            ("mean_jfde", m.mean_jfde.to_string()),
            ("min_jrde", m.min_jrde.to_string()),
            ("mean_jrde", m.mean_jrde.to_string()),
        ])],
    };
    run.text("samples.txt", &SampleBatch::new(joint.dim(), &out.samples)?)?;
    run.kv("metrics.kv", &table)?;
    Ok(())
}

fn bench_t_sweep(a: &SweepArgs, run: &mut Run) -> Result<()> {
    let cfg = ExperimentConfig { n_sweep_samples: a.samples, ..a.suite.config()? };
    let t0 = Instant::now();
    let mut rows = run_t_sweep(&cfg, &[Backbone::Ogd, Backbone::Vanilla], &a.t_values)?;
    if !a.t_values.contains(&a.vanilla_t) {
        rows.extend(run_t_sweep(&cfg, &[Backbone::Vanilla], &[a.vanilla_t])?);
    }
    run.timing("sweep", t0.elapsed().as_secs_f64());
    run.seed("suite", cfg.seed);
    let hash = cfg.hash()?;
    let table = MetricsTable {
        rows: rows
            .iter()
            .map(|r| {
                kv(&[
                    ("config_hash", hash.clone()),
                    ("seed", r.seed.to_string()),
                    ("scene", r.scene.to_string()),
                    ("prior", r.backbone.name().to_string()),
                    ("t", r.t.to_string()),
                    ("sw", r.sw.to_string()),
                    ("sw_final", r.sw_final.to_string()),
                ])
            })
            .collect(),
    };
    run.kv("sweep.kv", &table)?;
    let means = sweep_means(&rows);
    let summary = MetricsTable {
        rows: means
            .iter()
            .map(|(b, t, sw)| kv(&[("config_hash", hash.clone()), ("prior", b.name().into()), ("t", t.to_string()), ("mean_sw", sw.to_string())]))
            .collect(),
    };
    run.kv("summary.kv", &summary)?;
    for b in [Backbone::Ogd, Backbone::Vanilla] {
        let pts: Vec<(f64, f64)> = means.iter().filter(|m| m.0 == b).map(|m| (m.1 as f64, m.2)).collect();
        run.write(&format!("sweep_{}.series", b.name()), series_text("t", "mean_sw", &pts).as_bytes())?;
    }
    Ok(())
}

fn bench_guidance(a: &BenchArgs, run: &mut Run) -> Result<()> {
    let cfg = ExperimentConfig { n_samples: a.samples, ..a.suite.config()? };
    let tasks: Vec<TaskSpec> = a.tasks.iter().map(|t| parse_task(t)).collect::<Result<_>>()?;
    let methods: Vec<BenchMethod> = comparison_methods()
        .into_iter()
        .map(|mut m| {
            if let (GridArg::Reference, StepSize::Grid(_)) = (a.grid, &m.step) {
                m.step = StepSize::Grid(default_grid(m.method));
            }
            m
        })
        .collect();
    let t0 = Instant::now();
    let rows = run_guidance_bench(&cfg, &methods, &tasks)?;
    run.timing("bench", t0.elapsed().as_secs_f64());
    run.seed("suite", cfg.seed);
    let hash = cfg.hash()?;
    run.kv("rows.kv", &bench_table(&rows))?;
    let summary = summarize(&rows);
    run.kv("summary.kv", &MetricsTable { rows: summary.iter().map(|s| s.to_kv(&hash)).collect() })?;
    for s in &summary {
        run.timing(&format!("seconds_per_step.{}.{}", s.label, s.task.name()), s.seconds_per_step);
    }
    if a.latency {
        let probe = [
            (BenchMethod::guided(GuidanceMethod::Nnm, StepSize::Fixed(1e-3)), 1e-3),
            (BenchMethod::guided(GuidanceMethod::Sf, StepSize::Fixed(10.0)), 10.0),
            (BenchMethod::guided(GuidanceMethod::Ecm, StepSize::Fixed(1.0)), 1.0),
            (BenchMethod::guided(GuidanceMethod::Ecmr, StepSize::Fixed(1.0)), 1.0),
        ];
        for r in measure_latency(&cfg, &cfg.scenes[0], &probe, tasks[0], 500)? {
            run.timing(&format!("latency.{}", r.label), r.seconds_per_step);
        }
    }
    Ok(())
}

fn grid_zeta(a: &GridArgs, run: &mut Run) -> Result<()> {
    let cfg = ExperimentConfig { n_samples: a.samples, ..a.suite.config()? };
    let method: GuidanceMethod = a.method.into();
    if method == GuidanceMethod::None {
        bail!("no-guidance has no step size");
    }
    let grid = match (&a.values, a.grid) {
        (Some(v), _) => v.clone(),
        (None, GridArg::Reference) => default_grid(method),
        (None, GridArg::Desk) => desk_grid(method),
    };
    let bm = BenchMethod::guided(method, StepSize::Grid(grid.clone())).with_noise(a.noise.into());
    let task = parse_task(&a.task)?;
    let t0 = Instant::now();
    let res = run_step_size_grid(&cfg, &bm, task, &grid)?;
    run.timing("grid", t0.elapsed().as_secs_f64());
    run.seed("suite", cfg.seed);
    let hash = cfg.hash()?;
    let rows = res
        .curve
        .iter()
        .map(|p| {
            kv(&[
                ("config_hash", hash.clone()),
                ("method", method.name().into()),
                ("task", task.name()),
                ("zeta", p.zeta.to_string()),
                ("min_jfde", p.metrics.min_jfde.to_string()),
                ("mean_jfde", p.metrics.mean_jfde.to_string()),
                ("mean_jrde", p.metrics.mean_jrde.to_string()),
                ("best", (p.zeta == res.best).to_string()),
            ])
        })
        .collect();
    run.kv("grid.kv", &MetricsTable { rows })?;
    let pts: Vec<(f64, f64)> = res.curve.iter().map(|p| (p.zeta, p.metrics.min_jfde)).collect();
    run.write("grid.series", series_text("zeta", "min_jfde", &pts).as_bytes())?;
    Ok(())
}

fn validate_prior(a: &ValidateArgs, run: &mut Run) -> Result<()> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let t0 = Instant::now();
    for &t in &a.t_values {
        let sched = make_vp_schedule(t, 1e-4, 0.05)?;
        for k in 0..a.mixtures {
            let seed = derive_seed(a.seed, (t * 1000 + k) as u64);
            let dim = 2 + k % 5;
            let data = random_mixture(dim, 2 + k % 3, 2.0, seed)?;
            let r = validate_optimality(&data, &sched, t, a.candidates, seed)?;
            rows.push(kv(&[
                ("check", "optimality".into()),
                ("t", t.to_string()),
                ("mixture", k.to_string()),
                ("dim", dim.to_string()),
                ("kl_closed", r.closed_form.value.to_string()),
                ("kl_closed_se", r.closed_form.std_error.to_string()),
                ("kl_family_min", r.family_scaled.value.to_string()),
                ("attains_min", r.closed_attains_family_min.to_string()),
                ("candidates_beating", r.candidates_beating_closed.to_string()),
                ("kl_standard_prior", r.standard_prior.value.to_string()),
            ]));
            reports.push(r);
        }
        // Exponent adjudication on Gaussian data, where every KL is closed-form.
        let g = Gaussian::new(
            Vector::from_vec(vec![1.0, -2.0, 0.5]),
            Matrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]),
        )?;
        let r = validate_optimality(&GaussianMixture::single(g), &sched, t, 0, a.seed)?;
        for v in &r.variants {
            rows.push(kv(&[
                ("check", "exponent".into()),
                ("t", t.to_string()),
                ("alpha_bar", r.alpha_bar.to_string()),
                ("variant", v.name.clone()),
                ("kl", v.kl_gaussian_part.to_string()),
            ]));
        }
        rows.push(kv(&[("check", "exponent_choice".into()), ("t", t.to_string()), ("chosen", r.chosen_variant.clone())]));
    }
    run.timing("validate", t0.elapsed().as_secs_f64());
    run.seed("validate", a.seed);
    run.kv("report.kv", &MetricsTable { rows })?;
    run.write("report.json", serde_json::to_string_pretty(&reports)?.as_bytes())?;
    Ok(())
}

fn eval(a: &EvalArgs, run: &mut Run) -> Result<()> {
    let joint = load_scene(run, &a.scene)?;
    run.input(&a.samples)?;
    let batch: SampleBatch = load_text(&a.samples)?;
    if batch.dim != joint.dim() {
        bail!("sample dimension {} does not match scene dimension {}", batch.dim, joint.dim());
    }
    let xs = batch.vectors();
    let gt = joint.mixture.sample_n(a.ground_truth, derive_seed(a.seed, 0));
    let mut row = kv(&[
        ("samples", xs.len().to_string()),
        ("sw", sliced_wasserstein(&xs, &gt, SW_PROJECTIONS, derive_seed(a.seed, 1))?.to_string()),
    ]);
    let refs = marginal_sample_set(&joint, 6)?;
    let clusters = cluster_samples(&xs, &refs, MERGE_THRESHOLD)?;
    let truth = joint.mixture.sample_n(1, derive_seed(a.seed, 2)).remove(0);
    let p = joint_prediction_metrics(&clusters.representatives, &clusters.probabilities, &truth, joint.n_agents())?;
    row.extend(kv(&[
        ("k", p.k.to_string()),
        ("avg_min_ade", p.avg_min_ade.to_string()),
        ("avg_min_fde", p.avg_min_fde.to_string()),
        ("actor_mr", p.actor_mr.to_string()),
        ("actor_cr", p.actor_cr.to_string()),
        ("avg_brier_min_fde", p.avg_brier_min_fde.to_string()),
        ("avg_brier_min_fde_mult", p.avg_brier_min_fde_mult.to_string()),
    ]));
    if let Some(t) = &a.task {
        let spec = parse_task(t)?;
        let task = make_task(&joint, &refs, spec.kind, spec.speed, a.task_seed)?;
        let m = controllable_metrics(&xs, &task)?;
        row.extend(kv(&[
            ("task", spec.name()),
            ("min_jfde", m.min_jfde.to_string()),
            ("mean_jfde", m.mean_jfde.to_string()),
            ("min_jrde", m.min_jrde.to_string()),
            ("mean_jrde", m.mean_jrde.to_string()),
        ]));
    }
    run.seed("eval", a.seed);
    run.kv("metrics.kv", &MetricsTable { rows: vec![row] })?;
    Ok(())
}

fn execute(command: &Command, out: &Path) -> Result<()> {
    if let Command::Replay(r) = command {
        let m: RunManifest = load_text(&r.manifest).with_context(|| format!("loading {}", r.manifest.display()))?;
        let recorded: Command = serde_json::from_value(m.config.clone()).context("manifest config is not a command")?;
        return execute(&recorded, out);
    }
    let mut run = Run::new(out, command)?;
    let t0 = Instant::now();
    match command {
        Command::GenScene(a) => gen_scene(a, &mut run)?,
        Command::Train(a) => train(a, &mut run)?,
        Command::Sample(a) => sample(a, &mut run)?,
        Command::Guide(a) => guide(a, &mut run)?,
        Command::BenchTSweep(a) => bench_t_sweep(a, &mut run)?,
        Command::BenchGuidance(a) => bench_guidance(a, &mut run)?,
        Command::GridZeta(a) => grid_zeta(a, &mut run)?,
        Command::ValidatePrior(a) => validate_prior(a, &mut run)?,
        Command::Eval(a) => eval(a, &mut run)?,
        Command::Replay(_) => unreachable!("handled above"),
    }
    run.timing("total", t0.elapsed().as_secs_f64());
    run.finish()
}

fn configure_workers() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{WORKERS_ENV}={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    configure_workers()?;
    execute(&cli.command, &cli.out)
}
