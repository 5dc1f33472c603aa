//! Desk-scale training loops around [`fast_clip_run`].
//!
//! A least-squares teacher/student regression stands in for real training:
//! targets come from a fixed teacher operator, gradients are exact, and
//! every run is a pure function of its seed.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clipping::{
    fast_clip_run, fast_clip_run_observed, scale_clip, write_metrics_csv, ClipConfig, ClipMethod, ClipSchedule,
    ClipScope, FastClipConfig, StepView, Trainer, TrainerStep,
};
use crate::linops::{BatchNormSpec, ConvSpec, OperatorSpec, PadAmount, PaddingMode, ParamDelta};
use crate::rng::{self, ids, Rng};
use crate::spectral::{power_qr, svd_oracle, PowerQrConfig};
use crate::tensor::{axpy, Tensor};
use crate::{Error, Result};

pub use crate::clipping::MetricsRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    LeastSquares,
    RandomWalk,
    Frozen,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least_squares" | "least-squares" => Ok(Task::LeastSquares),
            "random_walk" | "random-walk" => Ok(Task::RandomWalk),
            "frozen" => Ok(Task::Frozen),
            other => Err(Error::InvalidArgument(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub steps: usize,
    pub lr: f64,
    /// Target noise for `least_squares`, parameter noise for `random_walk`.
    pub noise_scale: f64,
    pub batch: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(task: Task, steps: usize) -> Self {
        Self { task, steps, lr: 1e-3, noise_scale: 0.0, batch: 8, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if self.task == Task::LeastSquares && !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise scale must be >= 0, got {}", self.noise_scale)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean of `½‖f(xᵢ) − yᵢ‖²` over a batch and its exact parameter gradient.
pub fn batch_loss_and_grad(op: &OperatorSpec, xs: &[Tensor], ys: &[Tensor]) -> Result<(f64, ParamDelta)> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "batch needs matching, non-empty inputs and targets ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    let mut grad = op.params().zeros_like();
    let mut loss = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let mut r = op.apply(x)?.into_data();
        if y.len() != r.len() {
            return Err(Error::shape(&op.output_shape(), y.shape()));
        }
        axpy(-1.0, y.data(), &mut r);
        loss += 0.5 * r.iter().map(|v| v * v).sum::<f64>();
        grad.axpy(1.0, &op.grad_flat(x.data(), &r));
    }
    let inv = 1.0 / xs.len() as f64;
    grad.scale(inv);
    Ok((loss * inv, grad))
}

struct LeastSquares {
    teacher: OperatorSpec,
    lr: f64,
    noise: f64,
    batch: usize,
    rng: Rng,
}

impl Trainer for LeastSquares {
    fn step(&mut self, op: &OperatorSpec, _step: usize) -> Result<TrainerStep> {
        if op.input_shape() != self.teacher.input_shape() || op.output_dim() != self.teacher.output_dim() {
            return Err(Error::shape(&self.teacher.input_shape(), &op.input_shape()));
        }
        let n = op.input_dim();
        let mut xs = Vec::with_capacity(self.batch);
        let mut ys = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let x = Tensor::vector(rng::normal_vec(&mut self.rng, n));
            let mut y = self.teacher.affine(x.data());
            if self.noise > 0.0 {
                y.iter_mut().for_each(|v| *v += self.noise * rng::normal(&mut self.rng));
            }
            xs.push(x);
            ys.push(Tensor::vector(y));
        }
        let (loss, grad) = batch_loss_and_grad(op, &xs, &ys)?;
        let mut params = op.params();
        params.axpy(-self.lr, &grad);
        Ok(TrainerStep { params, loss: Some(loss) })
    }
}

struct RandomWalk {
    noise: f64,
    rng: Rng,
}

impl Trainer for RandomWalk {
    fn step(&mut self, op: &OperatorSpec, _step: usize) -> Result<TrainerStep> {
        let mut params = op.params();
        for t in &mut params.tensors {
            for v in t.data_mut() {
                *v += self.noise * rng::normal(&mut self.rng);
            }
        }
        Ok(TrainerStep { params, loss: None })
    }
}

struct Frozen;

impl Trainer for Frozen {
    fn step(&mut self, op: &OperatorSpec, _step: usize) -> Result<TrainerStep> {
        Ok(TrainerStep { params: op.params(), loss: None })
    }
}

/// Builds the per-step callback for `cfg.task`. `least_squares` needs a
/// teacher; its shapes are checked against the student on every step.
pub fn make_trainer(cfg: &TrainConfig, teacher: Option<&OperatorSpec>) -> Result<Box<dyn Trainer>> {
    cfg.validate()?;
    let rng = rng::stream(cfg.seed, ids::TRAINER);
    Ok(match cfg.task {
        Task::LeastSquares => {
            let teacher = teacher
                .ok_or_else(|| Error::InvalidArgument("least_squares training needs a teacher operator".into()))?;
            Box::new(LeastSquares {
                teacher: teacher.clone(),
                lr: cfg.lr,
                noise: cfg.noise_scale,
                batch: cfg.batch,
                rng,
            })
        }
        Task::RandomWalk => Box::new(RandomWalk { noise: cfg.noise_scale, rng }),
        Task::Frozen => Box::new(Frozen),
    })
}

// ---- four-setting conv reproduction ------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvSetting {
    pub kernel: usize,
    pub padding: PaddingMode,
    /// `true` for "same" output size, otherwise symmetric `kernel / 2`.
    pub same: bool,
    pub stride: usize,
}

impl ConvSetting {
    pub fn name(&self) -> String {
        let pad = if self.same { "same-zeros".to_string() } else { self.padding.name().to_string() };
        format!("k{}-{}-s{}", self.kernel, pad, self.stride)
    }

    fn pad_amount(&self) -> PadAmount {
        if self.same {
            PadAmount::Same
        } else {
            let p = self.kernel / 2;
            PadAmount::Symmetric([p, p])
        }
    }

    /// A normal-random kernel for this setting, rescaled to spectral norm
    /// `sigma` (exactly when the operator is small enough to materialize).
    pub fn random_operator(
        &self,
        in_shape: [usize; 3],
        out_channels: usize,
        sigma: f64,
        seed: u64,
        stream: u64,
    ) -> Result<OperatorSpec> {
        let k = self.kernel;
        let mut r = rng::stream(seed, stream);
        let kernel = Tensor::new(
            vec![out_channels, in_shape[0], k, k],
            rng::normal_vec(&mut r, out_channels * in_shape[0] * k * k),
        )?;
        let bias = Tensor::vector(rng::normal_vec(&mut r, out_channels));
        let conv = ConvSpec::conv2d(kernel, Some(bias), [self.stride; 2], self.padding, self.pad_amount(), in_shape)?;
        let op = OperatorSpec::from(conv);
        let s = match svd_oracle(&op) {
            Ok(sv) => sv[0],
            Err(Error::DimensionCap { .. }) => {
                power_qr(&op, &PowerQrConfig::new(1, 2000).with_seed(seed), None)?.sigma1()
            }
            Err(e) => return Err(e),
        };
        op.scale_params(sigma / s)
    }
}

/// The four benchmark layers: reflect, "same" zeros, strided zeros,
/// and a strided 5×5 replicate convolution.
pub fn fig1_settings() -> Vec<ConvSetting> {
    vec![
        ConvSetting { kernel: 3, padding: PaddingMode::Reflect, same: false, stride: 1 },
        ConvSetting { kernel: 3, padding: PaddingMode::Zeros, same: true, stride: 1 },
        ConvSetting { kernel: 3, padding: PaddingMode::Zeros, same: false, stride: 2 },
        ConvSetting { kernel: 5, padding: PaddingMode::Replicate, same: false, stride: 2 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Options {
    pub steps: usize,
    pub clip_every: usize,
    pub target: f64,
    pub input_shape: [usize; 3],
    pub out_channels: usize,
    /// Spectral norm of the random student at step 0.
    pub init_sigma: f64,
    /// Spectral norm of the teacher the student regresses onto.
    pub teacher_sigma: f64,
    pub train: TrainConfig,
    /// Per-event clip settings; `None` uses `ClipConfig::for_operator`.
    pub clip: Option<ClipConfig>,
    /// While-passes per clip event.
    pub passes: usize,
    /// Power iterations of the fresh probe after each pass.
    pub probe_iters: usize,
    pub oracle_every: usize,
}

impl Default for Fig1Options {
    fn default() -> Self {
        Self {
            steps: 2000,
            clip_every: 100,
            target: 1.0,
            input_shape: [1, 16, 16],
            out_channels: 4,
            init_sigma: 1.5,
            teacher_sigma: 2.0,
            train: TrainConfig { lr: 1e-5, ..TrainConfig::new(Task::LeastSquares, 2000) },
            clip: None,
            passes: 10,
            probe_iters: 100,
            oracle_every: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingReport {
    pub setting: String,
    /// Brute-force `σ₁` after the run.
    pub sigma_final: f64,
    pub sigma_initial: f64,
    pub clip_events: usize,
    pub wall_ms: f64,
    /// The same run with uniform rescaling in place of the projection.
    pub sigma_final_scaled: f64,
    /// Max relative spread of `σᵢ(after) / σᵢ(before)` for one
    /// `scale_clip` call on the initial operator.
    pub scale_ratio_spread: f64,
    #[serde(skip)]
    pub metrics: Vec<MetricsRow>,
    #[serde(skip)]
    pub scaled_metrics: Vec<MetricsRow>,
}

/// Summary line of a setting, as written to the report JSON.
#[derive(Debug, Clone, Serialize)]
pub struct SettingSummary<'a> {
    pub setting: &'a str,
    pub sigma_final: f64,
    pub clip_events: usize,
    pub wall_ms: f64,
}

pub fn run_fig1_reproduction(seed: u64) -> Result<Vec<SettingReport>> {
    run_fig1_with(seed, &Fig1Options::default())
}

pub fn run_fig1_with(seed: u64, opts: &Fig1Options) -> Result<Vec<SettingReport>> {
    fig1_settings().iter().enumerate().map(|(i, s)| run_setting(s, seed, i as u64, opts)).collect()
}

pub fn run_setting(setting: &ConvSetting, seed: u64, index: u64, opts: &Fig1Options) -> Result<SettingReport> {
    let student = setting.random_operator(
        opts.input_shape,
        opts.out_channels,
        opts.init_sigma,
        seed,
        ids::trial(ids::HARNESS, 2 * index),
    )?;
    let teacher = student.with_params(
        &setting
            .random_operator(
                opts.input_shape,
                opts.out_channels,
                opts.teacher_sigma,
                seed,
                ids::trial(ids::HARNESS, 2 * index + 1),
            )?
            .params(),
    )?;

    let mut clip = opts.clip.unwrap_or_else(|| ClipConfig::for_operator(&student, opts.target));
    clip.target = opts.target;
    clip.seed = seed;
    let mut schedule = ClipSchedule::every(opts.clip_every, clip);
    schedule.clip.max_passes = opts.passes;
    schedule.clip.probe_iters = opts.probe_iters;
    let mut fc = FastClipConfig::new(clip, opts.clip_every);
    fc.schedules = vec![schedule];
    fc.oracle_every = Some(opts.oracle_every);
    let train = TrainConfig { steps: opts.steps, seed: seed ^ index, ..opts.train };

    let started = Instant::now();
    let mut trainer = make_trainer(&train, Some(&teacher))?;
    let (clipped, metrics) = fast_clip_run(&student, trainer.as_mut(), &fc, opts.steps)?;
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;

    let mut fc_scaled = fc.clone();
    fc_scaled.schedules[0].method = ClipMethod::Scale;
    let mut trainer = make_trainer(&train, Some(&teacher))?;
    let (scaled, scaled_metrics) = fast_clip_run(&student, trainer.as_mut(), &fc_scaled, opts.steps)?;

    let before = svd_oracle(&student)?;
    let after = svd_oracle(&scale_clip(&student, opts.target, 2000, seed)?)?;
    Ok(SettingReport {
        setting: setting.name(),
        sigma_final: svd_oracle(&clipped)?[0],
        sigma_initial: before[0],
        clip_events: metrics.iter().filter(|r| r.clip_event).count(),
        wall_ms,
        sigma_final_scaled: svd_oracle(&scaled)?[0],
        scale_ratio_spread: ratio_spread(&before, &after),
        metrics,
        scaled_metrics,
    })
}

/// Largest relative deviation of the ratios `after[i] / before[i]` from
/// the first ratio, over values above `1e-4 σ₁`. The brute-force oracle
/// squares the spectrum, so smaller values carry relative errors of order
/// `1e-16 (σ₁/σᵢ)²`.
pub fn ratio_spread(before: &[f64], after: &[f64]) -> f64 {
    let floor = 1e-4 * before.first().copied().unwrap_or(0.0);
    let ratios: Vec<f64> = before.iter().zip(after).filter(|(b, _)| **b > floor).map(|(b, a)| a / b).collect();
    let Some(&r0) = ratios.first() else { return 0.0 };
    ratios.iter().map(|r| (r - r0).abs() / r0).fold(0.0, f64::max)
}

/// Writes one metrics CSV per setting and `summary.json` into `dir`.
pub fn write_fig1_reports(dir: &Path, reports: &[SettingReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in reports {
        write_metrics_csv(&dir.join(format!("{}.csv", r.setting)), &r.metrics)?;
        write_metrics_csv(&dir.join(format!("{}-scaled.csv", r.setting)), &r.scaled_metrics)?;
    }
    let summary: Vec<SettingSummary> = reports
        .iter()
        .map(|r| SettingSummary {
            setting: &r.setting,
            sigma_final: r.sigma_final,
            clip_events: r.clip_events,
            wall_ms: r.wall_ms,
        })
        .collect();
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

// ---- conv + batch-norm ------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatOptions {
    pub steps: usize,
    pub conv_every: usize,
    pub concat_every: usize,
    pub target: f64,
    pub input_shape: [usize; 3],
    /// Inflated batch-norm scales; one per output channel.
    pub gamma: Vec<f64>,
    pub init_sigma: f64,
    pub teacher_sigma: f64,
    pub train: TrainConfig,
    pub conv_clip: Option<ClipConfig>,
    pub concat_clip: Option<ClipConfig>,
    /// While-passes per conv clip event.
    pub conv_passes: usize,
    /// While-passes per composition clip event.
    pub concat_passes: usize,
    pub probe_iters: usize,
    pub probe_every: usize,
}

impl Default for ConcatOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            conv_every: 100,
            concat_every: 500,
            target: 1.0,
            input_shape: [1, 16, 16],
            gamma: vec![2.0, 1.5, 3.0, 2.5],
            init_sigma: 1.5,
            teacher_sigma: 1.5,
            train: TrainConfig { lr: 1e-5, ..TrainConfig::new(Task::LeastSquares, 2000) },
            conv_clip: None,
            concat_clip: None,
            conv_passes: 10,
            concat_passes: 32,
            probe_iters: 100,
            probe_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcatProbe {
    pub step: usize,
    pub conv: f64,
    pub bn: f64,
    pub composition: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcatReport {
    pub trajectory: Vec<ConcatProbe>,
    pub conv_events: usize,
    pub concat_events: usize,
    pub wall_ms: f64,
}

impl ConcatReport {
    pub fn last(&self) -> Option<&ConcatProbe> {
        self.trajectory.last()
    }
}

pub fn run_concat_experiment(seed: u64) -> Result<ConcatReport> {
    run_concat_with(seed, &ConcatOptions::default())
}

pub fn run_concat_with(seed: u64, opts: &ConcatOptions) -> Result<ConcatReport> {
    let setting = ConvSetting { kernel: 3, padding: PaddingMode::Zeros, same: true, stride: 1 };
    let channels = opts.gamma.len();
    let [_, h, w] = opts.input_shape;
    let bn_shape = vec![channels, h, w];
    let conv =
        setting.random_operator(opts.input_shape, channels, opts.init_sigma, seed, ids::trial(ids::HARNESS, 100))?;
    let teacher_conv = conv.with_params(
        &setting
            .random_operator(opts.input_shape, channels, opts.teacher_sigma, seed, ids::trial(ids::HARNESS, 101))?
            .params(),
    )?;
    let bn = BatchNormSpec::with_unit_statistics(opts.gamma.clone(), vec![0.0; channels], 1e-5, bn_shape)?;
    let student = OperatorSpec::compose(vec![conv.clone(), bn.clone().into()])?;
    let teacher = OperatorSpec::compose(vec![teacher_conv, bn.into()])?;

    let conv_clip =
        ClipConfig { seed, ..opts.conv_clip.unwrap_or_else(|| ClipConfig::for_operator(&conv, opts.target)) };
    let concat_clip =
        ClipConfig { seed, ..opts.concat_clip.unwrap_or_else(|| ClipConfig::for_operator(&student, opts.target)) };
    let mut conv_schedule = ClipSchedule::every(opts.conv_every, conv_clip).with_scope(ClipScope::Stage(0));
    conv_schedule.clip.max_passes = opts.conv_passes;
    conv_schedule.clip.probe_iters = opts.probe_iters;
    let mut concat_schedule = ClipSchedule::every(opts.concat_every, concat_clip);
    concat_schedule.clip.max_passes = opts.concat_passes;
    concat_schedule.clip.probe_iters = opts.probe_iters;
    let mut fc = FastClipConfig::new(conv_clip, opts.conv_every);
    fc.schedules = vec![conv_schedule, concat_schedule];
    fc.oracle_every = None;
    let train = TrainConfig { steps: opts.steps, seed, ..opts.train };

    let mut trajectory = Vec::new();
    let mut events = [0usize; 2];
    let mut observer = |view: &StepView| -> Result<()> {
        for (e, &c) in events.iter_mut().zip(view.clipped) {
            *e += c as usize;
        }
        if view.step.is_multiple_of(opts.probe_every) {
            trajectory.push(concat_probe(view.step, view.op)?);
        }
        Ok(())
    };
    let started = Instant::now();
    let mut trainer = make_trainer(&train, Some(&teacher))?;
    fast_clip_run_observed(&student, trainer.as_mut(), &fc, opts.steps, &mut observer)?;
    Ok(ConcatReport {
        trajectory,
        conv_events: events[0],
        concat_events: events[1],
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

fn concat_probe(step: usize, op: &OperatorSpec) -> Result<ConcatProbe> {
    let OperatorSpec::BatchNorm(bn) = op.stage(1)? else {
        return Err(Error::Invariant("second stage must be batch-norm".into()));
    };
    Ok(ConcatProbe {
        step,
        conv: svd_oracle(op.stage(0)?)?[0],
        bn: bn.spectral_norm(),
        composition: svd_oracle(op)?[0],
    })
}
