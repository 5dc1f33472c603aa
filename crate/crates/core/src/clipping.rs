//! Spectral-norm clipping.
//!
//! [`clip_top`] pushes the largest singular value down to a target `c` by
//! least squares on the current top singular pair: it fits `M' v₁` to
//! `(c/σ₁) M v₁` with a few gradient steps on the layer's own parameters,
//! then probes for the new largest value from a fresh random start and
//! repeats while it is still above `c`. [`fast_clip_run`] interleaves this
//! with training, tracking `(σ₁, v₁)` with one warm-started iteration per
//! step and clipping only every few steps.
//!
//! Fitting always runs on the operator's linear part so that biases, `β`
//! and running means cannot leak into the objective.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::{BatchNormSpec, ConvSpec, OperatorSpec, ParamDelta};
use crate::rng::ids;
use crate::spectral::{power_qr, random_block, svd_oracle, track_step, PowerQrConfig, SpectrumEstimate};
use crate::tensor::axpy;

/// How the inner fit turns a gradient into a parameter step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// `W ← W − λ ∇`.
    Fixed,
    /// `W ← W − λ α ∇` with `α = ‖∇‖² / ‖J∇‖²`, the exact minimiser of the
    /// linearised objective along `−∇`. `α = 1` for dense layers, so the
    /// two rules agree there; for convolutions `α` absorbs the curvature
    /// added by weight sharing.
    #[default]
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    /// Target spectral norm `c`.
    pub target: f64,
    /// Step size `λ` of the inner least-squares fit, in `(0, 1]`.
    pub lambda: f64,
    pub step_rule: StepRule,
    /// Inner gradient steps per pass (`N`).
    pub inner_steps: usize,
    /// PowerQR iterations for every fresh probe (`P`).
    pub probe_iters: usize,
    /// Stop once `σ₁ ≤ c (1 + tol)`.
    pub tol: f64,
    pub max_passes: usize,
    /// PowerQR shift used by the probes.
    pub shift: f64,
    pub seed: u64,
}

impl ClipConfig {
    pub fn new(target: f64) -> Self {
        Self {
            target,
            lambda: 1.0,
            step_rule: StepRule::Normalized,
            inner_steps: 1,
            probe_iters: 10,
            tol: 1e-3,
            max_passes: 32,
            shift: 1.0,
            seed: 0,
        }
    }

    /// Defaults with `λ` picked for the operator's kind.
    pub fn for_operator(op: &OperatorSpec, target: f64) -> Self {
        Self { lambda: default_lambda(op), ..Self::new(target) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.target > 0.0 && self.target.is_finite()) {
            return bad(format!("target must be positive, got {}", self.target));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda must lie in (0, 1], got {}", self.lambda));
        }
        if self.inner_steps == 0 || self.probe_iters == 0 || self.max_passes == 0 {
            return bad("inner_steps, probe_iters and max_passes must be >= 1".into());
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return bad(format!("tol must be finite and >= 0, got {}", self.tol));
        }
        if !(self.shift >= 0.0 && self.shift.is_finite()) {
            return bad(format!("shift must be finite and >= 0, got {}", self.shift));
        }
        Ok(())
    }

    fn threshold(&self) -> f64 {
        self.target * (1.0 + self.tol)
    }
}

/// `1` for single layers and `0.5` for compositions, whose fit is not
/// linear in the parameters.
pub fn default_lambda(op: &OperatorSpec) -> f64 {
    match op {
        OperatorSpec::Dense(_) | OperatorSpec::BatchNorm(_) | OperatorSpec::Conv(_) => 1.0,
        OperatorSpec::Composition(_) => 0.5,
    }
}

#[derive(Debug, Clone)]
pub struct ClipOutcome {
    pub op: OperatorSpec,
    /// Latest `(σ₁, v₁)` probe of `op`.
    pub estimate: SpectrumEstimate,
    pub initial_sigma: f64,
    /// Outer while-loop passes that changed the parameters.
    pub passes: usize,
    /// `true` when the final probe is within `c (1 + tol)`.
    pub converged: bool,
}

impl ClipOutcome {
    pub fn sigma(&self) -> f64 {
        self.estimate.sigma1()
    }

    pub fn clipped(&self) -> bool {
        self.passes > 0
    }
}

/// `(σ₁, v₁)` from a fresh standard-normal vector on stream `counter`.
pub fn fresh_probe(
    op: &OperatorSpec,
    iterations: usize,
    shift: f64,
    seed: u64,
    counter: u64,
) -> Result<SpectrumEstimate> {
    let x0 = random_block(op.input_dim(), 1, seed, ids::probe(counter));
    let cfg = PowerQrConfig { k: 1, iterations, shift, seed, ..PowerQrConfig::default() };
    power_qr(op, &cfg, Some(&x0))
}

/// `N` gradient steps of `½‖M' v − target‖²` on the parameters of `op`,
/// returning the updated operator and the objective before every step.
pub fn fit_direction(
    op: &OperatorSpec,
    v: &[f64],
    target: &[f64],
    lambda: f64,
    rule: StepRule,
    steps: usize,
) -> Result<(OperatorSpec, Vec<f64>)> {
    let mut cur = op.clone();
    let mut objective = Vec::with_capacity(steps);
    for _ in 0..steps {
        let lin = cur.linear_part();
        let mut r = lin.linear(v);
        axpy(-1.0, target, &mut r);
        objective.push(0.5 * r.iter().map(|x| x * x).sum::<f64>());
        let g = lin.grad_flat(v, &r);
        let alpha = match rule {
            StepRule::Fixed => 1.0,
            StepRule::Normalized => {
                let jg = lin.param_jvp(v, &g);
                let curvature = jg.iter().map(|x| x * x).sum::<f64>();
                if curvature == 0.0 {
                    break;
                }
                g.dot(&g) / curvature
            }
        };
        cur = cur.add_scaled_params(-lambda * alpha, &g)?;
    }
    Ok((cur, objective))
}

/// Clips the largest singular values of `op` down to `cfg.target`.
///
/// `warm` supplies a current `(σ₁, v₁)`; without it one is probed first.
/// Passes stop when the probed `σ₁` is within `c (1 + tol)` or after
/// `max_passes`, in which case the outcome is flagged as not converged.
pub fn clip_top(op: &OperatorSpec, cfg: &ClipConfig, warm: Option<&SpectrumEstimate>) -> Result<ClipOutcome> {
    cfg.validate()?;
    if op.params().tensors.is_empty() {
        return Err(Error::InvalidArgument("operator has no trainable parameters".into()));
    }
    let n = op.input_dim();
    let mut est = match warm {
        Some(w) if w.vectors.rows() != n => return Err(Error::shape(&[n, w.k()], &[w.vectors.rows(), w.k()])),
        Some(w) => w.clone(),
        None => fresh_probe(op, cfg.probe_iters, cfg.shift, cfg.seed, 0)?,
    };
    let initial_sigma = est.sigma1();
    let mut cur = op.clone();
    let mut passes = 0;

    while est.sigma1() > cfg.threshold() && passes < cfg.max_passes {
        let v = est.vectors.col(0).to_vec();
        let mut target = cur.linear(&v);
        let scale = cfg.target / est.sigma1();
        target.iter_mut().for_each(|t| *t *= scale);
        cur = fit_direction(&cur, &v, &target, cfg.lambda, cfg.step_rule, cfg.inner_steps)?.0;
        passes += 1;
        est = fresh_probe(&cur, cfg.probe_iters, cfg.shift, cfg.seed, passes as u64)?;
    }

    Ok(ClipOutcome { converged: est.sigma1() <= cfg.threshold(), op: cur, estimate: est, initial_sigma, passes })
}

/// Divides every parameter so that the whole spectrum shrinks by `c/σ₁`
/// when the probed `σ₁` exceeds `c`.
pub fn scale_clip(op: &OperatorSpec, target: f64, probe_iters: usize, seed: u64) -> Result<OperatorSpec> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidArgument(format!("target must be positive, got {target}")));
    }
    let est = power_qr(op, &PowerQrConfig::new(1, probe_iters).with_seed(seed), None)?;
    scale_to(op, est.sigma1(), target)
}

fn scale_to(op: &OperatorSpec, sigma: f64, target: f64) -> Result<OperatorSpec> {
    if sigma > target {
        op.scale_params(target / sigma)
    } else {
        Ok(op.clone())
    }
}

/// Rescales every channel whose factor `|γᵢ|/√(varᵢ+ε)` exceeds `c` so
/// that it equals `c`; `β` and the statistics are untouched.
pub fn bn_direct_clip(bn: &BatchNormSpec, target: f64) -> Result<BatchNormSpec> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidArgument(format!("target must be positive, got {target}")));
    }
    let mut gamma = bn.gamma().clone();
    for (c, g) in gamma.data_mut().iter_mut().enumerate() {
        let denom = (bn.running_var().data()[c] + bn.epsilon()).sqrt();
        if g.abs() / denom > target {
            *g = g.signum() * target * denom;
        }
    }
    let mut out = bn.clone();
    out.gamma = gamma;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConcatOutcome {
    pub conv: ConvSpec,
    pub bn: BatchNormSpec,
    pub outcome: ClipOutcome,
}

/// Clips the composition `bn ∘ conv` as one operator; the update is shared
/// between the kernel and `γ` through the chain rule.
pub fn concat_clip(conv: &ConvSpec, bn: &BatchNormSpec, cfg: &ClipConfig) -> Result<ConcatOutcome> {
    let comp = OperatorSpec::compose(vec![conv.clone().into(), bn.clone().into()])?;
    let outcome = clip_top(&comp, cfg, None)?;
    let (OperatorSpec::Conv(c), OperatorSpec::BatchNorm(b)) =
        (outcome.op.stage(0)?.clone(), outcome.op.stage(1)?.clone())
    else {
        unreachable!("composition keeps its stage kinds")
    };
    Ok(ConcatOutcome { conv: c, bn: b, outcome })
}

// ---- training-interleaved clipping ------------------------------------

/// What one training step hands back: new parameters and, optionally, the
/// loss it measured.
#[derive(Debug, Clone)]
pub struct TrainerStep {
    pub params: ParamDelta,
    pub loss: Option<f64>,
}

/// Anything that can advance the parameters by one optimisation step.
pub trait Trainer {
    fn step(&mut self, op: &OperatorSpec, step: usize) -> Result<TrainerStep>;
}

impl<F> Trainer for F
where
    F: FnMut(&OperatorSpec, usize) -> Result<TrainerStep>,
{
    fn step(&mut self, op: &OperatorSpec, step: usize) -> Result<TrainerStep> {
        self(op, step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMethod {
    /// [`clip_top`]: projection of the top singular values.
    Top,
    /// [`scale_clip`]-style uniform rescaling.
    Scale,
}

/// Part of the model a schedule watches and clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClipScope {
    Whole,
    Stage(usize),
}

impl ClipScope {
    fn view(self, op: &OperatorSpec) -> Result<OperatorSpec> {
        match self {
            ClipScope::Whole => Ok(op.clone()),
            ClipScope::Stage(i) => op.stage(i).cloned(),
        }
    }

    fn replace(self, op: &OperatorSpec, part: OperatorSpec) -> Result<OperatorSpec> {
        match self {
            ClipScope::Whole => Ok(part),
            ClipScope::Stage(i) => op.with_stage(i, part),
        }
    }
}

/// A tracked quantity that is clipped every `every` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSchedule {
    pub scope: ClipScope,
    pub every: usize,
    pub method: ClipMethod,
    /// Per-event settings: `max_passes`, `inner_steps` and `probe_iters`
    /// are the while-passes, for-steps and fresh-probe iterations.
    pub clip: ClipConfig,
}

impl ClipSchedule {
    /// One while-pass with one inner step and a 10-iteration fresh probe.
    pub fn every(every: usize, clip: ClipConfig) -> Self {
        Self {
            scope: ClipScope::Whole,
            every,
            method: ClipMethod::Top,
            clip: ClipConfig { max_passes: 1, inner_steps: 1, probe_iters: 10, ..clip },
        }
    }

    pub fn with_scope(mut self, scope: ClipScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn with_method(mut self, method: ClipMethod) -> Self {
        self.method = method;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastClipConfig {
    /// The first schedule drives the metrics columns.
    pub schedules: Vec<ClipSchedule>,
    pub track_per_step: usize,
    pub warmstart_iters: usize,
    pub shift: f64,
    /// Steps between brute-force `σ₁` probes; `None` disables them.
    pub oracle_every: Option<usize>,
    pub record_timing: bool,
    pub seed: u64,
}

impl FastClipConfig {
    /// Clip every `clip_every` steps (default `100`) towards `clip.target`.
    pub fn new(clip: ClipConfig, clip_every: usize) -> Self {
        Self {
            schedules: vec![ClipSchedule::every(clip_every, clip)],
            track_per_step: 1,
            warmstart_iters: 10,
            shift: 1.0,
            oracle_every: Some(100),
            record_timing: true,
            seed: clip.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedules.is_empty() {
            return Err(Error::InvalidArgument("at least one clip schedule is required".into()));
        }
        for s in &self.schedules {
            s.clip.validate()?;
            if s.every == 0 {
                return Err(Error::InvalidArgument("clip_every must be >= 1".into()));
            }
        }
        if self.warmstart_iters == 0 {
            return Err(Error::InvalidArgument("warmstart_iters must be >= 1".into()));
        }
        if self.oracle_every == Some(0) {
            return Err(Error::InvalidArgument("oracle interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// One row per training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub sigma_tracked: f64,
    pub sigma_true: Option<f64>,
    pub loss: Option<f64>,
    pub clip_event: bool,
    pub wall_ns: u64,
}

/// State handed to an observer after every step.
pub struct StepView<'a> {
    pub step: usize,
    pub op: &'a OperatorSpec,
    /// Tracked `σ₁` per schedule, after any clip at this step.
    pub tracked: &'a [f64],
    /// Which schedules clipped at this step.
    pub clipped: &'a [bool],
}

/// Trains for `steps` steps, tracking `(σ₁, v₁)` per schedule with
/// warm-started PowerQR and clipping on each schedule's interval.
///
/// The metrics row for a step is taken after the trainer update and the
/// tracking iteration but before that step's clip.
pub fn fast_clip_run(
    op: &OperatorSpec,
    trainer: &mut dyn Trainer,
    cfg: &FastClipConfig,
    steps: usize,
) -> Result<(OperatorSpec, Vec<MetricsRow>)> {
    fast_clip_run_observed(op, trainer, cfg, steps, &mut |_| Ok(()))
}

pub fn fast_clip_run_observed(
    op: &OperatorSpec,
    trainer: &mut dyn Trainer,
    cfg: &FastClipConfig,
    steps: usize,
    observer: &mut dyn FnMut(&StepView) -> Result<()>,
) -> Result<(OperatorSpec, Vec<MetricsRow>)> {
    cfg.validate()?;
    let mut cur = op.clone();
    let mut tracked = cfg
        .schedules
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let part = s.scope.view(&cur)?;
            let warm = PowerQrConfig {
                k: 1,
                iterations: cfg.warmstart_iters,
                shift: cfg.shift,
                seed: cfg.seed.wrapping_add(i as u64),
                ..PowerQrConfig::default()
            };
            power_qr(&part, &warm, None)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(steps);
    let mut probe_counter = 0u64;
    for step in 1..=steps {
        let started = Instant::now();
        let update = trainer.step(&cur, step)?;
        cur = cur.with_params(&update.params)?;

        for (s, est) in cfg.schedules.iter().zip(tracked.iter_mut()) {
            let part = s.scope.view(&cur)?;
            for _ in 0..cfg.track_per_step {
                *est = track_step(&part, est, cfg.shift)?;
            }
        }

        let sigma_true = match cfg.oracle_every {
            Some(every) if step % every == 0 => Some(svd_oracle(&cfg.schedules[0].scope.view(&cur)?)?[0]),
            _ => None,
        };
        let sigma_tracked = tracked[0].sigma1();

        let mut clipped = vec![false; cfg.schedules.len()];
        for (i, s) in cfg.schedules.iter().enumerate() {
            if step % s.every != 0 {
                continue;
            }
            let part = s.scope.view(&cur)?;
            if clipped[..i].iter().any(|&c| c) {
                // An earlier schedule changed the operator this step.
                let refresh = PowerQrConfig {
                    k: tracked[i].k(),
                    iterations: cfg.warmstart_iters,
                    shift: cfg.shift,
                    ..PowerQrConfig::default()
                };
                tracked[i] = power_qr(&part, &refresh, Some(&tracked[i].vectors))?;
            }
            let est = &tracked[i];
            let (new_part, new_est) = match s.method {
                ClipMethod::Top => {
                    probe_counter += 1;
                    let clip = ClipConfig { seed: cfg.seed ^ (probe_counter << 20), ..s.clip };
                    let out = clip_top(&part, &clip, Some(est))?;
                    clipped[i] = out.clipped();
                    (out.op, out.estimate)
                }
                ClipMethod::Scale => {
                    let sigma = est.sigma1();
                    let mut next = est.clone();
                    if sigma > s.clip.target {
                        clipped[i] = true;
                        next.sigmas.iter_mut().for_each(|x| *x *= s.clip.target / sigma);
                    }
                    (scale_to(&part, sigma, s.clip.target)?, next)
                }
            };
            if clipped[i] {
                cur = s.scope.replace(&cur, new_part)?;
                tracked[i] = new_est;
            }
        }

        let sigmas: Vec<f64> = tracked.iter().map(SpectrumEstimate::sigma1).collect();
        observer(&StepView { step, op: &cur, tracked: &sigmas, clipped: &clipped })?;
        rows.push(MetricsRow {
            step,
            sigma_tracked,
            sigma_true,
            loss: update.loss,
            clip_event: clipped.iter().any(|&c| c),
            wall_ns: if cfg.record_timing { started.elapsed().as_nanos() as u64 } else { 0 },
        });
    }
    Ok((cur, rows))
}

/// Writes `step,sigma_tracked,sigma_true,loss,clip_event,wall_ns` rows.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}
