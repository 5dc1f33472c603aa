//! Re-fitting a layer to an edited spectrum.
//!
//! Given the top singular pairs `(S, V)` of `f_W` and new values `S'`, the
//! edited map `x ↦ f_W(V S⁻¹ S' Vᵀ x) − f_W(0)` equals `U S' Vᵀ x` on the
//! edited subspace and `M x` elsewhere. [`fit_parameters`] searches the
//! layer's own parameter family for the closest match by gradient descent
//! on `E‖f_{W'}(x) − f_{W'}(0) − target(x)‖²`; for structured layers the
//! minimum can stay above zero.

use serde::Serialize;

use crate::linalg::Block;
use crate::linops::OperatorSpec;
use crate::rng::{self, ids};
use crate::spectral::SpectrumEstimate;
use crate::tensor::{axpy, dot, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SpectrumEditPlan {
    pub source: OperatorSpec,
    pub sigmas: Vec<f64>,
    /// `[n, k]` right singular vectors, one column per entry of `sigmas`.
    pub vectors: Block,
    pub target: Vec<f64>,
}

impl SpectrumEditPlan {
    pub fn new(source: OperatorSpec, sigmas: Vec<f64>, vectors: Block, target: Vec<f64>) -> Result<Self> {
        let k = sigmas.len();
        if target.len() != k || vectors.cols() != k {
            return Err(Error::shape(&[k], &[target.len()]));
        }
        if vectors.rows() != source.input_dim() {
            return Err(Error::shape(&[source.input_dim(), k], &[vectors.rows(), vectors.cols()]));
        }
        if target.iter().chain(&sigmas).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spectrum edit"));
        }
        for (i, (s, t)) in sigmas.iter().zip(&target).enumerate() {
            if *s <= 0.0 && s != t {
                return Err(Error::RankDeficient { index: i, value: *s });
            }
        }
        Ok(Self { source, sigmas, vectors, target })
    }

    /// Plan from an extracted estimate.
    pub fn from_estimate(source: OperatorSpec, est: &SpectrumEstimate, target: Vec<f64>) -> Result<Self> {
        Self::new(source, est.sigmas.clone(), est.vectors.clone(), target)
    }

    /// Flat-slice form of [`target_action`].
    fn action(&self, x: &[f64]) -> Vec<f64> {
        let mut z = x.to_vec();
        for (j, v) in self.vectors.columns().enumerate() {
            let (s, t) = (self.sigmas[j], self.target[j]);
            if s == t {
                continue;
            }
            axpy((t / s - 1.0) * dot(v, x), v, &mut z);
        }
        self.source.linear_part().linear(&z)
    }
}

/// `f_W(V S⁻¹ S' Vᵀ x) − f_W(0)`, applied to the top-`k` subspace only.
pub fn target_action(plan: &SpectrumEditPlan, x: &Tensor) -> Result<Tensor> {
    let n = plan.source.input_dim();
    if x.len() != n {
        return Err(Error::shape(&plan.source.input_shape(), x.shape()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("edit input"));
    }
    Tensor::new(plan.source.output_shape(), plan.action(x.data()))
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    #[serde(skip)]
    pub fitted: OperatorSpec,
    /// `√(mean‖f_{W'}(x) − f_{W'}(0) − target(x)‖²)` on held-out inputs.
    pub residual_rms: f64,
    pub iterations: usize,
    /// Learning rate after any divergence backoff.
    pub lr: f64,
    /// Training objective `mean ½‖r‖²` before every epoch.
    #[serde(skip)]
    pub objective: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub samples: usize,
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    /// Stop once the training objective falls below this value.
    pub tol: f64,
}

impl FitConfig {
    pub fn new(samples: usize) -> Self {
        Self { samples, seed: 0, lr: 1e-2, epochs: 500, tol: 0.0 }
    }
}

/// Times the learning rate is divided by ten before giving up.
const MAX_BACKOFFS: usize = 6;

struct Batch {
    xs: Vec<Vec<f64>>,
    ys: Vec<Vec<f64>>,
}

impl Batch {
    fn draw(plan: &SpectrumEditPlan, count: usize, seed: u64, stream: u64) -> Self {
        let mut r = rng::stream(seed, stream);
        let n = plan.source.input_dim();
        let xs: Vec<Vec<f64>> = (0..count).map(|_| rng::normal_vec(&mut r, n)).collect();
        let ys = xs.iter().map(|x| plan.action(x)).collect();
        Self { xs, ys }
    }

    /// Mean `½‖M' x − y‖²`.
    fn objective(&self, lin: &OperatorSpec) -> f64 {
        let total: f64 = self
            .xs
            .iter()
            .zip(&self.ys)
            .map(|(x, y)| {
                let mut r = lin.linear(x);
                axpy(-1.0, y, &mut r);
                0.5 * dot(&r, &r)
            })
            .sum();
        total / self.xs.len() as f64
    }
}

/// Gradient descent on the mean squared mismatch with the edited action
/// over `cfg.samples` standard-normal inputs, starting from the source
/// parameters. A run whose objective grows tenfold is restarted with a
/// ten times smaller step; after repeated failures the fit aborts.
pub fn fit_parameters(plan: &SpectrumEditPlan, cfg: &FitConfig) -> Result<FitReport> {
    if cfg.samples == 0 {
        return Err(Error::InvalidArgument("samples must be >= 1".into()));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if plan.source.params().tensors.is_empty() {
        return Err(Error::InvalidArgument("operator has no trainable parameters".into()));
    }
    let train = Batch::draw(plan, cfg.samples, cfg.seed, ids::FIT_TRAIN);
    let heldout = Batch::draw(plan, plan.source.input_dim().max(64), cfg.seed, ids::FIT_HELDOUT);

    let mut lr = cfg.lr;
    for _ in 0..=MAX_BACKOFFS {
        if let Some((fitted, objective)) = descend(plan, &train, lr, cfg)? {
            let rms = (2.0 * heldout.objective(&fitted.linear_part())).sqrt();
            return Ok(FitReport { fitted, residual_rms: rms, iterations: objective.len(), lr, objective });
        }
        lr /= 10.0;
    }
    Err(Error::Divergence(format!("objective grew tenfold even at learning rate {lr:e}")))
}

/// `None` when the objective blows up.
fn descend(
    plan: &SpectrumEditPlan,
    batch: &Batch,
    lr: f64,
    cfg: &FitConfig,
) -> Result<Option<(OperatorSpec, Vec<f64>)>> {
    let mut cur = plan.source.clone();
    let initial = batch.objective(&cur.linear_part());
    let inv = 1.0 / batch.xs.len() as f64;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let lin = cur.linear_part();
        let mut grad = cur.params().zeros_like();
        let mut obj = 0.0;
        for (x, y) in batch.xs.iter().zip(&batch.ys) {
            let mut r = lin.linear(x);
            axpy(-1.0, y, &mut r);
            obj += 0.5 * dot(&r, &r);
            grad.axpy(inv, &lin.grad_flat(x, &r));
        }
        obj *= inv;
        if !obj.is_finite() || obj > 10.0 * initial.max(f64::MIN_POSITIVE) {
            return Ok(None);
        }
        if obj <= cfg.tol {
            return Ok(Some((cur, history)));
        }
        history.push(obj);
        let mut next = cur.params();
        next.axpy(-lr, &grad);
        if next.tensors.iter().any(|t| !t.is_finite()) {
            return Ok(None);
        }
        cur = cur.with_params(&next)?;
    }
    Ok(Some((cur, history)))
}
