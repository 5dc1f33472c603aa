//! Implicitly linear operators.
//!
//! Every operator is affine, `f(x) = M x + b`, with `M` never stored. The
//! primitives below evaluate `f`, `Mᵀ`, `MᵀM` and the parameter gradient of
//! the squared error, all matrix-free. [`OperatorSpec::materialize`] builds
//! `M` column by column and exists only as a brute-force oracle.

mod batchnorm;
mod conv;
mod dense;
pub mod io;

pub use batchnorm::BatchNormSpec;
pub use conv::{ConvRank, ConvSpec, PadAmount, PaddingMode};
pub use dense::DenseSpec;

use crate::error::{Error, Result};
use crate::linalg::Block;
use crate::tensor::{axpy, dot, Tensor};

/// Default ceiling on the input dimension accepted by [`OperatorSpec::materialize`].
pub const MATERIALIZE_CAP: usize = 4096;

/// Columns processed together by the block Gram product. Wider tiles spill
/// the interleaved conv planes out of cache.
const GRAM_TILE: usize = 8;

/// One implicitly linear layer, or a chain of them.
#[derive(Debug, Clone, PartialEq)]
pub enum OperatorSpec {
    Dense(DenseSpec),
    Conv(ConvSpec),
    BatchNorm(BatchNormSpec),
    Composition(CompositionSpec),
}

/// Stages evaluated first to last.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionSpec {
    stages: Vec<OperatorSpec>,
}

impl CompositionSpec {
    pub fn new(stages: Vec<OperatorSpec>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Invariant("a composition needs at least one stage".into()));
        }
        for pair in stages.windows(2) {
            let (a, b) = (pair[0].output_dim(), pair[1].input_dim());
            if a != b {
                return Err(Error::shape(&[b], &[a]));
            }
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[OperatorSpec] {
        &self.stages
    }
}

/// Parameter-shaped values, one tensor per leaf layer in evaluation order:
/// the dense weight, the conv kernel, or the batch-norm `gamma`. Biases are
/// not part of it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDelta {
    pub tensors: Vec<Tensor>,
}

impl ParamDelta {
    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect() }
    }

    pub fn dot(&self, other: &ParamDelta) -> f64 {
        self.tensors.iter().zip(&other.tensors).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamDelta) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            axpy(alpha, b.data(), a.data_mut());
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn same_shapes(&self, other: &ParamDelta) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }
}

impl From<DenseSpec> for OperatorSpec {
    fn from(s: DenseSpec) -> Self {
        OperatorSpec::Dense(s)
    }
}

impl From<ConvSpec> for OperatorSpec {
    fn from(s: ConvSpec) -> Self {
        OperatorSpec::Conv(s)
    }
}

impl From<BatchNormSpec> for OperatorSpec {
    fn from(s: BatchNormSpec) -> Self {
        OperatorSpec::BatchNorm(s)
    }
}

impl From<CompositionSpec> for OperatorSpec {
    fn from(s: CompositionSpec) -> Self {
        OperatorSpec::Composition(s)
    }
}

impl OperatorSpec {
    pub fn compose(stages: Vec<OperatorSpec>) -> Result<Self> {
        CompositionSpec::new(stages).map(OperatorSpec::Composition)
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            OperatorSpec::Dense(d) => vec![d.in_features()],
            OperatorSpec::Conv(c) => c.input_shape(),
            OperatorSpec::BatchNorm(b) => b.input_shape().to_vec(),
            OperatorSpec::Composition(c) => c.stages[0].input_shape(),
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match self {
            OperatorSpec::Dense(d) => vec![d.out_features()],
            OperatorSpec::Conv(c) => c.output_shape(),
            OperatorSpec::BatchNorm(b) => b.input_shape().to_vec(),
            OperatorSpec::Composition(c) => c.stages.last().expect("non-empty").output_shape(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape().iter().product()
    }

    pub fn output_dim(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// Number of top-level stages; a plain layer counts as one.
    pub fn stage_count(&self) -> usize {
        match self {
            OperatorSpec::Composition(c) => c.stages.len(),
            _ => 1,
        }
    }

    /// Top-level stage `index`; a plain layer is its own stage 0.
    pub fn stage(&self, index: usize) -> Result<&OperatorSpec> {
        match self {
            OperatorSpec::Composition(c) => c.stages.get(index),
            leaf => (index == 0).then_some(leaf),
        }
        .ok_or_else(|| Error::InvalidArgument(format!("no stage {index} in a {}-stage operator", self.stage_count())))
    }

    /// Same operator with stage `index` swapped for `stage`, which must keep
    /// its input and output shapes.
    pub fn with_stage(&self, index: usize, stage: OperatorSpec) -> Result<Self> {
        let old = self.stage(index)?;
        if old.input_shape() != stage.input_shape() || old.output_shape() != stage.output_shape() {
            return Err(Error::shape(&old.input_shape(), &stage.input_shape()));
        }
        Ok(match self {
            OperatorSpec::Composition(c) => {
                let mut stages = c.stages.clone();
                stages[index] = stage;
                OperatorSpec::Composition(CompositionSpec { stages })
            }
            _ => stage,
        })
    }

    /// Leaf layers in evaluation order.
    pub fn leaves(&self) -> Vec<&OperatorSpec> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a OperatorSpec>) {
        match self {
            OperatorSpec::Composition(c) => c.stages.iter().for_each(|s| s.collect_leaves(out)),
            leaf => out.push(leaf),
        }
    }

    // ---- slice-level kernels -------------------------------------------

    /// `M x` (bias-free) on a flat input.
    pub(crate) fn linear(&self, x: &[f64]) -> Vec<f64> {
        match self {
            OperatorSpec::Composition(c) => {
                let mut cur = x.to_vec();
                for s in &c.stages {
                    cur = s.linear(&cur);
                }
                cur
            }
            leaf => {
                let mut out = vec![0.0; leaf.output_dim()];
                match leaf {
                    OperatorSpec::Dense(d) => d.forward_linear(x, &mut out),
                    OperatorSpec::Conv(c) => c.forward_linear(x, &mut out),
                    OperatorSpec::BatchNorm(b) => b.forward_linear(x, &mut out),
                    OperatorSpec::Composition(_) => unreachable!(),
                }
                out
            }
        }
    }

    /// `f(x) = M x + b` on a flat input.
    pub(crate) fn affine(&self, x: &[f64]) -> Vec<f64> {
        match self {
            OperatorSpec::Composition(c) => {
                let mut cur = x.to_vec();
                for s in &c.stages {
                    cur = s.affine(&cur);
                }
                cur
            }
            leaf => {
                let mut out = leaf.linear(x);
                match leaf {
                    OperatorSpec::Dense(d) => d.add_offset(&mut out),
                    OperatorSpec::Conv(c) => c.add_offset(&mut out),
                    OperatorSpec::BatchNorm(b) => b.add_offset(&mut out),
                    OperatorSpec::Composition(_) => unreachable!(),
                }
                out
            }
        }
    }

    /// `Mᵀ y` on a flat output-space vector.
    pub(crate) fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        match self {
            OperatorSpec::Composition(c) => {
                let mut cur = y.to_vec();
                for s in c.stages.iter().rev() {
                    cur = s.adjoint(&cur);
                }
                cur
            }
            leaf => {
                let mut out = vec![0.0; leaf.input_dim()];
                match leaf {
                    OperatorSpec::Dense(d) => d.adjoint(y, &mut out),
                    OperatorSpec::Conv(c) => c.adjoint(y, &mut out),
                    OperatorSpec::BatchNorm(b) => b.adjoint(y, &mut out),
                    OperatorSpec::Composition(_) => unreachable!(),
                }
                out
            }
        }
    }

    /// `MᵀM x`
    pub(crate) fn gram(&self, x: &[f64]) -> Vec<f64> {
        self.adjoint(&self.linear(x))
    }

    /// `M` applied to `lanes` inputs stored interleaved (`x[i * lanes + l]`).
    fn linear_lanes(&self, x: &[f64], lanes: usize) -> Vec<f64> {
        match self {
            OperatorSpec::Composition(c) => {
                let mut cur = x.to_vec();
                for s in &c.stages {
                    cur = s.linear_lanes(&cur, lanes);
                }
                cur
            }
            leaf => {
                let mut out = vec![0.0; leaf.output_dim() * lanes];
                match leaf {
                    OperatorSpec::Dense(d) => d.forward_lanes(x, &mut out, lanes),
                    OperatorSpec::Conv(c) => c.forward_lanes(x, &mut out, lanes),
                    OperatorSpec::BatchNorm(b) => b.forward_lanes(x, &mut out, lanes),
                    OperatorSpec::Composition(_) => unreachable!(),
                }
                out
            }
        }
    }

    fn adjoint_lanes(&self, y: &[f64], lanes: usize) -> Vec<f64> {
        match self {
            OperatorSpec::Composition(c) => {
                let mut cur = y.to_vec();
                for s in c.stages.iter().rev() {
                    cur = s.adjoint_lanes(&cur, lanes);
                }
                cur
            }
            leaf => {
                let mut out = vec![0.0; leaf.input_dim() * lanes];
                match leaf {
                    OperatorSpec::Dense(d) => d.adjoint_lanes(y, &mut out, lanes),
                    OperatorSpec::Conv(c) => c.adjoint_lanes(y, &mut out, lanes),
                    OperatorSpec::BatchNorm(b) => b.forward_lanes(y, &mut out, lanes),
                    OperatorSpec::Composition(_) => unreachable!(),
                }
                out
            }
        }
    }

    /// `MᵀM X`, sweeping the kernel once per [`GRAM_TILE`] interleaved columns so
    /// that every inner loop runs over a whole tile at once.
    pub(crate) fn gram_block(&self, x: &Block) -> Block {
        let (n, k) = (x.rows(), x.cols());
        let mut out = Block::zeros(n, k);
        let mut start = 0;
        while start < k {
            let lanes = GRAM_TILE.min(k - start);
            if lanes == 1 {
                out.col_mut(start).copy_from_slice(&self.gram(x.col(start)));
                start += 1;
                continue;
            }
            let mut buf = vec![0.0; n * lanes];
            for l in 0..lanes {
                for (i, v) in x.col(start + l).iter().enumerate() {
                    buf[i * lanes + l] = *v;
                }
            }
            let y = self.adjoint_lanes(&self.linear_lanes(&buf, lanes), lanes);
            for l in 0..lanes {
                for (i, v) in out.col_mut(start + l).iter_mut().enumerate() {
                    *v = y[i * lanes + l];
                }
            }
            start += lanes;
        }
        out
    }

    fn grad_into(&self, x: &[f64], residual: &[f64], out: &mut Vec<Tensor>) {
        match self {
            OperatorSpec::Composition(c) => {
                let mut inputs = Vec::with_capacity(c.stages.len());
                let mut cur = x.to_vec();
                for s in &c.stages {
                    let next = s.affine(&cur);
                    inputs.push(cur);
                    cur = next;
                }
                // Back-propagate the residual through downstream adjoints.
                let mut per_stage = Vec::with_capacity(c.stages.len());
                let mut r = residual.to_vec();
                for (s, xi) in c.stages.iter().zip(&inputs).rev() {
                    let mut g = Vec::new();
                    s.grad_into(xi, &r, &mut g);
                    per_stage.push(g);
                    r = s.adjoint(&r);
                }
                per_stage.into_iter().rev().for_each(|g| out.extend(g));
            }
            OperatorSpec::Dense(d) => out.push(d.param_grad(x, residual)),
            OperatorSpec::Conv(c) => out.push(c.param_grad(x, residual)),
            OperatorSpec::BatchNorm(b) => out.push(b.param_grad(x, residual)),
        }
    }

    pub(crate) fn grad_flat(&self, x: &[f64], residual: &[f64]) -> ParamDelta {
        let mut tensors = Vec::new();
        self.grad_into(x, residual, &mut tensors);
        ParamDelta { tensors }
    }

    /// Directional derivative of `x ↦ M x` with respect to the parameters,
    /// `d/dt M(W + tΔ) x` at `t = 0`, by forward-mode through the stages.
    pub(crate) fn param_jvp(&self, x: &[f64], delta: &ParamDelta) -> Vec<f64> {
        let mut it = delta.tensors.iter();
        self.jvp_inner(x, &mut it).1
    }

    fn jvp_inner<'a>(&self, x: &[f64], it: &mut impl Iterator<Item = &'a Tensor>) -> (Vec<f64>, Vec<f64>) {
        match self {
            OperatorSpec::Composition(c) => {
                let mut primal = x.to_vec();
                let mut tangent = vec![0.0; x.len()];
                for s in &c.stages {
                    let (p, t_param) = s.jvp_inner(&primal, it);
                    let mut t = s.linear(&tangent);
                    axpy(1.0, &t_param, &mut t);
                    primal = p;
                    tangent = t;
                }
                (primal, tangent)
            }
            leaf => {
                // Every leaf is linear in its parameters.
                let d = leaf.replace_params(it);
                (leaf.linear(x), d.linear(x))
            }
        }
    }

    // ---- checked public primitives -------------------------------------

    fn check_input(&self, x: &Tensor) -> Result<()> {
        check_shape(&self.input_shape(), x)?;
        if !x.is_finite() {
            return Err(Error::NonFinite("operator input"));
        }
        Ok(())
    }

    fn check_output(&self, y: &Tensor) -> Result<()> {
        check_shape(&self.output_shape(), y)?;
        if !y.is_finite() {
            return Err(Error::NonFinite("output-space vector"));
        }
        Ok(())
    }

    /// `f(x) = M x + b`. Accepts `x` in the operator's input shape or flattened.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        finite(Tensor::new(self.output_shape(), self.affine(x.data()))?)
    }

    /// `Mᵀ y`; the bias plays no part.
    pub fn adjoint_apply(&self, y: &Tensor) -> Result<Tensor> {
        self.check_output(y)?;
        finite(Tensor::new(self.input_shape(), self.adjoint(y.data()))?)
    }

    /// `MᵀM X` for an `[n, k]` block whose columns are flattened inputs,
    /// evaluated as `Mᵀ (f(X) - f(0))` so the bias cancels.
    pub fn gram_apply(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.input_dim();
        let [rows, _] = x.dims2()?;
        if rows != n {
            return Err(Error::shape(&[n, x.shape()[1]], x.shape()));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("gram input"));
        }
        let block = Block::from_tensor(x)?;
        let f0 = self.affine(&vec![0.0; n]);
        let cols = block
            .columns()
            .map(|c| {
                let mut fx = self.affine(c);
                axpy(-1.0, &f0, &mut fx);
                self.adjoint(&fx)
            })
            .collect();
        finite(Block::from_columns(cols)?.to_tensor())
    }

    /// Gradient of `½‖f(x) − t‖²` with respect to the trainable parameters,
    /// given `residual = f(x) − t`.
    pub fn weight_grad(&self, x: &Tensor, residual: &Tensor) -> Result<ParamDelta> {
        self.check_input(x)?;
        self.check_output(residual)?;
        Ok(self.grad_flat(x.data(), residual.data()))
    }

    /// Explicit `[m, n]` matrix of the linear part, refusing inputs wider
    /// than [`MATERIALIZE_CAP`].
    pub fn materialize(&self) -> Result<Tensor> {
        self.materialize_with_cap(MATERIALIZE_CAP)
    }

    pub fn materialize_with_cap(&self, cap: usize) -> Result<Tensor> {
        let (m, n) = (self.output_dim(), self.input_dim());
        if n > cap {
            return Err(Error::DimensionCap { dim: n, cap });
        }
        let mut out = vec![0.0; m * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.linear(&e);
            e[j] = 0.0;
            for i in 0..m {
                out[i * n + j] = col[i];
            }
        }
        Tensor::new(vec![m, n], out)
    }

    // ---- parameter manipulation ----------------------------------------

    /// Current trainable parameters.
    pub fn params(&self) -> ParamDelta {
        let tensors = self
            .leaves()
            .into_iter()
            .map(|leaf| match leaf {
                OperatorSpec::Dense(d) => d.weight.clone(),
                OperatorSpec::Conv(c) => c.kernel.clone(),
                OperatorSpec::BatchNorm(b) => b.gamma.clone(),
                OperatorSpec::Composition(_) => unreachable!(),
            })
            .collect();
        ParamDelta { tensors }
    }

    /// Same operator with its trainable parameters replaced.
    pub fn with_params(&self, params: &ParamDelta) -> Result<Self> {
        if !self.params().same_shapes(params) {
            return Err(Error::Invariant("parameter shapes do not match the operator".into()));
        }
        if params.tensors.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        let mut it = params.tensors.iter();
        Ok(self.replace_params(&mut it))
    }

    fn replace_params<'a>(&self, it: &mut impl Iterator<Item = &'a Tensor>) -> Self {
        match self {
            OperatorSpec::Composition(c) => OperatorSpec::Composition(CompositionSpec {
                stages: c.stages.iter().map(|s| s.replace_params(it)).collect(),
            }),
            OperatorSpec::Dense(d) => {
                OperatorSpec::Dense(DenseSpec { weight: it.next().expect("checked").clone(), ..d.clone() })
            }
            OperatorSpec::Conv(c) => {
                OperatorSpec::Conv(ConvSpec { kernel: it.next().expect("checked").clone(), ..c.clone() })
            }
            OperatorSpec::BatchNorm(b) => {
                OperatorSpec::BatchNorm(BatchNormSpec { gamma: it.next().expect("checked").clone(), ..b.clone() })
            }
        }
    }

    /// Parameters moved to `params + alpha * delta`.
    pub fn add_scaled_params(&self, alpha: f64, delta: &ParamDelta) -> Result<Self> {
        let mut p = self.params();
        if !p.same_shapes(delta) {
            return Err(Error::Invariant("delta shapes do not match the operator".into()));
        }
        p.axpy(alpha, delta);
        self.with_params(&p)
    }

    /// Multiplies the linear parameters so that every singular value scales
    /// by `factor`. Biases and `beta` are untouched. For a composition of
    /// `s` parameterised stages each stage is scaled by `factor^(1/s)`.
    pub fn scale_params(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale factor must be positive, got {factor}")));
        }
        let mut p = self.params();
        let per_stage = factor.powf(1.0 / p.tensors.len() as f64);
        p.scale(per_stage);
        self.with_params(&p)
    }

    /// The same operator with every offset removed, so that `f(x) = M x`
    /// exactly: biases, `beta` and the batch-norm running mean are zeroed.
    pub fn linear_part(&self) -> Self {
        match self {
            OperatorSpec::Composition(c) => OperatorSpec::Composition(CompositionSpec {
                stages: c.stages.iter().map(OperatorSpec::linear_part).collect(),
            }),
            OperatorSpec::Dense(d) => {
                OperatorSpec::Dense(DenseSpec { bias: Tensor::zeros(d.bias.shape().to_vec()), ..d.clone() })
            }
            OperatorSpec::Conv(c) => {
                OperatorSpec::Conv(ConvSpec { bias: Tensor::zeros(c.bias.shape().to_vec()), ..c.clone() })
            }
            OperatorSpec::BatchNorm(b) => OperatorSpec::BatchNorm(BatchNormSpec {
                beta: Tensor::zeros(b.beta.shape().to_vec()),
                running_mean: Tensor::zeros(b.running_mean.shape().to_vec()),
                ..b.clone()
            }),
        }
    }

    /// `⟨M x, y⟩` and `⟨x, Mᵀ y⟩` for the adjoint identity check.
    pub fn adjoint_pair(&self, x: &[f64], y: &[f64]) -> (f64, f64) {
        (dot(&self.linear(x), y), dot(x, &self.adjoint(y)))
    }
}

fn check_shape(expected: &[usize], t: &Tensor) -> Result<()> {
    let n: usize = expected.iter().product();
    if t.shape() == expected || t.shape() == [n] {
        Ok(())
    } else {
        Err(Error::shape(expected, t.shape()))
    }
}

fn finite(t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite("operator output"))
    }
}
