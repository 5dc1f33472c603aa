use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inference-mode batch normalisation
/// `y = (x - mean) / sqrt(var + eps) * gamma + beta`, per channel, using the
/// stored running statistics. The linear part is the diagonal matrix with
/// entries `gamma_c / sqrt(var_c + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormSpec {
    pub(crate) gamma: Tensor,
    pub(crate) beta: Tensor,
    pub(crate) running_mean: Tensor,
    pub(crate) running_var: Tensor,
    pub(crate) epsilon: f64,
    /// `[c, spatial...]`; channel-major layout.
    pub(crate) input_shape: Vec<usize>,
}

impl BatchNormSpec {
    pub fn new(
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        epsilon: f64,
        input_shape: Vec<usize>,
    ) -> Result<Self> {
        let c = gamma.len();
        for (name, t) in
            [("gamma", &gamma), ("beta", &beta), ("running_mean", &running_mean), ("running_var", &running_var)]
        {
            if t.shape() != [c] {
                return Err(Error::Invariant(format!("batch-norm {name} must have shape [{c}], got {:?}", t.shape())));
            }
        }
        if running_var.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Invariant("batch-norm running_var entries must be finite and >= 0".into()));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Invariant(format!("batch-norm epsilon must be > 0, got {epsilon}")));
        }
        if input_shape.first() != Some(&c) || input_shape.contains(&0) {
            return Err(Error::Invariant(format!(
                "batch-norm input shape {input_shape:?} must start with {c} channels"
            )));
        }
        Ok(Self { gamma, beta, running_mean, running_var, epsilon, input_shape })
    }

    /// Identity-statistics batch norm (`mean = 0`, `var = 1 - eps`) so that
    /// the per-channel scale equals `gamma` exactly.
    pub fn with_unit_statistics(
        gamma: Vec<f64>,
        beta: Vec<f64>,
        epsilon: f64,
        input_shape: Vec<usize>,
    ) -> Result<Self> {
        let c = gamma.len();
        Self::new(
            Tensor::vector(gamma),
            Tensor::vector(beta),
            Tensor::zeros(vec![c]),
            Tensor::vector(vec![1.0 - epsilon; c]),
            epsilon,
            input_shape,
        )
    }

    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn running_mean(&self) -> &Tensor {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor {
        &self.running_var
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn spatial(&self) -> usize {
        self.input_shape[1..].iter().product()
    }

    fn inv_std(&self, c: usize) -> f64 {
        1.0 / (self.running_var.data()[c] + self.epsilon).sqrt()
    }

    /// Diagonal entry of the linear part for channel `c`.
    pub fn channel_scale(&self, c: usize) -> f64 {
        self.gamma.data()[c] * self.inv_std(c)
    }

    /// Largest singular value: `max_c |gamma_c| / sqrt(var_c + eps)`.
    pub fn spectral_norm(&self) -> f64 {
        (0..self.channels()).map(|c| self.channel_scale(c).abs()).fold(0.0, f64::max)
    }

    pub(crate) fn forward_linear(&self, x: &[f64], out: &mut [f64]) {
        self.forward_lanes(x, out, 1);
    }

    /// Forward pass on `lanes` interleaved inputs.
    pub(crate) fn forward_lanes(&self, x: &[f64], out: &mut [f64], lanes: usize) {
        let sp = self.spatial() * lanes;
        for c in 0..self.channels() {
            let s = self.channel_scale(c);
            for (o, xi) in out[c * sp..(c + 1) * sp].iter_mut().zip(&x[c * sp..(c + 1) * sp]) {
                *o = s * xi;
            }
        }
    }

    pub(crate) fn add_offset(&self, out: &mut [f64]) {
        let sp = self.spatial();
        for c in 0..self.channels() {
            let off = self.beta.data()[c] - self.channel_scale(c) * self.running_mean.data()[c];
            out[c * sp..(c + 1) * sp].iter_mut().for_each(|o| *o += off);
        }
    }

    pub(crate) fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.forward_linear(y, out);
    }

    /// Gradient with respect to `gamma`, including its effect on the offset.
    pub(crate) fn param_grad(&self, x: &[f64], residual: &[f64]) -> Tensor {
        let sp = self.spatial();
        let g = (0..self.channels())
            .map(|c| {
                let mean = self.running_mean.data()[c];
                let acc: f64 = x[c * sp..(c + 1) * sp]
                    .iter()
                    .zip(&residual[c * sp..(c + 1) * sp])
                    .map(|(xi, ri)| ri * (xi - mean))
                    .sum();
                acc * self.inv_std(c)
            })
            .collect();
        Tensor::vector(g)
    }
}
