use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Fully connected layer `y = W x + b` with `W` of shape `[m, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSpec {
    pub(crate) weight: Tensor,
    pub(crate) bias: Tensor,
}

impl DenseSpec {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let [m, _] = weight.dims2()?;
        let bias = bias.unwrap_or_else(|| Tensor::zeros(vec![m]));
        if bias.shape() != [m] {
            return Err(Error::Invariant(format!("dense bias must have shape [{m}], got {:?}", bias.shape())));
        }
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn forward_linear(&self, x: &[f64], out: &mut [f64]) {
        let n = self.in_features();
        for (o, row) in out.iter_mut().zip(self.weight.data().chunks_exact(n)) {
            *o = dot(row, x);
        }
    }

    /// Forward pass on `lanes` interleaved inputs.
    pub(crate) fn forward_lanes(&self, x: &[f64], out: &mut [f64], lanes: usize) {
        let n = self.in_features();
        out.fill(0.0);
        for (dst, row) in out.chunks_exact_mut(lanes).zip(self.weight.data().chunks_exact(n)) {
            for (&w, src) in row.iter().zip(x.chunks_exact(lanes)) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }

    pub(crate) fn adjoint_lanes(&self, y: &[f64], out: &mut [f64], lanes: usize) {
        let n = self.in_features();
        out.fill(0.0);
        for (src, row) in y.chunks_exact(lanes).zip(self.weight.data().chunks_exact(n)) {
            for (&w, dst) in row.iter().zip(out.chunks_exact_mut(lanes)) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }

    pub(crate) fn add_offset(&self, out: &mut [f64]) {
        for (o, b) in out.iter_mut().zip(self.bias.data()) {
            *o += b;
        }
    }

    pub(crate) fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let n = self.in_features();
        out.fill(0.0);
        for (&yi, row) in y.iter().zip(self.weight.data().chunks_exact(n)) {
            if yi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += yi * w;
            }
        }
    }

    /// `residual · xᵀ`
    pub(crate) fn param_grad(&self, x: &[f64], residual: &[f64]) -> Tensor {
        let n = self.in_features();
        let mut g = Vec::with_capacity(residual.len() * n);
        for &r in residual {
            g.extend(x.iter().map(|xi| r * xi));
        }
        Tensor::new(self.weight.shape().to_vec(), g).expect("weight shape")
    }
}
