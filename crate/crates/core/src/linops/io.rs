//! JSON operator documents and the raw `f64le` parameter format.
//!
//! ```json
//! {"type": "conv2d", "in_channels": 1, "out_channels": 4,
//!  "kernel_size": [3, 3], "stride": [1, 1], "padding": "reflect",
//!  "pad_amount": [1, 1], "input_shape": [1, 16, 16],
//!  "kernel": {"path": "kernel.bin", "dtype": "f64le"}}
//! ```
//!
//! Parameter arrays are flat, in `[c_out][c_in][k_h][k_w]` order for kernels
//! and row-major for dense weights, either inline or in a raw little-endian
//! binary file. Relative paths resolve against the document's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BatchNormSpec, CompositionSpec, ConvRank, ConvSpec, DenseSpec, OperatorSpec, PadAmount, PaddingMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Values {
    Inline(Vec<f64>),
    External { path: String, dtype: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Pad2 {
    Keyword(String),
    Symmetric([usize; 2]),
    Explicit([[usize; 2]; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Pad1 {
    Keyword(String),
    Symmetric(usize),
    Explicit([usize; 2]),
}

impl Default for Pad2 {
    fn default() -> Self {
        Pad2::Symmetric([0, 0])
    }
}

impl Default for Pad1 {
    fn default() -> Self {
        Pad1::Symmetric(0)
    }
}

fn one() -> usize {
    1
}

fn ones() -> [usize; 2] {
    [1, 1]
}

fn zeros_mode() -> PaddingMode {
    PaddingMode::Zeros
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Doc {
    Dense {
        in_features: usize,
        out_features: usize,
        weight: Values,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Values>,
    },
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "zeros_mode")]
        padding: PaddingMode,
        #[serde(default)]
        pad_amount: Pad1,
        input_shape: [usize; 2],
        kernel: Values,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Values>,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: [usize; 2],
        #[serde(default = "ones")]
        stride: [usize; 2],
        #[serde(default = "zeros_mode")]
        padding: PaddingMode,
        #[serde(default)]
        pad_amount: Pad2,
        input_shape: [usize; 3],
        kernel: Values,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Values>,
    },
    Batchnorm {
        num_features: usize,
        input_shape: Vec<usize>,
        gamma: Values,
        beta: Values,
        running_mean: Values,
        running_var: Values,
        epsilon: f64,
    },
    Composition {
        stages: Vec<Doc>,
    },
}

/// Reads a raw little-endian `f64` file holding exactly `expected` values.
pub fn read_f64le(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, expected {} f64 values",
            path.display(),
            bytes.len(),
            expected
        )));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

pub fn write_f64le(path: &Path, data: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Resolver {
    base: PathBuf,
}

impl Resolver {
    fn tensor(&self, v: &Values, shape: Vec<usize>, what: &str) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        let data = match v {
            Values::Inline(d) => d.clone(),
            Values::External { path, dtype } => {
                if dtype != "f64le" {
                    return Err(Error::Format(format!("{what}: unsupported dtype {dtype:?}")));
                }
                read_f64le(&self.base.join(path), len)?
            }
        };
        if data.len() != len {
            return Err(Error::Invariant(format!(
                "{what} expects {len} values for shape {shape:?}, found {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("operator document"));
        }
        Tensor::new(shape, data)
    }

    fn build(&self, doc: &Doc) -> Result<OperatorSpec> {
        Ok(match doc {
            Doc::Dense { in_features, out_features, weight, bias } => {
                let w = self.tensor(weight, vec![*out_features, *in_features], "dense weight")?;
                let b = bias.as_ref().map(|b| self.tensor(b, vec![*out_features], "dense bias")).transpose()?;
                DenseSpec::new(w, b)?.into()
            }
            Doc::Conv1d {
                in_channels,
                out_channels,
                kernel_size,
                stride,
                padding,
                pad_amount,
                input_shape,
                kernel,
                bias,
            } => {
                let k = self.tensor(kernel, vec![*out_channels, *in_channels, *kernel_size], "conv1d kernel")?;
                let b = bias.as_ref().map(|b| self.tensor(b, vec![*out_channels], "conv1d bias")).transpose()?;
                let pad = match pad_amount {
                    Pad1::Keyword(s) if s == "same" => PadAmount::Same,
                    Pad1::Keyword(s) => return Err(Error::Format(format!("unknown pad_amount {s:?}"))),
                    Pad1::Symmetric(p) => PadAmount::Symmetric([0, *p]),
                    Pad1::Explicit(lr) => PadAmount::Explicit([[0, 0], *lr]),
                };
                ConvSpec::conv1d(k, b, *stride, *padding, pad, *input_shape)?.into()
            }
            Doc::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                stride,
                padding,
                pad_amount,
                input_shape,
                kernel,
                bias,
            } => {
                let k = self.tensor(
                    kernel,
                    vec![*out_channels, *in_channels, kernel_size[0], kernel_size[1]],
                    "conv2d kernel",
                )?;
                let b = bias.as_ref().map(|b| self.tensor(b, vec![*out_channels], "conv2d bias")).transpose()?;
                let pad = match pad_amount {
                    Pad2::Keyword(s) if s == "same" => PadAmount::Same,
                    Pad2::Keyword(s) => return Err(Error::Format(format!("unknown pad_amount {s:?}"))),
                    Pad2::Symmetric(p) => PadAmount::Symmetric(*p),
                    Pad2::Explicit(p) => PadAmount::Explicit(*p),
                };
                ConvSpec::conv2d(k, b, *stride, *padding, pad, *input_shape)?.into()
            }
            Doc::Batchnorm { num_features, input_shape, gamma, beta, running_mean, running_var, epsilon } => {
                let c = *num_features;
                BatchNormSpec::new(
                    self.tensor(gamma, vec![c], "gamma")?,
                    self.tensor(beta, vec![c], "beta")?,
                    self.tensor(running_mean, vec![c], "running_mean")?,
                    self.tensor(running_var, vec![c], "running_var")?,
                    *epsilon,
                    input_shape.clone(),
                )?
                .into()
            }
            Doc::Composition { stages } => {
                let stages = stages.iter().map(|s| self.build(s)).collect::<Result<Vec<_>>>()?;
                CompositionSpec::new(stages)?.into()
            }
        })
    }
}

fn inline(t: &Tensor) -> Values {
    Values::Inline(t.data().to_vec())
}

fn to_doc(op: &OperatorSpec) -> Doc {
    match op {
        OperatorSpec::Dense(d) => Doc::Dense {
            in_features: d.in_features(),
            out_features: d.out_features(),
            weight: inline(d.weight()),
            bias: Some(inline(d.bias())),
        },
        OperatorSpec::Conv(c) => {
            let [kh, kw] = c.kernel_hw();
            let pad = c.pad();
            match c.rank() {
                ConvRank::One => Doc::Conv1d {
                    in_channels: c.in_channels(),
                    out_channels: c.out_channels(),
                    kernel_size: kw,
                    stride: c.stride()[1],
                    padding: c.padding(),
                    pad_amount: if pad[1][0] == pad[1][1] {
                        Pad1::Symmetric(pad[1][0])
                    } else {
                        Pad1::Explicit(pad[1])
                    },
                    input_shape: [c.in_channels(), c.input[2]],
                    kernel: inline(c.kernel()),
                    bias: Some(inline(c.bias())),
                },
                ConvRank::Two => Doc::Conv2d {
                    in_channels: c.in_channels(),
                    out_channels: c.out_channels(),
                    kernel_size: [kh, kw],
                    stride: c.stride(),
                    padding: c.padding(),
                    pad_amount: if pad[0][0] == pad[0][1] && pad[1][0] == pad[1][1] {
                        Pad2::Symmetric([pad[0][0], pad[1][0]])
                    } else {
                        Pad2::Explicit(pad)
                    },
                    input_shape: c.input,
                    kernel: inline(c.kernel()),
                    bias: Some(inline(c.bias())),
                },
            }
        }
        OperatorSpec::BatchNorm(b) => Doc::Batchnorm {
            num_features: b.channels(),
            input_shape: b.input_shape().to_vec(),
            gamma: inline(b.gamma()),
            beta: inline(b.beta()),
            running_mean: inline(b.running_mean()),
            running_var: inline(b.running_var()),
            epsilon: b.epsilon(),
        },
        OperatorSpec::Composition(c) => Doc::Composition { stages: c.stages().iter().map(to_doc).collect() },
    }
}

/// Parses an operator document; external parameter files resolve against `base`.
pub fn parse_spec(json: &str, base: &Path) -> Result<OperatorSpec> {
    let doc: Doc = serde_json::from_str(json).map_err(|e| Error::Format(e.to_string()))?;
    Resolver { base: base.to_path_buf() }.build(&doc)
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<OperatorSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_spec(&text, &base)
}

/// Serialises with every parameter inline.
pub fn spec_to_json(op: &OperatorSpec) -> String {
    serde_json::to_string_pretty(&to_doc(op)).expect("documents always serialise")
}

pub fn save_spec(op: &OperatorSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, spec_to_json(op)).map_err(|e| Error::io(path, e))
}
