//! Exact singular values of circular 1-D convolutions with one channel on
//! one side, and the bounds that follow from them.
//!
//! For `m` filters `f⁽ˡ⁾` of length `k` acting on length-`n` signals, let
//! `cᵢ⁽ˡ⁾ = Σⱼ fⱼ⁽ˡ⁾ fⱼ₊ᵢ⁽ˡ⁾` be the autocorrelations. Then
//!
//! ```text
//! σⱼ² = Σₗ [ c₀⁽ˡ⁾ + 2 Σᵢ₌₁ cᵢ⁽ˡ⁾ cos(2π j i / n) ],   j = 0 … n−1.
//! ```

use std::path::Path;

use serde::Serialize;

use crate::linops::{ConvSpec, OperatorSpec, PadAmount, PaddingMode, MATERIALIZE_CAP};
use crate::rng::{self, ids};
use crate::spectral::{power_qr, PowerQrConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedFormResult {
    /// One value per frequency `j`, in frequency order (not sorted).
    pub sigmas: Vec<f64>,
    /// Autocorrelations `[c₀, …, c_{k−1}]` of each filter.
    pub per_channel_c: Vec<Vec<f64>>,
    pub n: usize,
}

impl ClosedFormResult {
    /// The values sorted in descending order.
    pub fn sorted(&self) -> Vec<f64> {
        let mut s = self.sigmas.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    pub fn max(&self) -> f64 {
        self.sigmas.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundsResult {
    pub lower: f64,
    pub upper: f64,
}

fn check_filters(filters: &[Vec<f64>], n: usize) -> Result<usize> {
    if filters.is_empty() {
        return Err(Error::InvalidArgument("at least one filter is required".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("signal length must be >= 1".into()));
    }
    let mut k = 0;
    for f in filters {
        if f.is_empty() {
            return Err(Error::InvalidArgument("filters must be non-empty".into()));
        }
        if f.len() > n {
            return Err(Error::InvalidArgument(format!("filter length {} exceeds signal length {n}", f.len())));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("filter"));
        }
        k = k.max(f.len());
    }
    Ok(k)
}

fn autocorrelation(f: &[f64]) -> Vec<f64> {
    (0..f.len()).map(|i| f.iter().zip(&f[i..]).map(|(a, b)| a * b).sum()).collect()
}

/// All `n` singular values of the circular convolution with the given
/// filters (one input and `m` outputs, or `m` inputs and one output).
pub fn closed_form_spectrum(filters: &[Vec<f64>], n: usize) -> Result<ClosedFormResult> {
    check_filters(filters, n)?;
    let per_channel_c: Vec<Vec<f64>> = filters.iter().map(|f| autocorrelation(f)).collect();
    let sigmas = (0..n)
        .map(|j| {
            let mut s2 = 0.0;
            for c in &per_channel_c {
                s2 += c[0];
                for (i, ci) in c.iter().enumerate().skip(1) {
                    let phase = 2.0 * std::f64::consts::PI * ((j * i) % n) as f64 / n as f64;
                    s2 += 2.0 * ci * phase.cos();
                }
            }
            s2.max(0.0).sqrt()
        })
        .collect();
    Ok(ClosedFormResult { sigmas, per_channel_c, n })
}

/// `√Σₗ(Σᵢ fᵢ⁽ˡ⁾)² ≤ σ₁ ≤ √Σₗ(Σᵢ |fᵢ⁽ˡ⁾|)²`, tight when no entry is negative.
pub fn spectral_bounds(filters: &[Vec<f64>]) -> BoundsResult {
    let lower = filters.iter().map(|f| f.iter().sum::<f64>().powi(2)).sum::<f64>().sqrt();
    let upper = filters.iter().map(|f| f.iter().map(|v| v.abs()).sum::<f64>().powi(2)).sum::<f64>().sqrt();
    BoundsResult { lower, upper }
}

/// Relative grouping tolerance used when none is given.
pub const DUPLICATE_TOL: f64 = 1e-9;

/// Number of values with no partner within `tol · (1 + σ)`.
pub fn duplicate_check(result: &ClosedFormResult, tol: f64) -> usize {
    let s = result.sorted();
    let mut singletons = 0;
    let mut start = 0;
    while start < s.len() {
        let mut end = start + 1;
        while end < s.len() && (s[end - 1] - s[end]).abs() <= tol * (1.0 + s[end - 1]) {
            end += 1;
        }
        if end - start == 1 {
            singletons += 1;
        }
        start = end;
    }
    singletons
}

/// Circular 1-D convolution operator for `filters`: one input channel and
/// `m` outputs, or the transpose orientation with `m` inputs and one output.
pub fn circular_conv1d(filters: &[Vec<f64>], n: usize, many_inputs: bool) -> Result<OperatorSpec> {
    let k = check_filters(filters, n)?;
    let m = filters.len();
    let mut data = Vec::with_capacity(m * k);
    for f in filters {
        data.extend_from_slice(f);
        data.extend(std::iter::repeat_n(0.0, k - f.len()));
    }
    let (shape, channels) = if many_inputs { (vec![1, m, k], m) } else { (vec![m, 1, k], 1) };
    let kernel = Tensor::new(shape, data)?;
    Ok(ConvSpec::conv1d(kernel, None, 1, PaddingMode::Circular, PadAmount::Same, [channels, n])?.into())
}

/// Writes `j,sigma` rows in frequency order.
pub fn write_spectrum_csv(path: &Path, result: &ClosedFormResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::clipping::csv_error(path, e))?;
    w.write_record(["j", "sigma"]).map_err(|e| crate::clipping::csv_error(path, e))?;
    for (j, s) in result.sigmas.iter().enumerate() {
        w.write_record([j.to_string(), s.to_string()]).map_err(|e| crate::clipping::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---- padding-gap experiment -------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapRow {
    pub padding: PaddingMode,
    pub channels: usize,
    pub kernel: usize,
    pub mean_gap: f64,
    pub max_gap: f64,
}

/// Iterations used for every `σ₁` in the gap experiment.
pub const GAP_ITERS: usize = 300;

/// For `trials` random `channels → channels` kernels of size
/// `kernel × kernel` on `n × n` inputs, the gap `|σ₁(circular) − σ₁(p)|`
/// for each non-circular padding `p`, summarised per padding.
pub fn padding_gap_experiment(
    kernel: usize,
    channels: usize,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<GapRow>> {
    padding_gap_with(kernel, channels, n, trials, seed, |trial, shape| {
        let mut r = rng::stream(seed, ids::trial(ids::GAP, trial as u64));
        Tensor::new(shape.to_vec(), rng::normal_vec(&mut r, shape.iter().product()))
    })
}

/// [`padding_gap_experiment`] with caller-supplied kernels.
pub fn padding_gap_with(
    kernel: usize,
    channels: usize,
    n: usize,
    trials: usize,
    seed: u64,
    mut make_kernel: impl FnMut(usize, &[usize]) -> Result<Tensor>,
) -> Result<Vec<GapRow>> {
    if kernel == 0 || channels == 0 || n == 0 || trials == 0 {
        return Err(Error::InvalidArgument("kernel, channels, n and trials must all be >= 1".into()));
    }
    let dim = channels * n * n;
    if dim > MATERIALIZE_CAP {
        return Err(Error::DimensionCap { dim, cap: MATERIALIZE_CAP });
    }
    let others = [PaddingMode::Zeros, PaddingMode::Reflect, PaddingMode::Replicate];
    let mut gaps = vec![Vec::with_capacity(trials); others.len()];
    let pad = PadAmount::Symmetric([kernel / 2, kernel / 2]);
    let cfg = PowerQrConfig::new(1, GAP_ITERS).with_seed(seed);
    for t in 0..trials {
        let k = make_kernel(t, &[channels, channels, kernel, kernel])?;
        let sigma = |mode: PaddingMode| -> Result<f64> {
            let op: OperatorSpec = ConvSpec::conv2d(k.clone(), None, [1, 1], mode, pad, [channels, n, n])?.into();
            Ok(power_qr(&op, &cfg, None)?.sigma1())
        };
        let circ = sigma(PaddingMode::Circular)?;
        for (g, &mode) in gaps.iter_mut().zip(&others) {
            g.push((circ - sigma(mode)?).abs());
        }
    }
    Ok(others
        .iter()
        .zip(gaps)
        .map(|(&padding, g)| GapRow {
            padding,
            channels,
            kernel,
            mean_gap: g.iter().sum::<f64>() / g.len() as f64,
            max_gap: g.iter().copied().fold(0.0, f64::max),
        })
        .collect())
}

/// Writes `padding,channels,kernel,mean_gap,max_gap` rows.
pub fn write_gap_csv(path: &Path, rows: &[GapRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::clipping::csv_error(path, e))?;
    w.write_record(["padding", "channels", "kernel", "mean_gap", "max_gap"])
        .map_err(|e| crate::clipping::csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.padding.name().to_string(),
            r.channels.to_string(),
            r.kernel.to_string(),
            r.mean_gap.to_string(),
            r.max_gap.to_string(),
        ])
        .map_err(|e| crate::clipping::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
