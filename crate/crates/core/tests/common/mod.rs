#![allow(dead_code)]

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use specclip::linops::{BatchNormSpec, ConvSpec, DenseSpec, PadAmount, PaddingMode};
use specclip::{OperatorSpec, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(r)).collect()
}

pub fn dense(r: &mut ChaCha8Rng, m: usize, n: usize) -> OperatorSpec {
    let w = Tensor::matrix(m, n, normals(r, m * n)).unwrap();
    let b = Tensor::vector(normals(r, m));
    DenseSpec::new(w, Some(b)).unwrap().into()
}

pub fn diag(values: &[f64]) -> OperatorSpec {
    let n = values.len();
    let mut w = vec![0.0; n * n];
    for (i, v) in values.iter().enumerate() {
        w[i * n + i] = *v;
    }
    DenseSpec::new(Tensor::matrix(n, n, w).unwrap(), None).unwrap().into()
}

pub fn matrix_op(m: usize, n: usize, data: Vec<f64>) -> OperatorSpec {
    DenseSpec::new(Tensor::matrix(m, n, data).unwrap(), None).unwrap().into()
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    r: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    k: [usize; 2],
    stride: [usize; 2],
    padding: PaddingMode,
    pad: PadAmount,
    input: [usize; 3],
) -> OperatorSpec {
    let kernel = Tensor::new(vec![c_out, c_in, k[0], k[1]], normals(r, c_out * c_in * k[0] * k[1])).unwrap();
    let bias = Tensor::vector(normals(r, c_out));
    ConvSpec::conv2d(kernel, Some(bias), stride, padding, pad, input).unwrap().into()
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d(
    r: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    padding: PaddingMode,
    pad: PadAmount,
    n: usize,
) -> OperatorSpec {
    let kernel = Tensor::new(vec![c_out, c_in, k], normals(r, c_out * c_in * k)).unwrap();
    let bias = Tensor::vector(normals(r, c_out));
    ConvSpec::conv1d(kernel, Some(bias), stride, padding, pad, [c_in, n]).unwrap().into()
}

pub fn batchnorm(r: &mut ChaCha8Rng, shape: Vec<usize>) -> OperatorSpec {
    let c = shape[0];
    let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.1..2.0)).collect();
    BatchNormSpec::new(
        Tensor::vector(normals(r, c)),
        Tensor::vector(normals(r, c)),
        Tensor::vector(normals(r, c)),
        Tensor::vector(var),
        1e-5,
        shape,
    )
    .unwrap()
    .into()
}

/// Source index of padded coordinate `i` (may be negative or past the end)
/// for an axis of length `n`.
pub fn source_index(i: isize, n: usize, mode: PaddingMode) -> Option<usize> {
    let n_i = n as isize;
    if (0..n_i).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PaddingMode::Zeros => None,
        PaddingMode::Circular => Some(i.rem_euclid(n_i) as usize),
        PaddingMode::Replicate => Some(i.clamp(0, n_i - 1) as usize),
        PaddingMode::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (n_i - 1);
            let j = i.rem_euclid(period);
            Some(if j < n_i { j } else { period - j } as usize)
        }
    }
}

/// Matrix of a 2-D cross-correlation written straight from the definition,
/// row-major `[c_out*oh*ow, c_in*h*w]`.
pub fn naive_conv_matrix(
    kernel: &Tensor,
    stride: [usize; 2],
    mode: PaddingMode,
    pad: [[usize; 2]; 2],
    input: [usize; 3],
) -> (Vec<f64>, usize, usize) {
    let s = kernel.shape();
    let (c_out, c_in, kh, kw) = (s[0], s[1], s[2], s[3]);
    let [_, h, w] = input;
    let oh = (h + pad[0][0] + pad[0][1] - kh) / stride[0] + 1;
    let ow = (w + pad[1][0] + pad[1][1] - kw) / stride[1] + 1;
    let rows = c_out * oh * ow;
    let cols = c_in * h * w;
    let mut m = vec![0.0; rows * cols];
    let kd = kernel.data();
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (co * oh + oy) * ow + ox;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride[0] + ky) as isize - pad[0][0] as isize;
                        let Some(sy) = source_index(iy, h, mode) else { continue };
                        for kx in 0..kw {
                            let ix = (ox * stride[1] + kx) as isize - pad[1][0] as isize;
                            let Some(sx) = source_index(ix, w, mode) else { continue };
                            let col = (ci * h + sy) * w + sx;
                            m[row * cols + col] += kd[((co * c_in + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    (m, rows, cols)
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Per-element multiset comparison with `abs + rel·|b|` tolerance.
pub fn multiset_close(a: &[f64], b: &[f64], abs: f64, rel: f64) -> bool {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| y.total_cmp(x));
    b.sort_by(|x, y| y.total_cmp(x));
    a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= abs + rel * y.abs())
}

pub fn max_multiset_gap(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| y.total_cmp(x));
    b.sort_by(|x, y| y.total_cmp(x));
    max_abs_diff(&a, &b)
}

/// Pads `v` with zeros (or truncates) to length `n`.
pub fn padded(v: &[f64], n: usize) -> Vec<f64> {
    let mut v = v.to_vec();
    v.resize(n, 0.0);
    v
}

/// All singular values of a row-major `[m, n]` matrix, descending, padded
/// with zeros to `n`, from nalgebra's SVD.
pub fn reference_singular_values(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mat = nalgebra::DMatrix::from_row_slice(m, n, data);
    let mut s: Vec<f64> = mat.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    padded(&s, n)
}

pub fn op_singular_values(op: &OperatorSpec) -> Vec<f64> {
    let m = op.materialize().unwrap();
    let [r, c] = [m.shape()[0], m.shape()[1]];
    reference_singular_values(m.data(), r, c)
}
