//! Top-k singular values of implicitly linear operators.
//!
//! [`power_qr`] runs shifted subspace iteration on `MᵀM + μI` using only
//! Gram products `Mᵀ(f(X) − f(0))`, re-orthonormalising with Householder QR
//! after every step. Once the block has converged the diagonal of `R` holds
//! `σᵢ² + μ`. [`track_step`] is a single warm-started iteration, which is all
//! that is needed to follow a slowly drifting operator during training.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::linalg::{householder_qr, symmetric_eigen, Block};
use crate::linops::OperatorSpec;
use crate::rng;
use crate::tensor::{axpy, dot, norm, Tensor};

/// Largest input dimension [`svd_oracle`] will materialise.
pub const ORACLE_CAP: usize = 2048;

const CHECK_EVERY: usize = 10;
const CONVERGENCE_TOL: f64 = 1e-10;
/// Values below this fraction of σ₁ sit at the √ε noise floor of `R_ii − μ`
/// and are not used for the convergence test.
const NOISE_FLOOR: f64 = 1e-7;

/// How the final singular values are read off the converged block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Readout {
    /// `σᵢ = √max(R_ii − μ, 0)` from the last QR factor.
    #[default]
    Diagonal,
    /// One extra Gram product and a `k × k` Rayleigh-Ritz rotation. Resolves
    /// close pairs that the diagonal of `R` has not yet separated.
    RayleighRitz,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerQrConfig {
    pub k: usize,
    pub iterations: usize,
    pub shift: f64,
    pub seed: u64,
    pub readout: Readout,
}

impl Default for PowerQrConfig {
    fn default() -> Self {
        Self { k: 1, iterations: 300, shift: 1.0, seed: 0, readout: Readout::Diagonal }
    }
}

impl PowerQrConfig {
    pub fn new(k: usize, iterations: usize) -> Self {
        Self { k, iterations, ..Self::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_shift(mut self, shift: f64) -> Self {
        self.shift = shift;
        self
    }

    pub fn with_readout(mut self, readout: Readout) -> Self {
        self.readout = readout;
        self
    }
}

/// Top-k singular values (descending) and their right singular vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumEstimate {
    pub sigmas: Vec<f64>,
    /// `n × k`, orthonormal columns.
    pub vectors: Block,
    pub iterations_used: usize,
    /// `false` when the iteration budget ran out before the sigmas settled.
    pub converged: bool,
}

impl SpectrumEstimate {
    pub fn k(&self) -> usize {
        self.sigmas.len()
    }

    pub fn sigma1(&self) -> f64 {
        self.sigmas[0]
    }

    /// Right singular vectors as a row-major `[n, k]` tensor.
    pub fn v_tensor(&self) -> Tensor {
        self.vectors.to_tensor()
    }

    /// `‖M vᵢ‖` for every column; often sharper than the `R`-based values
    /// before convergence.
    pub fn rayleigh_sigmas(&self, op: &OperatorSpec) -> Vec<f64> {
        self.vectors.columns().map(|v| norm(&op.linear(v))).collect()
    }

    /// `max_i ‖MᵀM vᵢ − σᵢ² vᵢ‖ / σ₁²`
    pub fn residual(&self, op: &OperatorSpec) -> f64 {
        let scale = self.sigma1().powi(2).max(f64::MIN_POSITIVE);
        self.vectors
            .columns()
            .zip(&self.sigmas)
            .map(|(v, s)| {
                let mut g = op.gram(v);
                axpy(-s * s, v, &mut g);
                norm(&g) / scale
            })
            .fold(0.0, f64::max)
    }
}

fn validate(op: &OperatorSpec, cfg: &PowerQrConfig) -> Result<usize> {
    let n = op.input_dim();
    if cfg.k == 0 || cfg.k > n {
        return Err(Error::InvalidArgument(format!("k must lie in 1..={n}, got {}", cfg.k)));
    }
    if cfg.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    if !(cfg.shift >= 0.0 && cfg.shift.is_finite()) {
        return Err(Error::InvalidArgument(format!("shift must be finite and >= 0, got {}", cfg.shift)));
    }
    Ok(n)
}

/// i.i.d. standard normal `n × k` block from the seed's dedicated stream.
pub fn random_block(n: usize, k: usize, seed: u64, stream: u64) -> Block {
    let mut r = rng::stream(seed, stream);
    Block::from_columns((0..k).map(|_| rng::normal_vec(&mut r, n)).collect()).expect("uniform columns")
}

fn sigmas_from(r_diag: &[f64], shift: f64) -> Vec<f64> {
    r_diag.iter().map(|r| (r - shift).max(0.0).sqrt()).collect()
}

fn settled(prev: &[f64], cur: &[f64]) -> bool {
    let top = cur.iter().chain(prev).fold(0.0_f64, |m, &s| m.max(s));
    prev.iter().zip(cur).all(|(&p, &c)| {
        if p.max(c) <= NOISE_FLOOR * top {
            true
        } else {
            (c - p).abs() <= CONVERGENCE_TOL * p.max(c)
        }
    })
}

/// `‖Y − X (XᵀY)‖_F` for `Y = (MᵀM + μI) X`: zero exactly when `X` spans an
/// invariant subspace, and first order in the angle to one.
fn block_residual(x: &Block, y: &Block) -> f64 {
    let k = x.cols();
    let mut total = 0.0;
    for j in 0..k {
        let mut r = y.col(j).to_vec();
        for i in 0..k {
            axpy(-dot(x.col(i), y.col(j)), x.col(i), &mut r);
        }
        total += dot(&r, &r);
    }
    total.sqrt()
}

fn sorted(sigmas: Vec<f64>, vectors: Block) -> (Vec<f64>, Block) {
    let mut order: Vec<usize> = (0..sigmas.len()).collect();
    order.sort_by(|&a, &b| sigmas[b].total_cmp(&sigmas[a]));
    if order.iter().enumerate().all(|(i, &j)| i == j) {
        return (sigmas, vectors);
    }
    let s = order.iter().map(|&j| sigmas[j]).collect();
    (s, vectors.select_columns(&order))
}

/// Shifted subspace iteration on `MᵀM`, matrix-free.
///
/// Each step computes `X ← QR(μX + MᵀM X).Q`. The result reads
/// `σᵢ = √max(R_ii − μ, 0)` off the last `R` and returns `V = X`.
/// Without `x0` the start block is standard normal from `cfg.seed`.
pub fn power_qr(op: &OperatorSpec, cfg: &PowerQrConfig, x0: Option<&Block>) -> Result<SpectrumEstimate> {
    let n = validate(op, cfg)?;
    let mut x = match x0 {
        Some(b) => {
            if b.rows() != n || b.cols() != cfg.k {
                return Err(Error::shape(&[n, cfg.k], &[b.rows(), b.cols()]));
            }
            if b.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("initial block"));
            }
            let d = householder_qr(b).r_diag();
            let top = d.iter().fold(0.0_f64, |m, &v| m.max(v));
            if let Some((index, &value)) = d.iter().enumerate().find(|(_, &v)| v <= 1e-12 * top || top == 0.0) {
                return Err(Error::RankDeficient { index, value });
            }
            b.clone()
        }
        None => random_block(n, cfg.k, cfg.seed, rng::ids::INITIAL_BLOCK),
    };

    let mut r_diag = Vec::new();
    let mut last_check: Option<Vec<f64>> = None;
    let mut used = 0;
    let mut converged = false;
    for it in 1..=cfg.iterations {
        let mut y = op.gram_block(&x);
        for j in 0..cfg.k {
            axpy(cfg.shift, x.col(j), y.col_mut(j));
        }
        let qr = householder_qr(&y);
        r_diag = qr.r_diag();
        used = it;
        if it % CHECK_EVERY == 0 {
            let s = sigmas_from(&r_diag, cfg.shift);
            if let Some(prev) = &last_check {
                let scale = s[0] * s[0] + cfg.shift;
                if settled(prev, &s) && block_residual(&x, &y) <= CONVERGENCE_TOL * scale {
                    x = qr.q;
                    converged = true;
                    break;
                }
            }
            last_check = Some(s);
        }
        x = qr.q;
    }

    let (sigmas, vectors) = match cfg.readout {
        Readout::Diagonal => sorted(sigmas_from(&r_diag, cfg.shift), x),
        Readout::RayleighRitz => rayleigh_ritz(op, &x),
    };
    Ok(SpectrumEstimate { sigmas, vectors, iterations_used: used, converged })
}

fn rayleigh_ritz(op: &OperatorSpec, x: &Block) -> (Vec<f64>, Block) {
    let k = x.cols();
    let y = op.gram_block(x);
    let mut h = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let v = 0.5 * (dot(x.col(i), y.col(j)) + dot(x.col(j), y.col(i)));
            h[i * k + j] = v;
            h[j * k + i] = v;
        }
    }
    let (values, w) = symmetric_eigen(h, k);
    let columns = (0..k)
        .map(|j| {
            let mut v = vec![0.0; x.rows()];
            for (l, &c) in w.col(j).iter().enumerate() {
                axpy(c, x.col(l), &mut v);
            }
            v
        })
        .collect();
    let sigmas = values.into_iter().map(|l| l.max(0.0).sqrt()).collect();
    (sigmas, Block::from_columns(columns).expect("uniform columns"))
}

/// One warm-started PowerQR iteration seeded with `prev`'s vectors.
pub fn track_step(op: &OperatorSpec, prev: &SpectrumEstimate, shift: f64) -> Result<SpectrumEstimate> {
    let cfg = PowerQrConfig { k: prev.k(), iterations: 1, shift, ..PowerQrConfig::default() };
    power_qr(op, &cfg, Some(&prev.vectors))
}

/// Result of the sequential baseline, with its wall time.
#[derive(Debug, Clone)]
pub struct DeflatedResult {
    pub estimate: SpectrumEstimate,
    pub wall: Duration,
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    // Two passes of classical Gram-Schmidt.
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            axpy(-c, b, v);
        }
    }
}

/// `k` successive power-method runs on `MᵀM`, each re-orthogonalised against
/// the vectors already found.
pub fn deflated_power_baseline(
    op: &OperatorSpec,
    k: usize,
    iters_per_vector: usize,
    seed: u64,
) -> Result<DeflatedResult> {
    let start = Instant::now();
    let n =
        validate(op, &PowerQrConfig { k, iterations: iters_per_vector, shift: 0.0, seed, readout: Readout::Diagonal })?;
    let mut r = rng::stream(seed, rng::ids::DEFLATION);
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut sigmas = Vec::with_capacity(k);
    let mut used = 0;
    let mut all_converged = true;

    for _ in 0..k {
        let mut v = rng::normal_vec(&mut r, n);
        orthogonalize(&mut v, &found);
        let nv = norm(&v);
        v.iter_mut().for_each(|t| *t /= nv);

        let mut lambda = 0.0;
        let mut last_check: Option<f64> = None;
        let mut converged = false;
        for it in 1..=iters_per_vector {
            let mut w = op.gram(&v);
            orthogonalize(&mut w, &found);
            lambda = dot(&v, &w);
            used += 1;
            let nw = norm(&w);
            if nw == 0.0 {
                converged = true;
                break;
            }
            w.iter_mut().for_each(|t| *t /= nw);
            v = w;
            if it % CHECK_EVERY == 0 {
                let s = lambda.max(0.0).sqrt();
                if let Some(p) = last_check {
                    let top = sigmas.first().copied().unwrap_or(s).max(s);
                    if settled(&[p], &[s]) || s.max(p) <= NOISE_FLOOR * top {
                        converged = true;
                        break;
                    }
                }
                last_check = Some(s);
            }
        }
        all_converged &= converged;
        sigmas.push(lambda.max(0.0).sqrt());
        found.push(v);
    }

    let (sigmas, vectors) = sorted(sigmas, Block::from_columns(found)?);
    Ok(DeflatedResult {
        estimate: SpectrumEstimate { sigmas, vectors, iterations_used: used, converged: all_converged },
        wall: start.elapsed(),
    })
}

/// Symmetric Gram matrix of the smaller side of a row-major `[m, n]` matrix.
fn small_gram(m: &Tensor) -> (Vec<f64>, usize) {
    let [rows, cols] = m.dims2().expect("materialised matrices are rank 2");
    let d = m.data();
    if rows >= cols {
        // MᵀM via the transpose so that every dot product is contiguous.
        let t = m.transpose().expect("rank 2");
        let td = t.data();
        let mut g = vec![0.0; cols * cols];
        for i in 0..cols {
            for j in i..cols {
                let v = dot(&td[i * rows..(i + 1) * rows], &td[j * rows..(j + 1) * rows]);
                g[i * cols + j] = v;
                g[j * cols + i] = v;
            }
        }
        (g, cols)
    } else {
        let mut g = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in i..rows {
                let v = dot(&d[i * cols..(i + 1) * cols], &d[j * cols..(j + 1) * cols]);
                g[i * rows + j] = v;
                g[j * rows + i] = v;
            }
        }
        (g, rows)
    }
}

/// All singular values of a dense matrix, descending, one entry per column.
///
/// Cyclic Jacobi diagonalises the smaller Gram matrix; each value is then
/// read off as `‖A u‖` (or `‖Aᵀ u‖`) from its eigenvector, which keeps
/// small singular values accurate to round-off instead of `√ε · σ₁`.
pub fn dense_singular_values(m: &Tensor) -> Result<Vec<f64>> {
    let [rows, cols] = m.dims2()?;
    let d = m.data();
    let (g, size) = small_gram(m);
    let (_, vectors) = symmetric_eigen(g, size);
    let mut s: Vec<f64> = vectors
        .columns()
        .map(|u| {
            if size == cols {
                (0..rows).map(|i| dot(&d[i * cols..(i + 1) * cols], u).powi(2)).sum::<f64>().sqrt()
            } else {
                let mut w = vec![0.0; cols];
                for (i, ui) in u.iter().enumerate() {
                    axpy(*ui, &d[i * cols..(i + 1) * cols], &mut w);
                }
                norm(&w)
            }
        })
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.resize(cols, 0.0);
    Ok(s)
}

/// Brute-force oracle: materialise `M` and return all `n` singular values.
pub fn svd_oracle(op: &OperatorSpec) -> Result<Vec<f64>> {
    svd_oracle_with_cap(op, ORACLE_CAP)
}

pub fn svd_oracle_with_cap(op: &OperatorSpec, cap: usize) -> Result<Vec<f64>> {
    let n = op.input_dim();
    if n > cap {
        return Err(Error::DimensionCap { dim: n, cap });
    }
    dense_singular_values(&op.materialize_with_cap(cap)?)
}

/// One timing row of the extraction benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: &'static str,
    pub k: usize,
    pub wall: Duration,
    pub sigma1: f64,
    pub sigmas: Vec<f64>,
}

/// Times [`power_qr`] against [`deflated_power_baseline`] for every `k`, both
/// with the same per-vector iteration budget and the same seed.
pub fn bench_extraction(op: &OperatorSpec, ks: &[usize], iterations: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("at least one k is required".into()));
    }
    let mut rows = Vec::with_capacity(2 * ks.len());
    for &k in ks {
        let cfg = PowerQrConfig::new(k, iterations).with_seed(seed);
        let t = Instant::now();
        let est = power_qr(op, &cfg, None)?;
        let wall = t.elapsed();
        rows.push(BenchRow { method: "power_qr", k, wall, sigma1: est.sigma1(), sigmas: est.sigmas });
        let d = deflated_power_baseline(op, k, iterations, seed)?;
        rows.push(BenchRow {
            method: "deflated_power",
            k,
            wall: d.wall,
            sigma1: d.estimate.sigma1(),
            sigmas: d.estimate.sigmas,
        });
    }
    Ok(rows)
}
