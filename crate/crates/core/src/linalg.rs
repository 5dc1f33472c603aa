//! Small dense kernels: column blocks, Householder QR and cyclic Jacobi.

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// An `n × k` block of column vectors stored column-major, so each column is
/// one flattened operator input.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Block {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows * cols);
        for c in columns {
            if c.len() != rows {
                return Err(Error::shape(&[rows], &[c.len()]));
            }
            data.extend(c);
        }
        Ok(Self { rows, cols, data })
    }

    /// Reads a row-major `[n, k]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, k] = t.dims2()?;
        let mut b = Self::zeros(n, k);
        for i in 0..n {
            for j in 0..k {
                b.data[j * n + i] = t.data()[i * k + j];
            }
        }
        Ok(b)
    }

    /// Row-major `[n, k]` tensor with the same entries.
    pub fn to_tensor(&self) -> Tensor {
        let (n, k) = (self.rows, self.cols);
        let mut out = vec![0.0; n * k];
        for j in 0..k {
            for i in 0..n {
                out[i * k + j] = self.data[j * n + i];
            }
        }
        Tensor::new(vec![n, k], out).expect("block dims are positive")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.rows.max(1)).take(self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_columns(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * order.len());
        for &j in order {
            data.extend_from_slice(self.col(j));
        }
        Self { rows: self.rows, cols: order.len(), data }
    }

    /// Frobenius distance of `selfᵀ self` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.cols {
            for j in 0..self.cols {
                let g = dot(self.col(i), self.col(j)) - if i == j { 1.0 } else { 0.0 };
                acc += g * g;
            }
        }
        acc.sqrt()
    }
}

/// Thin QR factorisation `A = Q R` of a tall block.
#[derive(Debug, Clone)]
pub struct Qr {
    pub q: Block,
    /// Upper triangular `k × k`, row-major.
    pub r: Vec<f64>,
}

impl Qr {
    pub fn r_diag(&self) -> Vec<f64> {
        let k = self.q.cols();
        (0..k).map(|i| self.r[i * k + i]).collect()
    }
}

/// Householder QR with the column signs of `Q` chosen so that every diagonal
/// entry of `R` is non-negative.
pub fn householder_qr(a: &Block) -> Qr {
    let (n, k) = (a.rows(), a.cols());
    assert!(k <= n, "QR needs at least as many rows as columns");
    let mut w = a.clone();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);
    let mut r = vec![0.0; k * k];

    for j in 0..k {
        let x = &w.col(j)[j..];
        let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if xnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        v.iter_mut().for_each(|t| *t /= vnorm);
        for c in j..k {
            let col = &mut w.col_mut(c)[j..];
            let s = 2.0 * dot(&v, col);
            for (ci, vi) in col.iter_mut().zip(&v) {
                *ci -= s * vi;
            }
        }
        reflectors.push(Some(v));
    }

    for i in 0..k {
        for c in i..k {
            r[i * k + c] = w.col(c)[i];
        }
    }

    // Q = H_0 H_1 ... H_{k-1} applied to the leading k columns of I.
    let mut q = Block::zeros(n, k);
    for j in 0..k {
        q.col_mut(j)[j] = 1.0;
    }
    for (j, refl) in reflectors.iter().enumerate().rev() {
        let Some(v) = refl else { continue };
        // Columns left of `j` are still unit vectors with no entries in rows `j..`.
        for c in j..k {
            let col = &mut q.col_mut(c)[j..];
            let s = 2.0 * dot(v, col);
            if s != 0.0 {
                for (ci, vi) in col.iter_mut().zip(v) {
                    *ci -= s * vi;
                }
            }
        }
    }

    for i in 0..k {
        if r[i * k + i] < 0.0 {
            for c in i..k {
                r[i * k + c] = -r[i * k + c];
            }
            q.col_mut(i).iter_mut().for_each(|t| *t = -*t);
        }
    }

    Qr { q, r }
}

/// Eigenvalues of a symmetric `n × n` row-major matrix by cyclic Jacobi
/// rotations, sorted descending.
pub fn symmetric_eigenvalues(a: Vec<f64>, n: usize) -> Vec<f64> {
    jacobi(a, n, false).0
}

/// Eigenvalues (descending) and matching orthonormal eigenvectors, the
/// latter as the columns of an `n × n` block.
pub fn symmetric_eigen(a: Vec<f64>, n: usize) -> (Vec<f64>, Block) {
    let (values, vectors) = jacobi(a, n, true);
    (values, vectors.expect("requested"))
}

fn jacobi(mut a: Vec<f64>, n: usize, want_vectors: bool) -> (Vec<f64>, Option<Block>) {
    assert_eq!(a.len(), n * n);
    const MAX_SWEEPS: usize = 100;

    let mut v = want_vectors.then(|| {
        let mut b = Block::zeros(n, n);
        (0..n).for_each(|i| b.col_mut(i)[i] = 1.0);
        b
    });
    let frob: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if frob == 0.0 {
        return (vec![0.0; n], v);
    }
    let threshold = (f64::EPSILON * frob).powi(2);

    for sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let g = 100.0 * apq.abs();
                // Negligible relative to both diagonals: drop it outright.
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let t = 1.0 / (theta.abs() + (theta * theta + 1.0).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    let np = c * arp - s * arq;
                    let nq = s * arp + c * arq;
                    a[r * n + p] = np;
                    a[p * n + r] = np;
                    a[r * n + q] = nq;
                    a[q * n + r] = nq;
                }
                if let Some(v) = v.as_mut() {
                    for r in 0..n {
                        let (vp, vq) = (v.col(p)[r], v.col(q)[r]);
                        v.col_mut(p)[r] = c * vp - s * vq;
                        v.col_mut(q)[r] = s * vp + c * vq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y * n + y].total_cmp(&a[x * n + x]));
    let eig = order.iter().map(|&i| a[i * n + i]).collect();
    (eig, v.map(|v| v.select_columns(&order)))
}
