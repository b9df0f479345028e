//! Dense row-major linear algebra with multiply-add accounting.
//!
//! Everything here is deliberately small: a [`Matrix`] type, products,
//! softmax and top-k selection. Every product that goes through a
//! [`FlopCounter`] adds its exact multiply-add count, which is what the
//! cost-scaling checks compare against closed forms.

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "matrix",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "from_rows",
                    left: (i, r.len()),
                    right: (0, cols),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Uniform entries in `[-scale, scale)`.
    pub fn random_uniform<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                if scale > 0.0 {
                    rng.gen_range(-scale..scale)
                } else {
                    0.0
                }
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Multiply-add accumulator owned by one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter {
    multiply_adds: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, n: u64) {
        self.multiply_adds += n;
    }

    pub fn multiply_adds(&self) -> u64 {
        self.multiply_adds
    }

    pub fn reset(&mut self) {
        self.multiply_adds = 0;
    }
}

/// `a × b`. Adds `a.rows × a.cols × b.cols` to the counter.
pub fn matmul(a: &Matrix, b: &Matrix, counter: &mut FlopCounter) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    counter.add((a.rows * a.cols * b.cols) as u64);
    if !out.is_finite() {
        return Err(Error::NonFinite("matmul"));
    }
    Ok(out)
}

/// `a · x` for a vector `x`. Adds `a.rows × a.cols` to the counter.
pub fn matvec(a: &Matrix, x: &[f64], counter: &mut FlopCounter) -> Result<Vec<f64>> {
    if a.cols != x.len() {
        return Err(Error::DimensionMismatch {
            op: "matvec",
            left: a.shape(),
            right: (x.len(), 1),
        });
    }
    let out: Vec<f64> = a.row_iter().map(|row| dot(row, x)).collect();
    counter.add((a.rows * a.cols) as u64);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matvec"));
    }
    Ok(out)
}

/// `aᵀ · y`, accumulated into `out`. Used by backward passes; not counted.
pub fn matvec_t_acc(a: &Matrix, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.rows, y.len());
    debug_assert_eq!(a.cols, out.len());
    for (row, &yr) in a.row_iter().zip(y) {
        if yr == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(row) {
            *o += w * yr;
        }
    }
}

/// `g += u ⊗ v` where `g` is `u.len() × v.len()` row-major.
pub fn outer_acc(g: &mut Matrix, u: &[f64], v: &[f64]) {
    debug_assert_eq!(g.shape(), (u.len(), v.len()));
    for (r, &ur) in u.iter().enumerate() {
        if ur == 0.0 {
            continue;
        }
        for (gv, &vv) in g.row_mut(r).iter_mut().zip(v) {
            *gv += ur * vv;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Indices of the `k` largest scores, returned in ascending index order.
/// Ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::TopKTooLarge {
            k,
            len: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // total_cmp keeps the order total even for signed zeros; stable sort
    // preserves ascending index among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}
