//! Dense row-major matrices, similarity metrics and a stable softmax.
//!
//! Everything here works in `f64`. The matrices are small (an episode is at
//! most a few hundred rows), so there is no blocking or SIMD.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-width matrix still has rows
        (0..self.rows).map(move |r| self.row(r))
    }

    /// Copies rows `[start, end)` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim("Matrix::vstack", self.cols, other.cols));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Concatenates `self` and `other` side by side.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("Matrix::hstack", self.rows, other.rows));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("Matrix::matmul", self.cols, other.rows));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, the shape used by dense layers with `out × in` weights.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim("Matrix::matmul_t", self.cols, other.cols));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`, used for weight gradients.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("Matrix::t_matmul", self.rows, other.rows));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bj) in out_row.iter_mut().zip(b) {
                    *o += ai * bj;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "Matrix::add_assign",
                self.data.len(),
                other.data.len(),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::dim("Matrix::add_row_vector", self.cols, bias.len()));
        }
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column sums, i.e. `1ᵀ · self`.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry in row `r`; ties go to the lowest index.
    pub fn argmax_row(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Similarity function κ used by the likelihoods and the attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    NegSqEuclidean,
    /// Unsquared variant, reachable through `metric.squared = false`.
    NegEuclidean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::NegSqEuclidean => "neg_sq_euclidean",
            Metric::NegEuclidean => "neg_euclidean",
        }
    }

    /// Maps the Euclidean family onto its squared or unsquared member.
    pub fn with_squared(self, squared: bool) -> Metric {
        match (self, squared) {
            (Metric::NegSqEuclidean | Metric::NegEuclidean, true) => Metric::NegSqEuclidean,
            (Metric::NegSqEuclidean | Metric::NegEuclidean, false) => Metric::NegEuclidean,
            (m, _) => m,
        }
    }

    pub fn eval(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Metric::Cosine => cosine(a, b),
            Metric::NegSqEuclidean => neg_sq_euclidean(a, b),
            Metric::NegEuclidean => neg_sq_euclidean(a, b).map(|d| -(-d).sqrt()),
        }
    }

    /// Accumulates `upstream · ∂κ(a, b)/∂a` into `grad_a` and the same for `b`.
    pub fn accumulate_grad(
        self,
        a: &[f64],
        b: &[f64],
        upstream: f64,
        grad_a: &mut [f64],
        grad_b: &mut [f64],
    ) {
        if upstream == 0.0 {
            return;
        }
        match self {
            Metric::Cosine => {
                let na = norm(a);
                let nb = norm(b);
                let cos = dot(a, b) / (na * nb);
                let inv = 1.0 / (na * nb);
                for j in 0..a.len() {
                    grad_a[j] += upstream * (b[j] * inv - cos * a[j] / (na * na));
                    grad_b[j] += upstream * (a[j] * inv - cos * b[j] / (nb * nb));
                }
            }
            Metric::NegSqEuclidean => {
                for j in 0..a.len() {
                    let diff = a[j] - b[j];
                    grad_a[j] -= upstream * 2.0 * diff;
                    grad_b[j] += upstream * 2.0 * diff;
                }
            }
            Metric::NegEuclidean => {
                let dist = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                if dist == 0.0 {
                    // subgradient 0 at the cusp
                    return;
                }
                for j in 0..a.len() {
                    let diff = (a[j] - b[j]) / dist;
                    grad_a[j] -= upstream * diff;
                    grad_b[j] += upstream * diff;
                }
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "neg_sq_euclidean" => Ok(Metric::NegSqEuclidean),
            "neg_euclidean" => Ok(Metric::NegEuclidean),
            other => Err(Error::Config(format!(
                "unknown metric `{other}` (expected cosine, neg_sq_euclidean or neg_euclidean)"
            ))),
        }
    }
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine", a.len(), b.len()));
    }
    let na = norm(a);
    if na == 0.0 {
        return Err(Error::ZeroNorm {
            op: "cosine",
            operand: "first operand".into(),
        });
    }
    let nb = norm(b);
    if nb == 0.0 {
        return Err(Error::ZeroNorm {
            op: "cosine",
            operand: "second operand".into(),
        });
    }
    Ok(dot(a, b) / (na * nb))
}

/// `−Σⱼ (aⱼ − bⱼ)²`.
pub fn neg_sq_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("neg_sq_euclidean", a.len(), b.len()));
    }
    Ok(-a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Softmax along each row, with max-subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Softmax down each column.
pub fn softmax_cols(m: &Matrix) -> Matrix {
    softmax_rows(&m.transpose()).transpose()
}

/// Backward pass of [`softmax_rows`]: given the output `p` and `∂L/∂p`,
/// returns `∂L/∂logits`.
pub fn softmax_rows_backward(p: &Matrix, grad_p: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let pr = p.row(r);
        let gr = grad_p.row(r);
        let inner = dot(pr, gr);
        for (o, (&pi, &gi)) in out.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
            *o = pi * (gi - inner);
        }
    }
    out
}

/// Backward pass of [`softmax_cols`].
pub fn softmax_cols_backward(p: &Matrix, grad_p: &Matrix) -> Matrix {
    softmax_rows_backward(&p.transpose(), &grad_p.transpose()).transpose()
}

/// `out[i][j] = κ(row_i(a), row_j(b))`.
pub fn pairwise_similarity(a: &Matrix, b: &Matrix, metric: Metric) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::dim("pairwise_similarity", a.cols(), b.cols()));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out[(i, j)] = metric.eval(a.row(i), b.row(j)).map_err(|e| match e {
                Error::ZeroNorm { op, operand } => Error::ZeroNorm {
                    op,
                    operand: if operand.starts_with("first") {
                        format!("row {i} of the left matrix")
                    } else {
                        format!("row {j} of the right matrix")
                    },
                },
                e => e,
            })?;
        }
    }
    Ok(out)
}

/// Backward pass of [`pairwise_similarity`].
pub fn pairwise_similarity_backward(
    a: &Matrix,
    b: &Matrix,
    metric: Metric,
    upstream: &Matrix,
) -> (Matrix, Matrix) {
    let mut grad_a = Matrix::zeros(a.rows(), a.cols());
    let mut grad_b = Matrix::zeros(b.rows(), b.cols());
    let d = a.cols();
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let g = upstream[(i, j)];
            let (ga, gb) = (
                &mut grad_a.data[i * d..(i + 1) * d],
                &mut grad_b.data[j * d..(j + 1) * d],
            );
            metric.accumulate_grad(a.row(i), b.row(j), g, ga, gb);
        }
    }
    (grad_a, grad_b)
}
