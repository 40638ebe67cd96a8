//! Dense row-major arrays and the small set of kernels the encoder and the
//! disentanglement need.
//!
//! Storage is `f32`; every reduction accumulates in `f64` in ascending index
//! order, so results are bit-reproducible across runs and thread counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A shaped `f32` array. Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Builds a tensor from `f64` values, rounding each to `f32`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    /// Row `r` of a tensor viewed as `rows × (product of remaining dims)`.
    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("{what} must be 2-D, got {other:?}"))),
        }
    }
}

/// `a × b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul lhs")?;
    let (k2, n) = b.expect_matrix("matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions {m}×{k} · {k2}×{n}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0f64;
            for (t, &av) in arow.iter().enumerate() {
                acc += av as f64 * b.data[t * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a × bᵀ` for `a: m×k`, `b: n×k`; the layout of a PyTorch `Linear` weight.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul lhs")?;
    let (n, k2) = b.expect_matrix("matmul rhs (transposed)")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_transposed inner dimensions {m}×{k} · ({n}×{k2})ᵀ"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b.data[j * k..(j + 1) * k]) as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Adds `bias` to every row of `a` in place.
pub fn add_row_bias(a: &mut Tensor, bias: &[f32]) -> Result<()> {
    let c = a.cols();
    if bias.len() != c {
        return Err(Error::Shape(format!(
            "bias of length {} for rows of width {c}",
            bias.len()
        )));
    }
    for row in a.data.chunks_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = (*v as f64 + b as f64) as f32;
        }
    }
    Ok(())
}

/// Elementwise `a + b`.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "add {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 + y as f64) as f32)
        .collect();
    Tensor::new(a.shape.clone(), data)
}

/// `f64` dot product accumulated in index order.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + x as f64 * y as f64)
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax of every row.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.expect_matrix("softmax input")?;
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        let max = row.iter().fold(f64::NEG_INFINITY, |mx, &v| mx.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (o, e) in out[i * n..(i + 1) * n].iter_mut().zip(&exps) {
            *o = (e / total) as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Plain LayerNorm of one vector.
pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Result<Vec<f32>> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::Shape(format!(
            "layer_norm width {} with gamma {} / beta {}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let (mean, var) = mean_var(&xs);
    let sigma = (var + eps as f64).sqrt();
    Ok(xs
        .iter()
        .zip(gamma)
        .zip(beta)
        .map(|((&v, &g), &b)| (g as f64 * (v - mean) / sigma + b as f64) as f32)
        .collect())
}

/// Row-wise LayerNorm of a matrix.
pub fn layer_norm_rows(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor> {
    let (m, n) = x.expect_matrix("layer_norm input")?;
    let mut data = Vec::with_capacity(m * n);
    for r in 0..m {
        data.extend(layer_norm(x.row(r), gamma, beta, eps)?);
    }
    Tensor::new(vec![m, n], data)
}

/// The linear part of a LayerNorm whose scale `σ` was fixed by the full
/// residual stream. Applying it to any split of the stream and summing gives
/// `LayerNorm(x) − β` exactly (up to rounding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnFold {
    pub gamma: Vec<f32>,
    pub sigma: f64,
}

impl LnFold {
    pub fn from_stream(x: &[f32], gamma: &[f32], eps: f32) -> Result<Self> {
        if gamma.len() != x.len() {
            return Err(Error::Shape(format!(
                "fold width {} with gamma {}",
                x.len(),
                gamma.len()
            )));
        }
        let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let (_, var) = mean_var(&xs);
        Ok(Self {
            gamma: gamma.to_vec(),
            sigma: (var + eps as f64).sqrt(),
        })
    }

    /// `γ ⊙ (p − mean(p)) / σ`, kept in `f64`.
    pub fn apply(&self, part: &[f64]) -> Vec<f64> {
        let mean = part.iter().sum::<f64>() / part.len() as f64;
        part.iter()
            .zip(&self.gamma)
            .map(|(&p, &g)| g as f64 * (p - mean) / self.sigma)
            .collect()
    }
}

/// Splits `LayerNorm(Σ parts)` into one normalized term per part plus the
/// `β` term.
pub fn layer_norm_additive(
    parts: &[Vec<f32>],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<(Vec<Vec<f32>>, Vec<f32>)> {
    let d = gamma.len();
    if parts.is_empty() {
        return Err(Error::Invalid("layer_norm_additive needs at least one part".into()));
    }
    if beta.len() != d || parts.iter().any(|p| p.len() != d) {
        return Err(Error::Shape(format!(
            "layer_norm_additive parts must all have width {d}"
        )));
    }
    let mut total = vec![0.0f64; d];
    for p in parts {
        for (t, &v) in total.iter_mut().zip(p) {
            *t += v as f64;
        }
    }
    let total32: Vec<f32> = total.iter().map(|&v| v as f32).collect();
    let fold = LnFold::from_stream(&total32, gamma, eps)?;
    let normalized = parts
        .iter()
        .map(|p| {
            let p64: Vec<f64> = p.iter().map(|&v| v as f64).collect();
            fold.apply(&p64).into_iter().map(|v| v as f32).collect()
        })
        .collect();
    Ok((normalized, beta.to_vec()))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

/// The sigmoid approximation used by the original CLIP checkpoints.
pub fn quick_gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x / (1.0 + (-1.702 * x).exp())) as f32
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

/// A scalar map over the patch grid, indexed `(row, col)` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl GridMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("empty grid {rows}×{cols}")));
        }
        if rows * cols != values.len() {
            return Err(Error::Shape(format!(
                "grid {rows}×{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid map".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Number of cells that are nonzero.
    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn same_shape(&self, other: &GridMap) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "grid {}×{} vs {}×{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &GridMap, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Adds `other` cell by cell into `self`.
    pub fn accumulate(&mut self, other: &GridMap) -> Result<()> {
        self.same_shape(other)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }
}

/// 3×3 median filter with edge-replicated borders.
pub fn median_filter_2d(m: &GridMap) -> GridMap {
    let (rows, cols) = m.dims();
    let mut out = Vec::with_capacity(rows * cols);
    let mut window = [0.0f64; 9];
    for r in 0..rows {
        for c in 0..cols {
            let mut n = 0;
            for dr in [-1isize, 0, 1] {
                let rr = (r as isize + dr).clamp(0, rows as isize - 1) as usize;
                for dc in [-1isize, 0, 1] {
                    let cc = (c as isize + dc).clamp(0, cols as isize - 1) as usize;
                    window[n] = m.get(rr, cc);
                    n += 1;
                }
            }
            window.sort_unstable_by(f64::total_cmp);
            out.push(window[4]);
        }
    }
    GridMap {
        rows,
        cols,
        values: out,
    }
}
