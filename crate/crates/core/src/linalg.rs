//! Dense row-major matrices with explicit forward/backward pairs.
//!
//! Every primitive used by the networks and losses lives here as a pair of
//! functions: a forward pass that returns the value and a backward pass that
//! maps an upstream gradient to gradients of the inputs. There is no tape; the
//! callers compose backward passes in reverse order by hand.

use std::fmt;

use thiserror::Error;

/// Smallest norm a row may have before normalization refuses it.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("degenerate vector: norm {norm:e} is not above {EPS_NORM:e}")]
    DegenerateVector { norm: f64 },
    #[error("non-finite loss while probing parameter `{param}` entry {index}")]
    Probe { param: String, index: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2D({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            if r > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{:?}", self.row(r))?;
        }
        if self.rows > 8 {
            write!(f, "; ...")?;
        }
        write!(f, "]")
    }
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::Dimension {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. Panics on ragged input.
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

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so guard the degenerate width.
        let width = self.cols.max(1);
        self.data.chunks_exact(width).take(self.rows)
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &Tensor2D, k: f64) -> Result<()> {
        self.check_same("add_scaled", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hconcat(&self, other: &Tensor2D) -> Result<Self> {
        if self.rows != other.rows {
            return Err(LinalgError::Dimension {
                op: "hconcat",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Self {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Splits columns at `at` into `(left, right)`.
    pub fn hsplit(&self, at: usize) -> (Self, Self) {
        assert!(at <= self.cols);
        let mut left = Self::zeros(self.rows, at);
        let mut right = Self::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            let row = self.row(r);
            left.row_mut(r).copy_from_slice(&row[..at]);
            right.row_mut(r).copy_from_slice(&row[at..]);
        }
        (left, right)
    }

    fn check_same(&self, op: &'static str, other: &Tensor2D) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::Dimension {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

/// A parameter value paired with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTensor {
    pub value: Tensor2D,
    pub grad: Tensor2D,
}

impl DualTensor {
    pub fn new(value: Tensor2D) -> Self {
        let grad = Tensor2D::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    /// Adds `g` into the gradient accumulator.
    pub fn accumulate(&mut self, g: &Tensor2D) -> Result<()> {
        self.grad.add_scaled(g, 1.0)
    }
}

/// `a × b`.
pub fn matmul_fwd(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(LinalgError::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor2D {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `aᵀ × b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.rows != b.rows {
        return Err(LinalgError::Dimension {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; k * m];
    for r in 0..n {
        let arow = &a.data[r * k..(r + 1) * k];
        let brow = &b.data[r * m..(r + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor2D {
        rows: k,
        cols: m,
        data: out,
    })
}

/// `a × bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(LinalgError::Dimension {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, m) = (a.rows, b.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            out[i * m + j] = dot(arow, b.row(j));
        }
    }
    Ok(Tensor2D {
        rows: n,
        cols: m,
        data: out,
    })
}

/// Returns `(upstream × bᵀ, aᵀ × upstream)`.
pub fn matmul_bwd(a: &Tensor2D, b: &Tensor2D, upstream: &Tensor2D) -> Result<(Tensor2D, Tensor2D)> {
    if a.cols != b.rows || upstream.rows != a.rows || upstream.cols != b.cols {
        return Err(LinalgError::Dimension {
            op: "matmul_bwd",
            left: (a.rows, b.cols),
            right: upstream.shape(),
        });
    }
    Ok((matmul_nt(upstream, b)?, matmul_tn(a, upstream)?))
}

/// Adds a `1 × cols` bias row to every row.
pub fn add_bias_fwd(x: &Tensor2D, bias: &Tensor2D) -> Result<Tensor2D> {
    if bias.rows != 1 || bias.cols != x.cols {
        return Err(LinalgError::Dimension {
            op: "add_bias",
            left: x.shape(),
            right: bias.shape(),
        });
    }
    let mut out = x.clone();
    for r in 0..out.rows {
        for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

/// Gradient of the bias: column sums of the upstream gradient.
pub fn add_bias_bwd(upstream: &Tensor2D) -> Tensor2D {
    let mut g = Tensor2D::zeros(1, upstream.cols);
    for row in upstream.iter_rows() {
        for (o, v) in g.data.iter_mut().zip(row) {
            *o += v;
        }
    }
    g
}

pub fn relu_fwd(x: &Tensor2D) -> Tensor2D {
    Tensor2D {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect(),
    }
}

/// Masks the upstream gradient where the forward input was `<= 0`.
pub fn relu_bwd(x: &Tensor2D, upstream: &Tensor2D) -> Result<Tensor2D> {
    x.check_same("relu_bwd", upstream)?;
    Ok(Tensor2D {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit-length copy of a single vector.
pub fn l2_normalize_fwd(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n <= EPS_NORM || !n.is_finite() {
        return Err(LinalgError::DegenerateVector { norm: n });
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Applies `(I − x̂x̂ᵀ)/‖x‖` to the upstream gradient.
pub fn l2_normalize_bwd(x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    if x.len() != upstream.len() {
        return Err(LinalgError::Dimension {
            op: "l2_normalize_bwd",
            left: (1, x.len()),
            right: (1, upstream.len()),
        });
    }
    let n = norm(x);
    if n <= EPS_NORM || !n.is_finite() {
        return Err(LinalgError::DegenerateVector { norm: n });
    }
    let proj = dot(x, upstream) / (n * n);
    Ok(x.iter()
        .zip(upstream)
        .map(|(xi, gi)| (gi - proj * xi) / n)
        .collect())
}

/// Row-wise normalization of a matrix.
pub fn l2_normalize_rows_fwd(x: &Tensor2D) -> Result<Tensor2D> {
    let mut out = x.clone();
    for r in 0..x.rows {
        let unit = l2_normalize_fwd(x.row(r))?;
        out.row_mut(r).copy_from_slice(&unit);
    }
    Ok(out)
}

pub fn l2_normalize_rows_bwd(x: &Tensor2D, upstream: &Tensor2D) -> Result<Tensor2D> {
    x.check_same("l2_normalize_rows_bwd", upstream)?;
    let mut out = Tensor2D::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let g = l2_normalize_bwd(x.row(r), upstream.row(r))?;
        out.row_mut(r).copy_from_slice(&g);
    }
    Ok(out)
}

/// Column-wise max over rows. Returns the pooled `1 × cols` row and, per
/// column, the first row index attaining the maximum.
pub fn max_pool_rows_fwd(x: &Tensor2D) -> Result<(Tensor2D, Vec<usize>)> {
    if x.rows == 0 {
        return Err(LinalgError::Dimension {
            op: "max_pool_rows",
            left: x.shape(),
            right: (1, x.cols),
        });
    }
    let mut pooled = x.row(0).to_vec();
    let mut argmax = vec![0usize; x.cols];
    for r in 1..x.rows {
        for (c, &v) in x.row(r).iter().enumerate() {
            if v > pooled[c] {
                pooled[c] = v;
                argmax[c] = r;
            }
        }
    }
    Ok((Tensor2D::row_vector(&pooled), argmax))
}

/// Routes the pooled gradient back to the argmax rows.
pub fn max_pool_rows_bwd(rows: usize, argmax: &[usize], upstream: &Tensor2D) -> Result<Tensor2D> {
    if upstream.rows != 1 || upstream.cols != argmax.len() {
        return Err(LinalgError::Dimension {
            op: "max_pool_rows_bwd",
            left: (1, argmax.len()),
            right: upstream.shape(),
        });
    }
    let mut out = Tensor2D::zeros(rows, argmax.len());
    for (c, &r) in argmax.iter().enumerate() {
        out.set(r, c, upstream.data[c]);
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor2D) -> Tensor2D {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Tensor2D) -> Tensor2D {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Index of the first maximum in a slice.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-block outcome of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Entry with the largest relative error and its two gradient values.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err < self.tol)
    }

    pub fn failing(&self) -> impl Iterator<Item = &BlockCheck> {
        self.blocks.iter().filter(|b| !(b.max_rel_err < self.tol))
    }
}

/// Finite-difference settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Gradients smaller than this, times `max(1, |loss|)`, are compared in
    /// absolute terms.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

/// Relative error with a floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(abs_floor);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradients stored in `params[i].grad` against central
/// differences of `loss`, entry by entry. `loss` sees the perturbed values.
pub fn grad_check<F>(
    names: &[&str],
    params: &mut [DualTensor],
    opts: GradCheckOptions,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[DualTensor]) -> f64,
{
    if !(opts.step > 0.0) {
        return Err(LinalgError::BadStep(opts.step));
    }
    assert_eq!(names.len(), params.len());
    // Central-difference roundoff grows with the loss value, so the floor
    // below which errors are judged absolutely scales with it too.
    let base = loss(params);
    let floor = opts.abs_floor * base.abs().max(1.0);
    let mut blocks = Vec::with_capacity(params.len());
    for b in 0..params.len() {
        let n = params[b].value.data.len();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut worst = (0, 0.0, 0.0);
        for i in 0..n {
            let orig = params[b].value.data[i];
            params[b].value.data[i] = orig + opts.step;
            let up = loss(params);
            params[b].value.data[i] = orig - opts.step;
            let down = loss(params);
            params[b].value.data[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(LinalgError::Probe {
                    param: names[b].to_string(),
                    index: i,
                });
            }
            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = params[b].grad.data[i];
            max_abs = max_abs.max((analytic - numeric).abs());
            let rel = relative_error(analytic, numeric, floor);
            if rel > max_rel {
                max_rel = rel;
                worst = (i, analytic, numeric);
            }
        }
        blocks.push(BlockCheck {
            name: names[b].to_string(),
            entries: n,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            worst_index: worst.0,
            worst_analytic: worst.1,
            worst_numeric: worst.2,
        });
    }
    Ok(GradCheckReport {
        blocks,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2D {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor2D::from_vec(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
        let mut out = Tensor2D::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    /// Sum of `upstream ⊙ f(x)` as a scalar probe for backward checks.
    fn weighted_sum(y: &Tensor2D, w: &Tensor2D) -> f64 {
        dot(y.data(), w.data())
    }

    #[test]
    fn matmul_identity_and_inner_product() {
        let i = Tensor2D::identity(2);
        let v = Tensor2D::from_rows(&[[3.0], [4.0]]);
        assert_eq!(matmul_fwd(&i, &v).unwrap(), v);
        let a = Tensor2D::from_rows(&[[1.0, 2.0]]);
        assert_eq!(matmul_fwd(&a, &v).unwrap(), Tensor2D::from_rows(&[[11.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let fast = matmul_fwd(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a = Tensor2D::zeros(2, 3);
        let b = Tensor2D::zeros(2, 3);
        match matmul_fwd(&a, &b) {
            Err(LinalgError::Dimension { left, right, .. }) => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matmul_bwd_ones_upstream_identity_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(3, 3, &mut rng);
        let b = Tensor2D::identity(3);
        let up = Tensor2D::filled(3, 3, 1.0);
        let (ga, _) = matmul_bwd(&a, &b, &up).unwrap();
        // d/da sum(a·I) = ones, which equals the row sums of `up` broadcast.
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut ap = a.clone();
                ap.set(i, j, a.get(i, j) + h);
                let mut am = a.clone();
                am.set(i, j, a.get(i, j) - h);
                let fd = (weighted_sum(&matmul_fwd(&ap, &b).unwrap(), &up)
                    - weighted_sum(&matmul_fwd(&am, &b).unwrap(), &up))
                    / (2.0 * h);
                assert!((ga.get(i, j) - fd).abs() < 1e-8);
                assert!((ga.get(i, j) - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matmul_bwd_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(2, 3, &mut rng);
        let b = random(3, 4, &mut rng);
        let (ga, gb) = matmul_bwd(&a, &b, &Tensor2D::zeros(2, 4)).unwrap();
        assert_eq!(ga.max_abs(), 0.0);
        assert_eq!(gb.max_abs(), 0.0);
    }

    #[test]
    fn matmul_bwd_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let up = random(3, 2, &mut rng);
        let (ga, gb) = matmul_bwd(&a, &b, &up).unwrap();
        let mut params = vec![DualTensor::new(a.clone()), DualTensor::new(b.clone())];
        params[0].grad = ga;
        params[1].grad = gb;
        let report = grad_check(&["a", "b"], &mut params, GradCheckOptions::default(), |p| {
            weighted_sum(&matmul_fwd(&p[0].value, &p[1].value).unwrap(), &up)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-5, "{report:?}");
    }

    #[test]
    fn relu_values_and_kink() {
        let x = Tensor2D::row_vector(&[-1.0, 0.0, 2.0]);
        assert_eq!(relu_fwd(&x), Tensor2D::row_vector(&[0.0, 0.0, 2.0]));
        let g = relu_bwd(&x, &Tensor2D::filled(1, 3, 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_bwd_matches_differences_off_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = random(4, 5, &mut rng);
        for v in x.data_mut() {
            if v.abs() < 1e-4 {
                *v = 0.5;
            }
        }
        let up = random(4, 5, &mut rng);
        let mut params = vec![DualTensor::new(x.clone())];
        params[0].grad = relu_bwd(&x, &up).unwrap();
        let report = grad_check(&["x"], &mut params, GradCheckOptions::default(), |p| {
            weighted_sum(&relu_fwd(&p[0].value), &up)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-5);
    }

    #[test]
    fn l2_normalize_cases() {
        assert_eq!(l2_normalize_fwd(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let u = [0.6, 0.0, -0.8];
        let back = l2_normalize_fwd(&u).unwrap();
        for (a, b) in u.iter().zip(&back) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            l2_normalize_fwd(&[0.0, 0.0]),
            Err(LinalgError::DegenerateVector { .. })
        ));
        assert!(matches!(
            l2_normalize_fwd(&[1e-13, 0.0]),
            Err(LinalgError::DegenerateVector { .. })
        ));
    }

    #[test]
    fn l2_normalize_bwd_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(1, 7, &mut rng);
        let up = random(1, 7, &mut rng);
        let mut params = vec![DualTensor::new(x.clone())];
        params[0].grad = Tensor2D::row_vector(&l2_normalize_bwd(x.row(0), up.row(0)).unwrap());
        let report = grad_check(&["x"], &mut params, GradCheckOptions::default(), |p| {
            dot(&l2_normalize_fwd(p[0].value.row(0)).unwrap(), up.row(0))
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-5, "{report:?}");
    }

    #[test]
    fn max_pool_routes_to_first_argmax() {
        let x = Tensor2D::from_rows(&[[1.0, 5.0], [3.0, 5.0], [2.0, 0.0]]);
        let (p, idx) = max_pool_rows_fwd(&x).unwrap();
        assert_eq!(p.data(), &[3.0, 5.0]);
        assert_eq!(idx, vec![1, 0]);
        let g = max_pool_rows_bwd(3, &idx, &Tensor2D::row_vector(&[2.0, 7.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 7.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn least_squares_gradient_is_exact() {
        // f(w) = ½‖Xw − y‖², ∇ = Xᵀ(Xw − y).
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(6, 3, &mut rng);
        let y = random(6, 1, &mut rng);
        let w = random(3, 1, &mut rng);
        let mut resid = matmul_fwd(&x, &w).unwrap();
        resid.add_scaled(&y, -1.0).unwrap();
        let mut params = vec![DualTensor::new(w)];
        params[0].grad = matmul_tn(&x, &resid).unwrap();
        let report = grad_check(&["w"], &mut params, GradCheckOptions::default(), |p| {
            let mut r = matmul_fwd(&x, &p[0].value).unwrap();
            r.add_scaled(&y, -1.0).unwrap();
            0.5 * dot(r.data(), r.data())
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut params = vec![DualTensor::new(Tensor2D::filled(2, 2, 0.3))];
        let report = grad_check(&["p"], &mut params, GradCheckOptions::default(), |_| 4.2).unwrap();
        assert_eq!(report.blocks[0].max_abs_err, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn nonfinite_probe_names_parameter() {
        let mut params = vec![DualTensor::new(Tensor2D::zeros(1, 2))];
        let err = grad_check(&["bad"], &mut params, GradCheckOptions::default(), |_| {
            f64::NAN
        })
        .unwrap_err();
        assert_eq!(
            err,
            LinalgError::Probe {
                param: "bad".into(),
                index: 0
            }
        );
        let err = grad_check(
            &["bad"],
            &mut params,
            GradCheckOptions {
                step: 0.0,
                ..Default::default()
            },
            |_| 0.0,
        )
        .unwrap_err();
        assert_eq!(err, LinalgError::BadStep(0.0));
    }

    #[test]
    fn two_layer_mlp_chain_rule() {
        // loss = sum(up ⊙ relu(X W1 + b1) W2)
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(5, 3, &mut rng);
        let up = random(5, 2, &mut rng);
        let w1 = random(3, 4, &mut rng);
        let b1 = random(1, 4, &mut rng);
        let w2 = random(4, 2, &mut rng);
        let fwd = |w1: &Tensor2D, b1: &Tensor2D, w2: &Tensor2D| {
            let z = add_bias_fwd(&matmul_fwd(&x, w1).unwrap(), b1).unwrap();
            let h = relu_fwd(&z);
            (z, h.clone(), matmul_fwd(&h, w2).unwrap())
        };
        let (z, h, _) = fwd(&w1, &b1, &w2);
        let (gh, gw2) = matmul_bwd(&h, &w2, &up).unwrap();
        let gz = relu_bwd(&z, &gh).unwrap();
        let (_, gw1) = matmul_bwd(&x, &w1, &gz).unwrap();
        let gb1 = add_bias_bwd(&gz);
        let mut params = vec![
            DualTensor::new(w1),
            DualTensor::new(b1),
            DualTensor::new(w2),
        ];
        params[0].grad = gw1;
        params[1].grad = gb1;
        params[2].grad = gw2;
        let report = grad_check(
            &["w1", "b1", "w2"],
            &mut params,
            GradCheckOptions::default(),
            |p| weighted_sum(&fwd(&p[0].value, &p[1].value, &p[2].value).2, &up),
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-5, "{report:?}");
    }

    proptest! {
        #[test]
        fn identity_is_neutral(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(rows, cols, &mut rng);
            prop_assert_eq!(matmul_fwd(&Tensor2D::identity(rows), &a).unwrap(), a.clone());
            prop_assert_eq!(matmul_fwd(&a, &Tensor2D::identity(cols)).unwrap(), a);
        }

        #[test]
        fn normalized_rows_have_unit_norm(v in proptest::collection::vec(-1e3f64..1e3, 1..16)) {
            prop_assume!(norm(&v) > 1e-6);
            let u = l2_normalize_fwd(&v).unwrap();
            let n = norm(&u);
            prop_assert!((n - 1.0).abs() <= 1e-12);
        }
    }
}
