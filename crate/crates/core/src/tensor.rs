//! Dense row-major `f64` tensors and the fixed set of differentiable kernels
//! the adapter needs.
//!
//! Every forward kernel has a hand-written vector-Jacobian counterpart. There
//! is no tape: callers keep whatever forward values the backward rule needs
//! and call the `*_backward` function explicitly. Reductions always run in
//! ascending index order so repeated evaluation is bitwise reproducible.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("Tensor::from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Column `j` of a rank-2 tensor, copied out.
    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.at(i, j)).collect()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.check_same(other, "add")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.check_same(other, "sub")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// `self += c * other`, elementwise.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Sum over rows of a rank-2 tensor, producing one value per column.
    pub fn col_sums(&self) -> Tensor {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for i in 0..self.rows() {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Tensor::vector(out)
    }

    /// Adds `bias` to every row of a rank-2 tensor.
    pub fn add_row_broadcast(&self, bias: &Tensor) -> Result<Self> {
        if self.rank() != 2 || bias.len() != self.cols() {
            return Err(Error::dim("add_row_broadcast", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for i in 0..self.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }
}

fn require_matrix(t: &Tensor, op: &'static str) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::dim(op, t.shape(), &[0, 0]));
    }
    Ok(())
}

/// Matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix(a, "matmul")?;
    require_matrix(b, "matmul")?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix(a, "matmul_nt")?;
    require_matrix(b, "matmul_nt")?;
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    if b.cols() != k {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out[i * n + j] = dot(arow, b.row(j));
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix(a, "matmul_tn")?;
    require_matrix(b, "matmul_tn")?;
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, cot: &Tensor) -> Result<(Tensor, Tensor)> {
    require_matrix(cot, "matmul_backward")?;
    if cot.rows() != a.rows() || cot.cols() != b.cols() {
        return Err(Error::dim(
            "matmul_backward",
            cot.shape(),
            &[a.rows(), b.cols()],
        ));
    }
    Ok((matmul_nt(cot, b)?, matmul_tn(a, cot)?))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Vector-Jacobian product of softmax: given outputs `y` and cotangent `g`,
/// returns `y ⊙ (g − ⟨g, y⟩)`.
pub fn softmax_vjp(y: &[f64], g: &[f64]) -> Vec<f64> {
    let inner = dot(g, y);
    y.iter().zip(g).map(|(yi, gi)| yi * (gi - inner)).collect()
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    require_matrix(x, "softmax_rows")?;
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// Backward of [`softmax_rows`] expressed through its output `y`.
pub fn softmax_rows_backward(y: &Tensor, cot: &Tensor) -> Result<Tensor> {
    if y.shape() != cot.shape() {
        return Err(Error::dim("softmax_rows_backward", y.shape(), cot.shape()));
    }
    let mut out = Tensor::zeros(y.shape());
    for i in 0..y.rows() {
        let g = softmax_vjp(y.row(i), cot.row(i));
        out.row_mut(i).copy_from_slice(&g);
    }
    Ok(out)
}

/// Order of the distance used by distance-based gating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn from_order(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Norm::L1),
            2 => Ok(Norm::L2),
            other => Err(Error::Config(format!(
                "unsupported norm order p={other}; expected 1 or 2"
            ))),
        }
    }

    pub fn order(self) -> u32 {
        match self {
            Norm::L1 => 1,
            Norm::L2 => 2,
        }
    }
}

pub fn lp_distance(x: &[f64], y: &[f64], norm: Norm) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("lp_distance", &[x.len()], &[y.len()]));
    }
    Ok(lp_distance_unchecked(x, y, norm))
}

pub(crate) fn lp_distance_unchecked(x: &[f64], y: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::L1 => x.iter().zip(y).fold(0.0, |acc, (a, b)| acc + (a - b).abs()),
        Norm::L2 => x
            .iter()
            .zip(y)
            .fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b))
            .sqrt(),
    }
}

/// Gradient of `‖x − y‖_p` with respect to `x`. The gradient with respect to
/// `y` is its negation. Coordinates (L1) or points (L2) where the difference
/// is exactly zero get subgradient 0.
pub fn lp_distance_grad(x: &[f64], y: &[f64], norm: Norm) -> Vec<f64> {
    match norm {
        Norm::L1 => x
            .iter()
            .zip(y)
            .map(|(a, b)| {
                let d = a - b;
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect(),
        Norm::L2 => {
            let dist = lp_distance_unchecked(x, y, Norm::L2);
            if dist == 0.0 {
                return vec![0.0; x.len()];
            }
            x.iter().zip(y).map(|(a, b)| (a - b) / dist).collect()
        }
    }
}

/// `log(1 + exp(x))` in the overflow-safe form `max(x, 0) + log1p(exp(−|x|))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of [`softplus`], the logistic sigmoid.
pub fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Indices of the `k` largest entries, ties resolved toward the lower index,
/// returned in ascending index order.
pub fn topk_indices(x: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > x.len() {
        return Err(Error::Config(format!(
            "top-k requires 1 <= k <= {}, got k={k}",
            x.len()
        )));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// The differentiable primitives with a generic backward entry point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    MatMul,
    SoftmaxRows,
    LpDistance(Norm),
    Softplus,
}

/// Vector-Jacobian product of `op` evaluated at `inputs`.
///
/// Input conventions: `MatMul` takes `[a, b]`; `SoftmaxRows` takes `[x]`;
/// `LpDistance` takes `[x, y]` and a one-element cotangent; `Softplus` is
/// applied elementwise to `[x]`.
pub fn backward(op: Op, inputs: &[&Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
    let arity = match op {
        Op::MatMul | Op::LpDistance(_) => 2,
        Op::SoftmaxRows | Op::Softplus => 1,
    };
    if inputs.len() != arity {
        return Err(Error::Config(format!(
            "{op:?} expects {arity} inputs, got {}",
            inputs.len()
        )));
    }
    match op {
        Op::MatMul => {
            let (ga, gb) = matmul_backward(inputs[0], inputs[1], cot)?;
            Ok(vec![ga, gb])
        }
        Op::SoftmaxRows => {
            let y = softmax_rows(inputs[0])?;
            Ok(vec![softmax_rows_backward(&y, cot)?])
        }
        Op::LpDistance(norm) => {
            let (x, y) = (inputs[0], inputs[1]);
            if x.shape() != y.shape() {
                return Err(Error::dim("lp_distance_backward", x.shape(), y.shape()));
            }
            if cot.len() != 1 {
                return Err(Error::dim("lp_distance_backward", cot.shape(), &[1]));
            }
            let g = cot.data()[0];
            let gx: Vec<f64> = lp_distance_grad(x.data(), y.data(), norm)
                .into_iter()
                .map(|v| g * v)
                .collect();
            let gy = gx.iter().map(|v| -v).collect();
            Ok(vec![
                Tensor::new(x.shape().to_vec(), gx)?,
                Tensor::new(y.shape().to_vec(), gy)?,
            ])
        }
        Op::Softplus => {
            let x = inputs[0];
            if x.shape() != cot.shape() {
                return Err(Error::dim("softplus_backward", x.shape(), cot.shape()));
            }
            let data = x
                .data()
                .iter()
                .zip(cot.data())
                .map(|(&v, &g)| g * softplus_grad(v))
                .collect();
            Ok(vec![Tensor::new(x.shape().to_vec(), data)?])
        }
    }
}

/// A trainable value paired with its accumulated cotangent.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Dual {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        self.grad.axpy(1.0, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_identity_left() {
        let x = Tensor::from_rows(&[&[0.3, -1.5], &[2.0, 7.25]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &x).unwrap(), x);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn nt_and_tn_agree_with_explicit_transpose() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.25, -1.0]).unwrap();
        let b = Tensor::matrix(4, 3, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        assert_eq!(
            matmul_nt(&a, &b).unwrap(),
            matmul(&a, &b.transpose()).unwrap()
        );
        let c = Tensor::matrix(2, 4, (0..8).map(|i| 1.0 - i as f64 * 0.7).collect()).unwrap();
        assert_eq!(
            matmul_tn(&a, &c).unwrap(),
            matmul(&a.transpose(), &c).unwrap()
        );
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::from_rows(&[&[0.0, 0.0, 0.0]]).unwrap();
        for v in softmax_rows(&x).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = softmax(&[1000.0, 0.0]);
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1].abs() < 1e-12);
        let s = softmax(&[2.0, 1.0]);
        assert!((s[0] - 0.731059).abs() < 1e-6);
        assert!((s[1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn lp_distance_examples() {
        assert_eq!(lp_distance(&[1.0, 2.0], &[1.0, 2.0], Norm::L1).unwrap(), 0.0);
        let d1 = lp_distance(&[0.8, 0.1], &[1.0, 0.0], Norm::L1).unwrap();
        assert!((d1 - 0.3).abs() < 1e-15);
        assert_eq!(lp_distance(&[3.0, 4.0], &[0.0, 0.0], Norm::L2).unwrap(), 5.0);
        assert!(Norm::from_order(3).is_err());
        assert!(lp_distance(&[1.0], &[1.0, 2.0], Norm::L1).is_err());
    }

    #[test]
    fn softplus_examples() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-9);
        assert!((softplus(-1.0) - 0.313262).abs() < 1e-6);
        assert!(softplus(1e6).is_finite() && softplus(-1e6) >= 0.0);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[2.0, 1.0, 0.5, -1.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(topk_indices(&[0.1, 0.3, 0.2], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(topk_indices(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(topk_indices(&[-1.0, 5.0, 4.0], 2).unwrap(), vec![1, 2]);
        assert!(matches!(topk_indices(&[1.0], 0), Err(Error::Config(_))));
        assert!(matches!(topk_indices(&[1.0], 2), Err(Error::Config(_))));
    }

    #[test]
    fn backward_examples() {
        let a = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        let g = backward(Op::MatMul, &[&a, &b], &Tensor::full(&[1, 1], 1.0)).unwrap();
        assert_eq!(g[0].data(), &[3.0]);
        assert_eq!(g[1].data(), &[2.0]);

        let x = Tensor::vector(vec![3.0, 4.0]);
        let y = Tensor::vector(vec![0.0, 0.0]);
        let g = backward(Op::LpDistance(Norm::L2), &[&x, &y], &Tensor::vector(vec![1.0])).unwrap();
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[0].data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(g[1].data(), &[-g[0].data()[0], -g[0].data()[1]]);

        let bad = backward(Op::MatMul, &[&a, &b], &Tensor::zeros(&[2, 1]));
        assert!(matches!(bad, Err(Error::Dimension { .. })));
    }

    #[test]
    fn dual_accumulates_additively() {
        let mut d = Dual::new(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(d.grad.data(), &[0.0, 0.0]);
        d.accumulate(&Tensor::vector(vec![0.5, -1.0])).unwrap();
        d.accumulate(&Tensor::vector(vec![0.5, -1.0])).unwrap();
        assert_eq!(d.grad.data(), &[1.0, -2.0]);
        assert!(d.accumulate(&Tensor::vector(vec![1.0])).is_err());
        d.zero_grad();
        assert_eq!(d.grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn l1_grad_zero_at_coincident_coordinates() {
        assert_eq!(
            lp_distance_grad(&[1.0, 2.0, 0.0], &[1.0, 1.0, 3.0], Norm::L1),
            vec![0.0, 1.0, -1.0]
        );
        assert_eq!(lp_distance_grad(&[1.0], &[1.0], Norm::L2), vec![0.0]);
    }
}
