use super::exec::Execution;
use super::precision::PrecisionMode;
use super::NumericError;

/// Dense row-major tensor whose values live on the grid of its
/// [`PrecisionMode`].
///
/// Tensors are immutable values: every operation returns a new tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: PrecisionMode,
}

/// Right-hand side of a binary elementwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

impl<'a> From<&'a Tensor> for Operand<'a> {
    fn from(t: &'a Tensor) -> Self {
        Operand::Tensor(t)
    }
}

impl From<f64> for Operand<'_> {
    fn from(v: f64) -> Self {
        Operand::Scalar(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    MaxAbs,
    Min,
    Max,
}

/// Sign with `sign(0) = 0`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Indices of the `k` largest `magnitudes`, returned in ascending index
/// order. Equal magnitudes prefer the lower index.
pub fn top_k_indices(magnitudes: &[f64], k: usize) -> Vec<usize> {
    let n = magnitudes.len();
    if k >= n {
        return (0..n).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    let by_rank = |a: &usize, b: &usize| magnitudes[*b].total_cmp(&magnitudes[*a]).then(a.cmp(b));
    if k == 1 {
        let best = order.iter().copied().min_by(by_rank).unwrap_or(0);
        return vec![best];
    }
    order.select_nth_unstable_by(k - 1, by_rank);
    order.truncate(k);
    order.sort_unstable();
    order
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Validating constructor: `data` must match `shape` and every value must
    /// be representable under `precision` (NaN is never accepted as input).
    pub fn new(shape: Vec<usize>, data: Vec<f64>, precision: PrecisionMode) -> Result<Self, NumericError> {
        let expected = element_count(&shape);
        if expected != data.len() {
            return Err(NumericError::InvalidLength { expected, actual: data.len() });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !precision.is_representable(**v)) {
            return Err(NumericError::NotRepresentable { index, value, precision });
        }
        Ok(Self { shape, data, precision })
    }

    /// Rounds every value onto the grid of `precision` instead of rejecting.
    pub fn quantized(shape: Vec<usize>, data: Vec<f64>, precision: PrecisionMode) -> Result<Self, NumericError> {
        let data = data.into_iter().map(|v| precision.round(v)).collect();
        Self::new(shape, data, precision)
    }

    /// F64 tensor convenience constructor.
    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericError> {
        Self::new(shape, data, PrecisionMode::F64)
    }

    /// Result constructor: may hold infinities or NaN produced by arithmetic.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>, precision: PrecisionMode) -> Self {
        debug_assert_eq!(element_count(&shape), data.len());
        Self { shape, data, precision }
    }

    pub fn zeros(shape: Vec<usize>, precision: PrecisionMode) -> Self {
        Self::full(shape, 0.0, precision)
    }

    pub fn full(shape: Vec<usize>, value: f64, precision: PrecisionMode) -> Self {
        let n = element_count(&shape);
        Self { shape, data: vec![precision.round(value); n], precision }
    }

    pub fn identity(n: usize, precision: PrecisionMode) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { shape: vec![n, n], data, precision }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn precision(&self) -> PrecisionMode {
        self.precision
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), NumericError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(NumericError::ShapeMismatch(format!("expected rank 2, got shape {:?}", self.shape))),
        }
    }

    pub fn get2(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, NumericError> {
        if element_count(&shape) != self.data.len() {
            return Err(NumericError::ShapeMismatch(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        Ok(Self { shape, data: self.data.clone(), precision: self.precision })
    }

    /// Re-quantize into another precision mode.
    pub fn to_precision(&self, precision: PrecisionMode) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| precision.round(v)).collect(), precision }
    }

    pub fn transpose(&self) -> Result<Self, NumericError> {
        let (r, c) = self.dims2()?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self { shape: vec![c, r], data, precision: self.precision })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| self.precision.round(f(v))).collect(),
            precision: self.precision,
        }
    }

    pub fn abs(&self) -> Self {
        self.map(f64::abs)
    }

    pub fn sign(&self) -> Self {
        self.map(sign)
    }

    pub fn scale(&self, factor: f64) -> Self {
        let p = self.precision;
        let factor = p.round(factor);
        self.map(|v| p.mul(v, factor))
    }

    pub fn add<'a>(&self, rhs: impl Into<Operand<'a>>) -> Result<Self, NumericError> {
        self.binary(BinaryOp::Add, rhs.into())
    }

    pub fn sub<'a>(&self, rhs: impl Into<Operand<'a>>) -> Result<Self, NumericError> {
        self.binary(BinaryOp::Sub, rhs.into())
    }

    pub fn mul<'a>(&self, rhs: impl Into<Operand<'a>>) -> Result<Self, NumericError> {
        self.binary(BinaryOp::Mul, rhs.into())
    }

    pub fn div<'a>(&self, rhs: impl Into<Operand<'a>>) -> Result<Self, NumericError> {
        self.binary(BinaryOp::Div, rhs.into())
    }

    /// Elementwise `op(self_i, rhs_i)`. A tensor operand either matches the
    /// shape exactly or equals it up to some index and has size-1 trailing
    /// dimensions after it.
    pub fn binary(&self, op: BinaryOp, rhs: Operand<'_>) -> Result<Self, NumericError> {
        let p = self.precision;
        let apply = |a: f64, b: f64| match op {
            BinaryOp::Add => p.add(a, b),
            BinaryOp::Sub => p.sub(a, b),
            BinaryOp::Mul => p.mul(a, b),
            BinaryOp::Div => p.div(a, b),
        };
        let data = match rhs {
            Operand::Scalar(s) => {
                let s = p.round(s);
                self.data.iter().map(|&a| apply(a, s)).collect()
            }
            Operand::Tensor(b) => {
                self.check_precision(b)?;
                let block = self.broadcast_block(b)?;
                self.data.iter().enumerate().map(|(i, &a)| apply(a, b.data[i / block])).collect()
            }
        };
        Ok(Self::from_raw(self.shape.clone(), data, p))
    }

    /// Number of consecutive `self` elements that share one `b` element.
    fn broadcast_block(&self, b: &Tensor) -> Result<usize, NumericError> {
        let mismatch =
            || NumericError::ShapeMismatch(format!("cannot broadcast {:?} against {:?}", b.shape, self.shape));
        if b.shape.len() != self.shape.len() {
            return Err(mismatch());
        }
        let prefix = b.shape.iter().zip(&self.shape).take_while(|(x, y)| x == y).count();
        if b.shape[prefix..].iter().any(|&d| d != 1) {
            return Err(mismatch());
        }
        Ok(element_count(&self.shape[prefix..]))
    }

    fn check_precision(&self, other: &Tensor) -> Result<(), NumericError> {
        if self.precision != other.precision {
            return Err(NumericError::PrecisionMismatch { left: self.precision, right: other.precision });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self, NumericError> {
        self.matmul_with(other, Execution::default())
    }

    /// `[m x k] . [k x n]`. Rows are independent, so the parallel path is
    /// bit-identical to the sequential one; Half inputs always run
    /// sequentially.
    pub fn matmul_with(&self, other: &Tensor, exec: Execution) -> Result<Self, NumericError> {
        self.check_precision(other)?;
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(NumericError::ShapeMismatch(format!(
                "matmul inner dimensions differ: {:?} . {:?}",
                self.shape, other.shape
            )));
        }
        let p = self.precision;
        let exec = if p.is_half() { Execution::Sequential } else { exec.for_work(m * n * k) };
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0; m * n];
        if n > 0 {
            exec.for_each_chunk(&mut out, n, |row, dst| {
                let lhs = &a[row * k..(row + 1) * k];
                for (col, slot) in dst.iter_mut().enumerate() {
                    *slot = p.dot_strided(lhs, b, col, n);
                }
            });
        }
        Ok(Self::from_raw(vec![m, n], out, p))
    }

    pub fn matmul_nt(&self, other: &Tensor) -> Result<Self, NumericError> {
        self.matmul_nt_with(other, Execution::default())
    }

    /// `[m x k] . [n x k]^T`, reading both operands along contiguous rows.
    /// Bit-identical to `self.matmul(&other.transpose())`.
    pub fn matmul_nt_with(&self, other: &Tensor, exec: Execution) -> Result<Self, NumericError> {
        self.check_precision(other)?;
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(NumericError::ShapeMismatch(format!(
                "matmul_nt inner dimensions differ: {:?} . {:?}^T",
                self.shape, other.shape
            )));
        }
        let p = self.precision;
        let exec = if p.is_half() { Execution::Sequential } else { exec.for_work(m * n * k) };
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0; m * n];
        if n > 0 {
            exec.for_each_chunk(&mut out, n, |row, dst| {
                let lhs = &a[row * k..(row + 1) * k];
                for (col, slot) in dst.iter_mut().enumerate() {
                    *slot = p.dot(lhs, &b[col * k..(col + 1) * k]);
                }
            });
        }
        Ok(Self::from_raw(vec![m, n], out, p))
    }

    /// Reduce along `axis`, removing it from the shape.
    pub fn reduce(&self, op: ReduceOp, axis: usize) -> Result<Self, NumericError> {
        self.reduce_with(op, axis, Execution::default())
    }

    pub fn reduce_with(&self, op: ReduceOp, axis: usize, exec: Execution) -> Result<Self, NumericError> {
        let (outer, len, inner) = self.axis_layout(axis)?;
        let p = self.precision;
        let data = &self.data;
        let at = |o: usize, i: usize, j: usize| data[(o * len + i) * inner + j];
        let reduce_one = |slot: usize| {
            let (o, j) = (slot / inner, slot % inner);
            let values = (0..len).map(|i| at(o, i, j));
            match op {
                ReduceOp::Sum => p.sum(values),
                ReduceOp::Mean => p.mean(values, len),
                ReduceOp::MaxAbs => values.map(f64::abs).fold(f64::NEG_INFINITY, nan_max),
                ReduceOp::Max => values.fold(f64::NEG_INFINITY, nan_max),
                ReduceOp::Min => values.fold(f64::INFINITY, nan_min),
            }
        };
        let exec = if p.is_half() { Execution::Sequential } else { exec.for_work(self.len()) };
        let out = exec.map(outer * inner, reduce_one);
        Ok(Self::from_raw(self.reduced_shape(axis), out, p))
    }

    /// Mean of the `k` largest absolute values along `axis`. The selected
    /// values are summed in index order, so `k = len` reproduces the mean of
    /// absolute values exactly and `k = 1` the maximum absolute value.
    pub fn topk_abs(&self, axis: usize, k: usize) -> Result<Self, NumericError> {
        let (outer, len, inner) = self.axis_layout(axis)?;
        if k == 0 || k > len {
            return Err(NumericError::KOutOfRange { k, len });
        }
        let p = self.precision;
        let mut out = Vec::with_capacity(outer * inner);
        let mut column = vec![0.0; len];
        for o in 0..outer {
            for j in 0..inner {
                for (i, c) in column.iter_mut().enumerate() {
                    *c = self.data[(o * len + i) * inner + j].abs();
                }
                let picked = top_k_indices(&column, k);
                let total = p.sum(picked.iter().map(|&i| column[i]));
                out.push(p.div(total, p.count(k)));
            }
        }
        Ok(Self::from_raw(self.reduced_shape(axis), out, p))
    }

    fn axis_layout(&self, axis: usize) -> Result<(usize, usize, usize), NumericError> {
        if axis >= self.rank() {
            return Err(NumericError::AxisOutOfRange { axis, rank: self.rank() });
        }
        let len = self.shape[axis];
        if len == 0 {
            return Err(NumericError::EmptyAxis { axis });
        }
        let outer = element_count(&self.shape[..axis]);
        let inner = element_count(&self.shape[axis + 1..]);
        Ok((outer, len, inner))
    }

    fn reduced_shape(&self, axis: usize) -> Vec<usize> {
        let mut shape = self.shape.clone();
        shape.remove(axis);
        shape
    }
}

#[inline]
fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

#[inline]
fn nan_min(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.min(b)
    }
}
