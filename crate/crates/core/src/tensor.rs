//! Dense row-major tensors and the value kernels the autodiff graph executes.

use std::fmt;

use crate::Scalar;

/// Error raised when a tensor is built or combined with incompatible shapes.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ShapeError(pub String);

fn shape_err<T>(msg: impl Into<String>) -> Result<T, ShapeError> {
    Err(ShapeError(msg.into()))
}

/// An n-dimensional value with no attachment to any graph.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self, ShapeError> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return shape_err(format!(
                "shape {:?} holds {} elements but {} were supplied",
                shape,
                numel(&shape),
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, ShapeError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self, ShapeError> {
        Self::new(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<S> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Contiguous slice of the `i`th entry along the first axis.
    pub fn row(&self, i: usize) -> &[S] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_len(&self) -> usize {
        numel(&self.shape[1..])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self, ShapeError> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self, ShapeError> {
        if self.shape != other.shape {
            return shape_err(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::lit(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<S>]) -> Result<Self, ShapeError> {
        let Some(first) = items.first() else {
            return shape_err("cannot stack zero tensors");
        };
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(numel(&shape));
        for t in items {
            if t.shape != first.shape {
                return shape_err(format!("stack shapes differ: {:?} vs {:?}", t.shape, first.shape));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape, data })
    }

    /// Row-wise argmax over a rank-2 tensor; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = self.row_len();
        (0..self.shape[0])
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for j in 1..cols {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// kernels

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index of the broadcast source.
fn broadcast_map(src_shape: &[usize], out_shape: &[usize]) -> Result<Vec<usize>, ShapeError> {
    let r = out_shape.len();
    if src_shape.len() > r {
        return shape_err(format!("cannot broadcast {:?} to {:?}", src_shape, out_shape));
    }
    let off = r - src_shape.len();
    let mut strides = vec![0usize; r];
    let mut acc = 1;
    for i in (0..src_shape.len()).rev() {
        let d = src_shape[i];
        let o = out_shape[i + off];
        if d != o && d != 1 {
            return shape_err(format!("cannot broadcast {:?} to {:?}", src_shape, out_shape));
        }
        strides[i + off] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    let n = numel(out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(map)
}

pub(crate) fn broadcast_to<S: Scalar>(x: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>, ShapeError> {
    let map = broadcast_map(&x.shape, shape)?;
    Ok(Tensor {
        shape: shape.to_vec(),
        data: map.into_iter().map(|i| x.data[i]).collect(),
    })
}

/// Sums `x` down to `shape`, the adjoint of broadcasting `shape` up to `x.shape`.
pub(crate) fn sum_to<S: Scalar>(x: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>, ShapeError> {
    let map = broadcast_map(shape, &x.shape)?;
    let mut out = Tensor::zeros(shape.to_vec());
    for (i, &src) in map.iter().enumerate() {
        out.data[src] += x.data[i];
    }
    Ok(out)
}

pub(crate) fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, ShapeError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return shape_err(format!("matmul needs [m,k]x[k,n], got {:?} x {:?}", a.shape, b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub(crate) fn transpose<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>, ShapeError> {
    if a.rank() != 2 {
        return shape_err(format!("transpose needs rank 2, got {:?}", a.shape));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(a.data[i * n + j]);
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

pub(crate) fn keepdim_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

/// Index of the maximum along `axis` for every outer/inner position; ties go low.
fn argmax_axis<S: Scalar>(x: &Tensor<S>, axis: usize) -> Vec<usize> {
    let (outer, len, inner) = axis_layout(&x.shape, axis);
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut best = 0;
            for j in 1..len {
                if x.data[base + j * inner] > x.data[base + best * inner] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    out
}

pub(crate) fn max_axis<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>, ShapeError> {
    if axis >= x.rank() || x.shape[axis] == 0 {
        return shape_err(format!("max over axis {axis} of shape {:?}", x.shape));
    }
    let (_, len, inner) = axis_layout(&x.shape, axis);
    let arg = argmax_axis(x, axis);
    let data = arg
        .iter()
        .enumerate()
        .map(|(k, &j)| {
            let (o, i) = (k / inner, k % inner);
            x.data[o * len * inner + j * inner + i]
        })
        .collect();
    Ok(Tensor {
        shape: keepdim_shape(&x.shape, axis),
        data,
    })
}

pub(crate) fn argmax_mask<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>, ShapeError> {
    if axis >= x.rank() || x.shape[axis] == 0 {
        return shape_err(format!("argmax over axis {axis} of shape {:?}", x.shape));
    }
    let (_, len, inner) = axis_layout(&x.shape, axis);
    let mut out = Tensor::zeros(x.shape.clone());
    for (k, j) in argmax_axis(x, axis).into_iter().enumerate() {
        let (o, i) = (k / inner, k % inner);
        out.data[o * len * inner + j * inner + i] = S::one();
    }
    Ok(out)
}

pub(crate) fn gather<S: Scalar>(x: &Tensor<S>, index: &[usize], shape: &[usize]) -> Result<Tensor<S>, ShapeError> {
    if numel(shape) != index.len() {
        return shape_err("gather index length does not match output shape");
    }
    let mut data = Vec::with_capacity(index.len());
    for &i in index {
        match x.data.get(i) {
            Some(&v) => data.push(v),
            None => return shape_err(format!("gather index {i} out of bounds {}", x.len())),
        }
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

pub(crate) fn scatter_add<S: Scalar>(x: &Tensor<S>, index: &[usize], shape: &[usize]) -> Result<Tensor<S>, ShapeError> {
    if x.len() != index.len() {
        return shape_err("scatter index length does not match input size");
    }
    let mut out = Tensor::zeros(shape.to_vec());
    for (k, &i) in index.iter().enumerate() {
        match out.data.get_mut(i) {
            Some(slot) => *slot += x.data[k],
            None => return shape_err(format!("scatter index {i} out of bounds")),
        }
    }
    Ok(out)
}

/// Failure of the symmetric positive-definite solve.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolveError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
}

/// Lower Cholesky factor of the symmetric part of `a`.
pub(crate) fn cholesky<S: Scalar>(a: &Tensor<S>) -> Result<Vec<S>, SolveError> {
    if a.rank() != 2 || a.shape[0] != a.shape[1] {
        return Err(ShapeError(format!("cholesky needs a square matrix, got {:?}", a.shape)).into());
    }
    let n = a.shape[0];
    let half = S::lit(0.5);
    let scale = (0..n)
        .map(|i| a.data[i * n + i].abs())
        .fold(S::zero(), |m, v| if v > m { v } else { m });
    let floor = scale * S::epsilon() * S::lit(n as f64);
    let mut l = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let aij = (a.data[i * n + j] + a.data[j * n + i]) * half;
            let mut s = aij;
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > floor) {
                    return Err(SolveError::NotPositiveDefinite {
                        row: i,
                        pivot: s.as_f64(),
                    });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `sym(a) x = b` for every column of `b`.
pub(crate) fn solve_spd<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, SolveError> {
    let l = cholesky(a)?;
    let n = a.shape[0];
    if b.rank() != 2 || b.shape[0] != n {
        return Err(ShapeError(format!("solve needs rhs [{n}, m], got {:?}", b.shape)).into());
    }
    let m = b.shape[1];
    let mut x = b.data.clone();
    for c in 0..m {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[i * m + c];
            for k in 0..i {
                s -= l[i * n + k] * x[k * m + c];
            }
            x[i * m + c] = s / l[i * n + i];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = x[i * m + c];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k * m + c];
            }
            x[i * m + c] = s / l[i * n + i];
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert_eq!(Tensor::<f64>::scalar(2.0).shape(), &[] as &[usize]);
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint() {
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        let big = broadcast_to(&b, &[2, 3]).unwrap();
        assert_eq!(big.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let col = t(&[2, 1], &[5.0, 7.0]);
        let big = broadcast_to(&col, &[2, 3]).unwrap();
        assert_eq!(big.data(), &[5.0, 5.0, 5.0, 7.0, 7.0, 7.0]);
        let back = sum_to(&big, &[2, 1]).unwrap();
        assert_eq!(back.data(), &[15.0, 21.0]);
        assert!(broadcast_to(&t(&[2], &[1.0, 2.0]), &[3]).is_err());
    }

    #[test]
    fn max_axis_ties_go_to_lowest_index() {
        let x = t(&[2, 3], &[1.0, 4.0, 4.0, 2.0, 2.0, 0.0]);
        let mask = argmax_mask(&x, 1).unwrap();
        assert_eq!(mask.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(max_axis(&x, 1).unwrap().data(), &[4.0, 2.0]);
        assert_eq!(max_axis(&x, 0).unwrap().data(), &[2.0, 4.0, 4.0]);
    }

    #[test]
    fn spd_solve_recovers_rhs() {
        let a = t(&[2, 2], &[4.0, 1.0, 1.0, 3.0]);
        let b = t(&[2, 1], &[1.0, 2.0]);
        let x = solve_spd(&a, &b).unwrap();
        let back = matmul(&a, &x).unwrap();
        for (u, v) in back.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-14);
        }
        let singular = t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            solve_spd(&singular, &b),
            Err(SolveError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn argmax_rows_prefers_first() {
        let x = t(&[2, 2], &[1.0, 1.0, 0.0, 3.0]);
        assert_eq!(x.argmax_rows(), vec![0, 1]);
    }
}
