//! Dense row-major `f64` tensors.
//!
//! Everything the networks touch is a matrix (`[rows, cols]`); a batch of
//! samples is `[batch, features]`, a bias is `[1, features]` and a scalar
//! loss is `[1, 1]`. The kernels here assume that and panic on malformed
//! shapes. Public entry points elsewhere validate shapes up front and report
//! [`Error::Shape`](crate::Error::Shape) instead.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("Tensor::new", format!("invalid shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite tensor entry {bad}")));
        }
        Ok(Self { shape, data })
    }

    /// Matrix constructor for kernels that already know the sizes are right.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_parts(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(1, 1, vec![value])
    }

    /// `[n, 1]` column from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self::from_parts(values.len(), 1, values.to_vec())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_parts(rows, cols, data)
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a `[1, 1]` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    fn assert_same_shape(&self, other: &Tensor, op: &str) {
        assert_eq!(
            self.shape, other.shape,
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape, other.shape
        );
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        self.assert_same_shape(other, "zip_map");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self · other` for `[m, k] · [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        // SAFETY: the pointers cover m*k, k*n and m*n contiguous row-major
        // buffers, matching the strides passed.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Tensor::from_parts(m, n, out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_parts(c, r, out)
    }

    /// `[1, n]` repeated to `[rows, n]`.
    pub fn broadcast_rows(&self, rows: usize) -> Tensor {
        let (r, c) = self.dims2();
        assert_eq!(r, 1, "broadcast_rows needs a single row, got {r}");
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(&self.data);
        }
        Tensor::from_parts(rows, c, out)
    }

    /// Column sums as a `[1, n]` row.
    pub fn sum_rows(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        Tensor::from_parts(1, c, out)
    }

    /// `[n, 1]` repeated to `[n, cols]`.
    pub fn broadcast_cols(&self, cols: usize) -> Tensor {
        let (r, c) = self.dims2();
        assert_eq!(c, 1, "broadcast_cols needs a single column, got {c}");
        let mut out = Vec::with_capacity(r * cols);
        for &v in &self.data {
            out.extend(std::iter::repeat(v).take(cols));
        }
        Tensor::from_parts(r, cols, out)
    }

    /// Row sums as a `[n, 1]` column.
    pub fn sum_cols(&self) -> Tensor {
        let (r, c) = self.dims2();
        let out = (0..r)
            .map(|i| self.data[i * c..(i + 1) * c].iter().sum())
            .collect();
        Tensor::from_parts(r, 1, out)
    }

    /// Row `i` of the result is row `index[i]` of `self`.
    pub fn gather_rows(&self, index: &[usize]) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            assert!(i < r, "gather_rows: index {i} out of {r} rows");
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor::from_parts(index.len(), c, out)
    }

    /// Adjoint of [`gather_rows`](Self::gather_rows): row `i` of `self` is
    /// added into row `index[i]` of a `[rows, n]` zero matrix.
    pub fn scatter_add_rows(&self, index: &[usize], rows: usize) -> Tensor {
        let (r, c) = self.dims2();
        assert_eq!(r, index.len(), "scatter_add_rows: index length");
        let mut out = vec![0.0; rows * c];
        for (src, &dst) in index.iter().enumerate() {
            for (o, v) in out[dst * c..(dst + 1) * c]
                .iter_mut()
                .zip(&self.data[src * c..(src + 1) * c])
            {
                *o += v;
            }
        }
        Tensor::from_parts(rows, c, out)
    }

    pub fn sum_all(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    /// `[1, 1]` expanded to `[rows, cols]`.
    pub fn broadcast_all(&self, rows: usize, cols: usize) -> Tensor {
        Tensor::full(rows, cols, self.item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_inputs() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![1, 2], vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let a = Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.5 - 2.0);
        let b = Tensor::from_fn(4, 2, |i, j| (i as f64) - (j as f64) * 1.5);
        let c = a.matmul(&b);
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let a = Tensor::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let idx = [2, 0, 2, 1];
        let g = a.gather_rows(&idx);
        assert_eq!(g.row(0), a.row(2));
        let back = g.scatter_add_rows(&idx, 3);
        assert_eq!(back.row(2), &[8.0, 10.0]);
        assert_eq!(back.row(1), a.row(1));
    }

    #[test]
    fn reductions_and_broadcasts() {
        let a = Tensor::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(a.sum_rows().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(a.sum_cols().data(), &[3.0, 12.0]);
        assert_eq!(a.sum_all().item(), 15.0);
        assert_eq!(a.sum_cols().broadcast_cols(2).data(), &[3.0, 3.0, 12.0, 12.0]);
        assert_eq!(a.transpose().shape(), &[3, 2]);
        assert_eq!(a.transpose().get(2, 1), 5.0);
    }
}
