//! Dense real-valued vectors, matrices and order-3 tensors.
//!
//! Everything is `f64` and stored contiguously. Matrices are row-major;
//! a [`Tensor3`] with dims `(d1, d2, d3)` stores element `[i, j, k]` at
//! `(i * d2 + j) * d3 + k`, so the last axis varies fastest. That layout is
//! part of the on-disk checkpoint contract and must not change.
//!
//! There is no broadcasting. Every operation that combines operands checks
//! their shapes and returns [`Error::Shape`] on mismatch.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self {
            data: vec![value; len],
        }
    }

    /// One-hot vector of length `len` with a 1 at `index`.
    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut v = Self::zeros(len);
        v.data[index] = 1.0;
        v
    }

    pub fn uniform<R: Rng + ?Sized>(len: usize, bound: f64, rng: &mut R) -> Self {
        Self {
            data: (0..len).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_len(&self, other: &Vector, op: &'static str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape(
                op,
                format!("lengths differ: {} vs {}", self.len(), other.len()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        self.check_same_len(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        self.check_same_len(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Vector) -> Result<Vector> {
        self.check_same_len(other, "elementwise_product")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        self.check_same_len(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn scale(&self, factor: f64) -> Vector {
        self.map(|x| x * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector {
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, other: &Vector, f: impl Fn(f64, f64) -> f64) -> Vector {
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Vector) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self::from_vec(data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                format!("{} elements for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("matrix", "ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
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

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vector {
        Vector::from_vec((0..self.rows).map(|r| self.get(r, c)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
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

    /// `self · x`.
    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "matvec",
                format!("{}x{} matrix times vector of length {}", self.rows, self.cols, x.len()),
            ));
        }
        let xs = x.as_slice();
        Ok(Vector::from_vec(
            self.data
                .chunks_exact(self.cols)
                .map(|row| row.iter().zip(xs).map(|(a, b)| a * b).sum())
                .collect(),
        ))
    }

    /// `selfᵀ · x`, i.e. the row vector `xᵀ · self`.
    pub fn t_matvec(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.rows {
            return Err(Error::shape(
                "t_matvec",
                format!("transposed {}x{} matrix times vector of length {}", self.rows, self.cols, x.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (row, &xr) in self.data.chunks_exact(self.cols).zip(x.as_slice()) {
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * xr;
            }
        }
        Ok(Vector::from_vec(out))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "elementwise_product", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `u ⊗ v`: the rank-one matrix with entries `u[i] * v[j]`.
pub fn outer_product(u: &Vector, v: &Vector) -> Matrix {
    let mut data = Vec::with_capacity(u.len() * v.len());
    for &a in u.iter() {
        data.extend(v.iter().map(|&b| a * b));
    }
    Matrix {
        rows: u.len(),
        cols: v.len(),
        data,
    }
}

/// One of the three axes of a [`Tensor3`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    First,
    Second,
    Third,
}

impl Axis {
    /// Axis from its 1-based mathematical index.
    pub fn from_index(i: usize) -> Result<Axis> {
        match i {
            1 => Ok(Axis::First),
            2 => Ok(Axis::Second),
            3 => Ok(Axis::Third),
            _ => Err(Error::InvalidArgument(format!("tensor axis {i} not in 1..=3"))),
        }
    }

    fn position(self) -> usize {
        match self {
            Axis::First => 0,
            Axis::Second => 1,
            Axis::Third => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d1: usize, d2: usize, d3: usize) -> Self {
        Self {
            dims: [d1, d2, d3],
            data: vec![0.0; d1 * d2 * d3],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(
                "tensor3",
                format!("{} elements for dims {dims:?}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    pub fn uniform<R: Rng + ?Sized>(dims: [usize; 3], bound: f64, rng: &mut R) -> Self {
        Self {
            dims,
            data: (0..dims.iter().product::<usize>())
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = value;
    }

    pub fn add_at(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let o = self.offset(i, j, k);
        self.data[o] += value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// The `d1 x d3` matrix `T[:, j, :]`.
    pub fn second_axis_slice(&self, j: usize) -> Matrix {
        let [d1, _, d3] = self.dims;
        let mut m = Matrix::zeros(d1, d3);
        for i in 0..d1 {
            for k in 0..d3 {
                m.set(i, k, self.get(i, j, k));
            }
        }
        m
    }

    pub fn set_second_axis_slice(&mut self, j: usize, slice: &Matrix) -> Result<()> {
        let [d1, _, d3] = self.dims;
        if slice.rows() != d1 || slice.cols() != d3 {
            return Err(Error::shape(
                "set_second_axis_slice",
                format!("{}x{} slice for tensor dims {:?}", slice.rows(), slice.cols(), self.dims),
            ));
        }
        for i in 0..d1 {
            for k in 0..d3 {
                self.set(i, j, k, slice.get(i, k));
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Mode-i product: contracts axis `axis` of `t` against the rows of `u`.
///
/// `result[.., j, ..] = Σ_d t[.., d, ..] · u[d, j]`, so the contracted axis
/// changes length from `u.rows()` to `u.cols()`.
pub fn mode_product(t: &Tensor3, u: &Matrix, axis: Axis) -> Result<Tensor3> {
    let [d1, d2, d3] = t.dims;
    let a = axis.position();
    if u.rows() != t.dims[a] {
        return Err(Error::shape(
            "mode_product",
            format!(
                "axis {} has length {} but the matrix has {} rows",
                a + 1,
                t.dims[a],
                u.rows()
            ),
        ));
    }
    let mut dims = t.dims;
    dims[a] = u.cols();
    let mut out = Tensor3::zeros(dims[0], dims[1], dims[2]);
    for i in 0..d1 {
        for j in 0..d2 {
            for k in 0..d3 {
                let x = t.get(i, j, k);
                if x == 0.0 {
                    continue;
                }
                let contracted = [i, j, k][a];
                for (jj, &w) in u.row(contracted).iter().enumerate() {
                    match axis {
                        Axis::First => out.add_at(jj, j, k, x * w),
                        Axis::Second => out.add_at(i, jj, k, x * w),
                        Axis::Third => out.add_at(i, j, jj, x * w),
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `(T ×₁ q) ×₂ v`: `result[k] = Σ_{i,j} T[i, j, k] · q[i] · v[j]`.
pub fn full_bilinear(t: &Tensor3, q: &Vector, v: &Vector) -> Result<Vector> {
    let [d1, d2, d3] = t.dims;
    if q.len() != d1 || v.len() != d2 {
        return Err(Error::shape(
            "full_bilinear",
            format!("tensor dims {:?} with vectors of length {} and {}", t.dims, q.len(), v.len()),
        ));
    }
    let mut out = vec![0.0; d3];
    for i in 0..d1 {
        for j in 0..d2 {
            let w = q[i] * v[j];
            if w == 0.0 {
                continue;
            }
            let base = t.offset(i, j, 0);
            for (o, &x) in out.iter_mut().zip(&t.data[base..base + d3]) {
                *o += x * w;
            }
        }
    }
    Ok(Vector::from_vec(out))
}

/// `max|a - b| / max(max|a|, max|b|)`; zero when both are identically zero.
pub fn relative_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_diff on slices of different length");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
