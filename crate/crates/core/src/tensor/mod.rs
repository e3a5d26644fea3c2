//! Dense tensors, matrices and the multilinear algebra needed for Tucker-2.
//!
//! Every tensor is stored row-major: the last index varies fastest. A conv
//! kernel is a [`Tensor4`] with dims `(D_h, D_w, S, T)`, so entry
//! `(h, w, s, t)` lives at `((h * D_w + w) * S + s) * T + t`.
//!
//! Modes are numbered from 1, as in the usual tensor notation: the input
//! channel mode of a kernel is mode 3 and the output channel mode is mode 4.

mod io;
mod matricize;

pub use io::{read_tensor4, write_tensor4, KERNEL_FORMAT_VERSION, KERNEL_MAGIC};
pub use matricize::{dematricize_mode3, dematricize_mode4, matricize_mode3, matricize_mode4};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("matrix dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{}x{} matrix needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `A Aᵀ`, exactly symmetric.
    pub fn gram(&self) -> DenseMatrix {
        let n = self.rows;
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
                out.data[i * n + j] = v;
                out.data[j * n + i] = v;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// First `k` columns.
    pub fn leading_columns(&self, k: usize) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, k, |i, j| self.get(i, j))
    }

    pub fn reshape(&self, new_dims: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(vec![self.rows, self.cols], self.data.clone())?.reshape(new_dims)
    }
}

/// Dense N-way tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("tensor dims must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: f64) {
        let o = self.offset(index);
        self.data[o] = v;
    }

    pub fn reshape(&self, new_dims: &[usize]) -> Result<Tensor> {
        let n: usize = new_dims.iter().product();
        if new_dims.is_empty() || new_dims.contains(&0) || n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) into {:?}",
                self.shape,
                self.data.len(),
                new_dims
            )));
        }
        Ok(Tensor { shape: new_dims.to_vec(), data: self.data.clone() })
    }

    pub fn into_tensor4(self) -> Result<Tensor4> {
        match self.shape[..] {
            [a, b, c, d] => Ok(Tensor4 { dims: [a, b, c, d], data: self.data }),
            _ => Err(Error::Shape(format!("expected a 4-way tensor, got {:?}", self.shape))),
        }
    }

    pub fn into_matrix(self) -> Result<DenseMatrix> {
        match self.shape[..] {
            [r, c] => DenseMatrix::from_vec(r, c, self.data),
            _ => Err(Error::Shape(format!("expected a 2-way tensor, got {:?}", self.shape))),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Dense 4-way conv kernel with dims `(D_h, D_w, S, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("kernel dims must be positive, got {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("kernel {dims:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for s in 0..dims[2] {
                    for t in 0..dims[3] {
                        data.push(f(h, w, s, t));
                    }
                }
            }
        }
        Tensor4 { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    /// Spatial height, width, input channels, output channels.
    pub fn d_h(&self) -> usize {
        self.dims[0]
    }

    pub fn d_w(&self) -> usize {
        self.dims[1]
    }

    pub fn s(&self) -> usize {
        self.dims[2]
    }

    pub fn t(&self) -> usize {
        self.dims[3]
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, h: usize, w: usize, s: usize, t: usize) -> usize {
        ((h * self.dims[1] + w) * self.dims[2] + s) * self.dims[3] + t
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, s: usize, t: usize) -> f64 {
        self.data[self.offset(h, w, s, t)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, s: usize, t: usize, v: f64) {
        let o = self.offset(h, w, s, t);
        self.data[o] = v;
    }

    /// Sum of squared entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Tensor4 {
        Tensor4 { dims: self.dims, data: self.data.iter().map(|v| v * c).collect() }
    }

    /// `‖self − other‖_F`.
    pub fn distance(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// Spatial size larger than 1×1, i.e. a member of the regularized set.
    pub fn is_spatial(&self) -> bool {
        self.dims[0] * self.dims[1] > 1
    }

    pub fn reshape(&self, new_dims: &[usize]) -> Result<Tensor> {
        self.to_tensor().reshape(new_dims)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor { shape: self.dims.to_vec(), data: self.data.clone() }
    }

    /// `self ×_mode u` for a kernel, keeping the 4-way type.
    pub fn mode_product(&self, u: &DenseMatrix, mode: usize) -> Result<Tensor4> {
        kmode_product(&self.to_tensor(), u, mode)?.into_tensor4()
    }
}

impl From<Tensor4> for Tensor {
    fn from(k: Tensor4) -> Tensor {
        Tensor { shape: k.dims.to_vec(), data: k.data }
    }
}

/// k-mode product `g ×_k u` with `u` of shape `J × R_k`:
///
/// `A(r_1, …, j, …, r_d) = Σ_{r_k} u(j, r_k) · g(r_1, …, r_k, …, r_d)`.
pub fn kmode_product(g: &Tensor, u: &DenseMatrix, mode: usize) -> Result<Tensor> {
    let ndim = g.ndim();
    if mode == 0 || mode > ndim {
        return Err(Error::ModeOutOfRange { mode, ndim });
    }
    let axis = mode - 1;
    let r = g.shape[axis];
    if u.cols() != r {
        return Err(Error::Shape(format!(
            "mode-{mode} product needs a matrix with {r} columns, got {}x{}",
            u.rows(),
            u.cols()
        )));
    }
    let j = u.rows();
    let pre: usize = g.shape[..axis].iter().product();
    let post: usize = g.shape[axis + 1..].iter().product();

    let mut shape = g.shape.clone();
    shape[axis] = j;
    let mut out = vec![0.0; pre * j * post];
    for p in 0..pre {
        let src = &g.data[p * r * post..(p + 1) * r * post];
        let dst = &mut out[p * j * post..(p + 1) * j * post];
        for jj in 0..j {
            let drow = &mut dst[jj * post..(jj + 1) * post];
            for rr in 0..r {
                let coef = u.get(jj, rr);
                if coef == 0.0 {
                    continue;
                }
                for (d, s) in drow.iter_mut().zip(&src[rr * post..(rr + 1) * post]) {
                    *d += coef * s;
                }
            }
        }
    }
    Ok(Tensor { shape, data: out })
}

/// Full multilinear product `g ×_1 U⁽¹⁾ ×_2 U⁽²⁾ ⋯ ×_d U⁽ᵈ⁾`.
pub fn full_multilinear(g: &Tensor, factors: &[DenseMatrix]) -> Result<Tensor> {
    if factors.len() != g.ndim() {
        return Err(Error::Shape(format!(
            "{}-way tensor needs {} factors, got {}",
            g.ndim(),
            g.ndim(),
            factors.len()
        )));
    }
    factors
        .iter()
        .enumerate()
        .try_fold(g.clone(), |acc, (k, u)| kmode_product(&acc, u, k + 1))
}
