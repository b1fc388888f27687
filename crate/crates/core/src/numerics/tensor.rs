use crate::error::{Error, Result};
use crate::par;

/// Row-major dense array of `f64`. Networks here only need rank 1 and 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension for matrices; 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
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

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Plain matrix product `self @ rhs`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k as isize, 1), &rhs.data, (n as isize, 1), &mut out, false);
        Tensor::matrix(m, n, out)
    }
}

const GEMM_ROW_CHUNK: usize = 32;

/// `c (m x n, row-major) (+)= a (m x k) @ b (k x n)` with arbitrary strides on
/// `a` and `b`, so transposed operands cost nothing.
///
/// Output rows are processed in fixed chunks; each chunk is an independent
/// dgemm call, which keeps results identical whether or not chunks run in
/// parallel.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a_strides;
    let (rsb, csb) = b_strides;
    let max_a = (m as isize - 1) * rsa + (k as isize - 1) * csa;
    let max_b = (k as isize - 1) * rsb + (n as isize - 1) * csb;
    assert!(max_a >= 0 && (max_a as usize) < a.len(), "gemm lhs out of bounds");
    assert!(max_b >= 0 && (max_b as usize) < b.len(), "gemm rhs out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // Raw pointers are not Send; pass addresses instead.
    let a_addr = a.as_ptr() as usize;
    let b_addr = b.as_ptr() as usize;
    par::for_each_chunk_mut(c, GEMM_ROW_CHUNK * n, |chunk, out| {
        let r0 = chunk * GEMM_ROW_CHUNK;
        let rows = out.len() / n;
        // SAFETY: bounds were checked above for the full m x k / k x n extents;
        // each chunk reads rows r0..r0+rows of `a` and all of `b`, and writes
        // only its own disjoint slice of `c`.
        unsafe {
            let a_ptr = (a_addr as *const f64).offset(r0 as isize * rsa);
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a_ptr,
                rsa,
                csa,
                b_addr as *const f64,
                rsb,
                csb,
                beta,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}
