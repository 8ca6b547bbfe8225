//! Dense row-major `f32` tensors and the GEMM kernel everything else sits on.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("{shape:?} ({n} values)"), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "from_rows: size mismatch");
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f32 = StandardNormal.sample(rng);
                v * std
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
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

    /// Leading dimension when viewed as a matrix (1-D tensors are a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!("{shape:?}"), format!("{:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, s: f32) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn transpose2d(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_rows(c, r, out)
    }

    /// Plain matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let n = other.cols();
        assert_eq!(k, other.rows(), "matmul: inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            Gemm {
                m,
                k,
                n,
                trans_a: false,
                trans_b: false,
            },
            &self.data,
            &other.data,
            &mut out,
            false,
        );
        Tensor::from_rows(m, n, out)
    }
}

/// Logical GEMM dimensions: `C[m×n] (+)= op(A)[m×k] · op(B)[k×n]`, where a
/// transposed operand is stored in its untransposed row-major layout.
#[derive(Clone, Copy, Debug)]
pub struct Gemm {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub trans_a: bool,
    pub trans_b: bool,
}

impl Gemm {
    fn strides(&self) -> (isize, isize, isize, isize) {
        let (rsa, csa) = if self.trans_a {
            (1, self.m as isize)
        } else {
            (self.k as isize, 1)
        };
        let (rsb, csb) = if self.trans_b {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        };
        (rsa, csa, rsb, csb)
    }

    fn check(&self, a: &[f32], b: &[f32], c: &[f32]) {
        assert_eq!(a.len(), self.m * self.k, "gemm: A has wrong length");
        assert_eq!(b.len(), self.k * self.n, "gemm: B has wrong length");
        assert_eq!(c.len(), self.m * self.n, "gemm: C has wrong length");
    }
}

/// Rows per parallel work item; below `PAR_MIN_FLOPS` the kernel stays sequential.
const ROW_BLOCK: usize = 32;
const PAR_MIN_FLOPS: usize = 1 << 18;

/// Single-threaded GEMM. `accumulate` adds into `c` instead of overwriting it.
pub fn gemm_sequential(g: Gemm, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    g.check(a, b, c);
    if g.m == 0 || g.n == 0 {
        return;
    }
    if g.k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa, rsb, csb) = g.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: lengths were checked above and the strides describe exactly the
    // row-major layouts of A, B and C.
    unsafe {
        matrixmultiply::sgemm(
            g.m,
            g.k,
            g.n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            g.n as isize,
            1,
        );
    }
}

/// GEMM split over row blocks of `C` when the `parallel` feature is on.
/// Each output row is produced by the same micro-kernel either way, so the
/// result does not depend on the number of threads.
pub fn gemm(g: Gemm, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    if !crate::par::is_parallel() || g.m <= ROW_BLOCK || g.m * g.k * g.n < PAR_MIN_FLOPS {
        gemm_sequential(g, a, b, c, accumulate);
        return;
    }
    g.check(a, b, c);
    let (rsa, csa, rsb, csb) = g.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    crate::par::for_each_chunk_mut(c, ROW_BLOCK * g.n, |block, c_rows| {
        let row0 = block * ROW_BLOCK;
        let rows = c_rows.len() / g.n;
        // SAFETY: row `row0 + i` of op(A) starts at offset `(row0 + i) * rsa`,
        // which stays inside `a` for every i < rows; `c_rows` is exactly the
        // matching block of C.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                g.k,
                g.n,
                1.0,
                a.as_ptr().offset(row0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c_rows.as_mut_ptr(),
                g.n as isize,
                1,
            );
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(g: Gemm, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0f64; g.m * g.n];
        for i in 0..g.m {
            for j in 0..g.n {
                for p in 0..g.k {
                    let av = if g.trans_a { a[p * g.m + i] } else { a[i * g.k + p] };
                    let bv = if g.trans_b { b[j * g.k + p] } else { b[p * g.n + j] };
                    c[i * g.n + j] += av as f64 * bv as f64;
                }
            }
        }
        c.into_iter().map(|v| v as f32).collect()
    }

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (70, 33, 90), (129, 64, 40)] {
            for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
                let g = Gemm { m, k, n, trans_a: ta, trans_b: tb };
                let a = Tensor::randn(&[m * k], 1.0, &mut rng).into_data();
                let b = Tensor::randn(&[k * n], 1.0, &mut rng).into_data();
                let want = naive(g, &a, &b);
                let mut got = vec![0.0; m * n];
                gemm(g, &a, &b, &mut got, false);
                let mut seq = vec![0.0; m * n];
                gemm_sequential(g, &a, &b, &mut seq, false);
                assert_eq!(got, seq, "parallel and sequential kernels must agree bitwise");
                for (x, y) in got.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-3, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn gemm_accumulates() {
        let g = Gemm { m: 2, k: 2, n: 2, trans_a: false, trans_b: false };
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = vec![1.0; 4];
        gemm(g, &a, &b, &mut c, true);
        assert_eq!(c, vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }
}
