//! Scalar abstraction over the two supported element types.
//!
//! Training runs in `f32`; gradient checking runs in `f64` so that central
//! finite differences at `eps = 1e-4` are meaningful against a 1e-5
//! tolerance.

use num_traits::Float;

/// Element type of tensors. Implemented for `f32` and `f64` only.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static + std::iter::Sum
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = A * B` (or `c += A * B` when `accumulate`), row-major.
    ///
    /// A is logically `m x k`; when `ta` it is stored as its `k x m`
    /// transpose. B is logically `k x n`; when `tb` it is stored as its
    /// `n x k` transpose. C is always stored `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

/// Row/column strides for an operand that may be stored transposed.
#[inline]
fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        // Stored as cols x rows row-major; logical [i, j] = data[j * rows + i].
        let _ = cols;
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        ta: bool,
        b: &[f32],
        tb: bool,
        c: &mut [f32],
        accumulate: bool,
    ) {
        assert_eq!(a.len(), m * k, "gemm lhs size");
        assert_eq!(b.len(), k * n, "gemm rhs size");
        assert_eq!(c.len(), m * n, "gemm out size");
        let (rsa, csa) = strides(m, k, ta);
        let (rsb, csb) = strides(k, n, tb);
        let beta = if accumulate { 1.0 } else { 0.0 };
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        ta: bool,
        b: &[f64],
        tb: bool,
        c: &mut [f64],
        accumulate: bool,
    ) {
        assert_eq!(a.len(), m * k, "gemm lhs size");
        assert_eq!(b.len(), k * n, "gemm rhs size");
        assert_eq!(c.len(), m * n, "gemm out size");
        let (rsa, csa) = strides(m, k, ta);
        let (rsb, csb) = strides(k, n, tb);
        let beta = if accumulate { 1.0 } else { 0.0 };
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}
