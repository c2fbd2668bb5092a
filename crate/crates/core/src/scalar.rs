//! Floating-point element type shared by the model and its gradient checks.
//!
//! Training runs in `f32`; finite-difference checks run the same code in `f64`.

use num_traits::Float;
use std::fmt::Debug;
use std::iter::Sum;

pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// General matrix multiply `c = alpha * a * b + beta * c` on strided row-major storage.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every call site in this crate passes buffers whose extents cover
                // the strided m x k, k x n and m x n views (checked by `debug_extent`).
                debug_extent(a.len(), m, k, rsa, csa);
                debug_extent(b.len(), k, n, rsb, csb);
                debug_extent(c.len(), m, n, rsc, csc);
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[inline]
fn debug_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

/// `y[n x out] = x[n x in] * w[out x in]^T`, optionally accumulating into `y`.
pub fn matmul_wt<F: Scalar>(x: &[F], w: &[F], y: &mut [F], n: usize, d_in: usize, d_out: usize, acc: bool) {
    let beta = if acc { F::one() } else { F::zero() };
    F::gemm(n, d_in, d_out, F::one(), x, d_in as isize, 1, w, 1, d_in as isize, beta, y, d_out as isize, 1);
}

/// `dx[n x in] (+)= dy[n x out] * w[out x in]`.
pub fn matmul_dy_w<F: Scalar>(dy: &[F], w: &[F], dx: &mut [F], n: usize, d_in: usize, d_out: usize, acc: bool) {
    let beta = if acc { F::one() } else { F::zero() };
    F::gemm(n, d_out, d_in, F::one(), dy, d_out as isize, 1, w, d_in as isize, 1, beta, dx, d_in as isize, 1);
}

/// `dw[out x in] += dy[n x out]^T * x[n x in]`.
pub fn matmul_dyt_x<F: Scalar>(dy: &[F], x: &[F], dw: &mut [F], n: usize, d_in: usize, d_out: usize) {
    F::gemm(d_out, n, d_in, F::one(), dy, 1, d_out as isize, x, d_in as isize, 1, F::one(), dw, d_in as isize, 1);
}

/// `y[n x out] (+)= alpha * x[n x in] * w[in x out]` for adapter factors stored input-major.
#[allow(clippy::too_many_arguments)]
pub fn matmul_plain<F: Scalar>(x: &[F], w: &[F], y: &mut [F], n: usize, d_in: usize, d_out: usize, alpha: F, acc: bool) {
    let beta = if acc { F::one() } else { F::zero() };
    F::gemm(n, d_in, d_out, alpha, x, d_in as isize, 1, w, d_out as isize, 1, beta, y, d_out as isize, 1);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_match_naive_loops() {
        let (n, din, dout) = (3, 4, 2);
        let x: Vec<f64> = (0..n * din).map(|i| i as f64 * 0.5 - 1.0).collect();
        let w: Vec<f64> = (0..dout * din).map(|i| (i as f64).sin()).collect();
        let mut y = vec![0.0; n * dout];
        matmul_wt(&x, &w, &mut y, n, din, dout, false);
        for r in 0..n {
            for o in 0..dout {
                let want: f64 = (0..din).map(|i| x[r * din + i] * w[o * din + i]).sum();
                assert!((y[r * dout + o] - want).abs() < 1e-12);
            }
        }
        let mut dx = vec![0.0; n * din];
        matmul_dy_w(&y, &w, &mut dx, n, din, dout, false);
        for r in 0..n {
            for i in 0..din {
                let want: f64 = (0..dout).map(|o| y[r * dout + o] * w[o * din + i]).sum();
                assert!((dx[r * din + i] - want).abs() < 1e-12);
            }
        }
        let mut dw = vec![0.0; dout * din];
        matmul_dyt_x(&y, &x, &mut dw, n, din, dout);
        for o in 0..dout {
            for i in 0..din {
                let want: f64 = (0..n).map(|r| y[r * dout + o] * x[r * din + i]).sum();
                assert!((dw[o * din + i] - want).abs() < 1e-12);
            }
        }
    }
}
