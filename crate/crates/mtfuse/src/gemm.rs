//! Matrix-multiply dispatch used by the convolution layers.
//!
//! All heavy linear algebra funnels through [`mat_mul_into`]. When the build
//! script finds a system OpenBLAS the f32/f64 kernels are routed there;
//! otherwise the pure-Rust `matrixmultiply` kernels are used. Both backends
//! are deterministic for fixed inputs on a fixed machine.

use ndarray::{ArrayView2, ArrayViewMut2, ScalarOperand};
use num_traits::{Float, NumCast};

/// Floating point element type the networks are generic over.
///
/// `f32` is the training dtype; `f64` exists so gradient checks can run at
/// full precision through the identical code path.
pub trait Scalar:
    Float + NumCast + ScalarOperand + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C <- alpha * A(m,k) * B(k,n) + beta * C(m,n) with explicit strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

#[cfg(has_openblas)]
mod cblas {
    pub const ROW_MAJOR: i32 = 101;
    pub const NO_TRANS: i32 = 111;
    pub const TRANS: i32 = 112;

    extern "C" {
        pub fn cblas_sgemm(
            order: i32,
            transa: i32,
            transb: i32,
            m: i32,
            n: i32,
            k: i32,
            alpha: f32,
            a: *const f32,
            lda: i32,
            b: *const f32,
            ldb: i32,
            beta: f32,
            c: *mut f32,
            ldc: i32,
        );
        pub fn cblas_dgemm(
            order: i32,
            transa: i32,
            transb: i32,
            m: i32,
            n: i32,
            k: i32,
            alpha: f64,
            a: *const f64,
            lda: i32,
            b: *const f64,
            ldb: i32,
            beta: f64,
            c: *mut f64,
            ldc: i32,
        );
    }

    /// (trans flag, leading dimension) for a strided matrix with `cols`
    /// logical columns, or None when the layout is not BLAS-compatible.
    pub fn layout(rows: usize, cols: usize, rs: isize, cs: isize) -> Option<(i32, i32)> {
        if cs == 1 && rs >= cols.max(1) as isize {
            Some((NO_TRANS, rs as i32))
        } else if rs == 1 && cs >= rows.max(1) as isize {
            Some((TRANS, cs as i32))
        } else {
            None
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $mm:path, $cblas:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                #[cfg(has_openblas)]
                {
                    if csc == 1 && rsc >= n.max(1) as isize {
                        if let (Some((ta, lda)), Some((tb, ldb))) =
                            (cblas::layout(m, k, rsa, csa), cblas::layout(k, n, rsb, csb))
                        {
                            if m <= i32::MAX as usize && n <= i32::MAX as usize && k <= i32::MAX as usize {
                                $cblas(
                                    cblas::ROW_MAJOR,
                                    ta,
                                    tb,
                                    m as i32,
                                    n as i32,
                                    k as i32,
                                    alpha,
                                    a,
                                    lda,
                                    b,
                                    ldb,
                                    beta,
                                    c,
                                    rsc as i32,
                                );
                                return;
                            }
                        }
                    }
                }
                $mm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
            }
        }
    };
}

#[cfg(has_openblas)]
impl_scalar!(f32, matrixmultiply::sgemm, cblas::cblas_sgemm);
#[cfg(has_openblas)]
impl_scalar!(f64, matrixmultiply::dgemm, cblas::cblas_dgemm);

#[cfg(not(has_openblas))]
macro_rules! impl_scalar_pure {
    ($t:ty, $mm:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                $mm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
            }
        }
    };
}

#[cfg(not(has_openblas))]
impl_scalar_pure!(f32, matrixmultiply::sgemm);
#[cfg(not(has_openblas))]
impl_scalar_pure!(f64, matrixmultiply::dgemm);

/// C <- alpha * A @ B + beta * C over ndarray views of any stride layout.
pub fn mat_mul_into<T: Scalar>(
    alpha: T,
    a: ArrayView2<'_, T>,
    b: ArrayView2<'_, T>,
    beta: T,
    c: &mut ArrayViewMut2<'_, T>,
) {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "gemm inner dimensions disagree: {k} vs {k2}");
    assert_eq!((m, n), c.dim(), "gemm output shape mismatch");
    let sa = [a.strides()[0], a.strides()[1]];
    let sb = [b.strides()[0], b.strides()[1]];
    let sc = [c.strides()[0], c.strides()[1]];
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa[0],
            sa[1],
            b.as_ptr(),
            sb[0],
            sb[1],
            beta,
            c.as_mut_ptr(),
            sc[0],
            sc[1],
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};

    #[test]
    fn matches_naive_product() {
        let a = arr2(&[[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let b = arr2(&[[7.0f32, 8.0], [9.0, 10.0], [11.0, 12.0]]);
        let mut c = Array2::<f32>::zeros((2, 2));
        mat_mul_into(1.0, a.view(), b.view(), 0.0, &mut c.view_mut());
        assert_eq!(c, arr2(&[[58.0, 64.0], [139.0, 154.0]]));
    }

    #[test]
    fn accumulates_with_beta() {
        let a = arr2(&[[2.0f64]]);
        let b = arr2(&[[3.0f64]]);
        let mut c = arr2(&[[10.0f64]]);
        mat_mul_into(1.0, a.view(), b.view(), 1.0, &mut c.view_mut());
        assert_eq!(c[[0, 0]], 16.0);
    }

    #[test]
    fn handles_transposed_views() {
        let a = arr2(&[[1.0f32, 4.0], [2.0, 5.0], [3.0, 6.0]]);
        let b = arr2(&[[7.0f32, 9.0, 11.0], [8.0, 10.0, 12.0]]);
        let mut c = Array2::<f32>::zeros((2, 2));
        // a^T (2x3) @ b^T (3x2)
        mat_mul_into(1.0, a.t(), b.t(), 0.0, &mut c.view_mut());
        assert_eq!(c, arr2(&[[58.0, 64.0], [139.0, 154.0]]));
    }

    #[test]
    fn strided_subviews_work() {
        let a = Array2::from_shape_fn((4, 6), |(i, j)| (i * 6 + j) as f64);
        let b = Array2::from_shape_fn((6, 5), |(i, j)| (i as f64 - j as f64) * 0.5);
        let asub = a.slice(ndarray::s![1..3, 1..5]);
        let bsub = b.slice(ndarray::s![1..5, 2..4]);
        let mut c = Array2::<f64>::zeros((2, 2));
        mat_mul_into(1.0, asub, bsub, 0.0, &mut c.view_mut());
        let mut expect = Array2::<f64>::zeros((2, 2));
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..4 {
                    expect[[i, j]] += asub[[i, k]] * bsub[[k, j]];
                }
            }
        }
        assert!((&c - &expect).iter().all(|d| d.abs() < 1e-12));
    }
}
