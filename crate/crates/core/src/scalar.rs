//! Scalar abstraction shared by every kernel and model.
//!
//! Models run in `f32`. The `f64` instantiation exists so gradient checks can
//! compare against finite differences with tight tolerances.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type of a [`Tensor`](crate::Tensor).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short name recorded in checkpoints and reports.
    const NAME: &'static str;

    /// `c = a · b` for row-major `a: m×k` and `b: k×n`, or `b: n×k` when
    /// `b_transposed`. Each output row depends only on the matching row of
    /// `a`, so processing rows one at a time or in a batch is bitwise equal.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        b: &[Self],
        b_transposed: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    /// `c = aᵀ · b` for row-major `a: k×m`, `b: k×n`.
    fn gemm_at(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        b: &[Self],
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

macro_rules! impl_scalar {
    ($ty:ty, $name:literal, $gemm:path) => {
        impl Scalar for $ty {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                b: &[Self],
                b_transposed: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsb, csb) = if b_transposed {
                    (1, k as isize)
                } else {
                    (n as isize, 1)
                };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe the row-major layouts.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        k as isize,
                        1,
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

            fn gemm_at(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                b: &[Self],
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: `a` is k×m row-major, read with swapped strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        1,
                        m as isize,
                        b.as_ptr(),
                        n as isize,
                        1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);
