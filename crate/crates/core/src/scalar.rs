//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A real floating-point scalar usable as tensor element type.
///
/// Implemented for `f32` and `f64`. The `gemm` hook lets the convolution
/// kernels reach an optimized matrix product for each concrete width.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// `c = a · b + beta · c` for row/column strided operands.
    ///
    /// `a` is `m × k`, `b` is `k × n`, `c` is `m × n`. Strides are in
    /// elements, given as (row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    /// Lossless-as-possible conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                // SAFETY: every index reachable through (m, k, n) and the
                // strides was bounds-checked against the slice lengths above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides unsupported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm operand out of bounds: {last} >= {len}");
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 - 2.0).collect();
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect();
        let mut c = vec![0.0; 8];
        f64::gemm(2, 3, 4, &a, (3, 1), &b, (4, 1), 0.0, &mut c, (4, 1));
        let want = naive(2, 3, 4, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn gemm_transposed_operand_via_strides() {
        // a stored as its transpose (k × m)
        let at: Vec<f32> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b: Vec<f32> = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = vec![0.0f32; 4];
        f32::gemm(2, 3, 2, &at, (1, 2), &b, (2, 1), 0.0, &mut c, (2, 1));
        // a = [[1,3,5],[2,4,6]]
        assert_eq!(c, vec![6.0, 8.0, 8.0, 10.0]);
    }

    #[test]
    fn lit_round_trips() {
        assert_eq!(f64::lit(0.25), 0.25);
        assert_eq!(f32::lit(0.5).as_f64(), 0.5);
    }
}
