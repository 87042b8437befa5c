//! Scalar abstraction shared by the tensor engine and the models.
//!
//! Training runs in `f32`; gradient checks and oracle-facing math run in
//! `f64`. Everything numeric is written against [`Scalar`] so both widths
//! share one implementation.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type for tensors and models.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short tag used in checkpoints and reports.
    const NAME: &'static str;

    /// `c = a · b` for row-major `a: m×k`, `b: k×n`, overwriting `c: m×n`.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        Self::gemm_strided(m, k, n, a, (k, 1), b, (n, 1), c, false);
    }

    /// `c (+)= op(a) · op(b)` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
        accumulate: bool,
    );

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every scalar width")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (usize, usize),
        b: &[f32],
        (rsb, csb): (usize, usize),
        c: &mut [f32],
        accumulate: bool,
    ) {
        assert!(c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        check_extent(a.len(), m, k, rsa, csa);
        check_extent(b.len(), k, n, rsb, csb);
        // SAFETY: extents checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (usize, usize),
        b: &[f64],
        (rsb, csb): (usize, usize),
        c: &mut [f64],
        accumulate: bool,
    ) {
        assert!(c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        check_extent(a.len(), m, k, rsa, csa);
        check_extent(b.len(), k, n, rsb, csb);
        // SAFETY: extents checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand too short: need index {last}, have {len}");
}
