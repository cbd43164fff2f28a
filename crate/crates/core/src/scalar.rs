//! Floating-point scalar abstraction.
//!
//! Everything numeric in the crate is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. The laboratory defaults to `f64`; `f32`
//! is supported for cheap experimentation but several tolerances in the
//! verification harnesses assume double precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable by tensors, models, worlds and metrics.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Width in bytes of the little-endian encoding.
    const BYTES: usize;
    /// Short type name recorded in metadata.
    const NAME: &'static str;

    /// Converts an `f64` literal. Never fails for the float types.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("float conversion from f64 cannot fail")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float conversion to f64 cannot fail")
    }

    /// `c = a * b` for row-major `a` (m×k) and `b` (k×n), with optional
    /// transposition of either operand (the stored layout is then k×m or n×k).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
    );

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes from exactly [`Scalar::BYTES`] bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

// (row stride, col stride) of an m×k operand stored either as m×k or k×m.
#[inline]
fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        let _ = cols;
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $bytes:expr, $name:expr, $gemm:path) => {
        impl Scalar for $t {
            const BYTES: usize = $bytes;
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs length");
                assert_eq!(b.len(), k * n, "gemm: rhs length");
                assert_eq!(c.len(), m * n, "gemm: output length");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c.iter_mut().for_each(|v| *v = 0.0);
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: the slices have been length-checked against the
                // requested shapes and the strides address only within them.
                unsafe {
                    $gemm(
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
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f64, 8, "f64", matrixmultiply::dgemm);
impl_scalar!(f32, 4, "f32", matrixmultiply::sgemm);
