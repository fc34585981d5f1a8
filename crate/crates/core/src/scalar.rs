//! Scalar abstraction over the floating-point element type.
//!
//! All numerical code in this crate is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. Training normally runs in `f32`; the
//! verification harness runs the same code paths in `f64`.

use std::fmt;

/// Floating-point element type usable by tensors, layers and losses.
///
/// Beyond the `num_traits` float surface this pins down a GEMM kernel and a
/// little-endian byte codec so checkpoints round-trip exactly.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + serde::Serialize
    + serde::de::DeserializeOwned
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag written into checkpoint headers ("f32" / "f64").
    const DTYPE: &'static str;
    /// Size of one element in bytes.
    const BYTES: usize;

    fn cast(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;

    /// General matrix multiply: `c = alpha * a(m×k) · b(k×n) + beta * c(m×n)`.
    ///
    /// Strides are in elements. Dispatches to the `matrixmultiply` kernel for
    /// the concrete type.
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

    fn write_le(slice: &[Self], out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Vec<Self>;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    #[inline]
    fn cast(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
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
        unsafe {
            matrixmultiply::sgemm(
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
            )
        }
    }

    fn write_le(slice: &[Self], out: &mut Vec<u8>) {
        out.reserve(slice.len() * 4);
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    #[inline]
    fn cast(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
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
        unsafe {
            matrixmultiply::dgemm(
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
            )
        }
    }

    fn write_le(slice: &[Self], out: &mut Vec<u8>) {
        out.reserve(slice.len() * 8);
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small_identity() {
        // 2x2 times identity
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let id = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, 2, 1, &id, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, a);
    }

    #[test]
    fn le_roundtrip() {
        let xs = vec![0.5f32, -1.25, 3.75e-3, f32::MIN_POSITIVE];
        let mut buf = Vec::new();
        f32::write_le(&xs, &mut buf);
        assert_eq!(f32::read_le(&buf), xs);
    }
}
