use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type of a tensor. Implemented for `f32` (training) and `f64`
/// (gradient checks and oracles).
pub trait Float: num_traits::Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    /// Size in bytes, used as the precision tag in checkpoints.
    const BYTES: usize;
    const NAME: &'static str;

    /// Converts an `f64` constant into this precision.
    fn c(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn to_le_bytes_vec(self, out: &mut Vec<u8>);

    fn from_le_slice(bytes: &[u8]) -> Self;

    /// `C ← α·A·B + β·C` on raw strided buffers.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must lie
    /// inside the corresponding buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

impl Float for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn c(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    unsafe fn gemm_raw(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn c(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    unsafe fn gemm_raw(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix operand: `rows × cols`, optionally read transposed from
/// a buffer laid out as `cols × rows`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// Treats `data` (stored `cols × rows`) as its transpose.
    pub fn t(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `C ← A·B + β·C` with `C` row-major `a.rows × b.cols`.
pub(crate) fn gemm<T: Float>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert!(a.data.len() >= a.rows * a.cols, "gemm: A buffer too small");
    assert!(b.data.len() >= b.rows * b.cols, "gemm: B buffer too small");
    assert!(c.len() >= a.rows * b.cols, "gemm: C buffer too small");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: buffer sizes are checked above against the dense strides.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}
