//! Strided matrix products for the network's floating-point types.

use longct_core::Scalar;

/// A strided matrix view into a slice: element `(i, j)` is
/// `data[offset + i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

pub(crate) struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], offset: usize, rs: usize, cs: usize) -> Self {
        Self { data, offset, rs, cs }
    }
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], offset: usize, rs: usize, cs: usize) -> Self {
        Self { data, offset, rs, cs }
    }
}

fn check(len: usize, offset: usize, rs: usize, cs: usize, rows: usize, cols: usize) {
    if rows > 0 && cols > 0 {
        let last = offset + (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "matrix view out of bounds: {last} >= {len}");
    }
}

/// Floating-point types with a dense GEMM kernel.
pub trait NetScalar: Scalar {
    const DTYPE: safetensors::Dtype;

    fn to_le(self, out: &mut Vec<u8>);

    fn from_le(bytes: &[u8]) -> Self;

    /// `C = alpha * A B + beta * C` for raw strided operands.
    ///
    /// # Safety
    /// All three views must be in bounds and `c` must not alias `a` or `b`.
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

impl NetScalar for f32 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F32;

    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl NetScalar for f64 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F64;

    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `C (m×n) = A (m×k) · B (k×n) + beta · C`, bounds-checked.
pub(crate) fn gemm<T: NetScalar>(m: usize, k: usize, n: usize, a: MatRef<T>, b: MatRef<T>, beta: T, c: MatMut<T>) {
    check(a.data.len(), a.offset, a.rs, a.cs, m, k);
    check(b.data.len(), b.offset, b.rs, b.cs, k, n);
    check(c.data.len(), c.offset, c.rs, c.cs, m, n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds checked above; `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_product_matches_naive() {
        let a: Vec<f64> = (0..12).map(|v| v as f64).collect(); // 3x4 row-major
        let b: Vec<f64> = (0..8).map(|v| (v as f64) * 0.5 - 1.0).collect(); // 4x2, column-major
        let mut c = vec![1.0; 6];
        gemm(3, 4, 2, MatRef::new(&a, 0, 4, 1), MatRef::new(&b, 0, 1, 4), 1.0, MatMut::new(&mut c, 0, 2, 1));
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = 1.0 + (0..4).map(|p| a[i * 4 + p] * b[p + 4 * j]).sum::<f64>();
                assert!((c[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    #[should_panic]
    fn out_of_bounds_view_panics() {
        let a = vec![0.0f32; 4];
        let mut c = vec![0.0f32; 4];
        gemm(2, 2, 2, MatRef::new(&a, 1, 2, 1), MatRef::new(&a, 0, 2, 1), 0.0, MatMut::new(&mut c, 0, 2, 1));
    }
}
