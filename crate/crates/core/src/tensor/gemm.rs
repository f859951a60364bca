/// A strided read-only view of a matrix stored in a flat slice.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
    /// Offset of element (0, 0) inside `data`.
    pub offset: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
            offset: 0,
        }
    }

    /// The transpose of a row-major `rows × cols` matrix, viewed as `cols × rows`.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
            offset: 0,
        }
    }

    pub fn with_offset(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `out (m×n) = a (m×k) · b (k×n)`, or `out += a·b` when `accumulate` is set.
///
/// `out` is row-major and contiguous. Single-threaded, so results are
/// bitwise reproducible for identical inputs.
pub fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], accumulate: bool) {
    assert!(out.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out[..m * n].fill(0.0);
        }
        return;
    }
    assert!(a.last_index(m, k) < a.data.len(), "gemm lhs view out of bounds");
    assert!(b.last_index(k, n) < b.data.len(), "gemm rhs view out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access of the three
    // views stays inside its slice; `out` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
