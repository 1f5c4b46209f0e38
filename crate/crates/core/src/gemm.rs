//! Strided f64 matrix multiply, backed by `matrixmultiply`.

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        View { data, rows, cols, rs: cols, cs: 1 }
    }

    /// Sub-block `[r0, r0+rows) × [c0, c0+cols)`.
    pub fn block(&self, r0: usize, rows: usize, c0: usize, cols: usize) -> View<'a> {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        let off = r0 * self.rs + c0 * self.cs;
        View {
            data: &self.data[off.min(self.data.len())..],
            rows,
            cols,
            rs: self.rs,
            cs: self.cs,
        }
    }

    pub fn t(&self) -> View<'a> {
        View { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, with `c` row-major at row
/// stride `ldc`.
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64], ldc: usize) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "inner dimensions");
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.extent() <= a.data.len() && b.extent() <= b.data.len());
    assert!((m - 1) * ldc + n <= c.len());
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: extents of all three operands were checked against their slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
