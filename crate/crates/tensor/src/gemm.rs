//! Thin safe wrapper over `matrixmultiply` with explicit strides.

use crate::Real;

/// Strided view of a row-major or transposed matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [Real],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [Real], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix stored in `data`.
    pub fn transposed(data: &'a [Real], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn fits(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
        last < self.data.len()
    }
}

/// `c = beta * c + a * b` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [Real], beta: Real) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.fits() && b.fits(), "gemm operand out of bounds");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the bounds of both operands were checked above and `c` has
    // exactly `a.rows * b.cols` elements laid out row-major.
    unsafe {
        gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

#[cfg(not(feature = "f32"))]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    rsa: isize,
    csa: isize,
    b: *const Real,
    rsb: isize,
    csb: isize,
    beta: Real,
    c: *mut Real,
    rsc: isize,
    csc: isize,
) {
    matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

#[cfg(feature = "f32")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    rsa: isize,
    csa: isize,
    b: *const Real,
    rsb: isize,
    csb: isize,
    beta: Real,
    c: *mut Real,
    rsc: isize,
    csc: isize,
) {
    matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(MatRef::row_major(&a, 2, 2), MatRef::row_major(&b, 2, 2), &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(MatRef::transposed(&a, 2, 2), MatRef::row_major(&b, 2, 2), &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(MatRef::row_major(&a, 2, 2), MatRef::transposed(&b, 2, 2), &mut c, 1.0);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }
}
