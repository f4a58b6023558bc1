//! Raw buffer kernels shared by the forward and backward passes.

/// Strided row-major operand description for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> Operand<'a> {
    /// Row-major `rows×cols` matrix.
    pub fn plain(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `c = beta·c + a·b` with `a: m×k`, `b: k×n`, `c: m×n` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Operand, b: Operand, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the operand slices cover the strided extents by construction at
    // every call site; `c` is exactly m×n contiguous.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `input` (`c_in×h×w`) into a `patch_len × out_len` column matrix.
/// Pointwise convolutions borrow the input directly.
pub(crate) fn im2col<'a>(input: &'a [f64], g: &ConvGeom, buf: &'a mut Vec<f64>) -> &'a [f64] {
    if g.is_pointwise() {
        return input;
    }
    let cols = g.out_len();
    buf.clear();
    buf.resize(g.patch_len() * cols, 0.0);
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut buf[row * cols..(row + 1) * cols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src_row = &input[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[oi * g.out_w + oj] = src_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    buf
}

/// Adjoint of [`im2col`]: scatters-adds the column matrix back into `grad_input`.
pub(crate) fn col2im_add(cols_grad: &[f64], g: &ConvGeom, grad_input: &mut [f64]) {
    if g.is_pointwise() {
        grad_input.iter_mut().zip(cols_grad).for_each(|(a, b)| *a += b);
        return;
    }
    let cols = g.out_len();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut grad_input[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst_row[jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Source window `[start, end)` of output cell `i` for adaptive pooling.
pub(crate) fn pool_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = (i + 1) * input / output;
    (start, end)
}

/// Two-tap interpolation weights for bilinear resizing with half-pixel centers.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}
