//! Matrix kernels shared by `matmul` and `conv2d`.
//!
//! Convolution is lowered to a single GEMM over an im2col buffer laid out as
//! `[C*kh*kw, N*Ho*Wo]`.

/// `c = a * b + beta * c` for row/column-strided operands; `c` is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(stride_fits(a.len(), m, k, a_strides));
    debug_assert!(stride_fits(b.len(), k, n, b_strides));
    // SAFETY: the stride/extent pairs address only elements inside the
    // slices (checked above in debug builds, guaranteed by every caller).
    unsafe {
        matrixmultiply::dgemm(
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
            n as isize,
            1,
        );
    }
}

fn stride_fits(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) -> bool {
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    last >= 0 && (last as usize) < len
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let plane = g.ho * g.wo;
    let mut cols = vec![0.0; g.col_rows() * ncols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &input[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[oh * g.wo + ow] = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let plane = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut out[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[ih as usize * g.w + iw as usize] += src[oh * g.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Forward convolution: returns `(output [N,F,Ho,Wo], im2col buffer)`.
pub(crate) fn conv_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(input, g);
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut mat = vec![0.0; g.f * ncols];
    gemm(
        g.f,
        rows,
        ncols,
        kernel,
        (rows as isize, 1),
        &cols,
        (ncols as isize, 1),
        0.0,
        &mut mat,
    );
    let plane = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.f * plane];
    for f in 0..g.f {
        for n in 0..g.n {
            out[(n * g.f + f) * plane..(n * g.f + f + 1) * plane]
                .copy_from_slice(&mat[f * ncols + n * plane..f * ncols + (n + 1) * plane]);
        }
    }
    (out, cols)
}

/// Backward convolution: returns `(d input, d kernel)`.
pub(crate) fn conv_backward(
    grad_out: &[f64],
    kernel: &[f64],
    cols: &[f64],
    g: &ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let plane = g.ho * g.wo;
    let mut dmat = vec![0.0; g.f * ncols];
    for f in 0..g.f {
        for n in 0..g.n {
            dmat[f * ncols + n * plane..f * ncols + (n + 1) * plane]
                .copy_from_slice(&grad_out[(n * g.f + f) * plane..(n * g.f + f + 1) * plane]);
        }
    }
    let dkernel = need_kernel.then(|| {
        let mut dk = vec![0.0; g.f * rows];
        gemm(
            g.f,
            ncols,
            rows,
            &dmat,
            (ncols as isize, 1),
            cols,
            (1, ncols as isize),
            0.0,
            &mut dk,
        );
        dk
    });
    let dinput = need_input.then(|| {
        let mut dcols = vec![0.0; rows * ncols];
        gemm(
            rows,
            g.f,
            ncols,
            kernel,
            (1, rows as isize),
            &dmat,
            (ncols as isize, 1),
            0.0,
            &mut dcols,
        );
        col2im(&dcols, g)
    });
    (dinput, dkernel)
}
