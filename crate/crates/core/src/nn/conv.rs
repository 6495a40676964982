//! im2col convolution kernels (stride 1, square kernels, optional dilation).

use super::float::{gemm, Float};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding - self.dilation * (self.kernel - 1)
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding - self.dilation * (self.kernel - 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    /// Valid output-column range for kernel offset `off` (already dilated).
    #[inline]
    fn valid_range(&self, off: usize, extent_in: usize, extent_out: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(off);
        let hi = (extent_in + self.padding).saturating_sub(off).min(extent_out);
        (lo, hi.max(lo))
    }
}

fn im2col<T: Float>(input: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane_out = oh * ow;
    for ci in 0..g.cin {
        let src = &input[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            let offy = ky * g.dilation;
            let (y0, y1) = g.valid_range(offy, g.height, oh);
            for kx in 0..g.kernel {
                let offx = kx * g.dilation;
                let (x0, x1) = g.valid_range(offx, g.width, ow);
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if oy < y0 || oy >= y1 || x0 >= x1 {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let iy = oy + offy - g.padding;
                    line[..x0].iter_mut().for_each(|v| *v = T::zero());
                    line[x1..].iter_mut().for_each(|v| *v = T::zero());
                    let ix0 = x0 + offx - g.padding;
                    line[x0..x1].copy_from_slice(&src[iy * g.width + ix0..iy * g.width + ix0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, grad_in: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane_out = oh * ow;
    for ci in 0..g.cin {
        let dst = &mut grad_in[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            let offy = ky * g.dilation;
            let (y0, y1) = g.valid_range(offy, g.height, oh);
            for kx in 0..g.kernel {
                let offx = kx * g.dilation;
                let (x0, x1) = g.valid_range(offx, g.width, ow);
                if x0 >= x1 {
                    continue;
                }
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                for oy in y0..y1 {
                    let iy = oy + offy - g.padding;
                    let ix0 = x0 + offx - g.padding;
                    let d = &mut dst[iy * g.width + ix0..iy * g.width + ix0 + (x1 - x0)];
                    for (a, b) in d.iter_mut().zip(&src[oy * ow + x0..oy * ow + x1]) {
                        *a += *b;
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch; `input` is `(batch, cin, h, w)` flattened.
pub(crate) fn conv_forward<T: Float>(
    input: &[T],
    batch: usize,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let plane_out = g.out_height() * g.out_width();
    let in_len = g.cin * g.height * g.width;
    let mut out = vec![T::zero(); batch * g.cout * plane_out];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * plane_out]
    };
    for n in 0..batch {
        let x = &input[n * in_len..(n + 1) * in_len];
        let y = &mut out[n * g.cout * plane_out..(n + 1) * g.cout * plane_out];
        let rhs: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, g, &mut cols);
            &cols
        };
        if let Some(b) = bias {
            for (co, bv) in b.iter().enumerate() {
                y[co * plane_out..(co + 1) * plane_out]
                    .iter_mut()
                    .for_each(|v| *v = *bv);
            }
        }
        gemm(
            g.cout,
            g.col_rows(),
            plane_out,
            weight,
            false,
            rhs,
            false,
            y,
            bias.is_some(),
        );
    }
    out
}

/// Gradients of a convolution. Returns `(d_input, d_weight, d_bias)`; the input
/// gradient is skipped when `need_input` is false.
pub(crate) fn conv_backward<T: Float>(
    input: &[T],
    batch: usize,
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let plane_out = g.out_height() * g.out_width();
    let in_len = g.cin * g.height * g.width;
    let rows = g.col_rows();
    let mut d_weight = vec![T::zero(); g.cout * rows];
    let mut d_bias = vec![T::zero(); g.cout];
    let mut d_input = need_input.then(|| vec![T::zero(); batch * in_len]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane_out]
    };
    let mut d_cols = if need_input && !g.is_pointwise() {
        vec![T::zero(); rows * plane_out]
    } else {
        Vec::new()
    };
    for n in 0..batch {
        let x = &input[n * in_len..(n + 1) * in_len];
        let dy = &grad_out[n * g.cout * plane_out..(n + 1) * g.cout * plane_out];
        for (co, db) in d_bias.iter_mut().enumerate() {
            *db += dy[co * plane_out..(co + 1) * plane_out].iter().copied().sum::<T>();
        }
        let rhs: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, g, &mut cols);
            &cols
        };
        gemm(g.cout, plane_out, rows, dy, false, rhs, true, &mut d_weight, true);
        if let Some(dx_all) = d_input.as_mut() {
            let dx = &mut dx_all[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(rows, g.cout, plane_out, weight, true, dy, false, dx, false);
            } else {
                gemm(rows, g.cout, plane_out, weight, true, dy, false, &mut d_cols, false);
                col2im(&d_cols, g, dx);
            }
        }
    }
    (d_input, d_weight, d_bias)
}
