//! Convolution kernels: im2col/col2im plus GEMM, shared by the forward and
//! backward passes of `conv2d` and `transposed_conv2d_s2`.
//!
//! One geometry covers both ops. A "geometry" maps a large spatial side
//! `(ci, h, w)` to a small side `(co, ho, wo)` through a `kh x kw` kernel
//! with stride and padding. Convolution runs the geometry forward;
//! transposed convolution runs the same geometry backwards (its forward is
//! the convolution's data gradient), which is what makes a 4x4 kernel with
//! stride 2 and padding 1 an exact 2x upsampler.

use super::Shape4;
use crate::scalar::Scalar;

/// Spatial bookkeeping for one convolution: `large` is the high-resolution
/// side, `small` the low-resolution side.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub ci: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(
        ci: usize,
        co: usize,
        kh: usize,
        kw: usize,
        h: usize,
        w: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        ConvGeom {
            ci,
            co,
            kh,
            kw,
            h,
            w,
            ho,
            wo,
            stride,
            pad,
        }
    }

    /// Rows of the column matrix: one per (input channel, kernel cell).
    pub fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    pub fn cells(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image `(ci, h, w)` into the column matrix `k x (ho*wo)`.
/// Out-of-bounds taps are zero.
fn im2col<F: Scalar>(g: &ConvGeom, x: &[F], col: &mut [F]) {
    debug_assert_eq!(x.len(), g.ci * g.h * g.w);
    debug_assert_eq!(col.len(), g.k() * g.cells());
    let cells = g.cells();
    for ci in 0..g.ci {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = ((ci * g.kh + u) * g.kw + v) * cells;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + u) as isize - g.pad as isize;
                    let out = &mut col[row + oh * g.wo..row + (oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out.iter_mut().for_each(|o| *o = F::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = (ow * g.stride + v) as isize - g.pad as isize;
                        *o = if iw < 0 || iw >= g.w as isize {
                            F::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto an image, accumulating overlapping taps.
fn col2im_acc<F: Scalar>(g: &ConvGeom, col: &[F], x: &mut [F]) {
    debug_assert_eq!(x.len(), g.ci * g.h * g.w);
    let cells = g.cells();
    for ci in 0..g.ci {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = ((ci * g.kh + u) * g.kw + v) * cells;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + u) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let src = &col[row + oh * g.wo..row + (oh + 1) * g.wo];
                    for (ow, s) in src.iter().enumerate() {
                        let iw = (ow * g.stride + v) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward for a batch: `y[b] = W x[b] + bias`.
///
/// `x` is `(n, ci, h, w)`, `weight` is `(co x k)` row-major (i.e. the
/// `(co, ci, kh, kw)` kernel flattened), output is `(n, co, ho, wo)`.
pub fn conv_forward<F: Scalar>(
    g: &ConvGeom,
    xs: Shape4,
    x: &[F],
    weight: &[F],
    bias: &[F],
    y: &mut [F],
) {
    let cells = g.cells();
    let mut col = vec![F::zero(); g.k() * cells];
    let in_len = g.ci * g.h * g.w;
    let out_len = g.co * cells;
    for b in 0..xs.n {
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut col);
        let yb = &mut y[b * out_len..(b + 1) * out_len];
        F::gemm(
            g.co,
            g.k(),
            cells,
            F::one(),
            weight,
            g.k() as isize,
            1,
            &col,
            cells as isize,
            1,
            F::zero(),
            yb,
        );
        for co in 0..g.co {
            let bv = bias[co];
            for cell in &mut yb[co * cells..(co + 1) * cells] {
                *cell += bv;
            }
        }
    }
}

/// Data gradient: scatters `Wᵀ dy` back onto the large side. Accumulates
/// into `dx`. Also the forward pass of the transposed convolution.
pub fn conv_backward_data<F: Scalar>(g: &ConvGeom, n: usize, dy: &[F], weight: &[F], dx: &mut [F]) {
    let cells = g.cells();
    let mut col = vec![F::zero(); g.k() * cells];
    let in_len = g.ci * g.h * g.w;
    let out_len = g.co * cells;
    for b in 0..n {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        // col = Wᵀ (k x co) * dy (co x cells)
        F::gemm(
            g.k(),
            g.co,
            cells,
            F::one(),
            weight,
            1,
            g.k() as isize,
            dyb,
            cells as isize,
            1,
            F::zero(),
            &mut col,
        );
        col2im_acc(g, &col, &mut dx[b * in_len..(b + 1) * in_len]);
    }
}

/// Filter gradient: `dW += sum_b dy[b] * im2col(x[b])ᵀ`, plus the bias
/// gradient `db[c] += sum dy[:, c, :, :]`.
pub fn conv_backward_filter<F: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[F],
    dy: &[F],
    dweight: &mut [F],
    dbias: &mut [F],
) {
    let cells = g.cells();
    let mut col = vec![F::zero(); g.k() * cells];
    let in_len = g.ci * g.h * g.w;
    let out_len = g.co * cells;
    for b in 0..n {
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut col);
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        // dW (co x k) += dy (co x cells) * colᵀ (cells x k)
        F::gemm(
            g.co,
            cells,
            g.k(),
            F::one(),
            dyb,
            cells as isize,
            1,
            &col,
            1,
            cells as isize,
            F::one(),
            dweight,
        );
        for co in 0..g.co {
            let mut s = F::zero();
            for v in &dyb[co * cells..(co + 1) * cells] {
                s += *v;
            }
            dbias[co] += s;
        }
    }
}

/// Transposed convolution forward (stride 2, 4x4 kernel, padding 1): exact
/// 2x spatial upsampling. `x` is `(n, ci, h, w)`, `weight` is the deconv
/// kernel `(ci, co, 4, 4)` flattened row-major, output `(n, co, 2h, 2w)`.
///
/// The deconv geometry is the conv geometry whose large side is the deconv
/// *output*; the deconv input channel count plays the conv output role.
pub fn deconv_geom(ci: usize, co: usize, h: usize, w: usize) -> ConvGeom {
    // large side: (co, 2h, 2w); small side: (ci, h, w)
    ConvGeom::new(co, ci, 4, 4, 2 * h, 2 * w, 2, 1)
}

pub fn deconv_forward<F: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[F],
    weight: &[F],
    bias: &[F],
    y: &mut [F],
) {
    // y (large side) = conv_backward_data(x as dy, W); y must start zeroed.
    debug_assert!(y.iter().all(|v| *v == F::zero()));
    conv_backward_data(g, n, x, weight, y);
    let plane = g.h * g.w;
    for b in 0..n {
        for c in 0..g.ci {
            let bv = bias[c];
            let base = (b * g.ci + c) * plane;
            for cell in &mut y[base..base + plane] {
                *cell += bv;
            }
        }
    }
}

pub fn deconv_backward_data<F: Scalar>(
    g: &ConvGeom,
    n: usize,
    dy: &[F],
    weight: &[F],
    dx: &mut [F],
) {
    // dx (small side) accumulates conv_forward(dy, W) without bias.
    let cells = g.cells();
    let mut col = vec![F::zero(); g.k() * cells];
    let mut tmp = vec![F::zero(); g.co * cells];
    let large_len = g.ci * g.h * g.w;
    let small_len = g.co * cells;
    for b in 0..n {
        im2col(g, &dy[b * large_len..(b + 1) * large_len], &mut col);
        F::gemm(
            g.co,
            g.k(),
            cells,
            F::one(),
            weight,
            g.k() as isize,
            1,
            &col,
            cells as isize,
            1,
            F::zero(),
            &mut tmp,
        );
        for (d, t) in dx[b * small_len..(b + 1) * small_len]
            .iter_mut()
            .zip(&tmp)
        {
            *d += *t;
        }
    }
}

pub fn deconv_backward_filter<F: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[F],
    dy: &[F],
    dweight: &mut [F],
    dbias: &mut [F],
) {
    // Roles swap: the upstream grad sits on the conv-input (large) side and
    // the deconv input on the conv-output (small) side.
    let cells = g.cells();
    let mut col = vec![F::zero(); g.k() * cells];
    let large_len = g.ci * g.h * g.w;
    let small_len = g.co * cells;
    for b in 0..n {
        im2col(g, &dy[b * large_len..(b + 1) * large_len], &mut col);
        let xb = &x[b * small_len..(b + 1) * small_len];
        F::gemm(
            g.co,
            cells,
            g.k(),
            F::one(),
            xb,
            cells as isize,
            1,
            &col,
            1,
            cells as isize,
            F::one(),
            dweight,
        );
    }
    let plane = g.h * g.w;
    for b in 0..n {
        for c in 0..g.ci {
            let base = (b * g.ci + c) * plane;
            let mut s = F::zero();
            for v in &dy[base..base + plane] {
                s += *v;
            }
            dbias[c] += s;
        }
    }
}
