//! Numeric kernels: 3x3 and 1x1 convolutions (im2col + GEMM), 2x2 max
//! pooling, nearest-neighbor upsampling, ReLU, and their backward passes.
//!
//! Everything is generic over `f32`/`f64`; ndarray routes the GEMMs to
//! matrixmultiply for both. Single-threaded and deterministic.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView4, Axis, NdFloat};

/// Unfold a `(C, H, W)` map into `(C*9, H*W)` columns for a 3x3 kernel,
/// stride 1, zero padding 1.
pub fn im2col3<F: NdFloat>(x: &Array3<F>) -> Array2<F> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<F>::zeros((c * 9, h * w));
    let src = x.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ci * 9 + ky * 3 + kx;
                let row_base = row * h * w;
                // source pixel (y + ky - 1, x + kx - 1) must be in bounds
                let y0 = 1usize.saturating_sub(ky);
                let y1 = (h + 1 - ky).min(h);
                let x0 = 1usize.saturating_sub(kx);
                let x1 = (w + 1 - kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let d = row_base + y * w + x0;
                    let s = ci * h * w + sy * w + (x0 + kx - 1);
                    dst[d..d + (x1 - x0)].copy_from_slice(&src[s..s + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Fold `(C*9, H*W)` column gradients back onto a `(C, H, W)` map
/// (scatter-add inverse of [`im2col3`]).
pub fn col2im3<F: NdFloat>(dcols: &Array2<F>, c: usize, h: usize, w: usize) -> Array3<F> {
    let mut dx = Array3::<F>::zeros((c, h, w));
    let src = dcols.as_slice().expect("standard layout");
    let dst = dx.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ci * 9 + ky * 3 + kx;
                let row_base = row * h * w;
                let y0 = 1usize.saturating_sub(ky);
                let y1 = (h + 1 - ky).min(h);
                let x0 = 1usize.saturating_sub(kx);
                let x1 = (w + 1 - kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let s = row_base + y * w + x0;
                    let d = ci * h * w + sy * w + (x0 + kx - 1);
                    for i in 0..(x1 - x0) {
                        dst[d + i] = dst[d + i] + src[s + i];
                    }
                }
            }
        }
    }
    dx
}

/// Cached activations for one 3x3 convolution: the unfolded input columns
/// plus the post-ReLU output (doubling as the ReLU mask).
#[derive(Debug, Clone)]
pub struct ConvCache<F> {
    pub cols: Array2<F>,
    pub in_dim: (usize, usize, usize),
    /// Post-activation output (after ReLU when `relu` was requested).
    pub out: Array3<F>,
}

fn weights2<F: NdFloat>(w: ArrayView4<'_, F>) -> ArrayView2<'_, F> {
    let (o, c, kh, kw) = w.dim();
    w.into_shape_with_order((o, c * kh * kw))
        .expect("contiguous weights")
}

/// 3x3 convolution, stride 1, pad 1, optionally fused with ReLU.
pub fn conv3x3_forward<F: NdFloat>(
    w: ArrayView4<'_, F>,
    b: ArrayView1<'_, F>,
    x: &Array3<F>,
    relu: bool,
) -> ConvCache<F> {
    let (c, h, wd) = x.dim();
    let o = w.dim().0;
    debug_assert_eq!(w.dim().1, c, "conv input channels");
    let cols = im2col3(x);
    let mut y2 = weights2(w).dot(&cols);
    y2 += &b.insert_axis(Axis(1));
    if relu {
        y2.mapv_inplace(|v| v.max(F::zero()));
    }
    let out = y2
        .into_shape_with_order((o, h, wd))
        .expect("conv output reshape");
    ConvCache {
        cols,
        in_dim: (c, h, wd),
        out,
    }
}

/// Backward through conv(+ReLU). `dy` is the gradient at the cache's
/// output. Returns `(dx, dw, db)`.
pub fn conv3x3_backward<F: NdFloat>(
    w: ArrayView4<'_, F>,
    cache: &ConvCache<F>,
    dy: &Array3<F>,
    relu: bool,
) -> (Array3<F>, Array4<F>, Array1<F>) {
    let (o, h, wd) = cache.out.dim();
    debug_assert_eq!(dy.dim(), cache.out.dim());
    let mut dy2 = dy
        .view()
        .into_shape_with_order((o, h * wd))
        .expect("contiguous dy")
        .to_owned();
    if relu {
        let out2 = cache
            .out
            .view()
            .into_shape_with_order((o, h * wd))
            .expect("contiguous out");
        dy2.zip_mut_with(&out2, |g, &y| {
            if y <= F::zero() {
                *g = F::zero();
            }
        });
    }
    let db = dy2.sum_axis(Axis(1));
    let dw2 = dy2.dot(&cache.cols.t());
    let (c, _, _) = cache.in_dim;
    let dw = dw2
        .into_shape_with_order((o, c, 3, 3))
        .expect("dw reshape");
    let dcols = weights2(w).t().dot(&dy2);
    let dx = col2im3(&dcols, cache.in_dim.0, cache.in_dim.1, cache.in_dim.2);
    (dx, dw, db)
}

/// Like [`conv3x3_backward`] but skips the input gradient; used where the
/// conv input is raw data.
pub fn conv3x3_backward_params_only<F: NdFloat>(
    cache: &ConvCache<F>,
    dy: &Array3<F>,
    relu: bool,
) -> (Array4<F>, Array1<F>) {
    let (o, h, wd) = cache.out.dim();
    let mut dy2 = dy
        .view()
        .into_shape_with_order((o, h * wd))
        .expect("contiguous dy")
        .to_owned();
    if relu {
        let out2 = cache
            .out
            .view()
            .into_shape_with_order((o, h * wd))
            .expect("contiguous out");
        dy2.zip_mut_with(&out2, |g, &y| {
            if y <= F::zero() {
                *g = F::zero();
            }
        });
    }
    let db = dy2.sum_axis(Axis(1));
    let dw2 = dy2.dot(&cache.cols.t());
    let (c, _, _) = cache.in_dim;
    let dw = dw2
        .into_shape_with_order((o, c, 3, 3))
        .expect("dw reshape");
    (dw, db)
}

/// Cached input and output of a 1x1 (pointwise) convolution.
#[derive(Debug, Clone)]
pub struct PointwiseCache<F> {
    pub input: Array3<F>,
    pub out: Array3<F>,
}

/// 1x1 convolution: a channel-mixing GEMM, optionally fused with ReLU.
pub fn conv1x1_forward<F: NdFloat>(
    w: ArrayView2<'_, F>,
    b: ArrayView1<'_, F>,
    x: &Array3<F>,
    relu: bool,
) -> PointwiseCache<F> {
    let (c, h, wd) = x.dim();
    let o = w.dim().0;
    debug_assert_eq!(w.dim().1, c, "pointwise input channels");
    let x2 = x
        .view()
        .into_shape_with_order((c, h * wd))
        .expect("contiguous input");
    let mut y2 = w.dot(&x2);
    y2 += &b.insert_axis(Axis(1));
    if relu {
        y2.mapv_inplace(|v| v.max(F::zero()));
    }
    let out = y2
        .into_shape_with_order((o, h, wd))
        .expect("pointwise reshape");
    PointwiseCache {
        input: x.clone(),
        out,
    }
}

/// Backward through a 1x1 convolution. Returns `(dx, dw, db)`.
pub fn conv1x1_backward<F: NdFloat>(
    w: ArrayView2<'_, F>,
    cache: &PointwiseCache<F>,
    dy: &Array3<F>,
    relu: bool,
) -> (Array3<F>, Array2<F>, Array1<F>) {
    let (o, h, wd) = cache.out.dim();
    let (c, _, _) = cache.input.dim();
    let mut dy2 = dy
        .view()
        .into_shape_with_order((o, h * wd))
        .expect("contiguous dy")
        .to_owned();
    if relu {
        let out2 = cache
            .out
            .view()
            .into_shape_with_order((o, h * wd))
            .expect("contiguous out");
        dy2.zip_mut_with(&out2, |g, &y| {
            if y <= F::zero() {
                *g = F::zero();
            }
        });
    }
    let x2 = cache
        .input
        .view()
        .into_shape_with_order((c, h * wd))
        .expect("contiguous input");
    let db = dy2.sum_axis(Axis(1));
    let dw = dy2.dot(&x2.t());
    let dx2 = w.t().dot(&dy2);
    let dx = dx2
        .into_shape_with_order((c, h, wd))
        .expect("dx reshape");
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2; `argmax` stores the winning quadrant
/// (0..4) so the backward pass can route gradients. Ties resolve to the
/// first (row-major) maximum, keeping the pass deterministic.
pub fn maxpool2_forward<F: NdFloat>(x: &Array3<F>) -> (Array3<F>, Array3<u8>) {
    let (c, h, w) = x.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even sides");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<F>::zeros((c, oh, ow));
    let mut argmax = Array3::<u8>::zeros((c, oh, ow));
    let src = x.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    let arg = argmax.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for y in 0..oh {
            let top = &src[ci * h * w + 2 * y * w..];
            let bottom = &src[ci * h * w + (2 * y + 1) * w..];
            let base = ci * oh * ow + y * ow;
            for x_ in 0..ow {
                let quad = [
                    top[2 * x_],
                    top[2 * x_ + 1],
                    bottom[2 * x_],
                    bottom[2 * x_ + 1],
                ];
                let mut best = quad[0];
                let mut best_q = 0u8;
                for (q, &v) in quad.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        best_q = q as u8;
                    }
                }
                dst[base + x_] = best;
                arg[base + x_] = best_q;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward<F: NdFloat>(
    dy: &Array3<F>,
    argmax: &Array3<u8>,
    in_dim: (usize, usize, usize),
) -> Array3<F> {
    let (c, oh, ow) = dy.dim();
    let (_, h, w) = in_dim;
    let mut dx = Array3::<F>::zeros(in_dim);
    let src = dy.as_slice().expect("standard layout");
    let arg = argmax.as_slice().expect("standard layout");
    let dst = dx.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for y in 0..oh {
            let base = ci * oh * ow + y * ow;
            let row0 = ci * h * w + 2 * y * w;
            let row1 = ci * h * w + (2 * y + 1) * w;
            for x_ in 0..ow {
                let q = arg[base + x_] as usize;
                let at = if q < 2 {
                    row0 + 2 * x_ + q
                } else {
                    row1 + 2 * x_ + (q - 2)
                };
                dst[at] = src[base + x_];
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward<F: NdFloat>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<F>::zeros((c, 2 * h, 2 * w));
    let src = x.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for y in 0..h {
            let s = ci * h * w + y * w;
            for rep in 0..2 {
                let d = ci * 4 * h * w + (2 * y + rep) * 2 * w;
                for x_ in 0..w {
                    let v = src[s + x_];
                    dst[d + 2 * x_] = v;
                    dst[d + 2 * x_ + 1] = v;
                }
            }
        }
    }
    out
}

/// Backward of nearest-neighbor 2x upsampling: each input cell collects
/// the sum of its 2x2 replica.
pub fn upsample2_backward<F: NdFloat>(dy: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<F>::zeros((c, h, w));
    let src = dy.as_slice().expect("standard layout");
    let dst = dx.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for y in 0..h {
            let top = &src[ci * h2 * w2 + 2 * y * w2..];
            let bottom = &src[ci * h2 * w2 + (2 * y + 1) * w2..];
            let base = ci * h * w + y * w;
            for x_ in 0..w {
                dst[base + x_] = (top[2 * x_] + top[2 * x_ + 1])
                    + (bottom[2 * x_] + bottom[2 * x_ + 1]);
            }
        }
    }
    dx
}

/// Concatenate maps along the channel axis.
pub fn concat_channels<F: NdFloat>(parts: &[&Array3<F>]) -> Array3<F> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("matching spatial dims")
}

/// Split a channel-gradient back into per-part gradients.
pub fn split_channels<F: NdFloat>(d: &Array3<F>, sizes: &[usize]) -> Vec<Array3<F>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &len in sizes {
        out.push(
            d.slice(ndarray::s![start..start + len, .., ..])
                .to_owned(),
        );
        start += len;
    }
    debug_assert_eq!(start, d.dim().0);
    out
}
