//! Array primitives behind the layers: im2col convolution, bilinear
//! resampling, and adaptive average pooling, with matching backward passes.

use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};

use crate::T4;

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one sample `(c, h, w)` into a `(c*kh*kw, oh*ow)` column matrix.
pub fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut col = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut col_row = col.row_mut(row);
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        col_row[oi * ow + oj] = x[(ci, ih as usize, iw as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Fold a `(c*kh*kw, oh*ow)` column-gradient matrix back onto the input grid.
pub fn col2im(
    col: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let col_row = col.row(row);
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        x[(ci, ih as usize, iw as usize)] += col_row[oi * ow + oj];
                    }
                }
            }
        }
    }
    x
}

/// Batched convolution forward. `w2` is the kernel reshaped to
/// `(out_channels, in_channels*kh*kw)`.
pub fn conv_forward(
    x: &T4,
    w2: &Array2<f64>,
    bias: &Array1<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> T4 {
    let (b, _c, h, w) = x.dim();
    let oc = w2.nrows();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut y = Array4::<f64>::zeros((b, oc, oh, ow));
    y.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut yb, xb)| {
            let col = im2col(&xb, kh, kw, stride, pad);
            let out = w2.dot(&col); // (oc, oh*ow)
            for o in 0..oc {
                let bo = bias[o];
                let src = out.row(o);
                let mut dst = yb.index_axis_mut(Axis(0), o);
                let mut k = 0;
                for i in 0..oh {
                    for j in 0..ow {
                        dst[(i, j)] = src[k] + bo;
                        k += 1;
                    }
                }
            }
        });
    y
}

/// Batched convolution backward: returns `dx` and accumulates
/// `(dw2, dbias)` sums over the batch.
pub fn conv_backward(
    x: &T4,
    w2: &Array2<f64>,
    dy: &T4,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (T4, Array2<f64>, Array1<f64>) {
    let (b, c, h, w) = x.dim();
    let (_, oc, oh, ow) = dy.dim();
    let mut dx = Array4::<f64>::zeros((b, c, h, w));

    // dx: independent per sample.
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(dy.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut dxb, dyb)| {
            let dyb2 = dyb.to_shape((oc, oh * ow)).unwrap();
            let dcol = w2.t().dot(&dyb2); // (c*kh*kw, oh*ow)
            let folded = col2im(&dcol, c, h, w, kh, kw, stride, pad);
            dxb.assign(&folded);
        });

    // dw/db: reduce over the batch.
    let (dw2, db) = (0..b)
        .into_par_iter()
        .map(|bi| {
            let col = im2col(&x.index_axis(Axis(0), bi), kh, kw, stride, pad);
            let dyb = dy.index_axis(Axis(0), bi);
            let dyb2 = dyb.to_shape((oc, oh * ow)).unwrap();
            let dw = dyb2.dot(&col.t());
            let db = dyb2.sum_axis(Axis(1));
            (dw, db)
        })
        .reduce(
            || (Array2::zeros((oc, c * kh * kw)), Array1::zeros(oc)),
            |(mut aw, mut ab), (dw, db)| {
                aw += &dw;
                ab += &db;
                (aw, ab)
            },
        );
    (dx, dw2, db)
}

fn resize_coords(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    // align_corners=false sampling, clamped to the input extent
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling to `(oh, ow)`. Identity when the size is unchanged.
pub fn bilinear_resize(x: &T4, oh: usize, ow: usize) -> T4 {
    let (b, c, h, w) = x.dim();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let ys = resize_coords(oh, h);
    let xs = resize_coords(ow, w);
    let mut y = Array4::<f64>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            let src = x.slice(s![bi, ci, .., ..]);
            let mut dst = y.slice_mut(s![bi, ci, .., ..]);
            for (oi, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (oj, &(x0, x1, fx)) in xs.iter().enumerate() {
                    dst[(oi, oj)] = (1.0 - fy) * (1.0 - fx) * src[(y0, x0)]
                        + (1.0 - fy) * fx * src[(y0, x1)]
                        + fy * (1.0 - fx) * src[(y1, x0)]
                        + fy * fx * src[(y1, x1)];
                }
            }
        }
    }
    y
}

/// Adjoint of [`bilinear_resize`]: scatter output gradients back to `(ih, iw)`.
pub fn bilinear_resize_backward(dy: &T4, ih: usize, iw: usize) -> T4 {
    let (b, c, oh, ow) = dy.dim();
    if (oh, ow) == (ih, iw) {
        return dy.clone();
    }
    let ys = resize_coords(oh, ih);
    let xs = resize_coords(ow, iw);
    let mut dx = Array4::<f64>::zeros((b, c, ih, iw));
    for bi in 0..b {
        for ci in 0..c {
            let src = dy.slice(s![bi, ci, .., ..]);
            let mut dst = dx.slice_mut(s![bi, ci, .., ..]);
            for (oi, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (oj, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let g = src[(oi, oj)];
                    dst[(y0, x0)] += (1.0 - fy) * (1.0 - fx) * g;
                    dst[(y0, x1)] += (1.0 - fy) * fx * g;
                    dst[(y1, x0)] += fy * (1.0 - fx) * g;
                    dst[(y1, x1)] += fy * fx * g;
                }
            }
        }
    }
    dx
}

fn pool_segment(i: usize, in_len: usize, k: usize) -> (usize, usize) {
    let start = i * in_len / k;
    let end = ((i + 1) * in_len).div_ceil(k);
    (start, end)
}

/// Average pooling onto a fixed `k x k` grid (PyTorch adaptive segments).
pub fn adaptive_avg_pool(x: &T4, k: usize) -> T4 {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((b, c, k, k));
    for bi in 0..b {
        for ci in 0..c {
            let src = x.slice(s![bi, ci, .., ..]);
            for i in 0..k {
                let (r0, r1) = pool_segment(i, h, k);
                for j in 0..k {
                    let (c0, c1) = pool_segment(j, w, k);
                    let m = src.slice(s![r0..r1, c0..c1]).mean().unwrap();
                    y[(bi, ci, i, j)] = m;
                }
            }
        }
    }
    y
}

/// Adjoint of [`adaptive_avg_pool`].
pub fn adaptive_avg_pool_backward(dy: &T4, h: usize, w: usize) -> T4 {
    let (b, c, k, _) = dy.dim();
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let mut dst = dx.slice_mut(s![bi, ci, .., ..]);
            for i in 0..k {
                let (r0, r1) = pool_segment(i, h, k);
                for j in 0..k {
                    let (c0, c1) = pool_segment(j, w, k);
                    let area = ((r1 - r0) * (c1 - c0)) as f64;
                    let g = dy[(bi, ci, i, j)] / area;
                    dst.slice_mut(s![r0..r1, c0..c1]).map_inplace(|v| *v += g);
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn conv_shapes() {
        assert_eq!(conv_out_len(32, 2, 1, 0), 31);
        assert_eq!(conv_out_len(32, 4, 1, 0), 29);
        assert_eq!(conv_out_len(32, 4, 2, 1), 16);
        assert_eq!(conv_out_len(8, 3, 1, 1), 8);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let x = Array4::from_shape_fn((1, 2, 5, 7), |(_, c, i, j)| {
            (c * 100 + i * 10 + j) as f64 * 0.17 - 1.0
        });
        let y = bilinear_resize(&x, 5, 7);
        assert_eq!(x, y);
    }

    #[test]
    fn resize_constant_preserved() {
        let x = Array4::from_elem((2, 1, 4, 4), 0.37);
        let y = bilinear_resize(&x, 9, 5);
        for v in y.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_global() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let y = adaptive_avg_pool(&x, 1);
        assert!((y[(0, 0, 0, 0)] - 7.5).abs() < 1e-12);
    }
}
