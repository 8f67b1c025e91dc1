//! Dense layer primitives on `(channels, H·W)` feature maps.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::Real;

/// `(C·9, H·W)` patch matrix for a 3×3 same-padded convolution.
pub(crate) fn im2col<T: Real>(x: ArrayView2<T>, h: usize, w: usize) -> Array2<T> {
    let cin = x.nrows();
    let mut cols = Array2::<T>::zeros((cin * 9, h * w));
    for ci in 0..cin {
        let src = x.row(ci);
        let src = src.as_slice().expect("contiguous feature row");
        for ky in 0..3 {
            for kx in 0..3 {
                let mut row = cols.row_mut(ci * 9 + ky * 3 + kx);
                let dst = row.as_slice_mut().expect("contiguous col row");
                let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im<T: Real>(cols: ArrayView2<T>, cin: usize, h: usize, w: usize) -> Array2<T> {
    let mut x = Array2::<T>::zeros((cin, h * w));
    for ci in 0..cin {
        let mut xrow = x.row_mut(ci);
        let dst = xrow.as_slice_mut().expect("contiguous feature row");
        for ky in 0..3 {
            for kx in 0..3 {
                let row = cols.row(ci * 9 + ky * 3 + kx);
                let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    for (i, xx) in (x0..x1).enumerate() {
                        dst[sy * w + sx0 + i] = dst[sy * w + sx0 + i] + row[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn add_bias<T: Real>(out: &mut Array2<T>, bias: &[T]) {
    for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(bias) {
        row.mapv_inplace(|v| v + b);
    }
}

pub(crate) fn relu<T: Real>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_backward<T: Real>(pre: &Array2<T>, grad: &mut Array2<T>) {
    ndarray::Zip::from(grad).and(pre).for_each(|g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
}

/// 2×2 average pooling; odd trailing rows/columns are dropped.
pub(crate) fn avg_pool<T: Real>(x: ArrayView2<T>, h: usize, w: usize) -> Array2<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Array2::<T>::zeros((x.nrows(), oh * ow));
    for (src, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for y in 0..oh {
            for xx in 0..ow {
                let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
                let v = src[r0 + 2 * xx] + src[r0 + 2 * xx + 1] + src[r1 + 2 * xx] + src[r1 + 2 * xx + 1];
                dst[y * ow + xx] = v * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(g: ArrayView2<T>, h: usize, w: usize) -> Array2<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Array2::<T>::zeros((g.nrows(), h * w));
    for (src, mut dst) in g.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for y in 0..oh {
            for xx in 0..ow {
                let v = src[y * ow + xx] * quarter;
                let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
                dst[r0 + 2 * xx] = v;
                dst[r0 + 2 * xx + 1] = v;
                dst[r1 + 2 * xx] = v;
                dst[r1 + 2 * xx + 1] = v;
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling from `(h, w)` to `(oh, ow)`.
pub(crate) fn upsample<T: Real>(x: ArrayView2<T>, h: usize, w: usize, oh: usize, ow: usize) -> Array2<T> {
    let mut out = Array2::<T>::zeros((x.nrows(), oh * ow));
    for (src, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for y in 0..oh {
            let sy = (y / 2).min(h - 1);
            for xx in 0..ow {
                dst[y * ow + xx] = src[sy * w + (xx / 2).min(w - 1)];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Real>(g: ArrayView2<T>, h: usize, w: usize, oh: usize, ow: usize) -> Array2<T> {
    let mut out = Array2::<T>::zeros((g.nrows(), h * w));
    for (src, mut dst) in g.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for y in 0..oh {
            let sy = (y / 2).min(h - 1);
            for xx in 0..ow {
                let i = sy * w + (xx / 2).min(w - 1);
                dst[i] = dst[i] + src[y * ow + xx];
            }
        }
    }
    out
}

pub(crate) fn concat_rows<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    ndarray::concatenate(Axis(0), &[a, b]).expect("matching pixel counts")
}

pub(crate) fn split_rows<T: Real>(g: &Array2<T>, first: usize) -> (Array2<T>, Array2<T>) {
    (g.slice(s![..first, ..]).to_owned(), g.slice(s![first.., ..]).to_owned())
}

/// Per-column `z = h / (‖h‖ + eps)`; returns `(z, norms)`.
pub(crate) fn l2_normalize<T: Real>(h: &Array2<T>, eps: T) -> (Array2<T>, Vec<T>) {
    let mut z = h.clone();
    let mut norms = Vec::with_capacity(h.ncols());
    for mut col in z.axis_iter_mut(Axis(1)) {
        let n = col.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
        let d = n + eps;
        col.mapv_inplace(|v| v / d);
        norms.push(n);
    }
    (z, norms)
}

/// Backward of [`l2_normalize`]: `dh = dz/(n+ε) − h (hᵀdz) / (n (n+ε)²)`.
pub(crate) fn l2_normalize_backward<T: Real>(h: &Array2<T>, norms: &[T], dz: &Array2<T>, eps: T) -> Array2<T> {
    let mut dh = Array2::<T>::zeros(h.raw_dim());
    for (j, &n) in norms.iter().enumerate() {
        let d = n + eps;
        let hc = h.column(j);
        let gc = dz.column(j);
        let dot = hc.dot(&gc);
        let coef = if n > T::zero() { dot / (n * d * d) } else { T::zero() };
        let mut out = dh.column_mut(j);
        for i in 0..hc.len() {
            out[i] = gc[i] / d - hc[i] * coef;
        }
    }
    dh
}
