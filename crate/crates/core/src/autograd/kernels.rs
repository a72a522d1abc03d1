//! Dense NCHW kernels used by the tape. Convolutions lower to im2col + GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};

use crate::scalar::Scalar;

/// Square-kernel convolution geometry with symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    /// Output length along one axis, `None` when the kernel does not fit.
    pub fn out_len(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output length of the transposed convolution with the given output padding.
    pub fn transposed_len(&self, n: usize, output_pad: usize) -> usize {
        (n - 1) * self.stride + self.kernel + output_pad - 2 * self.pad
    }
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize) -> Array2<T> {
    let k = g.kernel;
    let p = ho * wo;
    let mut cols = Array2::<T>::zeros((c * k * k, p));
    let buf = cols.as_slice_mut().expect("fresh array is contiguous");
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut buf[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        // contiguous run of valid columns
                        let lo = g.pad.saturating_sub(kx);
                        let hi = (w + g.pad).saturating_sub(kx).min(wo);
                        if lo < hi {
                            let start = lo + kx - g.pad;
                            drow[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, out: &mut [T]) {
    let k = g.kernel;
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    // valid output columns: 0 <= ox*stride + kx - pad < w
                    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
                    let hi = ((w + g.pad).saturating_sub(kx).div_ceil(g.stride)).min(wo);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in drow[start..start + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in srow[lo..hi].iter().enumerate() {
                            let ix = start + j * g.stride;
                            drow[ix] = drow[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

fn sample<T: Scalar>(x: &ArrayView4<'_, T>, n: usize) -> Vec<T> {
    x.index_axis(Axis(0), n).iter().copied().collect()
}

/// `w`: `[co, ci, k, k]`, `b`: `[co]`.
pub fn conv2d<T: Scalar>(x: ArrayView4<'_, T>, w: ArrayView4<'_, T>, b: Option<&[T]>, g: ConvGeom) -> Array4<T> {
    let (n, c, h, wd) = x.dim();
    let co = w.dim().0;
    let ho = g.out_len(h).expect("conv kernel larger than padded input");
    let wo = g.out_len(wd).expect("conv kernel larger than padded input");
    let wm = weight_matrix(&w, co);
    let mut out = Array4::<T>::zeros((n, co, ho, wo));
    for i in 0..n {
        let xs = sample(&x, i);
        let cols = im2col(&xs, c, h, wd, g, ho, wo);
        let mut o = out.index_axis_mut(Axis(0), i).into_shape_with_order((co, ho * wo)).expect("contiguous");
        general_mat_mul(T::one(), &wm, &cols, T::zero(), &mut o);
        if let Some(b) = b {
            for (mut row, &bv) in o.outer_iter_mut().zip(b) {
                row.mapv_inplace(|v| v + bv);
            }
        }
    }
    out
}

fn weight_matrix<'a, T: Scalar>(w: &'a ArrayView4<'_, T>, rows: usize) -> ArrayView2<'a, T> {
    let d = w.dim();
    w.view().into_shape_with_order((rows, d.1 * d.2 * d.3)).expect("weights are contiguous")
}

pub struct ConvGrads<T> {
    pub dx: Option<Array4<T>>,
    pub dw: Option<Array4<T>>,
    pub db: Option<Array1<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: ArrayView4<'_, T>,
    w: ArrayView4<'_, T>,
    dy: ArrayView4<'_, T>,
    g: ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (n, c, h, wd) = x.dim();
    let (co, _, k, _) = w.dim();
    let (_, _, ho, wo) = dy.dim();
    let wm = weight_matrix(&w, co);
    let mut dx = need.0.then(|| Array4::<T>::zeros((n, c, h, wd)));
    let mut dwm = need.1.then(|| Array2::<T>::zeros((co, c * k * k)));
    for i in 0..n {
        let dys = dy.index_axis(Axis(0), i);
        let dys = dys.as_standard_layout();
        let dyv = dys.view().into_shape_with_order((co, ho * wo)).expect("contiguous");
        if let Some(dwm) = dwm.as_mut() {
            let xs = sample(&x, i);
            let cols = im2col(&xs, c, h, wd, g, ho, wo);
            general_mat_mul(T::one(), &dyv, &cols.t(), T::one(), dwm);
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcols = Array2::<T>::zeros((c * k * k, ho * wo));
            general_mat_mul(T::one(), &wm.t(), &dyv, T::zero(), &mut dcols);
            let mut dxs = dx.index_axis_mut(Axis(0), i);
            col2im(
                dcols.as_slice().expect("contiguous"),
                c,
                h,
                wd,
                g,
                ho,
                wo,
                dxs.as_slice_mut().expect("contiguous"),
            );
        }
    }
    let db = need.2.then(|| dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)));
    ConvGrads {
        dx,
        dw: dwm.map(|m| m.into_shape_with_order((co, c, k, k)).expect("contiguous")),
        db,
    }
}

/// Transposed convolution. `w`: `[ci, co, k, k]`; `g` describes the forward
/// convolution this layer is the adjoint of.
pub fn conv_transpose2d<T: Scalar>(
    x: ArrayView4<'_, T>,
    w: ArrayView4<'_, T>,
    b: Option<&[T]>,
    g: ConvGeom,
    output_pad: usize,
) -> Array4<T> {
    let (n, ci, h, wd) = x.dim();
    let (_, co, k, _) = w.dim();
    let ho = g.transposed_len(h, output_pad);
    let wo = g.transposed_len(wd, output_pad);
    let wm = weight_matrix(&w, ci);
    let mut out = Array4::<T>::zeros((n, co, ho, wo));
    for i in 0..n {
        let xs = x.index_axis(Axis(0), i);
        let xs = xs.as_standard_layout();
        let xv = xs.view().into_shape_with_order((ci, h * wd)).expect("contiguous");
        let mut cols = Array2::<T>::zeros((co * k * k, h * wd));
        general_mat_mul(T::one(), &wm.t(), &xv, T::zero(), &mut cols);
        let mut o = out.index_axis_mut(Axis(0), i);
        col2im(cols.as_slice().expect("contiguous"), co, ho, wo, g, h, wd, o.as_slice_mut().expect("contiguous"));
        if let Some(b) = b {
            for (mut plane, &bv) in o.outer_iter_mut().zip(b) {
                plane.mapv_inplace(|v| v + bv);
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: ArrayView4<'_, T>,
    w: ArrayView4<'_, T>,
    dy: ArrayView4<'_, T>,
    g: ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (n, ci, h, wd) = x.dim();
    let (_, co, k, _) = w.dim();
    let (_, _, ho, wo) = dy.dim();
    let wm = weight_matrix(&w, ci);
    let mut dx = need.0.then(|| Array4::<T>::zeros((n, ci, h, wd)));
    let mut dwm = need.1.then(|| Array2::<T>::zeros((ci, co * k * k)));
    for i in 0..n {
        let dys = sample(&dy, i);
        let cols = im2col(&dys, co, ho, wo, g, h, wd);
        if let Some(dx) = dx.as_mut() {
            let mut dxs = dx.index_axis_mut(Axis(0), i).into_shape_with_order((ci, h * wd)).expect("contiguous");
            general_mat_mul(T::one(), &wm, &cols, T::zero(), &mut dxs);
        }
        if let Some(dwm) = dwm.as_mut() {
            let xs = x.index_axis(Axis(0), i);
            let xs = xs.as_standard_layout();
            let xv = xs.view().into_shape_with_order((ci, h * wd)).expect("contiguous");
            general_mat_mul(T::one(), &xv, &cols.t(), T::one(), dwm);
        }
    }
    let db = need.2.then(|| dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)));
    ConvGrads {
        dx,
        dw: dwm.map(|m| m.into_shape_with_order((ci, co, k, k)).expect("contiguous")),
        db,
    }
}

/// Mirror an out-of-range index back into `0..n` (reflection without edge repeat).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

pub fn reflect_pad<T: Scalar>(x: ArrayView4<'_, T>, pad: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let rows: Vec<usize> = (0..hp).map(|y| reflect_index(y as isize - pad as isize, h)).collect();
    let colsi: Vec<usize> = (0..wp).map(|x| reflect_index(x as isize - pad as isize, w)).collect();
    let mut out = Array4::<T>::zeros((n, c, hp, wp));
    for i in 0..n {
        for j in 0..c {
            let src = x.slice(s![i, j, .., ..]);
            let mut plane = out.slice_mut(s![i, j, .., ..]);
            for (y, &ry) in rows.iter().enumerate() {
                for (xx, &rx) in colsi.iter().enumerate() {
                    plane[[y, xx]] = src[[ry, rx]];
                }
            }
        }
    }
    out
}

pub fn reflect_pad_backward<T: Scalar>(dy: ArrayView4<'_, T>, pad: usize, h: usize, w: usize) -> Array4<T> {
    let (n, c, hp, wp) = dy.dim();
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    for i in 0..n {
        for j in 0..c {
            for y in 0..hp {
                let ry = reflect_index(y as isize - pad as isize, h);
                for xx in 0..wp {
                    let rx = reflect_index(xx as isize - pad as isize, w);
                    dx[[i, j, ry, rx]] = dx[[i, j, ry, rx]] + dy[[i, j, y, xx]];
                }
            }
        }
    }
    dx
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-sample, per-plane standardization. Returns output and `1/sqrt(var+eps)` per `(n, c)`.
pub fn instance_norm<T: Scalar>(x: ArrayView4<'_, T>) -> (Array4<T>, Vec<T>) {
    let (n, c, h, w) = x.dim();
    let count = T::of_usize(h * w);
    let eps = T::of(INSTANCE_NORM_EPS);
    let mut out = Array4::<T>::zeros((n, c, h, w));
    let mut inv = Vec::with_capacity(n * c);
    for i in 0..n {
        for j in 0..c {
            let plane = x.slice(s![i, j, .., ..]);
            let mean = plane.sum() / count;
            let var = plane.fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / count;
            let is = T::one() / (var + eps).sqrt();
            inv.push(is);
            out.slice_mut(s![i, j, .., ..]).zip_mut_with(&plane, |o, &v| *o = (v - mean) * is);
        }
    }
    (out, inv)
}

pub fn instance_norm_backward<T: Scalar>(y: ArrayView4<'_, T>, inv: &[T], dy: ArrayView4<'_, T>) -> Array4<T> {
    let (n, c, h, w) = y.dim();
    let count = T::of_usize(h * w);
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    for i in 0..n {
        for j in 0..c {
            let yp = y.slice(s![i, j, .., ..]);
            let dyp = dy.slice(s![i, j, .., ..]);
            let mean_dy = dyp.sum() / count;
            let mean_dyy = ndarray::Zip::from(&yp).and(&dyp).fold(T::zero(), |a, &yv, &g| a + yv * g) / count;
            let is = inv[i * c + j];
            ndarray::Zip::from(dx.slice_mut(s![i, j, .., ..]))
                .and(&yp)
                .and(&dyp)
                .for_each(|d, &yv, &g| *d = is * (g - mean_dy - yv * mean_dyy));
        }
    }
    dx
}

/// 2x2 mean pooling with stride 2. Input dims must be even.
pub fn avg_pool2<T: Scalar>(x: ArrayView4<'_, T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let quarter = T::of(0.25);
    Array4::from_shape_fn((n, c, h / 2, w / 2), |(i, j, y, xx)| {
        (x[[i, j, 2 * y, 2 * xx]] + x[[i, j, 2 * y, 2 * xx + 1]] + x[[i, j, 2 * y + 1, 2 * xx]] + x[[i, j, 2 * y + 1, 2 * xx + 1]])
            * quarter
    })
}

pub fn avg_pool2_backward<T: Scalar>(dy: ArrayView4<'_, T>) -> Array4<T> {
    let (n, c, h, w) = dy.dim();
    let quarter = T::of(0.25);
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(i, j, y, x)| dy[[i, j, y / 2, x / 2]] * quarter)
}
