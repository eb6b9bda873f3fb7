//! Convolution kernels lowered to GEMM through im2col / col2im.
//!
//! Examples are processed in fixed-size groups whose columns sit side by side
//! in one GEMM. Group boundaries depend only on the shapes, and weight
//! gradients are summed in group order, so parallel and sequential runs agree
//! bit for bit.

use super::gemm::{gemm, MatRef};
use super::Float;
use crate::error::{Error, Result};
use crate::par;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub fn conv_output_len(input: usize, g: ConvGeom) -> Result<usize> {
    if g.kernel == 0 || g.stride == 0 {
        return Err(Error::shape("kernel and stride must be at least 1"));
    }
    let padded = input + 2 * g.padding;
    if padded < g.kernel {
        return Err(Error::shape(format!(
            "padded extent {padded} smaller than kernel {}",
            g.kernel
        )));
    }
    Ok((padded - g.kernel) / g.stride + 1)
}

pub fn conv_transpose_output_len(input: usize, g: ConvGeom) -> Result<usize> {
    if g.kernel == 0 || g.stride == 0 || input == 0 {
        return Err(Error::shape("kernel, stride and input extent must be at least 1"));
    }
    let full = (input - 1) * g.stride + g.kernel;
    if full < 2 * g.padding + 1 {
        return Err(Error::shape("padding removes the whole transposed-conv output"));
    }
    Ok(full - 2 * g.padding)
}

/// Spatial layout shared by im2col and col2im: an image of `channels × h × w`
/// scanned by a kernel producing `oh × ow` positions.
#[derive(Clone, Copy, Debug)]
struct Layout {
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    g: ConvGeom,
}

/// Output positions `o` with `0 <= o*stride + offset - padding < extent`.
fn tap_range(offset: usize, g: ConvGeom, extent: usize, out: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(offset).div_ceil(g.stride);
    let hi = if extent + g.padding > offset { ((extent + g.padding - offset - 1) / g.stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

impl Layout {
    fn col_rows(&self) -> usize {
        self.channels * self.g.kernel * self.g.kernel
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(dst_row, src_row, x0, x1, src_start)` for every in-bounds
    /// stretch of kernel taps; `dst_row` is `row * oh + oy` in column units of `ow`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (k, g) = (self.g.kernel, self.g);
        for c in 0..self.channels {
            for ki in 0..k {
                let (y0, y1) = tap_range(ki, g, self.h, self.oh);
                for kj in 0..k {
                    let (x0, x1) = tap_range(kj, g, self.w, self.ow);
                    let row = (c * k + ki) * k + kj;
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ki - g.padding;
                        if x1 == x0 {
                            continue;
                        }
                        f(row, oy, x0, x1, (c * self.h + iy) * self.w + x0 * g.stride + kj - g.padding);
                    }
                }
            }
        }
    }
}

/// Writes the columns of one image into `cols`, whose rows are `ld` apart.
fn im2col<T: Float>(img: &[T], l: &Layout, cols: &mut [T], ld: usize) {
    let (n, s) = (l.col_cols(), l.g.stride);
    for row in 0..l.col_rows() {
        cols[row * ld..row * ld + n].fill(T::zero());
    }
    l.for_each_run(|row, oy, x0, x1, start| {
        let dst = &mut cols[row * ld + oy * l.ow + x0..row * ld + oy * l.ow + x1];
        let src = &img[start..start + (x1 - x0 - 1) * s + 1];
        for (d, &v) in dst.iter_mut().zip(src.iter().step_by(s)) {
            *d = v;
        }
    });
}

/// Adds columns (rows `ld` apart) back onto one image.
fn col2im<T: Float>(cols: &[T], l: &Layout, img: &mut [T], ld: usize) {
    let s = l.g.stride;
    l.for_each_run(|row, oy, x0, x1, start| {
        let src = &cols[row * ld + oy * l.ow + x0..row * ld + oy * l.ow + x1];
        let dst = &mut img[start..start + (x1 - x0 - 1) * s + 1];
        for (d, &v) in dst.iter_mut().step_by(s).zip(src) {
            *d += v;
        }
    });
}

/// Examples per GEMM: small spatial layers are batched so every GEMM sees
/// at least this many columns.
const GROUP_COLUMNS: usize = 2304;

fn group_size(n: usize, ncols: usize) -> usize {
    (GROUP_COLUMNS / ncols.max(1)).clamp(1, n.max(1))
}

/// `[m, rows, cols]` to `[rows, m * cols]`.
fn gather<T: Float>(src: &[T], m: usize, rows: usize, cols: usize) -> Vec<T> {
    let width = m * cols;
    let mut out = vec![T::zero(); rows * width];
    for j in 0..m {
        for r in 0..rows {
            out[r * width + j * cols..r * width + (j + 1) * cols]
                .copy_from_slice(&src[(j * rows + r) * cols..(j * rows + r + 1) * cols]);
        }
    }
    out
}

/// `[rows, m * cols]` to `[m, rows, cols]`.
fn scatter<T: Float>(src: &[T], dst: &mut [T], m: usize, rows: usize, cols: usize) {
    let width = m * cols;
    for j in 0..m {
        for r in 0..rows {
            dst[(j * rows + r) * cols..(j * rows + r + 1) * cols]
                .copy_from_slice(&src[r * width + j * cols..r * width + (j + 1) * cols]);
        }
    }
}

fn add_bias<T: Float>(y: &mut [T], bias: &[T], plane: usize) {
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[i % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Shapes of a conv2d call: input `[n, c_in, h, w]`, weight `[c_out, c_in, k, k]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub oh: usize,
    pub ow: usize,
    pub g: ConvGeom,
}

impl Conv2dDims {
    pub fn infer(input: &[usize], weight: &[usize], bias: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [n, c_in, h, w] = *input else {
            return Err(Error::shape(format!("conv2d input must be 4-d, got {input:?}")));
        };
        let [c_out, wc_in, k, k2] = *weight else {
            return Err(Error::shape(format!("conv2d weight must be 4-d, got {weight:?}")));
        };
        if wc_in != c_in || k != k2 {
            return Err(Error::shape(format!("conv2d weight {weight:?} incompatible with input {input:?}")));
        }
        if bias != [c_out] {
            return Err(Error::shape(format!("conv2d bias {bias:?}, expected [{c_out}]")));
        }
        let g = ConvGeom { kernel: k, stride, padding };
        Ok(Self { n, c_in, h, w, c_out, oh: conv_output_len(h, g)?, ow: conv_output_len(w, g)?, g })
    }

    fn layout(&self) -> Layout {
        Layout { channels: self.c_in, h: self.h, w: self.w, oh: self.oh, ow: self.ow, g: self.g }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }
}

pub(crate) fn conv2d_forward<T: Float>(x: &[T], weight: &[T], bias: &[T], d: &Conv2dDims) -> Vec<T> {
    let l = d.layout();
    let (rows, ncols) = (l.col_rows(), l.col_cols());
    let in_len = d.c_in * d.h * d.w;
    let out_len = d.c_out * ncols;
    let group = group_size(d.n, ncols);
    let wmat = MatRef::new(weight, d.c_out, rows);
    let mut out = vec![T::zero(); d.n * out_len];
    par::for_each_chunk_mut(&mut out, group * out_len, |gi, y| {
        let m = y.len() / out_len;
        let width = m * ncols;
        let xg = &x[gi * group * in_len..];
        let mut cols = vec![T::zero(); rows * width];
        for j in 0..m {
            im2col(&xg[j * in_len..(j + 1) * in_len], &l, &mut cols[j * ncols..], width);
        }
        let cols = MatRef::new(&cols, rows, width);
        if m == 1 {
            gemm(T::one(), wmat, cols, T::zero(), y);
        } else {
            let mut yg = vec![T::zero(); d.c_out * width];
            gemm(T::one(), wmat, cols, T::zero(), &mut yg);
            scatter(&yg, y, m, d.c_out, ncols);
        }
        add_bias(y, bias, ncols);
    });
    out
}

/// Returns `(d_input, d_weight, d_bias)`; `d_input` only when `need_dx`.
pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    d: &Conv2dDims,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let l = d.layout();
    let (rows, ncols) = (l.col_rows(), l.col_cols());
    let in_len = d.c_in * d.h * d.w;
    let out_len = d.c_out * ncols;
    let group = group_size(d.n, ncols);
    let wmat = MatRef::new(weight, d.c_out, rows);

    let parts = par::map_indexed(d.n.div_ceil(group), |gi| {
        let first = gi * group;
        let m = group.min(d.n - first);
        let width = m * ncols;
        let dy_g = &dy[first * out_len..(first + m) * out_len];
        let dy_cat;
        let dyg = if m == 1 {
            dy_g
        } else {
            dy_cat = gather(dy_g, m, d.c_out, ncols);
            &dy_cat
        };
        let dyg = MatRef::new(dyg, d.c_out, width);
        let mut cols = vec![T::zero(); rows * width];
        let dx = need_dx.then(|| {
            gemm(T::one(), wmat.t(), dyg, T::zero(), &mut cols);
            let mut dx = vec![T::zero(); m * in_len];
            for (j, dxi) in dx.chunks_mut(in_len).enumerate() {
                col2im(&cols[j * ncols..], &l, dxi, width);
            }
            dx
        });
        for j in 0..m {
            im2col(&x[(first + j) * in_len..(first + j + 1) * in_len], &l, &mut cols[j * ncols..], width);
        }
        let mut dw = vec![T::zero(); d.c_out * rows];
        gemm(T::one(), dyg, MatRef::new(&cols, rows, width).t(), T::zero(), &mut dw);
        (dx, dw)
    });
    let (dx, dw) = combine(parts, need_dx, d.n * in_len, d.c_out * rows);
    let db = bias_grad(dy, d.n, d.c_out, ncols);
    (dx, dw, db)
}

/// Concatenates per-group input gradients and sums weight gradients in group order.
fn combine<T: Float>(
    parts: Vec<(Option<Vec<T>>, Vec<T>)>,
    need_dx: bool,
    dx_len: usize,
    dw_len: usize,
) -> (Option<Vec<T>>, Vec<T>) {
    let mut dx = need_dx.then(|| Vec::with_capacity(dx_len));
    let mut dw = vec![T::zero(); dw_len];
    for (part_dx, part_dw) in parts {
        if let (Some(acc), Some(p)) = (dx.as_mut(), part_dx) {
            acc.extend_from_slice(&p);
        }
        dw.iter_mut().zip(part_dw).for_each(|(a, p)| *a += p);
    }
    (dx, dw)
}

/// Shapes of a transposed conv: input `[n, c_in, h, w]`, weight `[c_in, c_out, k, k]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvTransposeDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub oh: usize,
    pub ow: usize,
    pub g: ConvGeom,
}

impl ConvTransposeDims {
    pub fn infer(input: &[usize], weight: &[usize], bias: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [n, c_in, h, w] = *input else {
            return Err(Error::shape(format!("conv_transpose2d input must be 4-d, got {input:?}")));
        };
        let [wc_in, c_out, k, k2] = *weight else {
            return Err(Error::shape(format!("conv_transpose2d weight must be 4-d, got {weight:?}")));
        };
        if wc_in != c_in || k != k2 {
            return Err(Error::shape(format!(
                "conv_transpose2d weight {weight:?} incompatible with input {input:?}"
            )));
        }
        if bias != [c_out] {
            return Err(Error::shape(format!("conv_transpose2d bias {bias:?}, expected [{c_out}]")));
        }
        let g = ConvGeom { kernel: k, stride, padding };
        let (oh, ow) = (conv_transpose_output_len(h, g)?, conv_transpose_output_len(w, g)?);
        Ok(Self { n, c_in, h, w, c_out, oh, ow, g })
    }

    /// The transposed conv scatters into the output exactly as a conv2d over
    /// the output would gather, so the output plays the role of the image.
    fn layout(&self) -> Layout {
        Layout { channels: self.c_out, h: self.oh, w: self.ow, oh: self.h, ow: self.w, g: self.g }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }
}

pub(crate) fn conv_transpose2d_forward<T: Float>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    d: &ConvTransposeDims,
) -> Vec<T> {
    let l = d.layout();
    let (rows, ncols) = (l.col_rows(), l.col_cols());
    let in_len = d.c_in * ncols;
    let out_plane = d.oh * d.ow;
    let out_len = d.c_out * out_plane;
    let group = group_size(d.n, ncols);
    let wmat = MatRef::new(weight, d.c_in, rows);
    let mut out = vec![T::zero(); d.n * out_len];
    par::for_each_chunk_mut(&mut out, group * out_len, |gi, y| {
        let m = y.len() / out_len;
        let width = m * ncols;
        let x_g = &x[gi * group * in_len..(gi * group + m) * in_len];
        let x_cat;
        let xg = if m == 1 {
            x_g
        } else {
            x_cat = gather(x_g, m, d.c_in, ncols);
            &x_cat
        };
        let mut cols = vec![T::zero(); rows * width];
        gemm(T::one(), wmat.t(), MatRef::new(xg, d.c_in, width), T::zero(), &mut cols);
        for (j, yi) in y.chunks_mut(out_len).enumerate() {
            col2im(&cols[j * ncols..], &l, yi, width);
        }
        add_bias(y, bias, out_plane);
    });
    out
}

/// Returns `(d_input, d_weight, d_bias)`; `d_input` only when `need_dx`.
pub(crate) fn conv_transpose2d_backward<T: Float>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    d: &ConvTransposeDims,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let l = d.layout();
    let (rows, ncols) = (l.col_rows(), l.col_cols());
    let in_len = d.c_in * ncols;
    let out_len = d.c_out * d.oh * d.ow;
    let group = group_size(d.n, ncols);
    let wmat = MatRef::new(weight, d.c_in, rows);

    let parts = par::map_indexed(d.n.div_ceil(group), |gi| {
        let first = gi * group;
        let m = group.min(d.n - first);
        let width = m * ncols;
        let mut dcols = vec![T::zero(); rows * width];
        for j in 0..m {
            im2col(&dy[(first + j) * out_len..(first + j + 1) * out_len], &l, &mut dcols[j * ncols..], width);
        }
        let dcols = MatRef::new(&dcols, rows, width);
        let x_g = &x[first * in_len..(first + m) * in_len];
        let x_cat;
        let xg = if m == 1 {
            x_g
        } else {
            x_cat = gather(x_g, m, d.c_in, ncols);
            &x_cat
        };
        let dx = need_dx.then(|| {
            let mut dxg = vec![T::zero(); d.c_in * width];
            gemm(T::one(), wmat, dcols, T::zero(), &mut dxg);
            if m == 1 {
                return dxg;
            }
            let mut dx = vec![T::zero(); m * in_len];
            scatter(&dxg, &mut dx, m, d.c_in, ncols);
            dx
        });
        let mut dw = vec![T::zero(); d.c_in * rows];
        gemm(T::one(), MatRef::new(xg, d.c_in, width), dcols.t(), T::zero(), &mut dw);
        (dx, dw)
    });
    let (dx, dw) = combine(parts, need_dx, d.n * in_len, d.c_in * rows);
    let db = bias_grad(dy, d.n, d.c_out, d.oh * d.ow);
    (dx, dw, db)
}

fn bias_grad<T: Float>(dy: &[T], n: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for i in 0..n {
        for (c, slot) in db.iter_mut().enumerate() {
            let start = (i * channels + c) * plane;
            *slot += dy[start..start + plane].iter().copied().sum::<T>();
        }
    }
    db
}
