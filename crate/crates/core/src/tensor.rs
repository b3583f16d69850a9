//! Dense NCHW tensors and the direct-loop primitives the network is built from:
//! grouped convolution, 2x2 max pooling, global average pooling and batch
//! normalization. The same convolution kernel serves the real-valued training
//! path (`f64`) and the integer inference path (`i32`).

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Scalar types a [`Tensor4`] may hold.
pub trait Element:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Send
    + Sync
    + 'static
{
    fn zero() -> Self {
        Self::default()
    }
    fn is_zero(self) -> bool {
        self == Self::default()
    }
}

impl Element for f64 {}
impl Element for f32 {}
impl Element for i32 {}
impl Element for i64 {}

/// A 4-D tensor laid out as (batch, channels, height, width), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Element> Tensor4<T> {
    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!("dims must be positive, got {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "data length {} does not match dims {dims:?} ({len})",
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    /// Tensor of the given dims filled with `value`.
    ///
    /// Panics if any dim is zero.
    pub fn filled(dims: [usize; 4], value: T) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "dims must be positive: {dims:?}");
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    pub fn batch(&self) -> usize {
        self.dims[0]
    }
    pub fn channels(&self) -> usize {
        self.dims[1]
    }
    pub fn height(&self) -> usize {
        self.dims[2]
    }
    pub fn width(&self) -> usize {
        self.dims[3]
    }
    pub fn plane(&self) -> usize {
        self.dims[2] * self.dims[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// The h×w plane of channel `c` in sample `n`.
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane();
        let start = (n * self.dims[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane();
        let start = (n * self.dims[1] + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor4<T>, f: impl Fn(T, T) -> T) -> Result<Tensor4<T>> {
        self.expect_same_dims(other)?;
        Ok(Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_dims(&self, other: &Tensor4<T>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Copy of the single sample `n` as a batch-1 tensor.
    pub fn sample(&self, n: usize) -> Tensor4<T> {
        let per = self.dims[1] * self.plane();
        Tensor4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenate along the batch axis.
    pub fn stack(samples: &[Tensor4<T>]) -> Result<Tensor4<T>> {
        let first = samples
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(samples.iter().map(|s| s.len()).sum());
        let mut batch = 0;
        for s in samples {
            if s.dims[1..] != [c, h, w] {
                return Err(Error::shape(format!(
                    "stack: {:?} incompatible with {:?}",
                    s.dims, first.dims
                )));
            }
            batch += s.dims[0];
            data.extend_from_slice(&s.data);
        }
        Ok(Tensor4 {
            dims: [batch, c, h, w],
            data,
        })
    }

    /// Slice of channels `[start, start + count)` from every sample.
    pub fn channel_range(&self, start: usize, count: usize) -> Result<Tensor4<T>> {
        if count == 0 || start + count > self.dims[1] {
            return Err(Error::shape(format!(
                "channel range {start}+{count} out of {}",
                self.dims[1]
            )));
        }
        let mut out = Tensor4::zeros([self.dims[0], count, self.dims[2], self.dims[3]]);
        for n in 0..self.dims[0] {
            for c in 0..count {
                out.channel_mut(n, c)
                    .copy_from_slice(self.channel(n, start + c));
            }
        }
        Ok(out)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[Tensor4<T>]) -> Result<Tensor4<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot concatenate zero tensors"))?;
        let [n, _, h, w] = first.dims;
        let total: usize = parts.iter().map(|p| p.dims[1]).sum();
        let mut out = Tensor4::zeros([n, total, h, w]);
        let mut base = 0;
        for p in parts {
            if p.dims[0] != n || p.dims[2] != h || p.dims[3] != w {
                return Err(Error::shape(format!(
                    "concat: {:?} incompatible with {:?}",
                    p.dims, first.dims
                )));
            }
            for s in 0..n {
                for c in 0..p.dims[1] {
                    out.channel_mut(s, base + c).copy_from_slice(p.channel(s, c));
                }
            }
            base += p.dims[1];
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on every side (odd kernels only).
    Same,
    Valid,
}

/// Static description of one convolution: grouping, padding and stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub groups: usize,
    pub padding: Padding,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(groups: usize, padding: Padding, stride: usize) -> Self {
        ConvSpec {
            groups,
            padding,
            stride,
        }
    }

    pub fn pointwise() -> Self {
        ConvSpec::new(1, Padding::Valid, 1)
    }

    pub fn same(groups: usize) -> Self {
        ConvSpec::new(groups, Padding::Same, 1)
    }
}

/// Resolved geometry of a convolution: validated dims plus output size.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(x: [usize; 4], w: [usize; 4], spec: ConvSpec) -> Result<ConvGeom> {
    let [n, c_in, h, wd] = x;
    let [c_out, cin_g, kh, kw] = w;
    let g = spec.groups;
    if g == 0 {
        return Err(Error::config("groups", "must be positive"));
    }
    if spec.stride == 0 {
        return Err(Error::config("stride", "must be positive"));
    }
    if c_in % g != 0 || c_out % g != 0 {
        return Err(Error::config(
            "groups",
            format!("{g} groups do not divide c_in={c_in} and c_out={c_out}"),
        ));
    }
    if cin_g != c_in / g {
        return Err(Error::shape(format!(
            "weight expects {cin_g} input channels per group, input provides {}",
            c_in / g
        )));
    }
    let (pad_h, pad_w) = match spec.padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::shape("same padding requires odd kernel sizes"));
            }
            ((kh - 1) / 2, (kw - 1) / 2)
        }
    };
    if h + 2 * pad_h < kh || wd + 2 * pad_w < kw {
        return Err(Error::shape(format!(
            "kernel {kh}x{kw} larger than padded input {h}x{wd}"
        )));
    }
    let oh = (h + 2 * pad_h - kh) / spec.stride + 1;
    let ow = (wd + 2 * pad_w - kw) / spec.stride + 1;
    Ok(ConvGeom {
        n,
        h,
        w: wd,
        c_out,
        cin_g,
        cout_g: c_out / g,
        kh,
        kw,
        pad_h,
        pad_w,
        stride: spec.stride,
        oh,
        ow,
    })
}

impl ConvGeom {
    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` is in range.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let shift = kx as isize - self.pad_w as isize;
        let s = self.stride as isize;
        // smallest ox with ox*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // largest ox with ox*s + shift <= w - 1
        let max_ix = self.w as isize - 1 - shift;
        let hi = if max_ix < 0 { 0 } else { max_ix / s + 1 };
        (lo as usize, (hi as usize).min(self.ow).max(lo as usize))
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad_h as isize;
        if iy < 0 || iy >= self.h as isize {
            None
        } else {
            Some(iy as usize)
        }
    }

    #[inline]
    fn input_col(&self, ox: usize, kx: usize) -> usize {
        ox * self.stride + kx - self.pad_w
    }
}

/// Grouped 2-D cross-correlation.
///
/// `w` has dims `(c_out, c_in / groups, kh, kw)`. No bias is added.
pub fn conv2d<T: Element>(x: &Tensor4<T>, w: &Tensor4<T>, spec: ConvSpec) -> Result<Tensor4<T>> {
    let geo = conv_geometry(x.dims(), w.dims(), spec)?;
    let mut out = Tensor4::zeros([geo.n, geo.c_out, geo.oh, geo.ow]);
    let wdata = w.data();
    for n in 0..geo.n {
        for oc in 0..geo.c_out {
            let group = oc / geo.cout_g;
            let out_plane = out.channel_mut(n, oc);
            for icg in 0..geo.cin_g {
                let in_plane = x.channel(n, group * geo.cin_g + icg);
                for ky in 0..geo.kh {
                    for kx in 0..geo.kw {
                        let wv = wdata[((oc * geo.cin_g + icg) * geo.kh + ky) * geo.kw + kx];
                        if wv.is_zero() {
                            continue;
                        }
                        let (lo, hi) = geo.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..geo.oh {
                            let Some(iy) = geo.input_row(oy, ky) else {
                                continue;
                            };
                            let in_row = &in_plane[iy * geo.w..(iy + 1) * geo.w];
                            let out_row = &mut out_plane[oy * geo.ow..(oy + 1) * geo.ow];
                            if geo.stride == 1 {
                                let ix0 = geo.input_col(lo, kx);
                                for (o, &i) in out_row[lo..hi]
                                    .iter_mut()
                                    .zip(&in_row[ix0..ix0 + (hi - lo)])
                                {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in lo..hi {
                                    out_row[ox] += wv * in_row[geo.input_col(ox, kx)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input and its weights.
pub fn conv2d_backward<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    spec: ConvSpec,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let geo = conv_geometry(x.dims(), w.dims(), spec)?;
    if grad_out.dims() != [geo.n, geo.c_out, geo.oh, geo.ow] {
        return Err(Error::shape(format!(
            "grad_out dims {:?} do not match conv output {:?}",
            grad_out.dims(),
            [geo.n, geo.c_out, geo.oh, geo.ow]
        )));
    }
    let mut gx = Tensor4::zeros(x.dims());
    let mut gw = Tensor4::zeros(w.dims());
    let wdata = w.data();
    for n in 0..geo.n {
        for oc in 0..geo.c_out {
            let group = oc / geo.cout_g;
            let go_plane = grad_out.channel(n, oc);
            for icg in 0..geo.cin_g {
                let ic = group * geo.cin_g + icg;
                for ky in 0..geo.kh {
                    for kx in 0..geo.kw {
                        let widx = ((oc * geo.cin_g + icg) * geo.kh + ky) * geo.kw + kx;
                        let wv = wdata[widx];
                        let (lo, hi) = geo.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in 0..geo.oh {
                            let Some(iy) = geo.input_row(oy, ky) else {
                                continue;
                            };
                            let go_row = &go_plane[oy * geo.ow..(oy + 1) * geo.ow];
                            {
                                let in_plane = x.channel(n, ic);
                                let in_row = &in_plane[iy * geo.w..(iy + 1) * geo.w];
                                for ox in lo..hi {
                                    acc += go_row[ox] * in_row[geo.input_col(ox, kx)];
                                }
                            }
                            if !wv.is_zero() {
                                let gx_plane = gx.channel_mut(n, ic);
                                let gx_row = &mut gx_plane[iy * geo.w..(iy + 1) * geo.w];
                                for ox in lo..hi {
                                    gx_row[geo.input_col(ox, kx)] += wv * go_row[ox];
                                }
                            }
                        }
                        gw.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((gx, gw))
}

/// `c = a · b + beta · c` for row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    if k > 0 {
        assert!(a.len() >= span(m, k, rsa, csa));
        assert!(b.len() >= span(k, n, rsb, csb));
    }
    assert!(c.len() >= span(m, n, ldc, 1));
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

impl ConvGeom {
    fn is_plain_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    /// Unfolds one group of one sample into `(cin_g·kh·kw) × (oh·ow)` patches.
    fn im2col(&self, plane: &[f64], col: &mut [f64]) {
        let (hw, ohw) = (self.h * self.w, self.oh * self.ow);
        for icg in 0..self.cin_g {
            let in_plane = &plane[icg * hw..(icg + 1) * hw];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (icg * self.kh + ky) * self.kw + kx;
                    let row = &mut col[r * ohw..(r + 1) * ohw];
                    let (lo, hi) = self.col_range(kx);
                    for oy in 0..self.oh {
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        let Some(iy) = self.input_row(oy, ky) else {
                            dst.fill(0.0);
                            continue;
                        };
                        let in_row = &in_plane[iy * self.w..(iy + 1) * self.w];
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if self.stride == 1 {
                            let ix0 = self.input_col(lo, kx);
                            dst[lo..hi].copy_from_slice(&in_row[ix0..ix0 + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                dst[ox] = in_row[self.input_col(ox, kx)];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters patch gradients back onto the plane.
    fn col2im(&self, col: &[f64], plane: &mut [f64]) {
        let (hw, ohw) = (self.h * self.w, self.oh * self.ow);
        for icg in 0..self.cin_g {
            let gx_plane = &mut plane[icg * hw..(icg + 1) * hw];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (icg * self.kh + ky) * self.kw + kx;
                    let row = &col[r * ohw..(r + 1) * ohw];
                    let (lo, hi) = self.col_range(kx);
                    for oy in 0..self.oh {
                        let Some(iy) = self.input_row(oy, ky) else {
                            continue;
                        };
                        let src = &row[oy * self.ow..(oy + 1) * self.ow];
                        let gx_row = &mut gx_plane[iy * self.w..(iy + 1) * self.w];
                        if self.stride == 1 {
                            let ix0 = self.input_col(lo, kx);
                            for (g, &v) in gx_row[ix0..ix0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *g += v;
                            }
                        } else {
                            for ox in lo..hi {
                                gx_row[self.input_col(ox, kx)] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// [`conv2d`] for `f64` through matrix products, parallel over samples.
/// Results agree with the direct loop up to summation order; sums of
/// integers below 2^53 are exact.
pub fn conv2d_gemm(x: &Tensor4<f64>, w: &Tensor4<f64>, spec: ConvSpec) -> Result<Tensor4<f64>> {
    let geo = conv_geometry(x.dims(), w.dims(), spec)?;
    let c_in = x.channels();
    let groups = geo.c_out / geo.cout_g;
    let (hw, ohw, patch) = (geo.h * geo.w, geo.oh * geo.ow, geo.cin_g * geo.kh * geo.kw);
    let plain = geo.is_plain_pointwise();
    let mut out = Tensor4::zeros([geo.n, geo.c_out, geo.oh, geo.ow]);
    if out.is_empty() {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(geo.c_out * ohw)
        .enumerate()
        .for_each(|(n, out_n)| {
            let mut col = if plain { Vec::new() } else { vec![0.0; patch * ohw] };
            for g in 0..groups {
                let x0 = (n * c_in + g * geo.cin_g) * hw;
                let plane = &x.data()[x0..x0 + geo.cin_g * hw];
                let b: &[f64] = if plain {
                    plane
                } else {
                    geo.im2col(plane, &mut col);
                    &col
                };
                let a = &w.data()[g * geo.cout_g * patch..(g + 1) * geo.cout_g * patch];
                let c = &mut out_n[g * geo.cout_g * ohw..(g + 1) * geo.cout_g * ohw];
                gemm(geo.cout_g, patch, ohw, a, (patch, 1), b, (ohw, 1), 0.0, c, ohw);
            }
        });
    Ok(out)
}

/// [`conv2d_backward`] for `f64` through matrix products, parallel over
/// samples. Per-sample weight gradients are summed in sample order, so the
/// result does not depend on the thread count.
pub fn conv2d_backward_gemm(
    x: &Tensor4<f64>,
    w: &Tensor4<f64>,
    grad_out: &Tensor4<f64>,
    spec: ConvSpec,
) -> Result<(Tensor4<f64>, Tensor4<f64>)> {
    let geo = conv_geometry(x.dims(), w.dims(), spec)?;
    if grad_out.dims() != [geo.n, geo.c_out, geo.oh, geo.ow] {
        return Err(Error::shape(format!(
            "grad_out dims {:?} do not match conv output {:?}",
            grad_out.dims(),
            [geo.n, geo.c_out, geo.oh, geo.ow]
        )));
    }
    let c_in = x.channels();
    let groups = geo.c_out / geo.cout_g;
    let (hw, ohw, patch) = (geo.h * geo.w, geo.oh * geo.ow, geo.cin_g * geo.kh * geo.kw);
    let plain = geo.is_plain_pointwise();
    let mut gx = Tensor4::zeros(x.dims());
    let mut gw = Tensor4::zeros(w.dims());
    if gx.is_empty() {
        return Ok((gx, gw));
    }
    let partials: Vec<Vec<f64>> = gx
        .data_mut()
        .par_chunks_mut(c_in * hw)
        .enumerate()
        .map(|(n, gx_n)| {
            let mut gw_n = vec![0.0; w.len()];
            let mut col = if plain { Vec::new() } else { vec![0.0; patch * ohw] };
            let mut gcol = if plain { Vec::new() } else { vec![0.0; patch * ohw] };
            for g in 0..groups {
                let x0 = (n * c_in + g * geo.cin_g) * hw;
                let plane = &x.data()[x0..x0 + geo.cin_g * hw];
                let b: &[f64] = if plain {
                    plane
                } else {
                    geo.im2col(plane, &mut col);
                    &col
                };
                let o0 = (n * geo.c_out + g * geo.cout_g) * ohw;
                let go = &grad_out.data()[o0..o0 + geo.cout_g * ohw];
                let w_range = g * geo.cout_g * patch..(g + 1) * geo.cout_g * patch;
                // gw = go · bᵀ
                gemm(geo.cout_g, ohw, patch, go, (ohw, 1), b, (1, ohw), 0.0, &mut gw_n[w_range.clone()], patch);
                // d(patches) = wᵀ · go
                let a = &w.data()[w_range];
                let gplane = &mut gx_n[g * geo.cin_g * hw..(g + 1) * geo.cin_g * hw];
                if plain {
                    gemm(patch, geo.cout_g, ohw, a, (1, patch), go, (ohw, 1), 0.0, gplane, ohw);
                } else {
                    gemm(patch, geo.cout_g, ohw, a, (1, patch), go, (ohw, 1), 0.0, &mut gcol, ohw);
                    geo.col2im(&gcol, gplane);
                }
            }
            gw_n
        })
        .collect();
    for p in partials {
        for (d, v) in gw.data_mut().iter_mut().zip(p) {
            *d += v;
        }
    }
    Ok((gx, gw))
}

/// Worst-case magnitude of a convolution accumulator whose inputs lie in
/// `[0, max_input]` and whose weights lie in `[-max_weight, max_weight]`.
pub fn conv_accumulator_bound(kh: usize, kw: usize, cin_per_group: usize, max_input: u64, max_weight: u64) -> u64 {
    (kh * kw * cin_per_group) as u64 * max_input * max_weight
}

/// 2×2 max pooling with stride 2. Odd spatial dims are rejected.
pub fn maxpool2x2<T: Element>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    maxpool2x2_with_indices(x).map(|(y, _)| y)
}

/// Max pooling that also returns, per output element, the flat input index
/// it was taken from (first maximum in row-major window order).
pub fn maxpool2x2_with_indices<T: Element>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2x2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = x.offset(s, ch, 2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = x.offset(s, ch, 2 * oy + dy, 2 * ox + dx);
                        if x.data()[cand] > x.data()[best] {
                            best = cand;
                        }
                    }
                    out.set(s, ch, oy, ox, x.data()[best]);
                    idx.push(best);
                }
            }
        }
    }
    Ok((out, idx))
}

/// Routes pooled gradients back to the winning input positions.
pub fn maxpool2x2_backward(input_dims: [usize; 4], indices: &[usize], grad_out: &Tensor4<f64>) -> Tensor4<f64> {
    let mut gx = Tensor4::zeros(input_dims);
    for (&i, &g) in indices.iter().zip(grad_out.data()) {
        gx.data_mut()[i] += g;
    }
    gx
}

/// Mean over each h×w plane. Returned row-major as `[batch][channel]`.
pub fn global_avg_pool(x: &Tensor4<f64>) -> Vec<f64> {
    let plane = x.plane() as f64;
    (0..x.batch())
        .flat_map(|n| (0..x.channels()).map(move |c| (n, c)))
        .map(|(n, c)| x.channel(n, c).iter().sum::<f64>() / plane)
        .collect()
}

pub fn global_avg_pool_backward(dims: [usize; 4], grad: &[f64]) -> Tensor4<f64> {
    let plane = (dims[2] * dims[3]) as f64;
    let mut gx = Tensor4::zeros(dims);
    for n in 0..dims[0] {
        for c in 0..dims[1] {
            let g = grad[n * dims[1] + c] / plane;
            gx.channel_mut(n, c).iter_mut().for_each(|v| *v = g);
        }
    }
    gx
}

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-5;

/// Per-channel batch-normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub moving_mean: Vec<f64>,
    pub moving_var: Vec<f64>,
    pub epsilon: f64,
}

impl BnParams {
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            moving_mean: vec![0.0; channels],
            moving_var: vec![1.0; channels],
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.moving_mean.len() != c || self.moving_var.len() != c {
            return Err(Error::shape("batch-norm vectors differ in length"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if self.moving_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::config("moving_var", "must be non-negative"));
        }
        Ok(())
    }

    /// Inference-mode transform of a single value in channel `c`.
    #[inline]
    pub fn apply(&self, c: usize, x: f64) -> f64 {
        self.gamma[c] * (x - self.moving_mean[c]) / (self.moving_var[c] + self.epsilon).sqrt()
            + self.beta[c]
    }

    /// Rounds every stored value to `f32` precision (the checkpoint storage width).
    pub fn round_to_f32(&mut self) {
        for v in self
            .gamma
            .iter_mut()
            .chain(self.beta.iter_mut())
            .chain(self.moving_mean.iter_mut())
            .chain(self.moving_var.iter_mut())
        {
            *v = *v as f32 as f64;
        }
        self.epsilon = self.epsilon as f32 as f64;
    }
}

/// Values saved by a training-mode batch norm for its backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    xhat: Tensor4<f64>,
    inv_std: Vec<f64>,
}

/// Batch normalization. Training mode normalizes with batch statistics and
/// folds them into the running statistics with momentum [`BN_MOMENTUM`].
pub fn batch_norm(x: &Tensor4<f64>, p: &mut BnParams, training: bool) -> Result<Tensor4<f64>> {
    if training {
        batch_norm_train(x, p).map(|(y, _)| y)
    } else {
        batch_norm_infer(x, p)
    }
}

pub fn batch_norm_infer(x: &Tensor4<f64>, p: &BnParams) -> Result<Tensor4<f64>> {
    check_bn_channels(x, p)?;
    let mut y = x.clone();
    for n in 0..x.batch() {
        for c in 0..x.channels() {
            y.channel_mut(n, c).iter_mut().for_each(|v| *v = p.apply(c, *v));
        }
    }
    Ok(y)
}

pub fn batch_norm_train(x: &Tensor4<f64>, p: &mut BnParams) -> Result<(Tensor4<f64>, BnCache)> {
    check_bn_channels(x, p)?;
    let count = x.batch() * x.plane();
    if count == 0 {
        return Err(Error::shape("batch norm over an empty batch"));
    }
    let cnt = count as f64;
    let mut y = x.clone();
    let mut xhat = x.clone();
    let mut inv_std = vec![0.0; x.channels()];
    for c in 0..x.channels() {
        let mean = (0..x.batch())
            .map(|n| x.channel(n, c).iter().sum::<f64>())
            .sum::<f64>()
            / cnt;
        let var = (0..x.batch())
            .map(|n| x.channel(n, c).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
            .sum::<f64>()
            / cnt;
        let istd = 1.0 / (var + p.epsilon).sqrt();
        inv_std[c] = istd;
        for n in 0..x.batch() {
            let src = x.channel(n, c);
            let xh = xhat.channel_mut(n, c);
            for (h, &v) in xh.iter_mut().zip(src) {
                *h = (v - mean) * istd;
            }
            let dst = y.channel_mut(n, c);
            for (d, &h) in dst.iter_mut().zip(xhat.channel(n, c)) {
                *d = p.gamma[c] * h + p.beta[c];
            }
        }
        p.moving_mean[c] = BN_MOMENTUM * p.moving_mean[c] + (1.0 - BN_MOMENTUM) * mean;
        p.moving_var[c] = BN_MOMENTUM * p.moving_var[c] + (1.0 - BN_MOMENTUM) * var;
    }
    Ok((y, BnCache { xhat, inv_std }))
}

/// Returns `(grad_input, grad_gamma, grad_beta)` for a training-mode batch norm.
pub fn batch_norm_backward(
    grad_out: &Tensor4<f64>,
    cache: &BnCache,
    gamma: &[f64],
) -> Result<(Tensor4<f64>, Vec<f64>, Vec<f64>)> {
    grad_out.expect_same_dims(&cache.xhat)?;
    let c_count = grad_out.channels();
    let cnt = (grad_out.batch() * grad_out.plane()) as f64;
    let mut gx = Tensor4::zeros(grad_out.dims());
    let mut dgamma = vec![0.0; c_count];
    let mut dbeta = vec![0.0; c_count];
    for c in 0..c_count {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for n in 0..grad_out.batch() {
            for (&g, &h) in grad_out.channel(n, c).iter().zip(cache.xhat.channel(n, c)) {
                sum_g += g;
                sum_gx += g * h;
            }
        }
        dgamma[c] = sum_gx;
        dbeta[c] = sum_g;
        let k = gamma[c] * cache.inv_std[c] / cnt;
        for n in 0..grad_out.batch() {
            let go = grad_out.channel(n, c).to_vec();
            let xh = cache.xhat.channel(n, c).to_vec();
            for ((d, g), h) in gx.channel_mut(n, c).iter_mut().zip(go).zip(xh) {
                *d = k * (cnt * g - sum_g - h * sum_gx);
            }
        }
    }
    Ok((gx, dgamma, dbeta))
}

fn check_bn_channels(x: &Tensor4<f64>, p: &BnParams) -> Result<()> {
    p.validate()?;
    if p.channels() != x.channels() {
        return Err(Error::shape(format!(
            "batch norm has {} channels, input has {}",
            p.channels(),
            x.channels()
        )));
    }
    Ok(())
}
