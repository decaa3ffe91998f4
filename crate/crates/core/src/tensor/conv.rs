//! Standard, dilated and deformable 2-D convolution.
//!
//! All three lower to a column matrix (one row per input-channel × kernel-tap,
//! one column per output pixel) followed by a matrix product. Zero padding is
//! used at every border, including the fractional sampling positions of the
//! deformable variant.

use super::gemm::{axpy, conv_gemm, dot};
use super::{ensure_dim, Axis, Result, Scalar, Shape, Tensor4, TensorError};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(kh: usize, kw: usize) -> Self {
        ConvSpec {
            kernel: (kh, kw),
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }

    /// Square `k × k` kernel, stride 1, padded so the output keeps the input size.
    pub fn same(k: usize) -> Self {
        Self::same_dilated(k, 1)
    }

    pub fn same_dilated(k: usize, dilation: usize) -> Self {
        ConvSpec {
            kernel: (k, k),
            stride: 1,
            padding: dilation * (k - 1) / 2,
            dilation,
            groups: 1,
        }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    /// Output extent along one axis, or `None` when the dilated kernel does
    /// not fit inside the padded input.
    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        match (
            self.output_len(h, self.kernel.0),
            self.output_len(w, self.kernel.1),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(TensorError::Config {
                op: "conv2d",
                message: format!(
                    "kernel {:?} with dilation {} does not fit {}x{} input padded by {}",
                    self.kernel, self.dilation, h, w, self.padding
                ),
            }),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |message: &str| {
            Err(TensorError::Config {
                op: "conv2d",
                message: message.to_string(),
            })
        };
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return bad("kernel extent must be at least 1");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        if self.dilation == 0 {
            return bad("dilation must be at least 1");
        }
        if self.groups == 0 {
            return bad("groups must be at least 1");
        }
        Ok(())
    }
}

/// Resolved sizes for one convolution call.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Geometry {
    fn rows(&self, spec: &ConvSpec) -> usize {
        self.cin_g * spec.taps()
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.oh, self.ow)
    }
}

fn geometry<T: Scalar>(
    op: &'static str,
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Geometry> {
    let xs = x.shape();
    let ws = weight.shape();
    spec.validate()?;
    let g = spec.groups;
    if !ws.n.is_multiple_of(g) {
        return Err(TensorError::Config {
            op,
            message: format!("{} output channels not divisible by {} groups", ws.n, g),
        });
    }
    if !xs.c.is_multiple_of(g) {
        return Err(TensorError::Config {
            op,
            message: format!("{} input channels not divisible by {} groups", xs.c, g),
        });
    }
    ensure_dim(op, Axis::Channel, xs.c / g, ws.c)?;
    ensure_dim(op, Axis::Height, spec.kernel.0, ws.h)?;
    ensure_dim(op, Axis::Width, spec.kernel.1, ws.w)?;
    if let Some(b) = bias {
        ensure_dim(op, Axis::Batch, ws.n, b.len())?;
    }
    let (oh, ow) = spec.output_hw(xs.h, xs.w)?;
    Ok(Geometry {
        n: xs.n,
        cin: xs.c,
        h: xs.h,
        w: xs.w,
        cout: ws.n,
        oh,
        ow,
        cin_g: xs.c / g,
        cout_g: ws.n / g,
    })
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == (1, 1) && spec.stride == 1 && spec.padding == 0
}

/// Output columns `[lo, hi)` whose tap `k` lands inside an input axis of
/// length `len`.
fn valid_range(out_len: usize, len: usize, k: usize, spec: &ConvSpec) -> (usize, usize) {
    let (s, d, pad) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let off = k as isize * d - pad;
    // ox valid iff 0 <= ox*s + off < len
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = if len as isize - off <= 0 {
        0
    } else {
        ((len as isize - off + s - 1) / s).min(out_len as isize)
    };
    let lo = (lo as usize).min(out_len);
    (lo, (hi as usize).max(lo))
}

/// Rebuild `cols` as the `cin_g·kh·kw × oh·ow` patch matrix of `cin_g`
/// consecutive input planes.
fn im2col<T: Scalar>(planes: &[T], geo: &Geometry, spec: &ConvSpec, cols: &mut Vec<T>) {
    let (kh, kw) = spec.kernel;
    let plane_len = geo.h * geo.w;
    let s = spec.stride;
    let zero = T::zero();
    cols.clear();
    for ci in 0..geo.cin_g {
        let plane = &planes[ci * plane_len..(ci + 1) * plane_len];
        for ky in 0..kh {
            let (ylo, yhi) = valid_range(geo.oh, geo.h, ky, spec);
            for kx in 0..kw {
                let (xlo, xhi) = valid_range(geo.ow, geo.w, kx, spec);
                let x0 = (xlo * s + kx * spec.dilation) as isize - spec.padding as isize;
                cols.resize(cols.len() + ylo * geo.ow, zero);
                for oy in ylo..yhi {
                    let iy = oy * s + ky * spec.dilation - spec.padding;
                    let src = &plane[iy * geo.w..(iy + 1) * geo.w];
                    cols.resize(cols.len() + xlo, zero);
                    if xhi > xlo {
                        let x0 = x0 as usize;
                        if s == 1 {
                            cols.extend_from_slice(&src[x0..x0 + (xhi - xlo)]);
                        } else {
                            cols.extend((0..xhi - xlo).map(|i| src[x0 + i * s]));
                        }
                    }
                    cols.resize(cols.len() + geo.ow - xhi, zero);
                }
                cols.resize(cols.len() + (geo.oh - yhi) * geo.ow, zero);
            }
        }
    }
}

/// Scatter-add a column-matrix gradient back onto `cin_g` input planes.
fn col2im<T: Scalar>(cols: &[T], geo: &Geometry, spec: &ConvSpec, planes: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let plane_len = geo.h * geo.w;
    let ncols = geo.cols();
    let s = spec.stride;
    for ci in 0..geo.cin_g {
        let plane = &mut planes[ci * plane_len..(ci + 1) * plane_len];
        for ky in 0..kh {
            let (ylo, yhi) = valid_range(geo.oh, geo.h, ky, spec);
            for kx in 0..kw {
                let (xlo, xhi) = valid_range(geo.ow, geo.w, kx, spec);
                if xhi == xlo {
                    continue;
                }
                let x0 = xlo * s + kx * spec.dilation - spec.padding;
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in ylo..yhi {
                    let iy = oy * s + ky * spec.dilation - spec.padding;
                    let dst = &mut plane[iy * geo.w..(iy + 1) * geo.w];
                    let line = &src[oy * geo.ow + xlo..oy * geo.ow + xhi];
                    if s == 1 {
                        for (d, &v) in dst[x0..x0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in line.iter().enumerate() {
                            dst[x0 + i * s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolutions producing one output channel per group (the grouped
/// refinement conv, 2→1 attention convs, 1-channel heads) run directly on
/// image rows instead of through a column matrix.
fn use_direct(geo: &Geometry, spec: &ConvSpec) -> bool {
    geo.cout_g == 1 && spec.stride == 1
}

/// Direct stride-1 convolution for `cout_g == 1`. Each output element sums
/// its taps in (input channel, ky, kx) order starting from zero and adds the
/// bias last, like the column-matrix path.
fn conv_direct<T: Scalar>(x: &Tensor4<T>, weight: &Tensor4<T>, bias: Option<&[T]>, spec: &ConvSpec, geo: &Geometry, out: &mut Tensor4<T>) {
    let (kh, kw) = spec.kernel;
    let (d, pad) = (spec.dilation, spec.padding);
    let wd = weight.data();
    for n in 0..geo.n {
        for co in 0..geo.cout {
            let acc = out.plane_mut(n, co);
            for ci in 0..geo.cin_g {
                let plane = x.plane(n, co * geo.cin_g + ci);
                for ky in 0..kh {
                    let (ylo, yhi) = valid_range(geo.oh, geo.h, ky, spec);
                    for kx in 0..kw {
                        let (xlo, xhi) = valid_range(geo.ow, geo.w, kx, spec);
                        if xhi == xlo {
                            continue;
                        }
                        let wv = wd[((co * geo.cin_g + ci) * kh + ky) * kw + kx];
                        let x0 = xlo + kx * d - pad;
                        for oy in ylo..yhi {
                            let iy = oy + ky * d - pad;
                            axpy(
                                &mut acc[oy * geo.ow + xlo..oy * geo.ow + xhi],
                                &plane[iy * geo.w + x0..iy * geo.w + x0 + (xhi - xlo)],
                                wv,
                            );
                        }
                    }
                }
            }
            if let Some(b) = bias {
                acc.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_direct_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    spec: &ConvSpec,
    geo: &Geometry,
    grad_out: &Tensor4<T>,
    mut dx: Option<&mut Tensor4<T>>,
    dw: &mut Tensor4<T>,
    db: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let (d, pad) = (spec.dilation, spec.padding);
    for n in 0..geo.n {
        for (co, db_co) in db.iter_mut().enumerate().take(geo.cout) {
            let dy = grad_out.plane(n, co);
            *db_co += dy.iter().fold(T::zero(), |a, &v| a + v);
            for ci in 0..geo.cin_g {
                let c = co * geo.cin_g + ci;
                let plane = x.plane(n, c);
                for ky in 0..kh {
                    let (ylo, yhi) = valid_range(geo.oh, geo.h, ky, spec);
                    for kx in 0..kw {
                        let (xlo, xhi) = valid_range(geo.ow, geo.w, kx, spec);
                        if xhi == xlo {
                            continue;
                        }
                        let widx = ((co * geo.cin_g + ci) * kh + ky) * kw + kx;
                        let x0 = xlo + kx * d - pad;
                        let len = xhi - xlo;
                        let mut g = T::zero();
                        for oy in ylo..yhi {
                            let iy = oy + ky * d - pad;
                            g += dot(
                                &dy[oy * geo.ow + xlo..oy * geo.ow + xhi],
                                &plane[iy * geo.w + x0..iy * geo.w + x0 + len],
                            );
                        }
                        dw.data_mut()[widx] += g;
                        if let Some(dx) = dx.as_mut() {
                            let wv = weight.data()[widx];
                            let dst = dx.plane_mut(n, c);
                            for oy in ylo..yhi {
                                let iy = oy + ky * d - pad;
                                axpy(
                                    &mut dst[iy * geo.w + x0..iy * geo.w + x0 + len],
                                    &dy[oy * geo.ow + xlo..oy * geo.ow + xhi],
                                    wv,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Standard (optionally grouped, strided or dilated) 2-D convolution with
/// zero padding. `weight` is `c_out × c_in/groups × kh × kw`.
pub fn conv2d<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let geo = geometry("conv2d", x, weight, bias, spec)?;
    let mut out = Tensor4::zeros(geo.out_shape());
    if use_direct(&geo, spec) {
        conv_direct(x, weight, bias, spec, &geo, &mut out);
        return Ok(out);
    }
    let k = geo.rows(spec);
    let p = geo.cols();
    let plane_len = geo.h * geo.w;
    let mut cols = Vec::with_capacity(if is_pointwise(spec) { 0 } else { k * p });
    for n in 0..geo.n {
        let item = x.item(n);
        for g in 0..spec.groups {
            let planes = &item[g * geo.cin_g * plane_len..(g + 1) * geo.cin_g * plane_len];
            let b_mat: &[T] = if is_pointwise(spec) {
                planes
            } else {
                im2col(planes, &geo, spec, &mut cols);
                &cols
            };
            let w_g = &weight.data()[g * geo.cout_g * k..(g + 1) * geo.cout_g * k];
            let bias_g = bias.map(|b| &b[g * geo.cout_g..(g + 1) * geo.cout_g]);
            let start = (n * geo.cout + g * geo.cout_g) * p;
            let dst = &mut out.data_mut()[start..start + geo.cout_g * p];
            conv_gemm(geo.cout_g, k, p, w_g, b_mat, bias_g, dst);
        }
    }
    Ok(out)
}

/// Convolution whose taps are spaced `spec.dilation` pixels apart. Identical
/// to [`conv2d`]; kept as a named entry point for the multi-rate branch.
pub fn dilated_conv2d<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    conv2d(x, weight, bias, spec)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor4<T>>,
    pub dw: Tensor4<T>,
    pub db: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    spec: &ConvSpec,
    grad_out: &Tensor4<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let geo = geometry("conv2d_backward", x, weight, None, spec)?;
    let k = geo.rows(spec);
    let p = geo.cols();
    let plane_len = geo.h * geo.w;
    let pointwise = is_pointwise(spec);
    let mut dw = Tensor4::zeros(weight.shape());
    let mut db = vec![T::zero(); geo.cout];
    let mut dx = need_dx.then(|| Tensor4::zeros(x.shape()));
    if use_direct(&geo, spec) {
        conv_direct_backward(x, weight, spec, &geo, grad_out, dx.as_mut(), &mut dw, &mut db);
        return Ok(ConvGrads { dx, dw, db });
    }
    let mut cols = Vec::with_capacity(if pointwise { 0 } else { k * p });
    let mut dcols = vec![T::zero(); if need_dx && !pointwise { k * p } else { 0 }];

    for n in 0..geo.n {
        let item = x.item(n);
        for g in 0..spec.groups {
            let planes = &item[g * geo.cin_g * plane_len..(g + 1) * geo.cin_g * plane_len];
            let start = (n * geo.cout + g * geo.cout_g) * p;
            let dy = &grad_out.data()[start..start + geo.cout_g * p];
            for (co, row) in dy.chunks_exact(p).enumerate() {
                db[g * geo.cout_g + co] += row.iter().fold(T::zero(), |a, &v| a + v);
            }
            let b_mat: &[T] = if pointwise {
                planes
            } else {
                im2col(planes, &geo, spec, &mut cols);
                &cols
            };
            let dw_g = &mut dw.data_mut()[g * geo.cout_g * k..(g + 1) * geo.cout_g * k];
            T::gemm_nt(geo.cout_g, p, k, dy, b_mat, dw_g, true);

            if let Some(dx) = dx.as_mut() {
                let w_g = &weight.data()[g * geo.cout_g * k..(g + 1) * geo.cout_g * k];
                let dst = &mut dx.data_mut()[(n * geo.cin + g * geo.cin_g) * plane_len
                    ..(n * geo.cin + (g + 1) * geo.cin_g) * plane_len];
                if pointwise {
                    T::gemm_tn(k, geo.cout_g, p, w_g, dy, dst, true);
                } else {
                    T::gemm_tn(k, geo.cout_g, p, w_g, dy, &mut dcols, false);
                    col2im(&dcols, &geo, spec, dst);
                }
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Precomputed bilinear interpolation stencil for one fractional position.
///
/// Neighbors outside the plane are dropped (they contribute zero).
#[derive(Debug, Clone, Copy)]
pub struct BilinearTap<T> {
    /// Flat indices of the (y0,x0), (y0,x1), (y1,x0), (y1,x1) neighbors.
    idx: [usize; 4],
    valid: [bool; 4],
    /// Interpolation weights in the same order.
    weights: [T; 4],
    ly: T,
    lx: T,
}

impl<T: Scalar> BilinearTap<T> {
    pub fn new(y: T, x: T, h: usize, w: usize) -> Self {
        let y0f = y.floor();
        let x0f = x.floor();
        let ly = y - y0f;
        let lx = x - x0f;
        let hy = T::one() - ly;
        let hx = T::one() - lx;
        let mut idx = [0usize; 4];
        let mut valid = [false; 4];
        // Guard the float→int conversion for wildly out-of-range coordinates.
        let limit = T::lit(1.0e9);
        if y0f.abs() < limit && x0f.abs() < limit {
            let y0 = y0f.to_i64().unwrap();
            let x0 = x0f.to_i64().unwrap();
            let corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
            for (i, &(cy, cx)) in corners.iter().enumerate() {
                if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
                    valid[i] = true;
                    idx[i] = cy as usize * w + cx as usize;
                }
            }
        }
        BilinearTap {
            idx,
            valid,
            weights: [hy * hx, hy * lx, ly * hx, ly * lx],
            ly,
            lx,
        }
    }

    #[inline]
    fn value(&self, plane: &[T], i: usize) -> T {
        if self.valid[i] {
            plane[self.idx[i]]
        } else {
            T::zero()
        }
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        self.weights[0] * self.value(plane, 0)
            + self.weights[1] * self.value(plane, 1)
            + self.weights[2] * self.value(plane, 2)
            + self.weights[3] * self.value(plane, 3)
    }

    /// Partial derivatives of [`Self::sample`] with respect to (y, x),
    /// taken inside the cell that contains the sampling point.
    #[inline]
    pub fn sample_grad(&self, plane: &[T]) -> (T, T) {
        let v00 = self.value(plane, 0);
        let v01 = self.value(plane, 1);
        let v10 = self.value(plane, 2);
        let v11 = self.value(plane, 3);
        let one = T::one();
        let dy = (one - self.lx) * (v10 - v00) + self.lx * (v11 - v01);
        let dx = (one - self.ly) * (v01 - v00) + self.ly * (v11 - v10);
        (dy, dx)
    }

    /// Distribute `g` onto the four neighbors with the interpolation weights.
    #[inline]
    pub fn scatter(&self, plane: &mut [T], g: T) {
        for i in 0..4 {
            if self.valid[i] {
                plane[self.idx[i]] += g * self.weights[i];
            }
        }
    }
}

/// Bilinear interpolation of an `h × w` plane at fractional `(y, x)`;
/// neighbors outside the plane read as zero.
pub fn bilinear_sample<T: Scalar>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    debug_assert_eq!(plane.len(), h * w);
    BilinearTap::new(y, x, h, w).sample(plane)
}

fn deform_geometry<T: Scalar>(
    x: &Tensor4<T>,
    offsets: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Geometry> {
    if spec.groups != 1 {
        return Err(TensorError::Config {
            op: "deform_conv2d",
            message: "grouped deformable convolution is not supported".into(),
        });
    }
    let geo = geometry("deform_conv2d", x, weight, bias, spec)?;
    let os = offsets.shape();
    ensure_dim("deform_conv2d", Axis::Channel, 2 * spec.taps(), os.c)?;
    ensure_dim("deform_conv2d", Axis::Batch, geo.n, os.n)?;
    ensure_dim("deform_conv2d", Axis::Height, geo.oh, os.h)?;
    ensure_dim("deform_conv2d", Axis::Width, geo.ow, os.w)?;
    Ok(geo)
}

/// Sampling stencils for every (tap, output pixel) of one batch item.
/// Offset channels are tap-major `(Δy, Δx)` pairs.
fn deform_taps<T: Scalar>(
    offsets: &Tensor4<T>,
    n: usize,
    geo: &Geometry,
    spec: &ConvSpec,
) -> Vec<BilinearTap<T>> {
    let (kh, kw) = spec.kernel;
    let p = geo.cols();
    let mut taps = Vec::with_capacity(kh * kw * p);
    for ky in 0..kh {
        for kx in 0..kw {
            let t = ky * kw + kx;
            let dys = offsets.plane(n, 2 * t);
            let dxs = offsets.plane(n, 2 * t + 1);
            for oy in 0..geo.oh {
                let by = (oy * spec.stride + ky * spec.dilation) as f64 - spec.padding as f64;
                for ox in 0..geo.ow {
                    let bx =
                        (ox * spec.stride + kx * spec.dilation) as f64 - spec.padding as f64;
                    let i = oy * geo.ow + ox;
                    taps.push(BilinearTap::new(
                        T::lit(by) + dys[i],
                        T::lit(bx) + dxs[i],
                        geo.h,
                        geo.w,
                    ));
                }
            }
        }
    }
    taps
}

fn deform_im2col<T: Scalar>(
    item: &[T],
    taps: &[BilinearTap<T>],
    geo: &Geometry,
    spec: &ConvSpec,
    cols: &mut [T],
) {
    let ntaps = spec.taps();
    let p = geo.cols();
    let plane_len = geo.h * geo.w;
    for ci in 0..geo.cin {
        let plane = &item[ci * plane_len..(ci + 1) * plane_len];
        for t in 0..ntaps {
            let row = ci * ntaps + t;
            let dst = &mut cols[row * p..(row + 1) * p];
            for (v, tap) in dst.iter_mut().zip(&taps[t * p..(t + 1) * p]) {
                *v = tap.sample(plane);
            }
        }
    }
}

/// Deformable convolution: tap `t` of output pixel `(oy, ox)` samples the
/// input bilinearly at its regular grid position displaced by
/// `(offsets[2t], offsets[2t+1])` at that pixel.
pub fn deform_conv2d<T: Scalar>(
    x: &Tensor4<T>,
    offsets: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let geo = deform_geometry(x, offsets, weight, bias, spec)?;
    let k = geo.rows(spec);
    let p = geo.cols();
    let mut out = Tensor4::zeros(geo.out_shape());
    let mut cols = vec![T::zero(); k * p];
    for n in 0..geo.n {
        let taps = deform_taps(offsets, n, &geo, spec);
        deform_im2col(x.item(n), &taps, &geo, spec, &mut cols);
        let dst = &mut out.data_mut()[n * geo.cout * p..(n + 1) * geo.cout * p];
        conv_gemm(geo.cout, k, p, weight.data(), &cols, bias, dst);
    }
    Ok(out)
}

pub(crate) struct DeformGrads<T> {
    pub dx: Option<Tensor4<T>>,
    pub doffsets: Option<Tensor4<T>>,
    pub dw: Tensor4<T>,
    pub db: Vec<T>,
}

pub(crate) fn deform_conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    offsets: &Tensor4<T>,
    weight: &Tensor4<T>,
    spec: &ConvSpec,
    grad_out: &Tensor4<T>,
    need_dx: bool,
    need_doffsets: bool,
) -> Result<DeformGrads<T>> {
    let geo = deform_geometry(x, offsets, weight, None, spec)?;
    let k = geo.rows(spec);
    let p = geo.cols();
    let ntaps = spec.taps();
    let plane_len = geo.h * geo.w;
    let mut dw = Tensor4::zeros(weight.shape());
    let mut db = vec![T::zero(); geo.cout];
    let mut dx = need_dx.then(|| Tensor4::zeros(x.shape()));
    let mut doff = need_doffsets.then(|| Tensor4::zeros(offsets.shape()));
    let mut cols = vec![T::zero(); k * p];
    let mut dcols = vec![T::zero(); k * p];

    for n in 0..geo.n {
        let taps = deform_taps(offsets, n, &geo, spec);
        let item = x.item(n);
        deform_im2col(item, &taps, &geo, spec, &mut cols);
        let dy = &grad_out.data()[n * geo.cout * p..(n + 1) * geo.cout * p];
        for (co, row) in dy.chunks_exact(p).enumerate() {
            db[co] += row.iter().fold(T::zero(), |a, &v| a + v);
        }
        T::gemm_nt(geo.cout, p, k, dy, &cols, dw.data_mut(), true);
        if dx.is_none() && doff.is_none() {
            continue;
        }
        T::gemm_tn(k, geo.cout, p, weight.data(), dy, &mut dcols, false);

        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[n * geo.cin * plane_len..(n + 1) * geo.cin * plane_len];
            for ci in 0..geo.cin {
                let plane = &mut dst[ci * plane_len..(ci + 1) * plane_len];
                for t in 0..ntaps {
                    let row = &dcols[(ci * ntaps + t) * p..(ci * ntaps + t + 1) * p];
                    for (tap, &g) in taps[t * p..(t + 1) * p].iter().zip(row) {
                        tap.scatter(plane, g);
                    }
                }
            }
        }
        if let Some(doff) = doff.as_mut() {
            for t in 0..ntaps {
                let mut gy = vec![T::zero(); p];
                let mut gx = vec![T::zero(); p];
                for ci in 0..geo.cin {
                    let plane = &item[ci * plane_len..(ci + 1) * plane_len];
                    let row = &dcols[(ci * ntaps + t) * p..(ci * ntaps + t + 1) * p];
                    for (i, tap) in taps[t * p..(t + 1) * p].iter().enumerate() {
                        let (sy, sx) = tap.sample_grad(plane);
                        gy[i] += row[i] * sy;
                        gx[i] += row[i] * sx;
                    }
                }
                doff.plane_mut(n, 2 * t).copy_from_slice(&gy);
                doff.plane_mut(n, 2 * t + 1).copy_from_slice(&gx);
            }
        }
    }
    Ok(DeformGrads {
        dx,
        doffsets: doff,
        dw,
        db,
    })
}
