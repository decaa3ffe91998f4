use super::{ensure_dim, Axis, Result, Scalar, Shape, Tensor4, TensorError};

/// Flat input index chosen by a max reduction, one per output element.
pub(crate) type Argmax = Vec<usize>;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor4<T>, b: &Tensor4<T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    for axis in Axis::ALL {
        ensure_dim(op, axis, sa.dim(axis), sb.dim(axis))?;
    }
    Ok(())
}

fn zip_map<T: Scalar>(
    op: &'static str,
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor4<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor4::from_vec(a.shape(), data)
}

pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    zip_map("add", a, b, |x, y| x + y)
}

pub fn mul<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    zip_map("mul", a, b, |x, y| x * y)
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(t: T) -> T {
    // Split on sign so exp never overflows.
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

/// Result shape of broadcasting `a` against `b`: every axis must match or be 1.
pub fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0usize; 4];
    for axis in Axis::ALL {
        let (x, y) = (a.dim(axis), b.dim(axis));
        out[axis as usize] = if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            return Err(TensorError::Broadcast {
                op,
                axis,
                lhs: a,
                rhs: b,
            });
        };
    }
    Ok(Shape::new(out[0], out[1], out[2], out[3]))
}

fn strides_for(src: Shape, out: Shape) -> [usize; 4] {
    let dense = [src.c * src.h * src.w, src.h * src.w, src.w, 1];
    let mut s = [0usize; 4];
    for axis in Axis::ALL {
        let i = axis as usize;
        s[i] = if src.dim(axis) == out.dim(axis) { dense[i] } else { 0 };
    }
    s
}

fn broadcast_zip<T: Scalar>(
    op: &'static str,
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor4<T>> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        return zip_map(op, a, b, f);
    }
    let sa = strides_for(a.shape(), out_shape);
    let sb = strides_for(b.shape(), out_shape);
    let mut data = Vec::with_capacity(out_shape.numel());
    let (ad, bd) = (a.data(), b.data());
    for n in 0..out_shape.n {
        for c in 0..out_shape.c {
            for y in 0..out_shape.h {
                let ra = n * sa[0] + c * sa[1] + y * sa[2];
                let rb = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out_shape.w {
                    data.push(f(ad[ra + x * sa[3]], bd[rb + x * sb[3]]));
                }
            }
        }
    }
    Tensor4::from_vec(out_shape, data)
}

/// Elementwise sum with broadcasting over axes of extent 1
/// (e.g. `n×c×1×1 ⊕ n×1×h×w → n×c×h×w`).
pub fn broadcast_add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    broadcast_zip("broadcast_add", a, b, |x, y| x + y)
}

/// Elementwise product with the same broadcasting rule as [`broadcast_add`].
pub fn broadcast_mul<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    broadcast_zip("broadcast_mul", a, b, |x, y| x * y)
}

/// Sum `grad` over the axes along which `target` was broadcast.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &Tensor4<T>, target: Shape) -> Tensor4<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let gs = grad.shape();
    let st = strides_for(target, gs);
    let mut out = Tensor4::zeros(target);
    let od = out.data_mut();
    let gd = grad.data();
    let mut i = 0;
    for n in 0..gs.n {
        for c in 0..gs.c {
            for y in 0..gs.h {
                let r = n * st[0] + c * st[1] + y * st[2];
                for x in 0..gs.w {
                    od[r + x * st[3]] += gd[i];
                    i += 1;
                }
            }
        }
    }
    out
}

/// Stack tensors along the channel axis, preserving source order.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = xs.first().ok_or(TensorError::Config {
        op: "concat_channels",
        message: "no inputs".into(),
    })?;
    let base = first.shape();
    let mut c_total = 0;
    for x in xs {
        let s = x.shape();
        ensure_dim("concat_channels", Axis::Batch, base.n, s.n)?;
        ensure_dim("concat_channels", Axis::Height, base.h, s.h)?;
        ensure_dim("concat_channels", Axis::Width, base.w, s.w)?;
        c_total += s.c;
    }
    let shape = Shape::new(base.n, c_total, base.h, base.w);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..base.n {
        for x in xs {
            data.extend_from_slice(x.item(n));
        }
    }
    Tensor4::from_vec(shape, data)
}

/// Inverse of [`concat_channels`]: cut `x` into consecutive channel blocks.
pub fn split_channels<T: Scalar>(x: &Tensor4<T>, sizes: &[usize]) -> Result<Vec<Tensor4<T>>> {
    let s = x.shape();
    ensure_dim("split_channels", Axis::Channel, s.c, sizes.iter().sum())?;
    let plane = s.plane();
    let mut parts: Vec<Vec<T>> = sizes.iter().map(|&c| Vec::with_capacity(s.n * c * plane)).collect();
    for n in 0..s.n {
        let item = x.item(n);
        let mut start = 0;
        for (part, &c) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&item[start * plane..(start + c) * plane]);
            start += c;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(data, &c)| Tensor4::from_vec(Shape::new(s.n, c, s.h, s.w), data))
        .collect()
}

/// `perm[i]` is the source channel of output channel `i` when `c` channels
/// viewed as `(groups, c/groups)` are transposed to `(c/groups, groups)`.
pub fn shuffle_permutation(c: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(TensorError::Config {
            op: "channel_shuffle",
            message: format!("{c} channels not divisible into {groups} groups"),
        });
    }
    let per = c / groups;
    Ok((0..c).map(|i| (i % groups) * per + i / groups).collect())
}

pub fn channel_shuffle<T: Scalar>(x: &Tensor4<T>, groups: usize) -> Result<Tensor4<T>> {
    let s = x.shape();
    let perm = shuffle_permutation(s.c, groups)?;
    Ok(permute_channels(x, &perm))
}

/// Output channel `i` takes source channel `perm[i]`.
pub(crate) fn permute_channels<T: Scalar>(x: &Tensor4<T>, perm: &[usize]) -> Tensor4<T> {
    let s = x.shape();
    let mut data = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for &src in perm {
            data.extend_from_slice(x.plane(n, src));
        }
    }
    Tensor4::from_vec(s, data).expect("permutation keeps shape")
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let count = T::lit(s.plane() as f64);
    Tensor4::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
        x.plane(n, c).iter().fold(T::zero(), |a, &v| a + v) / count
    })
}

pub(crate) fn global_max_pool_arg<T: Scalar>(x: &Tensor4<T>) -> (Tensor4<T>, Argmax) {
    let s = x.shape();
    let plane = s.plane();
    let mut arg = Vec::with_capacity(s.n * s.c);
    let mut vals = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let (i, v) = first_max(x.plane(n, c));
            arg.push(base + i);
            vals.push(v);
        }
    }
    let out = Tensor4::from_vec(Shape::new(s.n, s.c, 1, 1), vals).expect("pool shape");
    (out, arg)
}

pub fn global_max_pool<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    global_max_pool_arg(x).0
}

/// Index and value of the first maximum in scan order.
fn first_max<T: Scalar>(xs: &[T]) -> (usize, T) {
    let mut best = (0, xs[0]);
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Per-pixel mean across channels: `n×c×h×w → n×1×h×w`.
pub fn channel_mean_map<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let plane = s.plane();
    let count = T::lit(s.c as f64);
    let mut out = Tensor4::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        let dst = out.plane_mut(n, 0);
        for c in 0..s.c {
            for (d, &v) in dst.iter_mut().zip(x.plane(n, c)) {
                *d += v;
            }
        }
        for d in dst.iter_mut().take(plane) {
            *d = *d / count;
        }
    }
    out
}

pub(crate) fn channel_max_map_arg<T: Scalar>(x: &Tensor4<T>) -> (Tensor4<T>, Argmax) {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Tensor4::zeros(Shape::new(s.n, 1, s.h, s.w));
    let mut arg = vec![0usize; s.n * plane];
    for n in 0..s.n {
        let dst = out.plane_mut(n, 0);
        dst.copy_from_slice(x.plane(n, 0));
        let args = &mut arg[n * plane..(n + 1) * plane];
        for (i, a) in args.iter_mut().enumerate() {
            *a = n * s.c * plane + i;
        }
        for c in 1..s.c {
            let src = x.plane(n, c);
            for i in 0..plane {
                if src[i] > dst[i] {
                    dst[i] = src[i];
                    args[i] = (n * s.c + c) * plane + i;
                }
            }
        }
    }
    (out, arg)
}

/// Per-pixel maximum across channels: `n×c×h×w → n×1×h×w`.
pub fn channel_max_map<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    channel_max_map_arg(x).0
}

pub(crate) fn max_pool2x2_arg<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Argmax)> {
    let s = x.shape();
    for (axis, len) in [(Axis::Height, s.h), (Axis::Width, s.w)] {
        if len % 2 != 0 {
            return Err(TensorError::Config {
                op: "max_pool2x2",
                message: format!("{axis} extent {len} is odd"),
            });
        }
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let shape = Shape::new(s.n, s.c, oh, ow);
    let mut vals = Vec::with_capacity(shape.numel());
    let mut arg = Vec::with_capacity(shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            let plane = x.plane(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_i = 2 * oy * s.w + 2 * ox;
                    let mut best = plane[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * oy + dy) * s.w + 2 * ox + dx;
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                    vals.push(best);
                    arg.push(base + best_i);
                }
            }
        }
    }
    Ok((Tensor4::from_vec(shape, vals)?, arg))
}

/// 2×2 max pooling with stride 2; ties resolve to the first element in scan order.
pub fn max_pool2x2<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    Ok(max_pool2x2_arg(x)?.0)
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor4<T>, factor: usize) -> Tensor4<T> {
    let s = x.shape();
    let shape = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    Tensor4::from_fn(shape, |n, c, y, xx| x.at(n, c, y / factor, xx / factor))
}

pub fn upsample_nearest2x<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    upsample_nearest(x, 2)
}

/// Adjoint of [`upsample_nearest`]: sum each `factor × factor` block.
pub(crate) fn upsample_nearest_backward<T: Scalar>(
    grad: &Tensor4<T>,
    input: Shape,
    factor: usize,
) -> Tensor4<T> {
    let mut out = Tensor4::zeros(input);
    let gs = grad.shape();
    for n in 0..gs.n {
        for c in 0..gs.c {
            let src = grad.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..gs.h {
                for x in 0..gs.w {
                    dst[(y / factor) * input.w + x / factor] += src[y * gs.w + x];
                }
            }
        }
    }
    out
}
