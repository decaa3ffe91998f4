//! Naive reference implementations used as test oracles. Every function
//! here is a direct loop over the textbook definition, written without
//! reference to the library kernels.

#![allow(dead_code)]

pub mod compose;
pub mod grads;

use dcganet::nn::{AdffBlock, ConvLayer, DcgaBlock, DcgaWiring, DeformLayer, SvcBlock};
use dcganet::rng::Stream;
use dcganet::{ParamStore, Scalar, Shape, Tensor4};

pub fn random<T: Scalar>(rng: &mut Stream, shape: Shape, scale: f64) -> Tensor4<T> {
    Tensor4::from_fn(shape, |_, _, _, _| T::lit(scale * (2.0 * rng.uniform() - 1.0)))
}

/// Largest `|a − b| / max(|a|, |b|, 1)`.
pub fn max_rel<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}

pub fn bitwise_eq(a: &Tensor4<f64>, b: &Tensor4<f64>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[derive(Debug, Clone, Copy)]
pub struct Geom {
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub groups: usize,
}

fn out_len(len: usize, k: usize, g: Geom) -> usize {
    (len + 2 * g.pad - g.dil * (k - 1) - 1) / g.stride + 1
}

/// Direct convolution: for every output, sum over (input channel, ky, kx)
/// in that order starting from zero, then add the bias.
pub fn conv<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, b: Option<&[T]>, g: Geom) -> Tensor4<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (oh, ow) = (out_len(xs.h, ws.h, g), out_len(xs.w, ws.w, g));
    let cin_g = xs.c / g.groups;
    let cout_g = ws.n / g.groups;
    Tensor4::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, co, oy, ox| {
        let grp = co / cout_g;
        let mut acc = T::zero();
        for ci in 0..cin_g {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    let ix = (ox * g.stride + kx * g.dil) as isize - g.pad as isize;
                    let v = if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                        T::zero()
                    } else {
                        x.at(n, grp * cin_g + ci, iy as usize, ix as usize)
                    };
                    acc += w.at(co, ci, ky, kx) * v;
                }
            }
        }
        match b {
            Some(b) => acc + b[co],
            None => acc,
        }
    })
}

/// Bilinear interpolation from the four integer neighbours; neighbours
/// outside the plane read as zero.
pub fn bilinear<T: Scalar>(x: &Tensor4<T>, n: usize, c: usize, y: T, xq: T) -> T {
    let s = x.shape();
    let (y0, x0) = (y.floor(), xq.floor());
    let (ly, lx) = (y - y0, xq - x0);
    let px = |yy: T, xx: T| -> T {
        let (yi, xi) = (yy.as_f64() as i64, xx.as_f64() as i64);
        if yi < 0 || xi < 0 || yi >= s.h as i64 || xi >= s.w as i64 {
            T::zero()
        } else {
            x.at(n, c, yi as usize, xi as usize)
        }
    };
    let one = T::one();
    (one - ly) * (one - lx) * px(y0, x0)
        + (one - ly) * lx * px(y0, x0 + one)
        + ly * (one - lx) * px(y0 + one, x0)
        + ly * lx * px(y0 + one, x0 + one)
}

/// Deformable convolution; offset channel `2t` is Δy and `2t+1` is Δx of
/// kernel tap `t = ky·kw + kx`.
pub fn deform<T: Scalar>(x: &Tensor4<T>, off: &Tensor4<T>, w: &Tensor4<T>, b: Option<&[T]>, g: Geom) -> Tensor4<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (oh, ow) = (out_len(xs.h, ws.h, g), out_len(xs.w, ws.w, g));
    Tensor4::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, co, oy, ox| {
        let mut acc = T::zero();
        for ci in 0..xs.c {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let t = ky * ws.w + kx;
                    let by = (oy * g.stride + ky * g.dil) as f64 - g.pad as f64;
                    let bx = (ox * g.stride + kx * g.dil) as f64 - g.pad as f64;
                    let sy = T::lit(by) + off.at(n, 2 * t, oy, ox);
                    let sx = T::lit(bx) + off.at(n, 2 * t + 1, oy, ox);
                    acc += w.at(co, ci, ky, kx) * bilinear(x, n, ci, sy, sx);
                }
            }
        }
        match b {
            Some(b) => acc + b[co],
            None => acc,
        }
    })
}

pub fn max_pool2<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    Tensor4::from_fn(Shape::new(s.n, s.c, s.h / 2, s.w / 2), |n, c, y, xx| {
        let mut m = x.at(n, c, 2 * y, 2 * xx);
        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
            m = m.max(x.at(n, c, 2 * y + dy, 2 * xx + dx));
        }
        m
    })
}

/// Channel shuffle: view channels as `groups × (c/groups)`, transpose, flatten.
pub fn shuffle<T: Scalar>(x: &Tensor4<T>, groups: usize) -> Tensor4<T> {
    let s = x.shape();
    let per = s.c / groups;
    Tensor4::from_fn(s, |n, c, y, xx| {
        let (k, g) = (c / groups, c % groups);
        x.at(n, g * per + k, y, xx)
    })
}

pub fn gap<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    Tensor4::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
        let mut acc = T::zero();
        for y in 0..s.h {
            for xx in 0..s.w {
                acc += x.at(n, c, y, xx);
            }
        }
        acc / T::lit((s.h * s.w) as f64)
    })
}

pub fn gmp<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    Tensor4::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
        let mut m = T::neg_infinity();
        for y in 0..s.h {
            for xx in 0..s.w {
                m = m.max(x.at(n, c, y, xx));
            }
        }
        m
    })
}

pub fn channel_mean<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    Tensor4::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, xx| {
        let mut acc = T::zero();
        for c in 0..s.c {
            acc += x.at(n, c, y, xx);
        }
        acc / T::lit(s.c as f64)
    })
}

pub fn channel_max<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    Tensor4::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, xx| {
        let mut m = T::neg_infinity();
        for c in 0..s.c {
            m = m.max(x.at(n, c, y, xx));
        }
        m
    })
}

pub fn upsample<T: Scalar>(x: &Tensor4<T>, f: usize) -> Tensor4<T> {
    let s = x.shape();
    Tensor4::from_fn(Shape::new(s.n, s.c, s.h * f, s.w * f), |n, c, y, xx| x.at(n, c, y / f, xx / f))
}

/// Elementwise op with size-1 axes of either operand broadcast.
pub fn broadcast<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, f: impl Fn(T, T) -> T) -> Tensor4<T> {
    let (sa, sb) = (a.shape(), b.shape());
    let pick = |x: usize, y: usize| x.max(y);
    let shape = Shape::new(pick(sa.n, sb.n), pick(sa.c, sb.c), pick(sa.h, sb.h), pick(sa.w, sb.w));
    let at = |t: &Tensor4<T>, n: usize, c: usize, y: usize, x: usize| {
        let s = t.shape();
        t.at(n % s.n, c % s.c, y % s.h, x % s.w)
    };
    Tensor4::from_fn(shape, |n, c, y, x| f(at(a, n, c, y, x), at(b, n, c, y, x)))
}

pub fn concat<T: Scalar>(xs: &[&Tensor4<T>]) -> Tensor4<T> {
    let s0 = xs[0].shape();
    let c: usize = xs.iter().map(|x| x.shape().c).sum();
    Tensor4::from_fn(Shape::new(s0.n, c, s0.h, s0.w), |n, ch, y, x| {
        let mut ch = ch;
        for t in xs {
            if ch < t.shape().c {
                return t.at(n, ch, y, x);
            }
            ch -= t.shape().c;
        }
        unreachable!()
    })
}

pub fn map<T: Scalar>(x: &Tensor4<T>, f: impl Fn(T) -> T) -> Tensor4<T> {
    Tensor4::from_fn(x.shape(), |n, c, y, xx| f(x.at(n, c, y, xx)))
}

pub fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    map(x, |v| T::one() / (T::one() + (-v).exp()))
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    map(x, |v| v.max(T::zero()))
}

/// A library conv layer evaluated with the naive oracle and its stored
/// parameters.
pub fn layer<T: Scalar>(p: &ParamStore<T>, l: &ConvLayer, x: &Tensor4<T>) -> Tensor4<T> {
    let s = l.spec;
    let g = Geom {
        stride: s.stride,
        pad: s.padding,
        dil: s.dilation,
        groups: s.groups,
    };
    conv(x, p.get(l.weight), Some(p.get(l.bias).data()), g)
}

pub fn deform_layer<T: Scalar>(p: &ParamStore<T>, l: &DeformLayer, x: &Tensor4<T>) -> Tensor4<T> {
    let off = layer(p, &l.offsets, x);
    let s = l.spec;
    let g = Geom {
        stride: s.stride,
        pad: s.padding,
        dil: s.dilation,
        groups: 1,
    };
    deform(x, &off, p.get(l.weight), Some(p.get(l.bias).data()), g)
}

/// SVC: concat(standard, deformable, Σ dilated) then 1×1 fuse.
pub fn svc<T: Scalar>(p: &ParamStore<T>, b: &SvcBlock, x: &Tensor4<T>) -> Tensor4<T> {
    let mut outs = vec![layer(p, &b.standard, x)];
    if let Some(d) = &b.deform {
        outs.push(deform_layer(p, d, x));
    }
    if let Some(ds) = &b.dilated {
        let a = layer(p, &ds[0], x);
        let bb = layer(p, &ds[1], x);
        let c = layer(p, &ds[2], x);
        let ab = broadcast(&a, &bb, |u, v| u + v);
        outs.push(broadcast(&ab, &c, |u, v| u + v));
    }
    let refs: Vec<&Tensor4<T>> = outs.iter().collect();
    layer(p, &b.fuse, &concat(&refs))
}

/// DCGA: W = σ(GC7(shuffle(concat(X, Wc ⊕ Ws)))), Y = X ⊙ W (+ X).
pub fn dcga<T: Scalar>(p: &ParamStore<T>, b: &DcgaBlock, x: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
    let wc = layer(p, &b.excite, &relu(&layer(p, &b.squeeze, &gap(x))));
    let sa_in = match b.wiring {
        DcgaWiring::Cascaded => broadcast(x, &sigmoid(&wc), |u, v| u * v),
        _ => x.clone(),
    };
    let ws = layer(p, &b.spatial, &concat(&[&channel_mean(&sa_in), &channel_max(&sa_in)]));
    let coarse = broadcast(&wc, &ws, |u, v| u + v);
    let logits = match (&b.refine, b.wiring) {
        (None, _) => coarse,
        (Some(r), DcgaWiring::NoShuffle) => layer(p, r, &concat(&[x, &coarse])),
        (Some(r), _) => layer(p, r, &shuffle(&concat(&[x, &coarse]), 2)),
    };
    let w = sigmoid(&logits);
    let gated = broadcast(x, &w, |u, v| u * v);
    let y = if b.residual { broadcast(&gated, x, |u, v| u + v) } else { gated };
    (y, w)
}

/// ADFF: AD = σ(conv(concat(mean, max) of concat(enc, dec))),
/// out = enc ⊙ AD + dec ⊙ AD.
pub fn adff<T: Scalar>(p: &ParamStore<T>, b: &AdffBlock, enc: &Tensor4<T>, dec: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
    let cat = concat(&[enc, dec]);
    let ad = sigmoid(&layer(p, &b.conv, &concat(&[&channel_mean(&cat), &channel_max(&cat)])));
    let a = broadcast(enc, &ad, |u, v| u * v);
    let d = broadcast(dec, &ad, |u, v| u * v);
    (broadcast(&a, &d, |u, v| u + v), ad)
}

/// Pixel tallies `(tp, fp, fn, tn)` by direct counting.
pub fn tally(pred: &[u8], gt: &[u8]) -> (u64, u64, u64, u64) {
    let mut t = (0, 0, 0, 0);
    for i in 0..pred.len() {
        match (pred[i] == 1, gt[i] == 1) {
            (true, true) => t.0 += 1,
            (true, false) => t.1 += 1,
            (false, true) => t.2 += 1,
            (false, false) => t.3 += 1,
        }
    }
    t
}

pub fn random_mask(rng: &mut Stream, len: usize, density: f64) -> Vec<u8> {
    (0..len).map(|_| (rng.uniform() < density) as u8).collect()
}

/// A random convolution problem: input, weight, bias and geometry.
pub struct ConvCase<T: Scalar> {
    pub x: Tensor4<T>,
    pub w: Tensor4<T>,
    pub b: Vec<T>,
    pub g: Geom,
}

impl<T: Scalar> ConvCase<T> {
    pub fn spec(&self) -> dcganet::ConvSpec {
        let s = self.w.shape();
        dcganet::ConvSpec::new(s.h, s.w)
            .with_stride(self.g.stride)
            .with_padding(self.g.pad)
            .with_dilation(self.g.dil)
            .with_groups(self.g.groups)
    }
}

/// Draws a convolution with random batch, groups, kernel, stride, padding
/// and dilation whose output is non-empty.
pub fn conv_case<T: Scalar>(rng: &mut Stream, allow_groups: bool) -> ConvCase<T> {
    loop {
        let groups = if allow_groups { rng.int_in(1, 3) } else { 1 };
        let cin = groups * rng.int_in(1, 3);
        let cout = groups * rng.int_in(1, 3);
        let kh = [1, 2, 3, 5][rng.below(4)];
        let kw = [1, 2, 3, 5][rng.below(4)];
        let g = Geom {
            stride: rng.int_in(1, 2),
            pad: rng.int_in(0, 3),
            dil: rng.int_in(1, 3),
            groups,
        };
        let (h, w) = (rng.int_in(3, 10), rng.int_in(3, 10));
        if h + 2 * g.pad < g.dil * (kh - 1) + 1 || w + 2 * g.pad < g.dil * (kw - 1) + 1 {
            continue;
        }
        let n = rng.int_in(1, 2);
        return ConvCase {
            x: random(rng, Shape::new(n, cin, h, w), 1.0),
            w: random(rng, Shape::new(cout, cin / groups, kh, kw), 1.0),
            b: (0..cout).map(|_| T::lit(rng.range(-1.0, 1.0))).collect(),
            g,
        };
    }
}

/// Offsets for a deformable case, each within `±span` pixels.
pub fn offsets_for<T: Scalar>(rng: &mut Stream, case: &ConvCase<T>, span: f64) -> Tensor4<T> {
    let s = case.w.shape();
    let xs = case.x.shape();
    let oh = out_len(xs.h, s.h, case.g);
    let ow = out_len(xs.w, s.w, case.g);
    random(rng, Shape::new(xs.n, 2 * s.h * s.w, oh, ow), span)
}

/// A random evaluation batch: probability maps, masks and their sizes.
pub struct EvalCase {
    pub probs: Vec<Vec<f64>>,
    pub gts: Vec<Vec<u8>>,
    pub sizes: Vec<(usize, usize)>,
}

impl EvalCase {
    pub fn random(rng: &mut Stream) -> Self {
        let images = rng.int_in(1, 4);
        let mut case = EvalCase {
            probs: Vec::new(),
            gts: Vec::new(),
            sizes: Vec::new(),
        };
        for _ in 0..images {
            let (h, w) = (rng.int_in(1, 12), rng.int_in(1, 12));
            // Densities include 0 so empty masks and empty predictions occur.
            let density = [0.0, 0.02, 0.1, 0.5][rng.below(4)];
            case.gts.push(random_mask(rng, h * w, density));
            // Quantized probabilities so thresholds land exactly on values.
            case.probs.push((0..h * w).map(|_| rng.below(11) as f64 / 10.0).collect());
            case.sizes.push((h, w));
        }
        case
    }

    pub fn maps(&self) -> Vec<(&[f64], &[u8], usize, usize)> {
        (0..self.probs.len())
            .map(|i| (self.probs[i].as_slice(), self.gts[i].as_slice(), self.sizes[i].0, self.sizes[i].1))
            .collect()
    }
}

/// Pixel-level metrics recomputed from scratch: `(iou, niou, pd, fa, tallies)`.
pub fn brute_metrics(case: &EvalCase, threshold: f64) -> (f64, f64, f64, f64, (u64, u64, u64, u64)) {
    let mut sum = (0, 0, 0, 0);
    let mut ious = Vec::new();
    for (p, g) in case.probs.iter().zip(&case.gts) {
        let pred: Vec<u8> = p.iter().map(|&v| (v >= threshold) as u8).collect();
        let t = tally(&pred, g);
        sum = (sum.0 + t.0, sum.1 + t.1, sum.2 + t.2, sum.3 + t.3);
        if t.0 + t.2 > 0 {
            ious.push(t.0 as f64 / (t.0 + t.1 + t.2) as f64);
        }
    }
    let (tp, fp, fn_, tn) = sum;
    let union = tp + fp + fn_;
    let iou = if union == 0 { 1.0 } else { tp as f64 / union as f64 };
    let niou = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
    let pd = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let fa = fp as f64 / (tp + fp + fn_ + tn) as f64;
    (iou, niou, pd, fa, sum)
}

/// Compare `metrics::evaluate` against the brute-force tally; `Err` names
/// the first disagreeing quantity.
pub fn check_metrics(case: &EvalCase, threshold: f64) -> Result<(), String> {
    let r = dcganet::metrics::evaluate(&case.maps(), threshold, false).map_err(|e| e.to_string())?;
    let (iou, niou, pd, fa, (tp, fp, fn_, tn)) = brute_metrics(case, threshold);
    let c = r.counts;
    if (c.tp, c.fp, c.fn_, c.tn) != (tp, fp, fn_, tn) {
        return Err(format!("counts {c:?} vs {:?}", (tp, fp, fn_, tn)));
    }
    for (name, got, want) in [("iou", r.iou, iou), ("niou", r.niou, niou), ("pd", r.pd, pd), ("fa", r.fa, fa)] {
        if got.to_bits() != want.to_bits() {
            return Err(format!("{name} {got} vs {want}"));
        }
    }
    Ok(())
}

/// ROC points along descending thresholds must have non-decreasing Pd and
/// Fa, and match the brute-force tally at each threshold.
pub fn check_roc(case: &EvalCase, thresholds: &[f64]) -> Result<(), String> {
    let maps: Vec<&[f64]> = case.probs.iter().map(|p| p.as_slice()).collect();
    let gts: Vec<&[u8]> = case.gts.iter().map(|g| g.as_slice()).collect();
    let points = dcganet::metrics::roc_sweep(&maps, &gts, thresholds).map_err(|e| e.to_string())?;
    for w in points.windows(2) {
        if w[1].pd < w[0].pd || w[1].fa < w[0].fa {
            return Err(format!("not monotone: {:?} then {:?}", w[0], w[1]));
        }
    }
    for p in &points {
        let (_, _, pd, fa, _) = brute_metrics(case, p.threshold);
        if p.pd != pd || p.fa != fa {
            return Err(format!("{p:?} vs pd {pd} fa {fa}"));
        }
    }
    Ok(())
}
