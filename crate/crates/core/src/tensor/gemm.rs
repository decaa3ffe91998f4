use super::{DType, Scalar};

/// Forward convolution product `out = a · b (+ bias)`.
///
/// 64-bit runs use [`gemm_ordered`] so results match direct summation
/// bitwise; 32-bit runs use the faster blocked FMA kernels.
pub(crate) fn conv_gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    match T::DTYPE {
        DType::F64 => gemm_ordered(m, k, n, a, b, bias, out),
        DType::F32 => {
            T::gemm_nn(m, k, n, a, b, out, false);
            if let Some(bias) = bias {
                for (row, &bv) in out.chunks_exact_mut(n).zip(bias) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[k×n] (+ bias[m])`, row-major.
///
/// Every output element accumulates its `k` products in ascending `k` order
/// starting from zero and adds the bias last, which is exactly the order a
/// direct-summation convolution loop uses. Forward convolutions rely on this
/// to agree bitwise with the naive reference kernels. Products and sums are
/// rounded separately (no fused multiply-add).
pub(crate) fn gemm_ordered<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    match T::DTYPE {
        DType::F32 => dispatch::<T, 4, 16>(m, k, n, a, b, bias, out),
        DType::F64 => dispatch::<T, 4, 8>(m, k, n, a, b, bias, out),
    }
}

fn dispatch<T: Scalar, const MR: usize, const NR: usize>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { gemm_avx2::<T, MR, NR>(m, k, n, a, b, bias, out) };
        return;
    }
    gemm_blocked::<T, MR, NR>(m, k, n, a, b, bias, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<T: Scalar, const MR: usize, const NR: usize>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    gemm_blocked::<T, MR, NR>(m, k, n, a, b, bias, out);
}

#[inline(always)]
fn gemm_blocked<T: Scalar, const MR: usize, const NR: usize>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    // Pack `a` into MR-row panels, k-major inside a panel; missing rows are zero.
    let panels = m.div_ceil(MR);
    let mut packed_a = vec![T::zero(); panels * k * MR];
    for p in 0..panels {
        for r in 0..MR.min(m - p * MR) {
            let row = &a[(p * MR + r) * k..(p * MR + r + 1) * k];
            for (kk, &v) in row.iter().enumerate() {
                packed_a[(p * k + kk) * MR + r] = v;
            }
        }
    }
    let mut strip = vec![T::zero(); k * NR];

    let mut jb = 0;
    while jb < n {
        let nr = NR.min(n - jb);
        // Pack the next NR columns of `b`, k-major; missing columns are zero.
        for kk in 0..k {
            let dst = &mut strip[kk * NR..kk * NR + NR];
            dst[..nr].copy_from_slice(&b[kk * n + jb..kk * n + jb + nr]);
            dst[nr..].fill(T::zero());
        }
        for p in 0..panels {
            let panel = &packed_a[p * k * MR..(p + 1) * k * MR];
            let mut acc = [[T::zero(); NR]; MR];
            for (av, bv) in panel.chunks_exact(MR).zip(strip.chunks_exact(NR)) {
                for r in 0..MR {
                    let ar = av[r];
                    for c in 0..NR {
                        acc[r][c] += ar * bv[c];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate().take(MR.min(m - p * MR)) {
                let row = p * MR + r;
                let dst = &mut out[row * n + jb..row * n + jb + nr];
                match bias {
                    Some(bs) => {
                        for c in 0..nr {
                            dst[c] = acc_r[c] + bs[row];
                        }
                    }
                    None => dst.copy_from_slice(&acc_r[..nr]),
                }
            }
        }
        jb += NR;
    }
}

/// `dst[i] += a · src[i]`, with the product rounded before the sum.
pub(crate) fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { axpy_avx2(dst, src, a) };
        return;
    }
    axpy_plain(dst, src, a);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_avx2<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    axpy_plain(dst, src, a);
}

#[inline(always)]
fn axpy_plain<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with eight interleaved partial sums.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { dot_avx2(a, b) };
    }
    dot_plain(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2<T: Scalar>(a: &[T], b: &[T]) -> T {
    dot_plain(a, b)
}

#[inline(always)]
fn dot_plain<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut lanes = [T::zero(); 8];
    let (ac, bc) = (a[..n].chunks_exact(8), b[..n].chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut total = lanes.iter().fold(T::zero(), |acc, &v| acc + v);
    for (&x, &y) in ar.iter().zip(br) {
        total += x * y;
    }
    total
}
