//! Raw numeric kernels over flat row-major slices.
//!
//! These are the shared inner loops behind both the public array ops and the
//! autodiff graph. Everything is single-threaded and accumulation order is
//! fixed, so results are bit-reproducible for a given dtype and platform.

use super::Scalar;

/// C[m,n] = A[m,k] * B[k,n], accumulating when `acc`.
pub(crate) fn gemm_nn<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
    acc: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !acc {
        out.fill(T::zero());
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bp) in orow.iter_mut().zip(brow) {
                *o += aip * bp;
            }
        }
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T.
pub(crate) fn gemm_nt<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
    acc: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            let slot = &mut out[i * n + j];
            *slot = if acc { *slot + s } else { s };
        }
    }
}

/// C[k,n] = A[m,k]^T * B[m,n].
pub(crate) fn gemm_tn<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
    acc: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if !acc {
        out.fill(T::zero());
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Numerically stable softplus: `max(x,0) + ln(1 + e^{-|x|})`.
pub(crate) fn softplus_scalar<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // exp of a non-positive argument in both branches
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Depthwise causal 1-D convolution.
/// `out[t,d] = sum_w kernel[d,w] * x[t-W+1+w, d]`, zero-padded on the left.
pub(crate) fn conv1d_causal<T: Scalar>(
    x: &[T],
    kernel: &[T],
    l: usize,
    d: usize,
    w: usize,
    out: &mut [T],
) {
    debug_assert_eq!(x.len(), l * d);
    debug_assert_eq!(kernel.len(), d * w);
    debug_assert_eq!(out.len(), l * d);
    out.fill(T::zero());
    for t in 0..l {
        let orow = &mut out[t * d..(t + 1) * d];
        for wi in 0..w {
            let src = t as isize - (w as isize - 1) + wi as isize;
            if src < 0 {
                continue;
            }
            let xrow = &x[src as usize * d..(src as usize + 1) * d];
            for di in 0..d {
                orow[di] += kernel[di * w + wi] * xrow[di];
            }
        }
    }
}

/// Backward of [`conv1d_causal`] w.r.t. the input.
pub(crate) fn conv1d_causal_grad_x<T: Scalar>(
    dy: &[T],
    kernel: &[T],
    l: usize,
    d: usize,
    w: usize,
    dx: &mut [T],
) {
    debug_assert_eq!(dx.len(), l * d);
    for s in 0..l {
        let drow = &mut dx[s * d..(s + 1) * d];
        for wi in 0..w {
            // out position that read x[s] with kernel tap wi
            let t = s as isize + (w as isize - 1) - wi as isize;
            if t < 0 || t >= l as isize {
                continue;
            }
            let dyrow = &dy[t as usize * d..(t as usize + 1) * d];
            for di in 0..d {
                drow[di] += kernel[di * w + wi] * dyrow[di];
            }
        }
    }
}

/// Backward of [`conv1d_causal`] w.r.t. the kernel.
pub(crate) fn conv1d_causal_grad_k<T: Scalar>(
    dy: &[T],
    x: &[T],
    l: usize,
    d: usize,
    w: usize,
    dk: &mut [T],
) {
    debug_assert_eq!(dk.len(), d * w);
    for t in 0..l {
        let dyrow = &dy[t * d..(t + 1) * d];
        for wi in 0..w {
            let src = t as isize - (w as isize - 1) + wi as isize;
            if src < 0 {
                continue;
            }
            let xrow = &x[src as usize * d..(src as usize + 1) * d];
            for di in 0..d {
                dk[di * w + wi] += dyrow[di] * xrow[di];
            }
        }
    }
}

/// Sequential inclusive scan of the recurrence `h[t] = a[t] ⊙ h[t-1] + b[t]`
/// over `lanes` independent lanes; `h` receives all states.
pub(crate) fn scan_recurrent_lanes<T: Scalar>(a: &[T], b: &[T], l: usize, lanes: usize, h: &mut [T]) {
    debug_assert_eq!(a.len(), l * lanes);
    debug_assert_eq!(b.len(), l * lanes);
    debug_assert_eq!(h.len(), l * lanes);
    if l == 0 {
        return;
    }
    h[..lanes].copy_from_slice(&b[..lanes]);
    for t in 1..l {
        let (prev, cur) = h.split_at_mut(t * lanes);
        let prev = &prev[(t - 1) * lanes..];
        let cur = &mut cur[..lanes];
        let arow = &a[t * lanes..(t + 1) * lanes];
        let brow = &b[t * lanes..(t + 1) * lanes];
        for i in 0..lanes {
            cur[i] = arow[i] * prev[i] + brow[i];
        }
    }
}

/// Work-efficient (Blelloch) inclusive scan of the same recurrence.
///
/// Pairs `(a, b)` represent the affine map `h ↦ a·h + b`; the associative
/// combine of an earlier map `(a1,b1)` followed by a later map `(a2,b2)` is
/// `(a2·a1, a2·b1 + b2)` with identity `(1, 0)`. The up-/down-sweep tree does
/// O(L) combines with O(log L) depth. Results match [`scan_recurrent_lanes`]
/// up to dtype roundoff.
pub(crate) fn scan_blelloch_lanes<T: Scalar>(a: &[T], b: &[T], l: usize, lanes: usize, h: &mut [T]) {
    debug_assert_eq!(a.len(), l * lanes);
    debug_assert_eq!(b.len(), l * lanes);
    debug_assert_eq!(h.len(), l * lanes);
    if l == 0 {
        return;
    }
    if l == 1 {
        h.copy_from_slice(b);
        return;
    }
    let size = l.next_power_of_two();
    // scratch tree, padded with the identity (1, 0)
    let mut ta = vec![T::one(); size * lanes];
    let mut tb = vec![T::zero(); size * lanes];
    ta[..l * lanes].copy_from_slice(a);
    tb[..l * lanes].copy_from_slice(b);

    // up-sweep: tree[right] = combine(earlier=tree[left], later=tree[right])
    let mut d = 1;
    while d < size {
        let mut i = 0;
        while i + 2 * d <= size {
            let left = (i + d - 1) * lanes;
            let right = (i + 2 * d - 1) * lanes;
            for q in 0..lanes {
                let (la, lb) = (ta[left + q], tb[left + q]);
                let (ra, rb) = (ta[right + q], tb[right + q]);
                ta[right + q] = ra * la;
                tb[right + q] = ra * lb + rb;
            }
            i += 2 * d;
        }
        d <<= 1;
    }

    // down-sweep: propagate exclusive prefixes
    let root = (size - 1) * lanes;
    for q in 0..lanes {
        ta[root + q] = T::one();
        tb[root + q] = T::zero();
    }
    let mut d = size >> 1;
    while d >= 1 {
        let mut i = 0;
        while i + 2 * d <= size {
            let left = (i + d - 1) * lanes;
            let right = (i + 2 * d - 1) * lanes;
            for q in 0..lanes {
                let (pa, pb) = (ta[right + q], tb[right + q]); // segment-start prefix
                let (la, lb) = (ta[left + q], tb[left + q]); // left-subtree total
                ta[left + q] = pa;
                tb[left + q] = pb;
                // prefix for right child = combine(earlier=prefix, later=left total)
                ta[right + q] = la * pa;
                tb[right + q] = la * pb + lb;
            }
            i += 2 * d;
        }
        d >>= 1;
    }

    // inclusive[t] = combine(exclusive[t], element[t]); h starts at zero so
    // only the offset part survives: h[t] = a[t]·b_excl[t] + b[t].
    for t in 0..l {
        let base = t * lanes;
        for q in 0..lanes {
            h[base + q] = a[base + q] * tb[base + q] + b[base + q];
        }
    }
}

/// Euclidean norm of a flat slice.
pub(crate) fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}
