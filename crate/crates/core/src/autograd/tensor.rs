use std::sync::Arc;

use super::real::{matmul, Real};
use crate::par;

/// Immutable dense row-major array with shared storage.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match data length {}",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::new(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: T) -> Self {
        Self::new(&[1], vec![v])
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// First element, for `[1]`-shaped results.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self::new(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Converts the element type (e.g. `f32` checkpoints into `f64` checks).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::new(
            &self.shape,
            self.data.iter().map(|v| U::of(v.to_f64().unwrap_or(f64::NAN))).collect(),
        )
    }
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Pairs each dimension of `big` with the stride of `small` (0 where `small`
/// is broadcast) and merges adjacent dimensions that walk memory the same way.
fn coalesce(big: &[usize], small: &[usize]) -> (Vec<usize>, Vec<usize>) {
    assert_eq!(big.len(), small.len(), "broadcast requires equal ranks");
    let strides = contiguous_strides(small);
    let mut sizes: Vec<usize> = Vec::new();
    let mut st: Vec<usize> = Vec::new();
    for i in 0..big.len() {
        let b = big[i];
        let s = small[i];
        assert!(
            s == b || s == 1,
            "shape {small:?} is not broadcastable to {big:?}"
        );
        if b == 1 {
            continue;
        }
        let stride = if s == 1 { 0 } else { strides[i] };
        if let (Some(ls), Some(lst)) = (sizes.last_mut(), st.last_mut()) {
            let both_bcast = *lst == 0 && stride == 0;
            let contiguous = stride != 0 && *lst == stride * b;
            if both_bcast || contiguous {
                *ls *= b;
                *lst = stride;
                continue;
            }
        }
        sizes.push(b);
        st.push(stride);
    }
    if sizes.is_empty() {
        sizes.push(1);
        st.push(0);
    }
    (sizes, st)
}

/// Calls `f(big_offset, small_offset, run_len, small_inner_stride)` for every
/// innermost run, in row-major order over the big tensor.
fn for_each_run(sizes: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize, usize, usize)) {
    let nd = sizes.len();
    let inner = sizes[nd - 1];
    let inner_stride = strides[nd - 1];
    let outer: usize = sizes[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd.saturating_sub(1)];
    let mut small_off = 0usize;
    for o in 0..outer {
        f(o * inner, small_off, inner, inner_stride);
        // advance multi-index over outer dims
        let mut d = nd - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            small_off += strides[d];
            if idx[d] < sizes[d] {
                break;
            }
            small_off -= strides[d] * sizes[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_to<T: Real>(src: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if src.shape() == shape {
        return src.clone();
    }
    let (sizes, strides) = coalesce(shape, src.shape());
    let total: usize = shape.iter().product();
    let mut out = vec![T::zero(); total];
    let s = src.data();
    for_each_run(&sizes, &strides, |bo, so, n, ist| {
        let dst = &mut out[bo..bo + n];
        if ist == 0 {
            dst.iter_mut().for_each(|v| *v = s[so]);
        } else {
            dst.copy_from_slice(&s[so..so + n]);
        }
    });
    Tensor::new(shape, out)
}

pub(crate) fn sum_to<T: Real>(src: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if src.shape() == shape {
        return src.clone();
    }
    let (sizes, strides) = coalesce(src.shape(), shape);
    let mut out = vec![T::zero(); shape.iter().product()];
    let s = src.data();
    for_each_run(&sizes, &strides, |bo, so, n, ist| {
        let run = &s[bo..bo + n];
        if ist == 0 {
            let mut acc = T::zero();
            for &v in run {
                acc += v;
            }
            out[so] += acc;
        } else {
            for (d, &v) in out[so..so + n].iter_mut().zip(run) {
                *d += v;
            }
        }
    });
    Tensor::new(shape, out)
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let r = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let oy = dy as isize - r;
                let ox = dx as isize - r;
                for y in 0..h {
                    let sy = y as isize + oy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    drow[..x0.min(w)].iter_mut().for_each(|v| *v = T::zero());
                    if x1 > x0 {
                        let sx0 = (x0 as isize + ox) as usize;
                        drow[x0..x1].copy_from_slice(&srow[sx0..sx0 + (x1 - x0)]);
                    }
                    drow[x1.max(x0)..].iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
    }
}

/// Same-padded, stride-1 cross-correlation: `x[N,Ci,H,W] * w[Co,Ci,k,k]`.
pub(crate) fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (n, ci, h, wd) = dims4(x);
    let (co, wci, k, k2) = dims4(w);
    assert_eq!(ci, wci, "conv2d: input channels {ci} vs weight {wci}");
    assert!(k == k2 && k % 2 == 1, "conv2d: kernel must be square and odd");
    let hw = h * wd;
    let kk = ci * k * k;
    let mut out = vec![T::zero(); n * co * hw];
    let xd = x.data();
    let wdat = w.data();
    par::for_each_chunk_mut(&mut out, co * hw, |b, dst| {
        let img = &xd[b * ci * hw..(b + 1) * ci * hw];
        if k == 1 {
            matmul(co, ci, hw, wdat, false, img, false, dst, false);
        } else {
            let mut cols = vec![T::zero(); kk * hw];
            im2col(img, ci, h, wd, k, &mut cols);
            matmul(co, kk, hw, wdat, false, &cols, false, dst, false);
        }
    });
    Tensor::new(&[n, co, h, wd], out)
}

/// Weight gradient of [`conv2d`]: `sum_n g[n] @ im2col(x[n])^T`.
pub(crate) fn conv_wgrad<T: Real>(x: &Tensor<T>, g: &Tensor<T>, k: usize) -> Tensor<T> {
    let (n, ci, h, wd) = dims4(x);
    let (gn, co, gh, gw) = dims4(g);
    assert!(n == gn && h == gh && wd == gw, "conv_wgrad: shape mismatch");
    let hw = h * wd;
    let kk = ci * k * k;
    let xd = x.data();
    let gd = g.data();
    let partials = par::map_range(n, |b| {
        let img = &xd[b * ci * hw..(b + 1) * ci * hw];
        let gi = &gd[b * co * hw..(b + 1) * co * hw];
        let mut part = vec![T::zero(); co * kk];
        if k == 1 {
            matmul(co, hw, ci, gi, false, img, true, &mut part, false);
        } else {
            let mut cols = vec![T::zero(); kk * hw];
            im2col(img, ci, h, wd, k, &mut cols);
            matmul(co, hw, kk, gi, false, &cols, true, &mut part, false);
        }
        part
    });
    let mut out = vec![T::zero(); co * kk];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    Tensor::new(&[co, ci, k, k], out)
}

/// `w[Co,Ci,k,k] -> w'[Ci,Co,k,k]` with spatially flipped taps.
pub(crate) fn flip_transpose<T: Real>(w: &Tensor<T>) -> Tensor<T> {
    let (co, ci, k, _) = dims4(w);
    let wd = w.data();
    let mut out = vec![T::zero(); w.len()];
    for o in 0..co {
        for i in 0..ci {
            for dy in 0..k {
                for dx in 0..k {
                    out[((i * co + o) * k + (k - 1 - dy)) * k + (k - 1 - dx)] =
                        wd[((o * ci + i) * k + dy) * k + dx];
                }
            }
        }
    }
    Tensor::new(&[ci, co, k, k], out)
}

pub(crate) fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let q = T::of(0.25);
    let mut out = vec![T::zero(); n * c * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |p, dst| {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let r0 = &src[2 * y * w..(2 * y + 1) * w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
            for x in 0..ow {
                dst[y * ow + x] = (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * q;
            }
        }
    });
    Tensor::new(&[n, c, oh, ow], out)
}

pub(crate) fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = (h * 2, w * 2);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |p, dst| {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for (x, v) in drow.iter_mut().enumerate() {
                *v = srow[x / 2];
            }
        }
    });
    Tensor::new(&[n, c, oh, ow], out)
}

/// Copies `x[:, start..start+len]` along axis 1 (any rank ≥ 2).
pub(crate) fn slice_axis1<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    assert!(start + len <= c, "slice out of range");
    let inner: usize = s[2..].iter().product();
    let xd = x.data();
    let mut out = Vec::with_capacity(n * len * inner);
    for b in 0..n {
        let base = (b * c + start) * inner;
        out.extend_from_slice(&xd[base..base + len * inner]);
    }
    let mut shape = s.to_vec();
    shape[1] = len;
    Tensor::new(&shape, out)
}

/// Places `x` at channel offset `start` inside a zero tensor with `total` channels.
pub(crate) fn pad_axis1<T: Real>(x: &Tensor<T>, start: usize, total: usize) -> Tensor<T> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    assert!(start + c <= total, "pad out of range");
    let inner: usize = s[2..].iter().product();
    let xd = x.data();
    let mut out = vec![T::zero(); n * total * inner];
    for b in 0..n {
        let dst = (b * total + start) * inner;
        out[dst..dst + c * inner].copy_from_slice(&xd[b * c * inner..(b + 1) * c * inner]);
    }
    let mut shape = s.to_vec();
    shape[1] = total;
    Tensor::new(&shape, out)
}

pub(crate) fn concat_axis1<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(
        sa.len() == sb.len() && sa[0] == sb[0] && sa[2..] == sb[2..],
        "concat shape mismatch {sa:?} vs {sb:?}"
    );
    let n = sa[0];
    let inner: usize = sa[2..].iter().product();
    let (ca, cb) = (sa[1] * inner, sb[1] * inner);
    let mut out = Vec::with_capacity(n * (ca + cb));
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        out.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    let mut shape = sa.to_vec();
    shape[1] = sa[1] + sb[1];
    Tensor::new(&shape, out)
}

/// Batched matmul over 3-D tensors with optional per-operand transposition.
pub(crate) fn bmm<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(sa.len() == 3 && sb.len() == 3, "bmm expects rank-3 operands");
    assert_eq!(sa[0], sb[0], "bmm batch mismatch");
    let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
    let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    assert_eq!(k, kb, "bmm inner dimension mismatch {sa:?} x {sb:?} (ta={ta}, tb={tb})");
    let batch = sa[0];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); batch * m * n];
    par::for_each_chunk_mut(&mut out, m * n, |i, dst| {
        matmul(
            m,
            k,
            n,
            &ad[i * m * k..(i + 1) * m * k],
            ta,
            &bd[i * k * n..(i + 1) * k * n],
            tb,
            dst,
            false,
        );
    });
    Tensor::new(&[batch, m, n], out)
}

pub(crate) fn gather_axis0<T: Real>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let s = x.shape();
    let inner: usize = s[1..].iter().product();
    let mut out = Vec::with_capacity(idx.len() * inner);
    for &i in idx {
        assert!(i < s[0], "gather index {i} out of range");
        out.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
    }
    let mut shape = s.to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, out)
}

pub(crate) fn scatter_add_axis0<T: Real>(x: &Tensor<T>, idx: &[usize], n: usize) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(s[0], idx.len(), "scatter index length");
    let inner: usize = s[1..].iter().product();
    let mut out = vec![T::zero(); n * inner];
    for (j, &i) in idx.iter().enumerate() {
        let src = &x.data()[j * inner..(j + 1) * inner];
        for (d, &v) in out[i * inner..(i + 1) * inner].iter_mut().zip(src) {
            *d += v;
        }
    }
    let mut shape = s.to_vec();
    shape[0] = n;
    Tensor::new(&shape, out)
}

/// `f(x, s)` elementwise, with `s` broadcast to `x`'s shape.
pub(crate) fn bcast_binary<T: Real>(x: &Tensor<T>, s: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if x.shape() == s.shape() {
        return x.zip_map(s, f);
    }
    let (sizes, strides) = coalesce(x.shape(), s.shape());
    let xd = x.data();
    let sd = s.data();
    let mut out = vec![T::zero(); x.len()];
    for_each_run(&sizes, &strides, |bo, so, n, ist| {
        let src = &xd[bo..bo + n];
        let dst = &mut out[bo..bo + n];
        if ist == 0 {
            let c = sd[so];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = f(v, c);
            }
        } else {
            for ((d, &v), &c) in dst.iter_mut().zip(src).zip(&sd[so..so + n]) {
                *d = f(v, c);
            }
        }
    });
    Tensor::new(x.shape(), out)
}

/// Group normalization forward over `[N, C, ...]` with per-channel affine.
pub(crate) fn group_norm<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    let s = x.shape();
    let c = s[1];
    assert!(c.is_multiple_of(groups), "channels {c} not divisible by groups {groups}");
    let inner: usize = s[2..].iter().product();
    let cg = c / groups;
    let len = cg * inner;
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let eps = T::of(eps);
    let inv_len = T::of(1.0 / len as f64);
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, len, |blk, dst| {
        let g = blk % groups;
        let src = &xd[blk * len..(blk + 1) * len];
        let mean = src.iter().copied().sum::<T>() * inv_len;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
        let inv = (var + eps).sqrt().recip();
        for j in 0..cg {
            let ch = g * cg + j;
            let (ga, be) = (gd[ch], bd[ch]);
            let r = j * inner..(j + 1) * inner;
            for (d, &v) in dst[r.clone()].iter_mut().zip(&src[r]) {
                *d = (v - mean) * inv * ga + be;
            }
        }
    });
    Tensor::new(s, out)
}

/// First-order group-norm backward: `(dx, dgamma, dbeta)`.
pub(crate) fn group_norm_backward<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let cg = c / groups;
    let len = cg * inner;
    let (xd, gd, gam) = (x.data(), g.data(), gamma.data());
    let epst = T::of(eps);
    let inv_len = T::of(1.0 / len as f64);
    let mut dx = vec![T::zero(); x.len()];
    // per-block partial sums of g*xhat and g for each channel of the group
    let partials = {
        let mut parts: Vec<(Vec<T>, Vec<T>)> = Vec::new();
        let res = par::map_range(n * groups, |blk| {
            let gi = blk % groups;
            let src = &xd[blk * len..(blk + 1) * len];
            let gs = &gd[blk * len..(blk + 1) * len];
            let mean = src.iter().copied().sum::<T>() * inv_len;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
            let inv = (var + epst).sqrt().recip();
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            let mut dgam = vec![T::zero(); cg];
            let mut dbet = vec![T::zero(); cg];
            for j in 0..cg {
                let ga = gam[gi * cg + j];
                for i in j * inner..(j + 1) * inner {
                    let xh = (src[i] - mean) * inv;
                    let gp = gs[i] * ga;
                    m1 += gp;
                    m2 += gp * xh;
                    dgam[j] += gs[i] * xh;
                    dbet[j] += gs[i];
                }
            }
            m1 *= inv_len;
            m2 *= inv_len;
            let mut d = vec![T::zero(); len];
            for j in 0..cg {
                let ga = gam[gi * cg + j];
                for i in j * inner..(j + 1) * inner {
                    let xh = (src[i] - mean) * inv;
                    d[i] = inv * (gs[i] * ga - m1 - xh * m2);
                }
            }
            (d, dgam, dbet)
        });
        for (blk, (d, dg, db)) in res.into_iter().enumerate() {
            dx[blk * len..(blk + 1) * len].copy_from_slice(&d);
            parts.push((dg, db));
        }
        parts
    };
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (blk, (dg, db)) in partials.into_iter().enumerate() {
        let gi = blk % groups;
        for j in 0..cg {
            dgamma[gi * cg + j] += dg[j];
            dbeta[gi * cg + j] += db[j];
        }
    }
    (Tensor::new(s, dx), Tensor::new(&[c], dgamma), Tensor::new(&[c], dbeta))
}

/// Log-softmax along axis 1 of an `[N, C, ...]` tensor.
pub(crate) fn log_softmax_axis1<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, c * inner, |b, dst| {
        let src = &xd[b * c * inner..(b + 1) * c * inner];
        for j in 0..inner {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(src[k * inner + j]);
            }
            let mut acc = T::zero();
            for k in 0..c {
                acc += (src[k * inner + j] - m).exp();
            }
            let lse = m + acc.ln();
            for k in 0..c {
                dst[k * inner + j] = src[k * inner + j] - lse;
            }
        }
    });
    Tensor::new(s, out)
}

pub(crate) fn dims4<T: Real>(x: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(f).collect())
    }

    #[test]
    fn broadcast_and_sum_are_adjoint() {
        let small = t(&[2, 1, 3, 1], |i| i as f64 + 1.0);
        let big = broadcast_to(&small, &[2, 4, 3, 5]);
        assert_eq!(big.data()[0], 1.0);
        assert_eq!(big.data()[4], 1.0);
        assert_eq!(big.data()[5], 2.0);
        let back = sum_to(&big, &[2, 1, 3, 1]);
        for (a, b) in back.data().iter().zip(small.data()) {
            assert_eq!(*a, b * 20.0);
        }
    }

    #[test]
    fn sum_to_middle_axis() {
        let x = t(&[2, 3, 2], |i| i as f64);
        let s = sum_to(&x, &[2, 1, 2]);
        assert_eq!(s.data(), &[0.0 + 2.0 + 4.0, 1.0 + 3.0 + 5.0, 6.0 + 8.0 + 10.0, 7.0 + 9.0 + 11.0]);
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
        let (n, ci, h, wd) = dims4(x);
        let (co, _, k, _) = dims4(w);
        let r = (k / 2) as isize;
        let mut out = vec![0.0; n * co * h * wd];
        for b in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let sy = y as isize + dy as isize - r;
                                    let sx = xx as isize + dx as isize - r;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * ci + i) * k + dy) * k + dx]
                                        * x.data()[((b * ci + i) * h + sy as usize) * wd + sx as usize];
                                }
                            }
                        }
                        out[((b * co + o) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let x = t(&[2, 3, 5, 4], |i| ((i * 7) % 11) as f64 - 5.0);
        for k in [1, 3, 5] {
            let w = t(&[4, 3, k, k], |i| ((i * 5) % 7) as f64 * 0.1 - 0.3);
            let got = conv2d(&x, &w);
            let want = naive_conv(&x, &w);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-9, "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn pool_upsample_roundtrip() {
        let x = t(&[1, 2, 2, 2], |i| i as f64);
        let up = upsample2(&x);
        let down = avg_pool2(&up);
        assert_eq!(down.data(), x.data());
    }

    #[test]
    fn concat_slice_pad() {
        let a = t(&[2, 1, 2], |i| i as f64);
        let b = t(&[2, 2, 2], |i| 10.0 + i as f64);
        let c = concat_axis1(&a, &b);
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(slice_axis1(&c, 1, 2).data(), b.data());
        let p = pad_axis1(&a, 0, 3);
        assert_eq!(slice_axis1(&p, 0, 1).data(), a.data());
        assert_eq!(slice_axis1(&p, 1, 2).sum(), 0.0);
    }
}
