//! Differentiable primitives.
//!
//! Every backward rule is expressed with the same primitives, so the set is
//! closed under differentiation and gradients of gradients work.

use super::real::Real;
use super::tensor::{self as k, Tensor};
use super::var::Var;

fn unary<T: Real>(x: &Var<T>, value: Tensor<T>, bw: impl Fn(&Var<T>, &Var<T>, &Var<T>) -> Var<T> + 'static) -> Var<T> {
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, p, out, _| vec![Some(bw(g, &p[0], out))]),
    )
}

pub fn add<T: Real>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let v = a.value().zip_map(b.value(), |x, y| x + y);
    Var::from_op(v, vec![a.clone(), b.clone()], Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]))
}

pub fn sub<T: Real>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let v = a.value().zip_map(b.value(), |x, y| x - y);
    Var::from_op(
        v,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _, need| vec![Some(g.clone()), need[1].then(|| scale(g, -1.0))]),
    )
}

pub fn mul<T: Real>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let v = a.value().zip_map(b.value(), |x, y| x * y);
    Var::from_op(
        v,
        vec![a.clone(), b.clone()],
        Box::new(|g, p, _, need| vec![need[0].then(|| mul(g, &p[1])), need[1].then(|| mul(g, &p[0]))]),
    )
}

pub fn scale<T: Real>(x: &Var<T>, s: f64) -> Var<T> {
    let st = T::of(s);
    unary(x, x.value().map(|v| v * st), move |g, _, _| scale(g, s))
}

pub fn add_scalar<T: Real>(x: &Var<T>, s: f64) -> Var<T> {
    let st = T::of(s);
    unary(x, x.value().map(|v| v + st), |g, _, _| g.clone())
}

/// Elementwise product with a constant tensor of the same shape.
pub fn mul_const<T: Real>(x: &Var<T>, c: &Tensor<T>) -> Var<T> {
    let c = c.clone();
    let v = x.value().zip_map(&c, |a, b| a * b);
    unary(x, v, move |g, _, _| mul_const(g, &c))
}

/// Elementwise sum with a constant tensor of the same shape.
pub fn add_const<T: Real>(x: &Var<T>, c: &Tensor<T>) -> Var<T> {
    let v = x.value().zip_map(c, |a, b| a + b);
    unary(x, v, |g, _, _| g.clone())
}

pub fn powf<T: Real>(x: &Var<T>, p: f64) -> Var<T> {
    let pt = T::of(p);
    unary(x, x.value().map(|v| v.powf(pt)), move |g, x, _| {
        if p == 1.0 {
            g.clone()
        } else {
            mul(g, &scale(&powf(x, p - 1.0), p))
        }
    })
}

pub fn exp<T: Real>(x: &Var<T>) -> Var<T> {
    unary(x, x.value().map(|v| v.exp()), |g, _, out| mul(g, out))
}

pub fn ln<T: Real>(x: &Var<T>) -> Var<T> {
    unary(x, x.value().map(|v| v.ln()), |g, x, _| mul(g, &powf(x, -1.0)))
}

/// Leaky rectifier. The slope mask is recomputed from the input during the
/// backward pass and treated as constant, so second derivatives vanish.
pub fn leaky_relu<T: Real>(x: &Var<T>, slope: f64) -> Var<T> {
    let s = T::of(slope);
    let v = x.value().map(|v| if v > T::zero() { v } else { v * s });
    unary(x, v, move |g, x, _| {
        let mask = x.value().map(|v| if v > T::zero() { T::one() } else { s });
        mul_const(g, &mask)
    })
}

/// `max(x, lo)`; the gradient is zero where the clamp is active.
pub fn clamp_min<T: Real>(x: &Var<T>, lo: f64) -> Var<T> {
    let l = T::of(lo);
    unary(x, x.value().map(|v| v.max(l)), move |g, x, _| {
        mul_const(g, &x.value().map(|v| if v > l { T::one() } else { T::zero() }))
    })
}

/// `x * s` with `s` broadcast to `x`'s shape without materializing it.
pub fn mul_bcast<T: Real>(x: &Var<T>, s: &Var<T>) -> Var<T> {
    let small = s.shape().to_vec();
    Var::from_op(
        k::bcast_binary(x.value(), s.value(), |a, b| a * b),
        vec![x.clone(), s.clone()],
        Box::new(move |g, p, _, need| {
            vec![need[0].then(|| mul_bcast(g, &p[1])), need[1].then(|| sum_to(&mul(g, &p[0]), &small))]
        }),
    )
}

/// `x + s` with `s` broadcast to `x`'s shape.
pub fn add_bcast<T: Real>(x: &Var<T>, s: &Var<T>) -> Var<T> {
    let small = s.shape().to_vec();
    Var::from_op(
        k::bcast_binary(x.value(), s.value(), |a, b| a + b),
        vec![x.clone(), s.clone()],
        Box::new(move |g, _, _, need| vec![Some(g.clone()), need[1].then(|| sum_to(g, &small))]),
    )
}

/// `x - s` with `s` broadcast to `x`'s shape.
pub fn sub_bcast<T: Real>(x: &Var<T>, s: &Var<T>) -> Var<T> {
    let small = s.shape().to_vec();
    Var::from_op(
        k::bcast_binary(x.value(), s.value(), |a, b| a - b),
        vec![x.clone(), s.clone()],
        Box::new(move |g, _, _, need| vec![Some(g.clone()), need[1].then(|| scale(&sum_to(g, &small), -1.0))]),
    )
}

/// Mean over the axes where `shape` has extent 1.
pub fn mean_to<T: Real>(x: &Var<T>, shape: &[usize]) -> Var<T> {
    let n = x.value().len() / shape.iter().product::<usize>().max(1);
    scale(&sum_to(x, shape), 1.0 / n as f64)
}

/// Group normalization of `[N, C, H, W]` with per-channel `gamma`, `beta` of shape `[C]`.
///
/// Only the output is stored. First-order backward runs a fused kernel; when a
/// graph is requested the rule is rebuilt from differentiable ops.
pub fn group_norm<T: Real>(x: &Var<T>, groups: usize, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Var<T> {
    let v = k::group_norm(x.value(), groups, gamma.value(), beta.value(), eps);
    Var::from_op(
        v,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, p, _, need| {
            let graph = g.requires_grad() || p.iter().any(Var::requires_grad);
            if !graph {
                let (dx, dg, db) = k::group_norm_backward(p[0].value(), groups, p[1].value(), g.value(), eps);
                return vec![
                    need[0].then(|| Var::constant(dx)),
                    need[1].then(|| Var::constant(dg)),
                    need[2].then(|| Var::constant(db)),
                ];
            }
            group_norm_backward_graph(g, &p[0], &p[1], groups, eps, need)
        }),
    )
}

fn group_norm_backward_graph<T: Real>(
    g: &Var<T>,
    x: &Var<T>,
    gamma: &Var<T>,
    groups: usize,
    eps: f64,
    need: &[bool],
) -> Vec<Option<Var<T>>> {
    let s = x.shape().to_vec();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let cg = c / groups;
    let gs = [n, groups, cg, inner];
    let stat = [n, groups, 1, 1];
    let xr = reshape(x, &gs);
    let gr = reshape(g, &gs);
    let xc = sub_bcast(&xr, &mean_to(&xr, &stat));
    let var = mean_to(&mul(&xc, &xc), &stat);
    let inv = powf(&add_scalar(&var, eps), -0.5);
    let xhat = mul_bcast(&xc, &inv);
    let dx = need[0].then(|| {
        let gp = mul_bcast(&gr, &reshape(gamma, &[1, groups, cg, 1]));
        let m1 = mean_to(&gp, &stat);
        let m2 = mean_to(&mul(&gp, &xhat), &stat);
        let inner = sub(&sub_bcast(&gp, &m1), &mul_bcast(&xhat, &m2));
        reshape(&mul_bcast(&inner, &inv), &s)
    });
    let dgamma = need[1].then(|| reshape(&sum_to(&mul(&gr, &xhat), &[1, groups, cg, 1]), &[c]));
    let dbeta = need[2].then(|| reshape(&sum_to(&gr, &[1, groups, cg, 1]), &[c]));
    vec![dx, dgamma, dbeta]
}

/// Log-softmax over axis 1 of `[N, C, ...]`.
pub fn log_softmax_channels<T: Real>(x: &Var<T>) -> Var<T> {
    let mut red = x.shape().to_vec();
    red[1] = 1;
    unary(x, k::log_softmax_axis1(x.value()), move |g, _, out| {
        sub(g, &mul_bcast(&exp(out), &sum_to(g, &red)))
    })
}

pub fn reshape<T: Real>(x: &Var<T>, shape: &[usize]) -> Var<T> {
    let orig = x.shape().to_vec();
    unary(x, x.value().reshape(shape), move |g, _, _| reshape(g, &orig))
}

pub fn broadcast_to<T: Real>(x: &Var<T>, shape: &[usize]) -> Var<T> {
    if x.shape() == shape {
        return x.clone();
    }
    let orig = x.shape().to_vec();
    unary(x, k::broadcast_to(x.value(), shape), move |g, _, _| sum_to(g, &orig))
}

pub fn sum_to<T: Real>(x: &Var<T>, shape: &[usize]) -> Var<T> {
    if x.shape() == shape {
        return x.clone();
    }
    let orig = x.shape().to_vec();
    unary(x, k::sum_to(x.value(), shape), move |g, _, _| broadcast_to(g, &orig))
}

/// Sum of all elements, shape `[1]`.
pub fn sum_all<T: Real>(x: &Var<T>) -> Var<T> {
    let ones = vec![1; x.shape().len()];
    reshape(&sum_to(x, &ones), &[1])
}

pub fn conv2d<T: Real>(x: &Var<T>, w: &Var<T>) -> Var<T> {
    let v = k::conv2d(x.value(), w.value());
    let ks = w.shape()[2];
    Var::from_op(
        v,
        vec![x.clone(), w.clone()],
        Box::new(move |g, p, _, need| {
            vec![
                need[0].then(|| conv2d(g, &flip_transpose(&p[1]))),
                need[1].then(|| conv_wgrad(&p[0], g, ks)),
            ]
        }),
    )
}

pub fn flip_transpose<T: Real>(w: &Var<T>) -> Var<T> {
    unary(w, k::flip_transpose(w.value()), |g, _, _| flip_transpose(g))
}

/// Weight gradient of a same-padded convolution, bilinear in `(x, g)`.
pub fn conv_wgrad<T: Real>(x: &Var<T>, g: &Var<T>, ks: usize) -> Var<T> {
    let v = k::conv_wgrad(x.value(), g.value(), ks);
    Var::from_op(
        v,
        vec![x.clone(), g.clone()],
        Box::new(|up, p, _, need| {
            vec![
                need[0].then(|| conv2d(&p[1], &flip_transpose(up))),
                need[1].then(|| conv2d(&p[0], up)),
            ]
        }),
    )
}

pub fn avg_pool2<T: Real>(x: &Var<T>) -> Var<T> {
    unary(x, k::avg_pool2(x.value()), |g, _, _| scale(&upsample2(g), 0.25))
}

pub fn upsample2<T: Real>(x: &Var<T>) -> Var<T> {
    unary(x, k::upsample2(x.value()), |g, _, _| scale(&avg_pool2(g), 4.0))
}

pub fn concat_channels<T: Real>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let (ca, cb) = (a.shape()[1], b.shape()[1]);
    Var::from_op(
        k::concat_axis1(a.value(), b.value()),
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, _, need| {
            vec![need[0].then(|| slice_channels(g, 0, ca)), need[1].then(|| slice_channels(g, ca, cb))]
        }),
    )
}

pub fn slice_channels<T: Real>(x: &Var<T>, start: usize, len: usize) -> Var<T> {
    let total = x.shape()[1];
    unary(x, k::slice_axis1(x.value(), start, len), move |g, _, _| pad_channels(g, start, total))
}

pub fn pad_channels<T: Real>(x: &Var<T>, start: usize, total: usize) -> Var<T> {
    let len = x.shape()[1];
    unary(x, k::pad_axis1(x.value(), start, total), move |g, _, _| slice_channels(g, start, len))
}

/// Batched matrix product of rank-3 tensors, optionally transposing operands.
pub fn bmm<T: Real>(a: &Var<T>, b: &Var<T>, ta: bool, tb: bool) -> Var<T> {
    Var::from_op(
        k::bmm(a.value(), b.value(), ta, tb),
        vec![a.clone(), b.clone()],
        Box::new(move |g, p, _, need| {
            let ga = need[0].then(|| if ta { bmm(&p[1], g, tb, true) } else { bmm(g, &p[1], false, !tb) });
            let gb = need[1].then(|| if tb { bmm(g, &p[0], true, ta) } else { bmm(&p[0], g, !ta, false) });
            vec![ga, gb]
        }),
    )
}

/// Selects rows along axis 0 (repetition allowed).
pub fn gather_rows<T: Real>(x: &Var<T>, idx: &[usize]) -> Var<T> {
    let n = x.shape()[0];
    let idx = idx.to_vec();
    let v = k::gather_axis0(x.value(), &idx);
    unary(x, v, move |g, _, _| scatter_add_rows(g, &idx, n))
}

/// Adjoint of [`gather_rows`]: sums rows into `n` output slots.
pub fn scatter_add_rows<T: Real>(x: &Var<T>, idx: &[usize], n: usize) -> Var<T> {
    let idx = idx.to_vec();
    let v = k::scatter_add_axis0(x.value(), &idx, n);
    unary(x, v, move |g, _, _| gather_rows(g, &idx))
}
