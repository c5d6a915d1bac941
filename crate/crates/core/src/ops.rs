//! Forward and backward kernels for the operator set used by the network.
//!
//! Every kernel works one batch sample at a time. Samples may run in
//! parallel; reductions across the batch (weight gradients) are always
//! summed in sample order so results do not depend on the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{ensure_same, Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvMode {
    /// 1x1 convolution, no padding.
    Pointwise,
    /// Per-channel 3x3 convolution, zero padding 1.
    Depthwise3x3,
    /// Full 2x2 convolution with stride 2.
    Down2x2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShuffleDir {
    Up,
    Down,
}

pub(crate) fn for_each_sample<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// `f(0..n)` in order, on the thread pool when `parallel` is on.
pub fn map_samples<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sum per-sample partials in sample order.
fn reduce_ordered<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// Dot product with eight fixed accumulator lanes.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    s + tail
}

#[inline]
pub(crate) fn sum_slice<T: Real>(a: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let c = &a[i * 8..i * 8 + 8];
        for l in 0..8 {
            lanes[l] += c[l];
        }
    }
    let mut tail = T::zero();
    for &v in &a[chunks * 8..] {
        tail += v;
    }
    let s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    s + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn check_spatial(x: Shape, what: &str) -> Result<()> {
    if x.n == 0 || x.c == 0 || x.h == 0 || x.w == 0 {
        return Err(Error::shape(format!("{what}: zero-extent input {x}")));
    }
    Ok(())
}

fn check_bias<T: Real>(b: &Tensor<T>, cout: usize, what: &str) -> Result<()> {
    if b.len() != cout {
        return Err(Error::shape(format!(
            "{what}: bias has {} elements, expected {cout}",
            b.len()
        )));
    }
    Ok(())
}

/// Output shape of `conv2d`, validating input, weight and bias shapes.
pub fn conv_out_shape<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, mode: ConvMode) -> Result<Shape> {
    let xs = x.shape();
    let ws = w.shape();
    check_spatial(xs, "conv2d")?;
    let out = match mode {
        ConvMode::Pointwise => {
            if ws.c != xs.c || ws.h != 1 || ws.w != 1 {
                return Err(Error::shape(format!(
                    "pointwise conv: weight {ws} incompatible with input {xs} (expected Cout x {} x 1 x 1)",
                    xs.c
                )));
            }
            Shape::new(xs.n, ws.n, xs.h, xs.w)
        }
        ConvMode::Depthwise3x3 => {
            if ws.n != xs.c || ws.c != 1 || ws.h != 3 || ws.w != 3 {
                return Err(Error::shape(format!(
                    "depthwise conv: weight {ws} incompatible with input {xs} (expected {} x 1 x 3 x 3)",
                    xs.c
                )));
            }
            xs
        }
        ConvMode::Down2x2 => {
            if ws.c != xs.c || ws.h != 2 || ws.w != 2 {
                return Err(Error::shape(format!(
                    "down conv: weight {ws} incompatible with input {xs} (expected Cout x {} x 2 x 2)",
                    xs.c
                )));
            }
            if xs.h % 2 != 0 || xs.w % 2 != 0 {
                return Err(Error::shape(format!("down conv: spatial extents of {xs} must be even")));
            }
            Shape::new(xs.n, ws.n, xs.h / 2, xs.w / 2)
        }
    };
    check_bias(b, out.c, "conv2d")?;
    Ok(out)
}

pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, mode: ConvMode) -> Result<Tensor<T>> {
    let out_shape = conv_out_shape(x, w, b, mode)?;
    match mode {
        ConvMode::Pointwise => Ok(pointwise(x, w.data(), b.data(), out_shape.c)),
        ConvMode::Depthwise3x3 => Ok(depthwise(x, w.data(), b.data())),
        ConvMode::Down2x2 => {
            let unshuffled = pixel_shuffle(x, ShuffleDir::Down, 2)?;
            Ok(pointwise(&unshuffled, w.data(), b.data(), out_shape.c))
        }
    }
}

/// Gradients `(dx, dw, db)` of `conv2d` given the output gradient.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    mode: ConvMode,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let cout = dout.shape().c;
    let (dx, dw, db) = match mode {
        ConvMode::Pointwise => pointwise_backward(x, w.data(), dout),
        ConvMode::Depthwise3x3 => depthwise_backward(x, w.data(), dout),
        ConvMode::Down2x2 => {
            let unshuffled = pixel_shuffle(x, ShuffleDir::Down, 2)?;
            let (du, dw, db) = pointwise_backward(&unshuffled, w.data(), dout);
            (pixel_shuffle(&du, ShuffleDir::Up, 2)?, dw, db)
        }
    };
    let dw = Tensor::from_vec(w.shape(), dw)?;
    let db = Tensor::from_vec([1, cout, 1, 1], db)?;
    Ok((dx, dw, db))
}

fn pointwise<T: Real>(x: &Tensor<T>, w: &[T], b: &[T], cout: usize) -> Tensor<T> {
    let xs = x.shape();
    let (cin, plane) = (xs.c, xs.plane());
    let mut out = Tensor::zeros([xs.n, cout, xs.h, xs.w]);
    for_each_sample(out.data_mut(), cout * plane, |n, o| {
        let xn = x.sample(n);
        for co in 0..cout {
            let orow = &mut o[co * plane..(co + 1) * plane];
            orow.fill(b[co]);
            for ci in 0..cin {
                axpy(w[co * cin + ci], &xn[ci * plane..(ci + 1) * plane], orow);
            }
        }
    });
    out
}

fn pointwise_backward<T: Real>(x: &Tensor<T>, w: &[T], dout: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let xs = x.shape();
    let (cin, plane, cout) = (xs.c, xs.plane(), dout.shape().c);
    let mut dx = Tensor::zeros(xs);
    for_each_sample(dx.data_mut(), cin * plane, |n, d| {
        let g = dout.sample(n);
        for ci in 0..cin {
            let drow = &mut d[ci * plane..(ci + 1) * plane];
            for co in 0..cout {
                axpy(w[co * cin + ci], &g[co * plane..(co + 1) * plane], drow);
            }
        }
    });
    let parts = map_samples(xs.n, |n| {
        let (g, xn) = (dout.sample(n), x.sample(n));
        let mut p = vec![T::zero(); cout * cin + cout];
        for co in 0..cout {
            let grow = &g[co * plane..(co + 1) * plane];
            for ci in 0..cin {
                p[co * cin + ci] = dot(grow, &xn[ci * plane..(ci + 1) * plane]);
            }
            p[cout * cin + co] = sum_slice(grow);
        }
        p
    });
    let mut acc = reduce_ordered(parts, cout * cin + cout);
    let db = acc.split_off(cout * cin);
    (dx, acc, db)
}

/// Valid output column range for kernel column `kx` (input column = x + kx - 1).
#[inline]
fn col_range(kx: usize, width: usize) -> (usize, usize) {
    match kx {
        0 => (1, width),
        1 => (0, width),
        _ => (0, width.saturating_sub(1)),
    }
}

fn depthwise<T: Real>(x: &Tensor<T>, w: &[T], b: &[T]) -> Tensor<T> {
    let xs = x.shape();
    let (c, h, wd) = (xs.c, xs.h, xs.w);
    let plane = xs.plane();
    let mut out = Tensor::zeros(xs);
    for_each_sample(out.data_mut(), c * plane, |n, o| {
        let xn = x.sample(n);
        for ch in 0..c {
            let op = &mut o[ch * plane..(ch + 1) * plane];
            op.fill(b[ch]);
            let ip = &xn[ch * plane..(ch + 1) * plane];
            let k = &w[ch * 9..ch * 9 + 9];
            for y in 0..h {
                for ky in 0..3 {
                    let iy = y + ky;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    let iy = iy - 1;
                    for kx in 0..3 {
                        let (x0, x1) = col_range(kx, wd);
                        if x0 >= x1 {
                            continue;
                        }
                        let src = &ip[iy * wd + x0 + kx - 1..iy * wd + x1 + kx - 1];
                        axpy(k[ky * 3 + kx], src, &mut op[y * wd + x0..y * wd + x1]);
                    }
                }
            }
        }
    });
    out
}

fn depthwise_backward<T: Real>(x: &Tensor<T>, w: &[T], dout: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let xs = x.shape();
    let (c, h, wd) = (xs.c, xs.h, xs.w);
    let plane = xs.plane();
    let mut dx = Tensor::zeros(xs);
    for_each_sample(dx.data_mut(), c * plane, |n, d| {
        let g = dout.sample(n);
        for ch in 0..c {
            let dp = &mut d[ch * plane..(ch + 1) * plane];
            let gp = &g[ch * plane..(ch + 1) * plane];
            let k = &w[ch * 9..ch * 9 + 9];
            for y in 0..h {
                for ky in 0..3 {
                    let iy = y + ky;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    let iy = iy - 1;
                    for kx in 0..3 {
                        let (x0, x1) = col_range(kx, wd);
                        if x0 >= x1 {
                            continue;
                        }
                        let src = &gp[y * wd + x0..y * wd + x1];
                        axpy(
                            k[ky * 3 + kx],
                            src,
                            &mut dp[iy * wd + x0 + kx - 1..iy * wd + x1 + kx - 1],
                        );
                    }
                }
            }
        }
    });
    let parts = map_samples(xs.n, |n| {
        let (g, xn) = (dout.sample(n), x.sample(n));
        let mut p = vec![T::zero(); c * 10];
        for ch in 0..c {
            let gp = &g[ch * plane..(ch + 1) * plane];
            let ip = &xn[ch * plane..(ch + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let (x0, x1) = col_range(kx, wd);
                    let mut acc = T::zero();
                    if x0 < x1 {
                        for y in 0..h {
                            let iy = y + ky;
                            if iy < 1 || iy > h {
                                continue;
                            }
                            let iy = iy - 1;
                            acc += dot(
                                &gp[y * wd + x0..y * wd + x1],
                                &ip[iy * wd + x0 + kx - 1..iy * wd + x1 + kx - 1],
                            );
                        }
                    }
                    p[ch * 9 + ky * 3 + kx] = acc;
                }
            }
            p[c * 9 + ch] = sum_slice(gp);
        }
        p
    });
    let mut acc = reduce_ordered(parts, c * 10);
    let db = acc.split_off(c * 9);
    (dx, acc, db)
}

/// Saved statistics of a channel layer norm: per-site mean and reciprocal std.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm_channels<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("layer norm eps must be positive, got {eps}")));
    }
    let xs = x.shape();
    if gamma.len() != xs.c || beta.len() != xs.c {
        return Err(Error::shape(format!(
            "layer norm: gamma/beta lengths {}/{} do not match {} channels",
            gamma.len(),
            beta.len(),
            xs.c
        )));
    }
    let (c, plane) = (xs.c, xs.plane());
    let inv_c = T::of(1.0 / c as f64);
    let eps = T::of(eps);
    let mut mean = vec![T::zero(); xs.n * plane];
    let mut rstd = vec![T::zero(); xs.n * plane];
    let mut out = Tensor::zeros(xs);
    let (g, b) = (gamma.data(), beta.data());
    for n in 0..xs.n {
        let xn = x.sample(n);
        let m = &mut mean[n * plane..(n + 1) * plane];
        let r = &mut rstd[n * plane..(n + 1) * plane];
        for ch in 0..c {
            for (mv, &v) in m.iter_mut().zip(&xn[ch * plane..(ch + 1) * plane]) {
                *mv += v;
            }
        }
        m.iter_mut().for_each(|v| *v = *v * inv_c);
        for ch in 0..c {
            for ((rv, &v), &mv) in r.iter_mut().zip(&xn[ch * plane..(ch + 1) * plane]).zip(m.iter()) {
                let d = v - mv;
                *rv += d * d;
            }
        }
        r.iter_mut().for_each(|v| *v = T::one() / (*v * inv_c + eps).sqrt());
        let on = &mut out.data_mut()[n * c * plane..(n + 1) * c * plane];
        for ch in 0..c {
            let src = &xn[ch * plane..(ch + 1) * plane];
            let dst = &mut on[ch * plane..(ch + 1) * plane];
            for p in 0..plane {
                dst[p] = (src[p] - m[p]) * r[p] * g[ch] + b[ch];
            }
        }
    }
    Ok((out, NormStats { mean, rstd }))
}

/// Gradients `(dx, dgamma, dbeta)` of the channel layer norm.
pub fn layer_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let xs = x.shape();
    let (c, plane) = (xs.c, xs.plane());
    let inv_c = T::of(1.0 / c as f64);
    let g = gamma.data();
    let mut dx = Tensor::zeros(xs);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c * plane];
    let mut s1 = vec![T::zero(); plane];
    let mut s2 = vec![T::zero(); plane];
    for n in 0..xs.n {
        let xn = x.sample(n);
        let gn = dout.sample(n);
        let m = &stats.mean[n * plane..(n + 1) * plane];
        let r = &stats.rstd[n * plane..(n + 1) * plane];
        s1.fill(T::zero());
        s2.fill(T::zero());
        for ch in 0..c {
            let src = &xn[ch * plane..(ch + 1) * plane];
            let gr = &gn[ch * plane..(ch + 1) * plane];
            let xh = &mut xhat[ch * plane..(ch + 1) * plane];
            let mut dg = T::zero();
            for p in 0..plane {
                xh[p] = (src[p] - m[p]) * r[p];
                let dxh = gr[p] * g[ch];
                s1[p] += dxh;
                s2[p] += dxh * xh[p];
                dg += gr[p] * xh[p];
            }
            dgamma[ch] += dg;
            dbeta[ch] += sum_slice(gr);
        }
        let dn = &mut dx.data_mut()[n * c * plane..(n + 1) * c * plane];
        for ch in 0..c {
            let gr = &gn[ch * plane..(ch + 1) * plane];
            let xh = &xhat[ch * plane..(ch + 1) * plane];
            let dst = &mut dn[ch * plane..(ch + 1) * plane];
            for p in 0..plane {
                let dxh = gr[p] * g[ch];
                dst[p] = r[p] * (dxh - s1[p] * inv_c - xh[p] * s2[p] * inv_c);
            }
        }
    }
    Ok((
        dx,
        Tensor::from_vec(gamma.shape(), dgamma)?,
        Tensor::from_vec(gamma.shape(), dbeta)?,
    ))
}

/// Channel-split gate: first half times second half.
pub fn simple_gate<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.c % 2 != 0 {
        return Err(Error::shape(format!(
            "simple gate needs an even channel count, got {}",
            xs.c
        )));
    }
    let half = xs.c / 2 * xs.plane();
    let mut out = Tensor::zeros([xs.n, xs.c / 2, xs.h, xs.w]);
    for_each_sample(out.data_mut(), half, |n, o| {
        let xn = x.sample(n);
        let (a, b) = xn.split_at(half);
        for ((ov, &av), &bv) in o.iter_mut().zip(a).zip(b) {
            *ov = av * bv;
        }
    });
    Ok(out)
}

pub fn simple_gate_backward<T: Real>(x: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let xs = x.shape();
    let half = xs.c / 2 * xs.plane();
    let mut dx = Tensor::zeros(xs);
    for_each_sample(dx.data_mut(), 2 * half, |n, d| {
        let xn = x.sample(n);
        let g = dout.sample(n);
        let (a, b) = xn.split_at(half);
        let (da, db) = d.split_at_mut(half);
        for i in 0..half {
            da[i] = g[i] * b[i];
            db[i] = g[i] * a[i];
        }
    });
    dx
}

/// Mean over the spatial extent: (N, C, H, W) -> (N, C, 1, 1).
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let xs = x.shape();
    let plane = xs.plane();
    let inv = T::of(1.0 / plane as f64);
    let data = x.data().chunks(plane).map(|p| sum_slice(p) * inv).collect();
    Tensor::from_vec([xs.n, xs.c, 1, 1], data).expect("pool shape")
}

pub fn global_avg_pool_backward<T: Real>(in_shape: Shape, dout: &Tensor<T>) -> Tensor<T> {
    let plane = in_shape.plane();
    let inv = T::of(1.0 / plane as f64);
    let mut dx = Tensor::zeros(in_shape);
    for (p, &g) in dx.data_mut().chunks_mut(plane).zip(dout.data()) {
        p.fill(g * inv);
    }
    dx
}

/// Multiply every plane of `x` by a per-(sample, channel) factor. `s` has
/// shape (N, C, 1, 1) or (1, C, 1, 1); the latter broadcasts over the batch.
pub fn channel_mul<T: Real>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ss) = (x.shape(), s.shape());
    if ss.c != xs.c || ss.h != 1 || ss.w != 1 || !(ss.n == xs.n || ss.n == 1) {
        return Err(Error::shape(format!("channel_mul: scale {ss} does not fit input {xs}")));
    }
    let plane = xs.plane();
    let mut out = x.clone();
    for (i, p) in out.data_mut().chunks_mut(plane).enumerate() {
        let (n, c) = (i / xs.c, i % xs.c);
        let f = s.data()[if ss.n == 1 { c } else { n * xs.c + c }];
        p.iter_mut().for_each(|v| *v = *v * f);
    }
    Ok(out)
}

pub fn channel_mul_backward<T: Real>(x: &Tensor<T>, s: &Tensor<T>, dout: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (xs, ss) = (x.shape(), s.shape());
    let plane = xs.plane();
    let mut dx = dout.clone();
    let mut ds = Tensor::zeros(ss);
    for (i, (p, xp)) in dx.data_mut().chunks_mut(plane).zip(x.data().chunks(plane)).enumerate() {
        let (n, c) = (i / xs.c, i % xs.c);
        let si = if ss.n == 1 { c } else { n * xs.c + c };
        let f = s.data()[si];
        ds.data_mut()[si] += dot(p, xp);
        p.iter_mut().for_each(|v| *v = *v * f);
    }
    (dx, ds)
}

/// Simplified channel attention: `x * pointwise(pool(x), w, b)` per channel.
pub fn simplified_channel_attention<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.shape().c;
    let ws = w.shape();
    if ws.n != c || ws.c != c {
        return Err(Error::shape(format!(
            "channel attention: weight {ws} does not map {c} channels to {c}"
        )));
    }
    let scale = conv2d(&global_avg_pool(x), w, b, ConvMode::Pointwise)?;
    channel_mul(x, &scale)
}

pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, dir: ShuffleDir, r: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    if r == 0 {
        return Err(Error::invalid("pixel shuffle factor must be positive"));
    }
    match dir {
        ShuffleDir::Up => {
            if xs.c % (r * r) != 0 {
                return Err(Error::shape(format!(
                    "pixel shuffle up: {} channels not divisible by {}",
                    xs.c,
                    r * r
                )));
            }
            let oc = xs.c / (r * r);
            let (oh, ow) = (xs.h * r, xs.w * r);
            let mut out = Tensor::zeros([xs.n, oc, oh, ow]);
            let od = out.data_mut();
            let xd = x.data();
            for n in 0..xs.n {
                for c in 0..oc {
                    for i in 0..r {
                        for j in 0..r {
                            let src_c = c * r * r + i * r + j;
                            let sbase = (n * xs.c + src_c) * xs.h * xs.w;
                            let dbase = (n * oc + c) * oh * ow;
                            for y in 0..xs.h {
                                for x in 0..xs.w {
                                    od[dbase + (y * r + i) * ow + x * r + j] = xd[sbase + y * xs.w + x];
                                }
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
        ShuffleDir::Down => {
            if xs.h % r != 0 || xs.w % r != 0 {
                return Err(Error::shape(format!(
                    "pixel shuffle down: spatial extents of {xs} not divisible by {r}"
                )));
            }
            let (oh, ow) = (xs.h / r, xs.w / r);
            let oc = xs.c * r * r;
            let mut out = Tensor::zeros([xs.n, oc, oh, ow]);
            let od = out.data_mut();
            let xd = x.data();
            for n in 0..xs.n {
                for c in 0..xs.c {
                    for i in 0..r {
                        for j in 0..r {
                            let dst_c = c * r * r + i * r + j;
                            let dbase = (n * oc + dst_c) * oh * ow;
                            let sbase = (n * xs.c + c) * xs.h * xs.w;
                            for y in 0..oh {
                                for x in 0..ow {
                                    od[dbase + y * ow + x] = xd[sbase + (y * r + i) * xs.w + x * r + j];
                                }
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Numerically stable softmax of a vector.
pub fn softmax<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax input contains non-finite values"));
    }
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// Flip each plane left-right.
pub fn flip_horizontal<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let w = x.shape().w;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Flip each plane top-bottom.
pub fn flip_vertical<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let xs = x.shape();
    let mut out = Tensor::zeros(xs);
    let w = xs.w;
    for (src, dst) in x.data().chunks(xs.plane()).zip(out.data_mut().chunks_mut(xs.plane())) {
        for y in 0..xs.h {
            dst[y * w..(y + 1) * w].copy_from_slice(&src[(xs.h - 1 - y) * w..(xs.h - y) * w]);
        }
    }
    out
}

pub(crate) fn elementwise<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    what: &str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    ensure_same(a.shape(), b.shape(), what)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}
