//! Forward/backward kernels for the non-convolutional operators.

use crate::{Element, Shape, Tensor};

fn spatial(shape: &Shape) -> usize {
    shape[2] * shape[3] * shape[4]
}

/// Per-sample, per-channel statistics of an instance normalization.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// `y = γ·(x − μ)/√(σ² + eps) + β`, statistics over the spatial axes of each
/// `(sample, channel)` slice.
pub fn instance_norm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, NormStats<T>) {
    let s = x.shape();
    let n = spatial(&s);
    let nt = T::of(n as f64);
    let mut y = Tensor::zeros(s);
    let mut stats = NormStats { mean: Vec::with_capacity(s[0] * s[1]), inv_std: Vec::with_capacity(s[0] * s[1]) };
    for (slice, (xs, ys)) in x.data().chunks(n).zip(y.data_mut().chunks_mut(n)).enumerate() {
        let c = slice % s[1];
        let mean = xs.iter().copied().sum::<T>() / nt;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
        let inv_std = T::one() / (var + eps).sqrt();
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for (yv, &xv) in ys.iter_mut().zip(xs) {
            *yv = g * (xv - mean) * inv_std + b;
        }
        stats.mean.push(mean);
        stats.inv_std.push(inv_std);
    }
    (y, stats)
}

/// Returns `(dx, dγ, dβ)`.
pub fn instance_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let n = spatial(&s);
    let nt = T::of(n as f64);
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    for (slice, ((xs, gs), dxs)) in x.data().chunks(n).zip(dy.data().chunks(n)).zip(dx.data_mut().chunks_mut(n)).enumerate() {
        let c = slice % s[1];
        let (mean, inv_std) = (stats.mean[slice], stats.inv_std[slice]);
        let g = gamma.data()[c];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for (&xv, &gv) in xs.iter().zip(gs) {
            let xhat = (xv - mean) * inv_std;
            sum_dy = sum_dy + gv;
            sum_dy_xhat = sum_dy_xhat + gv * xhat;
        }
        dgamma.data_mut()[c] = dgamma.data()[c] + sum_dy_xhat;
        dbeta.data_mut()[c] = dbeta.data()[c] + sum_dy;
        let k = g * inv_std / nt;
        for ((d, &xv), &gv) in dxs.iter_mut().zip(xs).zip(gs) {
            let xhat = (xv - mean) * inv_std;
            *d = k * (nt * gv - sum_dy - xhat * sum_dy_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Bin `i` of `m` over an axis of length `n`: `[⌊i·n/m⌋, ⌈(i+1)·n/m⌉)`.
pub fn adaptive_bin(i: usize, n: usize, m: usize) -> (usize, usize) {
    ((i * n) / m, ((i + 1) * n).div_ceil(m))
}

/// Adaptive max pooling over `(H, W)` to `(th, tw)`; the depth axis is kept.
/// Returns the pooled tensor and the flat source index of every output.
pub fn adaptive_max_pool_hw<T: Element>(x: &Tensor<T>, th: usize, tw: usize) -> (Tensor<T>, Vec<usize>) {
    let s = x.shape();
    assert!(th >= 1 && tw >= 1 && th <= s[2] && tw <= s[3], "adaptive pool target ({th},{tw}) for {s:?}");
    let out_shape = [s[0], s[1], th, tw, s[4]];
    let mut out = Tensor::zeros(out_shape);
    let mut arg = vec![0usize; out.len()];
    let mut o = 0;
    for b in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..th {
                let (h0, h1) = adaptive_bin(i, s[2], th);
                for j in 0..tw {
                    let (w0, w1) = adaptive_bin(j, s[3], tw);
                    for d in 0..s[4] {
                        let mut best = x.offset([b, c, h0, w0, d]);
                        for h in h0..h1 {
                            for w in w0..w1 {
                                let off = x.offset([b, c, h, w, d]);
                                if x.data()[off] > x.data()[best] {
                                    best = off;
                                }
                            }
                        }
                        out.data_mut()[o] = x.data()[best];
                        arg[o] = best;
                        o += 1;
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn scatter_argmax<T: Element>(input_shape: Shape, arg: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&src, &g) in arg.iter().zip(grad.data()) {
        dx.data_mut()[src] = dx.data()[src] + g;
    }
    dx
}

/// Nearest-neighbour upsampling by integer factors along `(H, W, D)`.
pub fn upsample_nearest<T: Element>(x: &Tensor<T>, f: [usize; 3]) -> Tensor<T> {
    let s = x.shape();
    let out = [s[0], s[1], s[2] * f[0], s[3] * f[1], s[4] * f[2]];
    Tensor::from_fn(out, |[b, c, h, w, d]| x.at([b, c, h / f[0], w / f[1], d / f[2]]))
}

pub fn upsample_nearest_backward<T: Element>(input_shape: Shape, f: [usize; 3], grad: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let gs = grad.shape();
    for b in 0..gs[0] {
        for c in 0..gs[1] {
            for h in 0..gs[2] {
                for w in 0..gs[3] {
                    for d in 0..gs[4] {
                        let src = dx.offset([b, c, h / f[0], w / f[1], d / f[2]]);
                        dx.data_mut()[src] = dx.data()[src] + grad.at([b, c, h, w, d]);
                    }
                }
            }
        }
    }
    dx
}

/// Mean over the depth axis; output depth is exactly 1.
pub fn mean_depth<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let d = s[4];
    let inv = T::one() / T::of(d as f64);
    let data = x.data().chunks(d).map(|col| col.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec([s[0], s[1], s[2], s[3], 1], data).expect("shape by construction")
}

pub fn mean_depth_backward<T: Element>(input_shape: Shape, grad: &Tensor<T>) -> Tensor<T> {
    let d = input_shape[4];
    let inv = T::one() / T::of(d as f64);
    let mut data = Vec::with_capacity(grad.len() * d);
    for &g in grad.data() {
        data.extend(std::iter::repeat_n(g * inv, d));
    }
    Tensor::from_vec(input_shape, data).expect("shape by construction")
}

/// Concatenation along the channel axis.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Tensor<T> {
    assert!(!parts.is_empty());
    let s0 = parts[0].shape();
    for p in parts {
        let s = p.shape();
        assert!(s[0] == s0[0] && s[2..] == s0[2..], "concat shape mismatch {s:?} vs {s0:?}");
    }
    let channels: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let per = spatial(&s0);
    let mut data = Vec::with_capacity(s0[0] * channels * per);
    for b in 0..s0[0] {
        for p in parts {
            let c = p.shape()[1];
            data.extend_from_slice(&p.data()[b * c * per..(b + 1) * c * per]);
        }
    }
    Tensor::from_vec([s0[0], channels, s0[2], s0[3], s0[4]], data).expect("shape by construction")
}

pub fn split_channels<T: Element>(grad: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let s = grad.shape();
    let per = spatial(&s);
    let mut outs: Vec<Vec<T>> = channels.iter().map(|c| Vec::with_capacity(s[0] * c * per)).collect();
    let mut offset = 0;
    for b in 0..s[0] {
        let _ = b;
        for (o, &c) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&grad.data()[offset..offset + c * per]);
            offset += c * per;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec([s[0], c, s[2], s[3], s[4]], d).expect("shape by construction"))
        .collect()
}

pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
