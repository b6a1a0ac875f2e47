//! Direct 3D convolution via chunked im2col and gemm.
//!
//! A planar (2D) convolution is the same kernel with `kd = 1`, `D = 1`.
//! Weights are laid out `(C_out, C_in, kh, kw, kd)`, biases `(1, C_out, 1, 1, 1)`.

use crate::element::{gemm, MatMut, MatRef};
use crate::{Element, Shape, Tensor};

/// Target number of output positions per im2col chunk.
const CHUNK_POSITIONS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Kernel `k` along each axis given, `same` padding, unit stride.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self { kernel, stride: [1; 3], padding: kernel.map(|k| k / 2) }
    }

    pub fn pointwise() -> Self {
        Self { kernel: [1; 3], stride: [1; 3], padding: [0; 3] }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Spatial output extent, or `None` when the kernel does not fit.
    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if span < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }
}

struct Layout {
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
    geo: ConvGeometry,
}

impl Layout {
    fn new(x: Shape, w: Shape, geo: ConvGeometry) -> Self {
        assert_eq!(x[1], w[1], "conv input channels {} vs weight {:?}", x[1], w);
        assert_eq!([w[2], w[3], w[4]], geo.kernel, "weight shape {:?} vs kernel {:?}", w, geo.kernel);
        let input = [x[2], x[3], x[4]];
        let output = geo
            .output_dims(input)
            .unwrap_or_else(|| panic!("kernel {:?} does not fit input {:?}", geo.kernel, input));
        Self { cin: x[1], cout: w[0], input, output, geo }
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn k(&self) -> usize {
        self.cin * self.geo.taps()
    }

    fn planes_per_chunk(&self) -> usize {
        (CHUNK_POSITIONS / self.out_plane().max(1)).clamp(1, self.output[0].max(1))
    }

    /// Output depth range `[lo, hi)` whose input index `do·s + c − p` is valid.
    fn depth_range(&self, c: usize) -> (usize, usize) {
        valid_range(self.output[2], self.input[2], self.geo.stride[2], c, self.geo.padding[2])
    }
}

fn valid_range(out_len: usize, in_len: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    // o·stride + tap − pad ∈ [0, in_len)
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > tap { (in_len + pad - tap - 1) / stride + 1 } else { 0 };
    (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
}

/// Fills `col` (`K × planes·Wo·Do`) for output planes `[h0, h0 + planes)`.
fn im2col<T: Element>(x: &[T], l: &Layout, h0: usize, planes: usize, col: &mut [T]) {
    let [h_in, w_in, d_in] = l.input;
    let [_, wo_n, do_n] = l.output;
    let [kh, kw, kd] = l.geo.kernel;
    let [sh, sw, sd] = l.geo.stride;
    let [ph, pw, _] = l.geo.padding;
    let pc = planes * wo_n * do_n;
    let mut row = 0;
    for ci in 0..l.cin {
        let xc = &x[ci * l.in_volume()..(ci + 1) * l.in_volume()];
        for a in 0..kh {
            for b in 0..kw {
                let (wlo, whi) = valid_range(wo_n, w_in, sw, b, pw);
                for c in 0..kd {
                    let (dlo, dhi) = l.depth_range(c);
                    let dst = &mut col[row * pc..(row + 1) * pc];
                    let mut idx = 0;
                    for ho in h0..h0 + planes {
                        let hi = (ho * sh + a) as isize - ph as isize;
                        if hi < 0 || hi >= h_in as isize {
                            dst[idx..idx + wo_n * do_n].fill(T::zero());
                            idx += wo_n * do_n;
                            continue;
                        }
                        for wo in 0..wo_n {
                            if wo < wlo || wo >= whi {
                                dst[idx..idx + do_n].fill(T::zero());
                                idx += do_n;
                                continue;
                            }
                            let wi = wo * sw + b - pw;
                            let base = (hi as usize * w_in + wi) * d_in;
                            let seg = &mut dst[idx..idx + do_n];
                            seg[..dlo].fill(T::zero());
                            seg[dhi..].fill(T::zero());
                            if sd == 1 {
                                let start = base + dlo + c - l.geo.padding[2];
                                seg[dlo..dhi].copy_from_slice(&xc[start..start + (dhi - dlo)]);
                            } else {
                                for (o, s) in seg[dlo..dhi].iter_mut().enumerate() {
                                    *s = xc[base + (o + dlo) * sd + c - l.geo.padding[2]];
                                }
                            }
                            idx += do_n;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `col` back into the input gradient; adjoint of [`im2col`].
fn col2im<T: Element>(col: &[T], l: &Layout, h0: usize, planes: usize, dx: &mut [T]) {
    let [h_in, w_in, d_in] = l.input;
    let [_, wo_n, do_n] = l.output;
    let [kh, kw, kd] = l.geo.kernel;
    let [sh, sw, sd] = l.geo.stride;
    let [ph, pw, pd] = l.geo.padding;
    let pc = planes * wo_n * do_n;
    let mut row = 0;
    for ci in 0..l.cin {
        let dxc = &mut dx[ci * l.in_volume()..(ci + 1) * l.in_volume()];
        for a in 0..kh {
            for b in 0..kw {
                let (wlo, whi) = valid_range(wo_n, w_in, sw, b, pw);
                for c in 0..kd {
                    let (dlo, dhi) = l.depth_range(c);
                    let src = &col[row * pc..(row + 1) * pc];
                    for (p, ho) in (h0..h0 + planes).enumerate() {
                        let hi = (ho * sh + a) as isize - ph as isize;
                        if hi < 0 || hi >= h_in as isize {
                            continue;
                        }
                        for wo in wlo..whi {
                            let wi = wo * sw + b - pw;
                            let base = (hi as usize * w_in + wi) * d_in;
                            let seg = &src[(p * wo_n + wo) * do_n..(p * wo_n + wo + 1) * do_n];
                            for od in dlo..dhi {
                                let t = &mut dxc[base + od * sd + c - pd];
                                *t = *t + seg[od];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Convolution forward pass.
pub fn conv_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, geo: ConvGeometry) -> Tensor<T> {
    let xs = x.shape();
    let l = Layout::new(xs, w.shape(), geo);
    let [ho, wo, dout] = l.output;
    let mut out = Tensor::zeros([xs[0], l.cout, ho, wo, dout]);
    let p = l.positions();
    let k = l.k();
    let in_per = l.cin * l.in_volume();
    let wmat = MatRef::row_major(w.data(), l.cout, k);
    let ppc = l.planes_per_chunk();
    let mut col = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * ppc * l.out_plane()] };
    for b in 0..xs[0] {
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        let ob = &mut out.data_mut()[b * l.cout * p..(b + 1) * l.cout * p];
        if geo.is_pointwise() {
            gemm(T::one(), wmat, MatRef::row_major(xb, k, p), T::zero(), MatMut::row_major(ob, l.cout, p));
        } else {
            let mut h0 = 0;
            while h0 < ho {
                let planes = ppc.min(ho - h0);
                let pc = planes * l.out_plane();
                im2col(xb, &l, h0, planes, &mut col[..k * pc]);
                let off = h0 * l.out_plane();
                let c = MatMut { data: &mut ob[off..], rows: l.cout, cols: pc, rs: p, cs: 1 };
                gemm(T::one(), wmat, MatRef::row_major(&col[..k * pc], k, pc), T::zero(), c);
                h0 += planes;
            }
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                for v in &mut ob[co * p..(co + 1) * p] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution: `(dx, dw, db)`. `dx` is skipped when not needed.
pub fn conv_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geo: ConvGeometry,
    grad_out: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let l = Layout::new(xs, w.shape(), geo);
    let p = l.positions();
    let k = l.k();
    let ho = l.output[0];
    let in_per = l.cin * l.in_volume();
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([1, l.cout, 1, 1, 1]);
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let wmat = MatRef::row_major(w.data(), l.cout, k);
    let ppc = l.planes_per_chunk();
    let mut col = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * ppc * l.out_plane()] };
    let mut dcol = if geo.is_pointwise() || !need_dx { Vec::new() } else { vec![T::zero(); k * ppc * l.out_plane()] };
    for b in 0..xs[0] {
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        let gb = &grad_out.data()[b * l.cout * p..(b + 1) * l.cout * p];
        for co in 0..l.cout {
            let s: T = gb[co * p..(co + 1) * p].iter().copied().sum();
            db.data_mut()[co] = db.data()[co] + s;
        }
        if geo.is_pointwise() {
            let g = MatRef::row_major(gb, l.cout, p);
            gemm(T::one(), g, MatRef::row_major(xb, k, p).t(), T::one(), MatMut::row_major(dw.data_mut(), l.cout, k));
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx.data_mut()[b * in_per..(b + 1) * in_per];
                gemm(T::one(), wmat.t(), g, T::zero(), MatMut::row_major(dxb, k, p));
            }
            continue;
        }
        let mut h0 = 0;
        while h0 < ho {
            let planes = ppc.min(ho - h0);
            let pc = planes * l.out_plane();
            let off = h0 * l.out_plane();
            let g = MatRef { data: &gb[off..], rows: l.cout, cols: pc, rs: p, cs: 1 };
            im2col(xb, &l, h0, planes, &mut col[..k * pc]);
            gemm(
                T::one(),
                g,
                MatRef::row_major(&col[..k * pc], k, pc).t(),
                T::one(),
                MatMut::row_major(dw.data_mut(), l.cout, k),
            );
            if let Some(dx) = dx.as_mut() {
                gemm(T::one(), wmat.t(), g, T::zero(), MatMut::row_major(&mut dcol[..k * pc], k, pc));
                let dxb = &mut dx.data_mut()[b * in_per..(b + 1) * in_per];
                col2im(&dcol[..k * pc], &l, h0, planes, dxb);
            }
            h0 += planes;
        }
    }
    (dx, dw, db)
}
