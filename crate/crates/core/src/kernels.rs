//! Numeric kernels behind the autograd ops. All inputs are `[N, C, H, W]`.

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_out_size(size: usize, kernel: usize, g: ConvGeometry) -> usize {
    (size + 2 * g.pad - kernel) / g.stride + 1
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// Copies one sample into a zero-padded `[C, H + 2p, W + 2p]` buffer.
fn pad_sample<T: Real>(src: &[T], c: usize, h: usize, w: usize, pad: usize, buf: &mut Vec<T>) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    buf.clear();
    buf.resize(c * ph * pw, T::zero());
    for ch in 0..c {
        for y in 0..h {
            let d = ch * ph * pw + (y + pad) * pw + pad;
            buf[d..d + w].copy_from_slice(&src[ch * h * w + y * w..][..w]);
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Tensor<T> {
    let (n, ci, h, w) = x.dims4();
    let (co, wci, k, k2) = weight.dims4();
    assert_eq!(ci, wci, "conv input channels");
    assert_eq!(k, k2, "square kernels only");
    let (ho, wo) = (conv_out_size(h, k, g), conv_out_size(w, k, g));
    let (ph, pw) = (h + 2 * g.pad, w + 2 * g.pad);
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let wd = weight.data();
    let mut buf = Vec::new();
    let out_per = co * ho * wo;
    for s in 0..n {
        pad_sample(x.sample(s), ci, h, w, g.pad, &mut buf);
        let od = &mut out.data_mut()[s * out_per..(s + 1) * out_per];
        for o in 0..co {
            let plane = &mut od[o * ho * wo..(o + 1) * ho * wo];
            if let Some(b) = bias {
                let bv = b.data()[o];
                plane.iter_mut().for_each(|v| *v = bv);
            }
            for i in 0..ci {
                let pin = &buf[i * ph * pw..(i + 1) * ph * pw];
                let kw = &wd[(o * ci + i) * k * k..][..k * k];
                for y in 0..ho {
                    let dst = &mut plane[y * wo..(y + 1) * wo];
                    for ky in 0..k {
                        let row = &pin[(y * g.stride + ky) * pw..][..pw];
                        if g.stride == 1 && k == 3 {
                            let (a, b, c) = (kw[ky * 3], kw[ky * 3 + 1], kw[ky * 3 + 2]);
                            for (((d, &s0), &s1), &s2) in dst
                                .iter_mut()
                                .zip(&row[0..wo])
                                .zip(&row[1..wo + 1])
                                .zip(&row[2..wo + 2])
                            {
                                *d += a * s0 + b * s1 + c * s2;
                            }
                        } else if g.stride == 1 {
                            for kx in 0..k {
                                axpy(dst, kw[ky * k + kx], &row[kx..kx + wo]);
                            }
                        } else {
                            for kx in 0..k {
                                let a = kw[ky * k + kx];
                                for (xo, d) in dst.iter_mut().enumerate() {
                                    *d += a * row[xo * g.stride + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates `d_weight` for a 3x3 stride-1 kernel over one (out, in)
/// channel pair with lane-wise accumulators.
fn weight_grad3<T: Real>(gplane: &[T], pin: &[T], ho: usize, wo: usize, pw: usize, out: &mut [T]) {
    let full = wo / 8 * 8;
    for ky in 0..3 {
        let mut acc = [[T::zero(); 8]; 3];
        let mut tail = [T::zero(); 3];
        for y in 0..ho {
            let grow = &gplane[y * wo..(y + 1) * wo];
            let row = &pin[(y + ky) * pw..][..pw];
            for x in (0..full).step_by(8) {
                let g8: &[T; 8] = grow[x..x + 8].try_into().expect("8 lanes");
                for (kx, a) in acc.iter_mut().enumerate() {
                    let r8: &[T; 8] = row[x + kx..x + kx + 8].try_into().expect("8 lanes");
                    for l in 0..8 {
                        a[l] += g8[l] * r8[l];
                    }
                }
            }
            for x in full..wo {
                for (kx, t) in tail.iter_mut().enumerate() {
                    *t += grow[x] * row[x + kx];
                }
            }
        }
        for kx in 0..3 {
            let a = &acc[kx];
            out[ky * 3 + kx] += ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7])) + tail[kx];
        }
    }
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeometry,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, ci, h, w) = x.dims4();
    let (co, _, k, _) = weight.dims4();
    let (_, _, ho, wo) = grad_out.dims4();
    let (ph, pw) = (h + 2 * g.pad, w + 2 * g.pad);
    let wd = weight.data();
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[co]);

    // Stride-1 input gradients are a full correlation of the output gradient
    // with the spatially flipped, channel-transposed kernel.
    let stride1 = g.stride == 1 && k > g.pad;
    let mut gx = None;
    if need_input_grad && stride1 {
        let mut flipped = Tensor::zeros(&[ci, co, k, k]);
        let fd = flipped.data_mut();
        for o in 0..co {
            for i in 0..ci {
                for ky in 0..k {
                    for kx in 0..k {
                        fd[((i * co + o) * k + ky) * k + kx] = wd[((o * ci + i) * k + (k - 1 - ky)) * k + (k - 1 - kx)];
                    }
                }
            }
        }
        let geom = ConvGeometry {
            stride: 1,
            pad: k - 1 - g.pad,
        };
        gx = Some(conv2d_forward(grad_out, &flipped, None, geom));
    } else if need_input_grad {
        gx = Some(Tensor::zeros(x.shape()));
    }
    let strided_input_grad = need_input_grad && !stride1;

    let mut buf = Vec::new();
    let mut gpad: Vec<T> = Vec::new();
    for s in 0..n {
        pad_sample(x.sample(s), ci, h, w, g.pad, &mut buf);
        if strided_input_grad {
            gpad.clear();
            gpad.resize(ci * ph * pw, T::zero());
        }
        let go = grad_out.sample(s);
        for o in 0..co {
            let gplane = &go[o * ho * wo..(o + 1) * ho * wo];
            gb.data_mut()[o] += gplane.iter().copied().sum::<T>();
            for i in 0..ci {
                let pin = &buf[i * ph * pw..(i + 1) * ph * pw];
                let widx = (o * ci + i) * k * k;
                if g.stride == 1 && k == 3 {
                    weight_grad3(gplane, pin, ho, wo, pw, &mut gw.data_mut()[widx..widx + 9]);
                } else {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = T::zero();
                            for y in 0..ho {
                                let grow = &gplane[y * wo..(y + 1) * wo];
                                let row = &pin[(y * g.stride + ky) * pw..][..pw];
                                if g.stride == 1 {
                                    acc += dot(grow, &row[kx..kx + wo]);
                                } else {
                                    for (xo, &gv) in grow.iter().enumerate() {
                                        acc += gv * row[xo * g.stride + kx];
                                    }
                                }
                            }
                            gw.data_mut()[widx + ky * k + kx] += acc;
                        }
                    }
                }
                if strided_input_grad {
                    let gp = &mut gpad[i * ph * pw..(i + 1) * ph * pw];
                    for ky in 0..k {
                        for kx in 0..k {
                            let a = wd[widx + ky * k + kx];
                            for y in 0..ho {
                                let grow = &gplane[y * wo..(y + 1) * wo];
                                let base = (y * g.stride + ky) * pw + kx;
                                for (xo, &gv) in grow.iter().enumerate() {
                                    gp[base + xo * g.stride] += a * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        if strided_input_grad {
            let gx = gx.as_mut().expect("allocated");
            let per = ci * h * w;
            let dst = &mut gx.data_mut()[s * per..(s + 1) * per];
            for ch in 0..ci {
                for y in 0..h {
                    let src = ch * ph * pw + (y + g.pad) * pw + g.pad;
                    dst[ch * h * w + y * w..][..w].copy_from_slice(&gpad[src..src + w]);
                }
            }
        }
    }
    (gx, gw, gb)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat input index of the selected maximum.
pub fn max_pool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * ho * wo;
        for y in 0..ho {
            for xx in 0..wo {
                let mut best = ib + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ib + (2 * y + dy) * w + 2 * xx + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                od[ob + y * wo + xx] = xd[best];
                arg[ob + y * wo + xx] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let gd = gx.data_mut();
    for (&a, &g) in argmax.iter().zip(grad_out.data()) {
        gd[a as usize] += g;
    }
    gx
}

pub fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        for y in 0..2 * h {
            let src = &xd[nc * h * w + (y / 2) * w..][..w];
            let dst = &mut od[nc * 4 * h * w + y * 2 * w..][..2 * w];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = grad_out.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    let gd = grad_out.data();
    let xd = gx.data_mut();
    for nc in 0..n * c {
        for y in 0..h2 {
            for xx in 0..w2 {
                xd[nc * h * w + (y / 2) * w + xx / 2] += gd[nc * h2 * w2 + y * w2 + xx];
            }
        }
    }
    gx
}

/// Softmax over the channel axis.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = x.clone();
    for s in 0..n {
        let d = &mut out.data_mut()[s * c * hw..(s + 1) * c * hw];
        for p in 0..hw {
            let mut m = d[p];
            for k in 1..c {
                m = m.max(d[k * hw + p]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (d[k * hw + p] - m).exp();
                d[k * hw + p] = e;
                z += e;
            }
            for k in 0..c {
                d[k * hw + p] = d[k * hw + p] / z;
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Real>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = probs.dims4();
    let hw = h * w;
    let mut gx = Tensor::zeros(probs.shape());
    for s in 0..n {
        let p = probs.sample(s);
        let g = grad_out.sample(s);
        let base = s * c * hw;
        let gd = gx.data_mut();
        for px in 0..hw {
            let mut inner = T::zero();
            for k in 0..c {
                inner += g[k * hw + px] * p[k * hw + px];
            }
            for k in 0..c {
                gd[base + k * hw + px] = p[k * hw + px] * (g[k * hw + px] - inner);
            }
        }
    }
    gx
}

/// Concatenates two tensors along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * hw);
    for s in 0..n {
        data.extend_from_slice(a.sample(s));
        data.extend_from_slice(b.sample(s));
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data).expect("concat shape")
}

pub fn split_channels<T: Real>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = g.dims4();
    let hw = h * w;
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * ca * hw);
    let mut b = Vec::with_capacity(n * cb * hw);
    for s in 0..n {
        let d = g.sample(s);
        a.extend_from_slice(&d[..ca * hw]);
        b.extend_from_slice(&d[ca * hw..]);
    }
    (
        Tensor::from_vec(&[n, ca, h, w], a).expect("split shape"),
        Tensor::from_vec(&[n, cb, h, w], b).expect("split shape"),
    )
}
