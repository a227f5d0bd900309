//! Layers with hand-written backward passes.
//!
//! Parameters live in one flat `f64` buffer per generator; each layer stores
//! the offsets of its weights. Forward passes return a cache consumed by the
//! matching backward pass, which accumulates into a gradient buffer laid out
//! exactly like the parameters.

use rand::Rng;

pub(crate) const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

/// Channel-major feature map, `data[c*h*w + y*w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Feature {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Feature {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }
}

/// Hands out consecutive parameter ranges while a network is being laid out.
#[derive(Debug, Default)]
pub(crate) struct Layout {
    len: usize,
}

impl Layout {
    fn take(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }

    pub fn len(&self) -> usize {
        self.len
    }
}

fn fill_uniform<R: Rng + ?Sized>(dst: &mut [f64], bound: f64, rng: &mut R) {
    for v in dst {
        *v = rng.random_range(-bound..bound);
    }
}

#[inline]
pub(crate) fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given shapes and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square-kernel convolution with zero padding.
#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub w_off: usize,
    pub b_off: usize,
}

pub(crate) struct ConvCache {
    cols: Vec<f64>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    pub fn new(layout: &mut Layout, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let w_off = layout.take(cout * cin * kernel * kernel);
        let b_off = layout.take(cout);
        Conv2d {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            w_off,
            b_off,
        }
    }

    fn patch(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.w_off..self.w_off + self.cout * self.patch()
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.b_off..self.b_off + self.cout
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        let bound = 1.0 / (self.patch() as f64).sqrt();
        fill_uniform(&mut params[self.weight_range()], bound, rng);
        fill_uniform(&mut params[self.bias_range()], bound, rng);
    }

    fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &Feature, out_h: usize, out_w: usize) -> Vec<f64> {
        let k = self.kernel;
        let npix = out_h * out_w;
        let mut cols = vec![0.0; self.patch() * npix];
        for c in 0..self.cin {
            let src = x.channel(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * npix..(row + 1) * npix];
                    for oy in 0..out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], cache: &ConvCache) -> Feature {
        let k = self.kernel;
        let (out_h, out_w) = (cache.out_h, cache.out_w);
        let npix = out_h * out_w;
        let mut dx = Feature::zeros(self.cin, cache.in_h, cache.in_w);
        let plane = dx.plane();
        for c in 0..self.cin {
            let dst = &mut dx.data[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * npix..(row + 1) * npix];
                    for oy in 0..out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= cache.in_h as isize {
                            continue;
                        }
                        let base = iy as usize * cache.in_w;
                        for ox in 0..out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < cache.in_w as isize {
                                dst[base + ix as usize] += src[oy * out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], x: &Feature) -> (Feature, ConvCache) {
        debug_assert_eq!(x.c, self.cin);
        let out_h = self.out_size(x.h);
        let out_w = self.out_size(x.w);
        let npix = out_h * out_w;
        let cols = self.im2col(x, out_h, out_w);
        let mut out = Feature::zeros(self.cout, out_h, out_w);
        let bias = &params[self.bias_range()];
        for (c, b) in bias.iter().enumerate() {
            out.data[c * npix..(c + 1) * npix].fill(*b);
        }
        let patch = self.patch();
        gemm(
            self.cout,
            patch,
            npix,
            &params[self.weight_range()],
            (patch as isize, 1),
            &cols,
            (npix as isize, 1),
            1.0,
            &mut out.data,
        );
        let cache = ConvCache {
            cols,
            in_h: x.h,
            in_w: x.w,
            out_h,
            out_w,
        };
        (out, cache)
    }

    pub fn backward(
        &self,
        params: &[f64],
        cache: &ConvCache,
        dy: &Feature,
        grads: &mut [f64],
    ) -> Feature {
        let npix = cache.out_h * cache.out_w;
        let patch = self.patch();
        for c in 0..self.cout {
            grads[self.b_off + c] += dy.data[c * npix..(c + 1) * npix].iter().sum::<f64>();
        }
        // dW (cout x patch) += dy (cout x npix) * cols^T (npix x patch)
        gemm(
            self.cout,
            npix,
            patch,
            &dy.data,
            (npix as isize, 1),
            &cache.cols,
            (1, npix as isize),
            1.0,
            &mut grads[self.weight_range()],
        );
        // dcols (patch x npix) = W^T (patch x cout) * dy (cout x npix)
        let mut dcols = vec![0.0; patch * npix];
        gemm(
            patch,
            self.cout,
            npix,
            &params[self.weight_range()],
            (1, patch as isize),
            &dy.data,
            (npix as isize, 1),
            0.0,
            &mut dcols,
        );
        self.col2im(&dcols, cache)
    }
}

/// Per-channel normalization over spatial positions with learned affine.
#[derive(Debug, Clone)]
pub(crate) struct ChannelNorm {
    pub channels: usize,
    pub gamma_off: usize,
    pub beta_off: usize,
}

pub(crate) struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl ChannelNorm {
    pub fn new(layout: &mut Layout, channels: usize) -> Self {
        ChannelNorm {
            channels,
            gamma_off: layout.take(channels),
            beta_off: layout.take(channels),
        }
    }

    pub fn init(&self, params: &mut [f64]) {
        params[self.gamma_off..self.gamma_off + self.channels].fill(1.0);
        params[self.beta_off..self.beta_off + self.channels].fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &Feature) -> (Feature, NormCache) {
        let p = x.plane();
        let n = p as f64;
        let mut out = Feature::zeros(x.c, x.h, x.w);
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; x.c];
        for c in 0..x.c {
            let src = x.channel(c);
            let mean = src.iter().sum::<f64>() / n;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[c] = is;
            let g = params[self.gamma_off + c];
            let b = params[self.beta_off + c];
            for (idx, v) in src.iter().enumerate() {
                let h = (v - mean) * is;
                xhat[c * p + idx] = h;
                out.data[c * p + idx] = g * h + b;
            }
        }
        (out, NormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        params: &[f64],
        cache: &NormCache,
        dy: &Feature,
        grads: &mut [f64],
    ) -> Feature {
        let p = dy.plane();
        let n = p as f64;
        let mut dx = Feature::zeros(dy.c, dy.h, dy.w);
        for c in 0..dy.c {
            let g = params[self.gamma_off + c];
            let dys = &dy.data[c * p..(c + 1) * p];
            let xh = &cache.xhat[c * p..(c + 1) * p];
            let mut sum_dy = 0.0;
            let mut sum_dy_xh = 0.0;
            for (d, h) in dys.iter().zip(xh) {
                sum_dy += d;
                sum_dy_xh += d * h;
            }
            grads[self.gamma_off + c] += sum_dy_xh;
            grads[self.beta_off + c] += sum_dy;
            let scale = g * cache.inv_std[c] / n;
            for ((o, d), h) in dx.data[c * p..(c + 1) * p].iter_mut().zip(dys).zip(xh) {
                *o = scale * (n * d - sum_dy - h * sum_dy_xh);
            }
        }
        dx
    }
}

pub(crate) fn leaky_forward(x: &Feature) -> Feature {
    Feature {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|v| leaky(*v)).collect(),
    }
}

/// Backward through a leaky rectifier given its pre-activation input.
pub(crate) fn leaky_backward(pre: &Feature, dy: &Feature) -> Feature {
    Feature {
        c: dy.c,
        h: dy.h,
        w: dy.w,
        data: pre
            .data
            .iter()
            .zip(&dy.data)
            .map(|(x, d)| d * leaky_grad(*x))
            .collect(),
    }
}

/// Nearest-neighbour 2x upsampling cropped to `(h, w)`.
pub(crate) fn upsample_to(x: &Feature, h: usize, w: usize) -> Feature {
    let mut out = Feature::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.channel(c);
        for y in 0..h {
            let sy = (y / 2).min(x.h - 1);
            for xx in 0..w {
                let sx = (xx / 2).min(x.w - 1);
                out.data[(c * h + y) * w + xx] = src[sy * x.w + sx];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(dy: &Feature, src_h: usize, src_w: usize) -> Feature {
    let mut dx = Feature::zeros(dy.c, src_h, src_w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            let sy = (y / 2).min(src_h - 1);
            for xx in 0..dy.w {
                let sx = (xx / 2).min(src_w - 1);
                dx.data[(c * src_h + sy) * src_w + sx] += dy.data[(c * dy.h + y) * dy.w + xx];
            }
        }
    }
    dx
}

pub(crate) fn concat(a: &Feature, b: &Feature) -> Feature {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feature {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub(crate) fn split(dy: &Feature, first: usize) -> (Feature, Feature) {
    let cut = first * dy.plane();
    (
        Feature {
            c: first,
            h: dy.h,
            w: dy.w,
            data: dy.data[..cut].to_vec(),
        },
        Feature {
            c: dy.c - first,
            h: dy.h,
            w: dy.w,
            data: dy.data[cut..].to_vec(),
        },
    )
}

/// Fully connected layer, `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone)]
pub(crate) struct Dense {
    pub input: usize,
    pub output: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Dense {
    pub fn new(layout: &mut Layout, input: usize, output: usize) -> Self {
        Dense {
            input,
            output,
            w_off: layout.take(input * output),
            b_off: layout.take(output),
        }
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.w_off..self.w_off + self.input * self.output
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.b_off..self.b_off + self.output
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        let bound = 1.0 / (self.input as f64).sqrt();
        fill_uniform(&mut params[self.weight_range()], bound, rng);
        fill_uniform(&mut params[self.bias_range()], bound, rng);
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = &params[self.weight_range()];
        (0..self.output)
            .map(|o| {
                let row = &w[o * self.input..(o + 1) * self.input];
                params[self.b_off + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.input];
        for (o, d) in dy.iter().enumerate() {
            grads[self.b_off + o] += d;
            let row = self.w_off + o * self.input;
            for i in 0..self.input {
                grads[row + i] += d * x[i];
                dx[i] += d * params[row + i];
            }
        }
        dx
    }
}

/// Squeeze-and-excitation channel gate: global average pool, dense, leaky,
/// dense, sigmoid, per-channel rescale.
#[derive(Debug, Clone)]
pub(crate) struct ChannelAttention {
    pub squeeze: Dense,
    pub excite: Dense,
}

pub(crate) struct AttentionCache {
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    gate: Vec<f64>,
}

impl ChannelAttention {
    pub fn new(layout: &mut Layout, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(4);
        ChannelAttention {
            squeeze: Dense::new(layout, channels, hidden),
            excite: Dense::new(layout, hidden, channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        self.squeeze.init(params, rng);
        self.excite.init(params, rng);
    }

    pub fn forward(&self, params: &[f64], x: &Feature) -> (Feature, AttentionCache) {
        let p = x.plane();
        let pooled: Vec<f64> = (0..x.c)
            .map(|c| x.channel(c).iter().sum::<f64>() / p as f64)
            .collect();
        let hidden_pre = self.squeeze.forward(params, &pooled);
        let hidden: Vec<f64> = hidden_pre.iter().map(|v| leaky(*v)).collect();
        let gate: Vec<f64> = self
            .excite
            .forward(params, &hidden)
            .into_iter()
            .map(sigmoid)
            .collect();
        let mut out = x.clone();
        for (c, g) in gate.iter().enumerate() {
            for v in &mut out.data[c * p..(c + 1) * p] {
                *v *= g;
            }
        }
        let cache = AttentionCache {
            pooled,
            hidden_pre,
            hidden,
            gate,
        };
        (out, cache)
    }

    pub fn backward(
        &self,
        params: &[f64],
        x: &Feature,
        cache: &AttentionCache,
        dy: &Feature,
        grads: &mut [f64],
    ) -> Feature {
        let p = x.plane();
        let mut dx = Feature::zeros(x.c, x.h, x.w);
        let mut dgate_pre = vec![0.0; x.c];
        for c in 0..x.c {
            let g = cache.gate[c];
            let dys = &dy.data[c * p..(c + 1) * p];
            let mut dg = 0.0;
            for ((o, d), v) in dx.data[c * p..(c + 1) * p]
                .iter_mut()
                .zip(dys)
                .zip(x.channel(c))
            {
                *o = d * g;
                dg += d * v;
            }
            dgate_pre[c] = dg * g * (1.0 - g);
        }
        let dhidden = self
            .excite
            .backward(params, &cache.hidden, &dgate_pre, grads);
        let dhidden_pre: Vec<f64> = dhidden
            .iter()
            .zip(&cache.hidden_pre)
            .map(|(d, h)| d * leaky_grad(*h))
            .collect();
        let dpooled = self
            .squeeze
            .backward(params, &cache.pooled, &dhidden_pre, grads);
        for (c, dp) in dpooled.iter().enumerate() {
            let share = dp / p as f64;
            for v in &mut dx.data[c * p..(c + 1) * p] {
                *v += share;
            }
        }
        dx
    }
}
