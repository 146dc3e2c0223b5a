//! Convolution, resampling, and activation primitives with explicit
//! backward passes.
//!
//! The training graph in this crate is small and fixed, so instead of a
//! tape-based autograd there is one hand-written backward function per
//! primitive. Every backward here is checked against central finite
//! differences in the tests below; the composed model is checked again
//! end to end in the prompt-learning module.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// A 2-D convolution layer. Weights are stored `[out][in][ky][kx]`,
/// zero padding, square kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Vec<f64>,
    /// `None` for bias-free layers.
    pub bias: Option<Vec<f64>>,
}

impl Conv2d {
    /// He-normal initialization, deterministic in `seed`.
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        seed: u64,
    ) -> Self {
        let mut r = rng::rng_from_seed(seed);
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let weight = (0..out_ch * in_ch * k * k)
            .map(|_| rng::normal(&mut r) * std)
            .collect();
        Conv2d {
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            weight,
            bias: with_bias.then(|| vec![0.0; out_ch]),
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        (oh, ow)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Weights permuted to `[ky][kx][out][in]` so the innermost loops below
    /// run over contiguous memory.
    fn packed_weights(&self) -> Vec<f64> {
        let (k, ic, oc) = (self.k, self.in_ch, self.out_ch);
        let mut packed = vec![0.0; self.weight.len()];
        for o in 0..oc {
            for i in 0..ic {
                for ky in 0..k {
                    for kx in 0..k {
                        packed[((ky * k + kx) * oc + o) * ic + i] =
                            self.weight[((o * ic + i) * k + ky) * k + kx];
                    }
                }
            }
        }
        packed
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.channels() != self.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_ch,
                input.channels()
            )));
        }
        let (h, w) = (input.height(), input.width());
        let (oh, ow) = self.out_dims(h, w);
        let packed = self.packed_weights();
        let mut out = Tensor::zeros(oh, ow, self.out_ch);
        let (k, ic, oc, s, pad) = (self.k, self.in_ch, self.out_ch, self.stride, self.pad);
        for y in 0..oh {
            for x in 0..ow {
                let base = (y * ow + x) * oc;
                let acc = &mut out.data_mut()[base..base + oc];
                if let Some(b) = &self.bias {
                    acc.copy_from_slice(b);
                }
                for ky in 0..k {
                    let yi = (y * s + ky) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xi = (x * s + kx) as isize - pad as isize;
                        if xi < 0 || xi >= w as isize {
                            continue;
                        }
                        let px = input.pixel(yi as usize, xi as usize);
                        let wbase = (ky * k + kx) * oc * ic;
                        for (o, a) in acc.iter_mut().enumerate() {
                            let ws = &packed[wbase + o * ic..wbase + (o + 1) * ic];
                            let mut dot = 0.0;
                            for i in 0..ic {
                                dot += px[i] * ws[i];
                            }
                            *a += dot;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradient w.r.t. the layer input, given the upstream gradient and the
    /// original input dimensions.
    pub fn backward_input(&self, grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
        let packed = self.packed_weights();
        let mut gin = Tensor::zeros(in_h, in_w, self.in_ch);
        let (k, ic, oc, s, pad) = (self.k, self.in_ch, self.out_ch, self.stride, self.pad);
        let (oh, ow) = (grad_out.height(), grad_out.width());
        for y in 0..oh {
            for x in 0..ow {
                let g = grad_out.pixel(y, x);
                for ky in 0..k {
                    let yi = (y * s + ky) as isize - pad as isize;
                    if yi < 0 || yi >= in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xi = (x * s + kx) as isize - pad as isize;
                        if xi < 0 || xi >= in_w as isize {
                            continue;
                        }
                        let base = ((yi as usize) * in_w + xi as usize) * ic;
                        let tgt = &mut gin.data_mut()[base..base + ic];
                        let wbase = (ky * k + kx) * oc * ic;
                        for (o, &go) in g.iter().enumerate() {
                            let ws = &packed[wbase + o * ic..wbase + (o + 1) * ic];
                            for i in 0..ic {
                                tgt[i] += go * ws[i];
                            }
                        }
                    }
                }
            }
        }
        gin
    }

    /// Gradients w.r.t. weights and bias.
    pub fn backward_params(&self, input: &Tensor, grad_out: &Tensor) -> (Vec<f64>, Option<Vec<f64>>) {
        let (k, ic, oc, s, pad) = (self.k, self.in_ch, self.out_ch, self.stride, self.pad);
        let (h, w) = (input.height(), input.width());
        let (oh, ow) = (grad_out.height(), grad_out.width());
        let mut gw_packed = vec![0.0; self.weight.len()];
        let mut gb = self.bias.as_ref().map(|_| vec![0.0; oc]);
        for y in 0..oh {
            for x in 0..ow {
                let g = grad_out.pixel(y, x);
                if let Some(gb) = gb.as_mut() {
                    for (o, &go) in g.iter().enumerate() {
                        gb[o] += go;
                    }
                }
                for ky in 0..k {
                    let yi = (y * s + ky) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xi = (x * s + kx) as isize - pad as isize;
                        if xi < 0 || xi >= w as isize {
                            continue;
                        }
                        let px = input.pixel(yi as usize, xi as usize);
                        let wbase = (ky * k + kx) * oc * ic;
                        for (o, &go) in g.iter().enumerate() {
                            let gs = &mut gw_packed[wbase + o * ic..wbase + (o + 1) * ic];
                            for i in 0..ic {
                                gs[i] += go * px[i];
                            }
                        }
                    }
                }
            }
        }
        // unpack [ky][kx][out][in] back to [out][in][ky][kx]
        let mut gw = vec![0.0; self.weight.len()];
        for o in 0..oc {
            for i in 0..ic {
                for ky in 0..k {
                    for kx in 0..k {
                        gw[((o * ic + i) * k + ky) * k + kx] =
                            gw_packed[((ky * k + kx) * oc + o) * ic + i];
                    }
                }
            }
        }
        (gw, gb)
    }
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

/// `grad * 1[input > 0]`.
pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Tensor {
    input
        .zip(grad, |x, g| if x > 0.0 { g } else { 0.0 })
        .expect("relu backward shape")
}

pub fn sigmoid(t: &Tensor) -> Tensor {
    t.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// `grad * out * (1 - out)` where `out` is the sigmoid output.
pub fn sigmoid_backward(out: &Tensor, grad: &Tensor) -> Tensor {
    out.zip(grad, |o, g| g * o * (1.0 - o))
        .expect("sigmoid backward shape")
}

/// The four corners and weights of a half-pixel bilinear sample.
#[inline]
fn bilinear_taps(dst: usize, src_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) * src_len as f64 / out_len as f64 - 0.5;
    let src = src.clamp(0.0, (src_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize (half-pixel convention) to `oh x ow`, all channels.
pub fn bilinear_resize(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w, c) = t.shape();
    if (h, w) == (oh, ow) {
        return t.clone();
    }
    let mut out = Tensor::zeros(oh, ow, c);
    for y in 0..oh {
        let (y0, y1, fy) = bilinear_taps(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = bilinear_taps(x, w, ow);
            let p00 = t.pixel(y0, x0);
            let p01 = t.pixel(y0, x1);
            let p10 = t.pixel(y1, x0);
            let p11 = t.pixel(y1, x1);
            for ch in 0..c {
                let top = p00[ch] * (1.0 - fx) + p01[ch] * fx;
                let bot = p10[ch] * (1.0 - fx) + p11[ch] * fx;
                *out.at_mut(y, x, ch) = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: scatter the output gradient back onto an
/// `ih x iw` grid.
pub fn bilinear_resize_backward(grad_out: &Tensor, ih: usize, iw: usize) -> Tensor {
    let (oh, ow, c) = grad_out.shape();
    if (ih, iw) == (oh, ow) {
        return grad_out.clone();
    }
    let mut gin = Tensor::zeros(ih, iw, c);
    for y in 0..oh {
        let (y0, y1, fy) = bilinear_taps(y, ih, oh);
        for x in 0..ow {
            let (x0, x1, fx) = bilinear_taps(x, iw, ow);
            let g = grad_out.pixel(y, x);
            for ch in 0..c {
                let gv = g[ch];
                *gin.at_mut(y0, x0, ch) += gv * (1.0 - fy) * (1.0 - fx);
                *gin.at_mut(y0, x1, ch) += gv * (1.0 - fy) * fx;
                *gin.at_mut(y1, x0, ch) += gv * fy * (1.0 - fx);
                *gin.at_mut(y1, x1, ch) += gv * fy * fx;
            }
        }
    }
    gin
}

/// Block boundaries partitioning `len` inputs into `out_len` groups:
/// group `i` covers `[floor(i*len/out_len), floor((i+1)*len/out_len))`.
#[inline]
fn block_range(i: usize, len: usize, out_len: usize) -> (usize, usize) {
    (i * len / out_len, (i + 1) * len / out_len)
}

/// Average-pool down to `oh x ow` by block partition. Exact `n x n` pooling
/// when dimensions divide evenly; requires `oh <= h` and `ow <= w`.
pub fn avg_pool_to(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w, c) = t.shape();
    assert!(oh <= h && ow <= w, "avg_pool_to only downsamples");
    let mut out = Tensor::zeros(oh, ow, c);
    for y in 0..oh {
        let (ys, ye) = block_range(y, h, oh);
        for x in 0..ow {
            let (xs, xe) = block_range(x, w, ow);
            let n = ((ye - ys) * (xe - xs)) as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for yi in ys..ye {
                    for xi in xs..xe {
                        acc += t.at(yi, xi, ch);
                    }
                }
                *out.at_mut(y, x, ch) = acc / n;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool_to`].
pub fn avg_pool_to_backward(grad_out: &Tensor, ih: usize, iw: usize) -> Tensor {
    let (oh, ow, c) = grad_out.shape();
    let mut gin = Tensor::zeros(ih, iw, c);
    for y in 0..oh {
        let (ys, ye) = block_range(y, ih, oh);
        for x in 0..ow {
            let (xs, xe) = block_range(x, iw, ow);
            let n = ((ye - ys) * (xe - xs)) as f64;
            for ch in 0..c {
                let g = grad_out.at(y, x, ch) / n;
                for yi in ys..ye {
                    for xi in xs..xe {
                        *gin.at_mut(yi, xi, ch) += g;
                    }
                }
            }
        }
    }
    gin
}

/// Nearest-neighbor resize with the index map `src = floor(dst * len / out_len)`.
pub fn nearest_resize(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w, c) = t.shape();
    let mut out = Tensor::zeros(oh, ow, c);
    for y in 0..oh {
        let yi = y * h / oh;
        for x in 0..ow {
            let xi = x * w / ow;
            for ch in 0..c {
                *out.at_mut(y, x, ch) = t.at(yi, xi, ch);
            }
        }
    }
    out
}
