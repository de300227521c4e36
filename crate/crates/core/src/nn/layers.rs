use std::ops::Range;

use super::params::{Init, ParamBuilder};
use super::tensor::{axpy, dot, Tensor};
use crate::scalar::Scalar;

/// Stride-1 convolution with odd square kernel and zero "same" padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Conv2d {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, in_c: usize, out_c: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "odd kernel");
        let weight = pb.alloc(format!("{name}.weight"), out_c * in_c * k * k, Init::Kaiming { fan_in: in_c * k * k });
        let bias = pb.alloc(format!("{name}.bias"), out_c, Init::Zeros);
        Conv2d { in_c, out_c, k, weight, bias }
    }

    #[inline]
    fn w_index(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        self.weight.start + ((oc * self.in_c + ic) * self.k + ky) * self.k + kx
    }

    /// For kernel offset `kx`, output columns `x` in the returned range read
    /// input column `x + kx − pad`.
    #[inline]
    fn valid(kx: usize, pad: usize, n: usize) -> Range<usize> {
        let lo = pad.saturating_sub(kx);
        let hi = (n + pad).saturating_sub(kx).min(n);
        lo..hi.max(lo)
    }

    pub fn forward<S: Scalar>(&self, p: &[S], x: &Tensor<S>) -> Tensor<S> {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (h, w) = (x.h, x.w);
        let pad = self.k / 2;
        let mut out = Tensor::zeros(self.out_c, h, w);
        for oc in 0..self.out_c {
            let b = p[self.bias.start + oc];
            let plane = out.plane_mut(oc);
            plane.iter_mut().for_each(|v| *v = b);
            for ic in 0..self.in_c {
                let inp = x.plane(ic);
                for ky in 0..self.k {
                    let rows = Self::valid(ky, pad, h);
                    for kx in 0..self.k {
                        let wv = p[self.w_index(oc, ic, ky, kx)];
                        if wv == S::zero() {
                            continue;
                        }
                        let cols = Self::valid(kx, pad, w);
                        for y in rows.clone() {
                            let sy = y + ky - pad;
                            let src = &inp[sy * w + cols.start + kx - pad..sy * w + cols.end + kx - pad];
                            axpy(wv, src, &mut plane[y * w + cols.start..y * w + cols.end]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `g`; returns the input gradient
    /// when `need_dx`.
    pub fn backward<S: Scalar>(
        &self,
        p: &[S],
        g: &mut [S],
        x: &Tensor<S>,
        dy: &Tensor<S>,
        need_dx: bool,
    ) -> Option<Tensor<S>> {
        let (h, w) = (x.h, x.w);
        let pad = self.k / 2;
        let mut dx = if need_dx { Some(Tensor::zeros(self.in_c, h, w)) } else { None };
        for oc in 0..self.out_c {
            let dplane = dy.plane(oc);
            g[self.bias.start + oc] += dplane.iter().copied().sum::<S>();
            for ic in 0..self.in_c {
                let inp = x.plane(ic);
                for ky in 0..self.k {
                    let rows = Self::valid(ky, pad, h);
                    for kx in 0..self.k {
                        let cols = Self::valid(kx, pad, w);
                        let wi = self.w_index(oc, ic, ky, kx);
                        let mut acc = S::zero();
                        for y in rows.clone() {
                            let sy = y + ky - pad;
                            let src = &inp[sy * w + cols.start + kx - pad..sy * w + cols.end + kx - pad];
                            acc += dot(&dplane[y * w + cols.start..y * w + cols.end], src);
                        }
                        g[wi] += acc;
                        if let Some(dx) = dx.as_mut() {
                            let wv = p[wi];
                            let dxp = dx.plane_mut(ic);
                            for y in rows.clone() {
                                let sy = y + ky - pad;
                                axpy(
                                    wv,
                                    &dplane[y * w + cols.start..y * w + cols.end],
                                    &mut dxp[sy * w + cols.start + kx - pad..sy * w + cols.end + kx - pad],
                                );
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored row-major `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Linear {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, input: usize, output: usize) -> Self {
        Self::with_bias(pb, name, input, output, 0.0)
    }

    pub fn with_bias<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, input: usize, output: usize, bias: f64) -> Self {
        let weight = pb.alloc(format!("{name}.weight"), input * output, Init::Kaiming { fan_in: input });
        let bias = pb.alloc(format!("{name}.bias"), output, Init::Constant(bias));
        Linear { input, output, weight, bias }
    }

    pub fn forward<S: Scalar>(&self, p: &[S], x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.input, "linear input size");
        let w = &p[self.weight.clone()];
        (0..self.output)
            .map(|o| p[self.bias.start + o] + dot(&w[o * self.input..(o + 1) * self.input], x))
            .collect()
    }

    pub fn backward<S: Scalar>(&self, p: &[S], g: &mut [S], x: &[S], dy: &[S], need_dx: bool) -> Option<Vec<S>> {
        let mut dx = if need_dx { Some(vec![S::zero(); self.input]) } else { None };
        for (o, &d) in dy.iter().enumerate() {
            if d == S::zero() {
                continue;
            }
            g[self.bias.start + o] += d;
            let ws = self.weight.start + o * self.input;
            axpy(d, x, &mut g[ws..ws + self.input]);
            if let Some(dx) = dx.as_mut() {
                axpy(d, &p[ws..ws + self.input], dx);
            }
        }
        dx
    }
}

pub fn relu<S: Scalar>(x: &mut [S]) {
    for v in x {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

/// Masks `dy` in place by the post-activation output `y`.
pub fn relu_backward<S: Scalar>(y: &[S], dy: &mut [S]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v <= S::zero() {
            *d = S::zero();
        }
    }
}

/// Argmax positions recorded by [`max_pool`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndex {
    pub in_shape: [usize; 3],
    pub argmax: Vec<usize>,
}

/// Non-overlapping `k × k` max pooling; trailing partial windows are kept.
pub fn max_pool<S: Scalar>(x: &Tensor<S>, k: usize) -> (Tensor<S>, PoolIndex) {
    let (oh, ow) = (x.h.div_ceil(k), x.w.div_ceil(k));
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut argmax = vec![0; x.c * oh * ow];
    for c in 0..x.c {
        let inp = x.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = S::neg_infinity();
                let mut bi = 0;
                for y in oy * k..((oy + 1) * k).min(x.h) {
                    for xx in ox * k..((ox + 1) * k).min(x.w) {
                        let v = inp[y * x.w + xx];
                        if v > best {
                            best = v;
                            bi = y * x.w + xx;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out.data[o] = best;
                argmax[o] = c * x.h * x.w + bi;
            }
        }
    }
    (out, PoolIndex { in_shape: x.shape(), argmax })
}

pub fn max_pool_backward<S: Scalar>(idx: &PoolIndex, dy: &Tensor<S>) -> Tensor<S> {
    let [c, h, w] = idx.in_shape;
    let mut dx = Tensor::zeros(c, h, w);
    for (o, &i) in idx.argmax.iter().enumerate() {
        dx.data[i] += dy.data[o];
    }
    dx
}

/// Non-overlapping `k × k` mean pooling; partial windows average their own count.
pub fn avg_pool<S: Scalar>(x: &Tensor<S>, k: usize) -> Tensor<S> {
    let (oh, ow) = (x.h.div_ceil(k), x.w.div_ceil(k));
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let inp = x.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                let mut n = 0usize;
                for y in oy * k..((oy + 1) * k).min(x.h) {
                    for xx in ox * k..((ox + 1) * k).min(x.w) {
                        acc += inp[y * x.w + xx];
                        n += 1;
                    }
                }
                out.data[(c * oh + oy) * ow + ox] = acc / S::from_usize(n).unwrap();
            }
        }
    }
    out
}

pub fn avg_pool_backward<S: Scalar>(in_shape: [usize; 3], k: usize, dy: &Tensor<S>) -> Tensor<S> {
    let [c, h, w] = in_shape;
    let mut dx = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (oy, ox) = (y / k, x / k);
                let ny = ((oy + 1) * k).min(h) - oy * k;
                let nx = ((ox + 1) * k).min(w) - ox * k;
                dx.data[(ch * h + y) * w + x] =
                    dy.data[(ch * dy.h + oy) * dy.w + ox] / S::from_usize(ny * nx).unwrap();
            }
        }
    }
    dx
}

pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Vec<S> {
    let n = S::from_usize(x.h * x.w).unwrap();
    (0..x.c).map(|c| x.plane(c).iter().copied().sum::<S>() / n).collect()
}

pub fn global_avg_pool_backward<S: Scalar>(in_shape: [usize; 3], dy: &[S]) -> Tensor<S> {
    let [c, h, w] = in_shape;
    let n = S::from_usize(h * w).unwrap();
    let mut dx = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let v = dy[ch] / n;
        dx.plane_mut(ch).iter_mut().for_each(|d| *d = v);
    }
    dx
}

pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let m = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: S = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Gradient w.r.t. logits given gradient w.r.t. the softmax output.
pub fn softmax_backward<S: Scalar>(probs: &[S], dp: &[S]) -> Vec<S> {
    let s = dot(probs, dp);
    probs.iter().zip(dp).map(|(&p, &d)| p * (d - s)).collect()
}
