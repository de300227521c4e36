use std::ops::Range;

use super::params::{Init, ParamBuilder};
use super::sigmoid;
use super::tensor::{axpy, dot};
use crate::scalar::Scalar;

/// One long short-term memory layer. Gate order in the packed weights is
/// input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub input: usize,
    pub hidden: usize,
    pub w_x: Range<usize>,
    pub w_h: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<S> {
    pub h: Vec<S>,
    pub c: Vec<S>,
}

impl<S: Scalar> LstmState<S> {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { h: vec![S::zero(); hidden], c: vec![S::zero(); hidden] }
    }
}

#[derive(Clone, Debug)]
pub struct LstmCache<S> {
    x: Vec<S>,
    h_prev: Vec<S>,
    c_prev: Vec<S>,
    /// Activated gates, `4 × hidden`.
    gates: Vec<S>,
    tanh_c: Vec<S>,
}

impl Lstm {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_x = pb.alloc(format!("{name}.w_x"), 4 * hidden * input, Init::Uniform(bound));
        let w_h = pb.alloc(format!("{name}.w_h"), 4 * hidden * hidden, Init::Uniform(bound));
        let bias = pb.alloc(format!("{name}.bias"), 4 * hidden, Init::Zeros);
        Lstm { input, hidden, w_x, w_h, bias }
    }

    /// Sets the forget-gate bias slice to `value` (commonly 1).
    pub fn init_forget_bias<S: Scalar>(&self, values: &mut [S], value: S) {
        let start = self.bias.start + self.hidden;
        values[start..start + self.hidden].iter_mut().for_each(|v| *v = value);
    }

    pub fn forward<S: Scalar>(&self, p: &[S], x: &[S], prev: &LstmState<S>) -> (LstmState<S>, LstmCache<S>) {
        assert_eq!(x.len(), self.input, "lstm input size");
        let hd = self.hidden;
        let mut z: Vec<S> = p[self.bias.clone()].to_vec();
        for (r, zr) in z.iter_mut().enumerate() {
            let wx = self.w_x.start + r * self.input;
            let wh = self.w_h.start + r * hd;
            *zr += dot(&p[wx..wx + self.input], x) + dot(&p[wh..wh + hd], &prev.h);
        }
        let mut gates = z;
        for (r, v) in gates.iter_mut().enumerate() {
            *v = if r / hd == 2 { v.tanh() } else { sigmoid(*v) };
        }
        let mut c = vec![S::zero(); hd];
        let mut h = vec![S::zero(); hd];
        let mut tanh_c = vec![S::zero(); hd];
        for j in 0..hd {
            let (i, f, g, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
            c[j] = f * prev.c[j] + i * g;
            tanh_c[j] = c[j].tanh();
            h[j] = o * tanh_c[j];
        }
        let cache = LstmCache { x: x.to_vec(), h_prev: prev.h.clone(), c_prev: prev.c.clone(), gates, tanh_c };
        (LstmState { h, c }, cache)
    }

    /// Backpropagates one step. `dh` and `dc` are gradients w.r.t. this step's
    /// output state; returns `(dx, dh_prev, dc_prev)`.
    pub fn backward<S: Scalar>(
        &self,
        p: &[S],
        g: &mut [S],
        cache: &LstmCache<S>,
        dh: &[S],
        dc: &[S],
    ) -> (Vec<S>, Vec<S>, Vec<S>) {
        let hd = self.hidden;
        let one = S::one();
        let mut dz = vec![S::zero(); 4 * hd];
        let mut dc_prev = vec![S::zero(); hd];
        for j in 0..hd {
            let gt = &cache.gates;
            let (i, f, gg, o) = (gt[j], gt[hd + j], gt[2 * hd + j], gt[3 * hd + j]);
            let tc = cache.tanh_c[j];
            let dcj = dc[j] + dh[j] * o * (one - tc * tc);
            let d_o = dh[j] * tc;
            let d_i = dcj * gg;
            let d_f = dcj * cache.c_prev[j];
            let d_g = dcj * i;
            dc_prev[j] = dcj * f;
            dz[j] = d_i * i * (one - i);
            dz[hd + j] = d_f * f * (one - f);
            dz[2 * hd + j] = d_g * (one - gg * gg);
            dz[3 * hd + j] = d_o * o * (one - o);
        }
        let mut dx = vec![S::zero(); self.input];
        let mut dh_prev = vec![S::zero(); hd];
        for (r, &d) in dz.iter().enumerate() {
            if d == S::zero() {
                continue;
            }
            g[self.bias.start + r] += d;
            let wx = self.w_x.start + r * self.input;
            let wh = self.w_h.start + r * hd;
            axpy(d, &cache.x, &mut g[wx..wx + self.input]);
            axpy(d, &cache.h_prev, &mut g[wh..wh + hd]);
            axpy(d, &p[wx..wx + self.input], &mut dx);
            axpy(d, &p[wh..wh + hd], &mut dh_prev);
        }
        (dx, dh_prev, dc_prev)
    }
}
