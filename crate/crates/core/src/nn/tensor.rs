use crate::scalar::{lit, Scalar};

/// Dense `channels × height × width` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![S::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Tensor { c, h, w, data }
    }

    pub fn vector(data: Vec<S>) -> Self {
        let n = data.len();
        Tensor { c: n, h: 1, w: 1, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    pub fn plane(&self, ch: usize) -> &[S] {
        let n = self.h * self.w;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [S] {
        let n = self.h * self.w;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    /// Converts an RGB image to a centred `3 × h × w` tensor (`v/255 − 0.5`),
    /// averaging over `pool × pool` blocks on the way (partial edge blocks use
    /// their actual pixel count).
    pub fn from_rgb_pooled(img: &image::RgbImage, pool: usize) -> Self {
        let pool = pool.max(1);
        let (iw, ih) = (img.width() as usize, img.height() as usize);
        let (h, w) = (ih.div_ceil(pool), iw.div_ceil(pool));
        let mut sums = vec![0u32; 3 * h * w];
        let mut counts = vec![0u32; h * w];
        let raw = img.as_raw();
        for y in 0..ih {
            let oy = y / pool;
            for x in 0..iw {
                let o = oy * w + x / pool;
                let p = (y * iw + x) * 3;
                counts[o] += 1;
                for ch in 0..3 {
                    sums[ch * h * w + o] += raw[p + ch] as u32;
                }
            }
        }
        let half: S = lit(0.5);
        let scale: S = lit(1.0 / 255.0);
        let data = sums
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let n = counts[i % (h * w)] as f64;
                lit::<S>(s as f64 / n) * scale - half
            })
            .collect();
        Tensor { c: 3, h, w, data }
    }

    /// Stacks tensors with equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<S>]) -> Self {
        let (h, w) = (parts[0].h, parts[0].w);
        let mut data = Vec::new();
        let mut c = 0;
        for p in parts {
            assert_eq!((p.h, p.w), (h, w));
            data.extend_from_slice(&p.data);
            c += p.c;
        }
        Tensor { c, h, w, data }
    }
}

pub fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut acc = S::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}
