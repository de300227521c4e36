use super::layers::{global_avg_pool, global_avg_pool_backward, relu, relu_backward, Conv2d, Linear};
use super::params::ParamBuilder;
use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

/// Small residual CNN: a 3×3 stem, `(depth − 2) / 2` two-conv identity
/// blocks, global average pooling and a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ResNet {
    pub width: usize,
    /// Mean-pool applied to the input image first.
    pub input_pool: usize,
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct ResNetCache<S> {
    input: Tensor<S>,
    stem: Tensor<S>,
    /// Per block: input, hidden ReLU output, output.
    blocks: Vec<(Tensor<S>, Tensor<S>, Tensor<S>)>,
    last_shape: [usize; 3],
}

impl ResNet {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, depth: usize, width: usize, input_pool: usize, classes: usize) -> Self {
        let stem = Conv2d::new(pb, &format!("{name}.stem"), 3, width, 3);
        let blocks = (0..depth.saturating_sub(2) / 2)
            .map(|i| ResBlock {
                a: Conv2d::new(pb, &format!("{name}.block{i}.a"), width, width, 3),
                b: Conv2d::new(pb, &format!("{name}.block{i}.b"), width, width, 3),
            })
            .collect();
        let head = Linear::new(pb, &format!("{name}.classifier"), width, classes);
        ResNet { width, input_pool: input_pool.max(1), stem, blocks, head }
    }

    pub fn blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Pooled feature vector of an image.
    pub fn features<S: Scalar>(&self, p: &[S], img: &image::RgbImage) -> (Vec<S>, ResNetCache<S>) {
        let input = Tensor::from_rgb_pooled(img, self.input_pool);
        let mut stem = self.stem.forward(p, &input);
        relu(&mut stem.data);
        let mut x = stem.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let mut hdn = blk.a.forward(p, &x);
            relu(&mut hdn.data);
            let mut y = blk.b.forward(p, &hdn);
            for (o, &xi) in y.data.iter_mut().zip(&x.data) {
                *o += xi;
            }
            relu(&mut y.data);
            blocks.push((x, hdn, y.clone()));
            x = y;
        }
        let last_shape = x.shape();
        (global_avg_pool(&x), ResNetCache { input, stem, blocks, last_shape })
    }

    pub fn features_backward<S: Scalar>(&self, p: &[S], g: &mut [S], cache: &ResNetCache<S>, d_feat: &[S]) {
        let mut dy = global_avg_pool_backward(cache.last_shape, d_feat);
        for (blk, (x, hdn, y)) in self.blocks.iter().zip(&cache.blocks).rev() {
            relu_backward(&y.data, &mut dy.data);
            let mut d_hdn = blk.b.backward(p, g, hdn, &dy, true).unwrap();
            relu_backward(&hdn.data, &mut d_hdn.data);
            let dx_branch = blk.a.backward(p, g, x, &d_hdn, true).unwrap();
            for (d, b) in dy.data.iter_mut().zip(&dx_branch.data) {
                *d += *b;
            }
        }
        relu_backward(&cache.stem.data, &mut dy.data);
        self.stem.backward(p, g, &cache.input, &dy, false);
    }

    pub fn classify<S: Scalar>(&self, p: &[S], feat: &[S]) -> Vec<S> {
        self.head.forward(p, feat)
    }

    /// Accumulates head gradients and returns the gradient w.r.t. `feat`.
    pub fn classify_backward<S: Scalar>(&self, p: &[S], g: &mut [S], feat: &[S], d_logits: &[S]) -> Vec<S> {
        self.head.backward(p, g, feat, d_logits, true).unwrap()
    }
}
