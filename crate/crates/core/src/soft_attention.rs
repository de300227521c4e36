//! Slide-level soft attention.
//!
//! A small convolutional extractor with ReLUs, max pooling down to the
//! sampling grid, and a 1×1 head whose outputs are normalised over all grid
//! positions. The same module owns the tile feature network used when the
//! attention model is trained on its own: tiles are embedded by a residual
//! CNN and classified from their attention-weighted expectation.

use crate::error::{invalid, Error, Result};
use crate::grid::Grid;
use crate::kv::KvMap;
use crate::nn::{
    max_pool, max_pool_backward, relu, relu_backward, softmax, softmax_backward, Conv2d, ParamBuilder, ParamStore,
    PoolIndex, ResNet, ResNetCache, Tensor,
};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct SoftAttentionConfig {
    pub conv_layers: usize,
    pub base_channels: usize,
    pub pool_size: usize,
    pub kernel: usize,
    /// Residual feature net: total layer count (stem + 2 per block + head).
    pub feature_depth: usize,
    pub feature_width: usize,
    /// Mean-pool applied to the model-size tile before the feature net.
    pub feature_pool: usize,
    pub num_classes: usize,
}

impl SoftAttentionConfig {
    /// Four layers from 8 channels, pool 8, residual features depth 8 width 32.
    pub fn her2() -> Self {
        SoftAttentionConfig {
            conv_layers: 4,
            base_channels: 8,
            pool_size: 8,
            kernel: 3,
            feature_depth: 8,
            feature_width: 32,
            feature_pool: 2,
            num_classes: 4,
        }
    }

    /// Five layers from 8 channels, pool 3, binary output.
    pub fn mmr() -> Self {
        SoftAttentionConfig { conv_layers: 5, pool_size: 3, num_classes: 2, ..Self::her2() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers < 1 || self.base_channels < 1 || self.pool_size < 1 {
            return Err(Error::Config("soft attention needs conv_layers, base_channels, pool_size >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("soft attention kernel must be odd".into()));
        }
        if self.feature_depth < 2 || self.feature_width < 1 || self.num_classes < 2 {
            return Err(Error::Config("feature_depth >= 2, feature_width >= 1, num_classes >= 2".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<usize> {
        (0..self.conv_layers).map(|i| self.base_channels << i).collect()
    }

    pub fn from_kv(kv: &mut KvMap, prefix: &str, d: Self) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let cfg = SoftAttentionConfig {
            conv_layers: kv.take_or(&k("conv_layers"), d.conv_layers)?,
            base_channels: kv.take_or(&k("base_channels"), d.base_channels)?,
            pool_size: kv.take_or(&k("pool_size"), d.pool_size)?,
            kernel: kv.take_or(&k("kernel"), d.kernel)?,
            feature_depth: kv.take_or(&k("feature_depth"), d.feature_depth)?,
            feature_width: kv.take_or(&k("feature_width"), d.feature_width)?,
            feature_pool: kv.take_or(&k("feature_pool"), d.feature_pool)?,
            num_classes: kv.take_or(&k("num_classes"), d.num_classes)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        kv.insert(k("conv_layers"), self.conv_layers);
        kv.insert(k("base_channels"), self.base_channels);
        kv.insert(k("pool_size"), self.pool_size);
        kv.insert(k("kernel"), self.kernel);
        kv.insert(k("feature_depth"), self.feature_depth);
        kv.insert(k("feature_width"), self.feature_width);
        kv.insert(k("feature_pool"), self.feature_pool);
        kv.insert(k("num_classes"), self.num_classes);
    }
}

/// Probability distribution over the attention grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<S> {
    pub probs: Grid<S>,
}

impl<S: Scalar> AttentionMap<S> {
    pub fn source_shape(&self) -> (usize, usize) {
        self.probs.shape()
    }

    /// Minmax-normalised copy in `(0, 1]`.
    pub fn normalized(&self) -> Grid<S> {
        minmax_normalize(&self.probs)
    }

    pub fn mass_in(&self, region: &Grid<bool>) -> S {
        self.probs.data.iter().zip(&region.data).filter(|(_, &m)| m).map(|(&p, _)| p).sum()
    }
}

pub const MINMAX_EPS: f64 = 1e-8;

/// `(a − min + ε) / (max − min + ε)`; constant maps become all ones.
pub fn minmax_normalize<S: Scalar>(a: &Grid<S>) -> Grid<S> {
    let min = a.data.iter().copied().fold(S::infinity(), S::min);
    let max = a.data.iter().copied().fold(S::neg_infinity(), S::max);
    let eps: S = lit(MINMAX_EPS);
    let den = max - min + eps;
    a.map(|&v| (v - min + eps) / den)
}

/// Attention-weighted mean `Σ wᵢ fᵢ` with `wᵢ = aᵢ / Σⱼ aⱼ`.
pub fn tile_feature_expectation<S: Scalar>(features: &[Vec<S>], attention: &[S]) -> Result<Vec<S>> {
    check_expectation_args(features, attention)?;
    let total: S = attention.iter().copied().sum();
    let dim = features[0].len();
    let mut out = vec![S::zero(); dim];
    for (f, &a) in features.iter().zip(attention) {
        let w = a / total;
        for (o, &v) in out.iter_mut().zip(f) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Gradients of [`tile_feature_expectation`] w.r.t. every feature vector and
/// every attention value, given `d_out`.
pub fn tile_feature_expectation_backward<S: Scalar>(
    features: &[Vec<S>],
    attention: &[S],
    d_out: &[S],
) -> Result<(Vec<Vec<S>>, Vec<S>)> {
    let mean = tile_feature_expectation(features, attention)?;
    let total: S = attention.iter().copied().sum();
    let d_feat = attention.iter().map(|&a| d_out.iter().map(|&d| d * a / total).collect()).collect();
    let d_att = features
        .iter()
        .map(|f| f.iter().zip(&mean).zip(d_out).map(|((&fi, &m), &d)| d * (fi - m)).sum::<S>() / total)
        .collect();
    Ok((d_feat, d_att))
}

fn check_expectation_args<S: Scalar>(features: &[Vec<S>], attention: &[S]) -> Result<()> {
    if features.is_empty() {
        return Err(invalid("tile expectation needs at least one tile"));
    }
    if features.len() != attention.len() {
        return Err(invalid(format!("{} feature vectors but {} attention values", features.len(), attention.len())));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(invalid("feature vectors differ in length"));
    }
    if attention.iter().any(|&a| !(a > S::zero())) {
        return Err(invalid("attention values must be positive"));
    }
    Ok(())
}

/// Parameters and layer layout of the soft-attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAttention<S> {
    pub config: SoftAttentionConfig,
    pub params: ParamStore<S>,
    convs: Vec<Conv2d>,
    head: Conv2d,
    features: ResNet,
}

/// Activations kept for the attention backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache<S> {
    /// `acts[0]` is the input; `acts[i + 1]` the ReLU output of conv `i`.
    acts: Vec<Tensor<S>>,
    pool: PoolIndex,
    pooled: Tensor<S>,
    probs: Vec<S>,
}

impl<S: Scalar> SoftAttention<S> {
    pub fn new(config: SoftAttentionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let mut convs = Vec::new();
        let mut in_c = 3;
        for (i, c) in config.channels().into_iter().enumerate() {
            convs.push(Conv2d::new(&mut pb, &format!("attn.conv{i}"), in_c, c, config.kernel));
            in_c = c;
        }
        let head = Conv2d::new(&mut pb, "attn.head", in_c, 1, 1);
        let features = ResNet::new(
            &mut pb,
            "feat",
            config.feature_depth,
            config.feature_width,
            config.feature_pool,
            config.num_classes,
        );
        let mut params = pb.finish();
        // A zero head makes the initial map uniform, so the first tiles are
        // drawn from the whole tissue area rather than wherever a random
        // network happens to respond.
        for v in &mut params.values[head.weight.clone()] {
            *v = S::zero();
        }
        Ok(SoftAttention { config, params, convs, head, features })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Grid shape produced for an `h × w` input.
    pub fn grid_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.config.pool_size), w.div_ceil(self.config.pool_size))
    }

    /// Attention distribution over the pooled grid of `input` (a `3 × h × w`
    /// tensor).
    pub fn compute_attention(&self, input: &Tensor<S>) -> Result<(AttentionMap<S>, AttentionCache<S>)> {
        if input.c != 3 {
            return Err(Error::ShapeMismatch { expected: vec![3, input.h, input.w], actual: input.shape().to_vec() });
        }
        if input.h == 0 || input.w == 0 {
            return Err(invalid("empty attention input"));
        }
        let p = &self.params.values;
        let mut acts = vec![input.clone()];
        for conv in &self.convs {
            let mut y = conv.forward(p, acts.last().unwrap());
            relu(&mut y.data);
            acts.push(y);
        }
        let (pooled, pool) = max_pool(acts.last().unwrap(), self.config.pool_size);
        let logits = self.head.forward(p, &pooled);
        let probs = softmax(&logits.data);
        let map = AttentionMap { probs: Grid::from_vec(pooled.h, pooled.w, probs.clone()) };
        Ok((map, AttentionCache { acts, pool, pooled, probs }))
    }

    /// Accumulates parameter gradients for `d_probs` (gradient of the loss
    /// w.r.t. every grid probability).
    pub fn attention_backward(&self, cache: &AttentionCache<S>, d_probs: &[S], grads: &mut [S]) {
        let p = &self.params.values;
        let d_logits = softmax_backward(&cache.probs, d_probs);
        let d_logits = Tensor::from_vec(1, cache.pooled.h, cache.pooled.w, d_logits);
        let d_pooled = self.head.backward(p, grads, &cache.pooled, &d_logits, true).unwrap();
        let mut dy = max_pool_backward(&cache.pool, &d_pooled);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            relu_backward(&cache.acts[i + 1].data, &mut dy.data);
            let need = i > 0;
            match conv.backward(p, grads, &cache.acts[i], &dy, need) {
                Some(dx) => dy = dx,
                None => break,
            }
        }
    }

    /// Embeds a model-size tile with the residual feature net.
    pub fn tile_features(&self, tile: &image::RgbImage) -> (Vec<S>, ResNetCache<S>) {
        self.features.features(&self.params.values, tile)
    }

    pub fn features_backward(&self, cache: &ResNetCache<S>, d_feat: &[S], grads: &mut [S]) {
        self.features.features_backward(&self.params.values, grads, cache, d_feat);
    }

    pub fn classify_features(&self, feat: &[S]) -> Vec<S> {
        self.features.classify(&self.params.values, feat)
    }

    /// Returns the gradient w.r.t. `feat` and accumulates classifier grads.
    pub fn classify_backward(&self, feat: &[S], d_logits: &[S], grads: &mut [S]) -> Vec<S> {
        self.features.classify_backward(&self.params.values, grads, feat, d_logits)
    }

    /// Replaces the parameter vector; lengths must match.
    pub fn set_params(&mut self, values: Vec<S>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::ShapeMismatch { expected: vec![self.params.len()], actual: vec![values.len()] });
        }
        self.params.values = values;
        Ok(())
    }
}
