//! Comparison systems: random tissue tiles chosen with the Gumbel-max trick
//! (fed to the same glimpse agent), and a sliding-window classifier over
//! stain-masked patches.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, Mask};
use crate::kv::KvMap;
use crate::nn::{softmax, Adam, ParamBuilder, ParamStore, ResNet};
use crate::objectives::cross_entropy;
use crate::pyramid::{luminance, SlidePyramid};
use crate::sampler::Cell;
use crate::scalar::{to_f64, Scalar};

/// `N` mask cells drawn uniformly without replacement: each cell gets a
/// Gumbel(0, 1) perturbation of a flat score and the top `N` are kept.
/// Order follows descending perturbed score.
pub fn gumbel_random_tiles(mask: &Mask, n: usize, seed: u64) -> Result<Vec<Cell>> {
    if mask.count() == 0 {
        return Err(invalid("random tiles need a nonempty tissue mask"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(mask.count());
    for (i, &m) in mask.data.iter().enumerate() {
        // Draw for every cell so the stream does not depend on mask layout.
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        if m {
            scored.push((-(-u.ln()).ln(), i));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(n).map(|(_, i)| (i % mask.width, i / mask.width)).collect())
}

/// Stained-tissue mask: luminance (in `[0, 1]`) below `threshold`, within
/// tissue. A threshold of 1 or more admits all tissue.
pub fn dab_mask(img: &RgbImage, tissue: &Mask, threshold: f64) -> Result<Mask> {
    if (img.height() as usize, img.width() as usize) != tissue.shape() {
        return Err(Error::ShapeMismatch {
            expected: vec![tissue.height, tissue.width],
            actual: vec![img.height() as usize, img.width() as usize],
        });
    }
    Ok(Grid::from_fn(tissue.height, tissue.width, |x, y| {
        *tissue.get(x, y) && (threshold >= 1.0 || luminance(img.get_pixel(x as u32, y as u32).0) / 255.0 < threshold)
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlidingWindowConfig {
    pub patch_size: usize,
    /// Downsample factor of the patch level relative to base (2 = 20× from 40×).
    pub level_scale: u32,
    pub tissue_fraction_min: f64,
    pub dab_threshold: f64,
    /// Overlap in patch pixels.
    pub overlap: usize,
    pub top_k_probs: usize,
    pub feature_depth: usize,
    pub feature_width: usize,
    /// Mean-pool applied to patches before the classifier.
    pub input_pool: usize,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        SlidingWindowConfig {
            patch_size: 224,
            level_scale: 2,
            tissue_fraction_min: 0.35,
            dab_threshold: 0.85,
            overlap: 0,
            top_k_probs: 15,
            feature_depth: 18,
            feature_width: 16,
            input_pool: 4,
        }
    }
}

impl SlidingWindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tissue_fraction_min) || !(0.0..=1.0).contains(&self.dab_threshold) {
            return Err(Error::Config("sliding-window thresholds must lie in [0, 1]".into()));
        }
        if self.patch_size == 0 || self.overlap >= self.patch_size || self.top_k_probs == 0 || self.level_scale == 0 {
            return Err(Error::Config("patch_size > overlap, top_k_probs and level_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvMap, prefix: &str, d: Self) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let cfg = SlidingWindowConfig {
            patch_size: kv.take_or(&k("patch_size"), d.patch_size)?,
            level_scale: kv.take_or(&k("level_scale"), d.level_scale)?,
            tissue_fraction_min: kv.take_or(&k("tissue_fraction_min"), d.tissue_fraction_min)?,
            dab_threshold: kv.take_or(&k("dab_threshold"), d.dab_threshold)?,
            overlap: kv.take_or(&k("overlap"), d.overlap)?,
            top_k_probs: kv.take_or(&k("top_k_probs"), d.top_k_probs)?,
            feature_depth: kv.take_or(&k("feature_depth"), d.feature_depth)?,
            feature_width: kv.take_or(&k("feature_width"), d.feature_width)?,
            input_pool: kv.take_or(&k("input_pool"), d.input_pool)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        kv.insert(k("patch_size"), self.patch_size);
        kv.insert(k("level_scale"), self.level_scale);
        kv.insert(k("tissue_fraction_min"), self.tissue_fraction_min);
        kv.insert(k("dab_threshold"), self.dab_threshold);
        kv.insert(k("overlap"), self.overlap);
        kv.insert(k("top_k_probs"), self.top_k_probs);
        kv.insert(k("feature_depth"), self.feature_depth);
        kv.insert(k("feature_width"), self.feature_width);
        kv.insert(k("input_pool"), self.input_pool);
    }
}

/// A kept patch: top-left corner in base pixels and its masked fraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Patch {
    pub top_left: (i64, i64),
    pub fraction: f64,
}

/// Non-overlapping (by default) patches over a slide of base size
/// `(height, width)`, kept when the fraction of `mask` pixels (a mask at
/// `mask_scale` relative to base) inside the patch exceeds the minimum.
/// Patches are listed in row-major order.
pub fn sliding_window_patches(base: (usize, usize), mask: &Mask, mask_scale: u32, cfg: &SlidingWindowConfig) -> Result<Vec<Patch>> {
    cfg.validate()?;
    let side = cfg.patch_size as u64 * cfg.level_scale as u64;
    let stride = (cfg.patch_size - cfg.overlap) as u64 * cfg.level_scale as u64;
    if side % mask_scale as u64 != 0 || stride % mask_scale as u64 != 0 {
        return Err(invalid(format!("mask scale {mask_scale} must divide the patch footprint {side}")));
    }
    let m_side = (side / mask_scale as u64) as usize;
    let mut integral = vec![0u32; (mask.height + 1) * (mask.width + 1)];
    let w1 = mask.width + 1;
    for y in 0..mask.height {
        let mut row = 0;
        for x in 0..mask.width {
            row += u32::from(*mask.get(x, y));
            integral[(y + 1) * w1 + x + 1] = integral[y * w1 + x + 1] + row;
        }
    }
    let mut out = Vec::new();
    let (bh, bw) = (base.0 as u64, base.1 as u64);
    let mut y = 0u64;
    while y + side <= bh {
        let mut x = 0u64;
        while x + side <= bw {
            let (mx, my) = ((x / mask_scale as u64) as usize, (y / mask_scale as u64) as usize);
            let (x1, y1) = ((mx + m_side).min(mask.width), (my + m_side).min(mask.height));
            let count = if mx < x1 && my < y1 {
                integral[y1 * w1 + x1] + integral[my * w1 + mx] - integral[my * w1 + x1] - integral[y1 * w1 + mx]
            } else {
                0
            };
            let fraction = count as f64 / (m_side * m_side) as f64;
            if fraction > cfg.tissue_fraction_min {
                out.push(Patch { top_left: (x as i64, y as i64), fraction });
            }
            x += stride;
        }
        y += stride;
    }
    Ok(out)
}

/// Slide probability as the mean of the `top_k` largest patch
/// probabilities. The flag is set when fewer than `top_k` patches exist
/// (all are averaged then). No patches gives probability 0.
pub fn sliding_window_classify(patch_probs: &[f64], top_k: usize) -> (f64, bool) {
    if patch_probs.is_empty() {
        return (0.0, true);
    }
    let mut p = patch_probs.to_vec();
    p.sort_by(|a, b| b.total_cmp(a));
    let k = top_k.min(p.len());
    (p[..k].iter().sum::<f64>() / k as f64, p.len() < top_k)
}

/// Residual patch classifier for the sliding-window baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchClassifier<S> {
    pub params: ParamStore<S>,
    net: ResNet,
    pub classes: usize,
}

impl<S: Scalar> PatchClassifier<S> {
    pub fn new(cfg: &SlidingWindowConfig, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(invalid("patch classifier needs two or more classes"));
        }
        let mut pb = ParamBuilder::new(seed);
        let net = ResNet::new(&mut pb, "patch", cfg.feature_depth, cfg.feature_width, cfg.input_pool, classes);
        Ok(PatchClassifier { params: pb.finish(), net, classes })
    }

    pub fn predict(&self, patch: &RgbImage) -> Vec<S> {
        let (f, _) = self.net.features(&self.params.values, patch);
        softmax(&self.net.classify(&self.params.values, &f))
    }

    /// Accumulates cross-entropy gradients for one labelled patch.
    pub fn accumulate(&self, patch: &RgbImage, label: usize, grads: &mut [S]) -> f64 {
        let p = &self.params.values;
        let (f, cache) = self.net.features(p, patch);
        let probs = softmax(&self.net.classify(p, &f));
        let (loss, d) = cross_entropy(&probs, label);
        let df = self.net.classify_backward(p, grads, &f, &d);
        self.net.features_backward(p, grads, &cache, &df);
        to_f64(loss)
    }

    /// Trains on `(patch, label)` pairs for `epochs` passes in minibatches,
    /// returning the mean loss of each epoch.
    pub fn train(&mut self, data: &[(RgbImage, usize)], epochs: usize, batch: usize, lr: f64, seed: u64) -> Vec<f64> {
        let mut adam = Adam::new(self.params.len(), lr);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut curve = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch.max(1)) {
                let mut g = self.params.zeros_like();
                for &i in chunk {
                    total += self.accumulate(&data[i].0, data[i].1, &mut g);
                }
                let inv = S::one() / S::from_usize(chunk.len()).unwrap();
                g.iter_mut().for_each(|v| *v *= inv);
                adam.step(&mut self.params.values, &g);
            }
            curve.push(total / data.len().max(1) as f64);
        }
        curve
    }
}

/// Reads one patch at the configured level.
pub fn read_patch(slide: &SlidePyramid, patch: &Patch, cfg: &SlidingWindowConfig) -> RgbImage {
    slide.read_scaled(cfg.level_scale, patch.top_left, (cfg.patch_size, cfg.patch_size))
}
