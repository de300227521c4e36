use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::dataset::SlideData;
use crate::error::{invalid, Result};
use crate::glimpse_env::Dihedral;
use crate::grid::Mask;
use crate::pyramid::{apply_mask, downsample, tissue_mask, SlidePyramid, TissueMask};
use crate::seed::derive_seed;

/// A slide with everything derived from its low-resolution view cached.
#[derive(Clone, Debug)]
pub struct PreparedSlide {
    pub id: String,
    pub label: usize,
    pub seed: u64,
    pub pyramid: SlidePyramid,
    /// Downsampled view `I_0`.
    pub i0: RgbImage,
    /// `I_0` with background set to white; the soft-attention input.
    pub input: RgbImage,
    pub tissue: TissueMask,
    /// Ground-truth ROI at `I_0` resolution.
    pub roi: Option<Mask>,
    /// Tissue and ROI masks on the attention grid.
    pub tissue_grid: Mask,
    pub roi_grid: Option<Mask>,
}

impl PreparedSlide {
    pub fn new(data: SlideData, cfg: &ExperimentConfig) -> Result<Self> {
        let i0 = downsample(&data.pyramid, cfg.sampler.scale)?;
        let tissue = tissue_mask(&i0, &cfg.tissue);
        let input = apply_mask(&i0, &tissue.mask);
        let (h, w) = (i0.height() as usize, i0.width() as usize);
        let roi = data.roi.map(|(m, _)| if m.shape() == (h, w) { m } else { m.resample_majority(h, w) });
        let pool = cfg.soft.pool_size;
        let (gh, gw) = (h.div_ceil(pool), w.div_ceil(pool));
        let tissue_grid = tissue.mask.resample_majority(gh, gw);
        let roi_grid = roi.as_ref().map(|m| m.resample_majority(gh, gw));
        Ok(PreparedSlide { id: data.id, label: data.label, seed: data.seed, pyramid: data.pyramid, i0, input, tissue, roi, tissue_grid, roi_grid })
    }

    pub fn prepare_all(data: Vec<SlideData>, cfg: &ExperimentConfig) -> Result<Vec<Self>> {
        data.into_iter().map(|d| Self::new(d, cfg)).collect()
    }

    /// ROI cells as a fraction of the grid; `None` without an ROI or when it
    /// misses the grid entirely.
    pub fn roi_share(&self) -> Option<f64> {
        let r = self.roi_grid.as_ref()?;
        (r.count() > 0).then(|| r.count() as f64 / r.len() as f64)
    }
}

/// Fold id per slide: within each class, slides are shuffled under `seed`
/// and dealt round-robin, so every fold is class-stratified.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = vec![0; labels.len()];
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xF01D, c as u64])));
        for (r, &i) in members.iter().enumerate() {
            out[i] = r % folds;
        }
    }
    out
}

/// Slide indices for training, validation and testing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// The test fold is held out; with `validation` the following fold is
    /// held out as well.
    pub fn from_folds(fold_of: &[usize], folds: usize, test_fold: usize, validation: bool) -> Self {
        let val_fold = validation.then_some((test_fold + 1) % folds);
        let mut s = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
        for (i, &f) in fold_of.iter().enumerate() {
            if f == test_fold {
                s.test.push(i);
            } else if Some(f) == val_fold {
                s.val.push(i);
            } else {
                s.train.push(i);
            }
        }
        s
    }
}

/// Class-balanced batches for one epoch: each batch holds `per_class`
/// slides of every class. The epoch length follows the largest class;
/// smaller classes wrap around their shuffled order.
pub fn class_balanced_batches(
    train: &[usize],
    labels: &[usize],
    classes: usize,
    per_class: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in train {
        by_class.get_mut(labels[i]).ok_or_else(|| invalid(format!("label {} out of range", labels[i])))?.push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(invalid(format!("no training slide of class {c}; class-balanced batches impossible")));
    }
    for (c, v) in by_class.iter_mut().enumerate() {
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xBA7C, epoch as u64, c as u64])));
    }
    let longest = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let batches = longest.div_ceil(per_class.max(1));
    Ok((0..batches)
        .map(|b| {
            let mut batch = Vec::with_capacity(per_class * classes);
            for v in &by_class {
                for j in 0..per_class {
                    batch.push(v[(b * per_class + j) % v.len()]);
                }
            }
            batch
        })
        .collect())
}

/// One of the eight rotations/flips, uniform under `seed`.
pub fn augment(tile: &RgbImage, seed: u64) -> RgbImage {
    augment_transform(seed).apply(tile)
}

pub fn augment_transform(seed: u64) -> Dihedral {
    Dihedral::random(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(invalid("dice of masks with different shapes"));
    }
    let inter = a.data.iter().zip(&b.data).filter(|(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Early stopping on a score that should increase.
#[derive(Clone, Debug, PartialEq)]
pub struct StoppingRule {
    pub min_delta: f64,
    pub patience: usize,
    best: Option<f64>,
    since_best: usize,
}

impl StoppingRule {
    pub fn new(min_delta: f64, patience: usize) -> Self {
        StoppingRule { min_delta, patience, best: None, since_best: 0 }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records a value; returns true when training should stop.
    pub fn update(&mut self, value: f64) -> bool {
        match self.best {
            Some(b) if value <= b + self.min_delta => self.since_best += 1,
            _ => {
                self.best = Some(value);
                self.since_best = 0;
            }
        }
        self.since_best >= self.patience
    }
}

/// Replays a whole history through [`StoppingRule`]; returns the index at
/// which it would stop.
pub fn stopping_point(history: &[f64], min_delta: f64, patience: usize) -> Option<usize> {
    let mut rule = StoppingRule::new(min_delta, patience);
    history.iter().position(|&v| rule.update(v))
}
