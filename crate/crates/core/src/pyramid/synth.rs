//! Planted-ROI synthetic slides.
//!
//! A slide is drawn at the anchor resolution (`anchor_scale` base pixels per
//! texel): a light background, a few overlapping tissue blobs, `roi_count`
//! stained elliptical regions whose brown intensity encodes the class, and
//! dark elongated "folds" that appear regardless of class. Finer levels are
//! virtual (see [`Detail`](super::Detail)); coarser ones are block means.

use std::f64::consts::PI;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{block_mean, magnification_tag, splitmix, Detail, Level, LevelData, SlidePyramid};
use crate::error::{invalid, Result};
use crate::grid::{Grid, Mask};
use crate::kv::{join_list, KvMap};

const BACKGROUND: [f64; 3] = [246.0, 245.0, 248.0];
const TISSUE: [f64; 3] = [205.0, 185.0, 210.0];
const BROWN: [f64; 3] = [125.0, 75.0, 35.0];
const FOLD: [f64; 3] = [80.0, 70.0, 95.0];

/// Maps classes to stain intensities and measures stain in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct StainModel {
    pub class_intensity: Vec<f64>,
}

impl StainModel {
    /// Red-minus-blue excess in `[−1, 1]`; tissue and folds sit at or below 0,
    /// brown stain above.
    pub fn stain_index(p: [u8; 3]) -> f64 {
        (p[0] as f64 - p[2] as f64) / 255.0
    }

    /// Pixels with [`stain_index`](Self::stain_index) above this count as stained.
    pub const STAIN_THRESHOLD: f64 = 0.04;

    pub fn class_of(&self, intensity: f64) -> usize {
        self.class_intensity
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - intensity).abs().total_cmp(&(b.1 - intensity).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Generator settings. Read from / written to the `key = value` format; all
/// lengths are base-level pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub base_height: usize,
    pub base_width: usize,
    /// Scale of the first stored level; finer levels are virtual.
    pub anchor_scale: u32,
    pub level_scales: Vec<u32>,
    pub base_magnification: f64,
    /// Downsample factor of the ground-truth ROI mask (the low-res view).
    pub mask_scale: u32,
    /// Stain intensity per class; a class with intensity 0 has no ROI.
    pub class_intensity: Vec<f64>,
    pub roi_count: usize,
    pub roi_radius_min: f64,
    pub roi_radius_max: f64,
    pub tissue_blobs: usize,
    pub fold_count: usize,
    pub detail_amplitude: u8,
    /// Lowest relative stain strength inside an ROI.
    pub stain_floor: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_height: 16384,
            base_width: 16384,
            anchor_scale: 16,
            level_scales: vec![1, 2, 4, 8, 16, 32],
            base_magnification: 40.0,
            mask_scale: 32,
            class_intensity: vec![0.0, 0.3, 0.6, 0.9],
            roi_count: 2,
            roi_radius_min: 1100.0,
            roi_radius_max: 1500.0,
            tissue_blobs: 3,
            fold_count: 2,
            detail_amplitude: 8,
            stain_floor: 0.75,
        }
    }
}

impl GeneratorConfig {
    pub fn num_classes(&self) -> usize {
        self.class_intensity.len()
    }

    pub fn stain_model(&self) -> StainModel {
        StainModel { class_intensity: self.class_intensity.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.anchor_scale as usize;
        if self.base_height % a != 0 || self.base_width % a != 0 {
            return Err(invalid("base size must be a multiple of anchor_scale"));
        }
        if !self.level_scales.contains(&self.anchor_scale) || self.level_scales.first() != Some(&1) {
            return Err(invalid("level_scales must start at 1 and include anchor_scale"));
        }
        if self.level_scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("level_scales must increase"));
        }
        if self.level_scales.iter().any(|&s| (s < self.anchor_scale && self.anchor_scale % s != 0)
            || (s > self.anchor_scale && s % self.anchor_scale != 0))
        {
            return Err(invalid("level scales must divide or be multiples of anchor_scale"));
        }
        if self.class_intensity.len() < 2 {
            return Err(invalid("need at least two classes"));
        }
        if self.roi_radius_min <= 0.0 || self.roi_radius_max < self.roi_radius_min {
            return Err(invalid("bad ROI radius range"));
        }
        if self.detail_amplitude > 60 {
            return Err(invalid("detail_amplitude must be <= 60"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvMap, prefix: &str) -> Result<Self> {
        let d = GeneratorConfig::default();
        let k = |s: &str| format!("{prefix}{s}");
        let cfg = GeneratorConfig {
            base_height: kv.take_or(&k("base_height"), d.base_height)?,
            base_width: kv.take_or(&k("base_width"), d.base_width)?,
            anchor_scale: kv.take_or(&k("anchor_scale"), d.anchor_scale)?,
            level_scales: kv.take_list(&k("level_scales"))?.unwrap_or(d.level_scales),
            base_magnification: kv.take_or(&k("base_magnification"), d.base_magnification)?,
            mask_scale: kv.take_or(&k("mask_scale"), d.mask_scale)?,
            class_intensity: kv.take_list(&k("class_intensity"))?.unwrap_or(d.class_intensity),
            roi_count: kv.take_or(&k("roi_count"), d.roi_count)?,
            roi_radius_min: kv.take_or(&k("roi_radius_min"), d.roi_radius_min)?,
            roi_radius_max: kv.take_or(&k("roi_radius_max"), d.roi_radius_max)?,
            tissue_blobs: kv.take_or(&k("tissue_blobs"), d.tissue_blobs)?,
            fold_count: kv.take_or(&k("fold_count"), d.fold_count)?,
            detail_amplitude: kv.take_or(&k("detail_amplitude"), d.detail_amplitude)?,
            stain_floor: kv.take_or(&k("stain_floor"), d.stain_floor)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        kv.insert(k("base_height"), self.base_height);
        kv.insert(k("base_width"), self.base_width);
        kv.insert(k("anchor_scale"), self.anchor_scale);
        kv.insert(k("level_scales"), join_list(&self.level_scales));
        kv.insert(k("base_magnification"), self.base_magnification);
        kv.insert(k("mask_scale"), self.mask_scale);
        kv.insert(k("class_intensity"), join_list(&self.class_intensity));
        kv.insert(k("roi_count"), self.roi_count);
        kv.insert(k("roi_radius_min"), self.roi_radius_min);
        kv.insert(k("roi_radius_max"), self.roi_radius_max);
        kv.insert(k("tissue_blobs"), self.tissue_blobs);
        kv.insert(k("fold_count"), self.fold_count);
        kv.insert(k("detail_amplitude"), self.detail_amplitude);
        kv.insert(k("stain_floor"), self.stain_floor);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSlideSpec {
    pub class_label: usize,
    pub roi_count: usize,
    pub roi_intensity: f64,
    /// Ground-truth ROI at `mask_scale`; filled by the generator.
    pub roi_mask: Option<Mask>,
    pub seed: u64,
}

impl SyntheticSlideSpec {
    /// The spec the class rule assigns to `class`: its configured intensity,
    /// and `roi_count` ROIs unless the intensity is zero.
    pub fn for_class(cfg: &GeneratorConfig, class: usize, seed: u64) -> Result<Self> {
        let intensity = *cfg.class_intensity.get(class).ok_or_else(|| invalid(format!("class {class} out of range")))?;
        Ok(SyntheticSlideSpec {
            class_label: class,
            roi_count: if intensity > 0.0 { cfg.roi_count } else { 0 },
            roi_intensity: intensity,
            roi_mask: None,
            seed,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Squared normalised radius; `< 1` inside.
    #[inline]
    fn r2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    fn random(rng: &mut ChaCha8Rng, cx: f64, cy: f64, a: f64, b: f64) -> Self {
        let t: f64 = rng.random_range(0.0..PI);
        Ellipse { cx, cy, a, b, cos: t.cos(), sin: t.sin() }
    }
}

/// Smooth lattice noise in `[0, 1)` with feature size `period` texels.
fn value_noise(seed: u64, x: f64, y: f64, period: f64) -> f64 {
    let (fx, fy) = (x / period, y / period);
    let (ix, iy) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - ix, fy - iy);
    let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
    let lattice = |i: f64, j: f64| -> f64 {
        let h = splitmix(seed ^ splitmix((i as i64 as u64) ^ ((j as i64 as u64) << 32)));
        (h >> 11) as f64 / (1u64 << 53) as f64
    };
    let v00 = lattice(ix, iy);
    let v10 = lattice(ix + 1.0, iy);
    let v01 = lattice(ix, iy + 1.0);
    let v11 = lattice(ix + 1.0, iy + 1.0);
    let top = v00 + (v10 - v00) * sx;
    let bot = v01 + (v11 - v01) * sx;
    top + (bot - top) * sy
}

struct Layout {
    tissue: Vec<Ellipse>,
    rois: Vec<Ellipse>,
    folds: Vec<Ellipse>,
    noise_seed: u64,
}

impl Layout {
    fn tissue_field(&self, x: f64, y: f64) -> f64 {
        let m = self.tissue.iter().map(|e| 1.0 - e.r2(x, y)).fold(f64::NEG_INFINITY, f64::max);
        m + 0.15 * (value_noise(self.noise_seed, x, y, 40.0) - 0.5)
    }

    fn in_roi(&self, x: f64, y: f64) -> bool {
        self.rois.iter().any(|e| e.r2(x, y) < 1.0)
    }
}

fn layout(cfg: &GeneratorConfig, spec: &SyntheticSlideSpec, rng: &mut ChaCha8Rng) -> Layout {
    let a = cfg.anchor_scale as f64;
    let (h, w) = (cfg.base_height as f64 / a, cfg.base_width as f64 / a);
    let dim = h.min(w);
    let tissue = (0..cfg.tissue_blobs.max(1))
        .map(|_| {
            let cx = rng.random_range(0.35..0.65) * w;
            let cy = rng.random_range(0.35..0.65) * h;
            let ra = rng.random_range(0.2..0.3) * dim;
            let rb = rng.random_range(0.15..0.25) * dim;
            Ellipse::random(rng, cx, cy, ra, rb)
        })
        .collect();
    let mut lay = Layout { tissue, rois: Vec::new(), folds: Vec::new(), noise_seed: rng.random() };

    for _ in 0..spec.roi_count {
        let r = rng.random_range(cfg.roi_radius_min..=cfg.roi_radius_max) / a;
        let mut best: Option<(f64, Ellipse)> = None;
        for _ in 0..400 {
            let cx = rng.random_range(r..(w - r).max(r + 1.0));
            let cy = rng.random_range(r..(h - r).max(r + 1.0));
            let (ra, rb) = (r * rng.random_range(0.85..1.15), r * rng.random_range(0.85..1.15));
            let cand = Ellipse::random(rng, cx, cy, ra, rb);
            // margin: lowest tissue field over centre and a ring just outside the ROI
            let mut score = lay.tissue_field(cx, cy);
            for k in 0..12 {
                let t = k as f64 * PI / 6.0;
                score = score.min(lay.tissue_field(cx + 1.2 * r * t.cos(), cy + 1.2 * r * t.sin()));
            }
            let clear = lay.rois.iter().all(|o| ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt() > o.a.max(o.b) + 1.2 * r);
            if !clear {
                score -= 10.0;
            }
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, cand));
            }
            if score > 0.05 {
                break;
            }
        }
        lay.rois.push(best.expect("at least one candidate").1);
    }

    for _ in 0..cfg.fold_count {
        let len = rng.random_range(0.06..0.12) * dim;
        let width = rng.random_range(120.0..220.0) / a;
        let mut e = Ellipse::random(rng, w / 2.0, h / 2.0, len, width.max(0.75));
        for _ in 0..200 {
            let cx = rng.random_range(0.0..w);
            let cy = rng.random_range(0.0..h);
            if lay.tissue_field(cx, cy) > 0.1 {
                e.cx = cx;
                e.cy = cy;
                break;
            }
        }
        lay.folds.push(e);
    }
    lay
}

/// Renders the slide described by `spec`. Deterministic in `(cfg, spec.seed)`.
/// Returns the pyramid and the spec with `roi_mask` filled at `mask_scale`.
pub fn generate_synthetic_slide(
    cfg: &GeneratorConfig,
    spec: &SyntheticSlideSpec,
) -> Result<(SlidePyramid, SyntheticSlideSpec)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lay = layout(cfg, spec, &mut rng);
    let a = cfg.anchor_scale;
    let (th, tw) = (cfg.base_height / a as usize, cfg.base_width / a as usize);
    let amp = cfg.detail_amplitude as f64;
    let stain_seed = splitmix(lay.noise_seed ^ 0x5EED);
    let shade_seed = splitmix(lay.noise_seed ^ 0xC0105);

    let mut anchor = RgbImage::new(tw as u32, th as u32);
    let mut roi_texels = Grid::filled(th, tw, false);
    for ty in 0..th {
        for tx in 0..tw {
            let (x, y) = (tx as f64 + 0.5, ty as f64 + 0.5);
            let shade = 1.0 + 0.06 * (value_noise(shade_seed, x, y, 3.0) - 0.5);
            let mut px = if lay.tissue_field(x, y) > 0.0 {
                TISSUE.map(|c| c * shade)
            } else {
                BACKGROUND.map(|c| c - 2.0 * (shade - 1.0) * 10.0)
            };
            if lay.in_roi(x, y) {
                roi_texels.set(tx, ty, true);
                let pattern = cfg.stain_floor + (1.0 - cfg.stain_floor) * value_noise(stain_seed, x, y, 6.0);
                let s = (spec.roi_intensity * pattern).clamp(0.0, 1.0);
                for c in 0..3 {
                    px[c] += s * (BROWN[c] - px[c]);
                }
            }
            if lay.folds.iter().any(|e| e.r2(x, y) < 1.0) {
                for c in 0..3 {
                    px[c] += 0.85 * (FOLD[c] - px[c]);
                }
            }
            let rgb = px.map(|c| c.round().clamp(amp, 255.0 - amp) as u8);
            anchor.put_pixel(tx as u32, ty as u32, image::Rgb(rgb));
        }
    }

    let mut levels = Vec::new();
    for &s in &cfg.level_scales {
        let data = if s < a {
            LevelData::Virtual
        } else if s == a {
            LevelData::Stored(anchor.clone())
        } else {
            LevelData::Stored(block_mean(&anchor, s / a))
        };
        levels.push(Level { scale: s, magnification: magnification_tag(cfg.base_magnification, s), data });
    }
    let detail = Detail { amplitude: cfg.detail_amplitude, seed: splitmix(spec.seed ^ 0xDE7A11) };
    let pyramid = SlidePyramid { base_height: cfg.base_height, base_width: cfg.base_width, levels, detail: Some(detail) };
    pyramid.validate()?;

    let (mh, mw) = pyramid.level_size(cfg.mask_scale);
    let roi_mask = if spec.roi_count == 0 { Grid::filled(mh, mw, false) } else { roi_texels.resample_majority(mh, mw) };
    let mut out = spec.clone();
    out.roi_mask = Some(roi_mask);
    Ok((pyramid, out))
}
