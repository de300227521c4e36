//! Multi-resolution slide access, tissue masking and synthetic slides.

mod io;
mod synth;
mod tissue;

pub use io::{load_slide, save_slide};
pub use synth::{generate_synthetic_slide, GeneratorConfig, SyntheticSlideSpec, StainModel};
pub use tissue::{apply_mask, grayscale, luminance, morph_close, morph_open, otsu_threshold, tissue_mask, TissueMask, TissueMaskConfig};

use image::RgbImage;

use crate::error::{invalid, Result};

/// Pixel storage of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub enum LevelData {
    Stored(RgbImage),
    /// Synthesized from the anchor (first stored) level by nearest upsampling;
    /// the base level additionally carries the slide's detail pattern.
    Virtual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub scale: u32,
    pub magnification: String,
    pub data: LevelData,
}

/// Deterministic zero-mean texture added to virtual base pixels. Within every
/// aligned 2×2 block the pattern is `+m, −m, −m, +m`, so block means of the
/// base equal the anchor exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Detail {
    pub amplitude: u8,
    pub seed: u64,
}

impl Detail {
    #[inline]
    pub fn offset(&self, x: u64, y: u64) -> i32 {
        if self.amplitude == 0 {
            return 0;
        }
        let h = splitmix(self.seed ^ splitmix((x >> 1) ^ ((y >> 1) << 32)));
        let m = (h % (self.amplitude as u64 + 1)) as i32;
        if (x + y) & 1 == 0 {
            m
        } else {
            -m
        }
    }
}

#[inline]
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A slide as an ordered list of levels, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidePyramid {
    pub base_height: usize,
    pub base_width: usize,
    pub levels: Vec<Level>,
    pub detail: Option<Detail>,
}

/// Magnification label for a level `scale` times coarser than `base_mag`.
pub fn magnification_tag(base_mag: f64, scale: u32) -> String {
    let m = base_mag / scale as f64;
    if (m - m.round()).abs() < 1e-9 {
        format!("{}x", m.round() as i64)
    } else {
        format!("{}x", m)
    }
}

impl SlidePyramid {
    /// Builds a fully stored pyramid from a base raster; each level is the
    /// rounded block mean of the base.
    pub fn from_base(base: RgbImage, scales: &[u32], base_mag: f64) -> Result<Self> {
        if scales.first() != Some(&1) {
            return Err(invalid("level scales must start at 1"));
        }
        if scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("level scales must be strictly increasing"));
        }
        let (bh, bw) = (base.height() as usize, base.width() as usize);
        let mut levels = Vec::with_capacity(scales.len());
        for &s in scales {
            let data = if s == 1 { base.clone() } else { block_mean(&base, s) };
            levels.push(Level { scale: s, magnification: magnification_tag(base_mag, s), data: LevelData::Stored(data) });
        }
        Ok(SlidePyramid { base_height: bh, base_width: bw, levels, detail: None })
    }

    pub fn base_area(&self) -> u64 {
        self.base_height as u64 * self.base_width as u64
    }

    pub fn scales(&self) -> Vec<u32> {
        self.levels.iter().map(|l| l.scale).collect()
    }

    pub fn level_size(&self, scale: u32) -> (usize, usize) {
        let s = scale as usize;
        (self.base_height.div_ceil(s), self.base_width.div_ceil(s))
    }

    pub fn level_by_tag(&self, tag: &str) -> Option<&Level> {
        self.levels.iter().find(|l| l.magnification == tag)
    }

    fn anchor(&self) -> Option<&Level> {
        self.levels.iter().find(|l| matches!(l.data, LevelData::Stored(_)))
    }

    /// Checks structural invariants: scales start at 1 and increase, at least
    /// one stored level, and virtual levels only below the anchor.
    pub fn validate(&self) -> Result<()> {
        let scales = self.scales();
        if scales.first() != Some(&1) || scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("level scales must start at 1 and strictly increase"));
        }
        let anchor = self.anchor().ok_or_else(|| invalid("pyramid has no stored level"))?;
        for l in &self.levels {
            match &l.data {
                LevelData::Virtual if l.scale >= anchor.scale || anchor.scale % l.scale != 0 => {
                    return Err(invalid(format!("virtual level at scale {} is not below the anchor", l.scale)));
                }
                LevelData::Stored(img) => {
                    let (h, w) = self.level_size(l.scale);
                    if (img.height() as i64 - h as i64).abs() > 1 || (img.width() as i64 - w as i64).abs() > 1 {
                        return Err(invalid(format!("level {} has size {}x{}", l.scale, img.width(), img.height())));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Reads a `size = (height, width)` window at magnification `tag`;
    /// `top_left` is in base pixels. Out-of-bounds pixels are zero.
    pub fn read_region(&self, tag: &str, top_left: (i64, i64), size: (usize, usize)) -> Result<RgbImage> {
        let level = self.level_by_tag(tag).ok_or_else(|| invalid(format!("unknown level tag {tag}")))?;
        let img = self.read_scaled(level.scale, top_left, size);
        Ok(img)
    }

    /// Like [`read_region`](Self::read_region) but fails when the window lies
    /// entirely outside the slide.
    pub fn read_region_strict(&self, tag: &str, top_left: (i64, i64), size: (usize, usize)) -> Result<RgbImage> {
        let level = self.level_by_tag(tag).ok_or_else(|| invalid(format!("unknown level tag {tag}")))?;
        let s = level.scale as i64;
        let (x0, y0) = top_left;
        let (x1, y1) = (x0 + size.1 as i64 * s, y0 + size.0 as i64 * s);
        if x1 <= 0 || y1 <= 0 || x0 >= self.base_width as i64 || y0 >= self.base_height as i64 {
            return Err(invalid("requested region does not intersect the slide"));
        }
        Ok(self.read_scaled(level.scale, top_left, size))
    }

    /// Reads a window at any integer downsample `scale`, using the matching
    /// level when present and otherwise block-averaging the finest level whose
    /// scale divides `scale`.
    pub fn read_scaled(&self, scale: u32, top_left: (i64, i64), size: (usize, usize)) -> RgbImage {
        if let Some(level) = self.levels.iter().find(|l| l.scale == scale) {
            return self.read_level(level, top_left, size);
        }
        let src = self
            .levels
            .iter()
            .rev()
            .find(|l| l.scale < scale && scale % l.scale == 0)
            .expect("level scale 1 always divides");
        let ratio = scale / src.scale;
        let fine = self.read_level(src, top_left, (size.0 * ratio as usize, size.1 * ratio as usize));
        block_mean(&fine, ratio)
    }

    fn read_level(&self, level: &Level, top_left: (i64, i64), size: (usize, usize)) -> RgbImage {
        let s = level.scale as i64;
        let lx0 = top_left.0.div_euclid(s);
        let ly0 = top_left.1.div_euclid(s);
        let (lh, lw) = self.level_size(level.scale);
        let mut out = RgbImage::new(size.1 as u32, size.0 as u32);
        match &level.data {
            LevelData::Stored(img) => {
                let (ih, iw) = (img.height() as i64, img.width() as i64);
                copy_window(img, (lx0, ly0), (ih.min(lh as i64 + 1), iw.min(lw as i64 + 1)), &mut out);
            }
            LevelData::Virtual => {
                let anchor = self.anchor().expect("validated pyramid");
                let LevelData::Stored(aimg) = &anchor.data else { unreachable!() };
                let ratio = (anchor.scale / level.scale) as i64;
                let detail = if level.scale == 1 { self.detail } else { None };
                let raw = aimg.as_raw();
                let aw = aimg.width() as i64;
                let ah = aimg.height() as i64;
                let buf = out.as_mut();
                for oy in 0..size.0 as i64 {
                    let ly = ly0 + oy;
                    if ly < 0 || ly >= lh as i64 {
                        continue;
                    }
                    let ay = (ly / ratio).min(ah - 1);
                    for ox in 0..size.1 as i64 {
                        let lx = lx0 + ox;
                        if lx < 0 || lx >= lw as i64 {
                            continue;
                        }
                        let ax = (lx / ratio).min(aw - 1);
                        let a = ((ay * aw + ax) * 3) as usize;
                        let o = ((oy * size.1 as i64 + ox) * 3) as usize;
                        match detail {
                            Some(d) => {
                                let off = d.offset(lx as u64, ly as u64);
                                for c in 0..3 {
                                    buf[o + c] = (raw[a + c] as i32 + off).clamp(0, 255) as u8;
                                }
                            }
                            None => buf[o..o + 3].copy_from_slice(&raw[a..a + 3]),
                        }
                    }
                }
            }
        }
        out
    }
}

fn copy_window(src: &RgbImage, origin: (i64, i64), bounds: (i64, i64), out: &mut RgbImage) {
    let (ow, oh) = (out.width() as i64, out.height() as i64);
    let sw = src.width() as i64;
    let (bh, bw) = bounds;
    let x_lo = (-origin.0).max(0);
    let x_hi = (bw - origin.0).min(ow);
    if x_hi <= x_lo {
        return;
    }
    let raw = src.as_raw();
    let buf = out.as_mut();
    for oy in 0..oh {
        let sy = origin.1 + oy;
        if sy < 0 || sy >= bh {
            continue;
        }
        let s0 = ((sy * sw + origin.0 + x_lo) * 3) as usize;
        let s1 = ((sy * sw + origin.0 + x_hi) * 3) as usize;
        let d0 = ((oy * ow + x_lo) * 3) as usize;
        buf[d0..d0 + (s1 - s0)].copy_from_slice(&raw[s0..s1]);
    }
}

/// Rounded mean over non-overlapping `factor × factor` blocks; partial edge
/// blocks average the pixels they contain.
pub fn block_mean(img: &RgbImage, factor: u32) -> RgbImage {
    if factor == 1 {
        return img.clone();
    }
    let f = factor as usize;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (ow, oh) = (w.div_ceil(f), h.div_ceil(f));
    let mut sums = vec![0u64; ow * oh * 3];
    let mut counts = vec![0u64; ow * oh];
    let raw = img.as_raw();
    for y in 0..h {
        let oy = y / f;
        for x in 0..w {
            let o = oy * ow + x / f;
            counts[o] += 1;
            let p = (y * w + x) * 3;
            for c in 0..3 {
                sums[o * 3 + c] += raw[p + c] as u64;
            }
        }
    }
    let data = sums.iter().enumerate().map(|(i, &s)| {
        let n = counts[i / 3];
        ((s + n / 2) / n) as u8
    });
    RgbImage::from_raw(ow as u32, oh as u32, data.collect()).expect("sized buffer")
}

/// Full raster of the slide downsampled by `factor`.
pub fn downsample(slide: &SlidePyramid, factor: u32) -> Result<RgbImage> {
    if factor < 1 {
        return Err(invalid("downsample factor must be >= 1"));
    }
    let size = slide.level_size(factor);
    Ok(slide.read_scaled(factor, (0, 0), size))
}
