use image::RgbImage;
use log::warn;

use crate::grid::{Grid, Mask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TissueMaskConfig {
    pub open_radius: usize,
    pub close_radius: usize,
}

impl Default for TissueMaskConfig {
    fn default() -> Self {
        TissueMaskConfig { open_radius: 2, close_radius: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TissueMask {
    pub mask: Mask,
    pub coverage: f64,
    /// Set when the input had a single intensity and no threshold exists.
    pub degenerate: bool,
}

/// Luminance `0.299 R + 0.587 G + 0.114 B`, rounded to 8 bits.
pub fn grayscale(img: &RgbImage) -> Grid<u8> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| luminance(p.0).round() as u8).collect();
    Grid::from_vec(h, w, data)
}

#[inline]
pub fn luminance(p: [u8; 3]) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Otsu's threshold on an 8-bit histogram: the level `t` maximising the
/// between-class variance of `{v <= t}` vs `{v > t}`. `None` when all pixels
/// share one value.
pub fn otsu_threshold(gray: &Grid<u8>) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &v in &gray.data {
        hist[v as usize] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total = gray.data.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0u8);
    for (t, &c) in hist.iter().enumerate().take(255) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best.0 {
            best = (var, t as u8);
        }
    }
    Some(best.1)
}

fn disk(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut offs = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                offs.push((dx, dy));
            }
        }
    }
    offs
}

/// Binary erosion (`erode = true`) or dilation by a disk; out-of-bounds
/// neighbours are ignored.
fn morph(mask: &Mask, radius: usize, erode: bool) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let offs = disk(radius);
    let (h, w) = (mask.height as i64, mask.width as i64);
    Grid::from_fn(mask.height, mask.width, |x, y| {
        let mut any = false;
        let mut all = true;
        for &(dx, dy) in &offs {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= w || ny >= h {
                continue;
            }
            let v = *mask.get(nx as usize, ny as usize);
            any |= v;
            all &= v;
        }
        if erode {
            all
        } else {
            any
        }
    })
}

pub fn morph_open(mask: &Mask, radius: usize) -> Mask {
    morph(&morph(mask, radius, true), radius, false)
}

pub fn morph_close(mask: &Mask, radius: usize) -> Mask {
    morph(&morph(mask, radius, false), radius, true)
}

/// Grayscale, Otsu, then opening followed by closing. Tissue is the darker
/// class.
pub fn tissue_mask(img: &RgbImage, cfg: &TissueMaskConfig) -> TissueMask {
    let gray = grayscale(img);
    let Some(t) = otsu_threshold(&gray) else {
        warn!("tissue mask: single-intensity image, returning empty mask");
        return TissueMask { mask: Grid::filled(gray.height, gray.width, false), coverage: 0.0, degenerate: true };
    };
    let raw = gray.map(|&v| v <= t);
    let mask = morph_close(&morph_open(&raw, cfg.open_radius), cfg.close_radius);
    let coverage = mask.coverage();
    TissueMask { mask, coverage, degenerate: false }
}

/// Paints every pixel outside `mask` white.
pub fn apply_mask(img: &RgbImage, mask: &Mask) -> RgbImage {
    let mut out = img.clone();
    for (i, p) in out.pixels_mut().enumerate() {
        if !mask.data[i] {
            p.0 = [255, 255, 255];
        }
    }
    out
}
