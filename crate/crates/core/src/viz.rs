//! File-based figures: attention heatmaps, overlays, glimpse contact sheets
//! and episode traces.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::glimpse_env::{GlimpseConfig, GlimpseEnv, GlimpsePair, TileView};
use crate::grid::Grid;
use crate::hard_attention::Episode;
use crate::sampler::Cell;
use crate::scalar::{to_f64, Scalar};
use crate::soft_attention::minmax_normalize;

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Minmax-normalised attention as a 16-bit grayscale image, one pixel per
/// grid cell.
pub fn attention_png16<S: Scalar>(probs: &Grid<S>) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let norm = minmax_normalize(probs);
    let (h, w) = norm.shape();
    let data = norm.data.iter().map(|&v| (to_f64(v).clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer sized from grid")
}

pub fn save_attention_png16<S: Scalar>(probs: &Grid<S>, path: &Path) -> Result<()> {
    attention_png16(probs).save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Blue-to-red ramp.
fn heat(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * (1.5 * v).min(1.0)) as u8;
    let g = (255.0 * (1.0 - (2.0 * v - 1.0).abs())) as u8;
    let b = (255.0 * (1.5 * (1.0 - v)).min(1.0)) as u8;
    [r, g, b]
}

/// The low-resolution view blended with the attention map, with the boxes
/// of `selected` tiles drawn on top. `pool` is the image pixels per grid
/// cell and `tile_side` the tile side in image pixels.
pub fn attention_overlay<S: Scalar>(img: &RgbImage, probs: &Grid<S>, pool: usize, selected: &[Cell], tile_side: usize) -> RgbImage {
    let norm = minmax_normalize(probs);
    let (gh, gw) = norm.shape();
    let mut out = img.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let (cx, cy) = ((x as usize / pool).min(gw - 1), (y as usize / pool).min(gh - 1));
        let c = heat(to_f64(*norm.get(cx, cy)));
        for k in 0..3 {
            p.0[k] = ((p.0[k] as u16 + c[k] as u16) / 2) as u8;
        }
    }
    let (w, h) = (out.width() as i64, out.height() as i64);
    for &(cx, cy) in selected {
        let centre = ((cx * pool) as i64, (cy * pool) as i64);
        let half = tile_side as i64 / 2;
        draw_rect(&mut out, (centre.0 - half, centre.1 - half, centre.0 + half, centre.1 + half), [0, 0, 0], (w, h));
    }
    out
}

fn draw_rect(img: &mut RgbImage, (x0, y0, x1, y1): (i64, i64, i64, i64), colour: [u8; 3], (w, h): (i64, i64)) {
    let mut put = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && x < w && y < h {
            img.put_pixel(x as u32, y as u32, Rgb(colour));
        }
    };
    for x in x0..x1 {
        put(x, y0);
        put(x, y1 - 1);
    }
    for y in y0..y1 {
        put(x0, y);
        put(x1 - 1, y);
    }
}

/// Replays an episode's locations through a fresh environment to recover
/// the glimpses it saw.
pub fn replay_glimpses<S: Scalar>(view: TileView<'_>, cfg: &GlimpseConfig, episode: &Episode<S>) -> Result<Vec<GlimpsePair>> {
    let locs = episode.locations();
    let (mut env, first) = GlimpseEnv::reset(view, cfg.clone(), locs[0])?;
    let mut pairs = vec![first];
    for (t, step) in episode.steps.iter().enumerate() {
        if let Some(p) = env.step(locs.get(t + 1).copied(), step.prediction)? {
            pairs.push(p);
        }
    }
    Ok(pairs)
}

/// One row per glimpse: the fine glimpse, then the coarse one.
pub fn contact_sheet(pairs: &[GlimpsePair]) -> RgbImage {
    let side = pairs.first().map_or(1, |p| p.g40.width());
    let gap = 4;
    let mut out = RgbImage::from_pixel(2 * side + 3 * gap, pairs.len() as u32 * (side + gap) + gap, Rgb([255, 255, 255]));
    for (i, p) in pairs.iter().enumerate() {
        let y = gap + i as u32 * (side + gap);
        image::imageops::replace(&mut out, &p.g40, gap as i64, y as i64);
        image::imageops::replace(&mut out, &p.g20, (2 * gap + side) as i64, y as i64);
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct EpisodeTrace {
    pub slide_id: String,
    pub tile: usize,
    pub base_center: (i64, i64),
    pub locations: Vec<(f64, f64)>,
    pub predictions: Vec<usize>,
    pub final_probs: Vec<f64>,
    pub pixels_read: u64,
}

impl EpisodeTrace {
    pub fn new<S: Scalar>(slide_id: &str, tile: usize, base_center: (i64, i64), ep: &Episode<S>) -> Self {
        EpisodeTrace {
            slide_id: slide_id.to_string(),
            tile,
            base_center,
            locations: ep.locations(),
            predictions: ep.predictions(),
            final_probs: ep.final_probs().iter().map(|&p| to_f64(p)).collect(),
            pixels_read: ep.pixels_read,
        }
    }
}
