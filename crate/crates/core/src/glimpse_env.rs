//! Per-tile glimpse environment: multi-resolution crops around a focus
//! point, the downscaled context image with inhibition of return, and
//! episode bookkeeping.
//!
//! Tiles are never materialised at full resolution. A [`TileView`] reads
//! the needed windows straight from the slide, through an optional
//! dihedral transform used for augmentation.

use image::{Rgb, RgbImage};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::pyramid::{block_mean, SlidePyramid};
use crate::sampler::TileWindow;

/// One of the eight symmetries of the square: optional horizontal flip,
/// then `rot` clockwise quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub flip: bool,
    pub rot: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { flip: false, rot: 0 };

    pub fn all() -> [Dihedral; 8] {
        let mut out = [Dihedral::IDENTITY; 8];
        for (i, d) in out.iter_mut().enumerate() {
            *d = Dihedral { flip: i >= 4, rot: (i % 4) as u8 };
        }
        out
    }

    pub fn index(&self) -> usize {
        usize::from(self.flip) * 4 + self.rot as usize
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Self::all()[rng.random_range(0..8)]
    }

    /// Image-space map of a pixel in an `h × w` source.
    pub fn forward_point(&self, (h, w): (usize, usize), (x, y): (usize, usize)) -> (usize, usize) {
        let (mut x, mut y, mut h, mut w) = (x, y, h, w);
        if self.flip {
            x = w - 1 - x;
        }
        for _ in 0..self.rot % 4 {
            (x, y) = (h - 1 - y, x);
            (h, w) = (w, h);
        }
        (x, y)
    }

    pub fn output_shape(&self, (h, w): (usize, usize)) -> (usize, usize) {
        if self.rot % 2 == 1 { (w, h) } else { (h, w) }
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let (h, w) = (img.height() as usize, img.width() as usize);
        let (oh, ow) = self.output_shape((h, w));
        let mut out = RgbImage::new(ow as u32, oh as u32);
        for (x, y, p) in img.enumerate_pixels() {
            let (ox, oy) = self.forward_point((h, w), (x as usize, y as usize));
            out.put_pixel(ox as u32, oy as u32, *p);
        }
        out
    }

    pub fn inverse(&self) -> Dihedral {
        // A flip conjugates rotations to their inverses, so flip∘rot is an involution.
        if self.flip { *self } else { Dihedral { flip: false, rot: (4 - self.rot % 4) % 4 } }
    }
}

/// A square base-level tile of a slide, seen through a dihedral transform.
#[derive(Clone, Copy, Debug)]
pub struct TileView<'a> {
    pub slide: &'a SlidePyramid,
    pub window: TileWindow,
    pub transform: Dihedral,
}

impl<'a> TileView<'a> {
    pub fn new(slide: &'a SlidePyramid, window: TileWindow, transform: Dihedral) -> Self {
        TileView { slide, window, transform }
    }

    pub fn size(&self) -> usize {
        self.window.size
    }

    /// Reads the view-space square region `[x0, x0 + len·scale)²` at
    /// `scale`, returning `len × len` pixels. Out-of-slide area is zero.
    pub fn read(&self, scale: u32, top_left: (i64, i64), len: usize) -> RgbImage {
        let n = (self.window.size / scale as usize) as i64;
        let s = scale as i64;
        // Work in level-`scale` pixel units inside the tile.
        let (vx, vy) = (top_left.0.div_euclid(s), top_left.1.div_euclid(s));
        let inv = self.transform.inverse();
        let corner = |x: i64, y: i64| -> (i64, i64) { map_signed(&inv, n, (x, y)) };
        let a = corner(vx, vy);
        let b = corner(vx + len as i64 - 1, vy + len as i64 - 1);
        let (sx, sy) = (a.0.min(b.0), a.1.min(b.1));
        let src = self.slide.read_scaled(scale, (self.window.top_left.0 + sx * s, self.window.top_left.1 + sy * s), (len, len));
        let mut out = self.transform.apply(&src);
        // Anything outside the tile itself is padding, not neighbouring slide.
        for (x, y, p) in out.enumerate_pixels_mut() {
            let (tx, ty) = (vx + x as i64, vy + y as i64);
            if tx < 0 || ty < 0 || tx >= n || ty >= n {
                *p = Rgb([0, 0, 0]);
            }
        }
        out
    }
}

/// Dihedral map on an `n × n` grid extended to all integer coordinates
/// (so windows straddling the tile border map consistently).
fn map_signed(d: &Dihedral, n: i64, (x, y): (i64, i64)) -> (i64, i64) {
    let (mut x, mut y) = (x, y);
    if d.flip {
        x = n - 1 - x;
    }
    for _ in 0..d.rot % 4 {
        (x, y) = (n - 1 - y, x);
    }
    (x, y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlimpseConfig {
    /// Side of the finest glimpse in base pixels.
    pub glimpse_size: usize,
    /// Number of glimpses per episode.
    pub steps: usize,
    /// Side of the context image `i_d`.
    pub context_size: usize,
}

impl Default for GlimpseConfig {
    fn default() -> Self {
        GlimpseConfig { glimpse_size: 128, steps: 6, context_size: 128 }
    }
}

impl GlimpseConfig {
    pub fn validate(&self, tile_size: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("episode needs at least one step".into()));
        }
        if self.glimpse_size == 0 || self.glimpse_size % 2 != 0 {
            return Err(Error::Config("glimpse_size must be even and positive".into()));
        }
        if self.context_size == 0 || tile_size % self.context_size != 0 || !(tile_size / self.context_size).is_power_of_two() {
            return Err(Error::Config(format!("context_size must divide tile size {tile_size} by a power of two")));
        }
        Ok(())
    }

    /// Base pixels read per glimpse pair.
    pub fn pixels_per_glimpse(&self) -> u64 {
        let g = self.glimpse_size as u64;
        g * g + 4 * g * g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlimpsePair {
    pub g40: RgbImage,
    pub g20: RgbImage,
}

/// Half-open pixel box `(x0, y0, x1, y1)`.
pub type PixelBox = (i64, i64, i64, i64);

/// Pixel centre of a normalised location in a `size`-wide tile.
pub fn loc_to_pixel(loc: (f64, f64), size: usize) -> (i64, i64) {
    let f = |v: f64| (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * size as f64).floor() as i64;
    (f(loc.0).min(size as i64 - 1), f(loc.1).min(size as i64 - 1))
}

/// Finest-glimpse bounding box in tile pixels.
pub fn glimpse_box(loc: (f64, f64), tile_size: usize, glimpse: usize) -> PixelBox {
    let (cx, cy) = loc_to_pixel(loc, tile_size);
    let h = glimpse as i64 / 2;
    (cx - h, cy - h, cx + h, cy + h)
}

/// A tile-pixel box scaled down by `factor` to cover every touched pixel,
/// clamped to `[0, n)`.
pub fn scale_box(b: PixelBox, factor: usize, n: usize) -> PixelBox {
    let f = factor as i64;
    let n = n as i64;
    (b.0.div_euclid(f).clamp(0, n), b.1.div_euclid(f).clamp(0, n), (-(-b.2).div_euclid(f)).clamp(0, n), (-(-b.3).div_euclid(f)).clamp(0, n))
}

pub fn blackout(img: &mut RgbImage, b: PixelBox) {
    for y in b.1..b.3 {
        for x in b.0..b.2 {
            img.put_pixel(x as u32, y as u32, Rgb([0, 0, 0]));
        }
    }
}

/// Crops a `len × len` square centred at `c` from an in-memory tile with
/// zero padding.
pub fn crop_centered(tile: &RgbImage, c: (i64, i64), len: usize) -> RgbImage {
    let mut out = RgbImage::new(len as u32, len as u32);
    let h = len as i64 / 2;
    for oy in 0..len as i64 {
        for ox in 0..len as i64 {
            let (x, y) = (c.0 - h + ox, c.1 - h + oy);
            if x >= 0 && y >= 0 && x < tile.width() as i64 && y < tile.height() as i64 {
                out.put_pixel(ox as u32, oy as u32, *tile.get_pixel(x as u32, y as u32));
            }
        }
    }
    out
}

/// Glimpse pair from an in-memory full-resolution tile.
pub fn extract_glimpse_pair(tile: &RgbImage, loc: (f64, f64), glimpse: usize) -> Result<GlimpsePair> {
    check_loc(loc)?;
    let c = loc_to_pixel(loc, tile.width() as usize);
    let g40 = crop_centered(tile, c, glimpse);
    let g20 = block_mean(&crop_centered(tile, c, 2 * glimpse), 2);
    Ok(GlimpsePair { g40, g20 })
}

fn check_loc(loc: (f64, f64)) -> Result<()> {
    if !(-1.0..=1.0).contains(&loc.0) || !(-1.0..=1.0).contains(&loc.1) {
        return Err(invalid(format!("location ({}, {}) outside [-1, 1]²", loc.0, loc.1)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlimpseState {
    /// Context image `i_d` with blackouts applied.
    pub tile_down: RgbImage,
    pub step: usize,
    /// Finest-glimpse boxes of visited locations, in tile pixels.
    pub visited: Vec<PixelBox>,
    pub loc: (f64, f64),
}

/// Environment for one episode over one tile.
#[derive(Clone, Debug)]
pub struct GlimpseEnv<'a> {
    pub view: TileView<'a>,
    pub config: GlimpseConfig,
    pub state: GlimpseState,
    pub predictions: Vec<usize>,
    pub locations: Vec<(f64, f64)>,
    /// Base-resolution pixels read for glimpses so far.
    pub pixels_read: u64,
}

impl<'a> GlimpseEnv<'a> {
    /// Starts an episode at `first_loc` and returns the first glimpse pair.
    pub fn reset(view: TileView<'a>, config: GlimpseConfig, first_loc: (f64, f64)) -> Result<(Self, GlimpsePair)> {
        config.validate(view.size())?;
        check_loc(first_loc)?;
        let factor = (view.size() / config.context_size) as u32;
        let tile_down = view.read(factor, (0, 0), config.context_size);
        let state = GlimpseState { tile_down, step: 0, visited: Vec::new(), loc: first_loc };
        let mut env = GlimpseEnv { view, config, state, predictions: Vec::new(), locations: vec![first_loc], pixels_read: 0 };
        let pair = env.observe(first_loc);
        Ok((env, pair))
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.config.steps
    }

    fn observe(&mut self, loc: (f64, f64)) -> GlimpsePair {
        let g = self.config.glimpse_size;
        let (cx, cy) = loc_to_pixel(loc, self.view.size());
        let h = g as i64 / 2;
        let g40 = self.view.read(1, (cx - h, cy - h), g);
        let g20 = self.view.read(2, (cx - 2 * h, cy - 2 * h), g);
        self.pixels_read += self.config.pixels_per_glimpse();
        GlimpsePair { g40, g20 }
    }

    fn current_box(&self) -> PixelBox {
        let n = self.config.context_size;
        let b = glimpse_box(self.state.loc, self.view.size(), self.config.glimpse_size);
        scale_box(b, self.view.size() / n, n)
    }

    /// The context image as it will look once the current location is
    /// blacked out, without advancing the episode.
    pub fn context_after_ior(&self) -> RgbImage {
        let mut img = self.state.tile_down.clone();
        blackout(&mut img, self.current_box());
        img
    }

    /// Records the prediction, blacks out the current glimpse, and moves to
    /// `next_loc`. Pass `None` on the last step.
    pub fn step(&mut self, next_loc: Option<(f64, f64)>, predicted: usize) -> Result<Option<GlimpsePair>> {
        if self.finished() {
            return Err(Error::EpisodeFinished(self.config.steps));
        }
        if let Some(l) = next_loc {
            check_loc(l)?;
        }
        self.predictions.push(predicted);
        let b = self.current_box();
        blackout(&mut self.state.tile_down, b);
        self.state.visited.push(glimpse_box(self.state.loc, self.view.size(), self.config.glimpse_size));
        self.state.step += 1;
        match next_loc {
            Some(l) if !self.finished() => {
                self.state.loc = l;
                self.locations.push(l);
                Ok(Some(self.observe(l)))
            }
            _ => Ok(None),
        }
    }
}
