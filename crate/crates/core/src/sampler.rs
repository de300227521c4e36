//! Attention sampling: noise injection, tumor/positive masks, final
//! attention, top-k candidates, spatial distinctness, and the mapping from
//! grid cells back to base-level tiles.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, Mask};
use crate::kv::KvMap;
use crate::pyramid::SlidePyramid;
use crate::scalar::{lit, to_f64, Scalar};
use crate::soft_attention::{minmax_normalize, AttentionMap};

/// Grid coordinate `(x, y)` = `(column, row)`.
pub type Cell = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub low: f64,
    pub high: f64,
    pub seed: u64,
}

/// I.i.d. uniform noise over `(low, high]`.
pub fn make_noise<S: Scalar>(shape: (usize, usize), cfg: &NoiseConfig) -> Result<Grid<S>> {
    if !(cfg.high > cfg.low) {
        return Err(invalid(format!("noise range ({}, {}] is empty", cfg.low, cfg.high)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let span = cfg.high - cfg.low;
    Ok(Grid::from_fn(shape.0, shape.1, |_, _| {
        let u: f64 = rng.random();
        lit(cfg.high - u * span)
    }))
}

/// Box mean over a `window × window` neighbourhood, clipped at the borders
/// (the mean is over in-bounds cells only).
pub fn local_mean<S: Scalar>(a: &Grid<S>, window: usize) -> Grid<f64> {
    let (h, w) = a.shape();
    let mut integral = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += to_f64(*a.get(x, y));
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let r = window / 2;
    Grid::from_fn(h, w, |x, y| {
        let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        let at = |yy: usize, xx: usize| integral[yy * (w + 1) + xx];
        let sum = at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0);
        sum / ((x1 - x0) * (y1 - y0)) as f64
    })
}

/// Adaptive threshold: a cell is set when it exceeds its local mean by more
/// than `offset`.
pub fn positive_mask<S: Scalar>(norm: &Grid<S>, window: usize, offset: f64) -> Mask {
    let mean = local_mean(norm, window.max(1));
    Grid::from_vec(
        norm.height,
        norm.width,
        norm.data.iter().zip(&mean.data).map(|(&v, &m)| to_f64(v) > m + offset).collect(),
    )
}

pub const KMEANS_MAX_ITER: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct TumorMask {
    pub mask: Mask,
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Set when fewer than `k` distinct values forced the midpoint rule.
    pub fallback: bool,
}

/// Initial centroids: the `(2i + 1) / 2k` quantiles of the sorted values.
pub fn kmeans_init(values: &[f64], k: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    (0..k).map(|i| sorted[((2 * i + 1) * n / (2 * k)).min(n - 1)]).collect()
}

/// Nearest centroid, ties toward the lower index.
pub fn nearest_centroid(v: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    for (i, &c) in centroids.iter().enumerate().skip(1) {
        if (v - c).abs() < (v - centroids[best]).abs() {
            best = i;
        }
    }
    best
}

/// 1-D k-means over the map values; the mask is the highest-centroid cluster.
pub fn tumor_mask<S: Scalar>(norm: &Grid<S>, k: usize) -> Result<TumorMask> {
    if k < 2 {
        return Err(invalid("k-means needs k >= 2"));
    }
    if norm.is_empty() {
        return Err(invalid("empty attention map"));
    }
    let values: Vec<f64> = norm.data.iter().map(|&v| to_f64(v)).collect();
    let mut distinct = values.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < k {
        let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
        let mid = 0.5 * (lo + hi);
        log::warn!("tumor mask: {} distinct values < k = {k}, midpoint threshold {mid}", distinct.len());
        let assignment: Vec<usize> = values.iter().map(|&v| usize::from(v > mid)).collect();
        let mask = Grid::from_vec(norm.height, norm.width, assignment.iter().map(|&a| a == 1).collect());
        return Ok(TumorMask { mask, centroids: vec![lo, hi], assignment, fallback: true });
    }
    let mut centroids = kmeans_init(&values, k);
    let mut assignment: Vec<usize> = values.iter().map(|&v| nearest_centroid(v, &centroids)).collect();
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&v, &a) in values.iter().zip(&assignment) {
            sums[a] += v;
            counts[a] += 1;
        }
        for i in 0..k {
            if counts[i] > 0 {
                centroids[i] = sums[i] / counts[i] as f64;
            }
        }
        let next: Vec<usize> = values.iter().map(|&v| nearest_centroid(v, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let top = (0..k).fold(0, |b, i| if centroids[i] > centroids[b] { i } else { b });
    let mask = Grid::from_vec(norm.height, norm.width, assignment.iter().map(|&a| a == top).collect());
    Ok(TumorMask { mask, centroids, assignment, fallback: false })
}

/// `m ⊙ n + m ⊙ Ā`.
pub fn final_attention<S: Scalar>(m: &Mask, noise: &Grid<S>, norm: &Grid<S>) -> Result<Grid<S>> {
    if m.shape() != noise.shape() || m.shape() != norm.shape() {
        return Err(Error::ShapeMismatch {
            expected: vec![m.height, m.width],
            actual: vec![noise.height, noise.width, norm.height, norm.width],
        });
    }
    let data = m
        .data
        .iter()
        .zip(&noise.data)
        .zip(&norm.data)
        .map(|((&mi, &n), &a)| if mi { n + a } else { S::zero() })
        .collect();
    Ok(Grid::from_vec(m.height, m.width, data))
}

/// The `count` strictly positive cells with the largest values, descending;
/// equal values keep row-major order.
pub fn sample_locations<S: Scalar>(fa: &Grid<S>, count: usize) -> Vec<Cell> {
    let mut idx: Vec<usize> = (0..fa.len()).filter(|&i| fa.data[i] > S::zero()).collect();
    idx.sort_by(|&a, &b| fa.data[b].partial_cmp(&fa.data[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(count);
    idx.into_iter().map(|i| (i % fa.width, i / fa.width)).collect()
}

pub fn cell_distance(a: Cell, b: Cell) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    (dx * dx + dy * dy).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult {
    pub points: Vec<Cell>,
    /// Number accepted under the original threshold.
    pub strict_count: usize,
    /// The halved threshold was needed.
    pub relaxed: bool,
    /// Even the halved threshold left a shortfall; distinct leftovers filled it.
    pub filled: bool,
}

/// Greedy distance filter over candidates ordered by descending attention.
pub fn spatial_filter(candidates: &[Cell], d_t: f64, n: usize) -> FilterResult {
    let mut taken = vec![false; candidates.len()];
    let mut points: Vec<Cell> = Vec::new();
    let pass = |threshold: f64, points: &mut Vec<Cell>, taken: &mut [bool]| {
        for (i, &c) in candidates.iter().enumerate() {
            if points.len() >= n {
                break;
            }
            if !taken[i] && points.iter().all(|&p| cell_distance(p, c) > threshold) {
                taken[i] = true;
                points.push(c);
            }
        }
    };
    pass(d_t, &mut points, &mut taken);
    let strict_count = points.len();
    let mut relaxed = false;
    let mut filled = false;
    if points.len() < n && strict_count < candidates.len() {
        relaxed = true;
        pass(d_t / 2.0, &mut points, &mut taken);
        if points.len() < n {
            let before = points.len();
            pass(0.0, &mut points, &mut taken);
            filled = points.len() > before;
        }
    }
    FilterResult { points, strict_count, relaxed, filled }
}

/// Base-level tile centre of each grid cell: `(x·s·pool, y·s·pool)`.
pub fn map_to_slide(cells: &[Cell], s: u32, pool: usize) -> Result<Vec<(i64, i64)>> {
    if s < 1 || pool < 1 {
        return Err(invalid("map_to_slide needs s >= 1 and pool >= 1"));
    }
    let f = s as i64 * pool as i64;
    Ok(cells.iter().map(|&(x, y)| (x as i64 * f, y as i64 * f)).collect())
}

/// Grid cell containing a base-level coordinate.
pub fn slide_to_cell(p: (i64, i64), s: u32, pool: usize) -> Cell {
    let f = s as i64 * pool as i64;
    ((p.0.max(0) / f) as usize, (p.1.max(0) / f) as usize)
}

/// Square base-level tile window around a centre.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileWindow {
    pub top_left: (i64, i64),
    pub size: usize,
}

impl TileWindow {
    pub fn centered(center: (i64, i64), size: usize) -> Self {
        let half = (size / 2) as i64;
        TileWindow { top_left: (center.0 - half, center.1 - half), size }
    }

    /// The part of the window inside a `height × width` slide, as
    /// `(x0, y0, x1, y1)` half-open; `None` if disjoint.
    pub fn clamp(&self, height: usize, width: usize) -> Option<(usize, usize, usize, usize)> {
        let x0 = self.top_left.0.max(0);
        let y0 = self.top_left.1.max(0);
        let x1 = (self.top_left.0 + self.size as i64).min(width as i64);
        let y1 = (self.top_left.1 + self.size as i64).min(height as i64);
        (x1 > x0 && y1 > y0).then_some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Adaptive threshold on the normalised map.
    Positive,
    /// Highest cluster of a 1-D k-means.
    Tumor,
}

impl std::str::FromStr for MaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(MaskKind::Positive),
            "tumor" => Ok(MaskKind::Tumor),
            _ => Err(Error::Config(format!("unknown mask kind '{s}' (positive|tumor)"))),
        }
    }
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskKind::Positive => "positive",
            MaskKind::Tumor => "tumor",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub tiles: usize,
    pub candidates: usize,
    pub noise_low: f64,
    pub noise_high: f64,
    pub mask_kind: MaskKind,
    pub window: usize,
    pub offset: f64,
    pub clusters: usize,
    /// Distance threshold in grid units; `None` derives it from the tile size.
    pub d_t: Option<f64>,
    /// Downsample factor of the attention input relative to base.
    pub scale: u32,
    pub tile_size_base: usize,
    pub tile_size_model: usize,
}

impl SamplerConfig {
    pub fn her2() -> Self {
        SamplerConfig {
            tiles: 10,
            candidates: 20,
            noise_low: 0.0,
            noise_high: 1.0,
            mask_kind: MaskKind::Positive,
            window: 31,
            offset: 0.02,
            clusters: 3,
            d_t: None,
            scale: 32,
            tile_size_base: 2048,
            tile_size_model: 128,
        }
    }

    pub fn mmr() -> Self {
        SamplerConfig { tiles: 15, candidates: 30, noise_low: -2.0, noise_high: 1.0, mask_kind: MaskKind::Tumor, ..Self::her2() }
    }

    /// Half a tile width in grid units, so accepted tiles overlap by at most half.
    pub fn distance_threshold(&self, pool: usize) -> f64 {
        self.d_t.unwrap_or(self.tile_size_base as f64 / (2.0 * self.scale as f64 * pool as f64))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiles == 0 || self.candidates < self.tiles {
            return Err(Error::Config("sampler needs tiles >= 1 and candidates >= tiles".into()));
        }
        if !(self.noise_high > self.noise_low) {
            return Err(Error::Config("noise_high must exceed noise_low".into()));
        }
        if self.scale == 0 || self.tile_size_base == 0 || self.tile_size_model == 0 {
            return Err(Error::Config("scale and tile sizes must be positive".into()));
        }
        if self.tile_size_base % self.tile_size_model != 0 || !(self.tile_size_base / self.tile_size_model).is_power_of_two() {
            return Err(Error::Config("tile_size_base / tile_size_model must be a power of two".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvMap, prefix: &str, d: Self) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let cfg = SamplerConfig {
            tiles: kv.take_or(&k("tiles"), d.tiles)?,
            candidates: kv.take_or(&k("candidates"), d.candidates)?,
            noise_low: kv.take_or(&k("noise_low"), d.noise_low)?,
            noise_high: kv.take_or(&k("noise_high"), d.noise_high)?,
            mask_kind: kv.take_or(&k("mask_kind"), d.mask_kind)?,
            window: kv.take_or(&k("window"), d.window)?,
            offset: kv.take_or(&k("offset"), d.offset)?,
            clusters: kv.take_or(&k("clusters"), d.clusters)?,
            d_t: match kv.take_str(&k("d_t")).as_deref() {
                None => d.d_t,
                Some("auto") => None,
                Some(v) => Some(v.parse().map_err(|_| Error::Config(format!("bad value for {}: {v}", k("d_t"))))?),
            },
            scale: kv.take_or(&k("scale"), d.scale)?,
            tile_size_base: kv.take_or(&k("tile_size_base"), d.tile_size_base)?,
            tile_size_model: kv.take_or(&k("tile_size_model"), d.tile_size_model)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        kv.insert(k("tiles"), self.tiles);
        kv.insert(k("candidates"), self.candidates);
        kv.insert(k("noise_low"), self.noise_low);
        kv.insert(k("noise_high"), self.noise_high);
        kv.insert(k("mask_kind"), self.mask_kind);
        kv.insert(k("window"), self.window);
        kv.insert(k("offset"), self.offset);
        kv.insert(k("clusters"), self.clusters);
        kv.insert(k("d_t"), self.d_t.map_or("auto".to_string(), |v| v.to_string()));
        kv.insert(k("scale"), self.scale);
        kv.insert(k("tile_size_base"), self.tile_size_base);
        kv.insert(k("tile_size_model"), self.tile_size_model);
    }
}

/// Everything the sampler decided for one slide, on the attention grid.
#[derive(Clone, Debug)]
pub struct Selection<S> {
    pub normalized: Grid<S>,
    pub mask: Mask,
    pub final_map: Grid<S>,
    pub candidates: Vec<Cell>,
    pub selected: Vec<Cell>,
    /// Attention probability of each selected cell.
    pub attention_values: Vec<S>,
    pub d_t: f64,
    /// Mask was empty or too small and fell back to the tissue mask.
    pub widened: bool,
    /// Leading entries of `selected` that passed the unrelaxed threshold.
    pub strict_count: usize,
    pub relaxed: bool,
    pub filled: bool,
    pub kmeans_fallback: bool,
}

/// Runs mask construction, noise, final attention, top-k and the distance
/// filter on one attention map. `tissue` must be on the attention grid.
pub fn select_cells<S: Scalar>(
    map: &AttentionMap<S>,
    tissue: &Mask,
    cfg: &SamplerConfig,
    pool: usize,
    noise_seed: u64,
) -> Result<Selection<S>> {
    let shape = map.probs.shape();
    if tissue.shape() != shape {
        return Err(Error::ShapeMismatch { expected: vec![shape.0, shape.1], actual: vec![tissue.height, tissue.width] });
    }
    let normalized = minmax_normalize(&map.probs);
    let (raw, kmeans_fallback) = match cfg.mask_kind {
        MaskKind::Positive => (positive_mask(&normalized, cfg.window, cfg.offset), false),
        MaskKind::Tumor => {
            let t = tumor_mask(&normalized, cfg.clusters)?;
            (t.mask, t.fallback)
        }
    };
    let support = if tissue.count() > 0 { tissue.clone() } else { Grid::filled(shape.0, shape.1, true) };
    let mut mask = raw.and(&support);
    let noise = make_noise::<S>(shape, &NoiseConfig { low: cfg.noise_low, high: cfg.noise_high, seed: noise_seed })?;
    let mut final_map = final_attention(&mask, &noise, &normalized)?;
    let positive = |g: &Grid<S>| g.data.iter().filter(|&&v| v > S::zero()).count();
    let mut widened = false;
    if positive(&final_map) < cfg.tiles {
        widened = true;
        mask = support;
        final_map = final_attention(&mask, &noise, &normalized)?;
    }
    let candidates = sample_locations(&final_map, cfg.candidates);
    let d_t = cfg.distance_threshold(pool);
    let filt = spatial_filter(&candidates, d_t, cfg.tiles);
    let attention_values = filt.points.iter().map(|&(x, y)| *map.probs.get(x, y)).collect();
    Ok(Selection {
        normalized,
        mask,
        final_map,
        candidates,
        selected: filt.points,
        attention_values,
        d_t,
        widened,
        strict_count: filt.strict_count,
        relaxed: filt.relaxed,
        filled: filt.filled,
        kmeans_fallback,
    })
}

#[derive(Clone, Debug)]
pub struct TileSet<S> {
    pub locations_lowres: Vec<Cell>,
    pub locations_base: Vec<(i64, i64)>,
    pub windows: Vec<TileWindow>,
    /// Tiles at model size.
    pub tiles: Vec<RgbImage>,
    pub attention_values: Vec<S>,
    pub tile_size_base: usize,
    pub tile_size_model: usize,
}

impl<S> TileSet<S> {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

/// Maps selected cells to base windows and reads each one at model size.
pub fn extract_tiles<S: Scalar>(
    slide: &SlidePyramid,
    cells: &[Cell],
    attention_values: &[S],
    cfg: &SamplerConfig,
    pool: usize,
) -> Result<TileSet<S>> {
    if cells.len() != attention_values.len() {
        return Err(invalid("one attention value per cell required"));
    }
    let locations_base = map_to_slide(cells, cfg.scale, pool)?;
    let windows: Vec<TileWindow> = locations_base.iter().map(|&c| TileWindow::centered(c, cfg.tile_size_base)).collect();
    let factor = (cfg.tile_size_base / cfg.tile_size_model) as u32;
    let tiles = windows
        .iter()
        .map(|w| slide.read_scaled(factor, w.top_left, (cfg.tile_size_model, cfg.tile_size_model)))
        .collect();
    Ok(TileSet {
        locations_lowres: cells.to_vec(),
        locations_base,
        windows,
        tiles,
        attention_values: attention_values.to_vec(),
        tile_size_base: cfg.tile_size_base,
        tile_size_model: cfg.tile_size_model,
    })
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SamplerDump {
    pub candidates: Vec<Cell>,
    pub selected: Vec<Cell>,
    pub base_centers: Vec<(i64, i64)>,
    pub attention_values: Vec<f64>,
    pub d_t: f64,
    pub widened: bool,
    pub relaxed: bool,
    pub filled: bool,
}

impl SamplerDump {
    pub fn new<S: Scalar>(sel: &Selection<S>, cfg: &SamplerConfig, pool: usize) -> Result<Self> {
        Ok(SamplerDump {
            candidates: sel.candidates.clone(),
            selected: sel.selected.clone(),
            base_centers: map_to_slide(&sel.selected, cfg.scale, pool)?,
            attention_values: sel.attention_values.iter().map(|&v| to_f64(v)).collect(),
            d_t: sel.d_t,
            widened: sel.widened,
            relaxed: sel.relaxed,
            filled: sel.filled,
        })
    }
}
