//! Synthetic datasets on disk: slides, ground-truth labels and ROI masks.
//!
//! ```text
//! <root>/dataset.txt          generator snapshot
//! <root>/labels.csv           slide_id,label,seed
//! <root>/slides/<id>/         one slide directory per slide
//! <root>/masks/<id>.png       ROI mask (0/255) at generator.mask_scale
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::config::DatasetConfig;
use crate::error::{io_err, Error, Result};
use crate::grid::{Grid, Mask};
use crate::kv::KvMap;
use crate::pyramid::{generate_synthetic_slide, load_slide, save_slide, SlidePyramid, SyntheticSlideSpec};
use crate::seed::derive_seed;

/// A labelled slide in memory.
#[derive(Clone, Debug)]
pub struct SlideData {
    pub id: String,
    pub label: usize,
    pub seed: u64,
    pub pyramid: SlidePyramid,
    /// Ground-truth ROI, if known, with the scale it is stored at.
    pub roi: Option<(Mask, u32)>,
}

pub fn slide_id(i: usize) -> String {
    format!("slide_{i:03}")
}

/// Class-balanced specs: slide `i` gets class `i mod classes`.
pub fn dataset_specs(cfg: &DatasetConfig) -> Result<Vec<(String, SyntheticSlideSpec)>> {
    let classes = cfg.generator.num_classes();
    (0..cfg.count)
        .map(|i| {
            let seed = derive_seed(cfg.seed, &[i as u64]);
            SyntheticSlideSpec::for_class(&cfg.generator, i % classes, seed).map(|s| (slide_id(i), s))
        })
        .collect()
}

pub fn generate_one(cfg: &DatasetConfig, id: String, spec: &SyntheticSlideSpec) -> Result<SlideData> {
    let (pyramid, spec) = generate_synthetic_slide(&cfg.generator, spec)?;
    Ok(SlideData {
        id,
        label: spec.class_label,
        seed: spec.seed,
        pyramid,
        roi: spec.roi_mask.map(|m| (m, cfg.generator.mask_scale)),
    })
}

/// Generates the whole dataset in memory.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<SlideData>> {
    dataset_specs(cfg)?.into_iter().map(|(id, spec)| generate_one(cfg, id, &spec)).collect()
}

pub fn mask_to_png(mask: &Mask) -> GrayImage {
    GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| Luma([if *mask.get(x as usize, y as usize) { 255 } else { 0 }]))
}

pub fn mask_from_png(img: &GrayImage) -> Mask {
    Grid::from_fn(img.height() as usize, img.width() as usize, |x, y| img.get_pixel(x as u32, y as u32).0[0] >= 128)
}

/// Writes a dataset, one slide at a time so memory stays bounded.
pub fn write_dataset(cfg: &DatasetConfig, root: &Path) -> Result<()> {
    fs::create_dir_all(root.join("slides")).map_err(io_err(root))?;
    fs::create_dir_all(root.join("masks")).map_err(io_err(root))?;
    let mut labels = String::from("slide_id,label,seed\n");
    for (id, spec) in dataset_specs(cfg)? {
        let slide = generate_one(cfg, id.clone(), &spec)?;
        save_slide(&root.join("slides").join(&id), &slide.pyramid)?;
        let mask = slide.roi.as_ref().map(|(m, _)| m.clone()).unwrap_or_else(|| {
            let (h, w) = slide.pyramid.level_size(cfg.generator.mask_scale);
            Grid::filled(h, w, false)
        });
        let path = root.join("masks").join(format!("{id}.png"));
        mask_to_png(&mask).save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        labels.push_str(&format!("{},{},{}\n", id, slide.label, slide.seed));
        log::info!("wrote {id} (class {})", slide.label);
    }
    let p = root.join("labels.csv");
    fs::write(&p, labels).map_err(io_err(&p))?;
    let p = root.join("dataset.txt");
    fs::write(&p, cfg.to_kv().to_text()).map_err(io_err(&p))
}

/// One row of `labels.csv`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRow {
    pub id: String,
    pub label: usize,
    pub seed: u64,
}

pub fn read_labels(root: &Path) -> Result<Vec<LabelRow>> {
    let p = root.join("labels.csv");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Format(format!("{}: line {}: expected slide_id,label,seed", p.display(), n + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        rows.push(LabelRow { id: f[0].to_string(), label: f[1].parse().map_err(|_| bad())?, seed: f[2].parse().map_err(|_| bad())? });
    }
    Ok(rows)
}

pub fn read_dataset_config(root: &Path) -> Result<DatasetConfig> {
    let p = root.join("dataset.txt");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let mut kv = KvMap::parse(&text)?;
    let cfg = DatasetConfig::from_kv(&mut kv)?;
    kv.finish()?;
    Ok(cfg)
}

pub fn slide_dir(root: &Path, id: &str) -> PathBuf {
    root.join("slides").join(id)
}

/// Loads every slide listed in `labels.csv`.
pub fn load_dataset(root: &Path) -> Result<Vec<SlideData>> {
    let mask_scale = read_dataset_config(root).map(|c| c.generator.mask_scale).unwrap_or(32);
    read_labels(root)?
        .into_iter()
        .map(|row| {
            let pyramid = load_slide(&slide_dir(root, &row.id))?;
            let mp = root.join("masks").join(format!("{}.png", row.id));
            let roi = if mp.exists() {
                let img = image::open(&mp).map_err(|source| Error::Image { path: mp.clone(), source })?.to_luma8();
                Some((mask_from_png(&img), mask_scale))
            } else {
                None
            };
            Ok(SlideData { id: row.id, label: row.label, seed: row.seed, pyramid, roi })
        })
        .collect()
}
