//! On-disk slide layout: a directory holding `manifest.txt` plus one 8-bit
//! RGB PNG per stored level.
//!
//! ```text
//! format = dualatt-slide-1
//! base_height = 16384
//! base_width = 16384
//! levels = 6
//! scale_0 = 1
//! mag_0 = 40x
//! storage_0 = virtual        # or a PNG file name
//! ...
//! detail_amplitude = 8       # only with virtual levels
//! detail_seed = 1234
//! ```

use std::fs;
use std::path::Path;

use super::{Detail, Level, LevelData, SlidePyramid};
use crate::error::{io_err, Error, Result};
use crate::kv::KvMap;

pub const SLIDE_FORMAT: &str = "dualatt-slide-1";

pub fn save_slide(dir: &Path, slide: &SlidePyramid) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut kv = KvMap::default();
    kv.insert("format", SLIDE_FORMAT);
    kv.insert("base_height", slide.base_height);
    kv.insert("base_width", slide.base_width);
    kv.insert("levels", slide.levels.len());
    for (k, level) in slide.levels.iter().enumerate() {
        kv.insert(format!("scale_{k}"), level.scale);
        kv.insert(format!("mag_{k}"), &level.magnification);
        match &level.data {
            LevelData::Virtual => kv.insert(format!("storage_{k}"), "virtual"),
            LevelData::Stored(img) => {
                let name = format!("level_{k}.png");
                let path = dir.join(&name);
                img.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
                kv.insert(format!("storage_{k}"), name);
            }
        }
    }
    if let Some(d) = slide.detail {
        kv.insert("detail_amplitude", d.amplitude);
        kv.insert("detail_seed", d.seed);
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, kv.to_text()).map_err(io_err(path))
}

pub fn load_slide(dir: &Path) -> Result<SlidePyramid> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut kv = KvMap::parse(&text)?;
    let format: String = kv.require("format")?;
    if format != SLIDE_FORMAT {
        return Err(Error::Format(format!("{}: unsupported slide format `{format}`", path.display())));
    }
    let base_height = kv.require("base_height")?;
    let base_width = kv.require("base_width")?;
    let n: usize = kv.require("levels")?;
    let mut levels = Vec::with_capacity(n);
    for k in 0..n {
        let scale = kv.require(&format!("scale_{k}"))?;
        let magnification = kv.require(&format!("mag_{k}"))?;
        let storage: String = kv.require(&format!("storage_{k}"))?;
        let data = if storage == "virtual" {
            LevelData::Virtual
        } else {
            let p = dir.join(&storage);
            let img = image::open(&p).map_err(|source| Error::Image { path: p.clone(), source })?;
            LevelData::Stored(img.to_rgb8())
        };
        levels.push(Level { scale, magnification, data });
    }
    let detail = match (kv.take::<u8>("detail_amplitude")?, kv.take::<u64>("detail_seed")?) {
        (Some(amplitude), Some(seed)) => Some(Detail { amplitude, seed }),
        (None, None) => None,
        _ => return Err(Error::Format("detail_amplitude and detail_seed must appear together".into())),
    };
    kv.finish()?;
    let slide = SlidePyramid { base_height, base_width, levels, detail };
    slide.validate()?;
    Ok(slide)
}
