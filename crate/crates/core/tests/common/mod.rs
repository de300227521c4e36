#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Central difference of `f` at coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Relative error with an absolute floor so that near-zero gradients are
/// compared on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

pub fn chi2_99(df: usize) -> f64 {
    // Upper 1% points of the chi-square distribution.
    match df {
        1 => 6.635,
        2 => 9.210,
        3 => 11.345,
        4 => 13.277,
        5 => 15.086,
        6 => 16.812,
        7 => 18.475,
        8 => 20.090,
        9 => 21.666,
        _ => {
            // Wilson-Hilferty approximation.
            let k = df as f64;
            let z = 2.326;
            k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3)
        }
    }
}

pub fn chi2_stat(counts: &[usize], expected: &[f64]) -> f64 {
    counts.iter().zip(expected).map(|(&c, &e)| (c as f64 - e).powi(2) / e).sum()
}

/// A configuration small enough to train in well under a second per epoch:
/// 2048² slides viewed at 1/32, an 8×8 attention grid, two 256-pixel tiles
/// per slide and three 16-pixel glimpses per tile.
pub fn tiny_experiment() -> (dualatt::config::ExperimentConfig, dualatt::config::DatasetConfig) {
    use dualatt::config::*;
    let mut cfg = ExperimentConfig::preset(Preset::Reduced);
    cfg.soft.conv_layers = 1;
    cfg.soft.base_channels = 2;
    cfg.soft.feature_depth = 2;
    cfg.soft.feature_width = 4;
    cfg.soft.feature_pool = 4;
    cfg.sampler.tiles = 2;
    cfg.sampler.candidates = 4;
    cfg.sampler.window = 3;
    cfg.sampler.tile_size_base = 256;
    cfg.sampler.tile_size_model = 32;
    cfg.agent.glimpse.glimpse_size = 16;
    cfg.agent.glimpse.steps = 3;
    cfg.agent.glimpse.context_size = 32;
    cfg.agent.glimpse_channels = (2, 2);
    cfg.agent.retina_pool = 2;
    cfg.agent.feature_size = 4;
    cfg.agent.lstm_sizes = vec![6, 4];
    cfg.agent.context_channels = 2;
    cfg.train.tiles_per_batch = 8;
    cfg.train.slides_per_batch = 4;
    cfg.train.epochs = 2;
    cfg.train.soft_epochs = 2;
    cfg.train.folds = 2;
    cfg.validate().unwrap();
    let mut data = DatasetConfig { count: 8, seed: 5, ..DatasetConfig::default() };
    data.generator.base_height = 2048;
    data.generator.base_width = 2048;
    data.generator.roi_radius_min = 150.0;
    data.generator.roi_radius_max = 220.0;
    (cfg, data)
}

pub fn tiny_slides() -> (dualatt::config::ExperimentConfig, Vec<dualatt::trainer::PreparedSlide>) {
    let (cfg, data) = tiny_experiment();
    let raw = dualatt::dataset::generate_dataset(&data).unwrap();
    let slides = dualatt::trainer::PreparedSlide::prepare_all(raw, &cfg).unwrap();
    (cfg, slides)
}
