mod common;

use common::*;
use dualatt::baselines::*;
use dualatt::pyramid::*;
use dualatt::{Grid, Mask};
use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

// ---- random tiles ----

#[test]
fn random_tiles_exhaust_a_small_mask() {
    let mask = Mask::from_fn(6, 6, |x, y| (x + y) % 4 == 0);
    let n = mask.count();
    let mut got = gumbel_random_tiles(&mask, n, 1).unwrap();
    got.sort();
    let mut all: Vec<(usize, usize)> = (0..6).flat_map(|y| (0..6).map(move |x| (x, y))).filter(|&(x, y)| (x + y) % 4 == 0).collect();
    all.sort();
    assert_eq!(got, all);
    assert!(gumbel_random_tiles(&Mask::from_fn(3, 3, |_, _| false), 1, 0).is_err());
}

#[test]
fn random_tiles_are_uniform_over_two_cells() {
    let mask = Mask::from_fn(4, 4, |x, y| (x, y) == (1, 2) || (x, y) == (3, 0));
    let trials = 100_000;
    let mut first = 0;
    for seed in 0..trials {
        if gumbel_random_tiles(&mask, 1, seed).unwrap()[0] == (1, 2) {
            first += 1;
        }
    }
    let frac = first as f64 / trials as f64;
    assert!((frac - 0.5).abs() < 0.01, "{frac}");
}

#[test]
fn random_tiles_are_uniform_without_replacement() {
    // Each of the 8 cells should appear in a draw of 3 with probability 3/8.
    let mask = Mask::from_fn(4, 4, |x, y| y < 2 && x < 4);
    let trials = 20_000;
    let mut counts = vec![0usize; 8];
    for seed in 0..trials {
        let got = gumbel_random_tiles(&mask, 3, seed).unwrap();
        let mut uniq = got.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 3);
        for (x, y) in got {
            assert!(*mask.get(x, y));
            counts[y * 4 + x] += 1;
        }
    }
    let expected = vec![trials as f64 * 3.0 / 8.0; 8];
    assert!(chi2_stat(&counts, &expected) < chi2_99(7));
}

proptest! {
    #[test]
    fn random_tiles_stay_in_mask(bits in prop::collection::vec(any::<bool>(), 64), n in 1usize..10, seed in any::<u64>()) {
        let mask = Grid { height: 8, width: 8, data: bits };
        prop_assume!(mask.count() > 0);
        let got = gumbel_random_tiles(&mask, n, seed).unwrap();
        prop_assert_eq!(got.len(), n.min(mask.count()));
        for (x, y) in got {
            prop_assert!(*mask.get(x, y));
        }
    }
}

// ---- DAB mask ----

#[test]
fn dab_mask_boundaries() {
    let white = RgbImage::from_pixel(16, 16, Rgb([255, 255, 255]));
    let all = Mask::from_fn(16, 16, |_, _| true);
    assert_eq!(dab_mask(&white, &all, 0.85).unwrap().count(), 0);
    let img = RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 16) as u8, (y * 16) as u8, 90]));
    let tissue = Mask::from_fn(16, 16, |x, y| x > 3 && y < 12);
    assert_eq!(dab_mask(&img, &tissue, 1.0).unwrap(), tissue);
    assert!(dab_mask(&img, &Mask::from_fn(8, 8, |_, _| true), 0.85).is_err());
}

#[test]
fn dab_mask_uses_luminance() {
    let img = RgbImage::from_fn(8, 1, |x, _| Rgb([(x * 32) as u8, (x * 32) as u8, (x * 32) as u8]));
    let all = Mask::from_fn(1, 8, |_, _| true);
    let m = dab_mask(&img, &all, 0.5).unwrap();
    for x in 0..8 {
        assert_eq!(*m.get(x, 0), (x * 32) as f64 / 255.0 < 0.5);
    }
}

#[test]
fn dab_mask_contains_generated_stain() {
    let cfg = GeneratorConfig {
        base_height: 2048,
        base_width: 2048,
        roi_radius_min: 150.0,
        roi_radius_max: 200.0,
        ..GeneratorConfig::default()
    };
    for seed in 0..3 {
        let (p, spec) = generate_synthetic_slide(&cfg, &SyntheticSlideSpec::for_class(&cfg, 3, seed).unwrap()).unwrap();
        let img = downsample(&p, cfg.mask_scale).unwrap();
        let tissue = tissue_mask(&img, &TissueMaskConfig::default()).mask;
        let roi = spec.roi_mask.unwrap();
        let dab = dab_mask(&img, &tissue, 0.72).unwrap();
        // The generator's ground-truth stained region is its ROI mask.
        let stained = roi.count();
        let covered = roi.data.iter().zip(&dab.data).filter(|(&r, &d)| r && d).count();
        assert!(stained > 0);
        assert!(covered as f64 >= 0.9 * stained as f64, "seed {seed}: {covered}/{stained}");
    }
}

// ---- sliding window ----

fn small_window() -> SlidingWindowConfig {
    SlidingWindowConfig { patch_size: 224, level_scale: 2, ..SlidingWindowConfig::default() }
}

#[test]
fn stained_square_yields_four_patches() {
    // 448x448 at 20x is 896x896 at base; with a mask at scale 32 that is 28x28 cells.
    let mask = Mask::from_fn(64, 64, |x, y| x < 28 && y < 28);
    let patches = sliding_window_patches((2048, 2048), &mask, 32, &small_window()).unwrap();
    assert_eq!(patches.len(), 4);
    let corners: Vec<(i64, i64)> = patches.iter().map(|p| p.top_left).collect();
    assert_eq!(corners, vec![(0, 0), (448, 0), (0, 448), (448, 448)]);
    assert!(patches.iter().all(|p| p.fraction == 1.0));
}

#[test]
fn unstained_slide_yields_no_patches() {
    let mask = Mask::from_fn(64, 64, |_, _| false);
    assert!(sliding_window_patches((2048, 2048), &mask, 32, &small_window()).unwrap().is_empty());
}

#[test]
fn patch_scale_must_align_with_mask() {
    let mask = Mask::from_fn(64, 64, |_, _| true);
    let cfg = SlidingWindowConfig { patch_size: 100, level_scale: 1, ..SlidingWindowConfig::default() };
    assert!(sliding_window_patches((2048, 2048), &mask, 32, &cfg).is_err());
}

#[test]
fn kept_patches_match_recount() {
    let mut r = rng(1);
    for _ in 0..10 {
        let mask = Mask::from_fn(64, 64, |_, _| r.random_bool(0.4));
        let cfg = small_window();
        let kept = sliding_window_patches((2048, 2048), &mask, 32, &cfg).unwrap();
        let mut oracle = Vec::new();
        for py in 0..(2048 / 448) {
            for px in 0..(2048 / 448) {
                let mut n = 0;
                for y in py * 14..py * 14 + 14 {
                    for x in px * 14..px * 14 + 14 {
                        n += *mask.get(x, y) as usize;
                    }
                }
                let f = n as f64 / 196.0;
                if f > 0.35 {
                    oracle.push(((px * 448) as i64, (py * 448) as i64, f));
                }
            }
        }
        let got: Vec<(i64, i64, f64)> = kept.iter().map(|p| (p.top_left.0, p.top_left.1, p.fraction)).collect();
        assert_eq!(got, oracle);
    }
}

#[test]
fn top_k_classification() {
    assert_eq!(sliding_window_classify(&[1.0; 30], 15), (1.0, false));
    let mut r = rng(2);
    let mut probs: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
    probs.shuffle(&mut r);
    // Top 15 of 0.00..0.95 are 0.25..0.95; their mean is 0.60.
    let (p, short) = sliding_window_classify(&probs, 15);
    assert!((p - 0.6).abs() < 1e-12 && !short);
    let (p, short) = sliding_window_classify(&[0.2, 0.4], 15);
    assert!((p - 0.3).abs() < 1e-12 && short);
    assert_eq!(sliding_window_classify(&[], 15), (0.0, true));
}

#[test]
fn sliding_window_config_checks() {
    assert!(SlidingWindowConfig::default().validate().is_ok());
    assert!(SlidingWindowConfig { dab_threshold: 1.2, ..Default::default() }.validate().is_err());
    assert!(SlidingWindowConfig { overlap: 224, ..Default::default() }.validate().is_err());
    let d = SlidingWindowConfig::default();
    assert_eq!((d.patch_size, d.tissue_fraction_min, d.dab_threshold, d.overlap, d.top_k_probs), (224, 0.35, 0.85, 0, 15));
}

#[test]
fn patch_classifier_learns_two_colours() {
    let cfg = SlidingWindowConfig { feature_depth: 2, feature_width: 4, input_pool: 8, ..SlidingWindowConfig::default() };
    let mut clf = PatchClassifier::<f64>::new(&cfg, 2, 3).unwrap();
    let mut r = rng(3);
    let data: Vec<(RgbImage, usize)> = (0..16)
        .map(|i| {
            let label = i % 2;
            let base = if label == 1 { [120u8, 80, 40] } else { [200u8, 200, 210] };
            let img = RgbImage::from_fn(32, 32, |_, _| {
                let j: i16 = r.random_range(-10..10);
                Rgb(base.map(|c| (c as i16 + j).clamp(0, 255) as u8))
            });
            (img, label)
        })
        .collect();
    let curve = clf.train(&data, 30, 4, 0.01, 4);
    assert!(curve.last().unwrap() < &(curve[0] * 0.5), "{curve:?}");
    let correct = data.iter().filter(|(img, l)| {
        let p = clf.predict(img);
        (p[1] > p[0]) == (*l == 1)
    });
    assert_eq!(correct.count(), 16);
}
