mod common;

use common::*;
use dualatt::glimpse_env::*;
use dualatt::pyramid::{block_mean, splitmix, SlidePyramid};
use dualatt::sampler::TileWindow;
use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::Rng;

fn noisy_slide(side: u32, seed: u64) -> SlidePyramid {
    let base = RgbImage::from_fn(side, side, |x, y| {
        let v = splitmix(seed ^ ((x as u64) << 24) ^ y as u64);
        Rgb([v as u8 | 1, (v >> 8) as u8 | 1, (v >> 16) as u8 | 1])
    });
    SlidePyramid::from_base(base, &[1, 2, 4, 8], 40.0).unwrap()
}

fn cfg() -> GlimpseConfig {
    GlimpseConfig { glimpse_size: 32, steps: 6, context_size: 64 }
}

/// The whole tile as seen through the view, built by reading the base
/// window and transforming it in memory.
fn materialise(view: &TileView) -> RgbImage {
    let raw = view.slide.read_scaled(1, view.window.top_left, (view.size(), view.size()));
    view.transform.apply(&raw)
}

#[test]
fn dihedral_elements_are_distinct_and_closed() {
    let img = RgbImage::from_fn(3, 2, |x, y| Rgb([(x + 3 * y) as u8, 0, 0]));
    let all = Dihedral::all();
    let images: Vec<RgbImage> = all.iter().map(|d| d.apply(&img)).collect();
    for i in 0..8 {
        assert_eq!(all[i].index(), i);
        for j in 0..i {
            assert_ne!(images[i], images[j]);
        }
        assert_eq!(all[i].inverse().apply(&images[i]), img);
        for d in &all {
            let composed = d.apply(&images[i]);
            assert!(images.contains(&composed));
        }
    }
}

#[test]
fn dihedral_forward_point_agrees_with_apply() {
    let img = RgbImage::from_fn(5, 3, |x, y| Rgb([(x * 10 + y) as u8, 1, 2]));
    for d in Dihedral::all() {
        let out = d.apply(&img);
        for (x, y, p) in img.enumerate_pixels() {
            let (ox, oy) = d.forward_point((3, 5), (x as usize, y as usize));
            assert_eq!(out.get_pixel(ox as u32, oy as u32), p);
        }
    }
}

#[test]
fn random_dihedral_is_uniform() {
    let mut r = rng(1);
    let mut counts = [0usize; 8];
    for _ in 0..10_000 {
        counts[Dihedral::random(&mut r).index()] += 1;
    }
    assert!(chi2_stat(&counts, &[1250.0; 8]) < chi2_99(7));
}

#[test]
fn tile_view_reads_match_transformed_tile() {
    let slide = noisy_slide(512, 3);
    for (i, d) in Dihedral::all().into_iter().enumerate() {
        let window = TileWindow { top_left: (64 + 16 * i as i64, 100), size: 256 };
        let view = TileView::new(&slide, window, d);
        let full = materialise(&view);
        for &(x, y) in &[(0i64, 0i64), (17, 33), (200, 240), (-10, 250)] {
            let fine = view.read(1, (x, y), 32);
            let oracle = crop_centered(&full, (x + 16, y + 16), 32);
            assert_eq!(fine, oracle, "transform {i} at ({x},{y})");
        }
        for &(x, y) in &[(0i64, 0i64), (64, 128), (224, 16)] {
            let coarse = view.read(2, (x, y), 16);
            let oracle = block_mean(&crop_centered(&full, (x + 16, y + 16), 32), 2);
            assert_eq!(coarse, oracle, "transform {i} coarse at ({x},{y})");
        }
    }
}

#[test]
fn tile_view_pads_outside_the_slide() {
    let slide = noisy_slide(128, 4);
    let view = TileView::new(&slide, TileWindow { top_left: (-64, -64), size: 128 }, Dihedral::IDENTITY);
    let img = view.read(1, (0, 0), 128);
    let black = img.pixels().filter(|p| p.0 == [0, 0, 0]).count();
    assert_eq!(black, 128 * 128 - 64 * 64);
}

#[test]
fn marker_sits_at_glimpse_centre() {
    let mut tile = RgbImage::from_pixel(256, 256, Rgb([10, 10, 10]));
    tile.put_pixel(128, 128, Rgb([255, 0, 0]));
    let pair = extract_glimpse_pair(&tile, (0.0, 0.0), 32).unwrap();
    assert_eq!(pair.g40.get_pixel(16, 16).0, [255, 0, 0]);
    // The 2×2 block holding the marker is averaged into the centre pixel.
    let c = pair.g20.get_pixel(16, 16).0;
    assert!(c[0] > 10 && c[1] < 10);
}

#[test]
fn corner_glimpse_is_mostly_padding() {
    let tile = RgbImage::from_pixel(256, 256, Rgb([200, 200, 200]));
    let pair = extract_glimpse_pair(&tile, (-1.0, -1.0), 32).unwrap();
    let pad = pair.g40.pixels().filter(|p| p.0 == [0, 0, 0]).count();
    assert!(pad as f64 >= 0.75 * 32.0 * 32.0);
    assert!(extract_glimpse_pair(&tile, (1.5, 0.0), 32).is_err());
}

#[test]
fn coarse_glimpse_matches_crop_then_average() {
    let mut r = rng(5);
    let tile = RgbImage::from_fn(256, 256, |_, _| Rgb([r.random(), r.random(), r.random()]));
    for _ in 0..20 {
        let loc = (r.random_range(-1.0..=1.0), r.random_range(-1.0..=1.0));
        let pair = extract_glimpse_pair(&tile, loc, 32).unwrap();
        let (cx, cy) = loc_to_pixel(loc, 256);
        // Independent crop: explicit loops with bounds checks.
        let oracle = RgbImage::from_fn(32, 32, |ox, oy| {
            let mut s = [0u32; 3];
            for dy in 0..2 {
                for dx in 0..2 {
                    let x = cx - 32 + 2 * ox as i64 + dx;
                    let y = cy - 32 + 2 * oy as i64 + dy;
                    if (0..256).contains(&x) && (0..256).contains(&y) {
                        let p = tile.get_pixel(x as u32, y as u32).0;
                        for c in 0..3 {
                            s[c] += p[c] as u32;
                        }
                    }
                }
            }
            Rgb(s.map(|v| ((v + 2) / 4) as u8))
        });
        assert_eq!(pair.g20, oracle);
    }
}

#[test]
fn fine_and_coarse_glimpses_agree() {
    let slide = noisy_slide(512, 6);
    let view = TileView::new(&slide, TileWindow { top_left: (100, 60), size: 256 }, Dihedral { flip: true, rot: 3 });
    let mut r = rng(6);
    for _ in 0..10 {
        // Even pixel centres keep the 2× blocks of both glimpses aligned.
        let even = |r: &mut rand_chacha::ChaCha8Rng| (2 * r.random_range(20..108) as i64) as f64 / 128.0 + 0.5 / 128.0 - 1.0;
        let loc = (even(&mut r), even(&mut r));
        let (_, pair) = GlimpseEnv::reset(view, cfg(), loc).unwrap();
        let shrunk = block_mean(&pair.g40, 2);
        let centre = image::imageops::crop_imm(&pair.g20, 8, 8, 16, 16).to_image();
        let diff = shrunk.as_raw().iter().zip(centre.as_raw()).map(|(a, b)| a.abs_diff(*b)).max().unwrap();
        assert!(diff <= 2);
    }
}

fn blacked(img: &RgbImage) -> usize {
    img.pixels().filter(|p| p.0 == [0, 0, 0]).count()
}

#[test]
fn single_visit_blacks_out_the_centre() {
    let slide = noisy_slide(512, 7);
    let view = TileView::new(&slide, TileWindow { top_left: (0, 0), size: 256 }, Dihedral::IDENTITY);
    let (mut env, _) = GlimpseEnv::reset(view, cfg(), (0.0, 0.0)).unwrap();
    env.step(Some((0.5, 0.5)), 0).unwrap();
    let img = &env.state.tile_down;
    // The 32-pixel glimpse at 4× context downsampling covers 8×8 cells.
    assert_eq!(blacked(img), 64);
    assert_eq!(img.get_pixel(32, 32).0, [0, 0, 0]);
    assert_ne!(img.get_pixel(0, 0).0, [0, 0, 0]);
    assert_ne!(img.get_pixel(63, 63).0, [0, 0, 0]);
}

#[test]
fn disjoint_visits_add_up() {
    let slide = noisy_slide(512, 8);
    let view = TileView::new(&slide, TileWindow { top_left: (0, 0), size: 256 }, Dihedral::IDENTITY);
    let locs = [(-0.75, -0.75), (-0.25, -0.75), (0.25, -0.75), (-0.75, 0.25), (-0.25, 0.25), (0.25, 0.25)];
    let (mut env, _) = GlimpseEnv::reset(view, cfg(), locs[0]).unwrap();
    for t in 0..6 {
        env.step(locs.get(t + 1).copied(), t % 4).unwrap();
    }
    assert_eq!(blacked(&env.state.tile_down), 6 * 64);
    assert!(env.finished());
}

#[test]
fn overlapping_visits_match_union_oracle() {
    let slide = noisy_slide(512, 9);
    let view = TileView::new(&slide, TileWindow { top_left: (32, 32), size: 256 }, Dihedral { flip: false, rot: 1 });
    let mut r = rng(10);
    for _ in 0..20 {
        let locs: Vec<(f64, f64)> = (0..6).map(|_| (r.random_range(-1.0..=1.0), r.random_range(-1.0..=1.0))).collect();
        let (mut env, _) = GlimpseEnv::reset(view, cfg(), locs[0]).unwrap();
        for t in 0..6 {
            env.step(locs.get(t + 1).copied(), 0).unwrap();
        }
        let mut marked = vec![false; 64 * 64];
        for &loc in &locs {
            let (cx, cy) = loc_to_pixel(loc, 256);
            for y in cy - 16..cy + 16 {
                for x in cx - 16..cx + 16 {
                    if (0..256).contains(&x) && (0..256).contains(&y) {
                        marked[(y / 4 * 64 + x / 4) as usize] = true;
                    }
                }
            }
        }
        let img = &env.state.tile_down;
        for (i, &m) in marked.iter().enumerate() {
            let p = img.get_pixel((i % 64) as u32, (i / 64) as u32).0;
            if m {
                assert_eq!(p, [0, 0, 0]);
            } else {
                assert_ne!(p, [0, 0, 0]);
            }
        }
    }
}

#[test]
fn blackout_is_idempotent() {
    let mut r = rng(11);
    let mut img = RgbImage::from_fn(64, 64, |_, _| Rgb([r.random_range(1..255), 9, 9]));
    let b = scale_box(glimpse_box((0.3, -0.2), 256, 32), 4, 64);
    blackout(&mut img, b);
    let once = img.clone();
    blackout(&mut img, b);
    assert_eq!(img, once);
}

#[test]
fn episode_bookkeeping() {
    let slide = noisy_slide(512, 12);
    let view = TileView::new(&slide, TileWindow { top_left: (0, 0), size: 256 }, Dihedral::IDENTITY);
    let mut r = rng(13);
    let locs: Vec<(f64, f64)> = (0..6).map(|_| (r.random_range(-1.0..=1.0), r.random_range(-1.0..=1.0))).collect();
    let (mut env, _) = GlimpseEnv::reset(view, cfg(), locs[0]).unwrap();
    for t in 0..6 {
        let pair = env.step(locs.get(t + 1).copied(), t).unwrap();
        assert_eq!(pair.is_some(), t < 5);
        assert_eq!(env.state.visited.len(), t + 1);
        for (k, b) in env.state.visited.iter().enumerate() {
            assert_eq!(*b, glimpse_box(locs[k], 256, 32));
        }
    }
    assert_eq!(env.predictions, vec![0, 1, 2, 3, 4, 5]);
    assert_eq!(env.locations, locs);
    assert_eq!(env.pixels_read, 6 * (32 * 32 + 64 * 64));
    assert!(env.step(None, 0).is_err());
}

#[test]
fn default_glimpse_reads_the_stated_pixel_count() {
    let c = GlimpseConfig::default();
    assert_eq!((c.glimpse_size, c.steps, c.context_size), (128, 6, 128));
    assert_eq!(c.pixels_per_glimpse(), 128 * 128 + 256 * 256);
    assert!(c.validate(2048).is_ok());
    assert!(GlimpseConfig { context_size: 100, ..c.clone() }.validate(2048).is_err());
    assert!(GlimpseConfig { steps: 0, ..c }.validate(2048).is_err());
}

#[test]
fn context_preview_does_not_advance() {
    let slide = noisy_slide(512, 14);
    let view = TileView::new(&slide, TileWindow { top_left: (0, 0), size: 256 }, Dihedral::IDENTITY);
    let (mut env, _) = GlimpseEnv::reset(view, cfg(), (0.1, 0.1)).unwrap();
    let preview = env.context_after_ior();
    assert_eq!(env.state.step, 0);
    env.step(Some((0.0, 0.0)), 0).unwrap();
    assert_eq!(env.state.tile_down, preview);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loc_maps_inside_tile(x in -1.0f64..=1.0, y in -1.0f64..=1.0, size in 1usize..4096) {
        let (px, py) = loc_to_pixel((x, y), size);
        prop_assert!(px >= 0 && py >= 0 && px < size as i64 && py < size as i64);
        let expect = (((x + 1.0) / 2.0 * size as f64).floor() as i64).min(size as i64 - 1);
        prop_assert_eq!(px, expect);
    }

    #[test]
    fn scaled_box_covers_source(x0 in -50i64..300, y0 in -50i64..300, w in 1i64..80, f in 1usize..8) {
        let b = (x0, y0, x0 + w, y0 + w);
        let s = scale_box(b, f, 64);
        let f = f as i64;
        for y in y0.max(0)..(y0 + w).min(64 * f) {
            for x in x0.max(0)..(x0 + w).min(64 * f) {
                prop_assert!(x / f >= s.0 && x / f < s.2 && y / f >= s.1 && y / f < s.3);
            }
        }
    }
}
