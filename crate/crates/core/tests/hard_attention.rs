mod common;

use common::*;
use dualatt::glimpse_env::*;
use dualatt::hard_attention::*;
use dualatt::nn::LstmState;
use dualatt::objectives::{cross_entropy, step_reward};
use dualatt::pyramid::{splitmix, SlidePyramid};
use dualatt::sampler::TileWindow;
use dualatt::viz::replay_glimpses;
use image::{Rgb, RgbImage};
use rand::Rng;

fn tiny_config() -> AgentConfig {
    AgentConfig {
        num_classes: 3,
        glimpse: GlimpseConfig { glimpse_size: 8, steps: 4, context_size: 16 },
        retina_pool: 1,
        glimpse_channels: (2, 3),
        feature_size: 5,
        lstm_sizes: vec![6, 4],
        context_pool: 2,
        context_channels: 2,
        context_maxpool: 2,
        sigma: 0.2,
    }
}

fn randomised(cfg: AgentConfig, seed: u64, scale: f64) -> Agent<f64> {
    let mut a = Agent::<f64>::new(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x77);
    let v = random_vec(&mut r, a.parameter_count(), scale);
    a.set_params(v).unwrap();
    a
}

fn slide(seed: u64) -> SlidePyramid {
    let base = RgbImage::from_fn(128, 128, |x, y| {
        let v = splitmix(seed ^ ((x as u64) << 20) ^ y as u64);
        Rgb([v as u8, (v >> 8) as u8, (v >> 16) as u8])
    });
    SlidePyramid::from_base(base, &[1, 2, 4, 8], 40.0).unwrap()
}

fn view(s: &SlidePyramid) -> TileView<'_> {
    TileView::new(s, TileWindow { top_left: (32, 32), size: 64 }, Dihedral::IDENTITY)
}

fn set_range(agent: &mut Agent<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let r = agent.params.range(name).unwrap();
    for (k, i) in r.enumerate() {
        agent.params.values[i] = f(k);
    }
}

// ---- independent forward oracles ----

type Planes = Vec<Vec<Vec<f64>>>;

fn to_planes(img: &RgbImage) -> Planes {
    (0..3)
        .map(|c| {
            (0..img.height())
                .map(|y| (0..img.width()).map(|x| img.get_pixel(x, y).0[c] as f64 / 255.0 - 0.5).collect())
                .collect()
        })
        .collect()
}

fn conv_relu(p: &[f64], agent: &Agent<f64>, name: &str, x: &Planes, out_c: usize) -> Planes {
    let wr = agent.params.range(&format!("{name}.weight")).unwrap();
    let br = agent.params.range(&format!("{name}.bias")).unwrap();
    let (h, w) = (x[0].len(), x[0][0].len());
    let in_c = x.len();
    (0..out_c)
        .map(|oc| {
            (0..h)
                .map(|y| {
                    (0..w)
                        .map(|xx| {
                            let mut s = p[br.start + oc];
                            for (ic, plane) in x.iter().enumerate() {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (sy, sx) = (y as i64 + ky - 1, xx as i64 + kx - 1);
                                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                            let wi = wr.start + ((oc * in_c + ic) * 3 + ky as usize) * 3 + kx as usize;
                                            s += p[wi] * plane[sy as usize][sx as usize];
                                        }
                                    }
                                }
                            }
                            s.max(0.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn max_pool2(x: &Planes, k: usize) -> Planes {
    let (h, w) = (x[0].len(), x[0][0].len());
    x.iter()
        .map(|pl| {
            (0..h.div_ceil(k))
                .map(|oy| {
                    (0..w.div_ceil(k))
                        .map(|ox| {
                            let mut m = f64::NEG_INFINITY;
                            for y in oy * k..((oy + 1) * k).min(h) {
                                for xx in ox * k..((ox + 1) * k).min(w) {
                                    m = m.max(pl[y][xx]);
                                }
                            }
                            m
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn linear(p: &[f64], agent: &Agent<f64>, name: &str, x: &[f64], out: usize) -> Vec<f64> {
    let wr = agent.params.range(&format!("{name}.weight")).unwrap();
    let br = agent.params.range(&format!("{name}.bias")).unwrap();
    (0..out).map(|o| p[br.start + o] + (0..x.len()).map(|i| p[wr.start + o * x.len() + i] * x[i]).sum::<f64>()).collect()
}

fn glimpse_oracle(agent: &Agent<f64>, pair: &GlimpsePair, loc: (f64, f64)) -> Vec<f64> {
    let p = &agent.params.values;
    let (c1, c2) = agent.config.glimpse_channels;
    let trunk = |img: &RgbImage| -> Vec<f64> {
        let a1 = conv_relu(p, agent, "glimpse.conv1", &to_planes(img), c1);
        let a2 = conv_relu(p, agent, "glimpse.conv2", &max_pool2(&a1, 2), c2);
        a2.iter().map(|pl| pl.iter().flatten().sum::<f64>() / (pl.len() * pl[0].len()) as f64).collect()
    };
    let mut concat = trunk(&pair.g40);
    concat.extend(trunk(&pair.g20));
    let d = agent.config.feature_size;
    let vg: Vec<f64> = linear(p, agent, "glimpse.fc", &concat, d).into_iter().map(|v| v.max(0.0)).collect();
    let vl = linear(p, agent, "where", &[loc.0, loc.1], d);
    vg.iter().zip(&vl).map(|(a, b)| a * b).collect()
}

fn lstm_oracle(agent: &Agent<f64>, layer: usize, x: &[f64], prev: &LstmState<f64>) -> LstmState<f64> {
    let p = &agent.params.values;
    let hd = prev.h.len();
    let wx = agent.params.range(&format!("core.lstm{layer}.w_x")).unwrap();
    let wh = agent.params.range(&format!("core.lstm{layer}.w_h")).unwrap();
    let b = agent.params.range(&format!("core.lstm{layer}.bias")).unwrap();
    let pre = |gate: usize, j: usize| {
        let r = gate * hd + j;
        let mut s = p[b.start + r];
        for (i, xi) in x.iter().enumerate() {
            s += p[wx.start + r * x.len() + i] * xi;
        }
        for (i, hi) in prev.h.iter().enumerate() {
            s += p[wh.start + r * hd + i] * hi;
        }
        s
    };
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut out = LstmState::zeros(hd);
    for j in 0..hd {
        let i = sig(pre(0, j));
        let f = sig(pre(1, j));
        let g = pre(2, j).tanh();
        let o = sig(pre(3, j));
        out.c[j] = f * prev.c[j] + i * g;
        out.h[j] = o * out.c[j].tanh();
    }
    out
}

fn random_pair(seed: u64, side: u32) -> GlimpsePair {
    let mut r = rng(seed);
    let mut img = || RgbImage::from_fn(side, side, |_, _| Rgb([r.random(), r.random(), r.random()]));
    GlimpsePair { g40: img(), g20: img() }
}

// ---- glimpse network ----

#[test]
fn glimpse_features_match_loop_oracle() {
    let agent = randomised(tiny_config(), 1, 0.5);
    let pair = random_pair(2, 8);
    let loc = (0.3, -0.6);
    let (v, _) = agent.glimpse_features(&pair, loc);
    let oracle = glimpse_oracle(&agent, &pair, loc);
    for (a, b) in v.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn location_embedding_identities() {
    let mut agent = randomised(tiny_config(), 3, 0.5);
    let pair = random_pair(4, 8);
    set_range(&mut agent, "where.weight", |_| 0.0);
    set_range(&mut agent, "where.bias", |_| 1.0);
    let (ones, _) = agent.glimpse_features(&pair, (0.5, 0.5));
    set_range(&mut agent, "where.bias", |_| 0.0);
    let (zeros, _) = agent.glimpse_features(&pair, (0.5, 0.5));
    assert!(zeros.iter().all(|&v| v == 0.0));
    // With v_lt = 1 the result is v_gt alone: independent of the location.
    set_range(&mut agent, "where.bias", |_| 1.0);
    let (other, _) = agent.glimpse_features(&pair, (-0.9, 0.1));
    assert_eq!(ones, other);
    assert!(ones.iter().all(|&v| v >= 0.0) && ones.iter().any(|&v| v > 0.0));
}

// ---- recurrent core ----

#[test]
fn core_step_zero_case() {
    let mut agent = Agent::<f64>::new(tiny_config(), 5).unwrap();
    let n = agent.parameter_count();
    agent.set_params(vec![0.0; n]).unwrap();
    let (next, _) = agent.core_step(&agent.initial_state(), &[0.0; 5]);
    assert!(next.iter().all(|s| s.h.iter().all(|&v| v == 0.0) && s.c.iter().all(|&v| v == 0.0)));
}

#[test]
fn core_step_matches_gate_equations() {
    let agent = randomised(tiny_config(), 6, 0.6);
    let mut r = rng(7);
    let states: Vec<LstmState<f64>> = [6, 4]
        .iter()
        .map(|&h| LstmState { h: random_vec(&mut r, h, 0.5), c: random_vec(&mut r, h, 0.5) })
        .collect();
    let x = random_vec(&mut r, 5, 1.0);
    let (next, _) = agent.core_step(&states, &x);
    let l0 = lstm_oracle(&agent, 0, &x, &states[0]);
    let l1 = lstm_oracle(&agent, 1, &l0.h, &states[1]);
    for (a, b) in next[0].h.iter().chain(&next[0].c).zip(l0.h.iter().chain(&l0.c)) {
        assert!((a - b).abs() < 1e-6);
    }
    for (a, b) in next[1].h.iter().chain(&next[1].c).zip(l1.h.iter().chain(&l1.c)) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn core_step_depends_on_state() {
    let agent = randomised(tiny_config(), 8, 0.6);
    let mut r = rng(9);
    let x = random_vec(&mut r, 5, 1.0);
    let other: Vec<LstmState<f64>> =
        [6, 4].iter().map(|&h| LstmState { h: random_vec(&mut r, h, 0.5), c: random_vec(&mut r, h, 0.5) }).collect();
    let (a, _) = agent.core_step(&agent.initial_state(), &x);
    let (b, _) = agent.core_step(&other, &x);
    assert_ne!(a[1].h, b[1].h);
}

#[test]
fn glimpse_order_matters() {
    let agent = randomised(tiny_config(), 10, 0.6);
    let pairs: Vec<GlimpsePair> = (0..3).map(|i| random_pair(20 + i, 8)).collect();
    let locs = [(0.1, 0.2), (-0.5, 0.4), (0.7, -0.7)];
    let run = |order: &[usize]| {
        let mut s = agent.initial_state();
        for &i in order {
            let (v, _) = agent.glimpse_features(&pairs[i], locs[i]);
            s = agent.core_step(&s, &v).0;
        }
        s[1].h.clone()
    };
    assert_ne!(run(&[0, 1, 2]), run(&[2, 1, 0]));
}

// ---- location policy ----

#[test]
fn mode_log_density() {
    for sigma in [0.05, 0.15, 0.2, 1.0] {
        let lp = gaussian_log_prob((0.3, -0.2), (0.3, -0.2), sigma);
        let expect = -2.0 * (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((lp - expect).abs() < 1e-12);
    }
}

#[test]
fn zero_sigma_samples_the_mean() {
    let agent = randomised(AgentConfig { sigma: 0.0, ..tiny_config() }, 11, 0.5);
    let mut r = rng(12);
    let h = random_vec(&mut r, 4, 1.0);
    let c = random_vec(&mut r, 4, 1.0);
    let out = agent.propose_location(&h, &c, PolicyMode::Sample, &mut r);
    assert_eq!(out.loc_sample, out.loc_mean);
}

#[test]
fn gaussian_policy_is_centred() {
    let mut agent = randomised(tiny_config(), 13, 0.5);
    set_range(&mut agent, "locator.weight", |_| 0.0);
    set_range(&mut agent, "locator.bias", |_| 0.0);
    let mut r = rng(14);
    let h = random_vec(&mut r, 4, 1.0);
    let c = random_vec(&mut r, 4, 1.0);
    let n = 100_000;
    let (mut sx, mut sy) = (0.0, 0.0);
    for _ in 0..n {
        let o = agent.propose_location(&h, &c, PolicyMode::Sample, &mut r);
        assert_eq!(o.loc_mean, (0.0, 0.0));
        sx += o.loc_sample.0;
        sy += o.loc_sample.1;
    }
    let bound = 3.0 * 0.2 / (n as f64).sqrt();
    assert!((sx / n as f64).abs() < bound && (sy / n as f64).abs() < bound);
}

#[test]
fn log_prob_is_consistent_with_sample() {
    let agent = randomised(tiny_config(), 15, 0.5);
    let mut r = rng(16);
    for _ in 0..50 {
        let h = random_vec(&mut r, 4, 1.0);
        let c = random_vec(&mut r, 4, 1.0);
        let o = agent.propose_location(&h, &c, PolicyMode::Sample, &mut r);
        let lp = gaussian_log_prob(o.loc_mean, o.loc_sample, 0.2);
        assert!((lp - o.loc_log_prob).abs() < 1e-12);
        let (x, y) = o.location();
        assert!((-1.0..=1.0).contains(&x) && (-1.0..=1.0).contains(&y));
    }
}

#[test]
fn context_conditions_the_policy() {
    let agent = randomised(tiny_config(), 17, 0.8);
    let img = RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 15) as u8 + 10, (y * 15) as u8 + 10, 200]));
    let mut dark = img.clone();
    blackout(&mut dark, (4, 4, 12, 12));
    let mut r = rng(18);
    let h = random_vec(&mut r, 4, 1.0);
    let (c1, _) = agent.context_features(&img);
    let (c2, _) = agent.context_features(&dark);
    let (m1, _) = agent.location_mean(&h, &c1);
    let (m2, _) = agent.location_mean(&h, &c2);
    assert_ne!(m1, m2);
}

// ---- classifier ----

#[test]
fn classifier_cases() {
    let mut agent = randomised(tiny_config(), 19, 0.5);
    let h = vec![0.3, -0.2, 0.9, 0.1];
    let (logits, probs) = agent.classify(&h);
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    for (l, p) in logits.iter().zip(&probs) {
        assert!((l.exp() / z - p).abs() < 1e-9);
    }
    let oracle = linear(&agent.params.values, &agent, "classifier", &h, 3);
    for (a, b) in logits.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-9);
    }

    set_range(&mut agent, "classifier.weight", |_| 0.0);
    set_range(&mut agent, "classifier.bias", |_| 0.0);
    let (_, probs) = agent.classify(&h);
    assert!(probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));

    let mut four = randomised(AgentConfig { num_classes: 4, ..tiny_config() }, 20, 0.5);
    set_range(&mut four, "classifier.weight", |_| 0.0);
    set_range(&mut four, "classifier.bias", |k| if k == 0 { 2.0 } else { 0.0 });
    let (_, probs) = four.classify(&h);
    let e2 = 2f64.exp();
    assert!((probs[0] - e2 / (e2 + 3.0)).abs() < 1e-12);
}

// ---- episodes ----

#[test]
fn episodes_are_deterministic() {
    let s = slide(1);
    let agent = randomised(tiny_config(), 21, 0.4);
    let (a, _) = agent.run_episode(view(&s), PolicyMode::Sample, 5).unwrap();
    let (b, _) = agent.run_episode(view(&s), PolicyMode::Sample, 5).unwrap();
    assert_eq!(a, b);
    let (c, _) = agent.run_episode(view(&s), PolicyMode::Sample, 6).unwrap();
    assert_ne!(a.locations(), c.locations());
}

#[test]
fn her2_episode_has_six_glimpse_pairs() {
    let base = RgbImage::from_fn(64, 64, |x, y| Rgb([(x * 4) as u8, (y * 4) as u8, 128]));
    let anchor = SlidePyramid::from_base(base, &[1], 40.0).unwrap();
    // Stretch to a 2048-pixel tile by reading through a coarse pyramid.
    let big = RgbImage::from_fn(2048, 2048, |x, y| *anchor.read_scaled(1, ((x / 32) as i64, (y / 32) as i64), (1, 1)).get_pixel(0, 0));
    let s = SlidePyramid::from_base(big, &[1, 2, 4, 8, 16], 40.0).unwrap();
    let agent = Agent::<f32>::new(AgentConfig::her2(), 0).unwrap();
    let v = TileView::new(&s, TileWindow { top_left: (0, 0), size: 2048 }, Dihedral::IDENTITY);
    let (ep, _) = agent.run_episode(v, PolicyMode::Sample, 1).unwrap();
    assert_eq!(ep.steps.len(), 6);
    let pairs = replay_glimpses(v, &agent.config.glimpse, &ep).unwrap();
    assert_eq!(pairs.len(), 6);
    let rasters: Vec<&RgbImage> = pairs.iter().flat_map(|p| [&p.g40, &p.g20]).collect();
    assert_eq!(rasters.len(), 12);
    assert!(rasters.iter().all(|r| r.dimensions() == (128, 128)));
    assert_eq!(ep.pixels_read, 6 * (128 * 128 + 256 * 256));
}

#[test]
fn step_rewards_replay_from_predictions() {
    let s = slide(2);
    let agent = randomised(tiny_config(), 22, 0.4);
    let (ep, _) = agent.run_episode(view(&s), PolicyMode::Sample, 9).unwrap();
    for gt in 0..3 {
        let (loss, _) = dualatt::objectives::episode_objective(&ep, gt, &Default::default(), 0.25);
        let expect: f64 = ep.predictions().iter().map(|&p| if p == gt { 1.0 } else { 0.0 }).sum();
        assert_eq!(loss.reward, expect);
        assert_eq!(loss.reward, ep.predictions().iter().map(|&p| step_reward(p, gt)).sum::<f64>());
    }
}

/// Re-runs an episode's forward pass along its recorded locations and
/// returns per-step hidden states, context images and final logits.
fn replay(agent: &Agent<f64>, v: TileView<'_>, ep: &Episode<f64>) -> (Vec<Vec<f64>>, Vec<RgbImage>, Vec<f64>) {
    let locs = ep.locations();
    let (mut env, mut pair) = GlimpseEnv::reset(v, agent.config.glimpse.clone(), locs[0]).unwrap();
    let mut states = agent.initial_state();
    let (mut hs, mut ctx) = (Vec::new(), Vec::new());
    let mut logits = Vec::new();
    for t in 0..locs.len() {
        let (vt, _) = agent.glimpse_features(&pair, locs[t]);
        states = agent.core_step(&states, &vt).0;
        let h = states.last().unwrap().h.clone();
        logits = agent.classify(&h).0;
        ctx.push(env.context_after_ior());
        hs.push(h);
        if let Some(p) = env.step(locs.get(t + 1).copied(), ep.steps[t].prediction).unwrap() {
            pair = p;
        }
    }
    (hs, ctx, logits)
}

#[test]
fn replay_reproduces_episode() {
    let s = slide(3);
    let agent = randomised(tiny_config(), 23, 0.4);
    let (ep, _) = agent.run_episode(view(&s), PolicyMode::Sample, 10).unwrap();
    let (_, _, logits) = replay(&agent, view(&s), &ep);
    assert_eq!(logits, ep.final_step().logits);
}

#[test]
fn policy_log_prob_gradient_matches_finite_differences() {
    let s = slide(4);
    let agent = randomised(tiny_config(), 24, 0.5);
    let (ep, cache) = agent.run_episode(view(&s), PolicyMode::Sample, 11).unwrap();
    let (hs, ctx, _) = replay(&agent, view(&s), &ep);
    let t = ep.steps.len();
    let mut up = EpisodeGrads::zeros(t, 3);
    let mut r = rng(25);
    for k in 0..t - 1 {
        up.d_log_prob[k] = r.random_range(-1.0..1.0);
    }
    let mut grads = agent.params.zeros_like();
    agent.backward(&ep, &cache, &up, &mut grads);

    let objective = |values: &[f64]| {
        let mut a = agent.clone();
        a.set_params(values.to_vec()).unwrap();
        (0..t - 1)
            .map(|k| {
                let (c, _) = a.context_features(&ctx[k]);
                let (m, _) = a.location_mean(&hs[k], &c);
                let sample = ep.steps[k].policy.as_ref().unwrap().loc_sample;
                up.d_log_prob[k] * gaussian_log_prob(m, sample, 0.2)
            })
            .sum::<f64>()
    };
    let policy_params: Vec<usize> = agent
        .params
        .names
        .iter()
        .filter(|(n, _)| n.starts_with("locator.") || n.starts_with("context."))
        .flat_map(|(_, r)| r.clone())
        .collect();
    let mut values = agent.params.values.clone();
    for _ in 0..20 {
        let i = policy_params[r.random_range(0..policy_params.len())];
        let fd = central_diff(&mut values, i, 1e-5, objective);
        assert!(rel_err(grads[i], fd) < 1e-3, "param {}: analytic {} fd {fd}", i, grads[i]);
    }
}

#[test]
fn classification_gradient_through_time_matches_finite_differences() {
    let s = slide(5);
    let agent = randomised(tiny_config(), 26, 0.5);
    let (ep, cache) = agent.run_episode(view(&s), PolicyMode::Sample, 12).unwrap();
    let t = ep.steps.len();
    let gt = 1;
    let (_, d_ce) = cross_entropy(ep.final_probs(), gt);
    let mut up = EpisodeGrads::zeros(t, 3);
    up.d_logits[t - 1] = d_ce;
    let mut r = rng(27);
    up.d_logits[1] = random_vec(&mut r, 3, 1.0);
    let mut grads = agent.params.zeros_like();
    agent.backward(&ep, &cache, &up, &mut grads);

    let locs = ep.locations();
    let objective = |values: &[f64]| {
        let mut a = agent.clone();
        a.set_params(values.to_vec()).unwrap();
        let mut env_pairs = replay_glimpses(view(&s), &a.config.glimpse, &ep).unwrap().into_iter();
        let mut states = a.initial_state();
        let mut total = 0.0;
        for (k, &loc) in locs.iter().enumerate() {
            let pair = env_pairs.next().unwrap();
            let (vt, _) = a.glimpse_features(&pair, loc);
            states = a.core_step(&states, &vt).0;
            let (logits, probs) = a.classify(&states.last().unwrap().h);
            if k == t - 1 {
                total += cross_entropy(&probs, gt).0;
            }
            if k == 1 {
                total += logits.iter().zip(&up.d_logits[1]).map(|(l, d)| l * d).sum::<f64>();
            }
        }
        total
    };
    let trained: Vec<usize> = agent
        .params
        .names
        .iter()
        .filter(|(n, _)| n.starts_with("glimpse.") || n.starts_with("where.") || n.starts_with("core.") || n.starts_with("classifier."))
        .flat_map(|(_, r)| r.clone())
        .collect();
    let mut values = agent.params.values.clone();
    for _ in 0..20 {
        let i = trained[r.random_range(0..trained.len())];
        let fd = central_diff(&mut values, i, 1e-5, objective);
        assert!(rel_err(grads[i], fd) < 1e-3, "param {}: analytic {} fd {fd}", i, grads[i]);
    }
}

#[test]
fn baseline_gradient_stays_in_its_head() {
    let s = slide(6);
    let agent = randomised(tiny_config(), 28, 0.5);
    let (ep, cache) = agent.run_episode(view(&s), PolicyMode::Sample, 13).unwrap();
    let mut up = EpisodeGrads::zeros(ep.steps.len(), 3);
    up.d_baseline = vec![1.0; ep.steps.len()];
    let mut grads = agent.params.zeros_like();
    agent.backward(&ep, &cache, &up, &mut grads);
    for (name, r) in &agent.params.names {
        let touched = grads[r.clone()].iter().any(|&g| g != 0.0);
        assert_eq!(touched, name.starts_with("baseline."), "{name}");
    }
}
