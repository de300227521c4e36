//! Batch construction, the separate and joint training regimes, and
//! held-out evaluation.

mod data;
mod eval;
mod run_dir;

pub use data::{
    augment, augment_transform, class_balanced_batches, dice, stopping_point, stratified_folds, PreparedSlide, Split,
    StoppingRule,
};
pub use eval::{evaluate_slides, slide_tiles, EvalOutput, SlideEval};
pub use run_dir::RunDir;

use serde::Serialize;

use crate::baselines::gumbel_random_tiles;
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Mode, TileSource};
use crate::error::{Error, Result};
use crate::glimpse_env::{Dihedral, TileView};
use crate::grid::Grid;
use crate::hard_attention::{Agent, Episode, EpisodeCache, EpisodeGrads, PolicyMode};
use crate::nn::{softmax, softmax_backward, Adam, StepDecay, Tensor};
use crate::objectives::{
    cross_entropy, entropy_loss, entropy_loss_grad, episode_objective, joint_coefficient, EpisodeLoss,
};
use crate::sampler::{extract_tiles, map_to_slide, select_cells, Cell, Selection, TileWindow};
use crate::scalar::{lit, to_f64, Scalar};
use crate::seed::derive_seed;
use crate::soft_attention::{tile_feature_expectation, tile_feature_expectation_backward, AttentionCache, AttentionMap, SoftAttention};

/// The two trainable modules.
#[derive(Clone, Debug, PartialEq)]
pub struct Models<S> {
    pub soft: SoftAttention<S>,
    pub agent: Agent<S>,
}

impl<S: Scalar> Models<S> {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Models {
            soft: SoftAttention::new(cfg.soft.clone(), derive_seed(cfg.train.seed, &[0x5EED, 1]))?,
            agent: Agent::new(cfg.agent.clone(), derive_seed(cfg.train.seed, &[0x5EED, 2]))?,
        })
    }

    pub fn to_checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        let mut ck = Checkpoint::new::<S>();
        ck.put_text("config", &cfg.to_kv().to_text());
        ck.put_params("soft_attention", &self.soft.params.values);
        ck.put_params("agent", &self.agent.params.values);
        ck
    }

    /// Rebuilds the configuration and both modules from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(ExperimentConfig, Self)> {
        let cfg = ExperimentConfig::parse(&ck.text("config")?)?;
        let mut m = Self::new(&cfg)?;
        m.soft.set_params(ck.params("soft_attention")?)?;
        m.agent.set_params(ck.params("agent")?)?;
        Ok((cfg, m))
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochLog {
    pub phase: &'static str,
    pub epoch: usize,
    pub l_theta: f64,
    pub l_bb: f64,
    pub l_s: f64,
    pub l_sa: f64,
    pub coefficient: f64,
    pub l_j: f64,
    pub reward: f64,
    pub tile_accuracy: f64,
    pub roi_mass_ratio: f64,
    pub dice: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "phase,epoch,l_theta,l_bb,l_s,l_sa,coefficient,l_j,reward,tile_accuracy,roi_mass_ratio,dice";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.phase,
            self.epoch,
            self.l_theta,
            self.l_bb,
            self.l_s,
            self.l_sa,
            self.coefficient,
            self.l_j,
            self.reward,
            self.tile_accuracy,
            self.roi_mass_ratio,
            self.dice
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub models: Models<S>,
    pub history: Vec<EpochLog>,
    /// Soft-attention epoch at which the stopping rule fired (separate mode).
    pub soft_stopped_at: Option<usize>,
}

/// Runs `f` over `items` on up to `threads` scoped threads; results come
/// back in input order, so any later reduction is thread-count independent.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| s.spawn(move || part.iter().enumerate().map(|(j, t)| f(c * chunk + j, t)).collect::<Vec<R>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub fn soft_input<S: Scalar>(slide: &PreparedSlide) -> Tensor<S> {
    Tensor::from_rgb_pooled(&slide.input, 1)
}

/// Cells chosen for one slide: the sampler's selection, or a uniform
/// random draw from the tissue grid for the random-tile baseline.
pub fn choose_cells<S: Scalar>(
    cfg: &ExperimentConfig,
    map: &AttentionMap<S>,
    slide: &PreparedSlide,
    seed: u64,
) -> Result<(Selection<S>, Vec<Cell>, Vec<S>)> {
    let sel = select_cells(map, &slide.tissue_grid, &cfg.sampler, cfg.soft.pool_size, derive_seed(seed, &[1]))?;
    let (cells, att) = match cfg.train.tile_source {
        TileSource::Attention => (sel.selected.clone(), sel.attention_values.clone()),
        TileSource::Random => {
            let support = if slide.tissue_grid.count() >= cfg.sampler.tiles {
                slide.tissue_grid.clone()
            } else {
                Grid::filled(slide.tissue_grid.height, slide.tissue_grid.width, true)
            };
            let cells = gumbel_random_tiles(&support, cfg.sampler.tiles, derive_seed(seed, &[2]))?;
            let att = cells.iter().map(|&(x, y)| *map.probs.get(x, y)).collect();
            (cells, att)
        }
    };
    let floor = S::min_positive_value();
    let att = att.into_iter().map(|a: S| a.max(floor)).collect();
    Ok((sel, cells, att))
}

pub fn tile_windows(cfg: &ExperimentConfig, cells: &[Cell]) -> Result<Vec<(TileWindow, (i64, i64))>> {
    let centres = map_to_slide(cells, cfg.sampler.scale, cfg.soft.pool_size)?;
    Ok(centres.into_iter().map(|c| (TileWindow::centered(c, cfg.sampler.tile_size_base), c)).collect())
}

/// Side of a finest glimpse in normalised tile units.
pub fn box_side(cfg: &ExperimentConfig) -> f64 {
    2.0 * cfg.agent.glimpse.glimpse_size as f64 / cfg.sampler.tile_size_base as f64
}

fn roi_mass_ratio<S: Scalar>(map: &AttentionMap<S>, slide: &PreparedSlide) -> Option<f64> {
    let share = slide.roi_share()?;
    Some(to_f64(map.mass_in(slide.roi_grid.as_ref()?)) / share)
}

/// Summed results of one slide's forward and backward pass.
struct SlideStep<S> {
    episodes: EpisodeLoss,
    l_sa: f64,
    tiles: usize,
    correct: usize,
    agent_grad: Vec<S>,
    soft_grad: Option<Vec<S>>,
    roi_ratio: Option<f64>,
    dice: Option<f64>,
}

struct TileRun<S> {
    episode: Episode<S>,
    cache: EpisodeCache<S>,
    loss: EpisodeLoss,
    grads: EpisodeGrads<S>,
}

/// Agent training step on one slide. With `soft_coef` set (joint mode) the
/// attention-weighted slide cross-entropy and the entropy term, both scaled
/// by that coefficient, also produce soft-attention gradients.
fn agent_slide_step<S: Scalar>(
    models: &Models<S>,
    cfg: &ExperimentConfig,
    slide: &PreparedSlide,
    soft_coef: Option<f64>,
    seed: u64,
) -> Result<SlideStep<S>> {
    let input = soft_input::<S>(slide);
    let (map, att_cache) = models.soft.compute_attention(&input)?;
    if !all_finite(&map.probs.data) {
        return Err(Error::NonFinite { epoch: 0, batch: 0, detail: "attention map".into() });
    }
    let (sel, cells, att) = choose_cells(cfg, &map, slide, seed)?;
    let windows = tile_windows(cfg, &cells)?;
    let side = box_side(cfg);
    let runs: Vec<Result<TileRun<S>>> = par_map(&windows, cfg.train.threads, |i, (w, _)| {
        let transform = augment_transform(derive_seed(seed, &[3, i as u64]));
        let view = TileView::new(&slide.pyramid, *w, transform);
        let (episode, cache) = models.agent.run_episode(view, PolicyMode::Sample, derive_seed(seed, &[4, i as u64]))?;
        let (loss, grads) = episode_objective(&episode, slide.label, &cfg.loss, side);
        Ok(TileRun { episode, cache, loss, grads })
    });
    let mut runs: Vec<TileRun<S>> = runs.into_iter().collect::<Result<_>>()?;

    let mut l_sa = 0.0;
    let soft_grad = match soft_coef {
        Some(coef) => {
            let (l, g) = expectation_step(models, cfg, slide, &map, &att_cache, &cells, &att, &mut runs, coef)?;
            l_sa = l;
            Some(g)
        }
        None => None,
    };

    let grads: Vec<Vec<S>> = par_map(&runs, cfg.train.threads, |_, r| {
        let mut g = models.agent.params.zeros_like();
        models.agent.backward(&r.episode, &r.cache, &r.grads, &mut g);
        g
    });
    let mut agent_grad = models.agent.params.zeros_like();
    for g in &grads {
        for (a, &b) in agent_grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let mut episodes = EpisodeLoss::default();
    let mut correct = 0;
    for r in &runs {
        episodes.add(&r.loss);
        correct += usize::from(r.episode.final_class() == slide.label);
    }
    let dice = slide.roi_grid.as_ref().map(|r| dice(&sel.mask, r)).transpose()?;
    Ok(SlideStep {
        episodes,
        l_sa,
        tiles: runs.len(),
        correct,
        agent_grad,
        soft_grad,
        roi_ratio: roi_mass_ratio(&map, slide),
        dice,
    })
}

/// Joint-mode soft-attention loss: `−log Σ wᵢ pᵢ[gt]` over the tiles'
/// final class probabilities with `wᵢ ∝ Aᵢ`, plus the entropy term. Adds
/// the resulting logit gradients to each tile's episode gradients and
/// returns the loss and the soft-attention parameter gradient.
#[allow(clippy::too_many_arguments)]
fn expectation_step<S: Scalar>(
    models: &Models<S>,
    cfg: &ExperimentConfig,
    slide: &PreparedSlide,
    map: &AttentionMap<S>,
    att_cache: &AttentionCache<S>,
    cells: &[Cell],
    att: &[S],
    runs: &mut [TileRun<S>],
    coef: f64,
) -> Result<(f64, Vec<S>)> {
    let c: S = lit(coef);
    let w: S = lit(cfg.train.expectation_weight);
    let probs: Vec<Vec<S>> = runs.iter().map(|r| r.episode.final_probs().to_vec()).collect();
    let mean = tile_feature_expectation(&probs, att)?;
    let (ce, _) = cross_entropy(&mean, slide.label);
    let mut d_mean = vec![S::zero(); mean.len()];
    d_mean[slide.label] = -c * w / mean[slide.label];
    let (d_probs, d_att) = tile_feature_expectation_backward(&probs, att, &d_mean)?;
    for (r, dp) in runs.iter_mut().zip(&d_probs) {
        let dl = softmax_backward(r.episode.final_probs(), dp);
        let last = r.grads.d_logits.len() - 1;
        for (a, &b) in r.grads.d_logits[last].iter_mut().zip(&dl) {
            *a += b;
        }
    }
    let flat = &map.probs.data;
    let ent = entropy_loss(flat, cfg.loss.beta, cfg.loss.entropy_form);
    let mut d_grid: Vec<S> = entropy_loss_grad(flat, cfg.loss.beta, cfg.loss.entropy_form).into_iter().map(|g| g * c).collect();
    let width = map.probs.width;
    for (&(x, y), &d) in cells.iter().zip(&d_att) {
        d_grid[y * width + x] += d;
    }
    let mut g = models.soft.params.zeros_like();
    models.soft.attention_backward(att_cache, &d_grid, &mut g);
    Ok((cfg.train.expectation_weight * to_f64(ce) + to_f64(ent), g))
}

/// Separate-mode soft-attention step: residual tile features pooled by
/// attention, classified against the slide label, plus the entropy term.
fn soft_slide_step<S: Scalar>(models: &Models<S>, cfg: &ExperimentConfig, slide: &PreparedSlide, seed: u64) -> Result<SlideStep<S>> {
    let soft = &models.soft;
    let input = soft_input::<S>(slide);
    let (map, att_cache) = soft.compute_attention(&input)?;
    if !all_finite(&map.probs.data) {
        return Err(Error::NonFinite { epoch: 0, batch: 0, detail: "attention map".into() });
    }
    let (sel, cells, att) = choose_cells(cfg, &map, slide, seed)?;
    let tiles = extract_tiles(&slide.pyramid, &cells, &att, &cfg.sampler, cfg.soft.pool_size)?;
    let feats: Vec<_> = par_map(&tiles.tiles, cfg.train.threads, |i, t| {
        soft.tile_features(&augment(t, derive_seed(seed, &[3, i as u64])))
    });
    let f: Vec<Vec<S>> = feats.iter().map(|(v, _)| v.clone()).collect();
    let pooled = tile_feature_expectation(&f, &att)?;
    let logits = soft.classify_features(&pooled);
    let probs = softmax(&logits);
    let (ce, d_logits) = cross_entropy(&probs, slide.label);
    let mut g = soft.params.zeros_like();
    let d_pooled = soft.classify_backward(&pooled, &d_logits, &mut g);
    let (d_feat, d_att) = tile_feature_expectation_backward(&f, &att, &d_pooled)?;
    let parts: Vec<Vec<S>> = par_map(&feats, cfg.train.threads, |i, (_, cache)| {
        let mut gi = soft.params.zeros_like();
        soft.features_backward(cache, &d_feat[i], &mut gi);
        gi
    });
    for p in &parts {
        for (a, &b) in g.iter_mut().zip(p) {
            *a += b;
        }
    }
    let flat = &map.probs.data;
    let ent = entropy_loss(flat, cfg.loss.beta, cfg.loss.entropy_form);
    let mut d_grid = entropy_loss_grad(flat, cfg.loss.beta, cfg.loss.entropy_form);
    for (&(x, y), &d) in cells.iter().zip(&d_att) {
        d_grid[y * map.probs.width + x] += d;
    }
    soft.attention_backward(&att_cache, &d_grid, &mut g);
    let dice = slide.roi_grid.as_ref().map(|r| dice(&sel.mask, r)).transpose()?;
    Ok(SlideStep {
        episodes: EpisodeLoss::default(),
        l_sa: to_f64(ce) + to_f64(ent),
        tiles: tiles.len(),
        correct: usize::from(crate::hard_attention::argmax(&probs) == slide.label),
        agent_grad: Vec::new(),
        soft_grad: Some(g),
        roi_ratio: roi_mass_ratio(&map, slide),
        dice,
    })
}

/// Scales `g` so its L2 norm is at most `max_norm` (0 disables).
pub fn clip_global_norm<S: Scalar>(g: &mut [S], max_norm: f64) -> f64 {
    let norm = g.iter().map(|&v| to_f64(v) * to_f64(v)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let f: S = lit(max_norm / norm);
        for v in g.iter_mut() {
            *v *= f;
        }
    }
    norm
}

fn all_finite<S: Scalar>(g: &[S]) -> bool {
    g.iter().all(|v| v.is_finite())
}

/// Called after every epoch with the models and the epoch's log row.
pub trait EpochHook<S> {
    fn on_epoch(&mut self, models: &Models<S>, log: &EpochLog) -> Result<()>;
    /// Receives a JSON description of the state when a loss goes non-finite.
    fn on_non_finite(&mut self, _dump: &serde_json::Value) {}
}

impl<S> EpochHook<S> for () {
    fn on_epoch(&mut self, _: &Models<S>, _: &EpochLog) -> Result<()> {
        Ok(())
    }
}

#[derive(Default)]
struct Accum {
    episodes: EpisodeLoss,
    l_sa: f64,
    tiles: usize,
    correct: usize,
    slides: usize,
    roi: (f64, usize),
    dice: (f64, usize),
}

impl Accum {
    fn add<S>(&mut self, s: &SlideStep<S>) {
        self.episodes.add(&s.episodes);
        self.l_sa += s.l_sa;
        self.tiles += s.tiles;
        self.correct += s.correct;
        self.slides += 1;
        if let Some(r) = s.roi_ratio {
            self.roi.0 += r;
            self.roi.1 += 1;
        }
        if let Some(d) = s.dice {
            self.dice.0 += d;
            self.dice.1 += 1;
        }
    }

    fn log(&self, phase: &'static str, epoch: usize, coefficient: f64, delta: f64, per_tile_correct: bool) -> EpochLog {
        let n = self.tiles.max(1) as f64;
        let mut e = self.episodes;
        e.scale(1.0 / n);
        let l_sa = self.l_sa / self.slides.max(1) as f64;
        let l_ha = e.hard_attention(delta);
        let mean = |(s, c): (f64, usize)| if c == 0 { 0.0 } else { s / c as f64 };
        EpochLog {
            phase,
            epoch,
            l_theta: e.theta(),
            l_bb: e.bbox,
            l_s: e.score,
            l_sa,
            coefficient,
            l_j: l_ha + coefficient * l_sa,
            reward: e.reward,
            tile_accuracy: self.correct as f64 / if per_tile_correct { n } else { self.slides.max(1) as f64 },
            roi_mass_ratio: mean(self.roi),
            dice: mean(self.dice),
        }
    }
}

fn non_finite<S>(hook: &mut dyn EpochHook<S>, phase: &str, epoch: usize, batch: usize, slides: &[&PreparedSlide], detail: &str) -> Error {
    let dump = serde_json::json!({
        "phase": phase,
        "epoch": epoch,
        "batch": batch,
        "slides": slides.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
        "detail": detail,
    });
    hook.on_non_finite(&dump);
    Error::NonFinite { epoch, batch, detail: format!("{phase}: {detail}") }
}

/// Mean dice between the sampler's mask and the ROI over `slides` (those
/// without an ROI are skipped).
pub fn mean_dice<S: Scalar>(models: &Models<S>, cfg: &ExperimentConfig, slides: &[&PreparedSlide]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for s in slides {
        let Some(roi) = &s.roi_grid else { continue };
        let (map, _) = models.soft.compute_attention(&soft_input::<S>(s))?;
        let sel = select_cells(&map, &s.tissue_grid, &cfg.sampler, cfg.soft.pool_size, derive_seed(cfg.train.eval_seed, &[s.seed]))?;
        sum += dice(&sel.mask, roi)?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Trains both modules on the `train` slides. `val` is used only for the
/// separate-mode dice stopping rule.
pub fn train<S: Scalar>(
    cfg: &ExperimentConfig,
    slides: &[PreparedSlide],
    split: &Split,
    hook: &mut dyn EpochHook<S>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let tc = &cfg.train;
    let classes = cfg.agent.num_classes;
    let labels: Vec<usize> = slides.iter().map(|s| s.label).collect();
    let per_class = tc.slides_per_batch / classes;
    let mut models = Models::<S>::new(cfg)?;
    let mut soft_opt = Adam::<S>::new(models.soft.parameter_count(), tc.lr_soft);
    let mut agent_opt = Adam::<S>::new(models.agent.parameter_count(), tc.lr_hard);
    let decay = StepDecay { step_size: tc.step_size, gamma: tc.gamma };
    let mut history = Vec::new();
    let mut soft_stopped_at = None;

    if tc.mode == Mode::Separate {
        let val: Vec<&PreparedSlide> =
            if split.val.is_empty() { split.train.iter().map(|&i| &slides[i]).collect() } else { split.val.iter().map(|&i| &slides[i]).collect() };
        let mut rule = StoppingRule::new(tc.stop_min_delta, tc.stop_patience);
        let mut best = models.soft.params.values.clone();
        for epoch in 0..tc.soft_epochs {
            soft_opt.lr = decay.rate(tc.lr_soft, epoch);
            let mut acc = Accum::default();
            let batches = class_balanced_batches(&split.train, &labels, classes, per_class, tc.seed, epoch)?;
            for (b, batch) in batches.iter().enumerate() {
                let members: Vec<&PreparedSlide> = batch.iter().map(|&i| &slides[i]).collect();
                let mut g = models.soft.params.zeros_like();
                for (k, s) in members.iter().enumerate() {
                    let seed = derive_seed(tc.seed, &[0x50F7, epoch as u64, b as u64, k as u64]);
                    let step = match soft_slide_step(&models, cfg, s, seed) {
                        Err(Error::NonFinite { detail, .. }) => return Err(non_finite(hook, "soft", epoch, b, &members, &detail)),
                        r => r?,
                    };
                    if !step.l_sa.is_finite() || !all_finite(step.soft_grad.as_ref().unwrap()) {
                        return Err(non_finite(hook, "soft", epoch, b, &members, "soft-attention loss"));
                    }
                    for (a, &v) in g.iter_mut().zip(step.soft_grad.as_ref().unwrap()) {
                        *a += v;
                    }
                    acc.add(&step);
                }
                let inv: S = lit(1.0 / members.len() as f64);
                g.iter_mut().for_each(|v| *v *= inv);
                clip_global_norm(&mut g, tc.grad_clip);
                soft_opt.step(&mut models.soft.params.values, &g);
                if !all_finite(&models.soft.params.values) {
                    return Err(non_finite(hook, "soft", epoch, b, &members, "parameters after update"));
                }
            }
            let mut log = acc.log("soft", epoch, 1.0, cfg.loss.delta, false);
            if tc.dice_stopping {
                log.dice = mean_dice(&models, cfg, &val)?;
            }
            hook.on_epoch(&models, &log)?;
            history.push(log.clone());
            if tc.dice_stopping {
                let improved = rule.best().is_none_or(|b| log.dice > b + tc.stop_min_delta);
                if improved {
                    best = models.soft.params.values.clone();
                }
                if rule.update(log.dice) {
                    soft_stopped_at = Some(epoch);
                    break;
                }
            }
        }
        if tc.dice_stopping {
            models.soft.params.values = best;
        }
    }

    for epoch in 0..tc.epochs {
        agent_opt.lr = decay.rate(tc.lr_hard, epoch);
        soft_opt.lr = decay.rate(tc.lr_soft, epoch);
        let coef = match tc.mode {
            Mode::Joint => Some(joint_coefficient(cfg.loss.alpha, epoch)),
            Mode::Separate => None,
        };
        let phase = if coef.is_some() { "joint" } else { "agent" };
        let mut acc = Accum::default();
        let batches = class_balanced_batches(&split.train, &labels, classes, per_class, tc.seed, epoch)?;
        for (b, batch) in batches.iter().enumerate() {
            let members: Vec<&PreparedSlide> = batch.iter().map(|&i| &slides[i]).collect();
            let mut ga = models.agent.params.zeros_like();
            let mut gs = coef.map(|_| models.soft.params.zeros_like());
            let mut tiles = 0;
            for (k, s) in members.iter().enumerate() {
                let seed = derive_seed(tc.seed, &[0xA6E7, epoch as u64, b as u64, k as u64]);
                let step = match agent_slide_step(&models, cfg, s, coef, seed) {
                    Err(Error::NonFinite { detail, .. }) => return Err(non_finite(hook, phase, epoch, b, &members, &detail)),
                    r => r?,
                };
                let finite = step.episodes.hard_attention(cfg.loss.delta).is_finite()
                    && step.l_sa.is_finite()
                    && all_finite(&step.agent_grad)
                    && step.soft_grad.as_ref().is_none_or(|g| all_finite(g));
                if !finite {
                    return Err(non_finite(hook, phase, epoch, b, &members, "hard-attention or joint loss"));
                }
                for (a, &v) in ga.iter_mut().zip(&step.agent_grad) {
                    *a += v;
                }
                if let (Some(gs), Some(sg)) = (gs.as_mut(), step.soft_grad.as_ref()) {
                    for (a, &v) in gs.iter_mut().zip(sg) {
                        *a += v;
                    }
                }
                tiles += step.tiles;
                acc.add(&step);
            }
            let inv: S = lit(1.0 / tiles.max(1) as f64);
            ga.iter_mut().for_each(|v| *v *= inv);
            clip_global_norm(&mut ga, tc.grad_clip);
            agent_opt.step(&mut models.agent.params.values, &ga);
            if let Some(mut gs) = gs {
                let inv: S = lit(1.0 / members.len() as f64);
                gs.iter_mut().for_each(|v| *v *= inv);
                clip_global_norm(&mut gs, tc.grad_clip);
                soft_opt.step(&mut models.soft.params.values, &gs);
            }
            if !all_finite(&models.agent.params.values) || !all_finite(&models.soft.params.values) {
                return Err(non_finite(hook, phase, epoch, b, &members, "parameters after update"));
            }
        }
        let log = acc.log(phase, epoch, coef.unwrap_or(0.0), cfg.loss.delta, true);
        hook.on_epoch(&models, &log)?;
        history.push(log);
    }
    Ok(TrainOutcome { models, history, soft_stopped_at })
}

/// Identity transform, used at evaluation time.
pub fn identity() -> Dihedral {
    Dihedral { flip: false, rot: 0 }
}
