use serde::Serialize;

use super::{choose_cells, identity, par_map, soft_input, tile_windows, Models, PreparedSlide};
use crate::config::{Aggregation, ExperimentConfig};
use crate::error::Result;
use crate::glimpse_env::TileView;
use crate::hard_attention::{Episode, PolicyMode};
use crate::metrics::{aggregate_dominant, aggregate_mean, evaluate, MetricsReport, PointTable, SlideScore};
use crate::sampler::{Cell, Selection, TileWindow};
use crate::scalar::{to_f64, Scalar};
use crate::seed::derive_seed;
use crate::soft_attention::AttentionMap;

/// Everything the evaluation pipeline produced for one slide.
pub struct SlideTiles<S> {
    pub map: AttentionMap<S>,
    pub selection: Selection<S>,
    pub cells: Vec<Cell>,
    pub windows: Vec<(TileWindow, (i64, i64))>,
    pub episodes: Vec<Episode<S>>,
}

/// Deterministic inference on one slide: attention, tile selection under
/// the evaluation seed, and a mean-policy episode per tile.
pub fn slide_tiles<S: Scalar>(models: &Models<S>, cfg: &ExperimentConfig, slide: &PreparedSlide) -> Result<SlideTiles<S>> {
    let seed = derive_seed(cfg.train.eval_seed, &[slide.seed]);
    let (map, _) = models.soft.compute_attention(&soft_input::<S>(slide))?;
    let (selection, cells, _) = choose_cells(cfg, &map, slide, seed)?;
    let windows = tile_windows(cfg, &cells)?;
    let episodes = par_map(&windows, cfg.train.threads, |i, (w, _)| {
        let view = TileView::new(&slide.pyramid, *w, identity());
        models.agent.run_episode(view, PolicyMode::Mean, derive_seed(seed, &[4, i as u64])).map(|(e, _)| e)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(SlideTiles { map, selection, cells, windows, episodes })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlideEval {
    pub slide_id: String,
    pub label: usize,
    pub predicted_class: usize,
    pub confidence: f64,
    /// Attention mass on the ROI divided by the ROI's share of the grid.
    pub roi_mass_ratio: Option<f64>,
    pub pixels_read: u64,
    /// `pixels_read` over the base-level area.
    pub processed_fraction: f64,
    pub selected: Vec<Cell>,
    pub widened: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub slides: Vec<SlideEval>,
    pub scores: Vec<SlideScore>,
}

impl EvalOutput {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("slide_id,label,predicted_class,confidence,roi_mass_ratio,pixels_read,processed_fraction\n");
        for s in &self.slides {
            let roi = s.roi_mass_ratio.map(|r| r.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.slide_id, s.label, s.predicted_class, s.confidence, roi, s.pixels_read, s.processed_fraction
            ));
        }
        out
    }

    /// Mean ROI mass ratio over slides that have an ROI.
    pub fn mean_roi_mass_ratio(&self) -> Option<f64> {
        let v: Vec<f64> = self.slides.iter().filter_map(|s| s.roi_mass_ratio).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn max_processed_fraction(&self) -> f64 {
        self.slides.iter().map(|s| s.processed_fraction).fold(0.0, f64::max)
    }
}

/// Scores `indices` of `slides` and computes the metrics report.
pub fn evaluate_slides<S: Scalar>(
    models: &Models<S>,
    cfg: &ExperimentConfig,
    slides: &[PreparedSlide],
    indices: &[usize],
    fold_of: &[usize],
    table: &PointTable,
) -> Result<EvalOutput> {
    let mut scores = Vec::new();
    let mut evals = Vec::new();
    for &i in indices {
        let slide = &slides[i];
        let st = slide_tiles(models, cfg, slide)?;
        let probs: Vec<Vec<f64>> = st.episodes.iter().map(|e| e.final_probs().iter().map(|&p| to_f64(p)).collect()).collect();
        let (class, confidence) = match cfg.train.aggregation {
            Aggregation::Dominant => {
                let c = aggregate_dominant(&probs)?;
                (c, probs.iter().map(|r| r[c]).sum::<f64>() / probs.len() as f64)
            }
            Aggregation::Mean => {
                let (c, conf, _) = aggregate_mean(&probs)?;
                (c, conf)
            }
        };
        let pixels_read: u64 = st.episodes.iter().map(|e| e.pixels_read).sum();
        let roi_mass_ratio = slide.roi_share().map(|share| to_f64(st.map.mass_in(slide.roi_grid.as_ref().unwrap())) / share);
        scores.push(SlideScore {
            slide_id: slide.id.clone(),
            predicted_class: class,
            confidence,
            per_tile_probs: probs,
            fold_id: fold_of[i],
        });
        evals.push(SlideEval {
            slide_id: slide.id.clone(),
            label: slide.label,
            predicted_class: class,
            confidence,
            roi_mass_ratio,
            pixels_read,
            processed_fraction: pixels_read as f64 / slide.pyramid.base_area() as f64,
            selected: st.cells.clone(),
            widened: st.selection.widened,
        });
    }
    let gt: Vec<usize> = indices.iter().map(|&i| slides[i].label).collect();
    let report = evaluate(&scores, &gt, cfg.agent.num_classes, table)?;
    Ok(EvalOutput { report, slides: evals, scores })
}
