//! Slide-level aggregation of tile predictions and the evaluation metrics:
//! agreement points, weighted confidence, combined points, F1 and AUROC.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::hard_attention::argmax;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideScore {
    pub slide_id: String,
    pub predicted_class: usize,
    pub confidence: f64,
    pub per_tile_probs: Vec<Vec<f64>>,
    pub fold_id: usize,
}

fn check_rows(probs: &[Vec<f64>]) -> Result<usize> {
    let c = probs.first().ok_or_else(|| invalid("aggregation needs at least one tile"))?.len();
    if c == 0 || probs.iter().any(|r| r.len() != c) {
        return Err(invalid("tile probability rows must share a nonzero length"));
    }
    Ok(c)
}

/// Majority vote over per-tile argmax; ties go to the larger summed
/// probability, then to the lower class index.
pub fn aggregate_dominant(probs: &[Vec<f64>]) -> Result<usize> {
    let c = check_rows(probs)?;
    let mut votes = vec![0usize; c];
    let mut mass = vec![0.0f64; c];
    for row in probs {
        votes[argmax(row)] += 1;
        for (m, &p) in mass.iter_mut().zip(row) {
            *m += p;
        }
    }
    let mut best = 0;
    for k in 1..c {
        if votes[k] > votes[best] || (votes[k] == votes[best] && mass[k] > mass[best]) {
            best = k;
        }
    }
    Ok(best)
}

/// Mean probability vector, its argmax (lower index on ties) and its maximum.
pub fn aggregate_mean(probs: &[Vec<f64>]) -> Result<(usize, f64, Vec<f64>)> {
    let c = check_rows(probs)?;
    let mut mean = vec![0.0; c];
    for row in probs {
        for (m, &p) in mean.iter_mut().zip(row) {
            *m += p;
        }
    }
    let n = probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let k = argmax(&mean);
    Ok((k, mean[k], mean))
}

/// Mean over folds of each fold's mean tile-probability vector.
pub fn aggregate_folds(per_fold: &[Vec<Vec<f64>>]) -> Result<(usize, f64, Vec<f64>)> {
    let means: Vec<Vec<f64>> = per_fold.iter().map(|p| aggregate_mean(p).map(|r| r.2)).collect::<Result<_>>()?;
    aggregate_mean(&means)
}

/// Points awarded by `|gt − pred|`, with optional per-pair overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointTable {
    /// `by_distance[d]` for `d = |gt − pred|`; distances past the end score
    /// the last entry.
    pub by_distance: Vec<f64>,
    pub overrides: BTreeMap<(usize, usize), f64>,
    pub max_points: f64,
}

impl Default for PointTable {
    fn default() -> Self {
        PointTable { by_distance: vec![15.0, 10.0, 5.0, 0.0], overrides: BTreeMap::new(), max_points: 15.0 }
    }
}

impl PointTable {
    pub fn validate(&self) -> Result<()> {
        if self.by_distance.first() != Some(&self.max_points) {
            return Err(Error::Config("an exact match must score max_points".into()));
        }
        if self.by_distance.windows(2).any(|w| w[1] > w[0]) || self.by_distance.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("points must be non-negative and non-increasing in distance".into()));
        }
        if self.overrides.values().any(|&p| p < 0.0 || p > self.max_points) {
            return Err(Error::Config("override points must lie in [0, max_points]".into()));
        }
        Ok(())
    }

    pub fn points(&self, gt: usize, pred: usize) -> f64 {
        if let Some(&p) = self.overrides.get(&(gt, pred)) {
            return p;
        }
        let d = gt.abs_diff(pred).min(self.by_distance.len() - 1);
        self.by_distance[d]
    }

    /// Parses `max_points = v`, `distance.D = v` and `pair.GT.PRED = v` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = crate::kv::KvMap::parse(text)?;
        let max_points: f64 = kv.take_or("max_points", 15.0)?;
        let keys: Vec<String> = kv.keys().cloned().collect();
        let mut by_distance = BTreeMap::new();
        let mut overrides = BTreeMap::new();
        for key in keys {
            let parts: Vec<&str> = key.split('.').collect();
            let bad = || Error::Config(format!("bad point-table key '{key}'"));
            let value: f64 = kv.require(&key)?;
            match parts.as_slice() {
                ["distance", d] => {
                    by_distance.insert(d.parse::<usize>().map_err(|_| bad())?, value);
                }
                ["pair", g, p] => {
                    overrides.insert((g.parse().map_err(|_| bad())?, p.parse().map_err(|_| bad())?), value);
                }
                _ => return Err(bad()),
            }
        }
        let n = by_distance.len();
        if n == 0 || by_distance.keys().copied().ne(0..n) {
            return Err(Error::Config("point table needs distance.0 .. distance.N without gaps".into()));
        }
        let table = PointTable { by_distance: by_distance.into_values().collect(), overrides, max_points };
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

pub fn agreement_points(gt: usize, pred: usize, table: &PointTable) -> f64 {
    table.points(gt, pred)
}

pub fn total_agreement_points(gt: &[usize], pred: &[usize], table: &PointTable) -> f64 {
    gt.iter().zip(pred).map(|(&g, &p)| table.points(g, p)).sum()
}

/// Per-case confidence weight: the confidence when correct, else its
/// complement.
pub fn confidence_weight(confidence: f64, correct: bool) -> f64 {
    if correct { confidence } else { 1.0 - confidence }
}

pub const CONFIDENCE_SCALE: f64 = 25.0;

/// Mean confidence weight times `scale` (25 by default).
pub fn weighted_confidence(cases: &[(f64, bool)], scale: f64) -> Result<f64> {
    if cases.is_empty() {
        return Err(invalid("weighted confidence of zero cases"));
    }
    if cases.iter().any(|&(c, _)| !(0.0..=1.0).contains(&c)) {
        return Err(invalid("confidences must lie in [0, 1]"));
    }
    Ok(cases.iter().map(|&(c, ok)| confidence_weight(c, ok)).sum::<f64>() / cases.len() as f64 * scale)
}

/// `Σ_i (points_i / max_points) · w_i`; a perfect, fully confident
/// predictor scores the number of cases.
pub fn combined_points(points: &[f64], weights: &[f64], max_points: f64) -> f64 {
    points.iter().zip(weights).map(|(&p, &w)| p / max_points * w).sum()
}

/// F1 for one class. When the class never occurs and is never predicted
/// the score is 1.
pub fn f1_score(gt: &[usize], pred: &[usize], positive: usize) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&g, &p) in gt.iter().zip(pred) {
        match (g == positive, p == positive) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            _ => {}
        }
    }
    let den = 2 * tp + fp + fneg;
    if den == 0 { 1.0 } else { 2.0 * tp as f64 / den as f64 }
}

/// Area under the ROC curve via the rank statistic with midranks.
pub fn auroc(gt: &[bool], scores: &[f64]) -> Result<f64> {
    if gt.len() != scores.len() {
        return Err(invalid("labels and scores differ in length"));
    }
    let n_pos = gt.iter().filter(|&&g| g).count();
    let n_neg = gt.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = gt.iter().zip(&ranks).filter(|(&g, _)| g).map(|(_, &r)| r).sum();
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

pub fn accuracy(gt: &[usize], pred: &[usize]) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    gt.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / gt.len() as f64
}

pub fn confusion_matrix(gt: &[usize], pred: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&g, &p) in gt.iter().zip(pred) {
        m[g][p] += 1;
    }
    m
}

/// Metrics over a set of slide scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub cases: usize,
    pub accuracy: f64,
    pub agreement_points: f64,
    pub max_agreement_points: f64,
    pub weighted_confidence: f64,
    pub combined_points: f64,
    pub f1_per_class: Vec<f64>,
    pub macro_f1: f64,
    /// One-vs-rest AUROC per class on the mean probability of that class;
    /// `None` where the class is absent or universal.
    pub auroc_per_class: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(scores: &[SlideScore], gt: &[usize], classes: usize, table: &PointTable) -> Result<MetricsReport> {
    if scores.len() != gt.len() || scores.is_empty() {
        return Err(invalid("need one ground-truth label per slide score"));
    }
    let pred: Vec<usize> = scores.iter().map(|s| s.predicted_class).collect();
    let points: Vec<f64> = gt.iter().zip(&pred).map(|(&g, &p)| table.points(g, p)).collect();
    let weights: Vec<f64> = scores.iter().zip(gt).map(|(s, &g)| confidence_weight(s.confidence, s.predicted_class == g)).collect();
    let cases: Vec<(f64, bool)> = scores.iter().zip(gt).map(|(s, &g)| (s.confidence, s.predicted_class == g)).collect();
    let f1_per_class: Vec<f64> = (0..classes).map(|c| f1_score(gt, &pred, c)).collect();
    let mut auroc_per_class = Vec::new();
    for c in 0..classes {
        let labels: Vec<bool> = gt.iter().map(|&g| g == c).collect();
        let s: Vec<f64> = scores.iter().map(|s| aggregate_mean(&s.per_tile_probs).map(|m| m.2[c])).collect::<Result<_>>()?;
        auroc_per_class.push(auroc(&labels, &s).ok());
    }
    Ok(MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        cases: gt.len(),
        accuracy: accuracy(gt, &pred),
        agreement_points: points.iter().sum(),
        max_agreement_points: table.max_points * gt.len() as f64,
        weighted_confidence: weighted_confidence(&cases, CONFIDENCE_SCALE)?,
        combined_points: combined_points(&points, &weights, table.max_points),
        macro_f1: f1_per_class.iter().sum::<f64>() / classes as f64,
        f1_per_class,
        auroc_per_class,
        confusion: confusion_matrix(gt, &pred, classes),
    })
}
