mod common;

use common::*;
use dualatt::metrics::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// (gt, predicted, confidence, points awarded by the scripted table).
const CASES: [(usize, usize, f64, f64); 28] = [
    (3, 2, 0.0, 12.5),
    (0, 0, 0.625, 15.0),
    (0, 1, 0.0, 7.5),
    (0, 0, 0.125, 15.0),
    (1, 1, 0.75, 15.0),
    (0, 0, 0.375, 15.0),
    (0, 3, 0.0, 0.0),
    (1, 1, 0.25, 15.0),
    (2, 2, 1.0, 15.0),
    (0, 1, 0.125, 7.5),
    (1, 1, 1.0, 15.0),
    (0, 1, 0.875, 7.5),
    (3, 3, 0.875, 15.0),
    (2, 2, 0.25, 15.0),
    (1, 1, 0.5, 15.0),
    (3, 3, 0.5, 15.0),
    (0, 0, 0.75, 15.0),
    (1, 1, 0.875, 15.0),
    (3, 3, 0.125, 15.0),
    (2, 2, 0.625, 15.0),
    (3, 3, 0.125, 15.0),
    (0, 3, 0.125, 0.0),
    (0, 2, 0.875, 5.0),
    (2, 2, 0.0, 15.0),
    (3, 3, 0.125, 15.0),
    (3, 3, 0.5, 15.0),
    (1, 3, 0.75, 5.0),
    (3, 3, 0.875, 15.0),
];

const SCRIPTED_TABLE: &str = "\
# partial credit by distance, two half-point overrides
max_points = 15
distance.0 = 15
distance.1 = 10
distance.2 = 5
distance.3 = 0
pair.3.2 = 12.5
pair.0.1 = 7.5
";

fn split() -> (Vec<usize>, Vec<usize>) {
    (CASES.iter().map(|c| c.0).collect(), CASES.iter().map(|c| c.1).collect())
}

#[test]
fn scripted_fixture_matches_hand_totals() {
    let table = PointTable::parse(SCRIPTED_TABLE).unwrap();
    let (gt, pred) = split();
    for &(g, p, _, pts) in &CASES {
        assert_eq!(agreement_points(g, p, &table), pts, "case {g}->{p}");
    }
    // 20 exact matches (300), three (0,1) overrides (22.5), one (3,2)
    // override (12.5), two distance-2 misses (10), two distance-3 misses (0).
    assert_eq!(total_agreement_points(&gt, &pred, &table), 345.0);

    let cases: Vec<(f64, bool)> = CASES.iter().map(|c| (c.2, c.0 == c.1)).collect();
    // Weights sum to 31/2: correct cases contribute their confidence, the
    // eight misses the complement. 25 * (31/2) / 28 = 775/56.
    let weights: Vec<f64> = cases.iter().map(|&(c, ok)| confidence_weight(c, ok)).collect();
    assert_eq!(weights.iter().sum::<f64>(), 15.5);
    let wc = weighted_confidence(&cases, CONFIDENCE_SCALE).unwrap();
    assert!((wc - 775.0 / 56.0).abs() < 1e-12, "{wc}");

    let points: Vec<f64> = CASES.iter().map(|c| c.3).collect();
    let cp = combined_points(&points, &weights, 15.0);
    assert!((cp - 293.0 / 24.0).abs() < 1e-12, "{cp}");
}

#[test]
fn point_table_defaults_and_validation() {
    let t = PointTable::default();
    assert!(t.validate().is_ok());
    assert_eq!(agreement_points(2, 2, &t), 15.0);
    assert_eq!(agreement_points(0, 3, &t), 0.0);
    assert_eq!(agreement_points(3, 1, &t), 5.0);
    assert!(PointTable::parse("distance.0 = 15\ndistance.1 = 16\n").is_err());
    assert!(PointTable::parse("distance.0 = 14\n").is_err());
    assert!(PointTable::parse("distance.0 = 15\ndistance.2 = 5\n").is_err());
    assert!(PointTable::parse("distance.0 = 15\nbogus = 1\n").is_err());
}

#[test]
fn point_table_loads_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("points.txt");
    std::fs::write(&path, SCRIPTED_TABLE).unwrap();
    assert_eq!(PointTable::load(&path).unwrap(), PointTable::parse(SCRIPTED_TABLE).unwrap());
}

#[test]
fn weighted_confidence_extremes() {
    let right = vec![(1.0, true); 7];
    let wrong = vec![(1.0, false); 7];
    assert_eq!(weighted_confidence(&right, CONFIDENCE_SCALE).unwrap(), 25.0);
    assert_eq!(weighted_confidence(&wrong, CONFIDENCE_SCALE).unwrap(), 0.0);
    assert!(weighted_confidence(&[], CONFIDENCE_SCALE).is_err());
    assert!(weighted_confidence(&[(1.5, true)], CONFIDENCE_SCALE).is_err());
}

#[test]
fn combined_points_examples() {
    assert_eq!(combined_points(&[0.0; 5], &[1.0; 5], 15.0), 0.0);
    assert_eq!(combined_points(&[15.0; 9], &[1.0; 9], 15.0), 9.0);
    // 10/15 * 0.75 + 15/15 * 0.5 + 5/15 * 0.25
    let hand = 0.5 + 0.5 + 1.0 / 12.0;
    assert!((combined_points(&[10.0, 15.0, 5.0], &[0.75, 0.5, 0.25], 15.0) - hand).abs() < 1e-15);
}

// ---- aggregation ----

fn vote_oracle(rows: &[Vec<f64>]) -> usize {
    let c = rows[0].len();
    let mut best = (0usize, f64::NEG_INFINITY, 0usize);
    for k in 0..c {
        let votes = rows
            .iter()
            .filter(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                r.iter().position(|&v| v == m) == Some(k)
            })
            .count();
        let mass: f64 = rows.iter().map(|r| r[k]).sum();
        if (votes, mass) > (best.0, best.1) {
            best = (votes, mass, k);
        }
    }
    best.2
}

fn random_rows(r: &mut rand_chacha::ChaCha8Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..c).map(|_| r.random::<f64>()).collect();
            let z: f64 = v.iter().sum();
            v.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

#[test]
fn dominant_vote_examples() {
    assert_eq!(aggregate_dominant(&vec![vec![0.1, 0.2, 0.6, 0.1]; 10]).unwrap(), 2);
    let mut tie = vec![vec![0.3, 0.7]; 5];
    tie.extend(vec![vec![0.55, 0.45]; 5]);
    assert_eq!(aggregate_dominant(&tie).unwrap(), 1);
    assert!(aggregate_dominant(&[]).is_err());
    let mut r = rng(1);
    for _ in 0..200 {
        let rows = random_rows(&mut r, 10, 4);
        assert_eq!(aggregate_dominant(&rows).unwrap(), vote_oracle(&rows));
    }
}

#[test]
fn dominant_vote_ignores_tile_order() {
    let mut r = rng(2);
    let mut rows = random_rows(&mut r, 10, 4);
    let first = aggregate_dominant(&rows).unwrap();
    for _ in 0..100 {
        rows.shuffle(&mut r);
        assert_eq!(aggregate_dominant(&rows).unwrap(), first);
    }
}

#[test]
fn mean_aggregation() {
    let row = vec![0.1, 0.5, 0.3, 0.1];
    let (k, conf, _) = aggregate_mean(&vec![row.clone(); 6]).unwrap();
    assert_eq!((k, conf), (1, 0.5));
    let (k, conf, mean) = aggregate_mean(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert_eq!((k, conf, mean), (0, 0.5, vec![0.5, 0.5]));
    let mut r = rng(3);
    for _ in 0..100 {
        let rows = random_rows(&mut r, 15, 3);
        let (_, _, mean) = aggregate_mean(&rows).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for row in &rows {
                s += row[c];
            }
            assert!((mean[c] - s / 15.0).abs() < 1e-12);
        }
    }
    assert!(aggregate_mean(&[vec![0.5, 0.5], vec![1.0]]).is_err());
}

#[test]
fn fold_aggregation_averages_fold_means() {
    let a = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
    let b = vec![vec![0.0, 1.0], vec![0.2, 0.8], vec![0.1, 0.9]];
    let (k, conf, mean) = aggregate_folds(&[a, b]).unwrap();
    assert!((mean[0] - 0.55).abs() < 1e-12 && (mean[1] - 0.45).abs() < 1e-12);
    assert_eq!(k, 0);
    assert!((conf - 0.55).abs() < 1e-12);
}

// ---- F1 and AUROC ----

#[test]
fn f1_examples() {
    let gt = [0, 1, 1, 0, 1];
    assert_eq!(f1_score(&gt, &gt, 1), 1.0);
    // tp 1, fp 1, fn 2 -> 2/(2+1+2)
    assert!((f1_score(&gt, &[1, 1, 0, 0, 0], 1) - 0.4).abs() < 1e-12);
    assert_eq!(f1_score(&[0, 0], &[0, 0], 1), 1.0);
    assert_eq!(f1_score(&[0, 0], &[1, 0], 1), 0.0);
}

/// ROC curve traced by sweeping every distinct threshold, integrated with
/// trapezoids.
fn sweep_oracle(gt: &[bool], scores: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let np = gt.iter().filter(|&&g| g).count() as f64;
    let nn = gt.len() as f64 - np;
    let mut pts = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let tp = gt.iter().zip(scores).filter(|(&g, &s)| g && s >= t).count() as f64;
        let fp = gt.iter().zip(scores).filter(|(&g, &s)| !g && s >= t).count() as f64;
        pts.push((fp / nn, tp / np));
    }
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

#[test]
fn auroc_examples() {
    let gt = [true, false, true, false];
    assert_eq!(auroc(&gt, &[0.9, 0.1, 0.8, 0.2]).unwrap(), 1.0);
    assert_eq!(auroc(&gt, &[0.5; 4]).unwrap(), 0.5);
    assert_eq!(auroc(&gt, &[0.1, 0.9, 0.2, 0.8]).unwrap(), 0.0);
    assert!(matches!(auroc(&[true, true], &[0.1, 0.2]), Err(dualatt::Error::SingleClass)));
    assert!(auroc(&gt, &[0.1]).is_err());
}

#[test]
fn auroc_matches_threshold_sweep() {
    let mut r = rng(4);
    for _ in 0..200 {
        let gt: Vec<bool> = (0..20).map(|_| r.random_bool(0.4)).collect();
        if gt.iter().all(|&g| g) || gt.iter().all(|&g| !g) {
            continue;
        }
        // Coarse scores so that ties occur.
        let scores: Vec<f64> = (0..20).map(|_| (r.random::<f64>() * 8.0).floor() / 8.0).collect();
        let a = auroc(&gt, &scores).unwrap();
        assert!((a - sweep_oracle(&gt, &scores)).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn auroc_is_rank_based(
        data in prop::collection::vec((any::<bool>(), 0.0f64..1.0), 2..40),
    ) {
        let gt: Vec<bool> = data.iter().map(|d| d.0).collect();
        prop_assume!(gt.iter().any(|&g| g) && gt.iter().any(|&g| !g));
        let s: Vec<f64> = data.iter().map(|d| d.1).collect();
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert!((auroc(&gt, &s).unwrap() - auroc(&gt, &t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn agreement_total_is_bounded_and_additive(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
    ) {
        let t = PointTable::default();
        let gt: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let total = total_agreement_points(&gt, &pred, &t);
        prop_assert!(total <= 15.0 * pairs.len() as f64);
        let k = pairs.len() / 2;
        let split = total_agreement_points(&gt[..k], &pred[..k], &t) + total_agreement_points(&gt[k..], &pred[k..], &t);
        prop_assert_eq!(total, split);
    }
}

// ---- full report ----

#[test]
fn evaluate_combines_the_metrics() {
    let mut r = rng(5);
    let gt: Vec<usize> = (0..12).map(|i| i % 4).collect();
    let scores: Vec<SlideScore> = gt
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let mut rows = random_rows(&mut r, 10, 4);
            if i % 3 != 0 {
                rows.iter_mut().for_each(|row| row[g] += 2.0);
                rows.iter_mut().for_each(|row| {
                    let z: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= z);
                });
            }
            let (k, conf, _) = aggregate_mean(&rows).unwrap();
            SlideScore { slide_id: format!("s{i}"), predicted_class: k, confidence: conf, per_tile_probs: rows, fold_id: 0 }
        })
        .collect();
    let table = PointTable::default();
    let rep = evaluate(&scores, &gt, 4, &table).unwrap();
    let pred: Vec<usize> = scores.iter().map(|s| s.predicted_class).collect();
    assert_eq!(rep.cases, 12);
    assert_eq!(rep.accuracy, accuracy(&gt, &pred));
    assert_eq!(rep.agreement_points, total_agreement_points(&gt, &pred, &table));
    assert_eq!(rep.max_agreement_points, 180.0);
    assert_eq!(rep.confusion.iter().flatten().sum::<usize>(), 12);
    assert!(rep.auroc_per_class.iter().all(|a| a.is_some()));
    assert!((rep.macro_f1 - rep.f1_per_class.iter().sum::<f64>() / 4.0).abs() < 1e-15);
    let json = serde_json::to_string(&rep).unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, rep);
    assert_eq!(rep.schema_version, METRICS_SCHEMA_VERSION);
}
