//! Detection metrics: confusion rates and the ROC curve with trapezoidal
//! AUC. Labels follow the split convention: `true` (1) = anomaly.

use alloc::vec;
use alloc::vec::Vec;

/// TP rate (anomalies flagged), TN rate (normals passed), overall accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Confusion {
    pub tp_rate: f64,
    pub tn_rate: f64,
    pub accuracy: f64,
}

/// `flagged[i]` is the detector's verdict, `is_anomaly[i]` the ground truth.
pub fn confusion(flagged: &[bool], is_anomaly: &[bool]) -> Confusion {
    assert_eq!(flagged.len(), is_anomaly.len());
    let (mut tp, mut tn, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&f, &a) in flagged.iter().zip(is_anomaly) {
        if a {
            pos += 1;
            if f {
                tp += 1;
            }
        } else {
            neg += 1;
            if !f {
                tn += 1;
            }
        }
    }
    Confusion {
        tp_rate: tp as f64 / pos.max(1) as f64,
        tn_rate: tn as f64 / neg.max(1) as f64,
        accuracy: (tp + tn) as f64 / (pos + neg).max(1) as f64,
    }
}

/// ROC curve points plus trapezoidal AUC.
#[derive(Clone, Debug)]
pub struct RocCurve {
    /// `(fpr, tpr)` pairs, monotone in both coordinates, from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Threshold-sweep ROC with equal scores grouped into one step, so ties are
/// handled by a single diagonal segment (trapezoid = pairwise tie credit).
pub fn auc_roc(scores: &[f64], is_anomaly: &[bool]) -> RocCurve {
    assert_eq!(scores.len(), is_anomaly.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let pos = is_anomaly.iter().filter(|&&a| a).count().max(1) as f64;
    let neg = is_anomaly.iter().filter(|&&a| !a).count().max(1) as f64;

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        // consume the whole tie group before emitting a point
        while i < order.len() && scores[order[i]] == s {
            if is_anomaly[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg, tp as f64 / pos));
    }
    if *points.last().unwrap() != (1.0, 1.0) {
        points.push((1.0, 1.0));
    }

    let mut auc = 0.0;
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        auc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    RocCurve { points, auc }
}

/// O(n^2) oracle: P(anomaly outscored normal) + tie credit. Used by tests
/// and the acceptance suite to pin [`auc_roc`] exactly on small fixtures.
pub fn auc_pairwise(scores: &[f64], is_anomaly: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        if !is_anomaly[i] {
            continue;
        }
        for j in 0..scores.len() {
            if is_anomaly[j] {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        return 0.5;
    }
    wins / pairs
}
