//! Fractile-threshold calibration and the detection rule.
//!
//! Per code, the acceptance interval is the `[alpha, 1-alpha]` empirical
//! fractile pair of validation-normal SC scores (linear interpolation
//! between order statistics, so results are reproducible bit for bit).
//! A sample is normal iff every non-sentinel code score falls inside its
//! interval and no sentinel is present; the continuous anomaly score is the
//! largest normalized interval exceedance across codes.

use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use crate::consistency::{Metric, SCVector};
use crate::error::{CoreError, CoreResult};

/// Linear-interpolation quantile of an ascending-sorted slice:
/// index `h = p * (n - 1)` interpolated between adjacent order statistics.
pub fn quantile_linear(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Interval orientation. Two-sided matches the fractile-pair construction;
/// one-sided keeps only the "worse" direction of each metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdMode {
    TwoSided,
    OneSided,
}

/// Calibrated per-code acceptance intervals for one metric.
#[derive(Clone, Debug)]
pub struct ThresholdConfig {
    pub metric: Metric,
    pub alpha: f64,
    pub mode: ThresholdMode,
    /// Selected code ids, aligned with `intervals`.
    pub codes: Vec<usize>,
    /// `(theta_low, theta_high)` per code.
    pub intervals: Vec<(f64, f64)>,
    /// Codes whose interval was degenerate and widened by epsilon.
    pub degenerate_codes: Vec<usize>,
    /// Fingerprint of the checkpoint these thresholds belong to.
    pub fingerprint: String,
}

/// Minimum validation size accepted by [`calibrate`].
pub const MIN_CALIBRATION_SAMPLES: usize = 10;

/// Exceedance assigned to sentinel (morph-search-exhausted) codes.
pub const SENTINEL_EXCEEDANCE: f64 = 10.0;

/// Computes per-code `[alpha, 1-alpha]` fractile intervals from validation
/// SC vectors. Sentinel entries are excluded from their code's sample.
pub fn calibrate(
    sc_vectors: &[SCVector],
    alpha: f64,
    metric: Metric,
    mode: ThresholdMode,
    fingerprint: &str,
) -> CoreResult<ThresholdConfig> {
    use alloc::string::ToString;
    if sc_vectors.len() < MIN_CALIBRATION_SAMPLES {
        return Err(CoreError::TooFewSamples {
            min: MIN_CALIBRATION_SAMPLES,
            got: sc_vectors.len(),
        });
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(CoreError::InvalidArgument(
            "alpha must be in (0, 0.5)".to_string(),
        ));
    }
    let first = &sc_vectors[0];
    if first.metric != metric {
        return Err(CoreError::MetricMismatch {
            sc: first.metric.name(),
            thresholds: metric.name(),
        });
    }
    let codes = first.codes.clone();
    let k = codes.len();
    let mut intervals = Vec::with_capacity(k);
    let mut degenerate = Vec::new();
    for slot in 0..k {
        let mut scores: Vec<f64> = sc_vectors
            .iter()
            .filter(|sc| !sc.sentinels[slot])
            .map(|sc| sc.scores[slot])
            .collect();
        if scores.len() < 2 {
            return Err(CoreError::TooFewSamples {
                min: 2,
                got: scores.len(),
            });
        }
        scores.sort_by(f64::total_cmp);
        let mut low = quantile_linear(&scores, alpha);
        let mut high = quantile_linear(&scores, 1.0 - alpha);
        if low == high {
            low -= 1e-9;
            high += 1e-9;
            degenerate.push(codes[slot]);
        }
        intervals.push((low, high));
    }
    Ok(ThresholdConfig {
        metric,
        alpha,
        mode,
        codes,
        intervals,
        degenerate_codes: degenerate,
        fingerprint: fingerprint.to_string(),
    })
}

/// Binary verdict for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Normal,
    Anomalous,
}

/// Decision output for one sample.
#[derive(Clone, Debug)]
pub struct DetectionReport {
    pub verdict: Verdict,
    /// Zero iff normal; max normalized interval exceedance otherwise.
    pub anomaly_score: f64,
    /// Codes that violated their interval (or were sentinels).
    pub violating_codes: Vec<usize>,
    pub sc: SCVector,
}

/// Applies calibrated thresholds to one SC vector.
pub fn decide(sc: &SCVector, thresholds: &ThresholdConfig) -> CoreResult<DetectionReport> {
    if sc.metric != thresholds.metric {
        return Err(CoreError::MetricMismatch {
            sc: sc.metric.name(),
            thresholds: thresholds.metric.name(),
        });
    }
    if sc.codes != thresholds.codes {
        return Err(CoreError::ShapeMismatch {
            expected: alloc::format!("codes {:?}", thresholds.codes),
            got: alloc::format!("codes {:?}", sc.codes),
        });
    }
    let mut score = 0.0f64;
    let mut violating = Vec::new();
    for slot in 0..sc.codes.len() {
        let exceed = if sc.sentinels[slot] {
            SENTINEL_EXCEEDANCE
        } else {
            let (low, high) = thresholds.intervals[slot];
            let w = high - low;
            let s = sc.scores[slot];
            let (below, above) = ((low - s) / w, (s - high) / w);
            match thresholds.mode {
                ThresholdMode::TwoSided => below.max(above).max(0.0),
                ThresholdMode::OneSided => {
                    if thresholds.metric.higher_is_better() {
                        below.max(0.0)
                    } else {
                        above.max(0.0)
                    }
                }
            }
        };
        if exceed > 0.0 {
            violating.push(sc.codes[slot]);
            if exceed > score {
                score = exceed;
            }
        }
    }
    let verdict = if score > 0.0 {
        Verdict::Anomalous
    } else {
        Verdict::Normal
    };
    Ok(DetectionReport {
        verdict,
        anomaly_score: score,
        violating_codes: violating,
        sc: sc.clone(),
    })
}

/// One row of a threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub tp: f64,
    pub tn: f64,
    pub accuracy: f64,
}

/// Recalibrates on VAL for each alpha and measures TP on ANO / TN on CLE.
pub fn sweep_alpha(
    sc_val: &[SCVector],
    sc_cle: &[SCVector],
    sc_ano: &[SCVector],
    alphas: &[f64],
    metric: Metric,
    mode: ThresholdMode,
) -> CoreResult<Vec<SweepRow>> {
    use alloc::string::ToString;
    if alphas.is_empty() {
        return Err(CoreError::InvalidArgument("empty alpha grid".to_string()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let th = calibrate(sc_val, alpha, metric, mode, "sweep")?;
        let flagged = |set: &[SCVector]| -> CoreResult<usize> {
            let mut n = 0;
            for sc in set {
                if decide(sc, &th)?.verdict == Verdict::Anomalous {
                    n += 1;
                }
            }
            Ok(n)
        };
        let fp = flagged(sc_cle)?;
        let tp_n = flagged(sc_ano)?;
        let tp = tp_n as f64 / sc_ano.len().max(1) as f64;
        let tn = 1.0 - fp as f64 / sc_cle.len().max(1) as f64;
        let accuracy = (tp_n + (sc_cle.len() - fp)) as f64
            / (sc_ano.len() + sc_cle.len()).max(1) as f64;
        rows.push(SweepRow {
            alpha,
            tp,
            tn,
            accuracy,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Scalar;

    fn sc(metric: Metric, scores: Vec<f64>) -> SCVector {
        let k = scores.len();
        SCVector {
            metric,
            codes: (0..k).collect(),
            scores,
            sentinels: vec![false; k],
        }
    }

    #[test]
    fn quantiles_match_hand_computed_fixture() {
        // scores 1..=100, alpha = 0.4 -> [40.6, 60.4]
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert!((quantile_linear(&v, 0.4) - 40.6).abs() < 1e-12);
        assert!((quantile_linear(&v, 0.6) - 60.4).abs() < 1e-12);
        // alpha -> 0 limit hits min/max exactly.
        assert_eq!(quantile_linear(&v, 0.0), 1.0);
        assert_eq!(quantile_linear(&v, 1.0), 100.0);
    }

    #[test]
    fn calibrate_on_hand_fixture() {
        let vectors: Vec<SCVector> = (1..=100)
            .map(|i| sc(Metric::Mse, vec![i as f64]))
            .collect();
        let th = calibrate(&vectors, 0.4, Metric::Mse, ThresholdMode::TwoSided, "fp").unwrap();
        assert!((th.intervals[0].0 - 40.6).abs() < 1e-12);
        assert!((th.intervals[0].1 - 60.4).abs() < 1e-12);
        assert!(th.degenerate_codes.is_empty());
    }

    #[test]
    fn calibrate_guards() {
        let few: Vec<SCVector> = (0..5).map(|i| sc(Metric::Mse, vec![i as f64])).collect();
        assert!(matches!(
            calibrate(&few, 0.4, Metric::Mse, ThresholdMode::TwoSided, "fp"),
            Err(CoreError::TooFewSamples { .. })
        ));

        let same: Vec<SCVector> = (0..20).map(|_| sc(Metric::Mse, vec![3.0])).collect();
        let th = calibrate(&same, 0.3, Metric::Mse, ThresholdMode::TwoSided, "fp").unwrap();
        assert_eq!(th.degenerate_codes, vec![0]);
        assert!(th.intervals[0].0 < th.intervals[0].1);

        let v: Vec<SCVector> = (0..20).map(|i| sc(Metric::Mse, vec![i as f64])).collect();
        assert!(calibrate(&v, 0.7, Metric::Mse, ThresholdMode::TwoSided, "fp").is_err());
        assert!(matches!(
            calibrate(&v, 0.3, Metric::Ssim, ThresholdMode::TwoSided, "fp"),
            Err(CoreError::MetricMismatch { .. })
        ));
    }

    #[test]
    fn decide_midpoint_is_normal_and_unit_exceedance_scores_one() {
        let vectors: Vec<SCVector> = (1..=100)
            .map(|i| sc(Metric::Mse, vec![i as f64]))
            .collect();
        let th = calibrate(&vectors, 0.4, Metric::Mse, ThresholdMode::TwoSided, "fp").unwrap();
        let (low, high) = th.intervals[0];
        let w = high - low;

        let mid = decide(&sc(Metric::Mse, vec![(low + high) / 2.0]), &th).unwrap();
        assert_eq!(mid.verdict, Verdict::Normal);
        assert_eq!(mid.anomaly_score, 0.0);
        assert!(mid.violating_codes.is_empty());

        let hot = decide(&sc(Metric::Mse, vec![high + w]), &th).unwrap();
        assert_eq!(hot.verdict, Verdict::Anomalous);
        assert!((hot.anomaly_score - 1.0).abs() < 1e-12);
        assert_eq!(hot.violating_codes, vec![0]);
    }

    #[test]
    fn decide_rejects_metric_mismatch_and_flags_sentinels() {
        let vectors: Vec<SCVector> = (1..=50)
            .map(|i| sc(Metric::Loss, vec![i as f64]))
            .collect();
        let th = calibrate(&vectors, 0.2, Metric::Loss, ThresholdMode::TwoSided, "fp").unwrap();
        assert!(matches!(
            decide(&sc(Metric::Mse, vec![25.0]), &th),
            Err(CoreError::MetricMismatch { .. })
        ));

        let mut s = sc(Metric::Loss, vec![f64::NAN]);
        s.sentinels[0] = true;
        let rep = decide(&s, &th).unwrap();
        assert_eq!(rep.verdict, Verdict::Anomalous);
        assert_eq!(rep.anomaly_score, SENTINEL_EXCEEDANCE);
    }

    #[test]
    fn score_zero_iff_normal() {
        let vectors: Vec<SCVector> = (1..=40)
            .map(|i| sc(Metric::Mse, vec![i as f64, (i * 2) as f64]))
            .collect();
        let th = calibrate(&vectors, 0.25, Metric::Mse, ThresholdMode::TwoSided, "fp").unwrap();
        for i in 0..200 {
            let probe = sc(
                Metric::Mse,
                vec![(i as f64) * 0.33, (i as f64) * 0.61 + 3.0],
            );
            let rep = decide(&probe, &th).unwrap();
            assert_eq!(
                rep.verdict == Verdict::Normal,
                rep.anomaly_score == 0.0,
                "verdict/score inconsistency at {i}"
            );
        }
    }

    #[test]
    fn one_sided_mode_ignores_the_good_direction() {
        let vectors: Vec<SCVector> = (1..=100)
            .map(|i| sc(Metric::Ssim, vec![i as f64 / 100.0]))
            .collect();
        let th_two =
            calibrate(&vectors, 0.3, Metric::Ssim, ThresholdMode::TwoSided, "fp").unwrap();
        let th_one =
            calibrate(&vectors, 0.3, Metric::Ssim, ThresholdMode::OneSided, "fp").unwrap();
        // A suspiciously *high* SSIM violates two-sided but passes one-sided
        // (for SSIM only low values are anomalous in one-sided mode).
        let probe = sc(Metric::Ssim, vec![0.999]);
        assert_eq!(decide(&probe, &th_two).unwrap().verdict, Verdict::Anomalous);
        assert_eq!(decide(&probe, &th_one).unwrap().verdict, Verdict::Normal);
        // Low SSIM is anomalous in both.
        let low = sc(Metric::Ssim, vec![0.01]);
        assert_eq!(decide(&low, &th_one).unwrap().verdict, Verdict::Anomalous);
    }

    #[test]
    fn nested_intervals_give_monotone_flagging() {
        // alpha1 < alpha2 -> interval(alpha2) inside interval(alpha1) ->
        // every sample flagged at alpha1 is flagged at alpha2.
        let mut rng = crate::rng::substream(9, "cal", 0);
        let val: Vec<SCVector> = (0..200)
            .map(|_| {
                sc(
                    Metric::Mse,
                    (0..3).map(|_| f64::standard_normal(&mut rng)).collect(),
                )
            })
            .collect();
        let probes: Vec<SCVector> = (0..300)
            .map(|_| {
                sc(
                    Metric::Mse,
                    (0..3)
                        .map(|_| 2.0 * f64::standard_normal(&mut rng))
                        .collect(),
                )
            })
            .collect();
        let alphas = [0.05, 0.1, 0.2, 0.3, 0.4];
        let mut prev_flagged: Option<Vec<bool>> = None;
        for &a in &alphas {
            let th = calibrate(&val, a, Metric::Mse, ThresholdMode::TwoSided, "fp").unwrap();
            let flagged: Vec<bool> = probes
                .iter()
                .map(|p| decide(p, &th).unwrap().verdict == Verdict::Anomalous)
                .collect();
            if let Some(prev) = &prev_flagged {
                for (i, (&was, &is)) in prev.iter().zip(&flagged).enumerate() {
                    assert!(!was || is, "sample {i} unflagged as alpha grew");
                }
            }
            prev_flagged = Some(flagged);
        }
    }

    #[test]
    fn calibration_soundness_on_validation_itself() {
        let mut rng = crate::rng::substream(10, "cal", 0);
        let n = 1000;
        let val: Vec<SCVector> = (0..n)
            .map(|_| sc(Metric::Mse, vec![f64::standard_normal(&mut rng)]))
            .collect();
        let alpha = 0.2;
        let th = calibrate(&val, alpha, Metric::Mse, ThresholdMode::TwoSided, "fp").unwrap();
        let violations = val
            .iter()
            .filter(|p| decide(p, &th).unwrap().verdict == Verdict::Anomalous)
            .count();
        let rate = violations as f64 / n as f64;
        let delta = 4.0 / n as f64;
        assert!(
            (rate - 2.0 * alpha).abs() <= delta,
            "violation rate {rate} vs 2a = {}",
            2.0 * alpha
        );
    }

    #[test]
    fn sweep_is_monotone_and_rejects_empty_grid() {
        let mut rng = crate::rng::substream(11, "cal", 0);
        let gen = |n: usize, spread: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<SCVector> {
            (0..n)
                .map(|_| {
                    sc(
                        Metric::Mse,
                        (0..2)
                            .map(|_| spread * f64::standard_normal(rng))
                            .collect(),
                    )
                })
                .collect()
        };
        let val = gen(150, 1.0, &mut rng);
        let cle = gen(100, 1.0, &mut rng);
        let ano = gen(100, 3.0, &mut rng);
        let alphas = [0.02, 0.05, 0.1, 0.2, 0.3, 0.4];
        let rows = sweep_alpha(
            &val,
            &cle,
            &ano,
            &alphas,
            Metric::Mse,
            ThresholdMode::TwoSided,
        )
        .unwrap();
        for w in rows.windows(2) {
            assert!(w[1].tp >= w[0].tp, "TP decreased along alpha grid");
            assert!(w[1].tn <= w[0].tn, "TN increased along alpha grid");
        }
        // Anomalies with 3x spread should be mostly caught at larger alpha.
        assert!(rows.last().unwrap().tp > 0.5);
        assert!(sweep_alpha(&val, &cle, &ano, &[], Metric::Mse, ThresholdMode::TwoSided).is_err());
    }
}
