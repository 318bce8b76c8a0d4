use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::maps::{Method, OpenSetPrediction, PriorPrediction, ScoreMap};

/// Threshold chosen for a target detection rate on unknown pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub target_tpr: f64,
    #[serde(with = "super::float_repr")]
    pub threshold: f64,
    pub achieved_tpr: f64,
}

fn check_scores(scores: &[f64], unknown: &[bool]) -> Result<(), EvalError> {
    if scores.len() != unknown.len() {
        return Err(EvalError::DimMismatch {
            expected: scores.len(),
            got: unknown.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NanScore);
    }
    Ok(())
}

/// Number of unknowns that must be flagged to reach `tpr`.
fn required_count(tpr: f64, n: usize) -> usize {
    // The small slack keeps products like 0.3 * 10 from rounding up past 3.
    let r = (tpr * n as f64 - 1e-9).ceil();
    (r.max(1.0) as usize).min(n)
}

/// Picks `T` as the `ceil(tpr * N_u)`-th smallest unknown score, so that
/// flagging `score <= T` detects at least `tpr` of the unknowns with the
/// fewest flags possible.
pub fn calibrate_threshold(scores: &[f64], unknown: &[bool], tpr: f64) -> Result<Calibration, EvalError> {
    check_scores(scores, unknown)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(EvalError::BadTpr(tpr));
    }
    let mut uuc: Vec<f64> = scores
        .iter()
        .zip(unknown)
        .filter_map(|(&s, &u)| u.then_some(s))
        .collect();
    if uuc.is_empty() {
        return Err(EvalError::NoUnknowns);
    }
    uuc.sort_by(f64::total_cmp);
    let k = required_count(tpr, uuc.len());
    let threshold = uuc[k - 1];
    let flagged = uuc.partition_point(|&s| s <= threshold);
    Ok(Calibration {
        target_tpr: tpr,
        threshold,
        achieved_tpr: flagged as f64 / uuc.len() as f64,
    })
}

/// UNKNOWN where `score <= threshold`, otherwise the prior class.
pub fn apply_threshold(scores: &ScoreMap, prior: &PriorPrediction, threshold: f64) -> OpenSetPrediction {
    assert_eq!(scores.data.len(), prior.data.len(), "score / prior dims");
    let unknown = prior.num_classes as u32;
    let data = scores
        .data
        .iter()
        .zip(&prior.data)
        .map(|(&s, &c)| if s <= threshold { unknown } else { c })
        .collect();
    OpenSetPrediction {
        height: prior.height,
        width: prior.width,
        num_known: prior.num_classes,
        data,
        threshold,
        method: None,
    }
}

pub fn apply_threshold_for(scores: &ScoreMap, prior: &PriorPrediction, threshold: f64, method: Method) -> OpenSetPrediction {
    let mut p = apply_threshold(scores, prior, threshold);
    p.method = Some(method);
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Flag threshold reaching this point (`score <= threshold`).
    #[serde(with = "super::float_repr")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC of detecting unknowns by low knownness. AUC uses the rank-sum
/// (Mann-Whitney) statistic with ties counted one half.
pub fn roc_auc(scores: &[f64], unknown: &[bool]) -> Result<RocCurve, EvalError> {
    check_scores(scores, unknown)?;
    let n_u = unknown.iter().filter(|&&u| u).count();
    let n_k = unknown.len() - n_u;
    if n_u == 0 || n_k == 0 {
        return Err(EvalError::SingleClassMask);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::NEG_INFINITY,
    }];
    let mut known_rank_sum = 0.0;
    let (mut seen_u, mut seen_k) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        let (mut group_u, mut group_k) = (0usize, 0usize);
        while j < order.len() && scores[order[j]].total_cmp(&s).is_eq() {
            if unknown[order[j]] {
                group_u += 1;
            } else {
                group_k += 1;
            }
            j += 1;
        }
        // Ranks i+1 ..= j share the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        known_rank_sum += midrank * group_k as f64;
        seen_u += group_u;
        seen_k += group_k;
        points.push(RocPoint {
            fpr: seen_k as f64 / n_k as f64,
            tpr: seen_u as f64 / n_u as f64,
            threshold: s,
        });
        i = j;
    }
    let (nk, nu) = (n_k as f64, n_u as f64);
    let auc = (known_rank_sum - nk * (nk + 1.0) / 2.0) / (nk * nu);
    Ok(RocCurve { points, auc })
}

/// Area under the emitted curve by the trapezoid rule.
pub fn trapezoid_auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(known: &[f64], unknown: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let mut s = known.to_vec();
        s.extend_from_slice(unknown);
        let mut m = vec![false; known.len()];
        m.extend(std::iter::repeat_n(true, unknown.len()));
        (s, m)
    }

    #[test]
    fn order_statistic_threshold() {
        let uuc: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let (s, m) = split(&[5.0, 0.05], &uuc);
        let cal = calibrate_threshold(&s, &m, 0.3).unwrap();
        assert_eq!(cal.threshold, 0.3);
        assert!((cal.achieved_tpr - 0.3).abs() < 1e-15);
        let flagged: Vec<f64> = uuc.iter().copied().filter(|&v| v <= cal.threshold).collect();
        assert_eq!(flagged, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn full_tpr_takes_max() {
        let (s, m) = split(&[2.0], &[0.4, 0.9, 0.1]);
        let cal = calibrate_threshold(&s, &m, 1.0).unwrap();
        assert_eq!(cal.threshold, 0.9);
        assert_eq!(cal.achieved_tpr, 1.0);
    }

    #[test]
    fn ties_saturate() {
        let (s, m) = split(&[], &[0.5; 8]);
        for tpr in [0.1, 0.5, 0.9] {
            let cal = calibrate_threshold(&s, &m, tpr).unwrap();
            assert_eq!(cal.threshold, 0.5);
            assert_eq!(cal.achieved_tpr, 1.0);
        }
    }

    #[test]
    fn no_unknowns() {
        assert_eq!(calibrate_threshold(&[1.0], &[false], 0.5), Err(EvalError::NoUnknowns));
    }

    #[test]
    fn threshold_limits() {
        let scores = ScoreMap::new(2, 2, vec![0.9, 0.2, 0.5, 0.7]);
        let prior = PriorPrediction::new(2, 2, 3, vec![0, 1, 2, 1]);
        assert_eq!(apply_threshold(&scores, &prior, f64::NEG_INFINITY).data, prior.data);
        assert_eq!(apply_threshold(&scores, &prior, f64::INFINITY).data, vec![3; 4]);
        assert_eq!(apply_threshold(&scores, &prior, 0.5).data, vec![0, 3, 3, 1]);
    }

    #[test]
    fn auc_examples() {
        let (s, m) = split(&[0.9, 0.8, 0.7], &[0.4, 0.3]);
        assert_eq!(roc_auc(&s, &m).unwrap().auc, 1.0);
        let (s, m) = split(&[0.9, 0.4], &[0.5, 0.1]);
        assert_eq!(roc_auc(&s, &m).unwrap().auc, 0.75);
        let (s, m) = split(&[0.3; 4], &[0.3; 3]);
        assert_eq!(roc_auc(&s, &m).unwrap().auc, 0.5);
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), Err(EvalError::SingleClassMask));
    }

    #[test]
    fn curve_spans_unit_square() {
        let (s, m) = split(&[0.9, 0.4, 0.4], &[0.5, 0.1, 0.4]);
        let roc = roc_auc(&s, &m).unwrap();
        let first = &roc.points[0];
        let last = roc.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!((trapezoid_auc(&roc.points) - roc.auc).abs() < 1e-12);
    }
}
