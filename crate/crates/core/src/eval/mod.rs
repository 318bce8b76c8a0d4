//! Leave-one-class-out evaluation: label remapping, threshold calibration
//! by target TPR, ROC/AUC, Cohen's kappa, known-class accuracy and
//! unknown precision.

mod loco;
mod roc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loco::{loco_remap, IdMap, LocoSplit};
pub use roc::{apply_threshold, apply_threshold_for, calibrate_threshold, roc_auc, trapezoid_auc, Calibration, RocCurve, RocPoint};

use crate::maps::{OpenSetPrediction, ScoreMap};
use crate::tensor_store::IGNORE_LABEL;

/// TPR grid of the evaluation tables.
pub const DEFAULT_TPR_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("held-out class {uuc} outside 0..{num_classes}")]
    BadClass { uuc: usize, num_classes: usize },
    #[error("label {value} outside the class range")]
    LabelOutOfRange { value: i32 },
    #[error("no unknown pixels to calibrate on")]
    NoUnknowns,
    #[error("ROC needs both known and unknown pixels")]
    SingleClassMask,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("length mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("target TPR {0} outside (0, 1]")]
    BadTpr(f64),
    #[error("score map contains NaN")]
    NanScore,
}

/// Serializes non-finite floats as strings (`"inf"`, `"-inf"`, `"nan"`)
/// since JSON has no literal for them.
pub(crate) mod float_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Square confusion matrix, rows = truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub size: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            counts: vec![vec![0; size]; size],
        }
    }

    pub fn from_rows(counts: Vec<Vec<u64>>) -> Self {
        let size = counts.len();
        assert!(counts.iter().all(|r| r.len() == size), "square matrix");
        Self { size, counts }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.size, other.size);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// Accumulates an open-set prediction against evaluation labels,
    /// skipping ignored pixels.
    pub fn accumulate(&mut self, pred: &[u32], eval_labels: &[i32]) -> Result<(), EvalError> {
        if pred.len() != eval_labels.len() {
            return Err(EvalError::DimMismatch {
                expected: eval_labels.len(),
                got: pred.len(),
            });
        }
        for (&p, &t) in pred.iter().zip(eval_labels) {
            if t == IGNORE_LABEL {
                continue;
            }
            let t = t as usize;
            if t >= self.size || p as usize >= self.size {
                return Err(EvalError::LabelOutOfRange { value: t as i32 });
            }
            self.add(t, p as usize);
        }
        Ok(())
    }
}

/// Chance-corrected agreement over every class in the matrix.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let n = total as f64;
    let observed = (0..cm.size).map(|i| cm.counts[i][i]).sum::<u64>() as f64 / n;
    let expected = (0..cm.size)
        .map(|i| cm.row_sum(i) as f64 * cm.col_sum(i) as f64)
        .sum::<f64>()
        / (n * n);
    if expected == 1.0 {
        return Ok(1.0);
    }
    Ok((observed - expected) / (1.0 - expected))
}

/// Accuracy over pixels whose true label is a known class (the last row of
/// the matrix is the unknown class). Zero when there are none.
pub fn known_accuracy(cm: &ConfusionMatrix) -> f64 {
    let k = cm.size - 1;
    let total: u64 = (0..k).map(|i| cm.row_sum(i)).sum();
    if total == 0 {
        return 0.0;
    }
    (0..k).map(|i| cm.counts[i][i]).sum::<u64>() as f64 / total as f64
}

/// Fraction of UNKNOWN flags that hit true unknowns; zero if nothing was
/// flagged.
pub fn unknown_precision(cm: &ConfusionMatrix) -> f64 {
    let u = cm.size - 1;
    let flagged = cm.col_sum(u);
    if flagged == 0 {
        0.0
    } else {
        cm.counts[u][u] as f64 / flagged as f64
    }
}

/// Metrics for one operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub target_tpr: Option<f64>,
    pub achieved_tpr: f64,
    #[serde(with = "float_repr")]
    pub threshold: f64,
    pub acc_known: f64,
    pub pre_unknown: f64,
    pub kappa: f64,
    pub confusion: ConfusionMatrix,
}

impl OperatingPoint {
    pub fn from_confusion(cm: ConfusionMatrix, threshold: f64, target_tpr: Option<f64>) -> Result<Self, EvalError> {
        let u = cm.size - 1;
        let n_u = cm.row_sum(u);
        let achieved_tpr = if n_u == 0 {
            0.0
        } else {
            cm.counts[u][u] as f64 / n_u as f64
        };
        Ok(Self {
            target_tpr,
            achieved_tpr,
            threshold,
            acc_known: known_accuracy(&cm),
            pre_unknown: unknown_precision(&cm),
            kappa: cohen_kappa(&cm)?,
            confusion: cm,
        })
    }
}

/// Single-prediction report: metrics at the prediction's threshold plus
/// the threshold-free AUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub point: OperatingPoint,
    pub auc: f64,
}

/// Keeps non-ignored pixels: their scores and whether each is unknown.
pub fn valid_scores(scores: &ScoreMap, eval_labels: &[i32], unknown_label: i32) -> (Vec<f64>, Vec<bool>) {
    scores
        .data
        .iter()
        .zip(eval_labels)
        .filter(|(_, &l)| l != IGNORE_LABEL)
        .map(|(&s, &l)| (s, l == unknown_label))
        .unzip()
}

pub fn evaluate(pred: &OpenSetPrediction, eval_labels: &[i32], scores: &ScoreMap) -> Result<EvalReport, EvalError> {
    if pred.data.len() != eval_labels.len() || scores.data.len() != eval_labels.len() {
        return Err(EvalError::DimMismatch {
            expected: eval_labels.len(),
            got: pred.data.len().min(scores.data.len()),
        });
    }
    let mut cm = ConfusionMatrix::new(pred.num_known + 1);
    cm.accumulate(&pred.data, eval_labels)?;
    let (s, u) = valid_scores(scores, eval_labels, pred.num_known as i32);
    let auc = roc_auc(&s, &u)?.auc;
    Ok(EvalReport {
        point: OperatingPoint::from_confusion(cm, pred.threshold, None)?,
        auc,
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::PriorPrediction;

    #[test]
    fn kappa_examples() {
        let eye = ConfusionMatrix::from_rows(vec![vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 9]]);
        assert_eq!(cohen_kappa(&eye).unwrap(), 1.0);
        let cm = ConfusionMatrix::from_rows(vec![vec![20, 5], vec![10, 15]]);
        assert!((cohen_kappa(&cm).unwrap() - 0.4).abs() < 1e-12);
        // Outer product of matched marginals: predictions independent of truth.
        let cm = ConfusionMatrix::from_rows(vec![vec![4, 6], vec![6, 9]]);
        assert!(cohen_kappa(&cm).unwrap().abs() < 1e-12);
        assert_eq!(cohen_kappa(&ConfusionMatrix::new(3)), Err(EvalError::EmptyMatrix));
        // Single occupied cell: chance agreement is 1, kappa defined as 1.
        let cm = ConfusionMatrix::from_rows(vec![vec![0, 0], vec![0, 7]]);
        assert_eq!(cohen_kappa(&cm).unwrap(), 1.0);
    }

    #[test]
    fn perfect_prediction() {
        let labels = vec![0, 1, 2, -1, 2, 0];
        let pred = OpenSetPrediction {
            height: 2,
            width: 3,
            num_known: 2,
            data: vec![0, 1, 2, 1, 2, 0],
            threshold: 0.5,
            method: None,
        };
        let scores = ScoreMap::new(2, 3, vec![0.9, 0.8, 0.1, 0.0, 0.2, 0.7]);
        let r = evaluate(&pred, &labels, &scores).unwrap();
        assert_eq!(r.point.acc_known, 1.0);
        assert_eq!(r.point.pre_unknown, 1.0);
        assert_eq!(r.point.kappa, 1.0);
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.point.confusion.total(), 5);
    }

    #[test]
    fn closed_set_prediction_has_zero_precision() {
        let labels = vec![0, 1, 2, 2];
        let scores = ScoreMap::new(1, 4, vec![0.9, 0.8, 0.1, 0.3]);
        let prior = PriorPrediction::new(1, 4, 2, vec![0, 1, 1, 0]);
        let pred = apply_threshold(&scores, &prior, f64::NEG_INFINITY);
        let r = evaluate(&pred, &labels, &scores).unwrap();
        assert_eq!(r.point.pre_unknown, 0.0);
        assert_eq!(r.point.acc_known, 1.0);
    }

    #[test]
    fn hand_built_three_by_three() {
        // Labels (2 = unknown):    Prediction:
        //   0 0 1                    0 1 1
        //   1 2 2                    1 2 0
        //   2 0 1                    2 0 2
        let labels = vec![0, 0, 1, 1, 2, 2, 2, 0, 1];
        let data = vec![0, 1, 1, 1, 2, 0, 2, 0, 2];
        let scores = ScoreMap::new(3, 3, vec![0.9, 0.6, 0.8, 0.7, 0.2, 0.65, 0.1, 0.85, 0.3]);
        let pred = OpenSetPrediction {
            height: 3,
            width: 3,
            num_known: 2,
            data,
            threshold: 0.3,
            method: None,
        };
        let r = evaluate(&pred, &labels, &scores).unwrap();
        // Known pixels: 6, correct: (0,0) (0,2)->0? see matrix below.
        // Confusion rows=truth: t0: [2,1,0]; t1: [0,2,1]; t2: [1,0,2].
        assert_eq!(r.point.confusion.counts, vec![vec![2, 1, 0], vec![0, 2, 1], vec![1, 0, 2]]);
        assert!((r.point.acc_known - 4.0 / 6.0).abs() < 1e-15);
        assert!((r.point.pre_unknown - 2.0 / 3.0).abs() < 1e-15);
        // p_o = 6/9, p_e = (3*3 + 3*3 + 3*3) / 81 = 1/3, kappa = (2/3 - 1/3) / (2/3) = 0.5
        assert!((r.point.kappa - 0.5).abs() < 1e-15);
        // Unknown scores {0.2, 0.65, 0.1} vs known {0.9, 0.6, 0.8, 0.7, 0.85, 0.3}:
        // pairs with known > unknown: 0.2 -> 6, 0.1 -> 6, 0.65 -> 4 (0.9, 0.8, 0.7, 0.85).
        assert!((r.auc - 16.0 / 18.0).abs() < 1e-15);
    }

    #[test]
    fn float_repr_roundtrip() {
        let p = OperatingPoint::from_confusion(
            ConfusionMatrix::from_rows(vec![vec![1, 0], vec![0, 1]]),
            f64::NEG_INFINITY,
            None,
        )
        .unwrap();
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"-inf\""));
        let back: OperatingPoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back.threshold, f64::NEG_INFINITY);
    }
}
