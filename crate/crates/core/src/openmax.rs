//! Per-pixel OpenMax: mean activation vectors, tail Weibull models over
//! distances to them, softmax recalibration with an unknown channel, and
//! per-class rejection thresholds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::SampleMatrix;
use crate::maps::{LogitMap, Method, OpenSetPrediction, PriorPrediction, ScoreMap};
use crate::softmax::{argmax, softmax_into};
use crate::weibull::{fit_weibull, largest, Weibull, WeibullError};

pub const DEFAULT_TAIL_SIZE: usize = 2000;
pub const DEFAULT_QUANTILE: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum OpenMaxError {
    #[error("no samples for class {class_id}")]
    NoSamples { class_id: usize },
    #[error("cosine distance undefined for a zero-norm vector")]
    ZeroVector,
    #[error("vector dims differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("no Weibull model for class {class_id}")]
    ModelMissing { class_id: usize },
    #[error("class {class_id}: {source}")]
    Fit {
        class_id: usize,
        #[source]
        source: WeibullError,
    },
    #[error("invalid OpenMax config: {0}")]
    BadConfig(String),
}

/// Distance between an activation vector and a class mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DistanceKind {
    Euclidean,
    Cosine,
    /// `w_e * euclidean / median_tail_euclidean + w_c * cosine`.
    Hybrid { w_euclid: f64, w_cosine: f64 },
}

impl DistanceKind {
    pub fn hybrid() -> Self {
        DistanceKind::Hybrid {
            w_euclid: 0.5,
            w_cosine: 0.5,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euclidean" => Some(Self::Euclidean),
            "cosine" => Some(Self::Cosine),
            "hybrid" => Some(Self::hybrid()),
            _ => None,
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64, OpenMaxError> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(OpenMaxError::ZeroVector);
    }
    Ok((1.0 - dot / (na.sqrt() * nb.sqrt())).max(0.0))
}

/// Distance from `a` to `mav`. `euclid_norm` is the median tail euclidean
/// distance used to scale the euclidean term of the hybrid distance.
pub fn distance(a: &[f64], mav: &[f64], kind: DistanceKind, euclid_norm: f64) -> Result<f64, OpenMaxError> {
    if a.len() != mav.len() {
        return Err(OpenMaxError::DimMismatch(a.len(), mav.len()));
    }
    match kind {
        DistanceKind::Euclidean => Ok(euclidean(a, mav)),
        DistanceKind::Cosine => cosine(a, mav),
        DistanceKind::Hybrid { w_euclid, w_cosine } => {
            let e = if euclid_norm > 0.0 {
                euclidean(a, mav) / euclid_norm
            } else {
                euclidean(a, mav)
            };
            Ok(w_euclid * e + w_cosine * cosine(a, mav)?)
        }
    }
}

pub fn compute_mav(samples: &SampleMatrix) -> Result<Vec<f64>, OpenMaxError> {
    let n = samples.num_rows();
    if n == 0 {
        return Err(OpenMaxError::NoSamples {
            class_id: samples.class_id,
        });
    }
    let mut mean = vec![0.0; samples.dim];
    for row in samples.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Ok(mean)
}

/// Tail distribution of distances for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TailFit {
    Weibull(Weibull),
    /// All tail distances were equal; anything beyond that value is rejected.
    PointMass { at: f64 },
}

impl TailFit {
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            TailFit::Weibull(w) => w.cdf(x),
            TailFit::PointMass { at } => {
                if x > *at {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn quantile(&self, q: f64) -> f64 {
        match self {
            TailFit::Weibull(w) => w.quantile(q),
            TailFit::PointMass { at } => *at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeibullModel {
    pub class_id: usize,
    pub mav: Vec<f64>,
    pub tail: TailFit,
    pub tail_size: usize,
    pub distance: DistanceKind,
    /// Median euclidean distance within the tail (hybrid normalizer).
    pub euclid_norm: f64,
}

impl WeibullModel {
    pub fn distance_to(&self, a: &[f64]) -> Result<f64, OpenMaxError> {
        distance(a, &self.mav, self.distance, self.euclid_norm)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.tail.cdf(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenMaxConfig {
    /// Number of top-ranked classes revised; `None` revises all of them.
    pub alpha: Option<usize>,
    pub tail_size: usize,
    pub distance: DistanceKind,
    /// CDF level above which the predicted class is rejected.
    pub quantile: f64,
}

impl Default for OpenMaxConfig {
    fn default() -> Self {
        Self {
            alpha: None,
            tail_size: DEFAULT_TAIL_SIZE,
            distance: DistanceKind::Euclidean,
            quantile: DEFAULT_QUANTILE,
        }
    }
}

impl OpenMaxConfig {
    pub fn validate(&self, num_classes: usize) -> Result<(), OpenMaxError> {
        if let Some(alpha) = self.alpha {
            if alpha == 0 || alpha > num_classes {
                return Err(OpenMaxError::BadConfig(format!(
                    "alpha {alpha} outside 1..={num_classes}"
                )));
            }
        }
        if self.tail_size < 3 {
            return Err(OpenMaxError::BadConfig("tail size must be at least 3".into()));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(OpenMaxError::BadConfig(format!("quantile {} outside (0, 1)", self.quantile)));
        }
        if let DistanceKind::Hybrid { w_euclid, w_cosine } = self.distance {
            if w_euclid < 0.0 || w_cosine < 0.0 {
                return Err(OpenMaxError::BadConfig("hybrid weights must be non-negative".into()));
            }
        }
        Ok(())
    }

    fn alpha_for(&self, num_classes: usize) -> usize {
        self.alpha.unwrap_or(num_classes).min(num_classes)
    }
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Fits one class model from the activations of its correctly classified
/// pixels. The tail is the `min(tail_size, n)` largest distances.
pub fn fit_class_model(samples: &SampleMatrix, cfg: &OpenMaxConfig) -> Result<WeibullModel, OpenMaxError> {
    let class_id = samples.class_id;
    let mav = compute_mav(samples)?;
    let n = samples.num_rows();
    let tail_size = cfg.tail_size.min(n);
    if tail_size < 3 {
        return Err(OpenMaxError::Fit {
            class_id,
            source: WeibullError::InsufficientSamples { needed: 3, got: n },
        });
    }

    let euclid_norm = match cfg.distance {
        DistanceKind::Hybrid { .. } => {
            let d: Vec<f64> = samples.iter_rows().map(|r| euclidean(r, &mav)).collect();
            median_sorted(&largest(&d, tail_size))
        }
        _ => 1.0,
    };
    let distances = samples
        .iter_rows()
        .map(|r| distance(r, &mav, cfg.distance, euclid_norm))
        .collect::<Result<Vec<_>, _>>()?;
    let tail_values = largest(&distances, tail_size);
    let tail = match fit_weibull(&tail_values) {
        Ok(w) => TailFit::Weibull(w),
        Err(WeibullError::DegenerateTail { value }) => TailFit::PointMass { at: value },
        Err(source) => return Err(OpenMaxError::Fit { class_id, source }),
    };
    Ok(WeibullModel {
        class_id,
        mav,
        tail,
        tail_size,
        distance: cfg.distance,
        euclid_norm,
    })
}

/// Fitted models for every known class plus the config they were fit with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeibullModelSet {
    pub config: OpenMaxConfig,
    pub models: Vec<WeibullModel>,
}

impl WeibullModelSet {
    pub fn num_classes(&self) -> usize {
        self.models.len()
    }

    /// Per-class distance thresholds `T_k`: the config quantile of each tail.
    pub fn thresholds(&self) -> Vec<f64> {
        self.models.iter().map(|m| m.tail.quantile(self.config.quantile)).collect()
    }

    fn check(&self, channels: usize) -> Result<(), OpenMaxError> {
        for k in 0..channels {
            match self.models.get(k) {
                Some(m) if m.class_id == k => {}
                _ => return Err(OpenMaxError::ModelMissing { class_id: k }),
            }
        }
        Ok(())
    }
}

/// Per-class revision weights `w_c`: the CDF of each class's distance,
/// scaled by `(alpha - rank) / alpha` for the top-`alpha` classes and zero
/// for the rest.
pub fn revision_weights(
    activation: &[f64],
    models: &[WeibullModel],
    cfg: &OpenMaxConfig,
    weights: &mut [f64],
) -> Result<(), OpenMaxError> {
    let c = activation.len();
    if models.len() < c {
        return Err(OpenMaxError::ModelMissing { class_id: models.len() });
    }
    let alpha = cfg.alpha_for(c);
    weights.iter_mut().for_each(|w| *w = 0.0);
    let mut order: Vec<usize> = (0..c).collect();
    // Stable: equal activations keep ascending class order.
    order.sort_by(|&a, &b| activation[b].total_cmp(&activation[a]));
    for (rank, &class) in order.iter().take(alpha).enumerate() {
        let d = models[class].distance_to(activation)?;
        let factor = (alpha - rank) as f64 / alpha as f64;
        weights[class] = models[class].cdf(d) * factor;
    }
    Ok(())
}

/// Applies revision weights: known activations shrink by `1 - w`, the
/// removed mass feeds the unknown channel, and a softmax over the `C + 1`
/// revised activations gives the output.
pub fn recalibrate_with_weights(activation: &[f64], weights: &[f64], out: &mut [f64]) {
    let c = activation.len();
    debug_assert_eq!(out.len(), c + 1);
    let mut revised = vec![0.0; c + 1];
    let mut unknown = 0.0;
    for k in 0..c {
        revised[k] = activation[k] * (1.0 - weights[k]);
        unknown += activation[k] * weights[k];
    }
    revised[c] = unknown;
    softmax_into(&revised, out);
}

/// OpenMax recalibration of one activation vector into `C + 1` probabilities.
pub fn openmax_recalibrate(
    activation: &[f64],
    models: &[WeibullModel],
    cfg: &OpenMaxConfig,
) -> Result<Vec<f64>, OpenMaxError> {
    let mut weights = vec![0.0; activation.len()];
    revision_weights(activation, models, cfg, &mut weights)?;
    let mut out = vec![0.0; activation.len() + 1];
    recalibrate_with_weights(activation, &weights, &mut out);
    Ok(out)
}

/// Output of [`score_openfcn`].
#[derive(Debug, Clone, PartialEq)]
pub struct OpenFcnOutput {
    /// `1 - P(unknown)` after recalibration.
    pub scores: ScoreMap,
    pub prior: PriorPrediction,
    /// Predicted class kept when its revision weight is at most the
    /// quantile, i.e. its distance is within `T_k`; UNKNOWN otherwise.
    pub posterior: OpenSetPrediction,
}

pub fn score_openfcn(logits: &LogitMap, set: &WeibullModelSet) -> Result<OpenFcnOutput, OpenMaxError> {
    let c = logits.channels;
    set.check(c)?;
    set.config.validate(c)?;
    let plane = logits.num_pixels();
    let mut scores = vec![0.0; plane];
    let mut prior = vec![0u32; plane];
    let mut post = vec![0u32; plane];
    let mut a = vec![0.0; c];
    let mut w = vec![0.0; c];
    let mut probs = vec![0.0; c + 1];
    let q = set.config.quantile;
    for i in 0..plane {
        logits.pixel_into(i, &mut a);
        revision_weights(&a, &set.models, &set.config, &mut w)?;
        recalibrate_with_weights(&a, &w, &mut probs);
        let k = argmax(&a);
        scores[i] = 1.0 - probs[c];
        prior[i] = k as u32;
        // argmax is the top-ranked class, so its weight is the raw CDF.
        post[i] = if w[k] <= q { k as u32 } else { c as u32 };
    }
    Ok(OpenFcnOutput {
        scores: ScoreMap::new(logits.height, logits.width, scores),
        prior: PriorPrediction::new(logits.height, logits.width, c, prior),
        posterior: OpenSetPrediction {
            height: logits.height,
            width: logits.width,
            num_known: c,
            data: post,
            threshold: q,
            method: Some(Method::Openfcn),
        },
    })
}
