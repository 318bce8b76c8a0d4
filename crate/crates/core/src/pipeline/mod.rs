//! Multi-scene glue: LOCO preparation, fitting, scoring and evaluation.
//!
//! Work is split per scene with rayon and merged in scene order, so results
//! do not depend on the size of the surrounding thread pool.

mod store;

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{
    apply_threshold, calibrate_threshold, loco_remap, roc_auc, Calibration, ConfusionMatrix, EvalError, IdMap,
    OperatingPoint, RocCurve, DEFAULT_TPR_GRID,
};
use crate::fusion::{default_spec, fuse_scene, FeatureField, FusionError, LayerSpec, PixelCoord, Reservoir, DEFAULT_SAMPLE_CAP};
use crate::ipca::{IpcaError, IpcaState, DEFAULT_BATCH_ROWS};
use crate::maps::{LogitMap, Method, OpenSetPrediction, PriorPrediction, ScoreMap};
use crate::openmax::{fit_class_model, score_openfcn, DistanceKind, OpenMaxConfig, OpenMaxError, WeibullModelSet};
use crate::pca::{fit_pca, score_openpcs, ClassModel, PcaError, PcsScoreOptions, DEFAULT_COMPONENTS};
use crate::softmax::{prior_prediction, score_softmax};
use crate::tensor_store::{Scene, StoreError, IGNORE_LABEL};

pub use store::{load_models, load_scores, save_models, save_scores, ScoreArtifacts, MODEL_HEADER, SCORE_HEADER};

/// Rows kept per class for the log-likelihood statistics of an IPCA model.
const IPCA_STATS_ROWS: usize = 10_000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("malformed artifact {}: {detail}", path.display())]
    Artifact { path: PathBuf, detail: String },
    #[error("tensor_store::{op}: {source}")]
    Store { op: &'static str, source: StoreError },
    #[error("fusion::{op}: {source}")]
    Fusion { op: &'static str, source: FusionError },
    #[error("openmax_evt::{op}: {source}")]
    OpenMax { op: &'static str, source: OpenMaxError },
    #[error("pca_density::{op}: {source}")]
    Pca { op: &'static str, source: PcaError },
    #[error("ipca::{op}: {source}")]
    Ipca { op: &'static str, source: IpcaError },
    #[error("eval_harness::{op}: {source}")]
    Eval { op: &'static str, source: EvalError },
}

macro_rules! ctx {
    ($variant:ident, $op:literal) => {
        |source| PipelineError::$variant { op: $op, source }
    };
}
pub(crate) use ctx;

/// Scorer choice and hyperparameters shared by fit and score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub method: Method,
    /// Layers fused for the PCA scorers; every layer at its manifest scale
    /// when absent.
    pub fusion: Option<Vec<LayerSpec>>,
    pub components: usize,
    /// Per-class cap on sampled training rows.
    pub cap: usize,
    pub seed: u64,
    pub batch_rows: usize,
    pub tail_size: usize,
    pub distance: DistanceKind,
    pub alpha: Option<usize>,
    pub quantile: f64,
    pub z_normalize: bool,
    pub strict: bool,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        let om = OpenMaxConfig::default();
        Self {
            method: Method::Openpcs,
            fusion: None,
            components: DEFAULT_COMPONENTS,
            cap: DEFAULT_SAMPLE_CAP,
            seed: 0,
            batch_rows: DEFAULT_BATCH_ROWS,
            tail_size: om.tail_size,
            distance: om.distance,
            alpha: om.alpha,
            quantile: om.quantile,
            z_normalize: false,
            strict: false,
        }
    }
}

impl ScorerConfig {
    pub fn openmax(&self) -> OpenMaxConfig {
        OpenMaxConfig {
            alpha: self.alpha,
            tail_size: self.tail_size,
            distance: self.distance,
            quantile: self.quantile,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.components == 0 {
            return bad("components must be >= 1".into());
        }
        if self.cap == 0 {
            return bad("cap must be >= 1".into());
        }
        if self.batch_rows == 0 {
            return bad("batch_rows must be >= 1".into());
        }
        if let Some(spec) = &self.fusion {
            if spec.is_empty() {
                return bad("fusion spec is empty".into());
            }
        }
        if self.method == Method::Openfcn {
            // Class count is unknown here; alpha is rechecked at fit time.
            self.openmax()
                .validate(self.alpha.unwrap_or(1).max(1))
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// One scene seen through a LOCO split: logits and prior restricted to the
/// known classes, labels compacted.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub logits: LogitMap,
    pub prior: PriorPrediction,
    /// Known classes compacted to `0..num_known`, UNKNOWN = `num_known`,
    /// ignore = -1.
    pub eval_labels: Vec<i32>,
    /// `eval_labels` with the held-out class ignored.
    pub train_labels: Vec<i32>,
    pub num_known: usize,
}

pub fn prepare(scene: &Scene, uuc: Option<usize>) -> Result<Prepared, PipelineError> {
    let full = LogitMap::from_scene(scene);
    let (logits, eval_labels, train_labels) = match uuc {
        Some(u) => {
            let split = loco_remap(scene.label_values(), scene.num_classes(), u).map_err(ctx!(Eval, "loco_remap"))?;
            if scene.num_classes() < 2 {
                return Err(PipelineError::Config("LOCO needs at least 2 classes".into()));
            }
            let train = split.train_labels();
            (full.without_channel(u), split.eval_labels, train)
        }
        None => {
            let labels = scene.label_values().to_vec();
            (full, labels.clone(), labels)
        }
    };
    let num_known = logits.channels;
    let prior = prior_prediction(&logits.data, logits.channels, logits.height, logits.width);
    Ok(Prepared {
        logits,
        prior,
        eval_labels,
        train_labels,
        num_known,
    })
}

/// Fitted scorer state for one LOCO split.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub config: ScorerConfig,
    pub uuc: Option<usize>,
    /// Class names of the scenes, including the held-out one.
    pub class_names: Vec<String>,
    pub fusion: Vec<LayerSpec>,
    pub models: FittedModels,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModels {
    Softmax,
    OpenFcn(WeibullModelSet),
    /// Used by both PCA scorers.
    Pca(Vec<ClassModel>),
}

impl Fitted {
    pub fn method(&self) -> Method {
        self.config.method
    }

    pub fn num_known(&self) -> usize {
        self.class_names.len() - usize::from(self.uuc.is_some())
    }

    pub fn id_map(&self) -> Option<IdMap> {
        self.uuc.map(|u| IdMap::new(self.class_names.len(), u).expect("uuc validated at fit"))
    }
}

fn check_scenes(scenes: &[Scene], uuc: Option<usize>) -> Result<(), PipelineError> {
    let Some(first) = scenes.first() else {
        return Err(PipelineError::Config("no scenes given".into()));
    };
    if scenes.iter().any(|s| s.class_names() != first.class_names()) {
        return Err(PipelineError::Config("scenes disagree on class names".into()));
    }
    if let Some(u) = uuc {
        if u >= first.num_classes() {
            return Err(PipelineError::Eval {
                op: "loco_remap",
                source: EvalError::BadClass {
                    uuc: u,
                    num_classes: first.num_classes(),
                },
            });
        }
    }
    Ok(())
}

fn logit_field(logits: &LogitMap) -> FeatureField {
    FeatureField {
        dim: logits.channels,
        height: logits.height,
        width: logits.width,
        data: logits.data.iter().map(|&v| f64::from(v)).collect(),
        provenance: Vec::new(),
    }
}

/// Scenes are processed this many at a time so memory stays bounded.
fn chunk_len() -> usize {
    2 * rayon::current_num_threads().max(1)
}

/// Streams the training pixels of every scene into per-class reservoirs.
fn sample_classes<F>(
    scenes: &[Scene],
    uuc: Option<usize>,
    num_known: usize,
    cap: usize,
    seed: u64,
    field_of: F,
) -> Result<Vec<Reservoir>, PipelineError>
where
    F: Fn(&Scene, &Prepared) -> Result<FeatureField, PipelineError> + Sync,
{
    let mut reservoirs = Vec::with_capacity(num_known);
    let mut dim = None;
    let mut index = 0u32;
    for chunk in scenes.chunks(chunk_len()) {
        let fields: Vec<(Prepared, FeatureField)> = chunk
            .par_iter()
            .map(|s| {
                let p = prepare(s, uuc)?;
                let f = field_of(s, &p)?;
                Ok((p, f))
            })
            .collect::<Result<_, PipelineError>>()?;
        for (p, f) in &fields {
            let d = *dim.get_or_insert(f.dim);
            if f.dim != d {
                return Err(PipelineError::Config(format!(
                    "scene {index} fuses to dimension {}, earlier scenes to {d}",
                    f.dim
                )));
            }
            if reservoirs.is_empty() {
                for k in 0..num_known {
                    reservoirs.push(Reservoir::new(k, d, cap, seed).map_err(ctx!(Fusion, "gather_class_samples"))?);
                }
            }
            for r in reservoirs.iter_mut() {
                r.offer_field(index, f, &p.prior.data, &p.train_labels)
                    .map_err(ctx!(Fusion, "gather_class_samples"))?;
            }
            index += 1;
        }
    }
    Ok(reservoirs)
}

fn fusion_spec(cfg: &ScorerConfig, scene: &Scene) -> Vec<LayerSpec> {
    cfg.fusion.clone().unwrap_or_else(|| default_spec(scene))
}

/// Fits the configured scorer on `scenes` with class `uuc` held out (all
/// classes known when `None`).
pub fn fit(scenes: &[Scene], uuc: Option<usize>, cfg: &ScorerConfig) -> Result<Fitted, PipelineError> {
    cfg.validate()?;
    check_scenes(scenes, uuc)?;
    let first = &scenes[0];
    let class_names = first.class_names().to_vec();
    let num_known = class_names.len() - usize::from(uuc.is_some());
    let fusion = fusion_spec(cfg, first);

    let models = match cfg.method {
        Method::Softmax => FittedModels::Softmax,
        Method::Openfcn => {
            let om = cfg.openmax();
            om.validate(num_known).map_err(|e| PipelineError::Config(e.to_string()))?;
            let reservoirs = sample_classes(scenes, uuc, num_known, cfg.cap, cfg.seed, |_, p| Ok(logit_field(&p.logits)))?;
            let models = reservoirs
                .into_par_iter()
                .map(|r| {
                    let class_id = r.class_id();
                    let samples = r.finish().map_err(|_| PipelineError::OpenMax {
                        op: "fit_weibull",
                        source: OpenMaxError::NoSamples { class_id },
                    })?;
                    fit_class_model(&samples, &om).map_err(ctx!(OpenMax, "fit_weibull"))
                })
                .collect::<Result<Vec<_>, _>>()?;
            FittedModels::OpenFcn(WeibullModelSet { config: om, models })
        }
        Method::Openpcs => {
            let reservoirs = sample_classes(scenes, uuc, num_known, cfg.cap, cfg.seed, |s, _| {
                fuse_scene(s, &fusion).map_err(ctx!(Fusion, "fuse"))
            })?;
            let models = reservoirs
                .into_par_iter()
                .map(|r| {
                    let class_id = r.class_id();
                    match r.finish() {
                        Err(e) => Ok(ClassModel::Unscoreable {
                            class_id,
                            reason: e.to_string(),
                        }),
                        Ok(samples) => match fit_pca(&samples, cfg.components) {
                            Ok(m) => Ok(ClassModel::Fitted(m)),
                            Err(e @ (PcaError::InsufficientSamples { .. } | PcaError::DegenerateData { .. })) => {
                                Ok(ClassModel::Unscoreable {
                                    class_id,
                                    reason: e.to_string(),
                                })
                            }
                            Err(e) => Err(PipelineError::Pca { op: "fit_pca", source: e }),
                        },
                    }
                })
                .collect::<Result<Vec<_>, PipelineError>>()?;
            FittedModels::Pca(models)
        }
        Method::Openipcs => FittedModels::Pca(fit_ipca(scenes, uuc, num_known, cfg, &fusion)?),
    };
    Ok(Fitted {
        config: cfg.clone(),
        uuc,
        class_names,
        fusion,
        models,
    })
}

struct ClassStream {
    state: IpcaState,
    pending: Vec<f64>,
    started: bool,
    stats: Reservoir,
}

fn fit_ipca(
    scenes: &[Scene],
    uuc: Option<usize>,
    num_known: usize,
    cfg: &ScorerConfig,
    fusion: &[LayerSpec],
) -> Result<Vec<ClassModel>, PipelineError> {
    let mut streams: Vec<ClassStream> = Vec::new();
    let mut index = 0u32;
    let mut dim = 0;
    for chunk in scenes.chunks(chunk_len()) {
        let fields = chunk
            .par_iter()
            .map(|s| {
                let p = prepare(s, uuc)?;
                let f = fuse_scene(s, fusion).map_err(ctx!(Fusion, "fuse"))?;
                Ok((p, f))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        for (p, f) in &fields {
            if streams.is_empty() {
                dim = f.dim;
                let n_comp = cfg.components.min(dim);
                for k in 0..num_known {
                    streams.push(ClassStream {
                        state: IpcaState::for_class(k, n_comp, dim).map_err(ctx!(Ipca, "partial_fit"))?,
                        pending: Vec::new(),
                        started: false,
                        stats: Reservoir::new(k, dim, IPCA_STATS_ROWS.min(cfg.cap), cfg.seed)
                            .map_err(ctx!(Fusion, "gather_class_samples"))?,
                    });
                }
            }
            if f.dim != dim {
                return Err(PipelineError::Config(format!("scene {index} fuses to dimension {}, expected {dim}", f.dim)));
            }
            let mut buf = vec![0.0; dim];
            for (i, (&pred, &truth)) in p.prior.data.iter().zip(&p.train_labels).enumerate() {
                if truth == IGNORE_LABEL || truth as u32 != pred {
                    continue;
                }
                f.pixel_into(i, &mut buf);
                let s = &mut streams[pred as usize];
                s.pending.extend_from_slice(&buf);
                let coord = PixelCoord {
                    scene: index,
                    y: (i / f.width) as u32,
                    x: (i % f.width) as u32,
                };
                s.stats.offer(coord, &buf);
            }
            // One update per scene and class, once enough rows exist to start.
            streams.par_iter_mut().try_for_each(|s| flush(s, cfg.batch_rows))?;
            index += 1;
        }
    }
    streams
        .into_par_iter()
        .map(|mut s| {
            flush(&mut s, cfg.batch_rows)?;
            let class_id = s.state.class_id();
            if !s.started {
                return Ok(ClassModel::Unscoreable {
                    class_id,
                    reason: format!("only {} training rows", s.pending.len() / dim.max(1)),
                });
            }
            let reference = s.stats.finish().map_err(ctx!(Fusion, "gather_class_samples"))?;
            match s.state.finalize_with_stats(&reference) {
                Ok(m) => Ok(ClassModel::Fitted(m)),
                Err(IpcaError::Pca(e @ PcaError::DegenerateData { .. })) => Ok(ClassModel::Unscoreable {
                    class_id,
                    reason: e.to_string(),
                }),
                Err(e) => Err(PipelineError::Ipca { op: "finalize", source: e }),
            }
        })
        .collect()
}

fn flush(s: &mut ClassStream, batch_rows: usize) -> Result<(), PipelineError> {
    let dim = s.state.dim();
    let needed = s.state.n_components() + 1;
    let rows = s.pending.len() / dim;
    if rows == 0 || (!s.started && rows < needed) {
        return Ok(());
    }
    for chunk in s.pending.chunks(batch_rows.max(needed) * dim) {
        s.state.partial_fit(chunk).map_err(ctx!(Ipca, "partial_fit"))?;
        s.started = true;
    }
    s.pending.clear();
    Ok(())
}

/// Score map, prior prediction and, for OpenFCN, the hard open-set map.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneScores {
    pub scores: ScoreMap,
    pub prior: PriorPrediction,
    pub posterior: Option<OpenSetPrediction>,
    /// Known classes scored `-inf` for lack of a model.
    pub unscoreable: Vec<usize>,
}

pub fn score_scene(scene: &Scene, fitted: &Fitted) -> Result<SceneScores, PipelineError> {
    if scene.class_names() != fitted.class_names.as_slice() {
        return Err(PipelineError::Config("scene classes differ from the fitted model's".into()));
    }
    let p = prepare(scene, fitted.uuc)?;
    let (h, w) = (p.logits.height, p.logits.width);
    match &fitted.models {
        FittedModels::Softmax => {
            let (scores, prior) = score_softmax(&p.logits.data, p.logits.channels, h, w);
            Ok(SceneScores {
                scores,
                prior,
                posterior: None,
                unscoreable: Vec::new(),
            })
        }
        FittedModels::OpenFcn(set) => {
            let out = score_openfcn(&p.logits, set).map_err(ctx!(OpenMax, "openmax_recalibrate"))?;
            Ok(SceneScores {
                scores: out.scores,
                prior: out.prior,
                posterior: Some(out.posterior),
                unscoreable: Vec::new(),
            })
        }
        FittedModels::Pca(models) => {
            let field = fuse_scene(scene, &fitted.fusion).map_err(ctx!(Fusion, "fuse"))?;
            let options = PcsScoreOptions {
                strict: fitted.config.strict,
                z_normalize: fitted.config.z_normalize,
            };
            let out = score_openpcs(&field, &p.prior, models, options).map_err(ctx!(Pca, "ppca_loglik"))?;
            Ok(SceneScores {
                scores: out.scores,
                prior: p.prior,
                posterior: None,
                unscoreable: out.unscoreable,
            })
        }
    }
}

/// Scores every scene, in scene order.
pub fn score_all(scenes: &[Scene], fitted: &Fitted) -> Result<Vec<SceneScores>, PipelineError> {
    scenes.par_iter().map(|s| score_scene(s, fitted)).collect()
}

/// Metrics of one LOCO split, micro-averaged over scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocoReport {
    pub method: Method,
    pub uuc: usize,
    pub uuc_name: String,
    pub id_map: IdMap,
    pub num_scenes: usize,
    pub known_pixels: u64,
    pub unknown_pixels: u64,
    pub auc: f64,
    /// Threshold `-inf`: the closed-set classifier.
    pub closed: OperatingPoint,
    pub calibrations: Vec<Calibration>,
    pub operating_points: Vec<OperatingPoint>,
}

/// Scores plus evaluation labels for one scene.
pub struct EvalInput<'a> {
    pub scores: &'a ScoreMap,
    pub prior: &'a PriorPrediction,
    pub eval_labels: &'a [i32],
}

/// Calibrates thresholds on all scenes jointly and sums confusion matrices
/// over scenes at each operating point.
pub fn evaluate_scenes(inputs: &[EvalInput<'_>], num_known: usize, tprs: &[f64]) -> Result<(Vec<OperatingPoint>, Vec<Calibration>, OperatingPoint, RocCurve), PipelineError> {
    let unknown = num_known as i32;
    let mut all_scores = Vec::new();
    let mut all_unknown = Vec::new();
    for inp in inputs {
        if inp.scores.data.len() != inp.eval_labels.len() || inp.prior.data.len() != inp.eval_labels.len() {
            return Err(PipelineError::Eval {
                op: "evaluate",
                source: EvalError::DimMismatch {
                    expected: inp.eval_labels.len(),
                    got: inp.scores.data.len(),
                },
            });
        }
        for (&s, &l) in inp.scores.data.iter().zip(inp.eval_labels) {
            if l != IGNORE_LABEL {
                all_scores.push(s);
                all_unknown.push(l == unknown);
            }
        }
    }
    let roc = roc_auc(&all_scores, &all_unknown).map_err(ctx!(Eval, "roc_auc"))?;

    let point_at = |threshold: f64, target: Option<f64>| -> Result<OperatingPoint, PipelineError> {
        let cms = inputs
            .par_iter()
            .map(|inp| {
                let pred = apply_threshold(inp.scores, inp.prior, threshold);
                let mut cm = ConfusionMatrix::new(num_known + 1);
                cm.accumulate(&pred.data, inp.eval_labels).map(|_| cm)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(ctx!(Eval, "evaluate"))?;
        let mut total = ConfusionMatrix::new(num_known + 1);
        for cm in &cms {
            total.merge(cm);
        }
        OperatingPoint::from_confusion(total, threshold, target).map_err(ctx!(Eval, "cohen_kappa"))
    };

    let closed = point_at(f64::NEG_INFINITY, None)?;
    let mut calibrations = Vec::with_capacity(tprs.len());
    let mut points = Vec::with_capacity(tprs.len());
    for &tpr in tprs {
        let cal = calibrate_threshold(&all_scores, &all_unknown, tpr).map_err(ctx!(Eval, "calibrate_threshold"))?;
        points.push(point_at(cal.threshold, Some(tpr))?);
        calibrations.push(cal);
    }
    Ok((points, calibrations, closed, roc))
}

/// Builds the LOCO report for scored scenes.
pub fn loco_report(scenes: &[Scene], scored: &[SceneScores], fitted: &Fitted, tprs: &[f64]) -> Result<(LocoReport, RocCurve), PipelineError> {
    let uuc = fitted
        .uuc
        .ok_or_else(|| PipelineError::Config("evaluation needs a held-out class".into()))?;
    if scenes.len() != scored.len() {
        return Err(PipelineError::Config(format!(
            "{} scenes but {} score maps",
            scenes.len(),
            scored.len()
        )));
    }
    let prepared = scenes
        .par_iter()
        .map(|s| prepare(s, Some(uuc)))
        .collect::<Result<Vec<_>, _>>()?;
    let inputs: Vec<EvalInput<'_>> = prepared
        .iter()
        .zip(scored)
        .map(|(p, s)| EvalInput {
            scores: &s.scores,
            prior: &s.prior,
            eval_labels: &p.eval_labels,
        })
        .collect();
    let num_known = fitted.num_known();
    let (operating_points, calibrations, closed, roc) = evaluate_scenes(&inputs, num_known, tprs)?;
    let unknown_pixels = closed.confusion.row_sum(num_known);
    let known_pixels = closed.confusion.total() - unknown_pixels;
    Ok((
        LocoReport {
            method: fitted.method(),
            uuc,
            uuc_name: fitted.class_names[uuc].clone(),
            id_map: fitted.id_map().expect("uuc present"),
            num_scenes: scenes.len(),
            known_pixels,
            unknown_pixels,
            auc: roc.auc,
            closed,
            calibrations,
            operating_points,
        },
        roc,
    ))
}

/// Fit on `fit_scenes`, score and evaluate `eval_scenes`, holding out `uuc`.
pub fn run_loco(
    fit_scenes: &[Scene],
    eval_scenes: &[Scene],
    uuc: usize,
    cfg: &ScorerConfig,
    tprs: &[f64],
) -> Result<(LocoReport, RocCurve), PipelineError> {
    let fitted = fit(fit_scenes, Some(uuc), cfg)?;
    let scored = score_all(eval_scenes, &fitted)?;
    loco_report(eval_scenes, &scored, &fitted, tprs)
}

pub fn default_tprs() -> Vec<f64> {
    DEFAULT_TPR_GRID.to_vec()
}
