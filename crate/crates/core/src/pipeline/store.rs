//! On-disk layout of fitted models and score maps.
//!
//! Models: `model.json` header; PCA classes add `class{k}_{mean,components,
//! eigenvalues,noise}.npy` (f64). Scores: `scores.json` header plus per-scene
//! `scene{i}_scores.npy` (f32), `scene{i}_prior.npy` (i32) and, for OpenFCN,
//! `scene{i}_posterior.npy`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ctx, Fitted, FittedModels, PipelineError, SceneScores, ScorerConfig};
use crate::fusion::LayerSpec;
use crate::maps::{Method, OpenSetPrediction, PriorPrediction, ScoreMap};
use crate::openmax::WeibullModelSet;
use crate::pca::{ClassModel, PcaModel, ScoreStats};
use crate::tensor_store::{read_f64_array, read_tensor, write_f64_array, write_tensor, Tensor};

pub const MODEL_HEADER: &str = "model.json";
pub const SCORE_HEADER: &str = "scores.json";
const FORMAT: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: u32,
    method: Method,
    uuc: Option<usize>,
    class_names: Vec<String>,
    fusion: Vec<LayerSpec>,
    config: ScorerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    openfcn: Option<WeibullModelSet>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    classes: Vec<ClassEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
enum ClassEntry {
    Fitted {
        class_id: usize,
        dim: usize,
        n_fit: usize,
        score_stats: Option<ScoreStats>,
        mean: String,
        components: String,
        eigenvalues: String,
        noise: String,
    },
    Unscoreable {
        class_id: usize,
        reason: String,
    },
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| PipelineError::Artifact {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(PipelineError::MissingArtifact(path.to_path_buf()))
        }
        Err(e) => {
            return Err(PipelineError::Artifact {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })
        }
    };
    serde_json::from_str(&text).map_err(|e| PipelineError::Artifact {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn artifact_err(path: &Path, detail: impl Into<String>) -> PipelineError {
    PipelineError::Artifact {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Writes `fitted` into the existing directory `dir`.
pub fn save_models(dir: &Path, fitted: &Fitted) -> Result<(), PipelineError> {
    let mut header = ModelHeader {
        format: FORMAT,
        method: fitted.method(),
        uuc: fitted.uuc,
        class_names: fitted.class_names.clone(),
        fusion: fitted.fusion.clone(),
        config: fitted.config.clone(),
        openfcn: None,
        classes: Vec::new(),
    };
    match &fitted.models {
        FittedModels::Softmax => {}
        FittedModels::OpenFcn(set) => header.openfcn = Some(set.clone()),
        FittedModels::Pca(models) => {
            for m in models {
                header.classes.push(match m {
                    ClassModel::Unscoreable { class_id, reason } => ClassEntry::Unscoreable {
                        class_id: *class_id,
                        reason: reason.clone(),
                    },
                    ClassModel::Fitted(pm) => {
                        let k = pm.class_id;
                        let names = [
                            format!("class{k}_mean.npy"),
                            format!("class{k}_components.npy"),
                            format!("class{k}_eigenvalues.npy"),
                            format!("class{k}_noise.npy"),
                        ];
                        let nc = pm.n_components();
                        write_f64_array(dir.join(&names[0]), &[pm.dim], &pm.mean).map_err(ctx!(Store, "write_tensor"))?;
                        write_f64_array(dir.join(&names[1]), &[nc, pm.dim], &pm.components)
                            .map_err(ctx!(Store, "write_tensor"))?;
                        write_f64_array(dir.join(&names[2]), &[nc], &pm.eigenvalues).map_err(ctx!(Store, "write_tensor"))?;
                        write_f64_array(dir.join(&names[3]), &[1], &[pm.noise_variance])
                            .map_err(ctx!(Store, "write_tensor"))?;
                        let [mean, components, eigenvalues, noise] = names;
                        ClassEntry::Fitted {
                            class_id: k,
                            dim: pm.dim,
                            n_fit: pm.n_fit,
                            score_stats: pm.score_stats,
                            mean,
                            components,
                            eigenvalues,
                            noise,
                        }
                    }
                });
            }
        }
    }
    write_json(&dir.join(MODEL_HEADER), &header)
}

fn read_array(dir: &Path, name: &str, shape: &[usize]) -> Result<Vec<f64>, PipelineError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path));
    }
    let (got, data) = read_f64_array(&path).map_err(ctx!(Store, "read_tensor"))?;
    if got != shape {
        return Err(artifact_err(&path, format!("shape {got:?}, expected {shape:?}")));
    }
    Ok(data)
}

pub fn load_models(dir: &Path) -> Result<Fitted, PipelineError> {
    let header_path = dir.join(MODEL_HEADER);
    let h: ModelHeader = read_json(&header_path)?;
    if h.format != FORMAT {
        return Err(artifact_err(&header_path, format!("unsupported format {}", h.format)));
    }
    if h.config.method != h.method {
        return Err(artifact_err(&header_path, "method and config disagree"));
    }
    let models = match h.method {
        Method::Softmax => FittedModels::Softmax,
        Method::Openfcn => FittedModels::OpenFcn(
            h.openfcn
                .ok_or_else(|| artifact_err(&header_path, "openfcn models missing"))?,
        ),
        Method::Openpcs | Method::Openipcs => {
            let mut models = Vec::with_capacity(h.classes.len());
            for entry in h.classes {
                models.push(match entry {
                    ClassEntry::Unscoreable { class_id, reason } => ClassModel::Unscoreable { class_id, reason },
                    ClassEntry::Fitted {
                        class_id,
                        dim,
                        n_fit,
                        score_stats,
                        mean,
                        components,
                        eigenvalues,
                        noise,
                    } => {
                        let eig_path = dir.join(&eigenvalues);
                        if !eig_path.exists() {
                            return Err(PipelineError::MissingArtifact(eig_path));
                        }
                        let (eshape, eigenvalues) = read_f64_array(&eig_path).map_err(ctx!(Store, "read_tensor"))?;
                        let nc = match eshape.as_slice() {
                            [n] => *n,
                            _ => return Err(artifact_err(&eig_path, "eigenvalues must be 1-D")),
                        };
                        ClassModel::Fitted(PcaModel {
                            class_id,
                            dim,
                            mean: read_array(dir, &mean, &[dim])?,
                            components: read_array(dir, &components, &[nc, dim])?,
                            eigenvalues,
                            noise_variance: read_array(dir, &noise, &[1])?[0],
                            n_fit,
                            score_stats,
                        })
                    }
                });
            }
            FittedModels::Pca(models)
        }
    };
    Ok(Fitted {
        config: h.config,
        uuc: h.uuc,
        class_names: h.class_names,
        fusion: h.fusion,
        models,
    })
}

/// Score maps of a set of scenes, as written by `score`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreArtifacts {
    pub method: Method,
    pub uuc: Option<usize>,
    pub class_names: Vec<String>,
    /// Scene names in evaluation order.
    pub scene_names: Vec<String>,
    pub scenes: Vec<SceneScores>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreHeader {
    format: u32,
    method: Method,
    uuc: Option<usize>,
    class_names: Vec<String>,
    num_known: usize,
    scenes: Vec<ScoreEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreEntry {
    name: String,
    height: usize,
    width: usize,
    scores: String,
    prior: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    posterior: Option<String>,
    #[serde(default)]
    unscoreable: Vec<usize>,
}

/// Maps finite scores linearly onto 1..=255; `-inf` and NaN become 0.
fn pgm_bytes(map: &ScoreMap) -> Vec<u8> {
    let finite = map.data.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.data.iter().map(|&v| {
        if !v.is_finite() {
            if v == f64::INFINITY {
                255
            } else {
                0
            }
        } else if hi > lo {
            (1.0 + 254.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            128
        }
    }));
    out
}

/// Writes score maps into the existing directory `dir`.
pub fn save_scores(dir: &Path, art: &ScoreArtifacts, pgm: bool) -> Result<(), PipelineError> {
    let num_known = art.class_names.len() - usize::from(art.uuc.is_some());
    let mut entries = Vec::with_capacity(art.scenes.len());
    for (i, (s, name)) in art.scenes.iter().zip(&art.scene_names).enumerate() {
        let (h, w) = (s.scores.height, s.scores.width);
        let stem = format!("scene{i:04}");
        let scores = format!("{stem}_scores.npy");
        let prior = format!("{stem}_prior.npy");
        let values: Vec<f32> = s.scores.data.iter().map(|&v| v as f32).collect();
        let t = Tensor::from_f32(vec![h, w], values).map_err(ctx!(Store, "write_tensor"))?;
        write_tensor(dir.join(&scores), &t).map_err(ctx!(Store, "write_tensor"))?;
        let t = Tensor::from_i32(vec![h, w], s.prior.data.iter().map(|&c| c as i32).collect())
            .map_err(ctx!(Store, "write_tensor"))?;
        write_tensor(dir.join(&prior), &t).map_err(ctx!(Store, "write_tensor"))?;
        let posterior = match &s.posterior {
            Some(p) => {
                let name = format!("{stem}_posterior.npy");
                let t = Tensor::from_i32(vec![h, w], p.data.iter().map(|&c| c as i32).collect())
                    .map_err(ctx!(Store, "write_tensor"))?;
                write_tensor(dir.join(&name), &t).map_err(ctx!(Store, "write_tensor"))?;
                Some(name)
            }
            None => None,
        };
        if pgm {
            let path = dir.join(format!("{stem}_scores.pgm"));
            fs::write(&path, pgm_bytes(&s.scores)).map_err(|e| artifact_err(&path, e.to_string()))?;
        }
        entries.push(ScoreEntry {
            name: name.clone(),
            height: h,
            width: w,
            scores,
            prior,
            posterior,
            unscoreable: s.unscoreable.clone(),
        });
    }
    write_json(
        &dir.join(SCORE_HEADER),
        &ScoreHeader {
            format: FORMAT,
            method: art.method,
            uuc: art.uuc,
            class_names: art.class_names.clone(),
            num_known,
            scenes: entries,
        },
    )
}

fn read_plane(dir: &Path, name: &str, h: usize, w: usize) -> Result<Tensor, PipelineError> {
    let path: PathBuf = dir.join(name);
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path));
    }
    let t = read_tensor(&path).map_err(ctx!(Store, "read_tensor"))?;
    if t.shape() != [h, w] {
        return Err(artifact_err(&path, format!("shape {:?}, expected [{h}, {w}]", t.shape())));
    }
    Ok(t)
}

fn class_plane(t: &Tensor, path: &Path, limit: usize) -> Result<Vec<u32>, PipelineError> {
    let data = t.as_i32().ok_or_else(|| artifact_err(path, "expected int32 map"))?;
    data.iter()
        .map(|&c| {
            u32::try_from(c)
                .ok()
                .filter(|&c| c as usize <= limit)
                .ok_or_else(|| artifact_err(path, format!("class id {c} out of range")))
        })
        .collect()
}

pub fn load_scores(dir: &Path) -> Result<ScoreArtifacts, PipelineError> {
    let header_path = dir.join(SCORE_HEADER);
    let h: ScoreHeader = read_json(&header_path)?;
    if h.format != FORMAT {
        return Err(artifact_err(&header_path, format!("unsupported format {}", h.format)));
    }
    let mut scenes = Vec::with_capacity(h.scenes.len());
    let mut scene_names = Vec::with_capacity(h.scenes.len());
    for e in h.scenes {
        let st = read_plane(dir, &e.scores, e.height, e.width)?;
        let values = st
            .as_f32()
            .ok_or_else(|| artifact_err(&dir.join(&e.scores), "expected float32 scores"))?
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let pt = read_plane(dir, &e.prior, e.height, e.width)?;
        let prior = class_plane(&pt, &dir.join(&e.prior), h.num_known.saturating_sub(1))?;
        let posterior = match &e.posterior {
            Some(name) => {
                let t = read_plane(dir, name, e.height, e.width)?;
                Some(OpenSetPrediction {
                    height: e.height,
                    width: e.width,
                    num_known: h.num_known,
                    data: class_plane(&t, &dir.join(name), h.num_known)?,
                    threshold: f64::NAN,
                    method: Some(h.method),
                })
            }
            None => None,
        };
        scenes.push(SceneScores {
            scores: ScoreMap::new(e.height, e.width, values),
            prior: PriorPrediction::new(e.height, e.width, h.num_known, prior),
            posterior,
            unscoreable: e.unscoreable,
        });
        scene_names.push(e.name);
    }
    Ok(ScoreArtifacts {
        method: h.method,
        uuc: h.uuc,
        class_names: h.class_names,
        scene_names,
        scenes,
    })
}
