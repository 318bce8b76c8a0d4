use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_tensor, write_tensor, StoreError, Tensor, IGNORE_LABEL};

pub const MANIFEST_FILE: &str = "scene.json";

/// One entry of the manifest's `layers` list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub file: String,
    pub scale: usize,
}

/// On-disk `scene.json`. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub layers: Vec<LayerEntry>,
    pub logits: String,
    pub labels: String,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_id: Option<String>,
}

/// A `C x h x w` activation tensor and its upsampling factor to the output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationLayer {
    pub tensor: Tensor,
    pub scale: usize,
}

impl ActivationLayer {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn values(&self) -> &[f32] {
        self.tensor.as_f32().expect("activation layers are f32")
    }
}

pub type ActivationStack = Vec<ActivationLayer>;

/// One patch: activations, logits and labels, validated on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    activations: ActivationStack,
    logits: Tensor,
    labels: Tensor,
    class_names: Vec<String>,
    patch_id: String,
}

fn mismatch(what: impl Into<String>, detail: impl Into<String>) -> StoreError {
    StoreError::ShapeMismatch {
        what: what.into(),
        detail: detail.into(),
    }
}

impl Scene {
    pub fn new(
        activations: ActivationStack,
        logits: Tensor,
        labels: Tensor,
        class_names: Vec<String>,
        patch_id: impl Into<String>,
    ) -> Result<Self, StoreError> {
        let label_values = labels.as_i32().ok_or_else(|| StoreError::WrongDtype {
            what: "labels".into(),
            expected: "i32",
        })?;
        let &[height, width] = labels.shape() else {
            return Err(mismatch("labels", format!("expected rank 2, got {:?}", labels.shape())));
        };
        if logits.as_f32().is_none() {
            return Err(StoreError::WrongDtype {
                what: "logits".into(),
                expected: "f32",
            });
        }
        let &[channels, lh, lw] = logits.shape() else {
            return Err(mismatch("logits", format!("expected rank 3, got {:?}", logits.shape())));
        };
        if (lh, lw) != (height, width) {
            return Err(mismatch(
                "logits",
                format!("spatial dims {lh}x{lw} differ from labels {height}x{width}"),
            ));
        }
        if channels != class_names.len() || channels == 0 {
            return Err(mismatch(
                "logits",
                format!("{channels} channels for {} class names", class_names.len()),
            ));
        }
        for (i, layer) in activations.iter().enumerate() {
            let what = format!("layer {i}");
            if layer.tensor.as_f32().is_none() {
                return Err(StoreError::WrongDtype { what, expected: "f32" });
            }
            let &[_, h, w] = layer.tensor.shape() else {
                return Err(mismatch(what, format!("expected rank 3, got {:?}", layer.tensor.shape())));
            };
            if layer.scale == 0 || h * layer.scale != height || w * layer.scale != width {
                return Err(mismatch(
                    what,
                    format!(
                        "{h}x{w} at scale {} does not cover output {height}x{width}",
                        layer.scale
                    ),
                ));
            }
        }
        if let Some(&bad) = label_values
            .iter()
            .find(|&&v| v < IGNORE_LABEL || v >= channels as i32)
        {
            return Err(StoreError::LabelOutOfRange {
                value: bad,
                classes: channels,
            });
        }
        Ok(Self {
            activations,
            logits,
            labels,
            class_names,
            patch_id: patch_id.into(),
        })
    }

    pub fn activations(&self) -> &ActivationStack {
        &self.activations
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn logit_values(&self) -> &[f32] {
        self.logits.as_f32().expect("validated")
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    pub fn label_values(&self) -> &[i32] {
        self.labels.as_i32().expect("validated")
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn patch_id(&self) -> &str {
        &self.patch_id
    }

    pub fn height(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.labels.shape()[1]
    }
}

/// Reads and validates the scene stored in `dir`.
pub fn read_scene(dir: impl AsRef<Path>) -> Result<Scene, StoreError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| StoreError::ManifestMissing {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let manifest: SceneManifest =
        serde_json::from_str(&text).map_err(|e| StoreError::ManifestMissing {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;

    let activations = manifest
        .layers
        .iter()
        .map(|entry| {
            Ok(ActivationLayer {
                tensor: read_tensor(dir.join(&entry.file))?,
                scale: entry.scale,
            })
        })
        .collect::<Result<Vec<_>, StoreError>>()?;
    let logits = read_tensor(dir.join(&manifest.logits))?;
    let labels = read_tensor(dir.join(&manifest.labels))?;
    let patch_id = manifest.patch_id.clone().unwrap_or_else(|| {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    Scene::new(activations, logits, labels, manifest.classes, patch_id)
}

/// Writes `scene` into `dir` (created if needed) with a fresh manifest.
pub fn write_scene(dir: impl AsRef<Path>, scene: &Scene) -> Result<(), StoreError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| StoreError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut layers = Vec::with_capacity(scene.activations.len());
    for (i, layer) in scene.activations.iter().enumerate() {
        let file = format!("layer{i}.npy");
        write_tensor(dir.join(&file), &layer.tensor)?;
        layers.push(LayerEntry {
            file,
            scale: layer.scale,
        });
    }
    write_tensor(dir.join("logits.npy"), &scene.logits)?;
    write_tensor(dir.join("labels.npy"), &scene.labels)?;
    let manifest = SceneManifest {
        layers,
        logits: "logits.npy".into(),
        labels: "labels.npy".into(),
        classes: scene.class_names.clone(),
        patch_id: Some(scene.patch_id.clone()),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|source| StoreError::Io { path, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scene() -> Scene {
        let layer0 = ActivationLayer {
            tensor: Tensor::from_f32(vec![2, 4, 4], (0..32).map(|x| x as f32).collect()).unwrap(),
            scale: 1,
        };
        let layer1 = ActivationLayer {
            tensor: Tensor::from_f32(vec![3, 2, 2], vec![0.5; 12]).unwrap(),
            scale: 2,
        };
        let logits = Tensor::from_f32(vec![2, 4, 4], vec![0.0; 32]).unwrap();
        let labels = Tensor::from_i32(vec![4, 4], vec![0, 1, -1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1]).unwrap();
        Scene::new(vec![layer0, layer1], logits, labels, vec!["a".into(), "b".into()], "p0").unwrap()
    }

    #[test]
    fn write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = tiny_scene();
        write_scene(dir.path(), &scene).unwrap();
        assert_eq!(read_scene(dir.path()).unwrap(), scene);
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_scene(dir.path()), Err(StoreError::ManifestMissing { .. })));
    }

    #[test]
    fn wrong_scale_reports_layer() {
        let dir = tempfile::tempdir().unwrap();
        write_scene(dir.path(), &tiny_scene()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut manifest: SceneManifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        manifest.layers[0].scale = 2;
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        match read_scene(dir.path()) {
            Err(StoreError::ShapeMismatch { what, .. }) => assert_eq!(what, "layer 0"),
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::from_f32(vec![5, 1, 2], vec![0.0; 10]).unwrap();
        let labels = Tensor::from_i32(vec![1, 2], vec![0, 9]).unwrap();
        let names = (0..5).map(|i| i.to_string()).collect();
        let err = Scene::new(vec![], logits, labels, names, "x").unwrap_err();
        assert!(matches!(err, StoreError::LabelOutOfRange { value: 9, classes: 5 }));
    }

    #[test]
    fn logits_must_match_labels() {
        let logits = Tensor::from_f32(vec![2, 2, 2], vec![0.0; 8]).unwrap();
        let labels = Tensor::from_i32(vec![2, 3], vec![0; 6]).unwrap();
        let err = Scene::new(vec![], logits, labels, vec!["a".into(), "b".into()], "x").unwrap_err();
        assert!(matches!(err, StoreError::ShapeMismatch { .. }));
    }
}
