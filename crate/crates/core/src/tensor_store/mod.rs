//! Tensor and scene files exchanged between pipeline stages.
//!
//! Every tensor is a standalone NPY file; a scene is a directory holding a
//! `scene.json` manifest next to its layer, logit and label tensors.

mod npy;
mod scene;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use scene::{read_scene, write_scene, MANIFEST_FILE, ActivationLayer, ActivationStack, LayerEntry, Scene, SceneManifest};

/// Label value marking pixels excluded from every fit and metric.
pub const IGNORE_LABEL: i32 = -1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: malformed NPY file: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("{path}: unsupported dtype '{dtype}'")]
    UnsupportedDtype { path: PathBuf, dtype: String },
    #[error("{path}: i64 value {value} does not fit in i32")]
    IntegerOverflow { path: PathBuf, value: i64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: scene manifest missing or unreadable: {reason}")]
    ManifestMissing { path: PathBuf, reason: String },
    #[error("shape mismatch in {what}: {detail}")]
    ShapeMismatch { what: String, detail: String },
    #[error("label {value} out of range for {classes} classes")]
    LabelOutOfRange { value: i32, classes: usize },
    #[error("{what}: expected {expected} tensor")]
    WrongDtype { what: String, expected: &'static str },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense row-major tensor with `f32` or `i32` storage.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl PartialEq for Tensor {
    /// Bitwise comparison, so NaN payloads compare equal to themselves.
    fn eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I32(a), TensorData::I32(b)) => a == b,
            _ => false,
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, StoreError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(StoreError::ShapeMismatch {
                what: "tensor".into(),
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, StoreError> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self, StoreError> {
        Self::new(shape, TensorData::I32(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::I32(_) => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    pub fn into_f32(self) -> Option<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Some(v),
            TensorData::I32(_) => None,
        }
    }
}

/// Reads an NPY file. `f64` data is narrowed to `f32`; `i64` data is narrowed
/// to `i32` and rejected if any value is out of range.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, StoreError> {
    let path = path.as_ref();
    let bytes = npy::read_bytes(path)?;
    let (shape, raw) = npy::decode(&bytes, path)?;
    let data = match raw {
        npy::RawArray::F32(v) => TensorData::F32(v),
        npy::RawArray::I32(v) => TensorData::I32(v),
        npy::RawArray::F64(v) => TensorData::F32(v.into_iter().map(|x| x as f32).collect()),
        npy::RawArray::I64(v) => TensorData::I32(
            v.into_iter()
                .map(|x| {
                    i32::try_from(x).map_err(|_| StoreError::IntegerOverflow {
                        path: path.to_path_buf(),
                        value: x,
                    })
                })
                .collect::<Result<_, _>>()?,
        ),
    };
    Tensor::new(shape, data)
}

/// Writes `t` as an NPY v1.0 file.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<(), StoreError> {
    npy::write_bytes(path.as_ref(), &npy::encode_tensor(t))
}

/// Writes a full-precision `f64` array (used for fitted model parameters).
pub fn write_f64_array(path: impl AsRef<Path>, shape: &[usize], data: &[f64]) -> Result<(), StoreError> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(StoreError::ShapeMismatch {
            what: "f64 array".into(),
            detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
        });
    }
    npy::write_bytes(path.as_ref(), &npy::encode_f64(shape, data))
}

/// Reads an NPY file as `f64` without narrowing. `f32` input is widened.
pub fn read_f64_array(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>), StoreError> {
    let path = path.as_ref();
    let bytes = npy::read_bytes(path)?;
    let (shape, raw) = npy::decode(&bytes, path)?;
    let data = match raw {
        npy::RawArray::F64(v) => v,
        npy::RawArray::F32(v) => v.into_iter().map(f64::from).collect(),
        _ => {
            return Err(StoreError::WrongDtype {
                what: path.display().to_string(),
                expected: "floating-point",
            })
        }
    };
    Ok((shape, data))
}
