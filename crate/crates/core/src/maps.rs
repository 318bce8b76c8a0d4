//! Per-pixel maps shared by every scorer: knownness scores, prior
//! (closed-set) predictions and open-set predictions.

use serde::{Deserialize, Serialize};

/// Knownness score per pixel. Higher means more in-distribution; pixels
/// that cannot be scored carry `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(height * width, data.len(), "score map dims");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Closed-set argmax prediction over the known classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriorPrediction {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub data: Vec<u32>,
}

impl PriorPrediction {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<u32>) -> Self {
        assert_eq!(height * width, data.len(), "prediction dims");
        debug_assert!(data.iter().all(|&c| (c as usize) < num_classes));
        Self {
            height,
            width,
            num_classes,
            data,
        }
    }
}

/// Which scorer produced a map or prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Softmax,
    Openfcn,
    Openpcs,
    Openipcs,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Softmax, Method::Openfcn, Method::Openpcs, Method::Openipcs];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Softmax => "softmax",
            Method::Openfcn => "openfcn",
            Method::Openpcs => "openpcs",
            Method::Openipcs => "openipcs",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method '{s}' (expected softmax, openfcn, openpcs or openipcs)"))
    }
}

/// Open-set labels: `0..num_known` for known classes, `num_known` for UNKNOWN.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetPrediction {
    pub height: usize,
    pub width: usize,
    pub num_known: usize,
    pub data: Vec<u32>,
    pub threshold: f64,
    pub method: Option<Method>,
}

impl OpenSetPrediction {
    pub fn unknown_label(&self) -> u32 {
        self.num_known as u32
    }
}

/// Channel-major `C x H x W` logits of the known classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl LogitMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(channels * height * width, data.len(), "logit map dims");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn from_scene(scene: &crate::tensor_store::Scene) -> Self {
        Self::new(
            scene.num_classes(),
            scene.height(),
            scene.width(),
            scene.logit_values().to_vec(),
        )
    }

    /// Drops channel `c`, as for a network that never saw that class.
    pub fn without_channel(&self, c: usize) -> Self {
        assert!(c < self.channels && self.channels > 1);
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity((self.channels - 1) * plane);
        for k in (0..self.channels).filter(|&k| k != c) {
            data.extend_from_slice(&self.data[k * plane..(k + 1) * plane]);
        }
        Self::new(self.channels - 1, self.height, self.width, data)
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Copies the logit vector of pixel `index` into `out` as `f64`.
    #[inline]
    pub fn pixel_into(&self, index: usize, out: &mut [f64]) {
        let plane = self.num_pixels();
        for (c, slot) in out.iter_mut().enumerate().take(self.channels) {
            *slot = f64::from(self.data[c * plane + index]);
        }
    }
}
