//! Deterministic synthetic scenes: class regions on a grid, gaussian
//! per-class activations at several resolutions, and logits derived from
//! the activations.
//!
//! All randomness comes from ChaCha streams keyed by (seed, scene index,
//! purpose, row), so output is independent of evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_store::{ActivationLayer, Scene, StoreError, Tensor, IGNORE_LABEL};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthLayer {
    pub channels: usize,
    pub scale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Vertical stripes, one per class.
    #[default]
    Stripes,
    /// Voronoi cells around random sites, classes assigned round-robin.
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<SynthLayer>,
    /// Distance between class means within each layer, in units of `noise_std`.
    pub separation: f64,
    pub noise_std: f64,
    /// Fraction of pixels whose logits are forced onto a wrong class.
    pub label_noise: f64,
    /// Logits are `-|x - m_c|^2 / (2 sigma^2 T)`, centred per pixel.
    pub logit_temperature: f64,
    pub layout: Layout,
    /// Marks one-pixel borders between regions with the ignore label.
    pub ignore_boundaries: bool,
    /// Explicit fused-space class means (`classes x sum(channels)`); drawn
    /// from the seed when absent.
    pub class_means: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            height: 224,
            width: 224,
            layers: vec![
                SynthLayer { channels: 4, scale: 1 },
                SynthLayer { channels: 8, scale: 2 },
                SynthLayer { channels: 16, scale: 4 },
            ],
            separation: 6.0,
            noise_std: 1.0,
            label_noise: 0.0,
            logit_temperature: 4.0,
            layout: Layout::Stripes,
            ignore_boundaries: false,
            class_means: None,
            seed: 0,
        }
    }
}

// Stream ids; scene index and row are mixed in below.
const STREAM_MEANS: u64 = 1;
const STREAM_LAYOUT: u64 = 2;
const STREAM_LAYER: u64 = 3;
const STREAM_LOGITS: u64 = 4;

fn rng_for(seed: u64, scene: u64, purpose: u64, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scene.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream((purpose << 48) | (item & 0xFFFF_FFFF_FFFF));
    rng
}

impl SynthConfig {
    pub fn feature_dim(&self) -> usize {
        self.layers.iter().map(|l| l.channels).sum()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadConfig(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.height == 0 || self.width == 0 {
            return bad("grid must be non-empty".into());
        }
        if self.layers.is_empty() {
            return bad("at least one activation layer is required".into());
        }
        for l in &self.layers {
            if l.channels == 0 || l.scale == 0 {
                return bad(format!("layer {l:?} must have channels and scale >= 1"));
            }
            if !self.height.is_multiple_of(l.scale) || !self.width.is_multiple_of(l.scale) {
                return bad(format!(
                    "grid {}x{} not divisible by layer scale {}",
                    self.height, self.width, l.scale
                ));
            }
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return bad(format!("separation must be > 0, got {}", self.separation));
        }
        if !(self.noise_std > 0.0) || !(self.logit_temperature > 0.0) {
            return bad("noise_std and logit_temperature must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad(format!("label_noise {} outside [0, 1]", self.label_noise));
        }
        if self.layout == Layout::Stripes && self.width < self.classes {
            return bad("fewer columns than classes for stripe layout".into());
        }
        if let Some(means) = &self.class_means {
            if means.len() != self.classes || means.iter().any(|m| m.len() != self.feature_dim()) {
                return bad("class_means must be classes x feature_dim".into());
            }
        }
        Ok(())
    }

    /// Fused-space class means, each `feature_dim` long.
    pub fn means(&self) -> Result<Vec<Vec<f64>>, SynthError> {
        let means = match &self.class_means {
            Some(m) => m.clone(),
            None => {
                let mut rng = rng_for(self.seed, 0, STREAM_MEANS, 0);
                let radius = self.separation * self.noise_std / std::f64::consts::SQRT_2;
                (0..self.classes)
                    .map(|_| {
                        let mut v = Vec::with_capacity(self.feature_dim());
                        for layer in &self.layers {
                            let dir: Vec<f64> = (0..layer.channels).map(|_| rng.sample(StandardNormal)).collect();
                            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                            v.extend(dir.iter().map(|x| x / norm * radius));
                        }
                        v
                    })
                    .collect()
            }
        };
        for a in 0..means.len() {
            for b in a + 1..means.len() {
                if means[a] == means[b] {
                    return Err(SynthError::BadConfig(format!("class means {a} and {b} coincide")));
                }
            }
        }
        Ok(means)
    }
}

fn layout(cfg: &SynthConfig, scene: u64) -> Vec<usize> {
    let (h, w) = (cfg.height, cfg.width);
    match cfg.layout {
        Layout::Stripes => (0..h * w).map(|i| (i % w) * cfg.classes / w).collect(),
        Layout::Blobs => {
            let mut rng = rng_for(cfg.seed, scene, STREAM_LAYOUT, 0);
            let sites: Vec<(f64, f64, usize)> = (0..cfg.classes * 3)
                .map(|i| (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64, i % cfg.classes))
                .collect();
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
                    sites
                        .iter()
                        .map(|&(sy, sx, c)| ((sy - y).powi(2) + (sx - x).powi(2), c))
                        .min_by(|a, b| a.0.total_cmp(&b.0))
                        .map(|(_, c)| c)
                        .unwrap()
                })
                .collect()
        }
    }
}

/// Generates scene 0 of the configured world.
pub fn generate_scene(cfg: &SynthConfig) -> Result<Scene, SynthError> {
    generate_scene_indexed(cfg, 0)
}

/// Generates scene `index`: same class means for every index, fresh layout
/// (in blob mode) and fresh noise.
pub fn generate_scene_indexed(cfg: &SynthConfig, index: u64) -> Result<Scene, SynthError> {
    cfg.validate()?;
    let means = cfg.means()?;
    let (h, w) = (cfg.height, cfg.width);
    let classes = layout(cfg, index);

    let mut layers = Vec::with_capacity(cfg.layers.len());
    let mut fused_offset = 0;
    // Full-resolution fused features, needed for the logits.
    let dim = cfg.feature_dim();
    let plane = h * w;
    let mut fused = vec![0.0f64; dim * plane];
    for (li, spec) in cfg.layers.iter().enumerate() {
        let (lh, lw, s, c) = (h / spec.scale, w / spec.scale, spec.scale, spec.channels);
        let mut values = vec![0.0f32; c * lh * lw];
        for cy in 0..lh {
            let mut rng = rng_for(cfg.seed, index, STREAM_LAYER, ((li as u64) << 32) | cy as u64);
            for cx in 0..lw {
                let class = classes[(cy * s + s / 2) * w + cx * s + s / 2];
                for ch in 0..c {
                    let z: f64 = rng.sample(StandardNormal);
                    let v = (means[class][fused_offset + ch] + cfg.noise_std * z) as f32;
                    values[(ch * lh + cy) * lw + cx] = v;
                }
            }
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    fused[(fused_offset + ch) * plane + y * w + x] =
                        f64::from(values[(ch * lh + y / s) * lw + x / s]);
                }
            }
        }
        fused_offset += c;
        layers.push(ActivationLayer {
            tensor: Tensor::from_f32(vec![c, lh, lw], values)?,
            scale: s,
        });
    }

    let k = cfg.classes;
    let mut logits = vec![0.0f32; k * plane];
    let scale = 1.0 / (2.0 * cfg.noise_std * cfg.noise_std * cfg.logit_temperature);
    let margin = 0.5;
    let mut l = vec![0.0f64; k];
    for y in 0..h {
        let mut rng = rng_for(cfg.seed, index, STREAM_LOGITS, y as u64);
        for x in 0..w {
            let i = y * w + x;
            for (c, lc) in l.iter_mut().enumerate() {
                let d2: f64 = (0..dim).map(|d| (fused[d * plane + i] - means[c][d]).powi(2)).sum();
                *lc = -d2 * scale;
            }
            // Zero mean across classes, like a trained classifier head.
            let centre = l.iter().sum::<f64>() / k as f64;
            l.iter_mut().for_each(|v| *v -= centre);
            let truth = classes[i];
            let flip = rng.random::<f64>() < cfg.label_noise;
            let wrong = (truth + 1 + rng.random_range(0..k - 1)) % k;
            let target = if flip { wrong } else { truth };
            let best_other = (0..k).filter(|&c| c != target).map(|c| l[c]).fold(f64::NEG_INFINITY, f64::max);
            if l[target] <= best_other {
                l[target] = best_other + margin;
            }
            for c in 0..k {
                logits[c * plane + i] = l[c] as f32;
            }
        }
    }

    let mut labels: Vec<i32> = classes.iter().map(|&c| c as i32).collect();
    if cfg.ignore_boundaries {
        for y in 0..h {
            for x in 0..w {
                let c = classes[y * w + x];
                let right = x + 1 < w && classes[y * w + x + 1] != c;
                let down = y + 1 < h && classes[(y + 1) * w + x] != c;
                if right || down {
                    labels[y * w + x] = IGNORE_LABEL;
                }
            }
        }
    }

    Ok(Scene::new(
        layers,
        Tensor::from_f32(vec![k, h, w], logits)?,
        Tensor::from_i32(vec![h, w], labels)?,
        (0..k).map(|c| format!("class{c}")).collect(),
        format!("synth-{}-{index}", cfg.seed),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::softmax::prior_prediction;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            classes: 2,
            height: 32,
            width: 32,
            separation: 10.0,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn closed_set_accuracy_is_perfect_without_noise() {
        let scene = generate_scene(&small(1)).unwrap();
        let p = prior_prediction(scene.logit_values(), 2, 32, 32);
        let labels = scene.label_values();
        assert!(p.data.iter().zip(labels).all(|(&a, &b)| a as i32 == b));
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&small(5)).unwrap();
        let b = generate_scene(&small(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&small(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_separation_rejected() {
        let cfg = SynthConfig { separation: 0.0, ..small(0) };
        assert!(matches!(generate_scene(&cfg), Err(SynthError::BadConfig(_))));
    }

    #[test]
    fn coincident_means_rejected() {
        let cfg = SynthConfig {
            layers: vec![SynthLayer { channels: 2, scale: 1 }],
            class_means: Some(vec![vec![1.0, 1.0], vec![1.0, 1.0]]),
            ..small(0)
        };
        assert!(matches!(generate_scene(&cfg), Err(SynthError::BadConfig(_))));
    }

    #[test]
    fn label_noise_flips_roughly_that_fraction() {
        let cfg = SynthConfig { label_noise: 0.2, classes: 3, ..small(2) };
        let scene = generate_scene(&cfg).unwrap();
        let p = prior_prediction(scene.logit_values(), 3, 32, 32);
        let wrong = p.data.iter().zip(scene.label_values()).filter(|(&a, &b)| a as i32 != b).count();
        let rate = wrong as f64 / 1024.0;
        assert!((rate - 0.2).abs() < 0.05, "{rate}");
    }

    #[test]
    fn empirical_means_converge() {
        let cfg = SynthConfig {
            classes: 2,
            height: 64,
            width: 64,
            layers: vec![SynthLayer { channels: 3, scale: 1 }],
            seed: 9,
            ..Default::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        let means = cfg.means().unwrap();
        let values = scene.activations()[0].values();
        let labels = scene.label_values();
        let plane = 64 * 64;
        for c in 0..2 {
            let idx: Vec<usize> = (0..plane).filter(|&i| labels[i] == c as i32).collect();
            let n = idx.len() as f64;
            for ch in 0..3 {
                let m = idx.iter().map(|&i| f64::from(values[ch * plane + i])).sum::<f64>() / n;
                assert!((m - means[c][ch]).abs() < 3.0 / n.sqrt(), "class {c} ch {ch}");
            }
        }
    }

    #[test]
    fn blobs_and_boundaries_validate() {
        let cfg = SynthConfig {
            layout: Layout::Blobs,
            ignore_boundaries: true,
            classes: 4,
            ..small(3)
        };
        let scene = generate_scene(&cfg).unwrap();
        assert!(scene.label_values().contains(&IGNORE_LABEL));
    }
}
