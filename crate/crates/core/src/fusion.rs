//! Multi-layer activation fusion and per-class sample extraction.
//!
//! Lower-resolution layers are upsampled to the output grid and stacked
//! along the channel axis, giving one fused vector per output pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maps::PriorPrediction;
use crate::tensor_store::{ActivationStack, Scene, Tensor, IGNORE_LABEL};

/// Default per-class row cap for sample matrices.
pub const DEFAULT_SAMPLE_CAP: usize = 200_000;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("empty fusion spec")]
    EmptySpec,
    #[error("fusion spec references layer {index} but the stack has {len} layers")]
    LayerIndex { index: usize, len: usize },
    #[error("layer {layer}: {h}x{w} upsampled by {scale} does not give {out_h}x{out_w}")]
    ScaleMismatch {
        layer: usize,
        h: usize,
        w: usize,
        scale: usize,
        out_h: usize,
        out_w: usize,
    },
    #[error("layer {layer} contains non-finite activations")]
    NonFinite { layer: usize },
    #[error("map dims {got:?} differ from feature field dims {expected:?}")]
    DimMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("no correctly classified pixels for class {class_id}")]
    NoSamples { class_id: usize },
    #[error("sample cap must be at least 1")]
    ZeroCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer: usize,
    pub scale: usize,
    #[serde(default)]
    pub mode: UpsampleMode,
}

/// Fuses every layer of `scene` at its manifest scale with nearest upsampling.
pub fn default_spec(scene: &Scene) -> Vec<LayerSpec> {
    scene
        .activations()
        .iter()
        .enumerate()
        .map(|(layer, l)| LayerSpec {
            layer,
            scale: l.scale,
            mode: UpsampleMode::Nearest,
        })
        .collect()
}

/// Fused per-pixel features laid out channel-major (`dim x height x width`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub provenance: Vec<LayerSpec>,
}

impl FeatureField {
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Copies the fused vector of pixel `index` (raster order) into `out`.
    #[inline]
    pub fn pixel_into(&self, index: usize, out: &mut [f64]) {
        let plane = self.num_pixels();
        for (d, slot) in out.iter_mut().enumerate().take(self.dim) {
            *slot = self.data[d * plane + index];
        }
    }

    pub fn pixel(&self, index: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.pixel_into(index, &mut v);
        v
    }

    /// Channel plane `d` as a raster-ordered slice.
    pub fn channel(&self, d: usize) -> &[f64] {
        let plane = self.num_pixels();
        &self.data[d * plane..(d + 1) * plane]
    }
}

/// Upsamples `channels x h x w` values by `factor` into a new buffer.
fn upsample_values(src: &[f32], channels: usize, h: usize, w: usize, factor: usize, mode: UpsampleMode, out: &mut [f64]) {
    let (oh, ow) = (h * factor, w * factor);
    debug_assert_eq!(out.len(), channels * oh * ow);
    match mode {
        UpsampleMode::Nearest => {
            for c in 0..channels {
                let plane = &src[c * h * w..(c + 1) * h * w];
                let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
                for y in 0..oh {
                    let sy = y / factor;
                    let row = &plane[sy * w..(sy + 1) * w];
                    for (x, v) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                        *v = f64::from(row[x / factor]);
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            // align_corners = false: output sample i maps to (i + 0.5) / f - 0.5,
            // clamped at the low border like common FCN decoders.
            let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
                (0..n_out)
                    .map(|i| {
                        let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                        let i0 = (src.floor() as usize).min(n_in - 1);
                        let i1 = (i0 + 1).min(n_in - 1);
                        (i0, i1, src - i0 as f64)
                    })
                    .collect()
            };
            let ys = taps(oh, h);
            let xs = taps(ow, w);
            for c in 0..channels {
                let plane = &src[c * h * w..(c + 1) * h * w];
                let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
                for (y, &(y0, y1, ly)) in ys.iter().enumerate() {
                    for (x, &(x0, x1, lx)) in xs.iter().enumerate() {
                        let p = |yy: usize, xx: usize| f64::from(plane[yy * w + xx]);
                        let top = p(y0, x0) * (1.0 - lx) + p(y0, x1) * lx;
                        let bottom = p(y1, x0) * (1.0 - lx) + p(y1, x1) * lx;
                        dst[y * ow + x] = top * (1.0 - ly) + bottom * ly;
                    }
                }
            }
        }
    }
}

/// Upsamples a `C x h x w` tensor by an integer factor.
///
/// # Panics
/// If `factor` is zero or `t` is not a rank-3 `f32` tensor.
pub fn upsample(t: &Tensor, factor: usize, mode: UpsampleMode) -> Tensor {
    assert!(factor >= 1, "upsampling factor must be >= 1");
    let &[c, h, w] = t.shape() else {
        panic!("upsample expects a C x H x W tensor");
    };
    let src = t.as_f32().expect("upsample expects f32 data");
    if factor == 1 {
        return t.clone();
    }
    let mut out = vec![0.0f64; c * h * factor * w * factor];
    upsample_values(src, c, h, w, factor, mode, &mut out);
    Tensor::from_f32(
        vec![c, h * factor, w * factor],
        out.into_iter().map(|v| v as f32).collect(),
    )
    .expect("shape is consistent")
}

/// Concatenates the upsampled layers named by `spec` along the channel axis.
///
/// The output grid is `h * scale` of the first spec entry; every other entry
/// must land on the same grid.
pub fn fuse(stack: &ActivationStack, spec: &[LayerSpec]) -> Result<FeatureField, FusionError> {
    let first = spec.first().ok_or(FusionError::EmptySpec)?;
    let base = stack.get(first.layer).ok_or(FusionError::LayerIndex {
        index: first.layer,
        len: stack.len(),
    })?;
    let (out_h, out_w) = (base.height() * first.scale, base.width() * first.scale);
    fuse_onto(stack, spec, out_h, out_w)
}

/// Fuses a scene's activations, checking the grid against the label map.
pub fn fuse_scene(scene: &Scene, spec: &[LayerSpec]) -> Result<FeatureField, FusionError> {
    fuse_onto(scene.activations(), spec, scene.height(), scene.width())
}

fn fuse_onto(stack: &ActivationStack, spec: &[LayerSpec], out_h: usize, out_w: usize) -> Result<FeatureField, FusionError> {
    if spec.is_empty() {
        return Err(FusionError::EmptySpec);
    }
    let mut dim = 0;
    for s in spec {
        let layer = stack.get(s.layer).ok_or(FusionError::LayerIndex {
            index: s.layer,
            len: stack.len(),
        })?;
        if s.scale == 0 || layer.height() * s.scale != out_h || layer.width() * s.scale != out_w {
            return Err(FusionError::ScaleMismatch {
                layer: s.layer,
                h: layer.height(),
                w: layer.width(),
                scale: s.scale,
                out_h,
                out_w,
            });
        }
        dim += layer.channels();
    }

    let plane = out_h * out_w;
    let mut data = vec![0.0f64; dim * plane];
    let mut offset = 0;
    for s in spec {
        let layer = &stack[s.layer];
        let values = layer.values();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite { layer: s.layer });
        }
        let c = layer.channels();
        let dst = &mut data[offset * plane..(offset + c) * plane];
        upsample_values(values, c, layer.height(), layer.width(), s.scale, s.mode, dst);
        offset += c;
    }
    Ok(FeatureField {
        dim,
        height: out_h,
        width: out_w,
        data,
        provenance: spec.to_vec(),
    })
}

/// Source position of a sampled row: scene index within a multi-scene
/// stream, then pixel row and column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PixelCoord {
    pub scene: u32,
    pub y: u32,
    pub x: u32,
}

/// Row-major `n x dim` matrix of fused vectors for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    pub class_id: usize,
    pub dim: usize,
    pub rows: Vec<f64>,
    pub coords: Vec<PixelCoord>,
}

impl SampleMatrix {
    pub fn new(class_id: usize, dim: usize) -> Self {
        Self {
            class_id,
            dim,
            rows: Vec::new(),
            coords: Vec::new(),
        }
    }

    /// Builds a matrix from raw rows; coordinates are left empty.
    pub fn from_rows(class_id: usize, dim: usize, rows: Vec<f64>) -> Self {
        assert!(dim > 0 && rows.len().is_multiple_of(dim), "rows must be a multiple of dim");
        Self {
            class_id,
            dim,
            rows,
            coords: Vec::new(),
        }
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.rows.chunks_exact(self.dim)
    }
}

/// Seeded reservoir over a stream of candidate pixels (Algorithm R).
///
/// Kept rows are returned in stream order, so a run with fewer candidates
/// than the cap reproduces plain raster order.
#[derive(Debug, Clone)]
pub struct Reservoir {
    class_id: usize,
    dim: usize,
    cap: usize,
    seen: u64,
    rng: ChaCha8Rng,
    slots: Vec<(u64, PixelCoord, Vec<f64>)>,
}

impl Reservoir {
    pub fn new(class_id: usize, dim: usize, cap: usize, seed: u64) -> Result<Self, FusionError> {
        if cap == 0 {
            return Err(FusionError::ZeroCap);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class_id as u64);
        Ok(Self {
            class_id,
            dim,
            cap,
            seen: 0,
            rng,
            slots: Vec::new(),
        })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn offer(&mut self, coord: PixelCoord, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        let seq = self.seen;
        self.seen += 1;
        if self.slots.len() < self.cap {
            self.slots.push((seq, coord, row.to_vec()));
        } else {
            let j = self.rng.random_range(0..=seq);
            if (j as usize) < self.cap {
                self.slots[j as usize] = (seq, coord, row.to_vec());
            }
        }
    }

    /// Offers every pixel of `field` where `predicted == truth == class_id`.
    pub fn offer_field(
        &mut self,
        scene: u32,
        field: &FeatureField,
        predicted: &[u32],
        truth: &[i32],
    ) -> Result<(), FusionError> {
        let dims = (field.height, field.width);
        for len in [predicted.len(), truth.len()] {
            if len != field.num_pixels() {
                return Err(FusionError::DimMismatch {
                    expected: dims,
                    got: (len / field.width.max(1), field.width),
                });
            }
        }
        let mut buf = vec![0.0; field.dim];
        for (i, (&p, &t)) in predicted.iter().zip(truth).enumerate() {
            if t == IGNORE_LABEL || t as usize != self.class_id || p as usize != self.class_id {
                continue;
            }
            field.pixel_into(i, &mut buf);
            let coord = PixelCoord {
                scene,
                y: (i / field.width) as u32,
                x: (i % field.width) as u32,
            };
            self.offer(coord, &buf);
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<SampleMatrix, FusionError> {
        if self.slots.is_empty() {
            return Err(FusionError::NoSamples {
                class_id: self.class_id,
            });
        }
        self.slots.sort_by_key(|(seq, _, _)| *seq);
        let mut m = SampleMatrix::new(self.class_id, self.dim);
        m.rows.reserve(self.slots.len() * self.dim);
        for (_, coord, row) in self.slots {
            m.rows.extend_from_slice(&row);
            m.coords.push(coord);
        }
        Ok(m)
    }
}

/// Collects fused vectors of correctly classified, non-ignored pixels of
/// `class_id`, reservoir-sampled down to `cap` rows.
pub fn gather_class_samples(
    field: &FeatureField,
    predicted: &PriorPrediction,
    truth: &[i32],
    class_id: usize,
    cap: usize,
    seed: u64,
) -> Result<SampleMatrix, FusionError> {
    if (predicted.height, predicted.width) != (field.height, field.width) {
        return Err(FusionError::DimMismatch {
            expected: (field.height, field.width),
            got: (predicted.height, predicted.width),
        });
    }
    let mut reservoir = Reservoir::new(class_id, field.dim, cap, seed)?;
    reservoir.offer_field(0, field, &predicted.data, truth)?;
    reservoir.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::ActivationLayer;

    fn layer(c: usize, h: usize, w: usize, scale: usize, f: impl Fn(usize) -> f32) -> ActivationLayer {
        ActivationLayer {
            tensor: Tensor::from_f32(vec![c, h, w], (0..c * h * w).map(f).collect()).unwrap(),
            scale,
        }
    }

    #[test]
    fn nearest_replicates_constant() {
        let t = Tensor::from_f32(vec![1, 1, 1], vec![5.0]).unwrap();
        let up = upsample(&t, 2, UpsampleMode::Nearest);
        assert_eq!(up.shape(), &[1, 2, 2]);
        assert_eq!(up.as_f32().unwrap(), &[5.0; 4]);
    }

    #[test]
    fn factor_one_is_identity() {
        let t = Tensor::from_f32(vec![2, 2, 3], (0..12).map(|x| x as f32 * 0.3).collect()).unwrap();
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            assert_eq!(upsample(&t, 1, mode), t);
        }
    }

    #[test]
    fn bilinear_matches_direct_formula() {
        // Independent evaluation: weight each source pixel by the tent kernel
        // max(0, 1 - |src - j|) on both axes after clamping the source
        // coordinate into [0, n-1].
        let src = [[1.0f64, 2.0], [3.0, 4.0]];
        let t = Tensor::from_f32(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample(&t, 2, UpsampleMode::Bilinear);
        let got = up.as_f32().unwrap();
        let coord = |i: usize| ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
        let tent = |s: f64, j: usize| (1.0 - (s - j as f64).abs()).max(0.0);
        for y in 0..4 {
            for x in 0..4 {
                let (sy, sx) = (coord(y), coord(x));
                let mut expected = 0.0;
                for (j, row) in src.iter().enumerate() {
                    for (k, v) in row.iter().enumerate() {
                        expected += tent(sy, j) * tent(sx, k) * v;
                    }
                }
                assert!((f64::from(got[y * 4 + x]) - expected).abs() < 1e-6, "({y},{x})");
            }
        }
        // Corners stay pinned; interior samples are quarter-way blends.
        assert_eq!(got[0], 1.0);
        assert_eq!(got[15], 4.0);
        assert!((got[5] - 1.75).abs() < 1e-6);
    }

    #[test]
    fn concatenates_two_constant_layers() {
        let stack = vec![layer(1, 3, 3, 1, |_| 1.0), layer(1, 3, 3, 1, |_| 2.0)];
        let spec = [
            LayerSpec { layer: 0, scale: 1, mode: UpsampleMode::Nearest },
            LayerSpec { layer: 1, scale: 1, mode: UpsampleMode::Nearest },
        ];
        let field = fuse(&stack, &spec).unwrap();
        assert_eq!(field.dim, 2);
        for i in 0..9 {
            assert_eq!(field.pixel(i), vec![1.0, 2.0]);
        }
    }

    #[test]
    fn multi_resolution_dimension_adds_up() {
        // 4 channels at full resolution, 8 at half, 16 at quarter -> 28.
        let stack = vec![
            layer(4, 8, 8, 1, |i| i as f32),
            layer(8, 4, 4, 2, |i| i as f32),
            layer(16, 2, 2, 4, |i| i as f32),
        ];
        let spec: Vec<_> = (0..3)
            .map(|i| LayerSpec { layer: i, scale: 1 << i, mode: UpsampleMode::Nearest })
            .collect();
        let field = fuse(&stack, &spec).unwrap();
        assert_eq!(field.dim, 28);
        assert_eq!((field.height, field.width), (8, 8));
    }

    #[test]
    fn single_layer_is_identity() {
        let stack = vec![layer(3, 2, 4, 1, |i| i as f32 * 0.5)];
        let spec = [LayerSpec { layer: 0, scale: 1, mode: UpsampleMode::Nearest }];
        let field = fuse(&stack, &spec).unwrap();
        let expected: Vec<f64> = stack[0].values().iter().map(|&v| f64::from(v)).collect();
        assert_eq!(field.data, expected);
    }

    #[test]
    fn scale_mismatch_is_reported() {
        let stack = vec![layer(1, 4, 4, 1, |_| 0.0), layer(1, 4, 4, 1, |_| 0.0)];
        let spec = [
            LayerSpec { layer: 0, scale: 1, mode: UpsampleMode::Nearest },
            LayerSpec { layer: 1, scale: 2, mode: UpsampleMode::Nearest },
        ];
        assert!(matches!(fuse(&stack, &spec), Err(FusionError::ScaleMismatch { layer: 1, .. })));
    }

    #[test]
    fn non_finite_activations_rejected() {
        let stack = vec![layer(1, 2, 2, 1, |i| if i == 3 { f32::NAN } else { 0.0 })];
        let spec = [LayerSpec { layer: 0, scale: 1, mode: UpsampleMode::Nearest }];
        assert_eq!(fuse(&stack, &spec), Err(FusionError::NonFinite { layer: 0 }));
    }

    fn field_of(values: Vec<f64>, h: usize, w: usize) -> FeatureField {
        FeatureField { dim: 1, height: h, width: w, data: values, provenance: vec![] }
    }

    #[test]
    fn gathers_all_when_under_cap() {
        let field = field_of((0..6).map(f64::from).collect(), 2, 3);
        let pred = PriorPrediction::new(2, 3, 2, vec![0, 1, 0, 0, 0, 1]);
        let truth = [0, 1, 0, 1, 0, 0];
        let m = gather_class_samples(&field, &pred, &truth, 0, 10, 1).unwrap();
        assert_eq!(m.rows, vec![0.0, 2.0, 4.0]);
        assert_eq!(m.coords[2], PixelCoord { scene: 0, y: 1, x: 1 });
    }

    #[test]
    fn reservoir_is_deterministic_and_capped() {
        let field = field_of((0..100).map(f64::from).collect(), 10, 10);
        let pred = PriorPrediction::new(10, 10, 1, vec![0; 100]);
        let truth = [0; 100];
        let a = gather_class_samples(&field, &pred, &truth, 0, 10, 42).unwrap();
        let b = gather_class_samples(&field, &pred, &truth, 0, 10, 42).unwrap();
        assert_eq!(a.num_rows(), 10);
        assert_eq!(a, b);
        let c = gather_class_samples(&field, &pred, &truth, 0, 10, 43).unwrap();
        assert_ne!(a.rows, c.rows);
    }

    #[test]
    fn ignored_pixels_yield_no_samples() {
        let field = field_of(vec![1.0; 4], 2, 2);
        let pred = PriorPrediction::new(2, 2, 1, vec![0; 4]);
        let truth = [IGNORE_LABEL; 4];
        assert_eq!(
            gather_class_samples(&field, &pred, &truth, 0, 5, 0),
            Err(FusionError::NoSamples { class_id: 0 })
        );
    }
}
