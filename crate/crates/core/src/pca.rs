//! Per-class PCA density models over fused features.
//!
//! Each model is a probabilistic PCA gaussian: covariance
//! `C = sum_i (lambda_i - s2) v_i v_i^T + s2 I`, evaluated through its
//! eigen-structure so a log-density costs `O(D * k)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FeatureField, SampleMatrix};
use crate::linalg::{dot, fix_sign, right_singular};
use crate::maps::{PriorPrediction, ScoreMap};

pub const DEFAULT_COMPONENTS: usize = 16;

/// Relative eigenvalue floor applied before logs and inversions.
pub const EIGEN_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PcaError {
    #[error("class {class_id}: need at least 2 samples, got {got}")]
    InsufficientSamples { class_id: usize, got: usize },
    #[error("class {class_id}: all samples identical, covariance is zero")]
    DegenerateData { class_id: usize },
    #[error("requested zero principal components")]
    ZeroComponents,
    #[error("class {class_id}: covariance is not positive definite")]
    SingularModel { class_id: usize },
    #[error("no usable model for class {class_id}")]
    ModelMissing { class_id: usize },
    #[error("dimension mismatch: model has {model}, input has {input}")]
    DimMismatch { model: usize, input: usize },
}

/// Mean and standard deviation of training log-likelihoods, for optional
/// per-class z-normalization of scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub class_id: usize,
    pub dim: usize,
    pub mean: Vec<f64>,
    /// `n_comp x dim`, row-major, orthonormal rows.
    pub components: Vec<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub noise_variance: f64,
    pub n_fit: usize,
    pub score_stats: Option<ScoreStats>,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.dim..(i + 1) * self.dim]
    }

    /// Sum of kept eigenvalues plus the isotropic remainder.
    pub fn total_variance(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() + (self.dim - self.n_components()) as f64 * self.noise_variance
    }

    /// Eigenvalues and noise variance after the relative floor.
    pub fn regularized(&self) -> (Vec<f64>, f64) {
        let largest = self.eigenvalues.first().copied().unwrap_or(0.0).max(self.noise_variance);
        let floor = EIGEN_FLOOR * largest;
        let eig = self.eigenvalues.iter().map(|&l| l.max(floor)).collect();
        (eig, self.noise_variance.max(floor))
    }

    /// Projection `components . (x - mean)`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        (0..self.n_components()).map(|i| dot(self.component(i), &centered)).collect()
    }

    /// Maps a projection back into feature space.
    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (i, &zi) in z.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.component(i)) {
                *o += zi * v;
            }
        }
        out
    }

    /// Pre-computes the per-model constants used in scoring.
    pub fn scorer(&self) -> Result<PcaScorer<'_>, PcaError> {
        let (eig, s2) = self.regularized();
        let k = self.n_components();
        let largest = eig.first().copied().unwrap_or(s2).max(s2);
        if !(largest > 0.0) || !largest.is_finite() || (k < self.dim && !(s2 > 0.0)) {
            return Err(PcaError::SingularModel {
                class_id: self.class_id,
            });
        }
        let mut log_det: f64 = eig.iter().map(|l| l.ln()).sum();
        if k < self.dim {
            log_det += (self.dim - k) as f64 * s2.ln();
        }
        Ok(PcaScorer {
            model: self,
            inv_eig: eig.iter().map(|l| 1.0 / l).collect(),
            inv_noise: if k < self.dim { 1.0 / s2 } else { 0.0 },
            constant: -0.5 * (self.dim as f64 * (2.0 * PI).ln() + log_det),
        })
    }
}

/// Model plus cached inverse eigenvalues and normalizing constant.
pub struct PcaScorer<'a> {
    model: &'a PcaModel,
    inv_eig: Vec<f64>,
    inv_noise: f64,
    constant: f64,
}

impl PcaScorer<'_> {
    /// Natural-log density at `x`. `scratch` must hold `dim` values.
    #[inline]
    pub fn loglik_with(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let m = self.model;
        let mut norm2 = 0.0;
        for ((s, a), mu) in scratch.iter_mut().zip(x).zip(&m.mean) {
            *s = a - mu;
            norm2 += *s * *s;
        }
        let mut proj2 = 0.0;
        let mut maha = 0.0;
        for (i, inv) in self.inv_eig.iter().enumerate() {
            let p = dot(m.component(i), scratch);
            proj2 += p * p;
            maha += p * p * inv;
        }
        maha += (norm2 - proj2).max(0.0) * self.inv_noise;
        self.constant - 0.5 * maha
    }

    pub fn loglik(&self, x: &[f64]) -> f64 {
        let mut scratch = vec![0.0; self.model.dim];
        self.loglik_with(x, &mut scratch)
    }
}

/// Log-density of `x` under the model's gaussian.
pub fn ppca_loglik(model: &PcaModel, x: &[f64]) -> Result<f64, PcaError> {
    if x.len() != model.dim {
        return Err(PcaError::DimMismatch {
            model: model.dim,
            input: x.len(),
        });
    }
    Ok(model.scorer()?.loglik(x))
}

/// Assembles a model from sorted singular values / vectors of a centered
/// matrix with `n` rows and a known total variance.
pub(crate) fn model_from_svd(
    class_id: usize,
    mean: Vec<f64>,
    n: usize,
    n_comp: usize,
    singular: &[f64],
    mut vectors: Vec<Vec<f64>>,
    total_variance: f64,
) -> PcaModel {
    let dim = mean.len();
    let k = n_comp.min(n - 1).min(dim).min(vectors.len());
    let denom = (n - 1) as f64;
    let eigenvalues: Vec<f64> = singular[..k].iter().map(|s| s * s / denom).collect();
    let kept: f64 = eigenvalues.iter().sum();
    let noise_variance = if k < dim {
        ((total_variance - kept) / (dim - k) as f64).max(0.0)
    } else {
        0.0
    };
    let mut components = Vec::with_capacity(k * dim);
    for v in vectors.iter_mut().take(k) {
        fix_sign(v);
        components.extend_from_slice(v);
    }
    PcaModel {
        class_id,
        dim,
        mean,
        components,
        eigenvalues,
        noise_variance,
        n_fit: n,
        score_stats: None,
    }
}

/// Fits a PCA model to `samples`, keeping `min(n_comp, n - 1, dim)`
/// components.
///
/// Rows are put into a canonical order first, so the result does not depend
/// on the order samples were collected in.
pub fn fit_pca(samples: &SampleMatrix, n_comp: usize) -> Result<PcaModel, PcaError> {
    let class_id = samples.class_id;
    let n = samples.num_rows();
    let dim = samples.dim;
    if n_comp == 0 {
        return Err(PcaError::ZeroComponents);
    }
    if n < 2 {
        return Err(PcaError::InsufficientSamples { class_id, got: n });
    }
    let first = samples.row(0);
    if samples.iter_rows().all(|r| r == first) {
        return Err(PcaError::DegenerateData { class_id });
    }

    let mut rows: Vec<&[f64]> = samples.iter_rows().collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut centered = Vec::with_capacity(n * dim);
    let mut sum_sq = 0.0;
    for r in &rows {
        for (v, m) in r.iter().zip(&mean) {
            let c = v - m;
            sum_sq += c * c;
            centered.push(c);
        }
    }
    if sum_sq == 0.0 {
        return Err(PcaError::DegenerateData { class_id });
    }
    let (singular, vectors) = right_singular(n, dim, &centered);
    let mut model = model_from_svd(
        class_id,
        mean,
        n,
        n_comp,
        &singular,
        vectors,
        sum_sq / (n - 1) as f64,
    );
    model.score_stats = training_stats(&model, samples);
    Ok(model)
}

/// Mean / std of the training log-likelihoods (None if the model is
/// unscoreable or the spread is zero).
pub(crate) fn training_stats(model: &PcaModel, samples: &SampleMatrix) -> Option<ScoreStats> {
    let scorer = model.scorer().ok()?;
    let mut scratch = vec![0.0; model.dim];
    let mut values: Vec<f64> = samples.iter_rows().map(|r| scorer.loglik_with(r, &mut scratch)).collect();
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (var > 0.0).then(|| ScoreStats { mean, std: var.sqrt() })
}

/// Fitted per-class model, or the reason the class cannot be scored.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassModel {
    Fitted(PcaModel),
    Unscoreable { class_id: usize, reason: String },
}

impl ClassModel {
    pub fn fitted(&self) -> Option<&PcaModel> {
        match self {
            ClassModel::Fitted(m) => Some(m),
            ClassModel::Unscoreable { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PcsScoreOptions {
    /// Fail on classes without a model instead of scoring them `-inf`.
    pub strict: bool,
    /// Per-class z-normalization using training log-likelihood statistics.
    pub z_normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcsScoreOutput {
    pub scores: ScoreMap,
    /// Classes that appeared in the prior but had no usable model.
    pub unscoreable: Vec<usize>,
}

/// Scores each pixel by the log-likelihood of its fused vector under the
/// model of its predicted class.
pub fn score_openpcs(
    field: &FeatureField,
    prior: &PriorPrediction,
    models: &[ClassModel],
    options: PcsScoreOptions,
) -> Result<PcsScoreOutput, PcaError> {
    let plane = field.num_pixels();
    assert_eq!(prior.data.len(), plane, "prior prediction dims");

    let mut scorers = Vec::with_capacity(models.len());
    for m in models {
        let s = match m.fitted() {
            Some(model) if model.dim != field.dim => {
                return Err(PcaError::DimMismatch {
                    model: model.dim,
                    input: field.dim,
                })
            }
            Some(model) => match model.scorer() {
                Ok(s) => Some(s),
                Err(e) if options.strict => return Err(e),
                Err(_) => None,
            },
            None => None,
        };
        scorers.push(s);
    }

    let mut present = vec![false; prior.num_classes.max(models.len())];
    for &c in &prior.data {
        present[c as usize] = true;
    }
    let mut unscoreable = Vec::new();
    for (c, &p) in present.iter().enumerate() {
        if p && scorers.get(c).is_none_or(|s| s.is_none()) {
            if options.strict {
                return Err(PcaError::ModelMissing { class_id: c });
            }
            unscoreable.push(c);
        }
    }

    let mut scores = vec![f64::NEG_INFINITY; plane];
    let mut x = vec![0.0; field.dim];
    let mut scratch = vec![0.0; field.dim];
    for (i, (score, &c)) in scores.iter_mut().zip(&prior.data).enumerate() {
        let Some(Some(scorer)) = scorers.get(c as usize) else {
            continue;
        };
        field.pixel_into(i, &mut x);
        let ll = scorer.loglik_with(&x, &mut scratch);
        *score = match (options.z_normalize, scorer.model.score_stats) {
            (true, Some(st)) => (ll - st.mean) / st.std,
            _ => ll,
        };
    }
    Ok(PcsScoreOutput {
        scores: ScoreMap::new(field.height, field.width, scores),
        unscoreable,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Dense reference: log N(x; mean, C) with C assembled explicitly.
    pub(crate) fn dense_loglik(model: &PcaModel, x: &[f64]) -> f64 {
        let d = model.dim;
        let (eig, s2) = model.regularized();
        let mut c = DMatrix::<f64>::identity(d, d) * if model.n_components() < d { s2 } else { 0.0 };
        for (i, l) in eig.iter().enumerate() {
            let v = DVector::from_row_slice(model.component(i));
            let coef = if model.n_components() < d { l - s2 } else { *l };
            c += &v * v.transpose() * coef;
        }
        let chol = c.clone().cholesky().expect("positive definite");
        let diff = DVector::from_iterator(d, x.iter().zip(&model.mean).map(|(a, m)| a - m));
        let sol = chol.solve(&diff);
        let maha = diff.dot(&sol);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (d as f64 * (2.0 * PI).ln() + log_det + maha)
    }

    fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scales: &[f64]) -> Vec<f64> {
        (0..n * d)
            .map(|i| rng.sample::<f64, _>(StandardNormal) * scales[i % d])
            .collect()
    }

    #[test]
    fn line_samples_give_diagonal_component() {
        // Points t * (1, 1) with t in {-1, 0, 1}: variance along (1,1)/sqrt2
        // is sum(2 t^2) / (n - 1) = 4 / 2 = 2.
        let rows = vec![-1.0, -1.0, 0.0, 0.0, 1.0, 1.0];
        let m = fit_pca(&SampleMatrix::from_rows(0, 2, rows), 1).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((m.component(0)[0] - h).abs() < 1e-12);
        assert!((m.component(0)[1] - h).abs() < 1e-12);
        assert!((m.eigenvalues[0] - 2.0).abs() < 1e-12);
        assert!(m.noise_variance.abs() < 1e-12);
    }

    #[test]
    fn full_rank_reconstruction_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = gaussian_rows(&mut rng, 50, 4, &[1.0, 2.0, 0.5, 3.0]);
        let samples = SampleMatrix::from_rows(0, 4, rows);
        let m = fit_pca(&samples, 4).unwrap();
        assert_eq!(m.noise_variance, 0.0);
        for r in samples.iter_rows() {
            let back = m.reconstruct(&m.project(r));
            for (a, b) in back.iter().zip(r) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn component_count_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows = gaussian_rows(&mut rng, 10, 28, &[1.0; 28]);
        let m = fit_pca(&SampleMatrix::from_rows(0, 28, rows), 50).unwrap();
        assert_eq!(m.n_components(), 9);
    }

    #[test]
    fn fit_errors() {
        let one = SampleMatrix::from_rows(2, 3, vec![1.0, 2.0, 3.0]);
        assert_eq!(fit_pca(&one, 2), Err(PcaError::InsufficientSamples { class_id: 2, got: 1 }));
        let same = SampleMatrix::from_rows(1, 2, vec![0.1, 0.7, 0.1, 0.7, 0.1, 0.7]);
        assert_eq!(fit_pca(&same, 1), Err(PcaError::DegenerateData { class_id: 1 }));
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows = gaussian_rows(&mut rng, 200, 6, &[3.0, 2.0, 1.5, 1.0, 0.5, 0.2]);
        let m = fit_pca(&SampleMatrix::from_rows(0, 6, rows), 3).unwrap();
        assert!(m.project(&m.mean).iter().all(|v| *v == 0.0));

        let x: Vec<f64> = m.mean.iter().zip(m.component(0)).map(|(a, b)| a + b).collect();
        let p = m.project(&x);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12 && p[2].abs() < 1e-12);

        let x: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal) * 4.0).collect();
        let back = m.reconstruct(&m.project(&x));
        let residual: Vec<f64> = x.iter().zip(&back).map(|(a, b)| a - b).collect();
        for i in 0..3 {
            assert!(dot(m.component(i), &residual).abs() < 1e-8);
        }
    }

    #[test]
    fn isotropic_standard_normal_at_mean() {
        let m = PcaModel {
            class_id: 0,
            dim: 2,
            mean: vec![0.3, -0.2],
            components: vec![1.0, 0.0],
            eigenvalues: vec![1.0],
            noise_variance: 1.0,
            n_fit: 10,
            score_stats: None,
        };
        let ll = ppca_loglik(&m, &[0.3, -0.2]).unwrap();
        assert!((ll - (-(2.0 * PI).ln())).abs() < 1e-12);
        assert!((ll + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn loglik_at_mean_is_normalizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = gaussian_rows(&mut rng, 300, 5, &[2.0, 1.0, 1.0, 0.5, 0.3]);
        let m = fit_pca(&SampleMatrix::from_rows(0, 5, rows), 2).unwrap();
        let log_det: f64 = m.eigenvalues.iter().map(|l| l.ln()).sum::<f64>() + 3.0 * m.noise_variance.ln();
        let expected = -0.5 * (5.0 * (2.0 * PI).ln() + log_det);
        assert!((ppca_loglik(&m, &m.mean).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn matches_dense_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for d in 1..=6 {
            let scales: Vec<f64> = (0..d).map(|i| 0.3 + i as f64).collect();
            let rows = gaussian_rows(&mut rng, 40, d, &scales);
            for k in 1..=d {
                let m = fit_pca(&SampleMatrix::from_rows(0, d, rows.clone()), k).unwrap();
                let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
                let fast = ppca_loglik(&m, &x).unwrap();
                let dense = dense_loglik(&m, &x);
                assert!((fast - dense).abs() < 1e-8, "d={d} k={k}: {fast} vs {dense}");
            }
        }
    }

    #[test]
    fn mode_is_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows = gaussian_rows(&mut rng, 100, 4, &[1.0, 2.0, 0.5, 1.0]);
        let m = fit_pca(&SampleMatrix::from_rows(0, 4, rows), 2).unwrap();
        let at_mean = ppca_loglik(&m, &m.mean).unwrap();
        for _ in 0..200 {
            let x: Vec<f64> = m.mean.iter().map(|v| v + rng.sample::<f64, _>(StandardNormal) * 0.1).collect();
            assert!(ppca_loglik(&m, &x).unwrap() < at_mean);
        }
    }

    #[test]
    fn row_order_does_not_change_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rows = gaussian_rows(&mut rng, 60, 5, &[1.0, 2.0, 3.0, 0.5, 0.1]);
        let a = fit_pca(&SampleMatrix::from_rows(0, 5, rows.clone()), 3).unwrap();
        let mut chunks: Vec<&[f64]> = rows.chunks(5).collect();
        chunks.reverse();
        chunks.swap(3, 40);
        let permuted: Vec<f64> = chunks.concat();
        let b = fit_pca(&SampleMatrix::from_rows(0, 5, permuted), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variance_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let rows = gaussian_rows(&mut rng, 80, 7, &[1.0, 2.0, 3.0, 0.5, 0.1, 1.0, 1.0]);
        let samples = SampleMatrix::from_rows(0, 7, rows);
        let m = fit_pca(&samples, 3).unwrap();
        let n = samples.num_rows() as f64;
        let mut trace = 0.0;
        for j in 0..7 {
            let mean = samples.iter_rows().map(|r| r[j]).sum::<f64>() / n;
            trace += samples.iter_rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        }
        assert!((m.total_variance() - trace).abs() < 1e-8);
        for w in m.eigenvalues.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(m.eigenvalues.iter().all(|&l| l >= m.noise_variance - 1e-10));
        // Orthonormal rows.
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot(m.component(i), m.component(j)) - expected).abs() < 1e-8);
            }
        }
    }

    fn field_1d(values: Vec<f64>) -> FeatureField {
        let w = values.len();
        FeatureField {
            dim: 1,
            height: 1,
            width: w,
            data: values,
            provenance: vec![],
        }
    }

    #[test]
    fn missing_class_scores_negative_infinity() {
        let m = fit_pca(&SampleMatrix::from_rows(0, 1, vec![0.0, 1.0, 2.0]), 1).unwrap();
        let models = vec![
            ClassModel::Fitted(m),
            ClassModel::Unscoreable {
                class_id: 1,
                reason: "no samples".into(),
            },
        ];
        let field = field_1d(vec![1.0, 5.0]);
        let prior = PriorPrediction::new(1, 2, 2, vec![0, 1]);
        let out = score_openpcs(&field, &prior, &models, PcsScoreOptions::default()).unwrap();
        assert!(out.scores.data[0].is_finite());
        assert_eq!(out.scores.data[1], f64::NEG_INFINITY);
        assert_eq!(out.unscoreable, vec![1]);

        let strict = PcsScoreOptions { strict: true, ..Default::default() };
        assert_eq!(
            score_openpcs(&field, &prior, &models, strict),
            Err(PcaError::ModelMissing { class_id: 1 })
        );
    }

    #[test]
    fn z_normalization_uses_training_stats() {
        let samples = SampleMatrix::from_rows(0, 1, vec![-1.0, 0.0, 1.0, 2.0]);
        let m = fit_pca(&samples, 1).unwrap();
        let st = m.score_stats.unwrap();
        let field = field_1d(vec![0.5]);
        let prior = PriorPrediction::new(1, 1, 1, vec![0]);
        let raw = ppca_loglik(&m, &[0.5]).unwrap();
        let models = vec![ClassModel::Fitted(m)];
        let opts = PcsScoreOptions { z_normalize: true, ..Default::default() };
        let out = score_openpcs(&field, &prior, &models, opts).unwrap();
        assert!((out.scores.data[0] - (raw - st.mean) / st.std).abs() < 1e-12);
    }
}
