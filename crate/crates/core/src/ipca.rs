//! Mini-batch incremental PCA.
//!
//! Each update stacks the previous components (scaled by their singular
//! values), a mean-correction row and the centered batch, then keeps the
//! top right singular vectors of that stack. The total sum of squares is
//! tracked alongside so the residual noise variance is available without a
//! second pass over the data.

use thiserror::Error;

use crate::fusion::SampleMatrix;
use crate::linalg::{fix_sign, right_singular};
use crate::pca::{model_from_svd, training_stats, PcaError, PcaModel};

/// Default cap on rows per update.
pub const DEFAULT_BATCH_ROWS: usize = 65_536;

#[derive(Debug, Error, PartialEq)]
pub enum IpcaError {
    #[error("invalid IPCA config: {0}")]
    BadConfig(String),
    #[error("first batch needs at least {needed} rows, got {got}")]
    FirstBatchTooSmall { needed: usize, got: usize },
    #[error("batch has dimension {got}, state expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Pca(#[from] PcaError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpcaState {
    class_id: usize,
    n_comp: usize,
    dim: usize,
    n_seen: usize,
    mean: Vec<f64>,
    /// `n_comp x dim`, row-major.
    components: Vec<f64>,
    singular_values: Vec<f64>,
    /// Sum of squared deviations from the running mean over all rows.
    sum_sq: f64,
}

impl IpcaState {
    pub fn new(n_comp: usize, dim: usize) -> Result<Self, IpcaError> {
        Self::for_class(0, n_comp, dim)
    }

    pub fn for_class(class_id: usize, n_comp: usize, dim: usize) -> Result<Self, IpcaError> {
        if n_comp == 0 || n_comp > dim {
            return Err(IpcaError::BadConfig(format!(
                "need 1 <= n_comp <= dim, got n_comp={n_comp}, dim={dim}"
            )));
        }
        Ok(Self {
            class_id,
            n_comp,
            dim,
            n_seen: 0,
            mean: vec![0.0; dim],
            components: Vec::new(),
            singular_values: Vec::new(),
            sum_sq: 0.0,
        })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn n_seen(&self) -> usize {
        self.n_seen
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn n_components(&self) -> usize {
        self.n_comp
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.dim..(i + 1) * self.dim]
    }

    /// Absorbs `rows` (row-major, `dim` columns).
    pub fn partial_fit(&mut self, rows: &[f64]) -> Result<(), IpcaError> {
        if !rows.len().is_multiple_of(self.dim) {
            return Err(IpcaError::DimMismatch {
                expected: self.dim,
                got: rows.len(),
            });
        }
        let m = rows.len() / self.dim;
        if self.n_seen == 0 && m < self.n_comp + 1 {
            return Err(IpcaError::FirstBatchTooSmall {
                needed: self.n_comp + 1,
                got: m,
            });
        }
        if m == 0 {
            return Ok(());
        }
        let d = self.dim;

        let mut batch_mean = vec![0.0; d];
        for r in rows.chunks_exact(d) {
            for (b, v) in batch_mean.iter_mut().zip(r) {
                *b += v;
            }
        }
        batch_mean.iter_mut().for_each(|b| *b /= m as f64);

        let mut stack = Vec::with_capacity((self.n_comp + 1 + m) * d);
        let mut batch_sq = 0.0;
        let n_old = self.n_seen as f64;
        let n_new = n_old + m as f64;
        if self.n_seen > 0 {
            for (i, s) in self.singular_values.iter().enumerate() {
                stack.extend(self.component(i).iter().map(|v| v * s));
            }
            let w = (n_old * m as f64 / n_new).sqrt();
            stack.extend(self.mean.iter().zip(&batch_mean).map(|(a, b)| w * (a - b)));
        }
        for r in rows.chunks_exact(d) {
            for (v, b) in r.iter().zip(&batch_mean) {
                let c = v - b;
                batch_sq += c * c;
                stack.push(c);
            }
        }

        let shift: f64 = self.mean.iter().zip(&batch_mean).map(|(a, b)| (a - b) * (a - b)).sum();
        self.sum_sq += batch_sq + n_old * m as f64 / n_new * shift;
        for (mu, b) in self.mean.iter_mut().zip(&batch_mean) {
            *mu = (n_old * *mu + m as f64 * b) / n_new;
        }
        self.n_seen += m;

        let (singular, vectors) = right_singular(stack.len() / d, d, &stack);
        let k = self.n_comp.min(singular.len());
        self.singular_values = singular[..k].to_vec();
        self.components.clear();
        for mut v in vectors.into_iter().take(k) {
            fix_sign(&mut v);
            self.components.extend_from_slice(&v);
        }
        Ok(())
    }

    /// Absorbs a sample matrix in chunks of at most `batch_rows` rows.
    pub fn partial_fit_chunked(&mut self, samples: &SampleMatrix, batch_rows: usize) -> Result<(), IpcaError> {
        let batch_rows = batch_rows.max(self.n_comp + 1);
        for chunk in samples.rows.chunks(batch_rows * self.dim) {
            self.partial_fit(chunk)?;
        }
        Ok(())
    }

    /// Total variance of everything absorbed so far (divisor `n - 1`).
    pub fn total_variance(&self) -> f64 {
        if self.n_seen < 2 {
            0.0
        } else {
            self.sum_sq / (self.n_seen - 1) as f64
        }
    }

    pub fn finalize(&self) -> Result<PcaModel, IpcaError> {
        if self.n_seen < 2 {
            return Err(PcaError::InsufficientSamples {
                class_id: self.class_id,
                got: self.n_seen,
            }
            .into());
        }
        if self.sum_sq <= 0.0 {
            return Err(PcaError::DegenerateData {
                class_id: self.class_id,
            }
            .into());
        }
        let vectors: Vec<Vec<f64>> = (0..self.singular_values.len())
            .map(|i| self.component(i).to_vec())
            .collect();
        Ok(model_from_svd(
            self.class_id,
            self.mean.clone(),
            self.n_seen,
            self.n_comp,
            &self.singular_values,
            vectors,
            self.total_variance(),
        ))
    }

    /// Like [`finalize`](Self::finalize), also attaching log-likelihood
    /// statistics computed on `reference` rows.
    pub fn finalize_with_stats(&self, reference: &SampleMatrix) -> Result<PcaModel, IpcaError> {
        let mut model = self.finalize()?;
        model.score_stats = training_stats(&model, reference);
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use crate::pca::fit_pca;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    /// Largest principal angle between the row spaces of two orthonormal
    /// bases, from the smallest singular value of `A B^T`.
    pub(crate) fn max_principal_angle(a: &[f64], b: &[f64], dim: usize) -> f64 {
        let ka = a.len() / dim;
        let kb = b.len() / dim;
        let ma = DMatrix::from_row_slice(ka, dim, a);
        let mb = DMatrix::from_row_slice(kb, dim, b);
        let cross = &ma * mb.transpose();
        let s = cross.singular_values();
        let smallest = s.iter().copied().fold(f64::INFINITY, f64::min).min(1.0);
        smallest.acos()
    }

    #[test]
    fn construction_checks() {
        assert!(IpcaState::new(16, 28).is_ok());
        assert!(matches!(IpcaState::new(0, 28), Err(IpcaError::BadConfig(_))));
        assert!(matches!(IpcaState::new(29, 28), Err(IpcaError::BadConfig(_))));
    }

    #[test]
    fn first_batch_must_exceed_components() {
        let mut s = IpcaState::new(3, 5).unwrap();
        assert_eq!(
            s.partial_fit(&[0.0; 15]),
            Err(IpcaError::FirstBatchTooSmall { needed: 4, got: 3 })
        );
        assert!(matches!(s.partial_fit(&[0.0; 7]), Err(IpcaError::DimMismatch { .. })));
    }

    #[test]
    fn finalize_needs_data() {
        let s = IpcaState::new(2, 4).unwrap();
        assert!(matches!(
            s.finalize(),
            Err(IpcaError::Pca(PcaError::InsufficientSamples { .. }))
        ));
    }

    #[test]
    fn one_batch_matches_batch_pca() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 8;
        let rows: Vec<f64> = (0..300 * d).map(|i| normal(&mut rng) * (1.0 + (i % d) as f64)).collect();
        let mut s = IpcaState::new(4, d).unwrap();
        s.partial_fit(&rows).unwrap();
        let inc = s.finalize().unwrap();
        let batch = fit_pca(&SampleMatrix::from_rows(0, d, rows), 4).unwrap();
        for (a, b) in inc.mean.iter().zip(&batch.mean) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in inc.eigenvalues.iter().zip(&batch.eigenvalues) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in inc.components.iter().zip(&batch.components) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((inc.noise_variance - batch.noise_variance).abs() < 1e-8);
        assert!(max_principal_angle(&inc.components, &batch.components, d) < 1e-7);
    }

    #[test]
    fn recovers_low_rank_subspace_across_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (d, r) = (10, 3);
        let basis: Vec<f64> = (0..r * d).map(|_| normal(&mut rng)).collect();
        let offset: Vec<f64> = (0..d).map(|_| normal(&mut rng) * 5.0).collect();
        let mut s = IpcaState::new(4, d).unwrap();
        let mut all = Vec::new();
        for _ in 0..5 {
            let mut batch = Vec::new();
            for _ in 0..40 {
                let coef: Vec<f64> = (0..r).map(|_| normal(&mut rng)).collect();
                for j in 0..d {
                    batch.push(offset[j] + (0..r).map(|t| coef[t] * basis[t * d + j]).sum::<f64>());
                }
            }
            s.partial_fit(&batch).unwrap();
            all.extend(batch);
            for i in 0..s.n_components() {
                for j in 0..s.n_components() {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((dot(s.component(i), s.component(j)) - e).abs() < 1e-8);
                }
            }
        }
        // Orthonormalize the true basis through its own SVD.
        let (_, truth) = crate::linalg::right_singular(r, d, &basis);
        let truth: Vec<f64> = truth.concat();
        let leading: Vec<f64> = s.components[..r * d].to_vec();
        assert!(max_principal_angle(&leading, &truth, d) < 1e-6);

        // Running mean is exact.
        let n = (all.len() / d) as f64;
        for j in 0..d {
            let m = all.iter().skip(j).step_by(d).sum::<f64>() / n;
            assert!((s.mean()[j] - m).abs() < 1e-10);
        }
    }

    #[test]
    fn padding_with_mean_rows_shrinks_eigenvalues_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let d = 6;
        let n1 = 100;
        let first: Vec<f64> = (0..n1 * d).map(|i| normal(&mut rng) * (1.0 + (i % d) as f64)).collect();
        let mut s = IpcaState::new(3, d).unwrap();
        s.partial_fit(&first).unwrap();
        let before = s.finalize().unwrap();
        let mean = s.mean().to_vec();
        let mut all = first.clone();
        for _ in 0..10 {
            let batch: Vec<f64> = (0..20).flat_map(|_| mean.iter().copied()).collect();
            s.partial_fit(&batch).unwrap();
            all.extend(batch);
        }
        let after = s.finalize().unwrap();
        let n = all.len() / d;
        // Adding rows at the mean leaves the scatter matrix unchanged, so
        // every covariance eigenvalue scales by (n1 - 1) / (n - 1).
        let ratio = (n1 - 1) as f64 / (n - 1) as f64;
        for (a, b) in after.eigenvalues.iter().zip(&before.eigenvalues) {
            assert!((a - b * ratio).abs() < 1e-8 * b.max(1.0), "{a} vs {}", b * ratio);
        }
        let mut trace = 0.0;
        for j in 0..d {
            let m = all.iter().skip(j).step_by(d).sum::<f64>() / n as f64;
            trace += all.iter().skip(j).step_by(d).map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        }
        assert!((after.total_variance() - trace).abs() < 1e-8);
    }
}
