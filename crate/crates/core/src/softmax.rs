//! Maximum-softmax-probability baseline.

use crate::maps::{PriorPrediction, ScoreMap};

/// Numerically stable softmax of one logit vector, written into `out`.
#[inline]
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// Index of the largest value; ties go to the lowest index.
#[inline]
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel softmax over a channel-major `C x H x W` logit buffer.
pub fn softmax(logits: &[f32], channels: usize, height: usize, width: usize) -> Vec<f64> {
    assert!(channels >= 1);
    let plane = height * width;
    assert_eq!(logits.len(), channels * plane);
    let mut out = vec![0.0; logits.len()];
    let mut l = vec![0.0; channels];
    let mut p = vec![0.0; channels];
    for i in 0..plane {
        for c in 0..channels {
            l[c] = f64::from(logits[c * plane + i]);
        }
        softmax_into(&l, &mut p);
        for c in 0..channels {
            out[c * plane + i] = p[c];
        }
    }
    out
}

/// Scores each pixel by its maximum softmax probability and returns the
/// argmax prediction alongside.
pub fn score_softmax(logits: &[f32], channels: usize, height: usize, width: usize) -> (ScoreMap, PriorPrediction) {
    assert!(channels >= 1);
    let plane = height * width;
    assert_eq!(logits.len(), channels * plane);
    let mut scores = vec![0.0; plane];
    let mut classes = vec![0u32; plane];
    let mut l = vec![0.0; channels];
    for i in 0..plane {
        for c in 0..channels {
            l[c] = f64::from(logits[c * plane + i]);
        }
        let best = argmax(&l);
        // max softmax = 1 / sum_c exp(l_c - l_max)
        let denom: f64 = l.iter().map(|&v| (v - l[best]).exp()).sum();
        scores[i] = 1.0 / denom;
        classes[i] = best as u32;
    }
    (
        ScoreMap::new(height, width, scores),
        PriorPrediction::new(height, width, channels, classes),
    )
}

/// Argmax prediction only.
pub fn prior_prediction(logits: &[f32], channels: usize, height: usize, width: usize) -> PriorPrediction {
    let plane = height * width;
    assert_eq!(logits.len(), channels * plane);
    let mut l = vec![0.0; channels];
    let data = (0..plane)
        .map(|i| {
            for c in 0..channels {
                l[c] = f64::from(logits[c * plane + i]);
            }
            argmax(&l) as u32
        })
        .collect();
    PriorPrediction::new(height, width, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn symmetric_pair() {
        assert_eq!(softmax_vec(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn ln2_closed_form() {
        let p = softmax_vec(&[std::f64::consts::LN_2, 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn huge_logit_does_not_overflow() {
        let p = softmax_vec(&[1000.0, 0.0]);
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn score_of_3_1_0() {
        let (s, p) = score_softmax(&[3.0, 1.0, 0.0], 3, 1, 1);
        let e = std::f64::consts::E;
        let expected = e.powi(3) / (e.powi(3) + e + 1.0);
        assert!((s.data[0] - expected).abs() < 1e-12);
        assert!((s.data[0] - 0.8438).abs() < 1e-4);
        assert_eq!(p.data[0], 0);
    }

    #[test]
    fn uniform_logits_tie_to_lowest() {
        let (s, p) = score_softmax(&[0.7; 4], 4, 1, 1);
        assert!((s.data[0] - 0.25).abs() < 1e-15);
        assert_eq!(p.data[0], 0);
    }

    #[test]
    fn one_hot_huge_logit() {
        let (s, p) = score_softmax(&[0.0, 0.0, 500.0], 3, 1, 1);
        assert_eq!(s.data[0], 1.0);
        assert_eq!(p.data[0], 2);
    }

    proptest! {
        #[test]
        fn invariants(logits in prop::collection::vec(-30.0f32..30.0, 1..8), shift in -50.0f32..50.0) {
            let c = logits.len();
            let probs = softmax(&logits, c, 1, 1);
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

            let (s, p) = score_softmax(&logits, c, 1, 1);
            prop_assert!(s.data[0] >= 1.0 / c as f64 - 1e-12 && s.data[0] <= 1.0);
            let raw: Vec<f64> = logits.iter().map(|&v| f64::from(v)).collect();
            prop_assert_eq!(p.data[0] as usize, argmax(&raw));
            prop_assert_eq!(argmax(&probs), argmax(&raw));

            // Shifting every logit by the same amount, evaluated in f64 so the
            // shift itself is exact.
            let shifted: Vec<f64> = raw.iter().map(|v| v + f64::from(shift)).collect();
            let a = softmax_vec(&raw);
            let b = softmax_vec(&shifted);
            prop_assert_eq!(argmax(&a), argmax(&b));
            prop_assert!((a[argmax(&a)] - b[argmax(&b)]).abs() < 1e-12);
        }
    }
}
