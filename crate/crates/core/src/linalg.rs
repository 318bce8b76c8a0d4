//! Small dense helpers.

use faer::Mat;

/// Thin SVD of a row-major `rows x cols` matrix, returning singular values
/// in descending order and the matching right singular vectors as rows.
pub(crate) fn right_singular(rows: usize, cols: usize, data: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    debug_assert_eq!(data.len(), rows * cols);
    let m = Mat::<f64>::from_fn(rows, cols, |i, j| data[i * cols + j]);
    let svd = m.thin_svd().expect("SVD converges on finite input");
    let s = svd.S().column_vector();
    let v = svd.V();
    let mut order: Vec<usize> = (0..s.nrows()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let values = order.iter().map(|&i| s[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..cols).map(|j| v[(j, i)]).collect())
        .collect();
    (values, vectors)
}

/// Flips `v` so that its entry of largest magnitude (first on ties) is
/// positive.
pub(crate) fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_descending() {
        let data = [3.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 1.0];
        let (s, v) = right_singular(3, 3, &data);
        for (a, b) in s.iter().zip([5.0, 3.0, 1.0]) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((v[0][1].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn low_rank_stack_with_zero_rows() {
        // Scaled orthonormal rows followed by rows of rounding noise.
        let d = 6;
        let sv = [55.6, 45.8, 38.6];
        let (_, basis) = right_singular(d, d, &(0..d * d).map(|i| ((i * 7 + 3) as f64).sin()).collect::<Vec<_>>());
        let mut data = Vec::new();
        for (s, b) in sv.iter().zip(&basis) {
            data.extend(b.iter().map(|x| x * s));
        }
        for i in 0..21 * d {
            data.push(1e-16 * (i as f64).cos());
        }
        let (s, _) = right_singular(data.len() / d, d, &data);
        for (a, b) in s.iter().zip(sv) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn sign_convention() {
        let mut v = [0.1, -0.9, 0.3];
        fix_sign(&mut v);
        assert_eq!(v, [-0.1, 0.9, -0.3]);
    }
}
