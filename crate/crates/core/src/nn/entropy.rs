use ndarray::{Array1, ArrayView2};

/// Shannon entropy (nats) of `softmax(row)` for every row.
pub fn token_entropies(logits: ArrayView2<f64>) -> Array1<f64> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            let mut s = 0.0;
            for &l in row {
                let e = (l - m).exp();
                z += e;
                s += e * (l - m);
            }
            // H = log Z − E[l − m]
            (z.ln() - s / z).max(0.0)
        })
        .collect()
}

/// Mean per-position entropy; 0 for an empty input.
pub fn sequence_entropy(logits: ArrayView2<f64>) -> f64 {
    if logits.nrows() == 0 {
        return 0.0;
    }
    token_entropies(logits).mean().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_is_log_v() {
        let l = Array2::<f64>::zeros((3, 64));
        assert!((sequence_entropy(l.view()) - 64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_is_zero() {
        let mut l = Array2::<f64>::zeros((2, 10));
        l[[0, 3]] = 1e6;
        l[[1, 0]] = 1e6;
        assert_eq!(sequence_entropy(l.view()), 0.0);
    }

    #[test]
    fn matches_direct_recomputation_and_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l: Array2<f64> = Array2::from_shape_simple_fn((7, 16), || rng.gen_range(-5.0..5.0));
        let mut want = 0.0;
        for row in l.rows() {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= row.iter().map(|v| v.exp() / z * (v.exp() / z).ln()).sum::<f64>();
        }
        want /= 7.0;
        let h = sequence_entropy(l.view());
        assert!((h - want).abs() < 1e-10);
        assert!((sequence_entropy((&l + 123.0).view()) - h).abs() < 1e-12);
        assert!(h >= 0.0 && h <= 16f64.ln());
    }
}
