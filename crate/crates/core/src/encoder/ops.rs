//! Dense building blocks shared by the forward and backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::EncoderError;

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Normalized activations and per-row inverse deviations, kept for backward.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer norm. Returns the scaled output and the cache.
pub fn layer_norm(x: ArrayView2<f64>, scale: ArrayView1<f64>, shift: ArrayView1<f64>) -> (Array2<f64>, NormCache) {
    let cols = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / cols;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
        *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let k = *s;
        row.mapv_inplace(|v| v * k);
    }
    let y = &xhat * &scale + shift;
    (y, NormCache { xhat, inv_std })
}

/// Returns (dx, dscale, dshift).
pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &NormCache,
    scale: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dscale = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dshift = dy.sum_axis(Axis(0));
    let dxhat = &dy * &scale;
    let cols = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_g = g.sum() / cols;
        let mean_gx = g.dot(&xh) / cols;
        for ((o, &gi), &xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = s * (gi - mean_g - xi * mean_gx);
        }
    }
    (dx, dscale, dshift)
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable softmax of one slice, in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_rows(mut scores: Array2<f64>) -> Array2<f64> {
    for mut row in scores.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("contiguous row"));
    }
    scores
}

/// Backward of a row softmax: `dS = P ∘ (dP − rowsum(dP ∘ P))`.
pub fn softmax_rows_backward(probs: ArrayView2<f64>, dprobs: ArrayView2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(probs.raw_dim());
    for ((mut out, p), dp) in ds.rows_mut().into_iter().zip(probs.rows()).zip(dprobs.rows()) {
        let inner = p.dot(&dp);
        for ((o, &pi), &dpi) in out.iter_mut().zip(p.iter()).zip(dp.iter()) {
            *o = pi * (dpi - inner);
        }
    }
    ds
}

/// Cross-entropy of one logit row against `target`, and its gradient
/// `softmax(z) − onehot(target)`.
pub fn cross_entropy(logits: ArrayView1<f64>, target: usize) -> (f64, Array1<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[target];
    let mut grad = logits.mapv(|z| (z - log_z).exp());
    grad[target] -= 1.0;
    (loss, grad)
}

/// `softmax(QKᵀ/√d)` with masked keys excluded; rows sum to one over the
/// unmasked keys and are exactly zero on masked ones.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>, key_mask: &[u8]) -> Result<Array2<f64>, EncoderError> {
    if q.ncols() != k.ncols() {
        return Err(EncoderError::Mismatch(format!(
            "query width {} differs from key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if key_mask.len() != k.nrows() {
        return Err(EncoderError::Mismatch(format!(
            "mask length {} differs from key count {}",
            key_mask.len(),
            k.nrows()
        )));
    }
    let keep: Vec<usize> = (0..key_mask.len()).filter(|&j| key_mask[j] != 0).collect();
    if keep.is_empty() {
        return Err(EncoderError::AllMasked);
    }
    let kept = k.select(Axis(0), &keep);
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let probs = softmax_rows(q.dot(&kept.t()) * scale);
    let mut full = Array2::zeros((q.nrows(), k.nrows()));
    for (c, &j) in keep.iter().enumerate() {
        full.column_mut(j).assign(&probs.column(c));
    }
    Ok(full)
}

/// Scaled dot-product attention over the unmasked keys.
pub fn self_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    key_mask: &[u8],
) -> Result<Array2<f64>, EncoderError> {
    if v.nrows() != k.nrows() {
        return Err(EncoderError::Mismatch(format!(
            "value count {} differs from key count {}",
            v.nrows(),
            k.nrows()
        )));
    }
    Ok(attention_weights(q, k, key_mask)?.dot(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn identical_queries_and_keys_average_unmasked_values() {
        let q = Array2::from_elem((3, 4), 0.7);
        let v = array![[1.0, 2.0], [3.0, 4.0], [100.0, 100.0]];
        let out = self_attention(q.view(), q.view(), v.view(), &[1, 1, 0]).unwrap();
        for row in out.rows() {
            assert!((row[0] - 2.0).abs() < 1e-15 && (row[1] - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_unmasked_key_copies_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (random(4, 8, &mut rng), random(4, 8, &mut rng), random(4, 8, &mut rng));
        let out = self_attention(q.view(), k.view(), v.view(), &[0, 0, 1, 0]).unwrap();
        for row in out.rows() {
            assert_eq!(row, v.row(2));
        }
    }

    #[test]
    fn all_masked_is_an_error() {
        let q = Array2::<f64>::zeros((2, 2));
        assert!(matches!(
            self_attention(q.view(), q.view(), q.view(), &[0, 0]),
            Err(EncoderError::AllMasked)
        ));
    }

    #[test]
    fn weights_match_direct_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (q, k) = (random(4, 8, &mut rng), random(4, 8, &mut rng));
        let mask = [1, 0, 1, 1];
        let w = attention_weights(q.view(), k.view(), &mask).unwrap();
        for i in 0..4 {
            let scores: Vec<f64> = (0..4)
                .map(|j| (0..8).map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / 8f64.sqrt())
                .collect();
            let denom: f64 = (0..4).filter(|&j| mask[j] == 1).map(|j| scores[j].exp()).sum();
            let mut total = 0.0;
            for j in 0..4 {
                let expect = if mask[j] == 1 { scores[j].exp() / denom } else { 0.0 };
                assert!((w[[i, j]] - expect).abs() < 1e-12);
                total += w[[i, j]];
            }
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-15);
        for &x in &[-3.0, -0.4, 0.0, 0.9, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_saturates() {
        let mut z = Array1::zeros(5);
        z[2] = 30.0;
        let (loss, grad) = cross_entropy(z.view(), 2);
        assert!(loss < 1e-9);
        assert!(grad.iter().all(|g| g.abs() < 1e-9));
        let (uniform, _) = cross_entropy(Array1::zeros(7).view(), 0);
        assert!((uniform - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(3, 6, &mut rng);
        let g = Array1::from_shape_fn(6, |_| rng.random_range(0.5..1.5));
        let b = Array1::from_shape_fn(6, |_| rng.random_range(-0.5..0.5));
        let w = random(3, 6, &mut rng);
        let f = |x: &Array2<f64>| (layer_norm(x.view(), g.view(), b.view()).0 * &w).sum();
        let (_, cache) = layer_norm(x.view(), g.view(), b.view());
        let (dx, _, _) = layer_norm_backward(w.view(), &cache, g.view());
        for i in 0..3 {
            for j in 0..6 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[[i, j]] += 1e-5;
                xm[[i, j]] -= 1e-5;
                let fd = (f(&xp) - f(&xm)) / 2e-5;
                assert!((dx[[i, j]] - fd).abs() < 1e-7, "{} vs {fd}", dx[[i, j]]);
            }
        }
    }

    proptest! {
        #[test]
        fn layer_norm_rows_are_standardized(
            data in prop::collection::vec(-50.0f64..50.0, 4 * 9),
            spread in 0.01f64..10.0,
        ) {
            let x = Array2::from_shape_vec((4, 9), data.iter().map(|v| v * spread).collect()).unwrap();
            prop_assume!(x.rows().into_iter().all(|r| {
                let m = r.mean().unwrap();
                r.iter().map(|v| (v - m).powi(2)).sum::<f64>() > 1e-3
            }));
            let (_, cache) = layer_norm(x.view(), Array1::ones(9).view(), Array1::zeros(9).view());
            for row in cache.xhat.rows() {
                let mean = row.sum() / 9.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn attention_rows_are_stochastic(seed in any::<u64>(), mask in prop::collection::vec(0u8..2, 6)) {
            prop_assume!(mask.contains(&1));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, k) = (random(5, 4, &mut rng), random(6, 4, &mut rng));
            let w = attention_weights(q.view(), k.view(), &mask).unwrap();
            for row in w.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                for (j, &p) in row.iter().enumerate() {
                    prop_assert!(p >= 0.0);
                    if mask[j] == 0 {
                        prop_assert_eq!(p, 0.0);
                    }
                }
            }
        }
    }
}
