//! Exact softmax attention at small scale, attention under eviction with
//! renormalization, the eviction error bound, and int8 value quantization
//! for the compressed tier.
//!
//! Every reduction sums in ascending position order so that two calls over
//! the same survivor set produce bitwise-identical outputs.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("keys must be nonempty")]
    EmptyKeys,
    #[error("keys and values lengths differ: {keys} vs {values}")]
    KeyValueMismatch { keys: usize, values: usize },
    #[error("empty survivor set: all positions evicted")]
    EmptySurvivorSet,
    #[error("non-finite element in input vector")]
    NonFinite,
}

/// Int8 symmetric absmax quantization of a value vector.
///
/// `scale` is `absmax / 127`; a zero vector stores `scale = 1` so that the
/// round trip stays exact without a division by zero.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    pub codes: Vec<i8>,
    pub scale: f64,
}

fn check_finite(v: &[f64]) -> Result<(), AttentionError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AttentionError::NonFinite)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Euclidean norm, summed in index order.
pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Softmax attention weights for `query` against `keys`, scaled by 1/sqrt(d).
///
/// The returned weights form a probability simplex over positions in
/// ascending order.
pub fn attention_weights(query: &[f64], keys: &[Vec<f64>]) -> Result<Vec<f64>, AttentionError> {
    if keys.is_empty() {
        return Err(AttentionError::EmptyKeys);
    }
    check_finite(query)?;
    let d = query.len();
    if d == 0 {
        return Err(AttentionError::DimensionMismatch { expected: 1, got: 0 });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = Vec::with_capacity(keys.len());
    for k in keys {
        if k.len() != d {
            return Err(AttentionError::DimensionMismatch { expected: d, got: k.len() });
        }
        check_finite(k)?;
        logits.push(dot(query, k) * scale);
    }
    Ok(softmax(&logits))
}

/// Numerically stable softmax over logits in ascending position order.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let mut z = 0.0;
    for e in &exps {
        z += e;
    }
    for e in &mut exps {
        *e /= z;
    }
    exps
}

/// Exact attention output: weighted sum of `values` under softmax weights.
pub fn attention_output(
    query: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
) -> Result<Vec<f64>, AttentionError> {
    let empty = BTreeSet::new();
    evicted_attention_output(query, keys, values, &empty)
}

/// Attention output with `evicted` positions removed and the softmax
/// renormalized over the survivors.
///
/// Positions index into `keys`/`values` (0-based). With an empty eviction
/// set this is bitwise identical to [`attention_output`].
pub fn evicted_attention_output(
    query: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    evicted: &BTreeSet<usize>,
) -> Result<Vec<f64>, AttentionError> {
    if keys.len() != values.len() {
        return Err(AttentionError::KeyValueMismatch { keys: keys.len(), values: values.len() });
    }
    if keys.is_empty() {
        return Err(AttentionError::EmptyKeys);
    }
    let survivors: Vec<usize> = (0..keys.len()).filter(|i| !evicted.contains(i)).collect();
    if survivors.is_empty() {
        return Err(AttentionError::EmptySurvivorSet);
    }
    let surv_keys: Vec<Vec<f64>> = survivors.iter().map(|&i| keys[i].clone()).collect();
    let weights = attention_weights(query, &surv_keys)?;
    let mut out = vec![0.0; values[0].len()];
    for (w, &i) in weights.iter().zip(&survivors) {
        let v = &values[i];
        if v.len() != out.len() {
            return Err(AttentionError::DimensionMismatch { expected: out.len(), got: v.len() });
        }
        check_finite(v)?;
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Upper bound on the output error caused by evicting `evicted` positions:
/// `2 * sum_{i in E} alpha[i] * ||v_i||`.
///
/// `weights` must be the full-cache attention weights, not the renormalized
/// post-eviction ones. The bound is sound when all value vectors share a
/// common norm (and more generally whenever the renormalized output norm
/// does not exceed the weighted mean norm of the evicted values): the
/// renormalization term of the error is `s * ||o_hat||` with
/// `s = sum_{i in E} alpha[i]`, which the second copy of the sum only
/// covers under that condition. Mixed-norm caches need the explicit
/// two-term triangle-inequality form instead.
pub fn eviction_error_bound(
    weights: &[f64],
    values: &[Vec<f64>],
    evicted: &BTreeSet<usize>,
) -> Result<f64, AttentionError> {
    if weights.len() != values.len() {
        return Err(AttentionError::KeyValueMismatch { keys: weights.len(), values: values.len() });
    }
    let mut bound = 0.0;
    for &i in evicted {
        if i >= weights.len() {
            continue;
        }
        bound += weights[i] * l2_norm(&values[i]);
    }
    Ok(2.0 * bound)
}

/// Per-vector symmetric absmax int8 quantization.
pub fn quantize_int8(v: &[f64]) -> QuantizedVector {
    let absmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = if absmax == 0.0 { 1.0 } else { absmax / 127.0 };
    let codes = v
        .iter()
        .map(|x| {
            let c = (x / scale).round();
            c.clamp(-127.0, 127.0) as i8
        })
        .collect();
    QuantizedVector { codes, scale }
}

pub fn dequantize_int8(qv: &QuantizedVector) -> Vec<f64> {
    qv.codes.iter().map(|&c| c as f64 * qv.scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn single_key_weight_is_one() {
        let w = attention_weights(&[1.0, 2.0], &[vec![0.3, -0.7]]).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let w = attention_weights(&[1.0, 2.0], &[vec![0.3, -0.7], vec![0.3, -0.7]]).unwrap();
        assert!(close(w[0], 0.5, 1e-15));
        assert!(close(w[1], 0.5, 1e-15));
    }

    #[test]
    fn hand_evaluated_softmax() {
        // d=2, q=(1,0), keys (1,0) and (0,1): logits 1/sqrt(2), 0.
        let w = attention_weights(&[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l0 = 1.0 / 2.0f64.sqrt();
        let e0 = l0.exp();
        let expected0 = e0 / (e0 + 1.0);
        assert!(close(w[0], expected0, 1e-12));
        assert!(close(w[1], 1.0 - expected0, 1e-12));
    }

    #[test]
    fn weights_sum_to_one() {
        let keys: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64 * 0.1, -(i as f64)]).collect();
        let w = attention_weights(&[0.4, 0.2], &keys).unwrap();
        let s: f64 = w.iter().sum();
        assert!(close(s, 1.0, 1e-9));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = attention_weights(&[1.0, 0.0], &[vec![1.0]]).unwrap_err();
        assert_eq!(err, AttentionError::DimensionMismatch { expected: 2, got: 1 });
        assert_eq!(attention_weights(&[1.0], &[]).unwrap_err(), AttentionError::EmptyKeys);
    }

    #[test]
    fn single_pair_returns_value() {
        let o = attention_output(&[0.5, 0.5], &[vec![1.0, 2.0]], &[vec![3.0, -4.0]]).unwrap();
        assert_eq!(o, vec![3.0, -4.0]);
    }

    #[test]
    fn identical_values_return_value() {
        let keys = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![0.5, 0.5]];
        let values = vec![vec![7.0, -1.0]; 3];
        let o = attention_output(&[0.3, 0.9], &keys, &values).unwrap();
        assert!(close(o[0], 7.0, 1e-12));
        assert!(close(o[1], -1.0, 1e-12));
    }

    #[test]
    fn matches_naive_double_loop() {
        // Independent brute-force evaluation over a fixed 5-token instance.
        let d = 3;
        let mut q = vec![0.0; d];
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut x = 0.37f64;
        let mut next = || {
            x = (x * 997.0 + 0.123).fract();
            x * 2.0 - 1.0
        };
        for j in 0..d {
            q[j] = next();
        }
        for _ in 0..5 {
            keys.push((0..d).map(|_| next()).collect::<Vec<_>>());
            values.push((0..d).map(|_| next()).collect::<Vec<_>>());
        }
        let o = attention_output(&q, &keys, &values).unwrap();

        // Naive: explicit exp / sum, no max subtraction.
        let scale = 1.0 / (d as f64).sqrt();
        let mut z = 0.0;
        for k in &keys {
            let mut l = 0.0;
            for j in 0..d {
                l += q[j] * k[j];
            }
            z += (l * scale).exp();
        }
        for j in 0..d {
            let mut acc = 0.0;
            for (k, v) in keys.iter().zip(&values) {
                let mut l = 0.0;
                for jj in 0..d {
                    l += q[jj] * k[jj];
                }
                acc += (l * scale).exp() / z * v[j];
            }
            assert!(close(o[j], acc, 1e-12));
        }
    }

    #[test]
    fn empty_eviction_is_bitwise_identical() {
        let keys = vec![vec![1.0, -0.2], vec![0.1, 0.9], vec![-0.4, 0.4]];
        let values = vec![vec![0.2, 0.3], vec![-1.0, 0.5], vec![0.7, 0.7]];
        let a = attention_output(&[0.6, -0.1], &keys, &values).unwrap();
        let b = evicted_attention_output(&[0.6, -0.1], &keys, &values, &BTreeSet::new()).unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn single_survivor_returns_its_value() {
        let keys = vec![vec![1.0], vec![2.0], vec![3.0]];
        let values = vec![vec![10.0], vec![20.0], vec![30.0]];
        let evicted: BTreeSet<usize> = [0, 2].into_iter().collect();
        let o = evicted_attention_output(&[1.0], &keys, &values, &evicted).unwrap();
        assert_eq!(o, vec![20.0]);
    }

    #[test]
    fn evicting_everything_fails() {
        let keys = vec![vec![1.0], vec![2.0]];
        let values = keys.clone();
        let evicted: BTreeSet<usize> = [0, 1].into_iter().collect();
        let err = evicted_attention_output(&[1.0], &keys, &values, &evicted).unwrap_err();
        assert_eq!(err, AttentionError::EmptySurvivorSet);
    }

    #[test]
    fn restricted_softmax_matches_oracle() {
        // 6-token instance, evict {2, 5} (1-based) -> indices {1, 4}.
        let d = 2;
        let q = vec![0.8, -0.3];
        let keys: Vec<Vec<f64>> =
            (0..6).map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()]).collect();
        let values: Vec<Vec<f64>> =
            (0..6).map(|i| vec![(i as f64 * 0.5).cos(), (i as f64 * 0.9).sin()]).collect();
        let evicted: BTreeSet<usize> = [1, 4].into_iter().collect();
        let o = evicted_attention_output(&q, &keys, &values, &evicted).unwrap();

        let scale = 1.0 / (d as f64).sqrt();
        let mut z = 0.0;
        for (i, k) in keys.iter().enumerate() {
            if evicted.contains(&i) {
                continue;
            }
            z += ((q[0] * k[0] + q[1] * k[1]) * scale).exp();
        }
        for j in 0..d {
            let mut acc = 0.0;
            for (i, (k, v)) in keys.iter().zip(&values).enumerate() {
                if evicted.contains(&i) {
                    continue;
                }
                acc += ((q[0] * k[0] + q[1] * k[1]) * scale).exp() / z * v[j];
            }
            assert!(close(o[j], acc, 1e-12));
        }
    }

    #[test]
    fn bound_zero_for_empty_eviction() {
        let values = vec![vec![1.0, 1.0], vec![2.0, 2.0]];
        let b = eviction_error_bound(&[0.5, 0.5], &values, &BTreeSet::new()).unwrap();
        assert_eq!(b, 0.0);
    }

    #[test]
    fn bound_single_eviction_formula() {
        let values = vec![vec![3.0, 4.0], vec![1.0, 0.0]];
        let evicted: BTreeSet<usize> = [0].into_iter().collect();
        let b = eviction_error_bound(&[0.3, 0.7], &values, &evicted).unwrap();
        assert!(close(b, 2.0 * 0.3 * 5.0, 1e-12));
    }

    #[test]
    fn bound_dominates_measured_error() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let d = rng.gen_range(1..=8);
            let t = rng.gen_range(2..=24);
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let keys: Vec<Vec<f64>> =
                (0..t).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            // Common value norm per instance: the regime where the bound
            // is sound (see `eviction_error_bound`).
            let norm = rng.gen_range(0.3..3.0);
            let values: Vec<Vec<f64>> = (0..t)
                .map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    let n = l2_norm(&v).max(1e-9);
                    v.into_iter().map(|x| x / n * norm).collect()
                })
                .collect();
            let n_evict = rng.gen_range(0..t);
            let mut evicted = BTreeSet::new();
            while evicted.len() < n_evict {
                evicted.insert(rng.gen_range(0..t));
            }
            let full = attention_output(&q, &keys, &values).unwrap();
            let approx = evicted_attention_output(&q, &keys, &values, &evicted).unwrap();
            let weights = attention_weights(&q, &keys).unwrap();
            let bound = eviction_error_bound(&weights, &values, &evicted).unwrap();
            let err: f64 = full
                .iter()
                .zip(&approx)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(err <= bound + 1e-12, "err {err} > bound {bound}");
        }
    }

    #[test]
    fn quantize_zero_vector_roundtrips() {
        let qv = quantize_int8(&[0.0; 5]);
        assert_eq!(qv.scale, 1.0);
        assert_eq!(dequantize_int8(&qv), vec![0.0; 5]);
    }

    #[test]
    fn quantize_absmax_127_is_exact() {
        let v = vec![127.0, -63.5, 0.0];
        let qv = quantize_int8(&v);
        assert_eq!(qv.scale, 1.0);
        assert_eq!(dequantize_int8(&qv)[0], 127.0);
    }

    #[test]
    fn quantize_roundtrip_error_within_scale() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let qv = quantize_int8(&v);
            let back = dequantize_int8(&qv);
            for (a, b) in v.iter().zip(&back) {
                assert!((a - b).abs() <= qv.scale, "{a} vs {b}, scale {}", qv.scale);
            }
        }
    }
}
