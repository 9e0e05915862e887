//! Exact reference computations.
//!
//! Everything here works on the same integer codes as the engine so that
//! pruning error is measured separately from quantization error. Speed is
//! not a concern.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margin::scale_factor;
use crate::quant::{partial_value, ChunkedKey, QuantizedVector};

/// Largest number of unknown bits [`brute_force_bounds`] will enumerate.
pub const ENUMERATION_BUDGET_BITS: u32 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub output: Vec<f64>,
}

pub fn int_dot(a: &[i32], b: &[i32]) -> i64 {
    a.iter().zip(b).map(|(&x, &y)| x as i64 * y as i64).sum()
}

/// Softmax with the maximum subtracted before exponentiation.
pub fn softmax_direct(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `ln(sum exp(scores))`.
pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// Softmax as `exp(s - lse(s))`.
pub fn softmax_log(scores: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(scores);
    scores.iter().map(|s| (s - lse).exp()).collect()
}

/// Full-precision quantized scores of every key.
pub fn exact_scores(q: &QuantizedVector, keys: &[QuantizedVector]) -> Result<Vec<f64>> {
    let first = keys
        .first()
        .ok_or_else(|| Error::InvalidInput("no keys".into()))?;
    let sf = scale_factor(q, first.scale);
    keys.iter()
        .enumerate()
        .map(|(i, k)| {
            if k.dim() != q.dim() {
                return Err(Error::InvalidInput(format!(
                    "key {i} has dimension {}, query has {}",
                    k.dim(),
                    q.dim()
                )));
            }
            if k.scale != first.scale {
                return Err(Error::InvalidInput(format!(
                    "key {i} scale differs from key 0"
                )));
            }
            Ok(int_dot(&q.values, &k.values) as f64 * sf)
        })
        .collect()
}

/// Softmax attention over quantized inputs.
pub fn exact_attention(
    q: &QuantizedVector,
    keys: &[QuantizedVector],
    values: &[QuantizedVector],
) -> Result<OracleResult> {
    if keys.len() != values.len() {
        return Err(Error::InvalidInput(format!(
            "{} keys but {} values",
            keys.len(),
            values.len()
        )));
    }
    let scores = exact_scores(q, keys)?;
    let probabilities = softmax_direct(&scores);
    let dim = values[0].dim();
    let mut output = vec![0.0; dim];
    for (p, v) in probabilities.iter().zip(values) {
        if v.dim() != dim {
            return Err(Error::InvalidInput("value dimensions differ".into()));
        }
        for (o, x) in output.iter_mut().zip(v.dequantize()) {
            *o += p * x;
        }
    }
    Ok(OracleResult {
        scores,
        probabilities,
        output,
    })
}

/// Softmax attention on unquantized inputs, for measuring quantization error.
pub fn float_attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<OracleResult> {
    if keys.is_empty() || keys.len() != values.len() {
        return Err(Error::InvalidInput("key/value count mismatch".into()));
    }
    let norm = (q.len() as f64).sqrt();
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| {
            if k.len() != q.len() {
                return Err(Error::InvalidInput(
                    "key dimension differs from query".into(),
                ));
            }
            Ok(q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / norm)
        })
        .collect::<Result<_>>()?;
    let probabilities = softmax_direct(&scores);
    let mut output = vec![0.0; values[0].len()];
    for (p, v) in probabilities.iter().zip(values) {
        for (o, x) in output.iter_mut().zip(v) {
            *o += p * x;
        }
    }
    Ok(OracleResult {
        scores,
        probabilities,
        output,
    })
}

/// Extremes of the integer dot product `q . k` over every completion of the
/// bits of `key` below chunk `b`, by exhaustive enumeration.
pub fn brute_force_bounds(q: &QuantizedVector, key: &ChunkedKey, b: usize) -> Result<(i64, i64)> {
    if key.dim() != q.dim() {
        return Err(Error::InvalidInput(
            "key dimension differs from query".into(),
        ));
    }
    let prefix = partial_value(key, b)?;
    let r = key.chunking.unknown_bits(b);
    let total = r * q.dim() as u32;
    if total > ENUMERATION_BUDGET_BITS {
        return Err(Error::EnumerationTooLarge {
            bits: total,
            budget: ENUMERATION_BUDGET_BITS,
        });
    }
    let radix = 1u64 << r;
    let mut lo = i64::MAX;
    let mut hi = i64::MIN;
    for combo in 0..(1u64 << total) {
        let mut rest = combo;
        let mut s = 0i64;
        for (&qj, &p) in q.values.iter().zip(&prefix) {
            let low = (rest % radix) as i64;
            rest /= radix;
            s += qj as i64 * (p + low);
        }
        lo = lo.min(s);
        hi = hi.max(s);
    }
    Ok((lo, hi))
}

/// One token's knowledge for a brute-force probability bound.
#[derive(Debug, Clone, Copy)]
pub struct KnownPrefix<'a> {
    pub key: &'a ChunkedKey,
    /// Last chunk index known for this key.
    pub level: usize,
}

/// Worst-case probability of `subset[target]` over all completions of every
/// key's unknown bits: the largest attainable numerator over the smallest
/// attainable subset denominator.
pub fn brute_force_p_upper(
    q: &QuantizedVector,
    subset: &[KnownPrefix<'_>],
    target: usize,
) -> Result<f64> {
    let sf = scale_factor(
        q,
        subset
            .first()
            .ok_or_else(|| Error::InvalidInput("empty subset".into()))?
            .key
            .scale,
    );
    let mut mins = Vec::with_capacity(subset.len());
    let mut target_max = 0.0;
    for (i, k) in subset.iter().enumerate() {
        let (lo, hi) = brute_force_bounds(q, k.key, k.level)?;
        mins.push(lo as f64 * sf);
        if i == target {
            target_max = hi as f64 * sf;
        }
    }
    let den: f64 = mins.iter().map(|s| s.exp()).sum();
    Ok(target_max.exp() / den)
}
