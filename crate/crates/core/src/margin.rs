//! Query-only bounds on the contribution of not-yet-fetched key bits.
//!
//! After chunks `0..=b` of a key are known, every element's missing low part
//! lies in `[0, 2^r - 1]` with `r` the number of unknown bits. The dot product
//! with the query can therefore grow by at most `(2^r - 1) * sum(q_j > 0)` and
//! shrink by at most `(2^r - 1) * |sum(q_j < 0)|`. Neither quantity reads key
//! data, so one table per query serves every token.

use serde::{Deserialize, Serialize};

use crate::quant::{Chunking, QuantizedVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginTable {
    /// Lower margin per chunk index, in integer score units (always <= 0).
    pub min: Vec<i64>,
    /// Upper margin per chunk index, in integer score units (always >= 0).
    pub max: Vec<i64>,
    /// Integer score to real score: `q.scale * k.scale / sqrt(d_h)`.
    pub scale_factor: f64,
}

impl MarginTable {
    pub fn levels(&self) -> usize {
        self.min.len()
    }

    /// Replace every upper margin by `max[b] * numerator / denominator`.
    ///
    /// Only useful to inject faults when exercising the verifier.
    pub fn understate_max(&mut self, numerator: i64, denominator: i64) {
        for m in &mut self.max {
            *m = *m * numerator / denominator;
        }
    }
}

/// Score scale factor for a query and a key scale.
pub fn scale_factor(q: &QuantizedVector, key_scale: f64) -> f64 {
    q.scale * key_scale / (q.dim() as f64).sqrt()
}

pub fn build_margins(q: &QuantizedVector, chunking: Chunking, key_scale: f64) -> MarginTable {
    let pos: i64 = q.values.iter().filter(|&&v| v > 0).map(|&v| v as i64).sum();
    let neg: i64 = q.values.iter().filter(|&&v| v < 0).map(|&v| v as i64).sum();
    let (min, max) = (0..chunking.chunks())
        .map(|b| {
            let span = (1i64 << chunking.unknown_bits(b)) - 1;
            (span * neg, span * pos)
        })
        .unzip();
    MarginTable {
        min,
        max,
        scale_factor: scale_factor(q, key_scale),
    }
}

/// Real-valued score interval `[s_min, s_max]` for a partial integer dot
/// product `ps` known through chunk `b`.
pub fn score_bounds(ps: i64, b: usize, m: &MarginTable) -> (f64, f64) {
    (
        (ps + m.min[b]) as f64 * m.scale_factor,
        (ps + m.max[b]) as f64 * m.scale_factor,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qv(codes: &[i32]) -> QuantizedVector {
        QuantizedVector {
            values: codes.to_vec(),
            scale: 1.0,
            bits: 12,
        }
    }

    #[test]
    fn two_element_margins() {
        let m = build_margins(&qv(&[3, -2]), Chunking::default(), 1.0);
        assert_eq!(m.max, vec![765, 45, 0]);
        assert_eq!(m.min, vec![-510, -30, 0]);
    }

    #[test]
    fn last_level_is_exact() {
        let m = build_margins(&qv(&[2047, -2048, 5, 0]), Chunking::default(), 0.25);
        let (lo, hi) = score_bounds(1234, 2, &m);
        assert_eq!(lo, hi);
        assert_eq!(lo, 1234.0 * m.scale_factor);
    }

    #[test]
    fn nonnegative_query_has_zero_lower_margin() {
        let m = build_margins(&qv(&[1, 0, 7, 300]), Chunking::default(), 1.0);
        assert!(m.min.iter().all(|&x| x == 0));
    }

    #[test]
    fn invariants_hold() {
        let m = build_margins(&qv(&[-100, 40, 0, 2047, -2048]), Chunking::default(), 1.0);
        for b in 0..m.levels() {
            assert!(m.min[b] <= 0 && m.max[b] >= 0);
            if b > 0 {
                assert!(m.min[b].abs() <= m.min[b - 1].abs());
                assert!(m.max[b] <= m.max[b - 1]);
            }
        }
    }

    #[test]
    fn scale_factor_folds_dimension() {
        let q = QuantizedVector {
            values: vec![1; 64],
            scale: 0.5,
            bits: 12,
        };
        assert_eq!(scale_factor(&q, 0.25), 0.5 * 0.25 / 8.0);
    }

    #[test]
    fn worked_bounds_example() {
        let m = build_margins(&qv(&[3, -2]), Chunking::default(), 1.0);
        let ps = 3 * -1280 + -2 * 256;
        assert_eq!(ps, -4352);
        let (lo, hi) = score_bounds(ps, 0, &m);
        assert_eq!(lo, (-4352 - 510) as f64 * m.scale_factor);
        assert_eq!(hi, (-4352 + 765) as f64 * m.scale_factor);
        assert_eq!(
            score_bounds(0, 0, &build_margins(&qv(&[0, 0]), Chunking::default(), 1.0)),
            (0.0, 0.0)
        );
    }
}
