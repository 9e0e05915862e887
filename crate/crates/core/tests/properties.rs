//! Property tests for quantization, chunking, margins and softmax helpers.

use proptest::prelude::*;

use kvprune::engine::DenominatorState;
use kvprune::margin::{build_margins, score_bounds};
use kvprune::oracle::{log_sum_exp, softmax_direct, softmax_log};
use kvprune::quant::{from_chunks, partial_value, quantize, to_chunks, Chunking, QuantizedVector};

fn qv(codes: Vec<i32>, bits: u32) -> QuantizedVector {
    QuantizedVector {
        values: codes,
        scale: 1.0,
        bits,
    }
}

/// The code with its `r` low bits cleared, computed arithmetically.
fn truncate(code: i64, r: u32) -> i64 {
    code - code.rem_euclid(1 << r)
}

/// Dot-product extremes over every completion of the low `r` bits of each
/// key element, by nested enumeration independent of the chunk encoding.
fn enumerate_extremes(q: &[i32], key: &[i32], r: u32) -> (i64, i64) {
    let prefix: Vec<i64> = key.iter().map(|&c| truncate(c as i64, r)).collect();
    let radix = 1i64 << r;
    let combos = radix.pow(q.len() as u32);
    let mut lo = i64::MAX;
    let mut hi = i64::MIN;
    for mut c in 0..combos {
        let mut s = 0;
        for (&qj, &p) in q.iter().zip(&prefix) {
            s += qj as i64 * (p + c % radix);
            c /= radix;
        }
        lo = lo.min(s);
        hi = hi.max(s);
    }
    (lo, hi)
}

fn code() -> impl Strategy<Value = i32> {
    -2048i32..=2047
}

fn chunking() -> impl Strategy<Value = Chunking> {
    prop_oneof![
        Just(Chunking::new(12, 4).unwrap()),
        Just(Chunking::new(12, 3).unwrap()),
        Just(Chunking::new(12, 6).unwrap()),
        Just(Chunking::new(6, 2).unwrap()),
        Just(Chunking::new(8, 4).unwrap()),
    ]
}

proptest! {
    #[test]
    fn chunk_round_trip(c in chunking(), seed in any::<u64>()) {
        // Derive a code in range from the seed so one strategy covers every chunking.
        let span = (c.max_code() - c.min_code() + 1) as u64;
        let code = c.min_code() + (seed % span) as i32;
        let k = to_chunks(&qv(vec![code], c.precision()), c.chunk_bits()).unwrap();
        prop_assert_eq!(from_chunks(&k).values, vec![code]);
        prop_assert_eq!(k.chunks.len(), c.chunks());
        prop_assert!((-(1 << (c.chunk_bits() - 1))..(1 << (c.chunk_bits() - 1))).contains(&(k.chunk(0)[0] as i32)));
        for b in 1..c.chunks() {
            prop_assert!((0..(1 << c.chunk_bits())).contains(&(k.chunk(b)[0] as i32)));
        }
    }

    #[test]
    fn truncation_gap(c in chunking(), codes in prop::collection::vec(-2048i32..=2047, 1..6)) {
        let codes: Vec<i32> = codes.into_iter().map(|x| x.clamp(c.min_code(), c.max_code())).collect();
        let k = to_chunks(&qv(codes.clone(), c.precision()), c.chunk_bits()).unwrap();
        for b in 0..c.chunks() {
            let r = c.unknown_bits(b);
            let partial = partial_value(&k, b).unwrap();
            for (&x, &p) in codes.iter().zip(&partial) {
                prop_assert_eq!(p, truncate(x as i64, r));
                prop_assert!(0 <= x as i64 - p && x as i64 - p < 1 << r);
            }
        }
    }

    #[test]
    fn quantization_error_within_half_step(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let q = quantize(&v, 12).unwrap();
        let qmax = 2047.0;
        let max_abs = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if max_abs == 0.0 {
            prop_assert_eq!(q.scale, 1.0);
        } else {
            prop_assert!((q.scale - max_abs / qmax).abs() <= 1e-15 * q.scale.max(1.0));
        }
        for (x, y) in v.iter().zip(q.dequantize()) {
            prop_assert!((x - y).abs() <= q.scale / 2.0 * (1.0 + 1e-9));
        }
        prop_assert!(q.values.iter().all(|c| (-2047..=2047).contains(c)));
    }

    #[test]
    fn margins_match_exhaustive_extremes_two_dims(
        q in prop::collection::vec(code(), 1..=2),
        key in prop::collection::vec(code(), 2),
        b in 0usize..3,
    ) {
        let c = Chunking::default();
        let key = key[..q.len()].to_vec();
        let r = c.unknown_bits(b);
        prop_assume!(r * q.len() as u32 <= 16);
        let k = to_chunks(&qv(key.clone(), 12), 4).unwrap();
        let m = build_margins(&qv(q.clone(), 12), c, 1.0);
        let ps: i64 = partial_value(&k, b).unwrap().iter().zip(&q).map(|(p, &x)| p * x as i64).sum();
        let (lo, hi) = enumerate_extremes(&q, &key, r);
        prop_assert_eq!(ps + m.min[b], lo);
        prop_assert_eq!(ps + m.max[b], hi);
        prop_assert_eq!(kvprune::oracle::brute_force_bounds(&qv(q, 12), &k, b).unwrap(), (lo, hi));
    }

    #[test]
    fn sampled_completions_stay_within_bounds(
        q in prop::collection::vec(code(), 64),
        key in prop::collection::vec(code(), 64),
        fills in prop::collection::vec(prop::collection::vec(any::<u16>(), 64), 8),
        scale in 1e-4f64..1.0,
    ) {
        let c = Chunking::default();
        let qq = QuantizedVector { values: q.clone(), scale, bits: 12 };
        let k = to_chunks(&QuantizedVector { values: key.clone(), scale: 0.01, bits: 12 }, 4).unwrap();
        let m = build_margins(&qq, c, 0.01);
        let exact: i64 = q.iter().zip(&key).map(|(&a, &b)| a as i64 * b as i64).sum();
        let exact_real = exact as f64 * m.scale_factor;
        let tol = 1e-9 * exact_real.abs().max(1.0);
        let mut prev = (f64::NEG_INFINITY, f64::INFINITY);
        for b in 0..3 {
            let ps: i64 = partial_value(&k, b).unwrap().iter().zip(&q).map(|(p, &x)| p * x as i64).sum();
            let (lo, hi) = score_bounds(ps, b, &m);
            prop_assert!(lo <= exact_real + tol && exact_real <= hi + tol);
            prop_assert!(lo >= prev.0 && hi <= prev.1, "bounds must tighten");
            prev = (lo, hi);
            let r = c.unknown_bits(b);
            let prefix: Vec<i64> = key.iter().map(|&x| truncate(x as i64, r)).collect();
            for f in &fills {
                let s: i64 = q.iter().zip(&prefix).zip(f)
                    .map(|((&qj, &p), &low)| qj as i64 * (p + (low as i64 & ((1 << r) - 1))))
                    .sum();
                prop_assert!(ps + m.min[b] <= s && s <= ps + m.max[b]);
            }
        }
        prop_assert_eq!(prev.0, prev.1);
    }

    #[test]
    fn margins_depend_only_on_the_query(c in chunking(), q in prop::collection::vec(-31i32..=31, 1..16)) {
        let m = build_margins(&qv(q.clone(), c.precision()), c, 0.5);
        let pos: i64 = q.iter().filter(|&&x| x > 0).map(|&x| x as i64).sum();
        let neg: i64 = q.iter().filter(|&&x| x < 0).map(|&x| x as i64).sum();
        for b in 0..c.chunks() {
            let span = (1i64 << c.unknown_bits(b)) - 1;
            prop_assert_eq!(m.max[b], span * pos);
            prop_assert_eq!(m.min[b], span * neg);
            prop_assert!(m.min[b] <= 0 && 0 <= m.max[b]);
            if b > 0 {
                prop_assert!(m.max[b] <= m.max[b - 1] && m.min[b] >= m.min[b - 1]);
            }
        }
        prop_assert_eq!(m.min[c.last_chunk()], 0);
        prop_assert_eq!(m.max[c.last_chunk()], 0);
    }

    #[test]
    fn softmax_is_permutation_equivariant(
        s in prop::collection::vec(-50f64..50.0, 1..30),
        rot in 0usize..30,
    ) {
        let rot = rot % s.len();
        let mut rotated = s.clone();
        rotated.rotate_left(rot);
        let p = softmax_direct(&s);
        let mut pr = p.clone();
        pr.rotate_left(rot);
        for (a, b) in pr.iter().zip(softmax_direct(&rotated)) {
            prop_assert!((a - b).abs() <= 1e-15 + 1e-12 * a);
        }
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(s in prop::collection::vec(-50f64..50.0, 1..30), shift in -500f64..500.0) {
        let shifted: Vec<f64> = s.iter().map(|x| x + shift).collect();
        for (a, b) in softmax_direct(&s).iter().zip(softmax_log(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-13 + 1e-9 * a);
        }
    }

    #[test]
    fn streaming_denominator_matches_log_sum_exp(
        xs in prop::collection::vec(-200f64..200.0, 1..50),
        bumps in prop::collection::vec(0f64..30.0, 1..50),
    ) {
        let mut den = DenominatorState::new();
        for &x in &xs {
            den.add(x);
        }
        prop_assert!((den.ln_value() - log_sum_exp(&xs)).abs() <= 1e-12 * log_sum_exp(&xs).abs().max(1.0));

        // Raise some contributions in place.
        let mut current = xs.clone();
        let mut last = den.ln_value();
        for (i, &bump) in bumps.iter().enumerate() {
            let j = i % current.len();
            let new = current[j] + bump;
            den.add_delta(new, Some(current[j]));
            current[j] = new;
            prop_assert!(den.ln_value() >= last);
            last = den.ln_value();
        }
        let expect = log_sum_exp(&current);
        prop_assert!((den.ln_value() - expect).abs() <= 1e-9 * expect.abs().max(1.0));
    }
}

#[test]
fn exhaustive_code_round_trip() {
    let c = Chunking::default();
    for code in c.min_code()..=c.max_code() {
        let k = to_chunks(&qv(vec![code], 12), 4).unwrap();
        let f = k.chunks.iter().map(|ch| ch[0] as i64).collect::<Vec<_>>();
        assert_eq!(f[0] * 256 + f[1] * 16 + f[2], code as i64);
        assert_eq!(from_chunks(&k).values[0], code);
    }
}
