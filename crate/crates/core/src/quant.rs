//! Fixed-point quantization and most-significant-first chunk encoding.
//!
//! A `bits`-wide two's-complement code `a_{N-1} .. a_0` has value
//! `-a_{N-1} 2^{N-1} + sum_{i<N-1} a_i 2^i`. Splitting it into `chunk_bits`
//! wide fields from the top down puts the sign bit in chunk 0, so chunk 0 is
//! read as a signed field and every later chunk as an unsigned one. Summing
//! `chunk_b * 2^(chunk_bits * (chunks - 1 - b))` reconstructs the code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default operand precision of the attention datapath.
pub const DEFAULT_PRECISION: u32 = 12;
/// Default width of one streamed key chunk.
pub const DEFAULT_CHUNK_BITS: u32 = 4;

const MAX_PRECISION: u32 = 24;
const MAX_CHUNK_BITS: u32 = 8;

/// Operand precision and chunk width. `chunk_bits` always divides `precision`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawChunking", into = "RawChunking")]
pub struct Chunking {
    precision: u32,
    chunk_bits: u32,
}

#[derive(Serialize, Deserialize)]
struct RawChunking {
    precision: u32,
    chunk_bits: u32,
}

impl TryFrom<RawChunking> for Chunking {
    type Error = Error;

    fn try_from(raw: RawChunking) -> Result<Self> {
        Chunking::new(raw.precision, raw.chunk_bits)
    }
}

impl From<Chunking> for RawChunking {
    fn from(c: Chunking) -> Self {
        RawChunking {
            precision: c.precision,
            chunk_bits: c.chunk_bits,
        }
    }
}

impl Default for Chunking {
    fn default() -> Self {
        Self {
            precision: DEFAULT_PRECISION,
            chunk_bits: DEFAULT_CHUNK_BITS,
        }
    }
}

impl Chunking {
    pub fn new(precision: u32, chunk_bits: u32) -> Result<Self> {
        if !(2..=MAX_PRECISION).contains(&precision) {
            return Err(Error::Config(format!(
                "precision {precision} outside 2..={MAX_PRECISION}"
            )));
        }
        if chunk_bits == 0 || chunk_bits > MAX_CHUNK_BITS {
            return Err(Error::Config(format!(
                "chunk width {chunk_bits} outside 1..={MAX_CHUNK_BITS}"
            )));
        }
        if !precision.is_multiple_of(chunk_bits) {
            return Err(Error::Config(format!(
                "chunk width {chunk_bits} does not divide precision {precision}"
            )));
        }
        Ok(Self {
            precision,
            chunk_bits,
        })
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn chunk_bits(&self) -> u32 {
        self.chunk_bits
    }

    /// Number of chunks per code.
    pub fn chunks(&self) -> usize {
        (self.precision / self.chunk_bits) as usize
    }

    pub fn last_chunk(&self) -> usize {
        self.chunks() - 1
    }

    /// Count of low bits still unknown once chunks `0..=b` have arrived.
    pub fn unknown_bits(&self, b: usize) -> u32 {
        debug_assert!(b < self.chunks());
        self.chunk_bits * (self.chunks() - 1 - b) as u32
    }

    /// Positional weight `2^unknown_bits(b)` of chunk `b`.
    pub fn chunk_weight(&self, b: usize) -> i64 {
        1i64 << self.unknown_bits(b)
    }

    pub fn min_code(&self) -> i32 {
        -(1i32 << (self.precision - 1))
    }

    pub fn max_code(&self) -> i32 {
        (1i32 << (self.precision - 1)) - 1
    }

    /// Bits occupied in memory by one chunk of a `dim`-element key.
    pub fn chunk_bits_for_dim(&self, dim: usize) -> u64 {
        dim as u64 * self.chunk_bits as u64
    }

    /// Split one code into its chunk fields, most significant first.
    pub fn split_code(&self, code: i32) -> Vec<i16> {
        debug_assert!((self.min_code()..=self.max_code()).contains(&code));
        let raw = (code as u32) & mask(self.precision);
        (0..self.chunks())
            .map(|b| {
                let field = (raw >> self.unknown_bits(b)) & mask(self.chunk_bits);
                if b == 0 {
                    twos_complement_value(field, self.chunk_bits) as i16
                } else {
                    field as i16
                }
            })
            .collect()
    }

    /// Inverse of [`Chunking::split_code`].
    pub fn join_chunks(&self, fields: &[i16]) -> i32 {
        fields
            .iter()
            .enumerate()
            .map(|(b, &c)| c as i64 * self.chunk_weight(b))
            .sum::<i64>() as i32
    }
}

fn mask(bits: u32) -> u32 {
    if bits >= 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

/// Value of a `width`-bit two's-complement bit pattern: the top bit weighs
/// `-2^(width-1)`, every other bit adds a non-negative power of two.
pub fn twos_complement_value(raw: u32, width: u32) -> i32 {
    let raw = raw & mask(width);
    let sign = (raw >> (width - 1)) & 1;
    let rest = raw & mask(width - 1);
    rest as i32 - ((sign as i64) << (width - 1)) as i32
}

/// Symmetric fixed-point vector: `real = code * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedVector {
    pub values: Vec<i32>,
    pub scale: f64,
    pub bits: u32,
}

impl QuantizedVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.values.iter().map(|&c| c as f64 * self.scale).collect()
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=MAX_PRECISION).contains(&bits) {
        return Err(Error::Config(format!(
            "precision {bits} outside 2..={MAX_PRECISION}"
        )));
    }
    Ok(())
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidInput(
            "cannot quantize an empty vector".into(),
        ));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite element {} at index {i}",
            v[i]
        )));
    }
    Ok(())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn encode(v: &[f64], bits: u32, max_abs: f64) -> QuantizedVector {
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    if max_abs == 0.0 {
        return QuantizedVector {
            values: vec![0; v.len()],
            scale: 1.0,
            bits,
        };
    }
    let lo = -(1i64 << (bits - 1));
    let hi = (1i64 << (bits - 1)) - 1;
    // x * qmax / max_abs keeps exact midpoints (0.5 * 2047 = 1023.5) exact.
    let values = v
        .iter()
        .map(|&x| ((x * qmax / max_abs).round() as i64).clamp(lo, hi) as i32)
        .collect();
    QuantizedVector {
        values,
        scale: max_abs / qmax,
        bits,
    }
}

/// Symmetric per-vector quantization with round-to-nearest.
///
/// `scale = max|v| / (2^(bits-1) - 1)`; an all-zero input gets `scale = 1`.
pub fn quantize(v: &[f64], bits: u32) -> Result<QuantizedVector> {
    check_bits(bits)?;
    check_finite(v)?;
    Ok(encode(v, bits, max_abs(v)))
}

/// Quantize several rows with one shared scale taken over all of them.
///
/// Keys of one attention instance share a scale so that a single
/// score scale factor applies to every token.
pub fn quantize_rows(rows: &[Vec<f64>], bits: u32) -> Result<Vec<QuantizedVector>> {
    check_bits(bits)?;
    if rows.is_empty() {
        return Err(Error::InvalidInput("no rows to quantize".into()));
    }
    let dim = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(Error::InvalidInput(format!(
                "row {i} has length {} but row 0 has {dim}",
                r.len()
            )));
        }
        check_finite(r)?;
    }
    let m = rows.iter().map(|r| max_abs(r)).fold(0.0, f64::max);
    Ok(rows.iter().map(|r| encode(r, bits, m)).collect())
}

/// A key vector split into chunk vectors, `chunks[b][j]` being chunk `b` of
/// element `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkedKey {
    pub chunks: Vec<Vec<i16>>,
    pub scale: f64,
    pub chunking: Chunking,
}

impl ChunkedKey {
    pub fn dim(&self) -> usize {
        self.chunks.first().map_or(0, Vec::len)
    }

    pub fn chunk(&self, b: usize) -> &[i16] {
        &self.chunks[b]
    }
}

pub fn to_chunks(q: &QuantizedVector, chunk_bits: u32) -> Result<ChunkedKey> {
    let chunking = Chunking::new(q.bits, chunk_bits)?;
    let mut chunks = vec![Vec::with_capacity(q.dim()); chunking.chunks()];
    for &code in &q.values {
        if !(chunking.min_code()..=chunking.max_code()).contains(&code) {
            return Err(Error::InvalidInput(format!(
                "code {code} does not fit in {} bits",
                q.bits
            )));
        }
        for (b, field) in chunking.split_code(code).into_iter().enumerate() {
            chunks[b].push(field);
        }
    }
    Ok(ChunkedKey {
        chunks,
        scale: q.scale,
        chunking,
    })
}

pub fn from_chunks(k: &ChunkedKey) -> QuantizedVector {
    let values = (0..k.dim())
        .map(|j| {
            let fields: Vec<i16> = k.chunks.iter().map(|c| c[j]).collect();
            k.chunking.join_chunks(&fields)
        })
        .collect();
    QuantizedVector {
        values,
        scale: k.scale,
        bits: k.chunking.precision(),
    }
}

/// Per-element value known after chunks `0..=upto_b`, unknown low bits as 0.
pub fn partial_value(k: &ChunkedKey, upto_b: usize) -> Result<Vec<i64>> {
    if upto_b >= k.chunking.chunks() {
        return Err(Error::InvalidInput(format!(
            "chunk index {upto_b} out of range for {} chunks",
            k.chunking.chunks()
        )));
    }
    Ok((0..k.dim())
        .map(|j| {
            (0..=upto_b)
                .map(|b| k.chunks[b][j] as i64 * k.chunking.chunk_weight(b))
                .sum()
        })
        .collect())
}
