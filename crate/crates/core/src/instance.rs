//! One quantized attention instance: a query, chunked keys and values.

use crate::error::{Error, Result};
use crate::io::AttentionTrace;
use crate::quant::{quantize, quantize_rows, to_chunks, ChunkedKey, Chunking, QuantizedVector};

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub q: QuantizedVector,
    pub keys: Vec<ChunkedKey>,
    pub values: Vec<QuantizedVector>,
    pub chunking: Chunking,
}

impl Instance {
    /// Quantize real tensors. The query gets its own scale; keys share one
    /// scale and values share another.
    pub fn from_real(
        q: &[f64],
        keys: &[Vec<f64>],
        values: &[Vec<f64>],
        chunking: Chunking,
    ) -> Result<Self> {
        if keys.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "{} keys but {} values",
                keys.len(),
                values.len()
            )));
        }
        let bits = chunking.precision();
        let q = quantize(q, bits)?;
        let key_codes = quantize_rows(keys, bits)?;
        let values = quantize_rows(values, bits)?;
        let keys = key_codes
            .iter()
            .map(|k| to_chunks(k, chunking.chunk_bits()))
            .collect::<Result<Vec<_>>>()?;
        let inst = Self {
            q,
            keys,
            values,
            chunking,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn from_trace(trace: &AttentionTrace, chunking: Chunking) -> Result<Self> {
        Self::from_real(
            &trace.q_f64(),
            &trace.keys_f64(),
            &trace.values_f64(),
            chunking,
        )
    }

    /// Build directly from integer codes. Keys share `key_scale`, values
    /// share `value_scale`.
    pub fn from_codes(
        q: QuantizedVector,
        key_codes: &[Vec<i32>],
        key_scale: f64,
        value_codes: &[Vec<i32>],
        value_scale: f64,
        chunking: Chunking,
    ) -> Result<Self> {
        if q.bits != chunking.precision() {
            return Err(Error::InvalidInput(format!(
                "query precision {} differs from chunking precision {}",
                q.bits,
                chunking.precision()
            )));
        }
        let keys = key_codes
            .iter()
            .map(|codes| {
                to_chunks(
                    &QuantizedVector {
                        values: codes.clone(),
                        scale: key_scale,
                        bits: chunking.precision(),
                    },
                    chunking.chunk_bits(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let values = value_codes
            .iter()
            .map(|codes| QuantizedVector {
                values: codes.clone(),
                scale: value_scale,
                bits: chunking.precision(),
            })
            .collect();
        let inst = Self {
            q,
            keys,
            values,
            chunking,
        };
        inst.validate()?;
        Ok(inst)
    }

    fn validate(&self) -> Result<()> {
        if self.keys.is_empty() {
            return Err(Error::InvalidInput("instance has no tokens".into()));
        }
        if self.keys.len() != self.values.len() {
            return Err(Error::InvalidInput("key/value count mismatch".into()));
        }
        let d = self.q.dim();
        if d == 0 {
            return Err(Error::InvalidInput("zero-dimensional query".into()));
        }
        if let Some(i) = self.keys.iter().position(|k| k.dim() != d) {
            return Err(Error::InvalidInput(format!(
                "key {i} dimension differs from query"
            )));
        }
        if let Some(i) = self.values.iter().position(|v| v.dim() != d) {
            return Err(Error::InvalidInput(format!(
                "value {i} dimension differs from query"
            )));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.keys.len()
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    pub fn key_scale(&self) -> f64 {
        self.keys[0].scale
    }
}
