//! Trace files, synthetic workloads and JSON run configuration.
//!
//! # TPKV trace format
//!
//! All integers and floats little-endian:
//!
//! | field    | type            |
//! |----------|-----------------|
//! | magic    | `b"TPKV"`       |
//! | version  | u16 (= 1)       |
//! | d_h      | u32             |
//! | n        | u32 (>= 1)      |
//! | q        | d_h x f32       |
//! | K        | n x d_h x f32, row major |
//! | V        | n x d_h x f32, row major |
//! | metadata | optional: u32 byte length, then UTF-8 JSON |

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::PruneConfig;
use crate::error::{Error, Result};
use crate::report::EnergyModel;
use crate::sched::{MemoryModel, SimConfig};

pub const TRACE_MAGIC: &[u8; 4] = b"TPKV";
pub const TRACE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<String>,
}

/// Real-valued query, keys and values of one attention instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub d_h: usize,
    pub q: Vec<f32>,
    /// `n x d_h`, row major.
    pub keys: Vec<f32>,
    /// `n x d_h`, row major.
    pub values: Vec<f32>,
    pub meta: Option<TraceMeta>,
}

impl AttentionTrace {
    pub fn new(
        q: Vec<f32>,
        keys: Vec<Vec<f32>>,
        values: Vec<Vec<f32>>,
        meta: Option<TraceMeta>,
    ) -> Result<Self> {
        let d_h = q.len();
        let trace = Self {
            d_h,
            q,
            keys: keys.concat(),
            values: values.concat(),
            meta,
        };
        if keys.iter().chain(&values).any(|r| r.len() != d_h) {
            return Err(Error::InvalidInput(
                "row length differs from query dimension".into(),
            ));
        }
        trace.validate()?;
        Ok(trace)
    }

    pub fn n_tokens(&self) -> usize {
        self.keys.len().checked_div(self.d_h).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 {
            return Err(Error::InvalidInput("d_h must be positive".into()));
        }
        if self.q.len() != self.d_h
            || !self.keys.len().is_multiple_of(self.d_h)
            || self.keys.len() != self.values.len()
        {
            return Err(Error::InvalidInput("inconsistent trace shapes".into()));
        }
        if self.keys.is_empty() {
            return Err(Error::InvalidInput("trace has no tokens".into()));
        }
        if self
            .q
            .iter()
            .chain(&self.keys)
            .chain(&self.values)
            .any(|x| !x.is_finite())
        {
            return Err(Error::InvalidInput(
                "trace contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.d_h..(i + 1) * self.d_h]
    }

    pub fn value(&self, i: usize) -> &[f32] {
        &self.values[i * self.d_h..(i + 1) * self.d_h]
    }

    pub fn q_f64(&self) -> Vec<f64> {
        self.q.iter().map(|&x| x as f64).collect()
    }

    pub fn keys_f64(&self) -> Vec<Vec<f64>> {
        rows_f64(&self.keys, self.d_h)
    }

    pub fn values_f64(&self) -> Vec<Vec<f64>> {
        rows_f64(&self.values, self.d_h)
    }
}

fn rows_f64(flat: &[f32], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d)
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect()
}

pub fn encode_trace(trace: &AttentionTrace) -> Result<Vec<u8>> {
    trace.validate()?;
    let n = trace.n_tokens();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (trace.d_h * (2 * n + 1)));
    out.extend_from_slice(TRACE_MAGIC);
    out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    out.extend_from_slice(
        &u32::try_from(trace.d_h)
            .map_err(|_| Error::Format("d_h too large".into()))?
            .to_le_bytes(),
    );
    out.extend_from_slice(
        &u32::try_from(n)
            .map_err(|_| Error::Format("n too large".into()))?
            .to_le_bytes(),
    );
    for x in trace.q.iter().chain(&trace.keys).chain(&trace.values) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(meta) = &trace.meta {
        let json = serde_json::to_vec(meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{what} size overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode_trace(buf: &[u8]) -> Result<AttentionTrace> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4, "magic")? != TRACE_MAGIC {
        return Err(Error::Format("bad magic, expected TPKV".into()));
    }
    let version = cur.u16("version")?;
    if version != TRACE_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let d_h = cur.u32("d_h")? as usize;
    let n = cur.u32("n")? as usize;
    if d_h == 0 {
        return Err(Error::Format("d_h must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::Format("n must be at least 1".into()));
    }
    let q = cur.f32s(d_h, "q")?;
    let nd = n
        .checked_mul(d_h)
        .ok_or_else(|| Error::Format("n * d_h overflows".into()))?;
    let keys = cur.f32s(nd, "keys")?;
    let values = cur.f32s(nd, "values")?;
    let meta = if cur.remaining() == 0 {
        None
    } else {
        let len = cur.u32("metadata length")? as usize;
        let json = cur.take(len, "metadata")?;
        if cur.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after metadata",
                cur.remaining()
            )));
        }
        let text = std::str::from_utf8(json)
            .map_err(|e| Error::Format(format!("metadata is not UTF-8: {e}")))?;
        Some(
            serde_json::from_str(text)
                .map_err(|e| Error::Format(format!("bad metadata JSON: {e}")))?,
        )
    };
    let trace = AttentionTrace {
        d_h,
        q,
        keys,
        values,
        meta,
    };
    trace.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(trace)
}

pub fn write_trace(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_trace(trace)?)?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    decode_trace(&fs::read(path)?)
}

/// Score distribution of a synthetic instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distribution {
    /// Key elements i.i.d. `N(0, sigma^2)`.
    Gaussian { sigma: f64 },
    /// `k_dominant` tokens (the first one and the most recent ones) score at
    /// least `gap` above every other token.
    Peaked { k_dominant: usize, gap: f64 },
    /// Scores decay with distance from the newest token; token 0 gets a
    /// fixed boost.
    Locality {
        decay_rate: f64,
        first_token_boost: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub distribution: Distribution,
    pub n: usize,
    pub d_h: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d_h == 0 {
            return Err(Error::Config("n and d_h must be positive".into()));
        }
        if self.n > u32::MAX as usize || self.d_h > u32::MAX as usize {
            return Err(Error::Config("n and d_h must fit in 32 bits".into()));
        }
        match self.distribution {
            Distribution::Gaussian { sigma } if !(sigma.is_finite() && sigma >= 0.0) => Err(
                Error::Config(format!("sigma {sigma} must be finite and >= 0")),
            ),
            Distribution::Peaked { k_dominant, gap } => {
                if k_dominant == 0 || k_dominant > self.n {
                    Err(Error::Config(format!(
                        "k_dominant {k_dominant} outside 1..={}",
                        self.n
                    )))
                } else if !(gap.is_finite() && gap > 0.0) {
                    Err(Error::Config(format!("gap {gap} must be finite and > 0")))
                } else {
                    Ok(())
                }
            }
            Distribution::Locality {
                decay_rate,
                first_token_boost,
            } if !(decay_rate.is_finite()
                && decay_rate >= 0.0
                && first_token_boost.is_finite()) =>
            {
                Err(Error::Config(
                    "locality parameters must be finite, decay >= 0".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// `kind:key=value,...`, e.g. `peaked:k=8,gap=16,n=2048,d=64,seed=1`.
///
/// Keys: `n`, `d` (or `d_h`), `seed`, `sigma` (gaussian), `k`/`gap`
/// (peaked), `decay`/`boost` (locality).
impl FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, params) = s.split_once(':').unwrap_or((s, ""));
        let mut n = 256usize;
        let mut d_h = 64usize;
        let mut seed = 0u64;
        let mut sigma = 1.0;
        let mut k = 1usize;
        let mut gap = 16.0;
        let mut decay = 0.05;
        let mut boost = 4.0;
        for kv in params.split(',').filter(|p| !p.is_empty()) {
            let (key, val) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{kv}`")))?;
            let bad =
                |e: &dyn std::fmt::Display| Error::Config(format!("bad value for `{key}`: {e}"));
            match key.trim() {
                "n" => n = val.parse().map_err(|e| bad(&e))?,
                "d" | "d_h" => d_h = val.parse().map_err(|e| bad(&e))?,
                "seed" => seed = val.parse().map_err(|e| bad(&e))?,
                "sigma" => sigma = val.parse().map_err(|e| bad(&e))?,
                "k" => k = val.parse().map_err(|e| bad(&e))?,
                "gap" => gap = val.parse().map_err(|e| bad(&e))?,
                "decay" => decay = val.parse().map_err(|e| bad(&e))?,
                "boost" => boost = val.parse().map_err(|e| bad(&e))?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown synthetic parameter `{other}`"
                    )))
                }
            }
        }
        let distribution = match kind {
            "gaussian" => Distribution::Gaussian { sigma },
            "peaked" => Distribution::Peaked { k_dominant: k, gap },
            "locality" => Distribution::Locality {
                decay_rate: decay,
                first_token_boost: boost,
            },
            other => return Err(Error::Config(format!("unknown distribution `{other}`"))),
        };
        let spec = SyntheticSpec {
            distribution,
            n,
            d_h,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize, sigma: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..d).map(|_| sigma * normal.sample(rng)).collect()
}

/// Key whose real score against `q` is exactly `score`: a component along
/// `q` plus unit-variance noise orthogonal to it.
fn key_with_score(rng: &mut ChaCha8Rng, q: &[f64], q_norm: f64, score: f64) -> Vec<f64> {
    let d = q.len();
    let along = score * (d as f64).sqrt() / q_norm;
    let mut noise = normal_vec(rng, d, 1.0);
    let proj: f64 = noise.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (q_norm * q_norm);
    for (x, qj) in noise.iter_mut().zip(q) {
        *x -= proj * qj;
    }
    noise
        .iter()
        .zip(q)
        .map(|(x, qj)| x + along * qj / q_norm)
        .collect()
}

/// Deterministic synthetic instance for `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<AttentionTrace> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, d) = (spec.n, spec.d_h);
    let normal = Normal::new(0.0, 1.0).unwrap();

    let mut q = normal_vec(&mut rng, d, 1.0);
    let mut q_norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if q_norm == 0.0 {
        q[0] = 1.0;
        q_norm = 1.0;
    }

    let keys: Vec<Vec<f64>> = match spec.distribution {
        Distribution::Gaussian { sigma } => {
            (0..n).map(|_| normal_vec(&mut rng, d, sigma)).collect()
        }
        Distribution::Peaked { k_dominant, gap } => (0..n)
            .map(|i| {
                let dominant = i == 0 || i + k_dominant > n;
                let score = if dominant {
                    gap + 0.5 * rng.random::<f64>()
                } else {
                    -f64::abs(normal.sample(&mut rng))
                };
                key_with_score(&mut rng, &q, q_norm, score)
            })
            .collect(),
        Distribution::Locality {
            decay_rate,
            first_token_boost,
        } => (0..n)
            .map(|i| {
                let score = if i == 0 {
                    first_token_boost
                } else {
                    4.0 * (-decay_rate * (n - 1 - i) as f64).exp() + 0.5 * normal.sample(&mut rng)
                };
                key_with_score(&mut rng, &q, q_norm, score)
            })
            .collect(),
    };
    let values: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, d, 1.0)).collect();

    let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    AttentionTrace::new(
        to_f32(&q),
        keys.iter().map(|k| to_f32(k)).collect(),
        values.iter().map(|v| to_f32(v)).collect(),
        Some(TraceMeta {
            model: Some("synthetic".into()),
            instance: Some(serde_json::to_string(&spec.distribution)?),
            ..TraceMeta::default()
        }),
    )
}

/// Everything a run needs besides its input tensors. Every field has a
/// default, so `{}` is a valid configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prune: PruneConfig,
    pub memory: MemoryModel,
    pub sim: SimConfig,
    pub energy: EnergyModel,
    pub synthetic: Option<SyntheticSpec>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.prune.validate()?;
        self.memory.validate()?;
        self.sim.validate()?;
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        Ok(())
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| Error::Config(format!("bad configuration file: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
