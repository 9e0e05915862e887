//! Functional pruning engine.
//!
//! Each processed chunk updates a token's partial integer score, contributes
//! the growth of `exp(s_min)` to a running subset denominator and then tests
//! `s_max - ln(den) <= ln(thr)`. A token passing the test is pruned; otherwise
//! the next chunk is requested, or the token survives after its last chunk.
//! Survivors are then re-scored exactly and their value vectors weighted by
//! the softmax probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::margin::{build_margins, score_bounds, MarginTable};
use crate::quant::{ChunkedKey, Chunking, QuantizedVector};

/// Default pruning threshold.
pub const DEFAULT_THRESHOLD: f64 = 1e-3;

/// Token visiting order for score calculation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderPolicy {
    /// First token, then the most recent ones walking backwards.
    #[default]
    Locality,
    /// Index order.
    Sequential,
}

impl OrderPolicy {
    pub fn sequence(self, n: usize) -> Vec<usize> {
        match self {
            OrderPolicy::Sequential => (0..n).collect(),
            OrderPolicy::Locality => {
                let mut order = Vec::with_capacity(n);
                if n > 0 {
                    order.push(0);
                    order.extend((1..n).rev());
                }
                order
            }
        }
    }
}

impl std::str::FromStr for OrderPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "locality" => Ok(OrderPolicy::Locality),
            "sequential" => Ok(OrderPolicy::Sequential),
            other => Err(Error::Config(format!("unknown order policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Probability threshold in `[0, 1)`. Zero disables pruning.
    pub thr: f64,
    pub order: OrderPolicy,
    pub chunking: Chunking,
    /// Rebuild the softmax denominator from survivors' exact scores. When
    /// false the step-0 estimation denominator is reused as is.
    pub renormalize_output: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            thr: DEFAULT_THRESHOLD,
            order: OrderPolicy::Locality,
            chunking: Chunking::default(),
            renormalize_output: true,
        }
    }
}

impl PruneConfig {
    pub fn with_thr(thr: f64) -> Self {
        Self {
            thr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.thr) {
            return Err(Error::Config(format!(
                "threshold {} outside [0, 1)",
                self.thr
            )));
        }
        Ok(())
    }

    /// `ln(thr)`; negative infinity when pruning is disabled.
    pub fn ln_thr(&self) -> f64 {
        self.thr.ln()
    }
}

/// Streaming log-sum-exp accumulator for `sum exp(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenominatorState {
    max_exponent: f64,
    scaled_sum: f64,
    ln_value: f64,
    contributions: usize,
}

impl Default for DenominatorState {
    fn default() -> Self {
        Self::new()
    }
}

impl DenominatorState {
    pub fn new() -> Self {
        Self {
            max_exponent: f64::NEG_INFINITY,
            scaled_sum: 0.0,
            ln_value: f64::NEG_INFINITY,
            contributions: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.contributions == 0
    }

    /// Number of `add`/`add_delta` calls that changed the sum.
    pub fn contributions(&self) -> usize {
        self.contributions
    }

    /// `ln(sum)`, or negative infinity before the first contribution.
    pub fn ln_value(&self) -> f64 {
        self.ln_value
    }

    /// Add `exp(x)`.
    pub fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max_exponent {
            self.scaled_sum = self.scaled_sum * (self.max_exponent - x).exp() + 1.0;
            self.max_exponent = x;
        } else {
            self.scaled_sum += (x - self.max_exponent).exp();
        }
        self.contributions += 1;
        // The true sum only grows; rounding must not make it look smaller.
        let raw = self.max_exponent + self.scaled_sum.ln();
        if raw > self.ln_value {
            self.ln_value = raw;
        }
    }

    /// Replace a token's previous contribution `exp(old)` by `exp(new)`,
    /// i.e. add `exp(new) - exp(old)`. Requires `new >= old`.
    pub fn add_delta(&mut self, new: f64, old: Option<f64>) {
        match old {
            None => self.add(new),
            Some(old) => {
                debug_assert!(new >= old, "denominator contribution shrank");
                if new > old {
                    // exp(new) - exp(old) = exp(new) * -expm1(old - new)
                    self.add(new + (-(old - new).exp_m1()).ln());
                }
            }
        }
    }
}

/// Upper bound on a token's probability: `exp(s_max - ln(den))`.
pub fn estimate_p_upper(s_max: f64, den: &DenominatorState) -> f64 {
    (s_max - den.ln_value()).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenStatus {
    Pending,
    AwaitingNextChunk,
    Pruned,
    Survivor,
}

/// Progressive per-token state, as held in a scoreboard entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenState {
    pub token_index: usize,
    /// Last chunk index received, `None` before the first chunk.
    pub chunk_level: Option<usize>,
    pub partial_score: i64,
    /// `s_min` at the last contribution; the denominator holds `exp` of it.
    pub last_min_exponent: Option<f64>,
    pub status: TokenStatus,
}

impl TokenState {
    pub fn new(token_index: usize) -> Self {
        Self {
            token_index,
            chunk_level: None,
            partial_score: 0,
            last_min_exponent: None,
            status: TokenStatus::Pending,
        }
    }

    pub fn next_level(&self) -> usize {
        self.chunk_level.map_or(0, |b| b + 1)
    }

    pub fn last_min_exp(&self) -> Option<f64> {
        self.last_min_exponent.map(f64::exp)
    }

    pub fn is_resolved(&self) -> bool {
        matches!(self.status, TokenStatus::Pruned | TokenStatus::Survivor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Prune,
    RequestNext(usize),
    FinalizeSurvivor,
}

/// Everything computed while processing one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkOutcome {
    pub token: usize,
    pub level: usize,
    pub partial_score: i64,
    pub s_min: f64,
    pub s_max: f64,
    /// The token's previous `s_min`, whose `exp` was replaced in the
    /// denominator by `exp(s_min)`.
    pub prev_min_exponent: Option<f64>,
    /// `ln(den)` used for the decision (own contribution included).
    pub ln_den: f64,
    pub p_upper: f64,
    pub decision: Decision,
}

/// Pruning engine for one query.
#[derive(Debug, Clone)]
pub struct Engine {
    q: QuantizedVector,
    margins: MarginTable,
    cfg: PruneConfig,
    ln_thr: f64,
}

impl Engine {
    pub fn new(q: &QuantizedVector, key_scale: f64, cfg: &PruneConfig) -> Result<Self> {
        let margins = build_margins(q, cfg.chunking, key_scale);
        Self::with_margins(q, margins, cfg)
    }

    /// Use a caller-supplied margin table.
    pub fn with_margins(
        q: &QuantizedVector,
        margins: MarginTable,
        cfg: &PruneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if q.bits != cfg.chunking.precision() {
            return Err(Error::Config(format!(
                "query precision {} differs from configured precision {}",
                q.bits,
                cfg.chunking.precision()
            )));
        }
        if margins.levels() != cfg.chunking.chunks() {
            return Err(Error::Config("margin table does not match chunking".into()));
        }
        Ok(Self {
            q: q.clone(),
            margins,
            cfg: cfg.clone(),
            ln_thr: cfg.ln_thr(),
        })
    }

    pub fn margins(&self) -> &MarginTable {
        &self.margins
    }

    pub fn config(&self) -> &PruneConfig {
        &self.cfg
    }

    pub fn levels(&self) -> usize {
        self.cfg.chunking.chunks()
    }

    /// Process chunk `level` of `tok`'s key.
    pub fn process_chunk(
        &self,
        tok: &mut TokenState,
        level: usize,
        chunk: &[i16],
        den: &mut DenominatorState,
    ) -> Result<ChunkOutcome> {
        if tok.is_resolved() {
            return Err(Error::Protocol(format!(
                "chunk {level} for token {} which is already {:?}",
                tok.token_index, tok.status
            )));
        }
        if level != tok.next_level() || level >= self.levels() {
            return Err(Error::Protocol(format!(
                "token {} expected chunk {} but received chunk {level}",
                tok.token_index,
                tok.next_level()
            )));
        }
        if chunk.len() != self.q.dim() {
            return Err(Error::InvalidInput(format!(
                "chunk has {} elements, query has {}",
                chunk.len(),
                self.q.dim()
            )));
        }

        let weight = self.cfg.chunking.chunk_weight(level);
        let mac: i64 = self
            .q
            .values
            .iter()
            .zip(chunk)
            .map(|(&q, &c)| q as i64 * c as i64)
            .sum();
        let partial_score = tok.partial_score + mac * weight;
        let (s_min, s_max) = score_bounds(partial_score, level, &self.margins);

        let prev = tok.last_min_exponent;
        den.add_delta(s_min, prev);
        let ln_den = den.ln_value();

        let decision = if s_max - ln_den <= self.ln_thr {
            Decision::Prune
        } else if level + 1 == self.levels() {
            Decision::FinalizeSurvivor
        } else {
            Decision::RequestNext(level + 1)
        };

        tok.chunk_level = Some(level);
        tok.partial_score = partial_score;
        tok.last_min_exponent = Some(s_min);
        tok.status = match decision {
            Decision::Prune => TokenStatus::Pruned,
            Decision::FinalizeSurvivor => TokenStatus::Survivor,
            Decision::RequestNext(_) => TokenStatus::AwaitingNextChunk,
        };

        Ok(ChunkOutcome {
            token: tok.token_index,
            level,
            partial_score,
            s_min,
            s_max,
            prev_min_exponent: prev,
            ln_den,
            p_upper: (s_max - ln_den).exp(),
            decision,
        })
    }
}

/// A token that survived every chunk, with its exact score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Survivor {
    pub index: usize,
    pub int_score: i64,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Step0Result {
    /// Survivors in the order they were finalized.
    pub survivors: Vec<Survivor>,
    /// Key chunks fetched per token index.
    pub chunks_fetched: Vec<usize>,
    /// Number of tokens pruned right after chunk `b`.
    pub pruned_at_level: Vec<usize>,
    pub pruned: Vec<usize>,
    /// Estimation denominator at the end of step 0.
    pub den: DenominatorState,
    /// Every chunk processed, in processing order.
    pub outcomes: Vec<ChunkOutcome>,
}

impl Step0Result {
    /// Tally per-token results from a completed outcome log.
    pub fn from_outcomes(
        n_tokens: usize,
        levels: usize,
        outcomes: Vec<ChunkOutcome>,
        den: DenominatorState,
    ) -> Self {
        let mut survivors = Vec::new();
        let mut pruned = Vec::new();
        let mut chunks_fetched = vec![0; n_tokens];
        let mut pruned_at_level = vec![0; levels];
        for o in &outcomes {
            chunks_fetched[o.token] += 1;
            match o.decision {
                Decision::Prune => {
                    pruned_at_level[o.level] += 1;
                    pruned.push(o.token);
                }
                Decision::FinalizeSurvivor => survivors.push(Survivor {
                    index: o.token,
                    int_score: o.partial_score,
                    score: o.s_min,
                }),
                Decision::RequestNext(_) => {}
            }
        }
        Self {
            survivors,
            chunks_fetched,
            pruned_at_level,
            pruned,
            den,
            outcomes,
        }
    }

    pub fn total_chunks(&self) -> usize {
        self.chunks_fetched.iter().sum()
    }

    /// `(token, level)` pairs in processing order.
    pub fn processing_order(&self) -> Vec<(usize, usize)> {
        self.outcomes.iter().map(|o| (o.token, o.level)).collect()
    }

    pub fn survivor_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.survivors.iter().map(|s| s.index).collect();
        v.sort_unstable();
        v
    }
}

pub(crate) fn check_keys(
    keys: &[ChunkedKey],
    q: &QuantizedVector,
    cfg: &PruneConfig,
) -> Result<()> {
    let first = keys
        .first()
        .ok_or_else(|| Error::InvalidInput("no keys".into()))?;
    for (i, k) in keys.iter().enumerate() {
        if k.chunking != cfg.chunking {
            return Err(Error::Config(format!(
                "key {i} chunking differs from configuration"
            )));
        }
        if k.dim() != q.dim() {
            return Err(Error::InvalidInput(format!(
                "key {i} dimension differs from query"
            )));
        }
        if k.scale != first.scale {
            return Err(Error::InvalidInput(format!(
                "key {i} scale differs from key 0"
            )));
        }
    }
    Ok(())
}

/// Step 0 with each token fully resolved before the next one starts.
pub fn run_step0(
    q: &QuantizedVector,
    keys: &[ChunkedKey],
    cfg: &PruneConfig,
) -> Result<Step0Result> {
    check_keys(keys, q, cfg)?;
    let order: Vec<(usize, usize)> = cfg
        .order
        .sequence(keys.len())
        .into_iter()
        .flat_map(|t| (0..cfg.chunking.chunks()).map(move |b| (t, b)))
        .collect();
    replay_step0(q, keys, cfg, &order)
}

/// Feed the engine an explicit `(token, chunk)` processing sequence.
///
/// Entries for tokens that have already been resolved are skipped, so a
/// full in-order schedule can be passed for sequential runs. An entry whose
/// chunk index does not follow the token's last one is a protocol error.
pub fn replay_step0(
    q: &QuantizedVector,
    keys: &[ChunkedKey],
    cfg: &PruneConfig,
    sequence: &[(usize, usize)],
) -> Result<Step0Result> {
    check_keys(keys, q, cfg)?;
    let engine = Engine::new(q, keys[0].scale, cfg)?;
    replay_with_engine(&engine, keys, sequence)
}

pub fn replay_with_engine(
    engine: &Engine,
    keys: &[ChunkedKey],
    sequence: &[(usize, usize)],
) -> Result<Step0Result> {
    let mut states: Vec<TokenState> = (0..keys.len()).map(TokenState::new).collect();
    let mut den = DenominatorState::new();
    let mut outcomes = Vec::new();
    for &(t, b) in sequence {
        let tok = states
            .get_mut(t)
            .ok_or_else(|| Error::InvalidInput(format!("token {t} out of range")))?;
        if tok.is_resolved() {
            continue;
        }
        outcomes.push(engine.process_chunk(tok, b, keys[t].chunk(b), &mut den)?);
    }
    if let Some(t) = states.iter().position(|s| !s.is_resolved()) {
        return Err(Error::Protocol(format!("token {t} left unresolved")));
    }
    Ok(Step0Result::from_outcomes(
        keys.len(),
        engine.levels(),
        outcomes,
        den,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step1Result {
    pub output: Vec<f64>,
    /// Probability per survivor, aligned with the survivor slice.
    pub probabilities: Vec<f64>,
    pub ln_den: f64,
}

/// Softmax over survivors and the probability-weighted value sum.
///
/// An empty survivor set is an error when `n * thr < 1`, since then the
/// most probable token cannot be pruned. Above that it is a legitimate
/// outcome and yields a zero output with no probabilities.
pub fn run_step1(
    survivors: &[Survivor],
    values: &[QuantizedVector],
    step0_den: &DenominatorState,
    cfg: &PruneConfig,
) -> Result<Step1Result> {
    if survivors.is_empty() {
        // The largest exact probability is at least 1/n, so with n * thr < 1
        // some token must survive. Otherwise every token can be soundly pruned.
        if (values.len() as f64) * cfg.thr < 1.0 {
            return Err(Error::ImpossibleState("step 0 left no survivors".into()));
        }
        let dim = values.first().map_or(0, |v| v.dim());
        return Ok(Step1Result {
            output: vec![0.0; dim],
            probabilities: Vec::new(),
            ln_den: f64::NEG_INFINITY,
        });
    }
    let ln_den = if cfg.renormalize_output {
        let mut den = DenominatorState::new();
        for s in survivors {
            den.add(s.score);
        }
        den.ln_value()
    } else {
        step0_den.ln_value()
    };
    let dim = values
        .get(survivors[0].index)
        .ok_or_else(|| Error::InvalidInput("survivor index out of range".into()))?
        .dim();
    let mut output = vec![0.0; dim];
    let mut probabilities = Vec::with_capacity(survivors.len());
    for s in survivors {
        let v = values
            .get(s.index)
            .ok_or_else(|| Error::InvalidInput("survivor index out of range".into()))?;
        if v.dim() != dim {
            return Err(Error::InvalidInput("value dimensions differ".into()));
        }
        let p = (s.score - ln_den).exp();
        probabilities.push(p);
        for (o, &c) in output.iter_mut().zip(&v.values) {
            *o += p * (c as f64 * v.scale);
        }
    }
    Ok(Step1Result {
        output,
        probabilities,
        ln_den,
    })
}

/// Functional run of both steps over an instance.
pub fn run_functional(inst: &Instance, cfg: &PruneConfig) -> Result<(Step0Result, Step1Result)> {
    let step0 = run_step0(&inst.q, &inst.keys, cfg)?;
    let step1 = run_step1(&step0.survivors, &inst.values, &step0.den, cfg)?;
    Ok((step0, step1))
}
