//! Cycle-approximate simulation of on-demand key-chunk fetching.
//!
//! Timing model, per PE lane:
//! - one chunk is processed per cycle (a lane has a multiplier per element);
//! - one DRAM request is issued per cycle. A processed chunk that is not
//!   pruned immediately requests its token's next chunk; otherwise the port
//!   issues the next first-chunk request of the lane's token queue;
//! - a request issued in cycle `t` starts transferring once its channel is
//!   free, and is available for processing `latency_cycles` after the
//!   transfer completes (rounded up to a cycle boundary). With an idle
//!   channel that is cycle `t + 1 + latency`.
//!
//! In out-of-order mode, first-chunk issue continues while earlier requests
//! are in flight, limited by `max_inflight` and by the lane's scoreboard
//! being full. A first chunk is only processed when a scoreboard entry is
//! free; downstream chunks are always processable. In blocking mode a lane
//! has at most one request outstanding.
//!
//! Lanes own disjoint token partitions and share one denominator. A lane's
//! decision in cycle `t` sees the denominator committed at the end of cycle
//! `t - 1` plus its own contribution.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{
    check_keys, run_step1, ChunkOutcome, Decision, DenominatorState, Engine, PruneConfig,
    Step0Result, Step1Result, Survivor, TokenState,
};
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::margin::MarginTable;

/// Parametric DRAM channel model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryModel {
    /// Cycles from transfer completion to data availability.
    pub latency_cycles: u64,
    /// Bandwidth of one channel in bytes per core cycle.
    pub bytes_per_cycle: f64,
    pub channels: usize,
    /// Cap on in-flight requests when issuing first chunks.
    pub max_inflight: usize,
}

impl Default for MemoryModel {
    /// 8 channels at 32 GB/s each, seen from a 500 MHz core: 64 B/cycle.
    fn default() -> Self {
        Self {
            latency_cycles: 200,
            bytes_per_cycle: 64.0,
            channels: 8,
            max_inflight: 1024,
        }
    }
}

impl MemoryModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.bytes_per_cycle.is_finite() && self.bytes_per_cycle > 0.0) {
            return Err(Error::Config(format!(
                "bytes_per_cycle {} must be positive",
                self.bytes_per_cycle
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config(
                "at least one memory channel is required".into(),
            ));
        }
        if self.max_inflight == 0 {
            return Err(Error::Config("max_inflight must be positive".into()));
        }
        Ok(())
    }

    /// Aggregate bandwidth in bytes per cycle.
    pub fn total_bandwidth(&self) -> f64 {
        self.bytes_per_cycle * self.channels as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub lanes: usize,
    /// Scoreboard entries per lane.
    pub scoreboard_capacity: usize,
    /// Each arrival is delayed by a uniform extra `0..=jitter_cycles`.
    pub jitter_cycles: u64,
    pub jitter_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            lanes: 16,
            scoreboard_capacity: 32,
            jitter_cycles: 0,
            jitter_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn single_lane() -> Self {
        Self {
            lanes: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lanes == 0 {
            return Err(Error::Config("at least one PE lane is required".into()));
        }
        if self.scoreboard_capacity == 0 {
            return Err(Error::Config("scoreboard capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    OutOfOrder,
    Blocking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RequestIssued,
    ChunkArrived,
    ChunkProcessed,
    TokenPruned,
    TokenSurvived,
    ValueRequested,
    ValueArrived,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::RequestIssued => "request_issued",
            EventKind::ChunkArrived => "chunk_arrived",
            EventKind::ChunkProcessed => "chunk_processed",
            EventKind::TokenPruned => "token_pruned",
            EventKind::TokenSurvived => "token_survived",
            EventKind::ValueRequested => "value_requested",
            EventKind::ValueArrived => "value_arrived",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub cycle: u64,
    pub kind: EventKind,
    pub token: usize,
    /// Key chunk index; `None` for value-vector events.
    pub chunk: Option<usize>,
}

/// `cycle,event,token,chunk`; the chunk column is empty for value events.
impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.chunk {
            Some(c) => write!(
                f,
                "{},{},{},{}",
                self.cycle,
                self.kind.as_str(),
                self.token,
                c
            ),
            None => write!(f, "{},{},{},", self.cycle, self.kind.as_str(), self.token),
        }
    }
}

pub fn write_event_trace(events: &[Event], mut out: impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "cycle,event,token,chunk")?;
    for e in events {
        writeln!(out, "{e}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleStats {
    pub lanes: usize,
    pub step0_cycles: u64,
    pub step1_cycles: u64,
    pub total_cycles: u64,
    /// Lane-cycles spent processing a chunk in step 0.
    pub pe_busy_cycles: u64,
    /// Lane-cycles of step 0 without a chunk to process.
    pub stall_cycles: u64,
    pub key_requests: u64,
    pub bits_k: u64,
    pub bytes_k: f64,
    pub value_requests: u64,
    pub bytes_v: f64,
    /// Largest scoreboard occupancy seen in any lane.
    pub peak_scoreboard: usize,
}

impl CycleStats {
    pub fn pe_utilization(&self) -> f64 {
        let lane_cycles = self.step0_cycles * self.lanes as u64;
        if lane_cycles == 0 {
            0.0
        } else {
            self.pe_busy_cycles as f64 / lane_cycles as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub mode: ScheduleMode,
    pub step0: Step0Result,
    pub step1: Step1Result,
    pub stats: CycleStats,
    pub events: Vec<Event>,
}

/// Capacity-limited per-lane store of tokens awaiting a downstream chunk.
#[derive(Debug, Clone)]
pub struct Scoreboard {
    capacity: usize,
    entries: BTreeMap<usize, TokenState>,
}

impl Scoreboard {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn contains(&self, token: usize) -> bool {
        self.entries.contains_key(&token)
    }

    pub fn take(&mut self, token: usize) -> Option<TokenState> {
        self.entries.remove(&token)
    }

    pub fn store(&mut self, tok: TokenState) -> Result<()> {
        if !self.entries.contains_key(&tok.token_index) && self.is_full() {
            return Err(Error::ImpossibleState(format!(
                "scoreboard overflow storing token {}",
                tok.token_index
            )));
        }
        self.entries.insert(tok.token_index, tok);
        Ok(())
    }
}

/// One DRAM channel: FIFO transfers at a fixed bandwidth.
#[derive(Debug, Clone, Default)]
struct Channel {
    free_at: f64,
}

struct Memory<'a> {
    model: &'a MemoryModel,
    channels: Vec<Channel>,
    jitter: u64,
    rng: ChaCha8Rng,
}

impl<'a> Memory<'a> {
    fn new(model: &'a MemoryModel, jitter: u64, seed: u64) -> Self {
        Self {
            model,
            channels: vec![Channel::default(); model.channels],
            jitter,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Arrival cycle of a request for `bytes` issued in cycle `issue`.
    fn request(&mut self, channel: usize, issue: u64, bytes: f64) -> u64 {
        let ch = &mut self.channels[channel];
        let start = ch.free_at.max(issue as f64);
        let finish = start + bytes / self.model.bytes_per_cycle;
        ch.free_at = finish;
        let extra = if self.jitter > 0 {
            self.rng.random_range(0..=self.jitter)
        } else {
            0
        };
        finish.ceil() as u64 + self.model.latency_cycles + extra
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct InFlight {
    arrival: u64,
    channel: usize,
    seq: u64,
    lane: usize,
    token: usize,
    level: usize,
}

struct Lane {
    queue: VecDeque<usize>,
    ready: VecDeque<(usize, usize)>,
    scoreboard: Scoreboard,
    outstanding: usize,
}

/// Lane owning the token at position `pos` of the processing order.
fn lane_of(pos: usize, lanes: usize) -> usize {
    pos % lanes
}

pub fn simulate_ooo(
    inst: &Instance,
    cfg: &PruneConfig,
    mem: &MemoryModel,
    sim: &SimConfig,
) -> Result<SimResult> {
    simulate(inst, cfg, mem, sim, ScheduleMode::OutOfOrder, None)
}

pub fn simulate_blocking(
    inst: &Instance,
    cfg: &PruneConfig,
    mem: &MemoryModel,
    sim: &SimConfig,
) -> Result<SimResult> {
    simulate(inst, cfg, mem, sim, ScheduleMode::Blocking, None)
}

/// Run either schedule, optionally with a caller-supplied margin table.
pub fn simulate(
    inst: &Instance,
    cfg: &PruneConfig,
    mem: &MemoryModel,
    sim: &SimConfig,
    mode: ScheduleMode,
    margins: Option<MarginTable>,
) -> Result<SimResult> {
    mem.validate()?;
    sim.validate()?;
    check_keys(&inst.keys, &inst.q, cfg)?;
    let engine = match margins {
        Some(m) => Engine::with_margins(&inst.q, m, cfg)?,
        None => Engine::new(&inst.q, inst.key_scale(), cfg)?,
    };

    let n = inst.n_tokens();
    let levels = cfg.chunking.chunks();
    let chunk_bits = cfg.chunking.chunk_bits_for_dim(inst.dim());
    let chunk_bytes = chunk_bits as f64 / 8.0;

    let mut lanes: Vec<Lane> = (0..sim.lanes)
        .map(|_| Lane {
            queue: VecDeque::new(),
            ready: VecDeque::new(),
            scoreboard: Scoreboard::new(sim.scoreboard_capacity),
            outstanding: 0,
        })
        .collect();
    for (pos, t) in cfg.order.sequence(n).into_iter().enumerate() {
        lanes[lane_of(pos, sim.lanes)].queue.push_back(t);
    }

    let mut memory = Memory::new(mem, sim.jitter_cycles, sim.jitter_seed);
    let mut heap: BinaryHeap<Reverse<InFlight>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut inflight = 0usize;
    let mut committed = DenominatorState::new();
    let mut outcomes: Vec<ChunkOutcome> = Vec::with_capacity(n * levels);
    let mut events: Vec<Event> = Vec::new();
    let mut stats = CycleStats {
        lanes: sim.lanes,
        ..CycleStats::default()
    };
    let mut resolved = 0usize;
    let mut last_busy: Option<u64> = None;
    let mut t = 0u64;

    let mut issue = |lane_idx: usize,
                     lane: &mut Lane,
                     token: usize,
                     level: usize,
                     t: u64,
                     heap: &mut BinaryHeap<Reverse<InFlight>>,
                     inflight: &mut usize,
                     events: &mut Vec<Event>,
                     stats: &mut CycleStats| {
        let channel = token % mem.channels;
        let arrival = memory.request(channel, t, chunk_bytes);
        heap.push(Reverse(InFlight {
            arrival,
            channel,
            seq,
            lane: lane_idx,
            token,
            level,
        }));
        seq += 1;
        *inflight += 1;
        lane.outstanding += 1;
        stats.key_requests += 1;
        stats.bits_k += chunk_bits;
        events.push(Event {
            cycle: t,
            kind: EventKind::RequestIssued,
            token,
            chunk: Some(level),
        });
    };

    while resolved < n {
        while let Some(Reverse(top)) = heap.peek().copied() {
            if top.arrival > t {
                break;
            }
            heap.pop();
            inflight -= 1;
            let lane = &mut lanes[top.lane];
            lane.outstanding -= 1;
            lane.ready.push_back((top.token, top.level));
            events.push(Event {
                cycle: top.arrival,
                kind: EventKind::ChunkArrived,
                token: top.token,
                chunk: Some(top.level),
            });
        }

        let mut deltas: Vec<(f64, Option<f64>)> = Vec::new();
        let mut active = false;
        for (li, lane) in lanes.iter_mut().enumerate() {
            let mut port_used = false;
            let pick = lane
                .ready
                .iter()
                .position(|&(tok, _)| lane.scoreboard.contains(tok) || !lane.scoreboard.is_full());
            if let Some(i) = pick {
                let (token, level) = lane.ready.remove(i).unwrap();
                let mut state = match lane.scoreboard.take(token) {
                    Some(s) => s,
                    None if level == 0 => TokenState::new(token),
                    None => {
                        return Err(Error::ImpossibleState(format!(
                            "chunk {level} of token {token} arrived without a scoreboard entry"
                        )))
                    }
                };
                let mut view = committed.clone();
                let outcome = engine.process_chunk(
                    &mut state,
                    level,
                    inst.keys[token].chunk(level),
                    &mut view,
                )?;
                deltas.push((outcome.s_min, outcome.prev_min_exponent));
                stats.pe_busy_cycles += 1;
                events.push(Event {
                    cycle: t,
                    kind: EventKind::ChunkProcessed,
                    token,
                    chunk: Some(level),
                });
                match outcome.decision {
                    Decision::RequestNext(next) => {
                        lane.scoreboard.store(state)?;
                        issue(
                            li,
                            lane,
                            token,
                            next,
                            t,
                            &mut heap,
                            &mut inflight,
                            &mut events,
                            &mut stats,
                        );
                        port_used = true;
                    }
                    Decision::Prune | Decision::FinalizeSurvivor => {
                        resolved += 1;
                        events.push(Event {
                            cycle: t,
                            kind: if outcome.decision == Decision::Prune {
                                EventKind::TokenPruned
                            } else {
                                EventKind::TokenSurvived
                            },
                            token,
                            chunk: Some(level),
                        });
                    }
                }
                stats.peak_scoreboard = stats.peak_scoreboard.max(lane.scoreboard.len());
                outcomes.push(outcome);
                last_busy = Some(t);
                active = true;
            }

            if !port_used {
                if let Some(&token) = lane.queue.front() {
                    let allowed = match mode {
                        ScheduleMode::OutOfOrder => {
                            inflight < mem.max_inflight && !lane.scoreboard.is_full()
                        }
                        ScheduleMode::Blocking => {
                            lane.outstanding == 0
                                && lane.ready.is_empty()
                                && lane.scoreboard.is_empty()
                        }
                    };
                    if allowed {
                        lane.queue.pop_front();
                        issue(
                            li,
                            lane,
                            token,
                            0,
                            t,
                            &mut heap,
                            &mut inflight,
                            &mut events,
                            &mut stats,
                        );
                        active = true;
                    }
                }
            }
        }
        for (new, old) in deltas {
            committed.add_delta(new, old);
        }

        if resolved == n {
            break;
        }
        t = if active {
            t + 1
        } else {
            match heap.peek() {
                Some(Reverse(next)) => next.arrival.max(t + 1),
                None => {
                    return Err(Error::ImpossibleState(format!(
                        "simulation stalled at cycle {t} with {} tokens unresolved",
                        n - resolved
                    )))
                }
            }
        };
    }

    stats.step0_cycles = last_busy.map_or(0, |c| c + 1);
    stats.stall_cycles = stats.step0_cycles * sim.lanes as u64 - stats.pe_busy_cycles;
    stats.bytes_k = stats.bits_k as f64 / 8.0;

    let step0 = Step0Result::from_outcomes(n, levels, outcomes, committed);
    let step1 = run_step1(&step0.survivors, &inst.values, &step0.den, cfg)?;
    let traffic = step1_traffic_from(
        &step0.survivors,
        n,
        inst.dim(),
        cfg.chunking.precision(),
        mem,
        sim,
        stats.step0_cycles,
        Some(&mut events),
    );
    stats.step1_cycles = traffic.cycles;
    stats.value_requests = traffic.requests;
    stats.bytes_v = traffic.bytes_v;
    stats.total_cycles = stats.step0_cycles + stats.step1_cycles;

    Ok(SimResult {
        mode,
        step0,
        step1,
        stats,
        events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step1Traffic {
    pub requests: u64,
    pub bytes_v: f64,
    pub cycles: u64,
    /// `n_tokens / survivors`.
    pub v_access_reduction: f64,
}

/// Value-vector fetch volume and time for the survivors of step 0.
pub fn step1_traffic(
    survivors: &[Survivor],
    n_tokens: usize,
    d_h: usize,
    precision: u32,
    mem: &MemoryModel,
    sim: &SimConfig,
) -> Step1Traffic {
    step1_traffic_from(survivors, n_tokens, d_h, precision, mem, sim, 0, None)
}

#[allow(clippy::too_many_arguments)]
fn step1_traffic_from(
    survivors: &[Survivor],
    n_tokens: usize,
    d_h: usize,
    precision: u32,
    mem: &MemoryModel,
    sim: &SimConfig,
    start: u64,
    events: Option<&mut Vec<Event>>,
) -> Step1Traffic {
    let bytes = (d_h as u64 * precision as u64) as f64 / 8.0;
    let tokens: Vec<usize> = survivors.iter().map(|s| s.index).collect();
    let cycles = stream_fetch(&tokens, bytes, mem, sim.lanes, start, events);
    Step1Traffic {
        requests: tokens.len() as u64,
        bytes_v: tokens.len() as f64 * bytes,
        cycles,
        v_access_reduction: if tokens.is_empty() {
            f64::INFINITY
        } else {
            n_tokens as f64 / tokens.len() as f64
        },
    }
}

/// Stream one whole vector per token with no data dependency between
/// requests: each lane issues one request per cycle from `start` and
/// consumes one arrived vector per cycle. Returns elapsed cycles.
fn stream_fetch(
    tokens: &[usize],
    bytes: f64,
    mem: &MemoryModel,
    lanes: usize,
    start: u64,
    events: Option<&mut Vec<Event>>,
) -> u64 {
    if tokens.is_empty() {
        return 0;
    }
    let mut memory = Memory::new(mem, 0, 0);
    let mut per_lane: Vec<Vec<(u64, usize)>> = vec![Vec::new(); lanes];
    let mut issued: Vec<(u64, usize, u64)> = Vec::with_capacity(tokens.len());
    for (i, &tok) in tokens.iter().enumerate() {
        let lane = i % lanes;
        let cycle = start + (i / lanes) as u64;
        let arrival = memory.request(tok % mem.channels, cycle, bytes);
        per_lane[lane].push((arrival, tok));
        issued.push((cycle, tok, arrival));
    }
    if let Some(ev) = events {
        let mut log: Vec<Event> = issued
            .iter()
            .flat_map(|&(cycle, token, arrival)| {
                [
                    Event {
                        cycle,
                        kind: EventKind::ValueRequested,
                        token,
                        chunk: None,
                    },
                    Event {
                        cycle: arrival,
                        kind: EventKind::ValueArrived,
                        token,
                        chunk: None,
                    },
                ]
            })
            .collect();
        log.sort_by_key(|e| e.cycle);
        ev.extend(log);
    }
    let mut end = start;
    for mut arrivals in per_lane {
        arrivals.sort_unstable();
        let mut t = start;
        for (arrival, _) in arrivals {
            t = t.max(arrival) + 1;
        }
        end = end.max(t);
    }
    end - start
}

/// Cycles of an accelerator without pruning: every full key, then every
/// value, streamed at full precision.
pub fn simulate_baseline(
    n_tokens: usize,
    d_h: usize,
    precision: u32,
    mem: &MemoryModel,
    sim: &SimConfig,
) -> u64 {
    let bytes = (d_h as u64 * precision as u64) as f64 / 8.0;
    let tokens: Vec<usize> = (0..n_tokens).collect();
    let k = stream_fetch(&tokens, bytes, mem, sim.lanes, 0, None);
    let v = stream_fetch(&tokens, bytes, mem, sim.lanes, k, None);
    k + v
}
