//! End-to-end runs: baseline, functional engine and both schedulers, reduced
//! to one [`RunMetrics`] document, plus oracle-backed soundness checks.

use serde::{Deserialize, Serialize};

use crate::engine::{replay_with_engine, run_step1, Engine, PruneConfig, Step0Result, Step1Result};
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::io::RunConfig;
use crate::margin::MarginTable;
use crate::oracle::{exact_attention, OracleResult};
use crate::quant::{from_chunks, QuantizedVector};
use crate::sched::{simulate, simulate_baseline, ScheduleMode, SimResult};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Flat per-byte and per-MAC energy costs. Only a rough estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyModel {
    pub pj_per_dram_byte: f64,
    pub pj_per_mac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        // ~3.9 pJ/bit for HBM2 access; a 12x4-bit MAC in a 65 nm process.
        Self {
            pj_per_dram_byte: 31.2,
            pj_per_mac: 0.5,
        }
    }
}

impl EnergyModel {
    pub fn estimate_pj(&self, dram_bytes: f64, macs: u64) -> f64 {
        dram_bytes * self.pj_per_dram_byte + macs as f64 * self.pj_per_mac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Functional,
    Ooo,
    Blocking,
    #[default]
    All,
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "functional" => Ok(RunMode::Functional),
            "ooo" => Ok(RunMode::Ooo),
            "blocking" => Ok(RunMode::Blocking),
            "all" => Ok(RunMode::All),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl RunMode {
    fn functional(self) -> bool {
        matches!(self, RunMode::Functional | RunMode::All)
    }

    fn ooo(self) -> bool {
        matches!(self, RunMode::Ooo | RunMode::All)
    }

    fn blocking(self) -> bool {
        matches!(self, RunMode::Blocking | RunMode::All)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub ooo: Option<u64>,
    pub blocking: Option<u64>,
    pub baseline: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximateEnergy {
    pub energy_pj: f64,
    pub baseline_energy_pj: f64,
    pub pj_per_dram_byte: f64,
    pub pj_per_mac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedToken {
    pub index: usize,
    /// Chunk index after which the token was pruned.
    pub level: usize,
    pub true_probability: f64,
}

/// Outcome of checking pruned tokens against the exact softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub mode: String,
    pub thr: f64,
    pub pruned: Vec<PrunedToken>,
    /// Pruned tokens whose exact probability is at least `thr`.
    pub violations: Vec<PrunedToken>,
    pub pruned_true_mass: f64,
    pub pass: bool,
}

/// Metrics of one run. Byte and cycle figures come from the primary mode:
/// out-of-order if it ran, else blocking, else functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema_version: u32,
    pub mode: RunMode,
    pub primary_mode: String,
    pub n_tokens: usize,
    pub d_h: usize,
    pub thr: f64,
    pub survivors: usize,
    pub tokens_pruned: usize,
    pub tokens_pruned_at_chunk: Vec<usize>,
    pub chunks_fetched: usize,
    pub bytes_k: f64,
    pub bytes_v: f64,
    pub bytes_baseline: f64,
    pub v_access_reduction: f64,
    pub k_access_reduction: f64,
    pub total_reduction: f64,
    pub cycles: CycleSummary,
    pub speedup: Option<f64>,
    pub pe_utilization: Option<f64>,
    pub output_max_abs_error: f64,
    pub pruned_true_mass: f64,
    pub max_pruned_true_probability: f64,
    pub verification: Option<Vec<SoundnessReport>>,
    pub approximate: ApproximateEnergy,
}

impl RunMetrics {
    /// Every soundness report passed (vacuously true without `verify`).
    pub fn verified(&self) -> bool {
        self.verification
            .as_ref()
            .is_none_or(|v| v.iter().all(|r| r.pass))
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub oracle: OracleResult,
    pub functional: Option<(Step0Result, Step1Result)>,
    pub ooo: Option<SimResult>,
    pub blocking: Option<SimResult>,
}

/// Full-precision keys of an instance, for the oracle.
pub fn key_codes(inst: &Instance) -> Vec<QuantizedVector> {
    inst.keys.iter().map(from_chunks).collect()
}

pub fn oracle_for(inst: &Instance) -> Result<OracleResult> {
    exact_attention(&inst.q, &key_codes(inst), &inst.values)
}

/// Compare every pruned token of a step-0 result with the exact softmax.
pub fn check_soundness(
    step0: &Step0Result,
    oracle: &OracleResult,
    thr: f64,
    mode: &str,
) -> SoundnessReport {
    let pruned: Vec<PrunedToken> = step0
        .outcomes
        .iter()
        .filter(|o| o.decision == crate::engine::Decision::Prune)
        .map(|o| PrunedToken {
            index: o.token,
            level: o.level,
            true_probability: oracle.probabilities[o.token],
        })
        .collect();
    let violations: Vec<PrunedToken> = pruned
        .iter()
        .filter(|p| p.true_probability >= thr)
        .cloned()
        .collect();
    let pruned_true_mass: f64 = pruned.iter().map(|p| p.true_probability).sum();
    let mass_ok = pruned.is_empty() || pruned_true_mass < thr * pruned.len() as f64;
    SoundnessReport {
        mode: mode.to_string(),
        thr,
        pass: violations.is_empty() && mass_ok,
        pruned,
        violations,
        pruned_true_mass,
    }
}

fn functional_with(
    inst: &Instance,
    cfg: &PruneConfig,
    margins: Option<MarginTable>,
) -> Result<(Step0Result, Step1Result)> {
    let engine = match margins {
        Some(m) => Engine::with_margins(&inst.q, m, cfg)?,
        None => Engine::new(&inst.q, inst.key_scale(), cfg)?,
    };
    let order: Vec<(usize, usize)> = cfg
        .order
        .sequence(inst.n_tokens())
        .into_iter()
        .flat_map(|t| (0..cfg.chunking.chunks()).map(move |b| (t, b)))
        .collect();
    let step0 = replay_with_engine(&engine, &inst.keys, &order)?;
    let step1 = run_step1(&step0.survivors, &inst.values, &step0.den, cfg)?;
    Ok((step0, step1))
}

/// Run the requested modes and reduce them to metrics.
///
/// `margins` replaces the query-derived margin table in every mode; it exists
/// so that fault injection can be exercised end to end.
pub fn run_experiment(
    inst: &Instance,
    cfg: &RunConfig,
    mode: RunMode,
    verify: bool,
    margins: Option<MarginTable>,
) -> Result<RunReport> {
    cfg.validate()?;
    if inst.chunking != cfg.prune.chunking {
        return Err(Error::Config(
            "instance chunking differs from run configuration".into(),
        ));
    }
    let prune = &cfg.prune;
    let oracle = oracle_for(inst)?;
    let n = inst.n_tokens();
    let d = inst.dim();
    let chunking = prune.chunking;

    let functional = if mode.functional() {
        Some(functional_with(inst, prune, margins.clone())?)
    } else {
        None
    };
    let ooo = if mode.ooo() {
        Some(simulate(
            inst,
            prune,
            &cfg.memory,
            &cfg.sim,
            ScheduleMode::OutOfOrder,
            margins.clone(),
        )?)
    } else {
        None
    };
    let blocking = if mode.blocking() {
        Some(simulate(
            inst,
            prune,
            &cfg.memory,
            &cfg.sim,
            ScheduleMode::Blocking,
            margins,
        )?)
    } else {
        None
    };

    let baseline_cycles = simulate_baseline(n, d, chunking.precision(), &cfg.memory, &cfg.sim);
    let vec_bytes = (d as u64 * chunking.precision() as u64) as f64 / 8.0;
    let bytes_baseline = 2.0 * n as f64 * vec_bytes;

    let (primary_mode, step0, step1, sim) = if let Some(r) = &ooo {
        ("ooo", &r.step0, &r.step1, Some(r))
    } else if let Some(r) = &blocking {
        ("blocking", &r.step0, &r.step1, Some(r))
    } else {
        let (s0, s1) = functional.as_ref().expect("at least one mode runs");
        ("functional", s0, s1, None)
    };

    let chunks_fetched = step0.total_chunks();
    let survivors = step0.survivors.len();
    let (bytes_k, bytes_v) = match sim {
        Some(r) => (r.stats.bytes_k, r.stats.bytes_v),
        None => (
            chunks_fetched as f64 * chunking.chunk_bits_for_dim(d) as f64 / 8.0,
            survivors as f64 * vec_bytes,
        ),
    };

    let output_max_abs_error = step1
        .output
        .iter()
        .zip(&oracle.output)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let primary_check = check_soundness(step0, &oracle, prune.thr, primary_mode);

    let verification = verify.then(|| {
        let mut reports = Vec::new();
        if let Some((s0, _)) = &functional {
            reports.push(check_soundness(s0, &oracle, prune.thr, "functional"));
        }
        if let Some(r) = &ooo {
            reports.push(check_soundness(&r.step0, &oracle, prune.thr, "ooo"));
        }
        if let Some(r) = &blocking {
            reports.push(check_soundness(&r.step0, &oracle, prune.thr, "blocking"));
        }
        reports
    });

    let macs = (chunks_fetched + survivors) as u64 * d as u64;
    let energy = &cfg.energy;
    let ooo_cycles = ooo.as_ref().map(|r| r.stats.total_cycles);
    let metrics = RunMetrics {
        schema_version: METRICS_SCHEMA_VERSION,
        mode,
        primary_mode: primary_mode.to_string(),
        n_tokens: n,
        d_h: d,
        thr: prune.thr,
        survivors,
        tokens_pruned: n - survivors,
        tokens_pruned_at_chunk: step0.pruned_at_level.clone(),
        chunks_fetched,
        bytes_k,
        bytes_v,
        bytes_baseline,
        v_access_reduction: n as f64 / survivors as f64,
        k_access_reduction: (n * chunking.chunks()) as f64 / chunks_fetched as f64,
        total_reduction: bytes_baseline / (bytes_k + bytes_v),
        cycles: CycleSummary {
            ooo: ooo_cycles,
            blocking: blocking.as_ref().map(|r| r.stats.total_cycles),
            baseline: baseline_cycles,
        },
        speedup: ooo_cycles.map(|c| baseline_cycles as f64 / c as f64),
        pe_utilization: sim.map(|r| r.stats.pe_utilization()),
        output_max_abs_error,
        pruned_true_mass: primary_check.pruned_true_mass,
        max_pruned_true_probability: primary_check
            .pruned
            .iter()
            .map(|p| p.true_probability)
            .fold(0.0, f64::max),
        verification,
        approximate: ApproximateEnergy {
            energy_pj: energy.estimate_pj(bytes_k + bytes_v, macs),
            baseline_energy_pj: energy.estimate_pj(bytes_baseline, 2 * n as u64 * d as u64),
            pj_per_dram_byte: energy.pj_per_dram_byte,
            pj_per_mac: energy.pj_per_mac,
        },
    };

    Ok(RunReport {
        metrics,
        oracle,
        functional,
        ooo,
        blocking,
    })
}
