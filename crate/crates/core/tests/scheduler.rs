use proptest::prelude::*;

use kvprune::engine::{replay_step0, run_step1, PruneConfig};
use kvprune::io::{generate, SyntheticSpec};
use kvprune::quant::Chunking;
use kvprune::report::oracle_for;
use kvprune::sched::{
    simulate_baseline, simulate_blocking, simulate_ooo, step1_traffic, EventKind, MemoryModel,
    SimConfig, SimResult,
};
use kvprune::Instance;

fn synthetic(spec: &str) -> Instance {
    let spec: SyntheticSpec = spec.parse().unwrap();
    Instance::from_trace(&generate(&spec).unwrap(), Chunking::default()).unwrap()
}

fn mem(latency: u64) -> MemoryModel {
    MemoryModel {
        latency_cycles: latency,
        ..MemoryModel::default()
    }
}

fn count(r: &SimResult, kind: EventKind) -> usize {
    r.events.iter().filter(|e| e.kind == kind).count()
}

/// Event log and counters must tell the same story.
fn check_reconciliation(inst: &Instance, r: &SimResult, sim: &SimConfig) {
    let d = inst.dim() as f64;
    let chunk_bytes = d * inst.chunking.chunk_bits() as f64 / 8.0;
    let value_bytes = d * inst.chunking.precision() as f64 / 8.0;
    let key_reqs = r
        .events
        .iter()
        .filter(|e| e.kind == EventKind::RequestIssued && e.chunk.is_some())
        .count();
    assert_eq!(key_reqs as u64, r.stats.key_requests);
    assert_eq!(key_reqs, r.step0.total_chunks());
    assert_eq!(r.stats.bytes_k, key_reqs as f64 * chunk_bytes);
    assert_eq!(
        r.stats.bits_k,
        key_reqs as u64 * inst.dim() as u64 * inst.chunking.chunk_bits() as u64
    );
    assert_eq!(count(r, EventKind::ChunkArrived), key_reqs);
    assert_eq!(count(r, EventKind::ChunkProcessed), key_reqs);
    assert_eq!(
        count(r, EventKind::ChunkProcessed) as u64,
        r.stats.pe_busy_cycles
    );
    assert_eq!(count(r, EventKind::TokenPruned), r.step0.pruned.len());
    assert_eq!(count(r, EventKind::TokenSurvived), r.step0.survivors.len());
    assert_eq!(
        count(r, EventKind::ValueRequested) as u64,
        r.stats.value_requests
    );
    assert_eq!(
        count(r, EventKind::ValueArrived) as u64,
        r.stats.value_requests
    );
    assert_eq!(r.stats.value_requests as usize, r.step0.survivors.len());
    assert_eq!(r.stats.bytes_v, r.stats.value_requests as f64 * value_bytes);
    assert!(r.events.windows(2).all(|w| w[0].cycle <= w[1].cycle));
    assert!(r.events.last().unwrap().cycle <= r.stats.total_cycles);
    assert!(r.stats.peak_scoreboard <= sim.scoreboard_capacity);
    assert_eq!(
        r.stats.step0_cycles + r.stats.step1_cycles,
        r.stats.total_cycles
    );
    assert_eq!(
        r.stats.pe_busy_cycles + r.stats.stall_cycles,
        r.stats.step0_cycles * r.stats.lanes as u64
    );
}

#[test]
fn single_lane_run_equals_engine_replay_of_realized_order() {
    for spec in [
        "peaked:k=5,gap=10,n=300,d=64,seed=1",
        "locality:n=200,d=16,seed=2",
        "gaussian:sigma=2,n=150,d=8,seed=3",
    ] {
        let inst = synthetic(spec);
        let cfg = PruneConfig::with_thr(1e-3);
        let sim = SimConfig::single_lane();
        let r = simulate_ooo(&inst, &cfg, &mem(60), &sim).unwrap();
        let replay = replay_step0(&inst.q, &inst.keys, &cfg, &r.step0.processing_order()).unwrap();
        assert_eq!(r.step0.outcomes, replay.outcomes, "{spec}");
        assert_eq!(r.step0.survivor_indices(), replay.survivor_indices());
        let out = run_step1(&replay.survivors, &inst.values, &replay.den, &cfg).unwrap();
        assert_eq!(r.step1.output, out.output);
    }
}

#[test]
fn zero_latency_blocking_equals_out_of_order() {
    for lanes in [1, 4] {
        let inst = synthetic("gaussian:n=64,d=32,seed=5");
        let cfg = PruneConfig::with_thr(1e-3);
        let sim = SimConfig {
            lanes,
            ..SimConfig::default()
        };
        let o = simulate_ooo(&inst, &cfg, &mem(0), &sim).unwrap();
        let b = simulate_blocking(&inst, &cfg, &mem(0), &sim).unwrap();
        assert_eq!(o.stats.total_cycles, b.stats.total_cycles);
        assert_eq!(o.step0.outcomes, b.step0.outcomes);
    }
}

#[test]
fn blocking_utilization_follows_serial_stall_model() {
    let inst = synthetic("gaussian:n=64,d=64,seed=1");
    let cfg = PruneConfig::with_thr(0.0);
    let latency = 100;
    let r = simulate_blocking(&inst, &cfg, &mem(latency), &SimConfig::single_lane()).unwrap();
    let expected = 1.0 / (1.0 + latency as f64);
    let got = r.stats.pe_utilization();
    assert!(
        (got - expected).abs() <= 0.1 * expected,
        "{got} vs {expected}"
    );
}

#[test]
fn serial_chain_of_one_token() {
    let inst = synthetic("gaussian:n=1,d=64,seed=1");
    let cfg = PruneConfig::with_thr(0.0);
    let latency = 100;
    let memory = MemoryModel {
        max_inflight: 1,
        ..mem(latency)
    };
    let r = simulate_ooo(&inst, &cfg, &memory, &SimConfig::single_lane()).unwrap();
    let expected = 3.0 * (latency as f64 + 1.0);
    let got = r.stats.step0_cycles as f64;
    assert!(
        (got - expected).abs() <= 0.1 * expected,
        "{got} vs {expected}"
    );
}

/// Without pruning a single lane streams one chunk per cycle unless the
/// channels are slower; either way one latency is exposed.
#[test]
fn pipeline_throughput_bound() {
    let inst = synthetic("gaussian:n=256,d=64,seed=9");
    let cfg = PruneConfig::with_thr(0.0);
    let chunks = 3.0 * 256.0;
    let chunk_bytes = 64.0 * 4.0 / 8.0;
    let cases = [
        (mem(20), 1.0),
        (
            MemoryModel {
                latency_cycles: 30,
                bytes_per_cycle: 4.0,
                channels: 1,
                max_inflight: 1024,
            },
            chunk_bytes / 4.0,
        ),
    ];
    for (memory, cycles_per_chunk) in cases {
        let r = simulate_ooo(&inst, &cfg, &memory, &SimConfig::single_lane()).unwrap();
        let bytes_bound = chunks * chunk_bytes / memory.total_bandwidth();
        let expected = (chunks * 1.0f64).max(bytes_bound) + memory.latency_cycles as f64;
        assert_eq!(
            expected,
            chunks * cycles_per_chunk + memory.latency_cycles as f64
        );
        let got = r.stats.step0_cycles as f64;
        assert!(
            (got - expected).abs() <= 0.1 * expected,
            "{got} vs {expected}"
        );
    }
}

#[test]
fn pruning_saves_key_traffic() {
    let inst = synthetic("peaked:k=4,gap=16,n=512,d=64,seed=2");
    let cfg = PruneConfig::with_thr(1e-3);
    for sim in [SimConfig::single_lane(), SimConfig::default()] {
        let r = simulate_ooo(&inst, &cfg, &MemoryModel::default(), &sim).unwrap();
        let full = 512.0 * 3.0 * 32.0;
        assert!(r.stats.bytes_k < full);
        assert_eq!(r.stats.bytes_v, r.step0.survivors.len() as f64 * 96.0);
        check_reconciliation(&inst, &r, &sim);
    }
}

#[test]
fn value_traffic_ratio() {
    let inst = synthetic("peaked:k=1,gap=30,n=128,d=64,seed=4");
    let r = simulate_ooo(
        &inst,
        &PruneConfig::with_thr(1e-3),
        &MemoryModel::default(),
        &SimConfig::default(),
    )
    .unwrap();
    let t = step1_traffic(
        &r.step0.survivors,
        128,
        64,
        12,
        &MemoryModel::default(),
        &SimConfig::default(),
    );
    assert_eq!(r.step0.survivors.len(), 1);
    assert_eq!(t.v_access_reduction, 128.0);
    assert_eq!(t.bytes_v, 96.0);
    let everyone: Vec<_> = (0..128).map(|_| r.step0.survivors[0].clone()).collect();
    let all = step1_traffic(
        &everyone,
        128,
        64,
        12,
        &MemoryModel::default(),
        &SimConfig::default(),
    );
    assert_eq!(all.v_access_reduction, 1.0);
}

/// Keys then values, each phase exposing one latency.
#[test]
fn baseline_is_bandwidth_bound() {
    let memory = MemoryModel::default();
    let sim = SimConfig::default();
    let n = 4096;
    let bytes = 2.0 * n as f64 * 64.0 * 12.0 / 8.0;
    let expected = bytes / memory.total_bandwidth() + 2.0 * memory.latency_cycles as f64;
    let got = simulate_baseline(n, 64, 12, &memory, &sim) as f64;
    assert!(
        (got - expected).abs() <= 0.1 * expected,
        "{got} vs {expected}"
    );
}

fn workload() -> impl Strategy<Value = String> {
    (
        prop_oneof![
            Just("gaussian:sigma=2"),
            Just("peaked:k=2,gap=12"),
            Just("locality:decay=0.05")
        ],
        2usize..200,
        prop_oneof![Just(2usize), Just(16), Just(64)],
        any::<u64>(),
    )
        .prop_map(|(kind, n, d, seed)| format!("{kind},n={n},d={d},seed={seed}"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn schedules_are_sound_and_consistent(
        spec in workload(),
        latency in 0u64..300,
        lanes in prop_oneof![Just(1usize), Just(4), Just(16)],
        capacity in prop_oneof![Just(1usize), Just(4), Just(32)],
        jitter in prop_oneof![Just(0u64), Just(50), Just(400)],
        jitter_seed in any::<u64>(),
        thr in prop_oneof![Just(1e-2), Just(1e-3), Just(1e-4)],
    ) {
        let inst = synthetic(&spec);
        let cfg = PruneConfig::with_thr(thr);
        let memory = mem(latency);
        let sim = SimConfig { lanes, scoreboard_capacity: capacity, jitter_cycles: jitter, jitter_seed };
        let oracle = oracle_for(&inst).unwrap();
        let o = simulate_ooo(&inst, &cfg, &memory, &sim).unwrap();
        let b = simulate_blocking(&inst, &cfg, &memory, &sim).unwrap();
        for r in [&o, &b] {
            check_reconciliation(&inst, r, &sim);
            for &t in &r.step0.pruned {
                prop_assert!(oracle.probabilities[t] < thr, "{} token {} p={}", spec, t, oracle.probabilities[t]);
            }
            prop_assert_eq!(r.step0.pruned.len() + r.step0.survivors.len(), inst.n_tokens());
        }
        if jitter == 0 {
            prop_assert!(o.stats.total_cycles <= b.stats.total_cycles, "ooo {} blocking {}", o.stats.total_cycles, b.stats.total_cycles);
        }
    }

    #[test]
    fn simulation_is_deterministic(spec in workload(), jitter_seed in any::<u64>()) {
        let inst = synthetic(&spec);
        let sim = SimConfig { jitter_cycles: 40, jitter_seed, ..SimConfig::default() };
        let a = simulate_ooo(&inst, &PruneConfig::default(), &mem(90), &sim).unwrap();
        let b = simulate_ooo(&inst, &PruneConfig::default(), &mem(90), &sim).unwrap();
        prop_assert_eq!(a.events, b.events);
        prop_assert_eq!(a.stats, b.stats);
    }
}
