use std::collections::BTreeSet;

use dfedrw::datasets::{batch_iter, partition_similarity, synth_train_test, Dataset};
use dfedrw::fedsim::{
    busiest_device_report, encode_full_message, AggMode, Algorithm, MessageKind, RoundConfig,
    RoundMetrics, Simulation, FULL_MESSAGE_HEADER_BYTES,
};
use dfedrw::model::{loss_grad, lr_schedule, MlpSpec, Params};
use dfedrw::quantizer::{quantize, QuantConfig};
use dfedrw::seed::{seed_stream, Purpose};
use dfedrw::topology::{build_topology, TopologyKind, TransitionMatrix};

const SEED: u64 = 11;

fn data() -> (Dataset<f64>, Dataset<f64>) {
    synth_train_test(4, 8, 40, 25, 0.15, 5).unwrap()
}

fn spec() -> MlpSpec {
    MlpSpec::new(vec![8, 6, 4]).unwrap()
}

fn sim(cfg: RoundConfig, kind: TopologyKind, n: usize) -> Simulation<f64> {
    let (train, _) = data();
    let graph = build_topology(kind, n, SEED).unwrap();
    let partition = partition_similarity(&train, n, 100.0, SEED).unwrap();
    Simulation::new(cfg, graph, train, partition, &spec(), SEED).unwrap()
}

fn base(algorithm: Algorithm) -> RoundConfig {
    RoundConfig {
        algorithm,
        chains: 4,
        epochs: 3,
        batch_size: 8,
        agg_fraction: 0.5,
        ..RoundConfig::default()
    }
}

fn params_of(s: &Simulation<f64>) -> Vec<Params<f64>> {
    s.devices().iter().map(|d| d.params.clone()).collect()
}

fn assert_conserved(m: &RoundMetrics) {
    let sent: u64 = m.bits_sent.iter().sum();
    let carried: u64 = m.messages.iter().map(|r| r.bits).sum();
    assert_eq!(sent, carried, "round {}", m.round);
    let b = m.busiest;
    assert_eq!(b.c_r, b.c_upd + b.c_agg);
}

#[test]
fn single_step_walks_reduce_to_dsgd() {
    let walk_cfg = RoundConfig { chains: 8, epochs: 1, ..base(Algorithm::DFedRW) };
    let dsgd_cfg = RoundConfig { chains: 8, epochs: 1, ..base(Algorithm::Dsgd) };
    let mut walk = sim(walk_cfg, TopologyKind::Ring, 8);
    let mut dsgd = sim(dsgd_cfg, TopologyKind::Ring, 8);
    for _ in 0..10 {
        walk.run_round().unwrap();
        dsgd.run_round().unwrap();
        assert_eq!(params_of(&walk), params_of(&dsgd));
    }
}

#[test]
fn self_loop_walks_reduce_to_dfedavg() {
    let mut walk = sim(base(Algorithm::DFedRW), TopologyKind::Expander { c: 3 }, 8)
        .with_transition(TransitionMatrix::identity(8))
        .unwrap();
    let mut local = sim(base(Algorithm::DFedAvg), TopologyKind::Expander { c: 3 }, 8);
    for _ in 0..10 {
        let a = walk.run_round().unwrap();
        let b = local.run_round().unwrap();
        assert_eq!(params_of(&walk), params_of(&local));
        assert!(a.messages.iter().all(|m| m.kind == MessageKind::Aggregate));
        assert_eq!(a.messages, b.messages);
    }
}

#[test]
fn one_chain_on_a_ring_takes_exactly_its_budget() {
    let cfg = RoundConfig { chains: 1, epochs: 3, ..base(Algorithm::DFedRW) };
    let mut s = sim(cfg, TopologyKind::Ring, 4);
    let d = s.dim() as u64;
    let m = s.run_round().unwrap();
    assert_eq!(m.gradient_steps, 3);
    assert_eq!(m.visits.len(), 1);
    assert_eq!(m.visits[0].len(), 3);
    let hops: Vec<_> = m.messages.iter().filter(|r| r.kind == MessageKind::Hop).collect();
    assert!(hops.len() <= 3);
    assert!(hops.iter().all(|h| h.bits == 32 * d));
    assert!(hops.iter().map(|h| h.bits).sum::<u64>() <= 3 * 32 * d);
    for pair in m.visits[0].windows(2) {
        assert!(s.graph().neighbors(pair[0]).contains(&pair[1]));
    }
    assert_conserved(&m);
}

#[test]
fn truncated_chains_take_their_reduced_budget() {
    let cfg = RoundConfig {
        chains: 4,
        epochs: 5,
        truncated_epochs: 2,
        hetero_pct: 50.0,
        ..base(Algorithm::DFedRW)
    };
    let mut s = sim(cfg, TopologyKind::Complete, 8);
    for _ in 0..3 {
        let m = s.run_round().unwrap();
        assert_eq!(m.gradient_steps, 2 * 5 + 2 * 2);
        let mut lens: Vec<usize> = m.visits.iter().map(Vec::len).collect();
        lens.sort_unstable();
        assert_eq!(lens, [2, 2, 5, 5]);
    }
}

#[test]
fn baselines_drop_stragglers() {
    for algorithm in [Algorithm::FedAvg, Algorithm::DFedAvg] {
        let cfg = RoundConfig {
            epochs: 5,
            truncated_epochs: 1,
            hetero_pct: 50.0,
            ..base(algorithm)
        };
        let mut s = sim(cfg, TopologyKind::Complete, 8);
        let m = s.run_round().unwrap();
        assert_eq!(m.visits.len(), 2);
        assert_eq!(m.gradient_steps, 10);
    }
}

#[test]
fn quantized_hops_match_the_wire_format() {
    let quant = QuantConfig::with_default_interval(8).unwrap();
    let cfg = RoundConfig { quant: Some(quant), ..base(Algorithm::QDFedRW) };
    let mut s = sim(cfg, TopologyKind::Ring, 8);
    let d = s.dim();
    for _ in 0..3 {
        let m = s.run_round().unwrap();
        assert!(m.messages.iter().any(|r| r.kind == MessageKind::Hop));
        for r in &m.messages {
            assert_eq!(r.bits, 64 + 8 * d as u64);
        }
        assert_conserved(&m);
    }
    let delta = vec![0.25f64; d];
    let bytes = quantize(&delta, &quant, &mut seed_stream(1, Purpose::HopQuant, &[0])).to_bytes();
    assert_eq!(bytes.len() as u64, (64 + 8 * d as u64).div_ceil(8));
    let full = encode_full_message(&delta);
    assert_eq!(full.len(), FULL_MESSAGE_HEADER_BYTES + 4 * d);
}

#[test]
fn fine_quantization_tracks_full_precision() {
    let quant = QuantConfig::new(32, 1e-6).unwrap();
    let (_, test) = data();
    // Full aggregation keeps every device on the same base model, where a
    // near-exact quantizer leaves the walk unchanged.
    let consensus = |a| RoundConfig { agg_fraction: 1.0, ..base(a) };
    let mut exact = sim(consensus(Algorithm::DFedRW), TopologyKind::Complete, 8);
    let mut coded = sim(
        RoundConfig { quant: Some(quant), ..consensus(Algorithm::QDFedRW) },
        TopologyKind::Complete,
        8,
    );
    for _ in 0..20 {
        exact.run_round().unwrap();
        coded.run_round().unwrap();
        let a = exact.evaluate(&test).unwrap().accuracy;
        let b = coded.evaluate(&test).unwrap().accuracy;
        assert!((a - b).abs() <= 0.005, "{a} vs {b}");
    }
}

#[test]
fn fedavg_full_participation_is_averaged_gradient_descent() {
    let cfg = RoundConfig { chains: 8, epochs: 1, ..base(Algorithm::FedAvg) };
    let mut s = sim(cfg.clone(), TopologyKind::Complete, 8);
    let (train, _) = data();
    let partition = s.partition().clone();
    let mut w = s.global_params().clone();
    for t in 1..=5u64 {
        let mut avg = vec![0.0f64; w.len()];
        for dev in 0..8 {
            let mut rng = seed_stream(SEED, Purpose::Batch, &[t, 0, dev as u64, 0]);
            let idx = batch_iter(&partition, dev, cfg.batch_size, &mut rng);
            let (x, y) = train.gather(&idx);
            let (_, g) = loss_grad(&w, &x, &y).unwrap();
            for (a, v) in avg.iter_mut().zip(g) {
                *a += v / 8.0;
            }
        }
        w.scaled_add(-lr_schedule(cfg.lr_r, t, cfg.lr_q), &avg);
        let m = s.run_round().unwrap();
        let gap = w
            .values()
            .iter()
            .zip(s.global_params().values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-12, "round {t}: {gap}");
        assert_eq!(m.server, Some(8));
        assert_eq!(m.messages.len(), 16);
        assert_conserved(&m);
    }
}

#[test]
fn complete_graph_dfedavg_matches_fedavg() {
    let tweak = |a| RoundConfig { chains: 8, epochs: 2, agg_fraction: 1.0, ..base(a) };
    let mut fed = sim(tweak(Algorithm::FedAvg), TopologyKind::Complete, 8);
    let mut dec = sim(tweak(Algorithm::DFedAvg), TopologyKind::Complete, 8);
    for _ in 0..5 {
        fed.run_round().unwrap();
        dec.run_round().unwrap();
        for dev in dec.devices() {
            assert_eq!(&dev.params, fed.global_params());
        }
    }
}

#[test]
fn dsgd_traffic_is_all_aggregation() {
    let mut s = sim(base(Algorithm::Dsgd), TopologyKind::Expander { c: 3 }, 8);
    let mut rounds = Vec::new();
    for _ in 0..3 {
        let m = s.run_round().unwrap();
        assert_eq!(m.busiest.c_upd, 0);
        assert_eq!(m.busiest.c_r, m.busiest.c_agg);
        assert_eq!(m.gradient_steps, 8);
        assert_conserved(&m);
        rounds.push(m);
    }
    let report = busiest_device_report(&rounds);
    for ((round, b), m) in report.iter().zip(&rounds) {
        assert_eq!(*round, m.round);
        assert_eq!(*b, m.busiest);
    }
}

#[test]
fn lone_contributor_is_adopted_verbatim() {
    let cfg = RoundConfig { chains: 1, epochs: 2, ..base(Algorithm::DFedRW) };
    let mut s = sim(cfg, TopologyKind::Complete, 6)
        .with_transition(TransitionMatrix::identity(6))
        .unwrap();
    let m = s.run_round().unwrap();
    let start = m.visits[0][0];
    let adopted = &s.devices()[start].params;
    for dev in s.devices() {
        assert_eq!(&dev.params, adopted);
    }
    assert_eq!(m.messages.len(), 5);
}

#[test]
fn aggregation_preserves_the_mean_of_a_common_set() {
    let cfg = RoundConfig { agg_fraction: 1.0, phi: 2, ..base(Algorithm::Dsgd) };
    let mut s = sim(cfg, TopologyKind::Complete, 8);
    let m = s.run_round().unwrap();
    assert!(!m.aggregated && m.messages.is_empty());
    let mean_before = s.consensus_params();
    s.aggregate_decentralized(1, None).unwrap();
    let mean_after = s.consensus_params();
    for (a, b) in mean_before.values().iter().zip(mean_after.values()) {
        assert!((a - b).abs() < 1e-12);
    }
    let first = &s.devices()[0].params;
    assert!(s.devices().iter().all(|d| &d.params == first));
    assert!(s.run_round().unwrap().aggregated);
}

#[test]
fn aggregator_mode_limits_receivers() {
    let cfg = RoundConfig { agg_mode: AggMode::Aggregators, agg_fraction: 0.25, ..base(Algorithm::Dsgd) };
    let mut s = sim(cfg, TopologyKind::Complete, 8);
    let m = s.run_round().unwrap();
    let receivers: BTreeSet<usize> = m.messages.iter().map(|r| r.to).collect();
    assert!(receivers.len() <= 2);
    assert_eq!(m.messages.len(), 2 * 7);
}

#[test]
fn inherited_starts_continue_each_walk() {
    let cfg = RoundConfig { chains: 1, inherit_starts: true, ..base(Algorithm::DFedRW) };
    let mut s = sim(cfg, TopologyKind::Ring, 8);
    let mut prev = s.run_round().unwrap();
    for _ in 0..4 {
        let last_hop = prev
            .messages
            .iter()
            .filter(|r| r.kind == MessageKind::Hop && r.step == Some(2))
            .map(|r| r.to)
            .next();
        let end = last_hop.unwrap_or(*prev.visits[0].last().unwrap());
        let next = s.run_round().unwrap();
        assert_eq!(next.visits[0][0], end);
        prev = next;
    }
}

#[test]
fn runs_are_reproducible() {
    for algorithm in [Algorithm::DFedRW, Algorithm::FedAvg, Algorithm::Dsgd] {
        let mut a = sim(base(algorithm), TopologyKind::Expander { c: 3 }, 8);
        let mut b = sim(base(algorithm), TopologyKind::Expander { c: 3 }, 8);
        for _ in 0..4 {
            assert_eq!(a.run_round().unwrap(), b.run_round().unwrap());
        }
        assert_eq!(params_of(&a), params_of(&b));
    }
}

#[test]
fn wrong_entry_point_is_rejected() {
    let mut s = sim(base(Algorithm::DFedRW), TopologyKind::Ring, 8);
    assert!(s.run_dsgd_round().is_err());
    assert!(s.run_dfedrw_round().is_ok());
}

#[test]
fn single_precision_simulation_tracks_double() {
    let (train, test) = synth_train_test::<f32>(4, 8, 40, 25, 0.15, 5).unwrap();
    let graph = build_topology(TopologyKind::Complete, 8, SEED).unwrap();
    let partition = partition_similarity(&train, 8, 100.0, SEED).unwrap();
    let mut single =
        Simulation::new(base(Algorithm::DFedRW), graph, train, partition, &spec(), SEED).unwrap();
    let mut double = sim(base(Algorithm::DFedRW), TopologyKind::Complete, 8);
    let (_, test64) = data();
    let start = single.evaluate(&test).unwrap().accuracy;
    for _ in 0..40 {
        single.run_round().unwrap();
        double.run_round().unwrap();
    }
    let a = single.evaluate(&test).unwrap().accuracy;
    let b = double.evaluate(&test64).unwrap().accuracy;
    assert!(a > start + 0.2, "{start} -> {a}");
    assert!((a - b).abs() <= 0.05, "{a} vs {b}");
}
