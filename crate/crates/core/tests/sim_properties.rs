use std::collections::BTreeMap;

use proptest::prelude::*;

use cdml::archetypes::{preset, ArchetypeKind, VariantFlags};
use cdml::harness::{run_scenario, ScenarioConfig, ScenarioRun};
use cdml::netsim::{CrashAt, FaultSpec, TraceRecord};
use cdml::protocol::{Phase, ProtocolKind};

fn base(kind: ArchetypeKind, seed: u64) -> ScenarioConfig {
    let mut cfg = preset(kind, VariantFlags::default()).unwrap();
    cfg.seed = seed;
    cfg.stop.max_rounds = Some(4);
    cfg
}

fn arb_kind() -> impl Strategy<Value = ArchetypeKind> {
    prop::sample::select(ArchetypeKind::ALL.to_vec())
}

fn arb_run() -> impl Strategy<Value = ScenarioRun> {
    (arb_kind(), any::<u64>(), 0.0f64..0.3, prop::option::of((1u32..3, 0u64..30))).prop_map(|(kind, seed, p, crash)| {
        let mut cfg = base(kind, seed);
        cfg.faults.push(FaultSpec::DropMessages {
            probability: p,
            seed,
            from_tick: 5,
            to_tick: 60,
        });
        if let Some((agent, tick)) = crash {
            cfg.faults.push(FaultSpec::CrashAgent {
                agent,
                at: CrashAt::Tick(tick),
            });
        }
        run_scenario(&cfg).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_message_is_delivered_or_dropped_once(run in arb_run()) {
        prop_assert!(run.sim.trace.check_conservation().is_ok());
    }

    #[test]
    fn deliveries_follow_sends(run in arb_run()) {
        let mut sent = BTreeMap::new();
        for r in &run.sim.trace.records {
            match r {
                TraceRecord::Sent { tick, id, deliver_at, .. } => {
                    prop_assert!(deliver_at > tick);
                    sent.insert(*id, *tick);
                }
                TraceRecord::Delivered { tick, id } => prop_assert!(*tick > sent[id]),
                _ => {}
            }
        }
    }

    #[test]
    fn crashed_agents_stay_silent(run in arb_run()) {
        let mut crashed_at = BTreeMap::new();
        for r in &run.sim.trace.records {
            match r {
                TraceRecord::Fault { tick, fault: FaultSpec::CrashAgent { agent, .. } } => {
                    crashed_at.insert(*agent, *tick);
                }
                TraceRecord::Sent { tick, from, .. } => {
                    if let Some(t) = crashed_at.get(from) {
                        prop_assert!(tick < t, "agent {} sent at {} after crashing at {}", from, tick, t);
                    }
                }
                _ => {}
            }
        }
    }

    #[test]
    fn messages_use_permitted_edges(run in arb_run()) {
        for r in &run.sim.trace.records {
            if let TraceRecord::Sent { from, to, .. } = r {
                let ok = [Phase::Initialization, Phase::Operation, Phase::Dissolution]
                    .into_iter()
                    .any(|p| run.sim.graph.permits(*from, *to, p));
                prop_assert!(ok, "{} -> {} has no edge", from, to);
            }
        }
    }

    #[test]
    fn activities_and_sends_respect_roles(run in arb_run()) {
        for r in &run.sim.trace.records {
            match r {
                TraceRecord::Activity { agent, activity, .. } => {
                    prop_assert!(run.sim.agents[*agent as usize].agent_type.may_perform(*activity));
                }
                TraceRecord::Sent { from, protocol, .. } => {
                    prop_assert!(run.sim.agents[*from as usize].agent_type.may_send(*protocol));
                }
                _ => {}
            }
        }
    }

    #[test]
    fn phases_never_regress(run in arb_run()) {
        let mut last: BTreeMap<u32, Phase> = BTreeMap::new();
        for r in &run.sim.trace.records {
            if let TraceRecord::Phase { agent, phase, .. } = r {
                if let Some(prev) = last.get(agent) {
                    prop_assert!(phase >= prev);
                }
                last.insert(*agent, *phase);
            }
        }
    }

    #[test]
    fn report_totals_match_trace(run in arb_run()) {
        let by = run.sim.trace.sent_by_protocol();
        for p in ProtocolKind::ALL {
            let (sent, elements) = by.get(&p).copied().unwrap_or((0, 0));
            prop_assert_eq!(run.report.messages_sent.get(&p).copied().unwrap_or(0), sent);
            prop_assert_eq!(run.report.payload_elements.get(&p).copied().unwrap_or(0), elements);
            let delivered = run.sim.trace.delivered_by_protocol().get(&p).copied().unwrap_or(0);
            prop_assert_eq!(run.report.messages_delivered.get(&p).copied().unwrap_or(0), delivered);
            let dropped = run.report.messages_dropped.get(&p).copied().unwrap_or(0);
            prop_assert_eq!(sent, delivered + dropped);
        }
    }
}

#[test]
fn zero_tick_budget_leaves_only_setup() {
    for kind in ArchetypeKind::ALL {
        let mut cfg = base(kind, 1);
        cfg.stop.max_ticks = Some(0);
        let run = run_scenario(&cfg).unwrap();
        assert_eq!(run.report.rounds_completed, 0);
        assert!(run.sim.trace.records.iter().all(|r| !matches!(r, TraceRecord::Delivered { .. } | TraceRecord::Metric { .. })));
    }
}

#[test]
fn certain_loss_drops_everything_in_window() {
    let mut cfg = base(ArchetypeKind::Control, 3);
    cfg.faults.push(FaultSpec::DropMessages {
        probability: 1.0,
        seed: 0,
        from_tick: 0,
        to_tick: u64::MAX,
    });
    let run = run_scenario(&cfg).unwrap();
    assert!(run.report.messages_delivered.values().all(|&d| d == 0));
    assert_eq!(run.report.rounds_completed, 0);
}

#[test]
fn zero_loss_matches_fault_free() {
    let clean = run_scenario(&base(ArchetypeKind::Robustness, 3)).unwrap();
    let mut cfg = base(ArchetypeKind::Robustness, 3);
    cfg.faults.push(FaultSpec::DropMessages {
        probability: 0.0,
        seed: 0,
        from_tick: 0,
        to_tick: 100,
    });
    let faulty = run_scenario(&cfg).unwrap();
    assert_eq!(clean.report.messages_delivered, faulty.report.messages_delivered);
    assert_eq!(clean.report.losses, faulty.report.losses);
}

#[test]
fn archetype_graph_shapes() {
    let conf = run_scenario(&base(ArchetypeKind::Confidentiality, 1)).unwrap();
    let pairs = conf.sim.graph.operation_pairs();
    assert!(pairs.iter().all(|&(a, b)| a == 0 || b == 0), "star: every operation link touches the hub");

    let ctrl = run_scenario(&base(ArchetypeKind::Control, 1)).unwrap();
    let n = ctrl.sim.agents.len() as u32;
    assert_eq!(ctrl.sim.graph.operation_pairs().len(), (n - 1) as usize, "tree: n - 1 links");

    for kind in [ArchetypeKind::Flexibility, ArchetypeKind::Robustness] {
        let run = run_scenario(&base(kind, 1)).unwrap();
        let n = run.sim.agents.len();
        assert_eq!(run.sim.graph.operation_pairs().len(), n * (n - 1) / 2, "{kind}: complete graph");
    }
}
