//! Randomized protocol checks over whole traces.

mod common;

use std::collections::BTreeSet;

use common::{fuzz_trace, topo, FuzzShape, PAGE};
use proptest::prelude::*;
use ptsim_core::metrics::{CostBreakdown, OpClass, Scalar};
use ptsim_core::mmu::AccessKind;
use ptsim_core::policy::ReplicationPolicy;
use ptsim_core::topology::NodeId;
use ptsim_core::vmem::{ProcessId, Prot, ThreadId};
use ptsim_core::{
    run_events, AddrRef, AuditMode, EventSummary, ExperimentConfig, Op, RangeRef, RunError, TraceEvent, Workload,
};

fn config(policy: ReplicationPolicy, shape: &FuzzShape, audit: AuditMode) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(topo(shape.nodes, shape.cores_per_node), policy, Workload::Events(vec![]));
    c.audit = audit;
    c
}

fn policies() -> Vec<ReplicationPolicy> {
    vec![
        ReplicationPolicy::NONE,
        ReplicationPolicy::EAGER,
        ReplicationPolicy::lazy(0, false),
        ReplicationPolicy::lazy(0, true),
        ReplicationPolicy::lazy(3, true),
        ReplicationPolicy::lazy(9, false),
    ]
}

#[test]
fn every_policy_survives_full_audit() {
    let shape = FuzzShape { events: 2500, ..Default::default() };
    for seed in 0..6 {
        let trace = fuzz_trace(seed, &shape);
        for policy in policies() {
            if let Err(e) = run_events(&config(policy, &shape, AuditMode::Full), &trace, None) {
                panic!("{policy} seed {seed}: {e}");
            }
        }
    }
}

#[test]
fn bounded_tlbs_stay_safe_with_sampled_audit() {
    let shape = FuzzShape { events: 5000, ..Default::default() };
    for seed in 100..104 {
        let trace = fuzz_trace(seed, &shape);
        for policy in policies() {
            let mut c = config(policy, &shape, AuditMode::Sampled(1));
            c.tlb_capacity = Some(8);
            run_events(&c, &trace, None).unwrap_or_else(|e| panic!("{policy} seed {seed}: {e}"));
        }
    }
}

#[test]
fn missed_invalidations_are_reported_with_the_first_bad_event() {
    let shape = FuzzShape { events: 3000, ..Default::default() };
    let trace = fuzz_trace(7, &shape);
    let mut c = config(ReplicationPolicy::EAGER, &shape, AuditMode::Sampled(500));
    c.drop_invalidations = true;
    let Err(RunError::Invariant(sampled)) = run_events(&c, &trace, None) else { panic!("not detected") };
    c.audit = AuditMode::Full;
    let Err(RunError::Invariant(full)) = run_events(&c, &trace, None) else { panic!("not detected") };
    assert_eq!(sampled.event_index, full.event_index);
    assert_eq!(sampled.kind, ptsim_core::ViolationKind::Tlb);
    // the violation surfaces right after a shootdown that had targets
    let mut summaries = Vec::new();
    let mut sink = |s: &EventSummary| summaries.push(s.clone());
    let _ = run_events(&c, &trace, Some(&mut sink));
    let culprit = &summaries[full.event_index as usize];
    assert!(culprit.shootdown.is_some_and(|s| s.targets > 0), "{culprit:?}");
}

#[test]
fn report_totals_equal_the_sum_of_event_summaries() {
    let shape = FuzzShape { events: 4000, ..Default::default() };
    for policy in policies() {
        let trace = fuzz_trace(3, &shape);
        let mut sum = CostBreakdown::default();
        let mut calls = std::collections::BTreeMap::<OpClass, u64>::new();
        let (mut local, mut remote, mut targets) = (0, 0, 0);
        let mut sink = |s: &EventSummary| {
            assert_eq!(s.total, s.cost.total());
            sum += &s.cost;
            *calls.entry(s.op.unwrap()).or_default() += 1;
            if let Some(sd) = s.shootdown {
                local += sd.ipis_local;
                remote += sd.ipis_remote;
                targets += sd.targets as u64;
            }
        };
        let out = run_events(&config(policy, &shape, AuditMode::Off), &trace, Some(&mut sink)).unwrap();
        let m = out.record.report;
        assert_eq!(m.cost(), &sum, "{policy}");
        for (op, n) in calls {
            assert_eq!(m.op(op).calls, n);
        }
        assert_eq!(m.get(Scalar::IpiLocal), local);
        assert_eq!(m.get(Scalar::IpiRemote), remote);
        assert_eq!(m.get(Scalar::IpiLocal) + m.get(Scalar::IpiRemote), m.get(Scalar::ShootdownTargets));
        assert_eq!(targets, m.get(Scalar::ShootdownTargets));
    }
}

#[test]
fn live_page_counter_matches_the_arena() {
    let shape = FuzzShape { events: 4000, ..Default::default() };
    for policy in policies() {
        let out = run_events(&config(policy, &shape, AuditMode::Off), &fuzz_trace(9, &shape), None).unwrap();
        let space = out.sim.process(ProcessId(0)).unwrap();
        for n in 0..shape.nodes {
            assert_eq!(out.record.report.page_count(NodeId(n)), space.arena().live_pages(NodeId(n)), "{policy}");
        }
    }
}

fn ev(seq: u64, thread: u64, op: Op) -> TraceEvent {
    TraceEvent { seq, process: ProcessId(0), thread: ThreadId(thread), op }
}

/// Several threads touch a mapping, then it is unmapped as a whole.
#[test]
fn whole_unmap_leaves_no_trace_anywhere() {
    for policy in policies() {
        let mut trace = vec![];
        for t in 0..4 {
            trace.push(ev(trace.len() as u64 + 1, t, Op::Spawn { node: NodeId(t as u16) }));
        }
        let handle = trace.len() as u64 + 1;
        trace.push(ev(handle, 0, Op::Mmap { len: 700 * PAGE, prot: Prot::RW, node: None }));
        for page in (0..700).step_by(3) {
            let kind = if page % 2 == 0 { AccessKind::Write } else { AccessKind::Read };
            let addr = AddrRef { vma: Some(handle), addr: page * PAGE };
            trace.push(ev(trace.len() as u64 + 1, page % 4, Op::Access { addr, kind }));
        }
        let full = RangeRef { vma: Some(handle), addr: 0, len: None };
        trace.push(ev(trace.len() as u64 + 1, 2, Op::Munmap { range: full }));
        let shape = FuzzShape::default();
        let out = run_events(&config(policy, &shape, AuditMode::Full), &trace, None).unwrap();
        let space = out.sim.process(ProcessId(0)).unwrap();
        assert!(space.vmas().is_empty());
        for (_, page) in space.arena().iter() {
            assert!(!page.is_leaf(), "{policy}: leaf page survived");
        }
        for tlb in out.sim.mmu().tlbs() {
            assert_eq!(tlb.len(), 0, "{policy}");
        }
        let m = &out.record.report;
        let nodes: BTreeSet<_> = (0..4).map(NodeId).collect();
        let allocated: u64 = nodes.iter().map(|&n| m.get(ptsim_core::Counter::FramesAllocated(n))).sum();
        let freed: u64 = nodes.iter().map(|&n| m.get(ptsim_core::Counter::FramesFreed(n))).sum();
        assert_eq!(allocated, freed);
        // only the roots remain
        let roots = space.roots().iter().flatten().count() as u64;
        assert_eq!(space.arena().live_total(), roots, "{policy}");
    }
}

#[test]
fn repeated_mprotect_only_shoots_down_once() {
    for policy in policies() {
        let mut trace = vec![ev(1, 0, Op::Spawn { node: NodeId(0) }), ev(2, 1, Op::Spawn { node: NodeId(1) })];
        trace.push(ev(3, 0, Op::Mmap { len: 4 * PAGE, prot: Prot::RW, node: None }));
        for (i, t) in [0u64, 1].into_iter().enumerate() {
            let addr = AddrRef { vma: Some(3), addr: i as u64 * PAGE };
            trace.push(ev(4 + i as u64, t, Op::Access { addr, kind: AccessKind::Write }));
        }
        let range = RangeRef { vma: Some(3), addr: 0, len: Some(4 * PAGE) };
        trace.push(ev(6, 0, Op::Mprotect { range, prot: Prot::R }));
        trace.push(ev(7, 0, Op::Mprotect { range, prot: Prot::R }));
        let mut summaries = vec![];
        let mut sink = |s: &EventSummary| summaries.push(s.clone());
        run_events(&config(policy, &FuzzShape::default(), AuditMode::Full), &trace, Some(&mut sink)).unwrap();
        assert!(summaries[5].shootdown.is_some() && summaries[5].pte_changes > 0, "{policy}");
        assert!(summaries[6].shootdown.is_none() && summaries[6].pte_changes == 0, "{policy}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn random_traces_keep_invariants(
        seed in any::<u64>(),
        nodes in 2u16..=5,
        cores in 1u32..=3,
        max_pages in 1u64..64,
        degree in 0u8..=9,
        filter in any::<bool>(),
        mode in 0u8..3,
    ) {
        let shape = FuzzShape { nodes, cores_per_node: cores, events: 600, max_pages, ..Default::default() };
        let policy = match mode {
            0 => ReplicationPolicy::NONE,
            1 => ReplicationPolicy::EAGER,
            _ => ReplicationPolicy::lazy(degree, filter),
        };
        let trace = fuzz_trace(seed, &shape);
        let result = run_events(&config(policy, &shape, AuditMode::Full), &trace, None);
        prop_assert!(result.is_ok(), "{}", result.err().unwrap());
    }
}
