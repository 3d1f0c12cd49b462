//! Exact per-operation behaviour on small hand-written traces.

mod common;

use common::{topo, PAGE};
use ptsim_core::metrics::Scalar;
use ptsim_core::mmu::{AccessKind, FaultKind};
use ptsim_core::policy::ReplicationPolicy;
use ptsim_core::topology::NodeId;
use ptsim_core::vmem::{LogicalPage, ProcessId, Prot, ThreadId, Vpn};
use ptsim_core::{AddrRef, EventSummary, Op, RangeRef, SimConfig, Simulator, TraceEvent};

struct Script {
    events: Vec<TraceEvent>,
}

impl Script {
    fn new() -> Self {
        Self { events: vec![] }
    }

    fn push(&mut self, thread: u64, op: Op) -> u64 {
        let seq = self.events.len() as u64 + 1;
        self.events.push(TraceEvent { seq, process: ProcessId(0), thread: ThreadId(thread), op });
        seq
    }

    fn spawn(&mut self, thread: u64, node: u16) {
        self.push(thread, Op::Spawn { node: NodeId(node) });
    }

    fn mmap(&mut self, thread: u64, len: u64) -> u64 {
        self.push(thread, Op::Mmap { len, prot: Prot::RW, node: None })
    }

    fn mmap_on(&mut self, thread: u64, len: u64, node: u16) -> u64 {
        self.push(thread, Op::Mmap { len, prot: Prot::RW, node: Some(NodeId(node)) })
    }

    fn touch(&mut self, thread: u64, handle: u64, page: u64, kind: AccessKind) -> u64 {
        self.push(thread, Op::Access { addr: AddrRef { vma: Some(handle), addr: page * PAGE }, kind })
    }

    fn protect(&mut self, thread: u64, handle: u64, pages: u64, prot: Prot) -> u64 {
        let range = RangeRef { vma: Some(handle), addr: 0, len: Some(pages * PAGE) };
        self.push(thread, Op::Mprotect { range, prot })
    }

    fn unmap(&mut self, thread: u64, handle: u64) -> u64 {
        self.push(thread, Op::Munmap { range: RangeRef { vma: Some(handle), addr: 0, len: None } })
    }

    fn run(&self, policy: ReplicationPolicy, nodes: u16, cores: u32) -> (Vec<EventSummary>, Simulator) {
        let mut sim = Simulator::new(SimConfig::new(topo(nodes, cores), policy));
        let summaries = self.events.iter().map(|e| sim.apply(e)).collect();
        (summaries, sim)
    }
}

fn at(summaries: &[EventSummary], seq: u64) -> &EventSummary {
    &summaries[seq as usize - 1]
}

#[test]
fn mmap_assigns_owner_and_allocates_nothing() {
    let mut s = Script::new();
    s.spawn(0, 2);
    let h = s.mmap(0, 8192);
    let tiny = s.mmap(0, 1);
    let (sums, sim) = s.run(ReplicationPolicy::lazy(0, true), 4, 1);
    assert_eq!(at(&sums, h).cost.overhead, sim.topology().costs().mmap_overhead);
    let space = sim.process(ProcessId(0)).unwrap();
    let vmas: Vec<_> = space.vmas().iter().cloned().collect();
    assert_eq!(vmas.len(), 2);
    assert_eq!(vmas[0].owner, NodeId(2));
    assert_eq!(vmas[0].range.len(), 2);
    assert_eq!(vmas[1].range.len(), 1);
    assert!(at(&sums, tiny).error.is_none());
    assert_eq!(space.arena().live_total(), 0, "lazy roots appear with the first fault");
    assert_eq!(sim.metrics().get(Scalar::FaultFresh), 0);
}

#[test]
fn private_chunks_are_owned_by_their_threads() {
    let mut s = Script::new();
    for t in 0..4 {
        s.spawn(t, t as u16);
    }
    for t in 0..4 {
        s.mmap(t, 16 * PAGE);
    }
    let (_, sim) = s.run(ReplicationPolicy::lazy(0, true), 4, 1);
    let owners: Vec<u16> = sim.process(ProcessId(0)).unwrap().vmas().iter().map(|v| v.owner.0).collect();
    assert_eq!(owners, vec![0, 1, 2, 3]);
}

/// One worker on node 0 and a spinner on every other socket.
fn spinner_script(nodes: u16) -> (Script, u64) {
    let mut s = Script::new();
    s.spawn(0, 0);
    for n in 1..nodes {
        s.spawn(n as u64, n);
    }
    let h = s.mmap(0, PAGE);
    s.touch(0, h, 0, AccessKind::Write);
    (s, h)
}

#[test]
fn munmap_single_page_filtered_vs_eager() {
    let (mut s, h) = spinner_script(8);
    let call = s.unmap(0, h);

    let (sums, _) = s.run(ReplicationPolicy::lazy(0, true), 8, 2);
    let sd = at(&sums, call).shootdown.unwrap();
    assert_eq!((sd.ipis_remote, sd.ipis_local), (0, 0));
    assert_eq!(at(&sums, call).coherence_local + at(&sums, call).coherence_remote, 1);

    let (sums, sim) = s.run(ReplicationPolicy::EAGER, 8, 2);
    let e = at(&sums, call);
    assert_eq!(e.coherence_local + e.coherence_remote, 8);
    assert_eq!(e.coherence_remote, 7);
    assert_eq!(e.shootdown.unwrap().ipis_remote, 7);
    let costs = sim.topology().costs();
    assert_eq!(e.cost.ipi, 7 * costs.ipi_remote);
}

#[test]
fn munmap_of_untouched_mapping_is_free_of_pte_work() {
    let mut s = Script::new();
    s.spawn(0, 0);
    s.spawn(1, 1);
    let h = s.mmap(0, 64 * PAGE);
    let call = s.unmap(0, h);
    for policy in [ReplicationPolicy::NONE, ReplicationPolicy::EAGER, ReplicationPolicy::lazy(0, false)] {
        let (sums, sim) = s.run(policy, 2, 1);
        let e = at(&sums, call);
        assert!(e.shootdown.is_none() && e.pte_changes == 0 && e.error.is_none(), "{policy}");
        assert!(sim.process(ProcessId(0)).unwrap().vmas().is_empty());
    }
}

#[test]
fn munmap_of_a_hole_is_an_error() {
    let mut s = Script::new();
    s.spawn(0, 0);
    let h = s.mmap(0, PAGE);
    s.unmap(0, h);
    let again = s.unmap(0, h);
    let (sums, sim) = s.run(ReplicationPolicy::EAGER, 1, 1);
    assert!(at(&sums, again).error.is_some());
    assert_eq!(sim.metrics().get(Scalar::TraceErrors), 1);
}

#[test]
fn mprotect_filtered_targets_only_local_spinners() {
    let mut s = Script::new();
    s.spawn(0, 0);
    let mut tid = 1;
    for n in 0..8 {
        for _ in 0..3 {
            s.spawn(tid, n);
            tid += 1;
        }
    }
    let h = s.mmap(0, PAGE);
    s.touch(0, h, 0, AccessKind::Write);
    let call = s.protect(0, h, 1, Prot::R);

    let (sums, sim) = s.run(ReplicationPolicy::lazy(0, true), 8, 4);
    let e = at(&sums, call);
    let sd = e.shootdown.unwrap();
    assert_eq!((sd.targets, sd.ipis_local, sd.ipis_remote), (3, 3, 0));
    assert_eq!(e.coherence_local + e.coherence_remote, 1);
    assert_eq!(e.cost.ipi, 3 * sim.topology().costs().ipi_local);

    let (sums, _) = s.run(ReplicationPolicy::lazy(0, false), 8, 4);
    let sd = at(&sums, call).shootdown.unwrap();
    assert_eq!((sd.ipis_local, sd.ipis_remote), (3, 21));

    let (sums, _) = s.run(ReplicationPolicy::EAGER, 8, 4);
    let e = at(&sums, call);
    assert_eq!((e.coherence_local, e.coherence_remote), (1, 7));
}

#[test]
fn mprotect_without_resident_pages_skips_shootdown() {
    let mut s = Script::new();
    s.spawn(0, 0);
    s.spawn(1, 1);
    let h = s.mmap(0, 8 * PAGE);
    let call = s.protect(0, h, 8, Prot::R);
    for policy in [ReplicationPolicy::NONE, ReplicationPolicy::EAGER, ReplicationPolicy::lazy(0, false)] {
        let (sums, sim) = s.run(policy, 2, 1);
        assert!(at(&sums, call).shootdown.is_none(), "{policy}");
        assert_eq!(sim.process(ProcessId(0)).unwrap().vmas().iter().next().unwrap().prot, Prot::R);
    }
}

#[test]
fn protection_and_segmentation_faults() {
    let mut s = Script::new();
    s.spawn(0, 0);
    let h = s.mmap(0, PAGE);
    s.protect(0, h, 1, Prot::R);
    let write = s.touch(0, h, 0, AccessKind::Write);
    let read = s.touch(0, h, 0, AccessKind::Read);
    let wild = s.push(0, Op::Access { addr: AddrRef { vma: None, addr: 0x10 }, kind: AccessKind::Read });
    let noncanonical = s.push(0, Op::Access { addr: AddrRef { vma: None, addr: 1 << 60 }, kind: AccessKind::Read });
    let (sums, sim) = s.run(ReplicationPolicy::lazy(0, true), 1, 1);
    assert!(at(&sums, write).error.as_deref().unwrap().contains("protection"));
    assert!(at(&sums, read).error.is_none());
    assert!(at(&sums, wild).error.as_deref().unwrap().contains("segmentation"));
    assert!(at(&sums, noncanonical).error.is_some());
    let m = sim.metrics();
    assert_eq!(m.get(Scalar::ProtectionFaults), 1);
    assert_eq!(m.get(Scalar::SegFaults), 2);
    assert_eq!(m.get(Scalar::TraceErrors), 0);
}

#[test]
fn tlb_hit_costs_only_the_hit_and_the_data() {
    let mut s = Script::new();
    s.spawn(0, 0);
    let h = s.mmap(0, PAGE);
    s.touch(0, h, 0, AccessKind::Write);
    let hit = s.touch(0, h, 0, AccessKind::Read);
    let (sums, sim) = s.run(ReplicationPolicy::NONE, 2, 1);
    let c = sim.topology().costs();
    let e = at(&sums, hit);
    assert_eq!(e.total, c.tlb_hit + c.local_mem);
    assert_eq!(e.cost.walk, 0);
}

#[test]
fn remote_tables_local_data() {
    // tables built by a thread on node 0, data bound to node 1, then the
    // thread moves to node 1: every walk step is remote, the data is local
    let mut s = Script::new();
    s.spawn(0, 0);
    let h = s.mmap_on(0, PAGE, 1);
    s.touch(0, h, 0, AccessKind::Write);
    s.push(0, Op::Migrate { node: NodeId(1) });
    let call = s.touch(0, h, 0, AccessKind::Read);
    let (sums, sim) = s.run(ReplicationPolicy::NONE, 2, 1);
    let c = sim.topology().costs();
    let e = at(&sums, call);
    assert_eq!(e.cost.walk, 4 * c.remote_mem);
    assert_eq!(e.cost.data, c.local_mem);
    assert_eq!(e.fault, None);
}

#[test]
fn first_remote_touch_copies_from_the_owner() {
    let mut s = Script::new();
    s.spawn(0, 0);
    s.spawn(1, 1);
    let h = s.mmap(0, 4 * PAGE);
    s.touch(0, h, 0, AccessKind::Write);
    s.touch(0, h, 1, AccessKind::Write);
    let call = s.touch(1, h, 0, AccessKind::Read);
    let (sums, sim) = s.run(ReplicationPolicy::lazy(0, false), 2, 1);
    let e = at(&sums, call);
    assert_eq!(e.fault, Some(FaultKind::CopiedFromOwner));
    assert_eq!(e.copied, 1);
    let m = sim.metrics();
    assert_eq!(m.get(Scalar::OwnerWalkRemote), 4);
    assert_eq!(m.get(Scalar::OwnerConsults), 1);
    let c = sim.topology().costs();
    // new root copied from the owner's root, owner walk, new path pages, one PTE line
    assert_eq!(e.cost.fault, c.remote_mem + 4 * c.remote_mem + 4 * c.local_mem + c.remote_mem);

    let (sums, _) = s.run(ReplicationPolicy::lazy(2, false), 2, 1);
    assert_eq!(at(&sums, call).copied, 2, "window of four covers both touched pages");
}

#[test]
fn fresh_allocation_reaches_every_sharer() {
    // nodes 1 and 2 already share the leaf; node 1 first-touches a new page
    let mut s = Script::new();
    for n in 0..3 {
        s.spawn(n, n as u16);
    }
    let h = s.mmap(0, 8 * PAGE);
    s.touch(0, h, 0, AccessKind::Write);
    s.touch(1, h, 0, AccessKind::Read);
    s.touch(2, h, 0, AccessKind::Read);
    let call = s.touch(1, h, 5, AccessKind::Write);
    let (sums, sim) = s.run(ReplicationPolicy::lazy(0, true), 3, 1);
    assert_eq!(at(&sums, call).fault, Some(FaultKind::FreshAllocation));
    let space = sim.process(ProcessId(0)).unwrap();
    let vpn = Vpn(space.vmas().iter().next().unwrap().range.start.0 + 5);
    for n in 0..3 {
        assert!(space.pte(NodeId(n), vpn).is_some(), "node {n}");
    }
}

fn migration_script(pages: u64) -> (Script, u64, u64) {
    let mut s = Script::new();
    s.spawn(0, 0);
    let h = s.mmap(0, pages * PAGE);
    for p in 0..pages {
        s.touch(0, h, p, AccessKind::Write);
    }
    s.push(0, Op::Migrate { node: NodeId(1) });
    let first = s.events.len() as u64 + 1;
    for p in 0..pages {
        s.touch(0, h, p, AccessKind::Read);
    }
    let second = s.events.len() as u64 + 1;
    for p in 0..pages {
        s.touch(0, h, p, AccessKind::Read);
    }
    (s, first, second)
}

#[test]
fn migration_under_each_policy() {
    let pages = 2048;
    let (s, first, second) = migration_script(pages);
    let faults = |sums: &[EventSummary], from: u64, n: u64| {
        (from..from + n).filter(|&q| at(sums, q).fault.is_some()).count() as u64
    };

    let (sums, sim) = s.run(ReplicationPolicy::lazy(9, false), 2, 1);
    assert_eq!(faults(&sums, first, pages), pages.div_ceil(512));
    assert_eq!(faults(&sums, second, pages), 0);
    assert_eq!(sim.metrics().get(Scalar::OwnerConsults), pages.div_ceil(512));

    let (sums, _) = s.run(ReplicationPolicy::EAGER, 2, 1);
    assert_eq!(faults(&sums, first, pages), 0);

    let (_, sim) = s.run(ReplicationPolicy::NONE, 2, 1);
    // after the move every walk level is remote
    let m = sim.metrics();
    assert!(m.walk_remote() > 0);
    assert_eq!(m.walk_remote() % 4, 0);
}

#[test]
fn spinner_audience_and_thread_limits() {
    let mut s = Script::new();
    let mut tid = 0;
    for n in 0..8 {
        for _ in 0..17 {
            s.spawn(tid, n);
            tid += 1;
        }
    }
    s.spawn(tid, 0);
    let worker = tid;
    let h = s.mmap(worker, PAGE);
    s.touch(worker, h, 0, AccessKind::Write);
    let call = s.protect(worker, h, 1, Prot::R);
    let (sums, sim) = s.run(ReplicationPolicy::NONE, 8, 18);
    assert_eq!(sim.process(ProcessId(0)).unwrap().threads().len(), 137);
    assert_eq!(at(&sums, call).shootdown.unwrap().targets, 136);

    let mut s = Script::new();
    s.spawn(0, 0);
    s.spawn(1, 1);
    let h = s.mmap(0, PAGE);
    s.touch(0, h, 0, AccessKind::Write);
    s.push(1, Op::Exit);
    let call = s.protect(0, h, 1, Prot::R);
    let full = s.push(2, Op::Spawn { node: NodeId(0) });
    let (sums, _) = s.run(ReplicationPolicy::NONE, 2, 1);
    assert_eq!(at(&sums, call).shootdown.unwrap().targets, 0);
    assert!(at(&sums, full).error.is_some());
}

#[test]
fn accessed_and_dirty_bits_aggregate_across_replicas() {
    let mut s = Script::new();
    s.spawn(0, 0);
    s.spawn(1, 1);
    let h = s.mmap(0, 2 * PAGE);
    s.touch(0, h, 0, AccessKind::Read);
    s.touch(1, h, 0, AccessKind::Write);
    s.touch(1, h, 1, AccessKind::Read);
    let (_, sim) = s.run(ReplicationPolicy::lazy(0, false), 2, 1);
    let space = sim.process(ProcessId(0)).unwrap();
    let base = space.vmas().iter().next().unwrap().range.start.0;
    let ad = |v| ptsim_core::mmu::aggregate_ad_bits(space, Vpn(v));
    assert_eq!(ad(base), Some((true, true)));
    assert_eq!(ad(base + 1), Some((true, false)));
    assert_eq!(ad(base + 2), None);
    // only node 1 saw the write
    let leaf = LogicalPage { level: 1, base: space.layout().covering_span(Vpn(base), 1).start };
    let on0 = space.arena().replica_on(leaf, NodeId(0)).unwrap();
    assert!(!space.arena().get(on0).pte((base % 512) as usize).dirty);
}
