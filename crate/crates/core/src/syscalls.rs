//! Trace-visible operations and the single-threaded event executor.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::EventError;
use crate::metrics::{CostBreakdown, MetricsReport, OpClass, Scalar};
use crate::mmu::{AccessKind, FaultKind, Mmu, ShootdownOutcome, DEFAULT_TLB_CAPACITY};
use crate::policy::{coherence_targets, shootdown_targets, ReplicationMode, ReplicationPolicy};
use crate::topology::{CoreId, MachineTopology, NodeId};
use crate::vmem::{
    AddressLayout, FrameId, LogicalPage, PageId, ProcessId, ProcessSpace, Prot, ThreadId, ThreadPlacement, Vma, Vpn,
    VpnRange,
};

/// Address operand. With `vma` set, `addr` is a byte offset from the start
/// of the mapping created by the mmap event whose `seq` is `vma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddrRef {
    pub vma: Option<u64>,
    pub addr: u64,
}

/// Range operand. `len: None` with a `vma` handle means the whole mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeRef {
    pub vma: Option<u64>,
    pub addr: u64,
    pub len: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Spawn { node: NodeId },
    Exit,
    Migrate { node: NodeId },
    Mmap { len: u64, prot: Prot, node: Option<NodeId> },
    Munmap { range: RangeRef },
    Mprotect { range: RangeRef, prot: Prot },
    Access { addr: AddrRef, kind: AccessKind },
    Spin { iters: u64 },
}

impl Op {
    pub fn class(&self) -> OpClass {
        match self {
            Op::Spawn { .. } => OpClass::Spawn,
            Op::Exit => OpClass::Exit,
            Op::Migrate { .. } => OpClass::Migrate,
            Op::Mmap { .. } => OpClass::Mmap,
            Op::Munmap { .. } => OpClass::Munmap,
            Op::Mprotect { .. } => OpClass::Mprotect,
            Op::Access { .. } => OpClass::Access,
            Op::Spin { .. } => OpClass::Spin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub process: ProcessId,
    pub thread: ThreadId,
    pub op: Op,
}

/// What one event did and what it cost.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSummary {
    pub seq: u64,
    pub op: Option<OpClass>,
    pub cost: CostBreakdown,
    pub total: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultKind>,
    pub copied: usize,
    pub coherence_local: u64,
    pub coherence_remote: u64,
    pub pte_changes: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shootdown: Option<ShootdownOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub topology: MachineTopology,
    pub policy: ReplicationPolicy,
    pub layout: AddressLayout,
    /// `None` for unbounded TLBs.
    pub tlb_capacity: Option<usize>,
}

impl SimConfig {
    pub fn new(topology: MachineTopology, policy: ReplicationPolicy) -> Self {
        Self { topology, policy, layout: AddressLayout::default(), tlb_capacity: Some(DEFAULT_TLB_CAPACITY) }
    }
}

/// Applies trace events in order. Identical inputs give identical results.
#[derive(Debug, Clone)]
pub struct Simulator {
    layout: AddressLayout,
    mmu: Mmu,
    processes: BTreeMap<ProcessId, ProcessSpace>,
    cores: Vec<Option<(ProcessId, ThreadId)>>,
    next_core: Vec<usize>,
    applied: u64,
}

struct Caller {
    node: NodeId,
    core: CoreId,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Self {
        let SimConfig { topology, policy, layout, tlb_capacity } = config;
        let nodes = topology.node_count();
        let cores = vec![None; topology.core_count()];
        let mmu = Mmu::new(topology, policy, tlb_capacity, layout.levels(), layout.page_size());
        Self { layout, mmu, processes: BTreeMap::new(), cores, next_core: vec![0; nodes], applied: 0 }
    }

    pub fn layout(&self) -> &AddressLayout {
        &self.layout
    }

    pub fn topology(&self) -> &MachineTopology {
        self.mmu.topology()
    }

    pub fn policy(&self) -> &ReplicationPolicy {
        self.mmu.policy()
    }

    pub fn mmu(&self) -> &Mmu {
        &self.mmu
    }

    pub fn mmu_mut(&mut self) -> &mut Mmu {
        &mut self.mmu
    }

    pub fn metrics(&self) -> &MetricsReport {
        self.mmu.metrics()
    }

    pub fn processes(&self) -> impl Iterator<Item = &ProcessSpace> {
        self.processes.values()
    }

    pub fn process(&self, pid: ProcessId) -> Option<&ProcessSpace> {
        self.processes.get(&pid)
    }

    /// Which thread currently runs on `core`.
    pub fn core_occupant(&self, core: CoreId) -> Option<(ProcessId, ThreadId)> {
        self.cores[core.index()]
    }

    pub fn events_applied(&self) -> u64 {
        self.applied
    }

    /// Absolute address of a byte offset in a mapping handle.
    pub fn resolve_addr(&self, pid: ProcessId, addr: AddrRef) -> Result<u64, EventError> {
        let space = self.processes.get(&pid).ok_or(EventError::UnknownProcess(pid.0))?;
        resolve_addr(space, addr)
    }

    pub fn apply(&mut self, event: &TraceEvent) -> EventSummary {
        let mut summary = EventSummary { seq: event.seq, op: Some(event.op.class()), ..Default::default() };
        let result = match &event.op {
            Op::Spawn { node } => self.op_spawn(event.process, event.thread, *node, &mut summary),
            Op::Exit => self.op_exit(event.process, event.thread),
            Op::Migrate { node } => self.op_migrate(event.process, event.thread, *node),
            Op::Mmap { len, prot, node } => {
                self.op_mmap(event.process, event.thread, event.seq, *len, *prot, *node, &mut summary).map(|_| ())
            }
            Op::Munmap { range } => self.op_munmap(event.process, event.thread, *range, &mut summary),
            Op::Mprotect { range, prot } => self.op_mprotect(event.process, event.thread, *range, *prot, &mut summary),
            Op::Access { addr, kind } => self.op_access(event.process, event.thread, *addr, *kind, &mut summary),
            Op::Spin { .. } => self.caller(event.process, event.thread).map(|_| ()),
        };
        if let Err(err) = result {
            if !matches!(err, EventError::SegFault { .. } | EventError::ProtectionFault { .. }) {
                self.mmu.metrics_mut().record(Scalar::TraceErrors, 1);
            }
            summary.error = Some(err.to_string());
        }
        summary.total = summary.cost.total();
        self.mmu.metrics_mut().record_op(event.op.class(), &summary.cost);
        self.applied += 1;
        summary
    }

    fn caller(&self, pid: ProcessId, tid: ThreadId) -> Result<Caller, EventError> {
        let space = self.processes.get(&pid).ok_or(EventError::UnknownProcess(pid.0))?;
        let t = space.thread(tid).ok_or(EventError::UnknownThread(tid.0))?;
        Ok(Caller { node: t.node, core: t.core })
    }

    fn free_core(&mut self, node: NodeId) -> Result<CoreId, EventError> {
        let topo = self.mmu.topology();
        if !topo.contains_node(node) {
            return Err(EventError::NodeOutOfRange(node));
        }
        let cores: Vec<CoreId> = topo.cores_of(node).collect();
        let start = self.next_core[node.index()];
        for i in 0..cores.len() {
            let core = cores[(start + i) % cores.len()];
            if self.cores[core.index()].is_none() {
                self.next_core[node.index()] = (start + i + 1) % cores.len();
                return Ok(core);
            }
        }
        Err(EventError::NoFreeCore(node))
    }

    fn op_spawn(
        &mut self,
        pid: ProcessId,
        tid: ThreadId,
        node: NodeId,
        summary: &mut EventSummary,
    ) -> Result<(), EventError> {
        if self.processes.get(&pid).is_some_and(|s| s.thread(tid).is_some()) {
            return Err(EventError::ThreadExists(tid.0));
        }
        let core = self.free_core(node)?;
        if !self.processes.contains_key(&pid) {
            let single = self.policy().mode == ReplicationMode::NoReplication;
            let mut space = ProcessSpace::new(pid, self.layout, self.topology().node_count(), single);
            match self.policy().mode {
                ReplicationMode::NoReplication => {
                    self.mmu.ensure_root(&mut space, node, node, &mut summary.cost);
                }
                ReplicationMode::Eager => {
                    for n in self.topology().nodes().collect::<Vec<_>>() {
                        self.mmu.ensure_root(&mut space, n, node, &mut summary.cost);
                    }
                }
                // lazy roots appear with the first fault on each node
                ReplicationMode::Lazy => {}
            }
            self.processes.insert(pid, space);
        }
        let space = self.processes.get_mut(&pid).expect("process exists");
        space.threads_mut().insert(tid, ThreadPlacement { node, core });
        self.cores[core.index()] = Some((pid, tid));
        Ok(())
    }

    fn op_exit(&mut self, pid: ProcessId, tid: ThreadId) -> Result<(), EventError> {
        let caller = self.caller(pid, tid)?;
        let space = self.processes.get_mut(&pid).expect("caller checked");
        space.threads_mut().remove(&tid);
        self.mmu.tlb_flush(caller.core);
        self.cores[caller.core.index()] = None;
        Ok(())
    }

    fn op_migrate(&mut self, pid: ProcessId, tid: ThreadId, node: NodeId) -> Result<(), EventError> {
        let caller = self.caller(pid, tid)?;
        if caller.node == node {
            return Ok(());
        }
        let core = self.free_core(node)?;
        self.mmu.tlb_flush(caller.core);
        self.cores[caller.core.index()] = None;
        self.cores[core.index()] = Some((pid, tid));
        let space = self.processes.get_mut(&pid).expect("caller checked");
        space.threads_mut().insert(tid, ThreadPlacement { node, core });
        Ok(())
    }

    /// Maps `len` bytes. The owner is the caller's node unless `placement`
    /// overrides it, in which case data frames are also bound there. No
    /// table pages or frames are allocated.
    #[allow(clippy::too_many_arguments)]
    pub fn op_mmap(
        &mut self,
        pid: ProcessId,
        tid: ThreadId,
        handle: u64,
        len: u64,
        prot: Prot,
        placement: Option<NodeId>,
        summary: &mut EventSummary,
    ) -> Result<Vma, EventError> {
        let caller = self.caller(pid, tid)?;
        if len == 0 {
            return Err(EventError::InvalidRange("zero-length mapping".into()));
        }
        if let Some(node) = placement {
            if !self.topology().contains_node(node) {
                return Err(EventError::NodeOutOfRange(node));
            }
        }
        summary.cost.overhead += self.topology().costs().mmap_overhead;
        let owner = placement.unwrap_or(caller.node);
        let pages = self.layout.pages_for(len);
        let space = self.processes.get_mut(&pid).expect("caller checked");
        let range = space.reserve(owner, pages)?;
        let vma = Vma { id: space.fresh_vma_id(), range, prot, owner, bind: placement };
        space.vmas_mut().insert(vma.clone());
        space.register_handle(handle, range);
        Ok(vma)
    }

    fn resolve_range(&self, pid: ProcessId, r: RangeRef) -> Result<VpnRange, EventError> {
        let space = self.processes.get(&pid).ok_or(EventError::UnknownProcess(pid.0))?;
        let page = self.layout.page_size();
        let (base, whole) = match r.vma {
            Some(h) => {
                let range = space.handle(h).ok_or(EventError::UnknownMapping(h))?;
                (self.layout.vaddr_of(range.start), Some(range))
            }
            None => (0, None),
        };
        if !r.addr.is_multiple_of(page) {
            return Err(EventError::InvalidRange(format!("address {:#x} is not page aligned", r.addr)));
        }
        let start = base.checked_add(r.addr).ok_or_else(|| EventError::InvalidRange("overflow".into()))?;
        let pages = match (r.len, whole) {
            (Some(0), _) => return Err(EventError::InvalidRange("zero-length range".into())),
            (Some(len), _) => self.layout.pages_for(len),
            (None, Some(whole)) if r.addr == 0 => whole.len(),
            (None, _) => return Err(EventError::InvalidRange("range needs a length".into())),
        };
        let vpn = self.layout.vpn_of(start);
        let end = vpn.0.checked_add(pages).filter(|&e| e <= self.layout.vpn_limit());
        let end = end.ok_or_else(|| EventError::InvalidRange("range beyond the address space".into()))?;
        Ok(VpnRange::new(vpn.0, end))
    }

    /// Leaf pages overlapping `range` that exist on at least one node.
    fn leaves_in(&self, space: &ProcessSpace, range: VpnRange) -> Vec<(VpnRange, PageId)> {
        let fanout = self.layout.fanout() as u64;
        let mut out = Vec::new();
        let mut base = range.start.0 & !(fanout - 1);
        while base < range.end.0 {
            let logical = LogicalPage { level: 1, base: Vpn(base) };
            if let Some(any) = space.arena().any_replica(logical) {
                let span = VpnRange::new(base, base + fanout);
                out.push((span.intersect(&range), any));
            }
            base += fanout;
        }
        out
    }

    fn charge_coherence(&mut self, from: NodeId, to: NodeId, writes: u64, summary: &mut EventSummary) {
        let topo = self.mmu.topology();
        summary.cost.coherence += topo.access_cost(from, to) * writes.max(1);
        if from == to {
            summary.coherence_local += 1;
            self.mmu.metrics_mut().record(Scalar::CoherenceLocal, 1);
        } else {
            summary.coherence_remote += 1;
            self.mmu.metrics_mut().record(Scalar::CoherenceRemote, 1);
        }
    }

    pub fn op_munmap(
        &mut self,
        pid: ProcessId,
        tid: ThreadId,
        range: RangeRef,
        summary: &mut EventSummary,
    ) -> Result<(), EventError> {
        let caller = self.caller(pid, tid)?;
        let range = self.resolve_range(pid, range)?;
        let mut space = self.processes.remove(&pid).expect("caller checked");
        let result = self.unmap_in(&mut space, &caller, range, summary);
        self.processes.insert(pid, space);
        result
    }

    fn unmap_in(
        &mut self,
        space: &mut ProcessSpace,
        caller: &Caller,
        range: VpnRange,
        summary: &mut EventSummary,
    ) -> Result<(), EventError> {
        if !space.vmas().covers(range) {
            let (start, end) = (self.layout.vaddr_of(range.start), self.layout.vaddr_of(range.end));
            return Err(EventError::UnmappedRange { start, end });
        }
        summary.cost.overhead += self.topology().costs().syscall_overhead;
        let policy = *self.policy();
        let mut targets = BTreeSet::new();
        let mut touched = Vec::new();
        for (sub, any) in self.leaves_in(space, range) {
            let members = space.arena().ring_members(any);
            let has_present = members.iter().any(|&(_, p)| {
                let page = space.arena().get(p);
                sub.iter().any(|v| page.is_occupied(self.layout.index_at(v, 1)))
            });
            if !has_present {
                continue;
            }
            targets.extend(shootdown_targets(space, &[any], &policy, Some(caller.core)));
            let nodes = coherence_targets(space, any, &policy);
            let mut frames: BTreeSet<FrameId> = BTreeSet::new();
            for (node, page) in members {
                debug_assert!(nodes.contains(&node));
                let mut cleared = 0;
                for vpn in sub.iter() {
                    let slot = self.layout.index_at(vpn, 1);
                    let p = space.arena_mut().get_mut(page);
                    if p.is_occupied(slot) {
                        frames.insert(p.clear_pte(slot).frame);
                        cleared += 1;
                    }
                }
                summary.pte_changes += cleared;
                self.charge_coherence(caller.node, node, cleared, summary);
                touched.push((node, sub.start));
            }
            for frame in frames {
                self.mmu.record_frame_free(frame);
            }
        }
        if !touched.is_empty() {
            summary.shootdown = Some(self.mmu.apply_shootdown(caller.core, &targets, range, &mut summary.cost));
        }
        for (node, vpn) in touched {
            let tree = if space.single_tree() { caller.node } else { node };
            self.mmu.prune_path(space, tree, vpn);
        }
        let mut ids = Vec::new();
        let removed = space.vmas_mut().carve(range, || {
            let id = crate::vmem::VmaId(u64::MAX - ids.len() as u64);
            ids.push(id);
            id
        });
        // split pieces need real ids
        self.renumber_split_pieces(space, &ids);
        debug_assert!(!removed.is_empty());
        Ok(())
    }

    fn renumber_split_pieces(&self, space: &mut ProcessSpace, placeholders: &[crate::vmem::VmaId]) {
        if placeholders.is_empty() {
            return;
        }
        let stale: Vec<Vma> = space.vmas().iter().filter(|v| placeholders.contains(&v.id)).cloned().collect();
        for vma in stale {
            let fresh = space.fresh_vma_id();
            let removed = space.vmas_mut().carve(vma.range, || unreachable!("exact range"));
            debug_assert_eq!(removed.len(), 1);
            space.vmas_mut().insert(Vma { id: fresh, ..vma });
        }
    }

    pub fn op_mprotect(
        &mut self,
        pid: ProcessId,
        tid: ThreadId,
        range: RangeRef,
        prot: Prot,
        summary: &mut EventSummary,
    ) -> Result<(), EventError> {
        let caller = self.caller(pid, tid)?;
        let range = self.resolve_range(pid, range)?;
        let mut space = self.processes.remove(&pid).expect("caller checked");
        let result = self.protect_in(&mut space, &caller, range, prot, summary);
        self.processes.insert(pid, space);
        result
    }

    fn protect_in(
        &mut self,
        space: &mut ProcessSpace,
        caller: &Caller,
        range: VpnRange,
        prot: Prot,
        summary: &mut EventSummary,
    ) -> Result<(), EventError> {
        if !space.vmas().covers(range) {
            let (start, end) = (self.layout.vaddr_of(range.start), self.layout.vaddr_of(range.end));
            return Err(EventError::UnmappedRange { start, end });
        }
        summary.cost.overhead += self.topology().costs().syscall_overhead;
        let mut ids = Vec::new();
        space.vmas_mut().protect(range, prot, || {
            let id = crate::vmem::VmaId(u64::MAX - ids.len() as u64);
            ids.push(id);
            id
        });
        self.renumber_split_pieces(space, &ids);

        let policy = *self.policy();
        let mut targets = BTreeSet::new();
        let mut changed_any = false;
        for (sub, any) in self.leaves_in(space, range) {
            let members = space.arena().ring_members(any);
            let layout = self.layout;
            let stale = move |space: &ProcessSpace, page: PageId, vpn: Vpn| {
                let pte = space.arena().get(page).pte(layout.index_at(vpn, 1));
                pte.present && pte.prot != prot
            };
            if !members.iter().any(|&(_, p)| sub.iter().any(|v| stale(space, p, v))) {
                continue;
            }
            changed_any = true;
            targets.extend(shootdown_targets(space, &[any], &policy, Some(caller.core)));
            for (node, page) in members {
                let mut changed = 0;
                for vpn in sub.iter() {
                    if stale(space, page, vpn) {
                        space.arena_mut().get_mut(page).set_prot(layout.index_at(vpn, 1), prot);
                        changed += 1;
                    }
                }
                summary.pte_changes += changed;
                self.charge_coherence(caller.node, node, changed, summary);
            }
        }
        if changed_any {
            summary.shootdown = Some(self.mmu.apply_shootdown(caller.core, &targets, range, &mut summary.cost));
        }
        Ok(())
    }

    pub fn op_access(
        &mut self,
        pid: ProcessId,
        tid: ThreadId,
        addr: AddrRef,
        kind: AccessKind,
        summary: &mut EventSummary,
    ) -> Result<(), EventError> {
        let caller = self.caller(pid, tid)?;
        let mut space = self.processes.remove(&pid).expect("caller checked");
        let result = self.access_in(&mut space, &caller, addr, kind, summary);
        self.processes.insert(pid, space);
        result
    }

    fn access_in(
        &mut self,
        space: &mut ProcessSpace,
        caller: &Caller,
        addr: AddrRef,
        kind: AccessKind,
        summary: &mut EventSummary,
    ) -> Result<(), EventError> {
        let vaddr = resolve_addr(space, addr)?;
        if !self.layout.is_canonical(vaddr) {
            self.mmu.metrics_mut().record(Scalar::SegFaults, 1);
            return Err(EventError::SegFault { addr: vaddr });
        }
        let vpn = self.layout.vpn_of(vaddr);
        let cost = &mut summary.cost;
        let need = kind.required_prot();

        let hit = self.mmu.tlb_lookup(caller.core, vpn, cost).filter(|s| s.prot.contains(need));
        let frame = match hit {
            Some(snapshot) => snapshot.frame,
            None => {
                let pte = match self.mmu.walk(space, caller.node, vpn, cost) {
                    crate::mmu::WalkOutcome::Leaf { pte, .. } if pte.prot.contains(need) => pte,
                    _ => {
                        let outcome = self.mmu.handle_fault(space, caller.node, vaddr, kind, cost)?;
                        if outcome.kind != FaultKind::LocalHit || summary.fault.is_none() {
                            summary.fault = Some(outcome.kind);
                        }
                        summary.copied = outcome.copied_count;
                        *space.pte(caller.node, vpn).expect("fault installed a local PTE")
                    }
                };
                self.mmu.tlb_fill(caller.core, vpn, &pte);
                pte.frame
            }
        };
        let (leaf, slot) = space.leaf_slot(caller.node, vpn).expect("translation is backed locally");
        space.arena_mut().get_mut(leaf).mark_access(slot, kind.is_write());
        self.mmu.charge_data(caller.node, frame, &mut summary.cost);
        Ok(())
    }
}

fn resolve_addr(space: &ProcessSpace, addr: AddrRef) -> Result<u64, EventError> {
    match addr.vma {
        None => Ok(addr.addr),
        Some(h) => {
            let range = space.handle(h).ok_or(EventError::UnknownMapping(h))?;
            space.layout().vaddr_of(range.start).checked_add(addr.addr).ok_or(EventError::SegFault { addr: u64::MAX })
        }
    }
}
