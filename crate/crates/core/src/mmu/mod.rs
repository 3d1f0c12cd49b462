//! Per-core TLBs, page walks over node-local replicas, the fault path for
//! each replication policy, shootdown delivery and accessed/dirty
//! aggregation.

mod tlb;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use tlb::{CoreTlb, TlbSnapshot, DEFAULT_TLB_CAPACITY};

use crate::error::EventError;
use crate::metrics::{CostBreakdown, Counter, MetricsReport, Scalar};
use crate::policy::{prefetch_window, ReplicationMode, ReplicationPolicy};
use crate::topology::{CoreId, MachineTopology, NodeId};
use crate::vmem::{FrameId, LogicalPage, PageId, ProcessSpace, Prot, Pte, Vpn, VpnRange};

/// Kind of memory access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

impl AccessKind {
    pub fn required_prot(self) -> Prot {
        match self {
            AccessKind::Read => Prot::R,
            AccessKind::Write => Prot::W,
        }
    }

    pub fn is_write(self) -> bool {
        self == AccessKind::Write
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// The local replica already had the entry.
    LocalHit,
    /// The entry (and possibly prefetched neighbours) came from the owner.
    CopiedFromOwner,
    /// The page had never been touched; a frame was allocated.
    FreshAllocation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultOutcome {
    pub kind: FaultKind,
    /// Entries copied from the owner, including the requested one.
    pub copied_count: usize,
    /// True when a non-owner node had to read the owner's tree.
    pub consulted_owner: bool,
    pub charged: u64,
}

/// Result of a translation walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalkOutcome {
    Leaf {
        page: PageId,
        slot: usize,
        pte: Pte,
    },
    /// The node has no tree yet.
    NoRoot,
    /// The slot for the address was empty in the table page at `level`
    /// (`level == 1` means the leaf page exists but the PTE is not present).
    Missing {
        level: u8,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShootdownOutcome {
    pub targets: usize,
    pub invalidations: usize,
    pub ipis_local: u64,
    pub ipis_remote: u64,
}

/// Machine-wide translation state shared by all processes.
#[derive(Debug, Clone)]
pub struct Mmu {
    topo: MachineTopology,
    policy: ReplicationPolicy,
    tlbs: Vec<CoreTlb>,
    frame_nodes: Vec<NodeId>,
    metrics: MetricsReport,
    drop_remote_invalidations: bool,
}

impl Mmu {
    pub fn new(
        topo: MachineTopology,
        policy: ReplicationPolicy,
        tlb_capacity: Option<usize>,
        levels: u8,
        page_size: u64,
    ) -> Self {
        let tlbs = (0..topo.core_count() as u32).map(|c| CoreTlb::new(CoreId(c), tlb_capacity)).collect();
        let metrics = MetricsReport::new(topo.node_count(), levels, page_size);
        Self { topo, policy, tlbs, frame_nodes: Vec::new(), metrics, drop_remote_invalidations: false }
    }

    pub fn topology(&self) -> &MachineTopology {
        &self.topo
    }

    pub fn policy(&self) -> &ReplicationPolicy {
        &self.policy
    }

    pub fn metrics(&self) -> &MetricsReport {
        &self.metrics
    }

    pub fn metrics_mut(&mut self) -> &mut MetricsReport {
        &mut self.metrics
    }

    pub fn tlb(&self, core: CoreId) -> &CoreTlb {
        &self.tlbs[core.index()]
    }

    pub fn tlbs(&self) -> &[CoreTlb] {
        &self.tlbs
    }

    pub fn frame_node(&self, frame: FrameId) -> NodeId {
        self.frame_nodes[frame.0 as usize]
    }

    /// Deliberately skip TLB invalidation on IPI targets. Exists only to
    /// check that the auditor notices missed invalidations.
    pub fn inject_dropped_invalidations(&mut self, on: bool) {
        self.drop_remote_invalidations = on;
    }

    pub fn tlb_lookup(&mut self, core: CoreId, vpn: Vpn, cost: &mut CostBreakdown) -> Option<TlbSnapshot> {
        let hit = self.tlbs[core.index()].lookup(vpn);
        if hit.is_some() {
            self.metrics.record(Scalar::TlbHits, 1);
            cost.tlb += self.topo.costs().tlb_hit;
        } else {
            self.metrics.record(Scalar::TlbMisses, 1);
        }
        hit
    }

    pub fn tlb_fill(&mut self, core: CoreId, vpn: Vpn, pte: &Pte) {
        debug_assert!(pte.present);
        if self.tlbs[core.index()].insert(vpn, TlbSnapshot { frame: pte.frame, prot: pte.prot }) {
            self.metrics.record(Scalar::TlbEvictions, 1);
        }
    }

    /// Drops every entry cached by `core` (context switch or migration).
    pub fn tlb_flush(&mut self, core: CoreId) -> usize {
        self.tlbs[core.index()].flush()
    }

    /// Walks the tree used by `node`, charging one table-page read per level
    /// visited, priced by where each page lives.
    pub fn walk(&mut self, space: &ProcessSpace, node: NodeId, vpn: Vpn, cost: &mut CostBreakdown) -> WalkOutcome {
        self.metrics.record(Scalar::Walks, 1);
        let layout = *space.layout();
        let Some(mut page_id) = space.tree_root(node) else { return WalkOutcome::NoRoot };
        let arena = space.arena();
        for level in (1..=layout.levels()).rev() {
            let page = arena.get(page_id);
            debug_assert!(space.single_tree() || page.node() == node, "walk left the local replica");
            cost.walk += self.topo.access_cost(node, page.node());
            let counter = if page.node() == node { Counter::WalkLocal(level) } else { Counter::WalkRemote(level) };
            self.metrics.record(counter, 1);
            let slot = layout.index_at(vpn, level);
            if level == 1 {
                let pte = *page.pte(slot);
                return if pte.present {
                    WalkOutcome::Leaf { page: page_id, slot, pte }
                } else {
                    WalkOutcome::Missing { level: 1 }
                };
            }
            match page.child(slot) {
                Some(child) => page_id = child,
                None => return WalkOutcome::Missing { level },
            }
        }
        unreachable!("walk ends at the leaf level")
    }

    /// Reads `owner`'s tree on behalf of `node`. Returns the leaf page and
    /// slot when the owner has a present PTE.
    fn owner_walk(
        &mut self,
        space: &ProcessSpace,
        node: NodeId,
        owner: NodeId,
        vpn: Vpn,
        cost: &mut CostBreakdown,
    ) -> Option<(PageId, usize)> {
        let layout = *space.layout();
        let mut page_id = space.tree_root(owner)?;
        let price = self.topo.access_cost(node, owner);
        let counter = if node == owner { Scalar::OwnerWalkLocal } else { Scalar::OwnerWalkRemote };
        for level in (1..=layout.levels()).rev() {
            cost.fault += price;
            self.metrics.record(counter, 1);
            let page = space.arena().get(page_id);
            let slot = layout.index_at(vpn, level);
            if level == 1 {
                return page.pte(slot).present.then_some((page_id, slot));
            }
            page_id = page.child(slot)?;
        }
        None
    }

    fn allocate_page(
        &mut self,
        space: &mut ProcessSpace,
        level: u8,
        node: NodeId,
        span: VpnRange,
        initiator: NodeId,
        cost: &mut CostBreakdown,
    ) -> PageId {
        let (id, linked) = space.arena_mut().allocate(level, node, span);
        self.metrics.record(Counter::PtPagesAllocated(node), 1);
        if linked {
            self.metrics.record(Scalar::RingLinks, 1);
        }
        cost.fault += self.topo.access_cost(initiator, node);
        id
    }

    /// Creates the root of `node`'s tree if it does not exist yet.
    pub fn ensure_root(
        &mut self,
        space: &mut ProcessSpace,
        node: NodeId,
        initiator: NodeId,
        cost: &mut CostBreakdown,
    ) -> PageId {
        if let Some(root) = space.tree_root(node) {
            return root;
        }
        let levels = space.layout().levels();
        let span = space.layout().covering_span(Vpn(0), levels);
        let root = self.allocate_page(space, levels, node, span, initiator, cost);
        space.set_root(node, root);
        self.metrics.record(Scalar::RootReplicas, 1);
        root
    }

    /// Makes sure the tree used by `tree_node` has table pages down to the
    /// leaf covering `vpn`. New pages go on `tree_node`, or on the
    /// initiator's node when there is a single first-touch tree.
    fn ensure_path(
        &mut self,
        space: &mut ProcessSpace,
        tree_node: NodeId,
        vpn: Vpn,
        initiator: NodeId,
        cost: &mut CostBreakdown,
    ) -> PageId {
        let layout = *space.layout();
        let mut page_id = space.tree_root(tree_node).expect("tree has a root");
        let place = if space.single_tree() { initiator } else { tree_node };
        for level in (2..=layout.levels()).rev() {
            let slot = layout.index_at(vpn, level);
            page_id = match space.arena().get(page_id).child(slot) {
                Some(child) => child,
                None => {
                    let span = layout.covering_span(vpn, level - 1);
                    let child = self.allocate_page(space, level - 1, place, span, initiator, cost);
                    space.arena_mut().get_mut(page_id).set_child(slot, Some(child));
                    child
                }
            };
        }
        page_id
    }

    fn allocate_frame(&mut self, node: NodeId) -> FrameId {
        self.frame_nodes.push(node);
        self.metrics.record(Counter::FramesAllocated(node), 1);
        FrameId(self.frame_nodes.len() as u64 - 1)
    }

    /// Writes `pte` into every replica in the ring of `leaf`, charging the
    /// initiator for each write.
    fn write_ring(
        &mut self,
        space: &mut ProcessSpace,
        leaf: PageId,
        slot: usize,
        pte: Pte,
        initiator: NodeId,
        cost: &mut CostBreakdown,
    ) -> usize {
        let members = space.arena().ring_members(leaf);
        for &(node, page) in &members {
            space.arena_mut().get_mut(page).set_pte(slot, pte);
            cost.fault += self.topo.access_cost(initiator, node);
        }
        if members.len() > 1 {
            self.metrics.record(Scalar::PteReplicaInserts, members.len() as u64 - 1);
        }
        members.len()
    }

    /// Resolves a translation miss for a thread on `node`.
    pub fn handle_fault(
        &mut self,
        space: &mut ProcessSpace,
        node: NodeId,
        vaddr: u64,
        access: AccessKind,
        cost: &mut CostBreakdown,
    ) -> Result<FaultOutcome, EventError> {
        let layout = *space.layout();
        let vpn = layout.vpn_of(vaddr);
        let Some(vma) = space.vma_lookup(vpn).cloned() else {
            self.metrics.record(Scalar::SegFaults, 1);
            return Err(EventError::SegFault { addr: vaddr });
        };
        if !vma.prot.contains(access.required_prot()) {
            self.metrics.record(Scalar::ProtectionFaults, 1);
            return Err(EventError::ProtectionFault { addr: vaddr });
        }
        let before = cost.total();
        cost.fault += self.topo.costs().fault_overhead;

        let mut outcome =
            FaultOutcome { kind: FaultKind::LocalHit, copied_count: 0, consulted_owner: false, charged: 0 };
        let local_present = space.pte(node, vpn).is_some();
        if !local_present {
            let fresh_pte = |mmu: &mut Mmu| Pte::mapped(mmu.allocate_frame(vma.bind.unwrap_or(node)), vma.prot);
            match self.policy.mode {
                ReplicationMode::NoReplication => {
                    self.ensure_root(space, node, node, cost);
                    let leaf = self.ensure_path(space, node, vpn, node, cost);
                    let pte = fresh_pte(self);
                    self.write_ring(space, leaf, layout.index_at(vpn, 1), pte, node, cost);
                    outcome.kind = FaultKind::FreshAllocation;
                }
                ReplicationMode::Eager => {
                    let nodes: Vec<NodeId> = self.topo.nodes().collect();
                    let mut leaf = None;
                    for &m in &nodes {
                        self.ensure_root(space, m, node, cost);
                        leaf = Some(self.ensure_path(space, m, vpn, node, cost));
                    }
                    let pte = fresh_pte(self);
                    let leaf = leaf.expect("machine has nodes");
                    self.write_ring(space, leaf, layout.index_at(vpn, 1), pte, node, cost);
                    outcome.kind = FaultKind::FreshAllocation;
                }
                ReplicationMode::Lazy => {
                    outcome = self.lazy_fault(space, node, vpn, &vma, cost)?;
                }
            }
        } else {
            self.metrics.record(Scalar::FaultLocalHit, 1);
        }
        match outcome.kind {
            FaultKind::LocalHit => {}
            FaultKind::CopiedFromOwner => self.metrics.record(Scalar::FaultCopied, 1),
            FaultKind::FreshAllocation => self.metrics.record(Scalar::FaultFresh, 1),
        }
        outcome.charged = cost.total() - before;
        Ok(outcome)
    }

    fn lazy_fault(
        &mut self,
        space: &mut ProcessSpace,
        node: NodeId,
        vpn: Vpn,
        vma: &crate::vmem::Vma,
        cost: &mut CostBreakdown,
    ) -> Result<FaultOutcome, EventError> {
        let layout = *space.layout();
        let owner = vma.owner;
        if space.tree_root(node).is_none() {
            // a new replica root starts as a copy of the owner's root
            if space.tree_root(owner).is_some() {
                cost.fault += self.topo.access_cost(node, owner);
            }
            self.ensure_root(space, node, node, cost);
        }
        let slot = layout.index_at(vpn, 1);
        let mut outcome =
            FaultOutcome { kind: FaultKind::FreshAllocation, copied_count: 0, consulted_owner: false, charged: 0 };

        let owner_leaf = if node == owner {
            None
        } else {
            outcome.consulted_owner = true;
            self.metrics.record(Scalar::OwnerConsults, 1);
            self.owner_walk(space, node, owner, vpn, cost)
        };

        match owner_leaf {
            Some((owner_page, owner_slot)) => {
                debug_assert_eq!(owner_slot, slot);
                let local_leaf = self.ensure_path(space, node, vpn, node, cost);
                let window =
                    prefetch_window(slot, self.policy.prefetch_degree, layout.covering_span(vpn, 1), vma.range);
                let mut copied = 0usize;
                for i in window {
                    let src = *space.arena().get(owner_page).pte(i);
                    if src.present && !space.arena().get(local_leaf).pte(i).present {
                        space.arena_mut().get_mut(local_leaf).set_pte(i, src);
                        copied += 1;
                    }
                }
                debug_assert!(copied >= 1);
                // PTEs move in 64-byte lines of eight entries
                cost.fault += self.topo.access_cost(node, owner) * copied.div_ceil(8) as u64;
                self.metrics.record(Scalar::PteCopies, copied as u64);
                self.metrics.record(Scalar::PtePrefetched, copied as u64 - 1);
                outcome.kind = FaultKind::CopiedFromOwner;
                outcome.copied_count = copied;
            }
            None => {
                // Untouched page: insert into the owner's tree and ours, and
                // into every other replica already sharing the leaf.
                self.ensure_root(space, owner, node, cost);
                self.ensure_path(space, owner, vpn, node, cost);
                let local_leaf = self.ensure_path(space, node, vpn, node, cost);
                let pte = Pte::mapped(self.allocate_frame(vma.bind.unwrap_or(node)), vma.prot);
                self.write_ring(space, local_leaf, slot, pte, node, cost);
            }
        }
        Ok(outcome)
    }

    /// Sends shootdown IPIs from `initiator` to `targets` and drops their
    /// cached entries for `range`. The initiator flushes its own TLB
    /// locally without an IPI.
    pub fn apply_shootdown(
        &mut self,
        initiator: CoreId,
        targets: &BTreeSet<CoreId>,
        range: VpnRange,
        cost: &mut CostBreakdown,
    ) -> ShootdownOutcome {
        let from = self.topo.node_of(initiator);
        let mut out = ShootdownOutcome { targets: targets.len(), ..Default::default() };
        out.invalidations += self.tlbs[initiator.index()].invalidate(range);
        for &core in targets {
            let to = self.topo.node_of(core);
            cost.ipi += self.topo.ipi_cost(from, to);
            if from == to {
                out.ipis_local += 1;
            } else {
                out.ipis_remote += 1;
            }
            if !self.drop_remote_invalidations {
                out.invalidations += self.tlbs[core.index()].invalidate(range);
            }
        }
        self.metrics.record(Scalar::Shootdowns, 1);
        self.metrics.record(Scalar::ShootdownTargets, targets.len() as u64);
        self.metrics.record(Scalar::IpiLocal, out.ipis_local);
        self.metrics.record(Scalar::IpiRemote, out.ipis_remote);
        self.metrics.record(Scalar::TlbInvalidations, out.invalidations as u64);
        out
    }

    /// Charges a memory access from `node` to the node holding `frame`.
    pub fn charge_data(&mut self, node: NodeId, frame: FrameId, cost: &mut CostBreakdown) {
        let home = self.frame_node(frame);
        cost.data += self.topo.access_cost(node, home);
        self.metrics.record(if home == node { Scalar::DataLocal } else { Scalar::DataRemote }, 1);
    }

    pub fn record_frame_free(&mut self, frame: FrameId) {
        let node = self.frame_node(frame);
        self.metrics.record(Counter::FramesFreed(node), 1);
    }

    /// Frees empty table pages on the path to `vpn` in `tree_node`'s tree,
    /// bottom-up. Roots are kept. Returns how many pages were freed.
    pub fn prune_path(&mut self, space: &mut ProcessSpace, tree_node: NodeId, vpn: Vpn) -> usize {
        let layout = *space.layout();
        let Some(root) = space.tree_root(tree_node) else { return 0 };
        let mut path = vec![root];
        for level in (2..=layout.levels()).rev() {
            match space.arena().get(*path.last().unwrap()).child(layout.index_at(vpn, level)) {
                Some(child) => path.push(child),
                None => break,
            }
        }
        let mut freed = 0;
        // path[i] sits at level `levels - i`
        while path.len() > 1 {
            let page = *path.last().unwrap();
            if !space.arena().get(page).is_empty() {
                break;
            }
            path.pop();
            let parent = *path.last().unwrap();
            let parent_level = layout.levels() - (path.len() as u8 - 1);
            let node = space.arena().get(page).node();
            if space.arena().ring_len(page) > 1 {
                self.metrics.record(Scalar::RingUnlinks, 1);
            }
            space.arena_mut().release(page);
            space.arena_mut().get_mut(parent).set_child(layout.index_at(vpn, parent_level), None);
            self.metrics.record(Counter::PtPagesFreed(node), 1);
            freed += 1;
        }
        freed
    }
}

/// OR of the accessed and dirty bits over every replica of `vpn`'s leaf.
/// `None` when no replica maps the page.
pub fn aggregate_ad_bits(space: &ProcessSpace, vpn: Vpn) -> Option<(bool, bool)> {
    let layout = space.layout();
    let leaf = space.any_leaf(vpn)?;
    let slot = layout.index_at(vpn, 1);
    let mut found = None;
    for (_, page) in space.arena().ring_members(leaf) {
        let pte = space.arena().get(page).pte(slot);
        if pte.present {
            let (a, d) = found.unwrap_or((false, false));
            found = Some((a | pte.accessed, d | pte.dirty));
        }
    }
    found
}

/// Replicas of the logical leaf page covering `vpn`.
pub fn leaf_replicas(space: &ProcessSpace, vpn: Vpn) -> Vec<(NodeId, PageId)> {
    let base = space.layout().covering_span(vpn, 1).start;
    space.arena().any_replica(LogicalPage { level: 1, base }).map(|p| space.arena().ring_members(p)).unwrap_or_default()
}
