//! Whole-system invariant checks.

use std::fmt;

use serde::Serialize;

use crate::policy::ReplicationMode;
use crate::syscalls::Simulator;
use crate::topology::{CoreId, NodeId};
use crate::vmem::{LogicalPage, PageId, ProcessSpace, Vpn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A sharer ring is broken, mixes logical pages, or repeats a node.
    Ring,
    /// A tree has a misplaced, shared, unreachable or empty table page.
    Radix,
    /// A replica holds a present PTE that the VMA owner's replica lacks.
    Owner,
    /// Two replicas disagree on a present PTE.
    Agreement,
    /// Under eager replication some replica misses an entry another has.
    Completeness,
    /// A present PTE lies outside every VMA or disagrees with its protection.
    Vma,
    /// A TLB caches a translation the core's local tree does not back.
    Tlb,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ViolationKind::Ring => "ring",
            ViolationKind::Radix => "radix",
            ViolationKind::Owner => "owner",
            ViolationKind::Agreement => "agreement",
            ViolationKind::Completeness => "completeness",
            ViolationKind::Vma => "vma",
            ViolationKind::Tlb => "tlb",
        };
        f.write_str(name)
    }
}

/// First broken invariant observed after the event at `event_index`
/// (0-based position in the trace).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InvariantViolation {
    pub event_index: u64,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} invariant violated after event index {}: {}", self.kind, self.event_index, self.detail)
    }
}

impl std::error::Error for InvariantViolation {}

type Check = Result<(), (ViolationKind, String)>;

fn fail<T>(kind: ViolationKind, detail: String) -> Result<T, (ViolationKind, String)> {
    Err((kind, detail))
}

/// Runs every check on the current state. Returns the first violation.
pub fn audit(sim: &Simulator) -> Check {
    for space in sim.processes() {
        let rings = check_rings(space, sim.topology().node_count())?;
        check_trees(space)?;
        check_entries(space, sim.policy().mode, &rings)?;
    }
    check_tlbs(sim)
}

/// Ring members of every logical page, sorted by logical page.
type Rings = Vec<(LogicalPage, Vec<(NodeId, PageId)>)>;

/// Returns the ring members of every logical page, keyed by logical page.
fn check_rings(space: &ProcessSpace, nodes: usize) -> Result<Rings, (ViolationKind, String)> {
    let arena = space.arena();
    let mut rings: Rings = Vec::new();
    for (logical, anchor) in arena.logical_pages() {
        if !arena.is_live(anchor) {
            return fail(ViolationKind::Ring, format!("anchor {anchor} of {logical:?} is not live"));
        }
        let mut members = Vec::new();
        let mut cursor = anchor;
        loop {
            if !arena.is_live(cursor) {
                return fail(ViolationKind::Ring, format!("ring of {logical:?} reaches freed page {cursor}"));
            }
            let page = arena.get(cursor);
            if page.logical() != logical {
                return fail(ViolationKind::Ring, format!("{cursor} in ring of {logical:?} is {:?}", page.logical()));
            }
            if members.iter().any(|&(n, _)| n == page.node()) {
                return fail(ViolationKind::Ring, format!("ring of {logical:?} holds two replicas on {}", page.node()));
            }
            members.push((page.node(), cursor));
            cursor = page.ring_next();
            if cursor == anchor {
                break;
            }
            if members.len() > nodes {
                return fail(ViolationKind::Ring, format!("ring of {logical:?} does not close"));
            }
        }
        rings.push((logical, members));
    }
    rings.sort_unstable_by_key(|(logical, _)| *logical);
    let in_rings: usize = rings.iter().map(|(_, m)| m.len()).sum();
    if in_rings as u64 != arena.live_total() {
        return fail(
            ViolationKind::Ring,
            format!("{} live pages but {in_rings} reachable through rings", arena.live_total()),
        );
    }
    Ok(rings)
}

fn check_trees(space: &ProcessSpace) -> Check {
    let layout = *space.layout();
    let arena = space.arena();
    let mut seen = vec![false; arena.id_bound()];
    let mut reached = 0u64;
    let roots: Vec<(NodeId, PageId)> =
        space.roots().iter().enumerate().filter_map(|(n, r)| r.map(|r| (NodeId(n as u16), r))).collect();
    if space.single_tree() && roots.len() > 1 {
        return fail(ViolationKind::Radix, format!("single-tree space has {} roots", roots.len()));
    }
    for (node, root) in roots {
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if !arena.is_live(id) {
                return fail(ViolationKind::Radix, format!("tree of {node} references freed page {id}"));
            }
            if std::mem::replace(&mut seen[id.0 as usize], true) {
                return fail(ViolationKind::Radix, format!("{id} is reachable twice"));
            }
            reached += 1;
            let page = arena.get(id);
            if !space.single_tree() && page.node() != node {
                return fail(ViolationKind::Radix, format!("tree of {node} contains {id} placed on {}", page.node()));
            }
            if id != root && page.is_empty() {
                return fail(ViolationKind::Radix, format!("non-root {id} at level {} is empty", page.level()));
            }
            if page.is_leaf() {
                continue;
            }
            for slot in page.occupied_slots() {
                let child_id = page.child(slot).expect("occupied interior slot has a child");
                if !arena.is_live(child_id) {
                    return fail(ViolationKind::Radix, format!("{id} slot {slot} references freed page {child_id}"));
                }
                let child = arena.get(child_id);
                let want = layout.slot_span(page.span().start, page.level(), slot);
                if child.level() + 1 != page.level() || child.span() != want {
                    return fail(
                        ViolationKind::Radix,
                        format!(
                            "{child_id} under {id} slot {slot} covers {:?} at level {}",
                            child.span(),
                            child.level()
                        ),
                    );
                }
                stack.push(child_id);
            }
        }
    }
    if reached != arena.live_total() {
        return fail(
            ViolationKind::Radix,
            format!("{} live pages but {reached} reachable from roots", arena.live_total()),
        );
    }
    Ok(())
}

fn check_entries(space: &ProcessSpace, mode: ReplicationMode, rings: &Rings) -> Check {
    let arena = space.arena();
    for (logical, members) in rings {
        let logical = *logical;
        if logical.level != 1 {
            continue;
        }
        let pages: Vec<_> = members.iter().map(|&(n, id)| (n, arena.get(id))).collect();
        // union of present slots across replicas; the first replica holding
        // a slot is the reference copy
        let words = pages[0].1.occupied_words().len();
        let union = (0..words).flat_map(|w| {
            let mut bits = pages.iter().fold(0u64, |acc, (_, p)| acc | p.occupied_words()[w]);
            std::iter::from_fn(move || {
                (bits != 0).then(|| {
                    let slot = w * 64 + bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    slot
                })
            })
        });
        let mut vma: Option<&crate::vmem::Vma> = None;
        for slot in union {
            let vpn = Vpn(logical.base.0 + slot as u64);
            if !vma.is_some_and(|v| v.range.contains(vpn)) {
                vma = space.vma_lookup(vpn);
            }
            let Some(vma) = vma else {
                return fail(ViolationKind::Vma, format!("present PTE for unmapped VPN {:#x}", vpn.0));
            };
            let mut reference = None;
            let mut holders = 0;
            let mut owner_has = false;
            for &(node, page) in &pages {
                if !page.is_occupied(slot) {
                    continue;
                }
                let pte = page.pte(slot);
                holders += 1;
                owner_has |= node == vma.owner;
                if pte.prot != vma.prot {
                    return fail(
                        ViolationKind::Vma,
                        format!("VPN {:#x} on {node} has prot {} but its VMA has {}", vpn.0, pte.prot, vma.prot),
                    );
                }
                match reference {
                    None => reference = Some((node, *pte)),
                    Some((first, r)) if !r.same_mapping(pte) => {
                        return fail(
                            ViolationKind::Agreement,
                            format!(
                                "VPN {:#x}: {first} maps frame {} but {node} maps frame {}",
                                vpn.0, r.frame.0, pte.frame.0
                            ),
                        );
                    }
                    Some(_) => {}
                }
            }
            if !space.single_tree() && !owner_has {
                return fail(
                    ViolationKind::Owner,
                    format!("VPN {:#x} is present on a replica but not on owner {}", vpn.0, vma.owner),
                );
            }
            if mode == ReplicationMode::Eager && holders != pages.len() {
                return fail(
                    ViolationKind::Completeness,
                    format!("VPN {:#x} present in {holders} of {} replicas", vpn.0, pages.len()),
                );
            }
        }
    }
    Ok(())
}

fn check_tlbs(sim: &Simulator) -> Check {
    for tlb in sim.mmu().tlbs() {
        let core = tlb.core();
        let Some((pid, tid)) = sim.core_occupant(core) else {
            if !tlb.is_empty() {
                return fail(ViolationKind::Tlb, format!("idle {core:?} still caches {} entries", tlb.len()));
            }
            continue;
        };
        let space = sim.process(pid).expect("occupant process exists");
        let placement = space.thread(tid).expect("occupant thread exists");
        if placement.core != core {
            return fail(
                ViolationKind::Tlb,
                format!("{tid} is recorded on {:?} but occupies {core:?}", placement.core),
            );
        }
        check_core_tlb(sim, space, placement.node, core)?;
    }
    Ok(())
}

fn check_core_tlb(sim: &Simulator, space: &ProcessSpace, node: NodeId, core: CoreId) -> Check {
    let layout = sim.layout();
    let mut worst: Option<(Vpn, String)> = None;
    for (vpn, snap) in sim.mmu().tlb(core).entries() {
        let local = space.leaf_slot(node, vpn).map(|(p, _)| p);
        let pte = local.map(|p| *space.arena().get(p).pte(layout.index_at(vpn, 1))).filter(|p| p.present);
        let problem = match pte {
            Some(pte) if pte.frame == snap.frame && pte.prot == snap.prot => continue,
            Some(pte) => format!(
                "{core:?} caches VPN {:#x} as frame {} {} but {node} maps frame {} {}",
                vpn.0, snap.frame.0, snap.prot, pte.frame.0, pte.prot
            ),
            None => format!("{core:?} caches VPN {:#x} with no local PTE on {node}", vpn.0),
        };
        // report the lowest VPN so the message does not depend on hash order
        if worst.as_ref().is_none_or(|(v, _)| vpn < *v) {
            worst = Some((vpn, problem));
        }
    }
    match worst {
        Some((_, detail)) => fail(ViolationKind::Tlb, detail),
        None => Ok(()),
    }
}
