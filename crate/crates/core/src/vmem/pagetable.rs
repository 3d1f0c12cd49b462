//! Node-resident radix table pages and the sharer rings linking replicas.
//!
//! Every replica of one logical table page (same level and covering span)
//! sits in a single circular, singly linked ring. A ring holds at most one
//! page per node.

use std::collections::HashMap;
use std::fmt;

use super::layout::{Vpn, VpnRange};
use super::vma::Prot;
use crate::topology::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct FrameId(pub u64);

/// Leaf translation entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pte {
    pub present: bool,
    pub prot: Prot,
    /// Only meaningful when `present`.
    pub frame: FrameId,
    pub accessed: bool,
    pub dirty: bool,
}

impl Pte {
    pub fn mapped(frame: FrameId, prot: Prot) -> Self {
        Self { present: true, prot, frame, accessed: false, dirty: false }
    }

    /// Same translation, ignoring accessed/dirty state.
    pub fn same_mapping(&self, other: &Pte) -> bool {
        self.present == other.present && (!self.present || (self.frame == other.frame && self.prot == other.prot))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PageId(pub u32);

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pt#{}", self.0)
    }
}

/// Identity of a table page independent of which node holds it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LogicalPage {
    pub level: u8,
    pub base: Vpn,
}

#[derive(Debug, Clone)]
enum Slots {
    Interior(Box<[Option<PageId>]>),
    Leaf(Box<[Pte]>),
}

#[derive(Debug, Clone)]
pub struct PageTablePage {
    level: u8,
    node: NodeId,
    span: VpnRange,
    slots: Slots,
    occupied: Box<[u64]>,
    used: u32,
    ring_next: PageId,
}

impl PageTablePage {
    fn new(id: PageId, level: u8, node: NodeId, span: VpnRange, fanout: usize) -> Self {
        let slots = if level == 1 {
            Slots::Leaf(vec![Pte::default(); fanout].into_boxed_slice())
        } else {
            Slots::Interior(vec![None; fanout].into_boxed_slice())
        };
        Self {
            level,
            node,
            span,
            slots,
            occupied: vec![0; fanout.div_ceil(64)].into_boxed_slice(),
            used: 0,
            ring_next: id,
        }
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn span(&self) -> VpnRange {
        self.span
    }

    pub fn logical(&self) -> LogicalPage {
        LogicalPage { level: self.level, base: self.span.start }
    }

    pub fn ring_next(&self) -> PageId {
        self.ring_next
    }

    pub fn is_leaf(&self) -> bool {
        self.level == 1
    }

    /// Number of occupied slots (children or present PTEs).
    pub fn used(&self) -> usize {
        self.used as usize
    }

    pub fn is_empty(&self) -> bool {
        self.used == 0
    }

    pub fn is_occupied(&self, index: usize) -> bool {
        self.occupied[index / 64] & (1 << (index % 64)) != 0
    }

    fn mark(&mut self, index: usize, on: bool) {
        let was = self.is_occupied(index);
        if on && !was {
            self.occupied[index / 64] |= 1 << (index % 64);
            self.used += 1;
        } else if !on && was {
            self.occupied[index / 64] &= !(1 << (index % 64));
            self.used -= 1;
        }
    }

    /// Occupancy bitset, 64 slots per word.
    pub fn occupied_words(&self) -> &[u64] {
        &self.occupied
    }

    /// Occupied slot indices in ascending order.
    pub fn occupied_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.occupied.iter().enumerate().flat_map(|(w, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let tz = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(w * 64 + tz)
            })
        })
    }

    pub fn child(&self, index: usize) -> Option<PageId> {
        match &self.slots {
            Slots::Interior(children) => children[index],
            Slots::Leaf(_) => panic!("child lookup on a leaf table page"),
        }
    }

    pub fn set_child(&mut self, index: usize, child: Option<PageId>) {
        match &mut self.slots {
            Slots::Interior(children) => children[index] = child,
            Slots::Leaf(_) => panic!("child update on a leaf table page"),
        }
        self.mark(index, child.is_some());
    }

    pub fn pte(&self, index: usize) -> &Pte {
        match &self.slots {
            Slots::Leaf(ptes) => &ptes[index],
            Slots::Interior(_) => panic!("PTE lookup on an interior table page"),
        }
    }

    pub fn set_pte(&mut self, index: usize, pte: Pte) {
        match &mut self.slots {
            Slots::Leaf(ptes) => ptes[index] = pte,
            Slots::Interior(_) => panic!("PTE update on an interior table page"),
        }
        self.mark(index, pte.present);
    }

    /// Clears slot `index` and returns what it held.
    pub fn clear_pte(&mut self, index: usize) -> Pte {
        let old = *self.pte(index);
        self.set_pte(index, Pte::default());
        old
    }

    /// Records a hardware access in the accessed/dirty bits.
    pub fn mark_access(&mut self, index: usize, write: bool) {
        if let Slots::Leaf(ptes) = &mut self.slots {
            let pte = &mut ptes[index];
            debug_assert!(pte.present);
            pte.accessed = true;
            pte.dirty |= write;
        }
    }

    pub fn set_prot(&mut self, index: usize, prot: Prot) {
        if let Slots::Leaf(ptes) = &mut self.slots {
            debug_assert!(ptes[index].present);
            ptes[index].prot = prot;
        }
    }
}

/// Arena of all table pages of one address space.
#[derive(Debug, Clone)]
pub struct PageArena {
    pages: Vec<Option<PageTablePage>>,
    free: Vec<u32>,
    anchors: HashMap<LogicalPage, PageId>,
    fanout: usize,
    max_ring: usize,
    live_per_node: Vec<u64>,
}

impl PageArena {
    pub fn new(fanout: usize, node_count: usize) -> Self {
        Self {
            pages: Vec::new(),
            free: Vec::new(),
            anchors: HashMap::new(),
            fanout,
            max_ring: node_count,
            live_per_node: vec![0; node_count],
        }
    }

    pub fn get(&self, id: PageId) -> &PageTablePage {
        self.pages[id.0 as usize].as_ref().unwrap_or_else(|| panic!("{id} is not live"))
    }

    pub fn get_mut(&mut self, id: PageId) -> &mut PageTablePage {
        self.pages[id.0 as usize].as_mut().unwrap_or_else(|| panic!("{id} is not live"))
    }

    pub fn is_live(&self, id: PageId) -> bool {
        self.pages.get(id.0 as usize).is_some_and(Option::is_some)
    }

    pub fn iter(&self) -> impl Iterator<Item = (PageId, &PageTablePage)> {
        self.pages.iter().enumerate().filter_map(|(i, p)| p.as_ref().map(|p| (PageId(i as u32), p)))
    }

    /// One past the largest page id ever handed out.
    pub fn id_bound(&self) -> usize {
        self.pages.len()
    }

    pub fn live_pages(&self, node: NodeId) -> u64 {
        self.live_per_node[node.index()]
    }

    pub fn live_total(&self) -> u64 {
        self.live_per_node.iter().sum()
    }

    /// Creates a page without linking it to any ring.
    pub fn allocate_unlinked(&mut self, level: u8, node: NodeId, span: VpnRange) -> PageId {
        let id = match self.free.pop() {
            Some(slot) => PageId(slot),
            None => {
                self.pages.push(None);
                PageId(self.pages.len() as u32 - 1)
            }
        };
        self.pages[id.0 as usize] = Some(PageTablePage::new(id, level, node, span, self.fanout));
        self.live_per_node[node.index()] += 1;
        id
    }

    /// Creates a replica of the logical page `(level, span)` on `node` and
    /// links it into the ring of existing replicas, if any. Returns the new
    /// page and whether it joined an existing ring.
    pub fn allocate(&mut self, level: u8, node: NodeId, span: VpnRange) -> (PageId, bool) {
        let id = self.allocate_unlinked(level, node, span);
        let key = LogicalPage { level, base: span.start };
        match self.anchors.get(&key).copied() {
            Some(existing) => {
                self.ring_link(existing, id);
                (id, true)
            }
            None => {
                self.anchors.insert(key, id);
                (id, false)
            }
        }
    }

    /// Inserts `fresh` into the ring that `existing` belongs to.
    ///
    /// Panics if `fresh` is already linked, describes a different logical
    /// page, or sits on a node that the ring already covers.
    pub fn ring_link(&mut self, existing: PageId, fresh: PageId) {
        let (f_level, f_span, f_node, f_next) = {
            let f = self.get(fresh);
            (f.level, f.span, f.node, f.ring_next)
        };
        assert_eq!(f_next, fresh, "{fresh} is already part of a ring");
        let e = self.get(existing);
        assert!(e.level == f_level && e.span == f_span, "ring members must describe the same logical page");
        assert!(
            self.ring_members(existing).iter().all(|&(node, _)| node != f_node),
            "{f_node} already holds a replica in this ring"
        );
        let after = e.ring_next;
        self.get_mut(existing).ring_next = fresh;
        self.get_mut(fresh).ring_next = after;
        self.anchors.entry(LogicalPage { level: f_level, base: f_span.start }).or_insert(existing);
    }

    /// All replicas in the ring of `id`, starting with `id` itself.
    pub fn ring_members(&self, id: PageId) -> Vec<(NodeId, PageId)> {
        let mut members = Vec::with_capacity(4);
        let mut cursor = id;
        loop {
            let page = self.get(cursor);
            members.push((page.node, cursor));
            cursor = page.ring_next;
            if cursor == id {
                return members;
            }
            assert!(members.len() < self.max_ring, "sharer ring of {id} does not close within {} steps", self.max_ring);
        }
    }

    pub fn ring_len(&self, id: PageId) -> usize {
        self.ring_members(id).len()
    }

    /// Any live replica of the logical page.
    pub fn any_replica(&self, logical: LogicalPage) -> Option<PageId> {
        self.anchors.get(&logical).copied()
    }

    pub fn replica_on(&self, logical: LogicalPage, node: NodeId) -> Option<PageId> {
        let any = self.any_replica(logical)?;
        self.ring_members(any).into_iter().find(|&(n, _)| n == node).map(|(_, id)| id)
    }

    pub fn logical_pages(&self) -> impl Iterator<Item = (LogicalPage, PageId)> + '_ {
        self.anchors.iter().map(|(k, v)| (*k, *v))
    }

    /// Removes `id` from its ring and frees it.
    pub fn release(&mut self, id: PageId) {
        let members = self.ring_members(id);
        let logical = self.get(id).logical();
        if members.len() == 1 {
            self.anchors.remove(&logical);
        } else {
            let (_, prev) = *members.last().expect("ring has a predecessor");
            let next = self.get(id).ring_next;
            self.get_mut(prev).ring_next = next;
            if self.anchors.get(&logical) == Some(&id) {
                self.anchors.insert(logical, next);
            }
        }
        let page = self.pages[id.0 as usize].take().expect("live page");
        self.live_per_node[page.node.index()] -= 1;
        self.free.push(id.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arena() -> PageArena {
        PageArena::new(512, 4)
    }

    fn leaf_span() -> VpnRange {
        VpnRange::new(512, 1024)
    }

    #[test]
    fn two_element_cycle() {
        let mut a = arena();
        let x = a.allocate_unlinked(1, NodeId(0), leaf_span());
        let y = a.allocate_unlinked(1, NodeId(1), leaf_span());
        assert_eq!(a.ring_members(x), vec![(NodeId(0), x)]);
        a.ring_link(x, y);
        assert_eq!(a.get(x).ring_next(), y);
        assert_eq!(a.get(y).ring_next(), x);
    }

    #[test]
    fn three_element_cycle_closes() {
        let mut a = arena();
        let (x, linked) = a.allocate(1, NodeId(0), leaf_span());
        assert!(!linked);
        let (y, linked) = a.allocate(1, NodeId(1), leaf_span());
        assert!(linked);
        let (z, _) = a.allocate(1, NodeId(2), leaf_span());
        // walk next pointers by hand: three hops return to the start
        let mut cursor = x;
        let mut seen = Vec::new();
        for _ in 0..3 {
            seen.push(cursor);
            cursor = a.get(cursor).ring_next();
        }
        assert_eq!(cursor, x);
        seen.sort();
        assert_eq!(seen, vec![x, y, z]);
        assert_eq!(a.ring_len(y), 3);
    }

    #[test]
    #[should_panic(expected = "already holds a replica")]
    fn duplicate_node_is_a_protocol_bug() {
        let mut a = arena();
        let x = a.allocate_unlinked(1, NodeId(0), leaf_span());
        let y = a.allocate_unlinked(1, NodeId(0), leaf_span());
        a.ring_link(x, y);
    }

    #[test]
    #[should_panic(expected = "same logical page")]
    fn mismatched_span_is_rejected() {
        let mut a = arena();
        let x = a.allocate_unlinked(1, NodeId(0), leaf_span());
        let y = a.allocate_unlinked(1, NodeId(1), VpnRange::new(0, 512));
        a.ring_link(x, y);
    }

    #[test]
    fn release_shrinks_ring() {
        let mut a = arena();
        let (x, _) = a.allocate(1, NodeId(0), leaf_span());
        let (y, _) = a.allocate(1, NodeId(3), leaf_span());
        let logical = a.get(x).logical();
        assert_eq!(a.replica_on(logical, NodeId(3)), Some(y));
        a.release(y);
        assert_eq!(a.ring_members(x), vec![(NodeId(0), x)]);
        assert_eq!(a.replica_on(logical, NodeId(3)), None);
        a.release(x);
        assert_eq!(a.any_replica(logical), None);
        assert_eq!(a.live_total(), 0);
    }

    #[test]
    fn releasing_the_anchor_moves_it() {
        let mut a = arena();
        let (x, _) = a.allocate(1, NodeId(0), leaf_span());
        let (y, _) = a.allocate(1, NodeId(1), leaf_span());
        let logical = a.get(x).logical();
        a.release(x);
        assert_eq!(a.any_replica(logical), Some(y));
    }

    #[test]
    fn occupancy_tracking() {
        let mut a = arena();
        let (x, _) = a.allocate(1, NodeId(0), leaf_span());
        let page = a.get_mut(x);
        page.set_pte(3, Pte::mapped(FrameId(9), Prot::R));
        page.set_pte(200, Pte::mapped(FrameId(10), Prot::R));
        page.set_pte(3, Pte::mapped(FrameId(9), Prot::RW));
        assert_eq!(page.used(), 2);
        assert_eq!(page.occupied_slots().collect::<Vec<_>>(), vec![3, 200]);
        page.mark_access(200, true);
        assert!(page.pte(200).dirty && page.pte(200).accessed);
        assert!(page.clear_pte(3).present);
        assert_eq!(page.used(), 1);
    }
}
