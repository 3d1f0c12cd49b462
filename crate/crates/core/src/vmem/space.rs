use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::layout::{AddressLayout, Vpn, VpnRange};
use super::pagetable::{LogicalPage, PageArena, PageId, Pte};
use super::vma::{Vma, VmaId, VmaSet};
use crate::error::EventError;
use crate::topology::{CoreId, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProcessId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ThreadId(pub u64);

impl fmt::Display for ThreadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "thread{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreadPlacement {
    pub node: NodeId,
    pub core: CoreId,
}

/// Address space of one process: VMAs, table pages and thread placement.
///
/// With `single_tree` set there is one translation tree shared by all
/// nodes; otherwise each node has its own replica rooted in `roots`.
#[derive(Debug, Clone)]
pub struct ProcessSpace {
    pub pid: ProcessId,
    layout: AddressLayout,
    single_tree: bool,
    vmas: VmaSet,
    arena: PageArena,
    roots: Vec<Option<PageId>>,
    threads: BTreeMap<ThreadId, ThreadPlacement>,
    cursors: Vec<u64>,
    next_vma: u64,
    handles: HashMap<u64, VpnRange>,
}

impl ProcessSpace {
    pub fn new(pid: ProcessId, layout: AddressLayout, node_count: usize, single_tree: bool) -> Self {
        let region = layout.span_pages(layout.levels() - 1);
        Self {
            pid,
            layout,
            single_tree,
            vmas: VmaSet::new(),
            arena: PageArena::new(layout.fanout(), node_count),
            roots: vec![None; node_count],
            threads: BTreeMap::new(),
            // node n allocates from root slot n + 1; slot 0 stays unused
            cursors: (0..node_count as u64).map(|n| (n + 1) * region).collect(),
            next_vma: 0,
            handles: HashMap::new(),
        }
    }

    pub fn layout(&self) -> &AddressLayout {
        &self.layout
    }

    pub fn single_tree(&self) -> bool {
        self.single_tree
    }

    pub fn vmas(&self) -> &VmaSet {
        &self.vmas
    }

    pub fn vmas_mut(&mut self) -> &mut VmaSet {
        &mut self.vmas
    }

    pub fn arena(&self) -> &PageArena {
        &self.arena
    }

    pub fn arena_mut(&mut self) -> &mut PageArena {
        &mut self.arena
    }

    pub fn vma_lookup(&self, vpn: Vpn) -> Option<&Vma> {
        self.vmas.lookup(vpn)
    }

    pub fn threads(&self) -> &BTreeMap<ThreadId, ThreadPlacement> {
        &self.threads
    }

    pub fn threads_mut(&mut self) -> &mut BTreeMap<ThreadId, ThreadPlacement> {
        &mut self.threads
    }

    pub fn thread(&self, tid: ThreadId) -> Option<ThreadPlacement> {
        self.threads.get(&tid).copied()
    }

    pub fn fresh_vma_id(&mut self) -> VmaId {
        self.next_vma += 1;
        VmaId(self.next_vma - 1)
    }

    /// Root of the tree consulted by walks on `node`.
    pub fn tree_root(&self, node: NodeId) -> Option<PageId> {
        if self.single_tree {
            self.roots.iter().flatten().next().copied()
        } else {
            self.roots[node.index()]
        }
    }

    /// Node-indexed roots. In single-tree mode at most one entry is set.
    pub fn roots(&self) -> &[Option<PageId>] {
        &self.roots
    }

    pub fn set_root(&mut self, node: NodeId, root: PageId) {
        debug_assert!(!self.single_tree || self.roots.iter().all(Option::is_none));
        self.roots[node.index()] = Some(root);
    }

    /// Leaf page and slot translating `vpn` in the tree used by `node`,
    /// without charging anything.
    pub fn leaf_slot(&self, node: NodeId, vpn: Vpn) -> Option<(PageId, usize)> {
        let mut page = self.tree_root(node)?;
        for level in (2..=self.layout.levels()).rev() {
            page = self.arena.get(page).child(self.layout.index_at(vpn, level))?;
        }
        Some((page, self.layout.index_at(vpn, 1)))
    }

    /// Present PTE for `vpn` in the tree used by `node`.
    pub fn pte(&self, node: NodeId, vpn: Vpn) -> Option<&Pte> {
        let (leaf, slot) = self.leaf_slot(node, vpn)?;
        Some(self.arena.get(leaf).pte(slot)).filter(|p| p.present)
    }

    /// Any replica of the leaf page covering `vpn`.
    pub fn any_leaf(&self, vpn: Vpn) -> Option<PageId> {
        let span = self.layout.covering_span(vpn, 1);
        self.arena.any_replica(LogicalPage { level: 1, base: span.start })
    }

    /// Reserves `pages` of virtual space in the region of `owner`.
    ///
    /// Requests of at least one leaf span are aligned to a leaf boundary so
    /// large mappings start on a fresh leaf table page.
    pub fn reserve(&mut self, owner: NodeId, pages: u64) -> Result<VpnRange, EventError> {
        let region = self.layout.span_pages(self.layout.levels() - 1);
        let region_end = (owner.0 as u64 + 2)
            .checked_mul(region)
            .filter(|&end| end <= self.layout.vpn_limit())
            .ok_or(EventError::AddressSpaceExhausted(owner))?;
        let leaf = self.layout.span_pages(1);
        let cursor = &mut self.cursors[owner.index()];
        let start = if pages >= leaf { cursor.div_ceil(leaf) * leaf } else { *cursor };
        let end = start.checked_add(pages).filter(|&end| end <= region_end);
        let end = end.ok_or(EventError::AddressSpaceExhausted(owner))?;
        *cursor = end;
        Ok(VpnRange::new(start, end))
    }

    pub fn register_handle(&mut self, handle: u64, range: VpnRange) {
        self.handles.insert(handle, range);
    }

    /// Original range of the mapping created by the mmap event `handle`.
    pub fn handle(&self, handle: u64) -> Option<VpnRange> {
        self.handles.get(&handle).copied()
    }
}
