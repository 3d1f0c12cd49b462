//! Replication policies and the two decisions they drive: how many leaf
//! entries a lazy fault copies, and which replicas and cores must hear
//! about a page-table change.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::topology::{CoreId, NodeId};
use crate::vmem::{PageId, ProcessSpace, VpnRange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReplicationMode {
    /// One tree, table pages placed on the node that first touched them.
    NoReplication,
    /// Full copy of every table page on every node.
    Eager,
    /// Per-node partial replicas filled on demand from the VMA owner.
    Lazy,
}

impl ReplicationMode {
    pub fn name(self) -> &'static str {
        match self {
            ReplicationMode::NoReplication => "none",
            ReplicationMode::Eager => "eager",
            ReplicationMode::Lazy => "lazy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReplicationPolicy {
    pub mode: ReplicationMode,
    /// Lazy only: copy the aligned block of `2^prefetch_degree` entries.
    pub prefetch_degree: u8,
    /// Lazy only: restrict shootdowns to sharer nodes.
    pub tlb_filter: bool,
}

impl ReplicationPolicy {
    pub const NONE: ReplicationPolicy =
        ReplicationPolicy { mode: ReplicationMode::NoReplication, prefetch_degree: 0, tlb_filter: false };
    pub const EAGER: ReplicationPolicy =
        ReplicationPolicy { mode: ReplicationMode::Eager, prefetch_degree: 0, tlb_filter: false };

    pub fn lazy(prefetch_degree: u8, tlb_filter: bool) -> Self {
        Self { mode: ReplicationMode::Lazy, prefetch_degree, tlb_filter }
    }

    pub fn is_lazy(&self) -> bool {
        self.mode == ReplicationMode::Lazy
    }

    /// Prefetch degree in effect (zero unless lazy).
    pub fn effective_prefetch(&self) -> u8 {
        if self.is_lazy() {
            self.prefetch_degree
        } else {
            0
        }
    }

    pub fn filters_shootdowns(&self) -> bool {
        self.is_lazy() && self.tlb_filter
    }

    pub fn validate(&self, bits_per_level: u8) -> Result<(), ConfigError> {
        if self.is_lazy() && self.prefetch_degree > bits_per_level {
            return Err(ConfigError::Policy(format!(
                "prefetch degree {} exceeds {} bits per level",
                self.prefetch_degree, bits_per_level
            )));
        }
        Ok(())
    }
}

/// `none`, `eager`, `lazy`, `lazy:D`, `lazy+opt`, `lazy:D+opt`.
impl fmt::Display for ReplicationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mode.name())?;
        if self.is_lazy() {
            write!(f, ":{}", self.prefetch_degree)?;
            if self.tlb_filter {
                f.write_str("+opt")?;
            }
        }
        Ok(())
    }
}

impl FromStr for ReplicationPolicy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConfigError::Policy(format!("unknown policy {s:?}"));
        let (body, opt) = match s.strip_suffix("+opt") {
            Some(body) => (body, true),
            None => (s, false),
        };
        let (name, degree) = match body.split_once(':') {
            Some((name, d)) => (name, Some(d.parse::<u8>().map_err(|_| bad())?)),
            None => (body, None),
        };
        match name {
            "none" if degree.is_none() && !opt => Ok(Self::NONE),
            "eager" if degree.is_none() && !opt => Ok(Self::EAGER),
            "lazy" => Ok(Self::lazy(degree.unwrap_or(0), opt)),
            _ => Err(bad()),
        }
    }
}

/// Leaf slots copied by a lazy fault on slot `index`.
///
/// The window is the `2^degree`-aligned block containing `index`, clipped to
/// the leaf page `table_span` and to `vma_span`. It always contains `index`.
pub fn prefetch_window(index: usize, degree: u8, table_span: VpnRange, vma_span: VpnRange) -> Range<usize> {
    let fanout = table_span.len() as usize;
    debug_assert!(index < fanout);
    let degree = (degree as u32).min(fanout.trailing_zeros());
    let block = 1usize << degree;
    let lo = index & !(block - 1);
    let hi = lo + block;
    let inside = table_span.intersect(&vma_span);
    let vma_lo = (inside.start.0 - table_span.start.0) as usize;
    let vma_hi = (inside.end.0 - table_span.start.0) as usize;
    debug_assert!(vma_lo <= index && index < vma_hi, "requested slot outside the VMA");
    lo.max(vma_lo)..hi.min(vma_hi).min(fanout)
}

/// Nodes whose replica of `page` must be updated when it changes.
pub fn coherence_targets(space: &ProcessSpace, page: PageId, policy: &ReplicationPolicy) -> BTreeSet<NodeId> {
    let arena = space.arena();
    match policy.mode {
        ReplicationMode::NoReplication => BTreeSet::from([arena.get(page).node()]),
        ReplicationMode::Eager | ReplicationMode::Lazy => {
            arena.ring_members(page).into_iter().map(|(node, _)| node).collect()
        }
    }
}

/// Cores that must receive a shootdown IPI for a change to `pages`.
///
/// Without filtering this is every core running a thread of the process.
/// With the lazy filter only cores on nodes holding a replica of one of the
/// pages are included. The initiating core is never a target.
pub fn shootdown_targets(
    space: &ProcessSpace,
    pages: &[PageId],
    policy: &ReplicationPolicy,
    initiator: Option<CoreId>,
) -> BTreeSet<CoreId> {
    let audience = space.threads().values().filter(|t| Some(t.core) != initiator);
    if !policy.filters_shootdowns() {
        return audience.map(|t| t.core).collect();
    }
    let sharers: BTreeSet<NodeId> =
        pages.iter().flat_map(|&p| space.arena().ring_members(p)).map(|(node, _)| node).collect();
    audience.filter(|t| sharers.contains(&t.node)).map(|t| t.core).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{CostParams, MachineTopology};
    use crate::vmem::{AddressLayout, ProcessId, ThreadId, ThreadPlacement};
    use proptest::prelude::*;

    fn page() -> VpnRange {
        VpnRange::new(512, 1024)
    }

    #[test]
    fn window_examples() {
        let whole = page();
        assert_eq!(prefetch_window(7, 0, page(), whole), 7..8);
        assert_eq!(prefetch_window(6, 1, page(), whole), 6..8);
        assert_eq!(prefetch_window(100, 9, page(), whole), 0..512);
        let vma = VpnRange::new(512 + 100, 512 + 300);
        assert_eq!(prefetch_window(150, 9, page(), vma), 100..300);
    }

    #[test]
    fn window_clamps_to_vma_spilling_past_the_table() {
        let vma = VpnRange::new(0, 600);
        assert_eq!(prefetch_window(3, 9, page(), vma), 0..88);
        // degree beyond the page width is clamped to the page
        assert_eq!(prefetch_window(3, 12, page(), page()), 0..512);
    }

    proptest! {
        #[test]
        fn window_containment(index in 0usize..512, degree in 0u8..=9, a in 0usize..512, b in 0usize..512) {
            let (lo, hi) = (a.min(b).min(index), a.max(b).max(index) + 1);
            let vma = VpnRange::new(512 + lo as u64, 512 + hi as u64);
            let w = prefetch_window(index, degree, page(), vma);
            prop_assert!(w.contains(&index));
            prop_assert!(w.start >= lo && w.end <= hi && w.end <= 512);
            prop_assert!(w.len() <= 1 << degree);
            // nested across degrees
            if degree > 0 {
                let inner = prefetch_window(index, degree - 1, page(), vma);
                prop_assert!(w.start <= inner.start && inner.end <= w.end);
            }
        }
    }

    #[test]
    fn policy_labels_round_trip() {
        for s in ["none", "eager", "lazy:0", "lazy:9+opt", "lazy:3"] {
            assert_eq!(s.parse::<ReplicationPolicy>().unwrap().to_string(), s);
        }
        assert_eq!("lazy+opt".parse::<ReplicationPolicy>().unwrap(), ReplicationPolicy::lazy(0, true));
        assert!("eager+opt".parse::<ReplicationPolicy>().is_err());
        assert!("replicated".parse::<ReplicationPolicy>().is_err());
        assert!(ReplicationPolicy::lazy(10, false).validate(9).is_err());
    }

    /// One leaf replica per node in `ring`, threads as `(node, core)`.
    fn space_with(ring: &[u16], threads: &[(u16, u32)]) -> (ProcessSpace, PageId) {
        let mut space = ProcessSpace::new(ProcessId(0), AddressLayout::default(), 8, false);
        let mut first = None;
        for &n in ring {
            let (id, _) = space.arena_mut().allocate(1, NodeId(n), page());
            first.get_or_insert(id);
        }
        for (i, &(n, c)) in threads.iter().enumerate() {
            space.threads_mut().insert(ThreadId(i as u64), ThreadPlacement { node: NodeId(n), core: CoreId(c) });
        }
        (space, first.unwrap())
    }

    #[test]
    fn coherence_targets_follow_the_ring() {
        let (space, p) = space_with(&[0, 1, 2, 3, 4, 5, 6, 7], &[]);
        assert_eq!(coherence_targets(&space, p, &ReplicationPolicy::EAGER).len(), 8);
        let (space, p) = space_with(&[2], &[]);
        assert_eq!(coherence_targets(&space, p, &ReplicationPolicy::lazy(0, true)), BTreeSet::from([NodeId(2)]));
        let (space, p) = space_with(&[0, 3], &[]);
        assert_eq!(
            coherence_targets(&space, p, &ReplicationPolicy::lazy(0, true)),
            BTreeSet::from([NodeId(0), NodeId(3)])
        );
        assert_eq!(coherence_targets(&space, p, &ReplicationPolicy::NONE), BTreeSet::from([NodeId(0)]));
    }

    fn one_thread_per_socket() -> Vec<(u16, u32)> {
        let topo = MachineTopology::new(8, 18, CostParams::default()).unwrap();
        topo.nodes().map(|n| (n.0, topo.cores_of(n).next().unwrap().0)).collect()
    }

    #[test]
    fn unfiltered_shootdowns_reach_every_thread() {
        let (space, p) = space_with(&[0], &one_thread_per_socket());
        let targets = shootdown_targets(&space, &[p], &ReplicationPolicy::lazy(0, false), Some(CoreId(0)));
        assert_eq!(targets.len(), 7);
        let eager = shootdown_targets(&space, &[p], &ReplicationPolicy::EAGER, Some(CoreId(0)));
        assert_eq!(targets, eager);
    }

    #[test]
    fn filtered_shootdowns_stay_on_sharer_nodes() {
        let mut threads = one_thread_per_socket();
        threads.push((0, 1));
        threads.push((3, 3 * 18 + 1));
        let (space, p) = space_with(&[0], &threads);
        let targets = shootdown_targets(&space, &[p], &ReplicationPolicy::lazy(0, true), Some(CoreId(0)));
        assert_eq!(targets, BTreeSet::from([CoreId(1)]));

        let (space, p) = space_with(&[0, 3], &threads);
        let targets = shootdown_targets(&space, &[p], &ReplicationPolicy::lazy(0, true), Some(CoreId(0)));
        // set-filter oracle over the placement
        let oracle: BTreeSet<CoreId> =
            threads.iter().filter(|(n, c)| (*n == 0 || *n == 3) && *c != 0).map(|&(_, c)| CoreId(c)).collect();
        assert_eq!(targets, oracle);
    }

    proptest! {
        #[test]
        fn filtering_is_monotone(
            ring in proptest::collection::btree_set(0u16..8, 1..8),
            placement in proptest::collection::btree_set(0u32..144, 0..40),
            initiator in 0u32..144,
        ) {
            let ring: Vec<u16> = ring.into_iter().collect();
            let threads: Vec<(u16, u32)> = placement.iter().map(|&c| ((c / 18) as u16, c)).collect();
            let (space, p) = space_with(&ring, &threads);
            let init = Some(CoreId(initiator));
            let filtered = shootdown_targets(&space, &[p], &ReplicationPolicy::lazy(0, true), init);
            let base = shootdown_targets(&space, &[p], &ReplicationPolicy::NONE, init);
            prop_assert!(filtered.is_subset(&base));
            prop_assert!(!base.contains(&CoreId(initiator)));
        }
    }
}
