use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layout::{Vpn, VpnRange};
use crate::topology::NodeId;

/// Page protection bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Prot(u8);

impl Prot {
    pub const NONE: Prot = Prot(0);
    pub const R: Prot = Prot(1);
    pub const W: Prot = Prot(2);
    pub const X: Prot = Prot(4);
    pub const RW: Prot = Prot(3);
    pub const RWX: Prot = Prot(7);

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Option<Prot> {
        (bits <= 7).then_some(Prot(bits))
    }

    pub fn contains(self, other: Prot) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn union(self, other: Prot) -> Prot {
        Prot(self.0 | other.0)
    }
}

impl fmt::Display for Prot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            return f.write_str("none");
        }
        for (bit, c) in [(Prot::R, 'r'), (Prot::W, 'w'), (Prot::X, 'x')] {
            if self.contains(bit) {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Prot {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() || s == "none" {
            return Ok(Prot::NONE);
        }
        let mut prot = Prot::NONE;
        let mut last = 0u8;
        for c in s.chars() {
            let bit = match c {
                'r' => Prot::R,
                'w' => Prot::W,
                'x' => Prot::X,
                _ => return Err(format!("invalid protection {s:?}")),
            };
            // letters must appear once each, in r/w/x order
            if bit.0 <= last {
                return Err(format!("invalid protection {s:?}"));
            }
            last = bit.0;
            prot = prot.union(bit);
        }
        Ok(prot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VmaId(pub u64);

/// A mapped virtual range with uniform protection and an owner node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vma {
    pub id: VmaId,
    pub range: VpnRange,
    pub prot: Prot,
    /// Node that requested the allocation. Never changes.
    pub owner: NodeId,
    /// Data frames are bound to this node instead of following first touch.
    pub bind: Option<NodeId>,
}

/// Disjoint VMAs of one process, keyed by start page.
#[derive(Debug, Clone, Default)]
pub struct VmaSet {
    by_start: BTreeMap<Vpn, Vma>,
}

impl VmaSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.by_start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_start.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vma> {
        self.by_start.values()
    }

    /// The VMA containing `vpn`, if any. Ranges are end-exclusive.
    pub fn lookup(&self, vpn: Vpn) -> Option<&Vma> {
        self.by_start.range(..=vpn).next_back().map(|(_, vma)| vma).filter(|vma| vma.range.contains(vpn))
    }

    pub fn insert(&mut self, vma: Vma) {
        assert!(!vma.range.is_empty(), "empty VMA");
        assert!(self.overlapping(vma.range).next().is_none(), "VMA {:?} overlaps an existing mapping", vma.range);
        self.by_start.insert(vma.range.start, vma);
    }

    pub fn overlapping(&self, range: VpnRange) -> impl Iterator<Item = &Vma> {
        let first = self.lookup(range.start).map(|v| v.range.start).unwrap_or(range.start);
        self.by_start.range(first..range.end.max(first)).map(|(_, v)| v).filter(move |v| v.range.overlaps(&range))
    }

    /// True if every page of `range` lies in some VMA.
    pub fn covers(&self, range: VpnRange) -> bool {
        let mut cursor = range.start;
        for vma in self.overlapping(range) {
            if vma.range.start > cursor {
                return false;
            }
            cursor = vma.range.end;
        }
        cursor >= range.end
    }

    /// Splits VMAs so that `range.start` and `range.end` fall on VMA
    /// boundaries. New pieces get ids from `next_id`.
    fn split_at_edges(&mut self, range: VpnRange, next_id: &mut impl FnMut() -> VmaId) {
        for at in [range.start, range.end] {
            let Some(vma) = self.lookup(at).cloned() else { continue };
            if vma.range.start == at {
                continue;
            }
            let mut left = vma.clone();
            left.range.end = at;
            let mut right = vma;
            right.range.start = at;
            right.id = next_id();
            self.by_start.insert(left.range.start, left);
            self.by_start.insert(right.range.start, right);
        }
    }

    /// Removes `range` from the set, splitting partially covered VMAs, and
    /// returns the removed pieces.
    pub fn carve(&mut self, range: VpnRange, mut next_id: impl FnMut() -> VmaId) -> Vec<Vma> {
        self.split_at_edges(range, &mut next_id);
        let starts: Vec<Vpn> = self.overlapping(range).map(|v| v.range.start).collect();
        starts.into_iter().filter_map(|s| self.by_start.remove(&s)).collect()
    }

    /// Sets `prot` on `range`, splitting as needed. Returns the affected
    /// pieces with their previous protection.
    pub fn protect(
        &mut self,
        range: VpnRange,
        prot: Prot,
        mut next_id: impl FnMut() -> VmaId,
    ) -> Vec<(VpnRange, Prot)> {
        self.split_at_edges(range, &mut next_id);
        let starts: Vec<Vpn> = self.overlapping(range).map(|v| v.range.start).collect();
        starts
            .into_iter()
            .map(|s| {
                let vma = self.by_start.get_mut(&s).expect("split piece present");
                let old = vma.prot;
                vma.prot = prot;
                (vma.range, old)
            })
            .collect()
    }
}
