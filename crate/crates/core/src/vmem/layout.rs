use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Virtual page number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Vpn(pub u64);

impl fmt::Display for Vpn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vpn {:#x}", self.0)
    }
}

/// Half-open range of virtual pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VpnRange {
    pub start: Vpn,
    pub end: Vpn,
}

impl VpnRange {
    pub fn new(start: u64, end: u64) -> Self {
        debug_assert!(start <= end);
        Self { start: Vpn(start), end: Vpn(end) }
    }

    pub fn len(&self) -> u64 {
        self.end.0 - self.start.0
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, vpn: Vpn) -> bool {
        self.start <= vpn && vpn < self.end
    }

    pub fn intersect(&self, other: &VpnRange) -> VpnRange {
        let start = self.start.max(other.start);
        let end = self.end.min(other.end).max(start);
        VpnRange { start, end }
    }

    pub fn overlaps(&self, other: &VpnRange) -> bool {
        !self.intersect(other).is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Vpn> {
        (self.start.0..self.end.0).map(Vpn)
    }

    pub fn as_range(&self) -> Range<u64> {
        self.start.0..self.end.0
    }
}

/// Radix geometry of the translation tree.
///
/// Levels are numbered bottom-up: level 1 holds leaf PTEs and level
/// `levels` is the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressLayout {
    levels: u8,
    bits_per_level: u8,
    offset_bits: u8,
}

impl Default for AddressLayout {
    fn default() -> Self {
        Self { levels: 4, bits_per_level: 9, offset_bits: 12 }
    }
}

/// Per-level table indices, root first, and the byte offset in the page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAddress {
    pub indices: Vec<usize>,
    pub offset: u64,
}

impl AddressLayout {
    pub fn new(levels: u8, bits_per_level: u8, offset_bits: u8) -> Result<Self, ConfigError> {
        if levels < 2 {
            return Err(ConfigError::Layout("at least two levels are required".into()));
        }
        if !(1..=16).contains(&bits_per_level) {
            return Err(ConfigError::Layout("bits_per_level must be in 1..=16".into()));
        }
        if offset_bits == 0 {
            return Err(ConfigError::Layout("offset_bits must be positive".into()));
        }
        let total = levels as u32 * bits_per_level as u32 + offset_bits as u32;
        if total > 64 {
            return Err(ConfigError::Layout(format!("{total} address bits exceed 64")));
        }
        Ok(Self { levels, bits_per_level, offset_bits })
    }

    pub fn five_level() -> Self {
        Self { levels: 5, bits_per_level: 9, offset_bits: 12 }
    }

    pub fn levels(&self) -> u8 {
        self.levels
    }

    pub fn bits_per_level(&self) -> u8 {
        self.bits_per_level
    }

    pub fn fanout(&self) -> usize {
        1 << self.bits_per_level
    }

    pub fn page_size(&self) -> u64 {
        1 << self.offset_bits
    }

    pub fn va_bits(&self) -> u32 {
        self.levels as u32 * self.bits_per_level as u32 + self.offset_bits as u32
    }

    /// Number of virtual pages in the whole address space.
    pub fn vpn_limit(&self) -> u64 {
        let bits = self.levels as u32 * self.bits_per_level as u32;
        if bits >= 64 {
            u64::MAX
        } else {
            1 << bits
        }
    }

    /// Virtual pages translated by one table page at `level`.
    pub fn span_pages(&self, level: u8) -> u64 {
        debug_assert!((1..=self.levels).contains(&level));
        let bits = self.bits_per_level as u32 * level as u32;
        if bits >= 64 {
            u64::MAX
        } else {
            1 << bits
        }
    }

    /// Slot of `vpn` inside the table page at `level` that covers it.
    pub fn index_at(&self, vpn: Vpn, level: u8) -> usize {
        let shift = self.bits_per_level as u32 * (level as u32 - 1);
        ((vpn.0 >> shift) as usize) & (self.fanout() - 1)
    }

    /// Span covered by the table page at `level` that translates `vpn`.
    pub fn covering_span(&self, vpn: Vpn, level: u8) -> VpnRange {
        if level == self.levels {
            return VpnRange::new(0, self.vpn_limit());
        }
        let span = self.span_pages(level);
        let base = vpn.0 & !(span - 1);
        VpnRange::new(base, base + span)
    }

    /// Span covered by slot `index` of a table page at `level` whose span starts at `base`.
    pub fn slot_span(&self, base: Vpn, level: u8, index: usize) -> VpnRange {
        let child = if level == 1 { 1 } else { self.span_pages(level - 1) };
        let start = base.0 + index as u64 * child;
        VpnRange::new(start, start + child)
    }

    pub fn vpn_of(&self, vaddr: u64) -> Vpn {
        Vpn(vaddr >> self.offset_bits)
    }

    pub fn vaddr_of(&self, vpn: Vpn) -> u64 {
        vpn.0 << self.offset_bits
    }

    pub fn pages_for(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.page_size())
    }

    pub fn is_canonical(&self, vaddr: u64) -> bool {
        self.va_bits() >= 64 || vaddr >> self.va_bits() == 0
    }

    pub fn split_vaddr(&self, vaddr: u64) -> Option<SplitAddress> {
        if !self.is_canonical(vaddr) {
            return None;
        }
        let vpn = self.vpn_of(vaddr);
        let indices = (1..=self.levels).rev().map(|level| self.index_at(vpn, level)).collect();
        Some(SplitAddress { indices, offset: vaddr & (self.page_size() - 1) })
    }

    pub fn recompose(&self, split: &SplitAddress) -> u64 {
        let vpn = split.indices.iter().fold(0u64, |acc, &i| (acc << self.bits_per_level) | i as u64);
        (vpn << self.offset_bits) | split.offset
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_examples() {
        let l = AddressLayout::default();
        assert_eq!(l.fanout(), 512);
        let s = l.split_vaddr(0).unwrap();
        assert_eq!(s.indices, vec![0, 0, 0, 0]);
        assert_eq!(s.offset, 0);
        // 0x200000 >> 12 = 512: exactly one full leaf page in
        let s = l.split_vaddr(0x20_0000).unwrap();
        assert_eq!(s.indices, vec![0, 0, 1, 0]);
        let s = l.split_vaddr(0xFFFF_FFFF_F000).unwrap();
        assert_eq!(s.indices, vec![511, 511, 511, 511]);
        assert_eq!(s.offset, 0);
        assert!(l.split_vaddr(1 << 48).is_none());
    }

    #[test]
    fn layout_validation() {
        assert!(AddressLayout::new(4, 9, 12).is_ok());
        assert!(AddressLayout::new(5, 9, 12).is_ok());
        assert!(AddressLayout::new(7, 9, 12).is_err());
        assert!(AddressLayout::new(1, 9, 12).is_err());
    }

    #[test]
    fn spans() {
        let l = AddressLayout::default();
        assert_eq!(l.span_pages(1), 512);
        assert_eq!(l.covering_span(Vpn(700), 1), VpnRange::new(512, 1024));
        assert_eq!(l.covering_span(Vpn(700), 4), VpnRange::new(0, 1 << 36));
        assert_eq!(l.slot_span(Vpn(512), 1, 3), VpnRange::new(515, 516));
        assert_eq!(l.slot_span(Vpn(0), 2, 1), VpnRange::new(512, 1024));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100_000))]
        #[test]
        fn split_recompose_round_trip(vaddr in 0u64..(1u64 << 48)) {
            let l = AddressLayout::default();
            let s = l.split_vaddr(vaddr).unwrap();
            prop_assert!(s.indices.iter().all(|&i| i < 512));
            prop_assert_eq!(l.recompose(&s), vaddr);
        }
    }

    proptest! {
        #[test]
        fn five_level_round_trip(vaddr in 0u64..(1u64 << 57)) {
            let l = AddressLayout::five_level();
            let s = l.split_vaddr(vaddr).unwrap();
            prop_assert_eq!(s.indices.len(), 5);
            prop_assert_eq!(l.recompose(&s), vaddr);
        }
    }
}
