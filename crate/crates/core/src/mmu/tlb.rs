use std::collections::{BTreeMap, HashMap};

use crate::topology::CoreId;
use crate::vmem::{FrameId, Prot, Vpn, VpnRange};

/// Cached translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbSnapshot {
    pub frame: FrameId,
    pub prot: Prot,
}

/// Unified 4KB TLB of one core with LRU replacement.
#[derive(Debug, Clone)]
pub struct CoreTlb {
    core: CoreId,
    capacity: Option<usize>,
    entries: HashMap<Vpn, (TlbSnapshot, u64)>,
    lru: BTreeMap<u64, Vpn>,
    tick: u64,
}

/// L1 dTLB plus unified L2.
pub const DEFAULT_TLB_CAPACITY: usize = 1024 + 64;

impl CoreTlb {
    /// `capacity: None` keeps every entry (used by protocol audits).
    pub fn new(core: CoreId, capacity: Option<usize>) -> Self {
        assert!(capacity != Some(0), "TLB capacity must be positive");
        Self { core, capacity, entries: HashMap::new(), lru: BTreeMap::new(), tick: 0 }
    }

    pub fn core(&self) -> CoreId {
        self.core
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn touch(&mut self, vpn: Vpn) {
        self.tick += 1;
        if let Some((_, stamp)) = self.entries.get_mut(&vpn) {
            self.lru.remove(stamp);
            *stamp = self.tick;
            self.lru.insert(self.tick, vpn);
        }
    }

    /// Looks up `vpn`, refreshing its LRU position on a hit.
    pub fn lookup(&mut self, vpn: Vpn) -> Option<TlbSnapshot> {
        let snapshot = self.entries.get(&vpn)?.0;
        self.touch(vpn);
        Some(snapshot)
    }

    /// Inserts or refreshes an entry. Returns true if another entry was evicted.
    pub fn insert(&mut self, vpn: Vpn, snapshot: TlbSnapshot) -> bool {
        if let Some(entry) = self.entries.get_mut(&vpn) {
            entry.0 = snapshot;
            self.touch(vpn);
            return false;
        }
        let mut evicted = false;
        if self.capacity.is_some_and(|cap| self.entries.len() >= cap) {
            let (_, victim) = self.lru.pop_first().expect("full TLB has an LRU entry");
            self.entries.remove(&victim);
            evicted = true;
        }
        self.tick += 1;
        self.entries.insert(vpn, (snapshot, self.tick));
        self.lru.insert(self.tick, vpn);
        evicted
    }

    pub fn contains(&self, vpn: Vpn) -> bool {
        self.entries.contains_key(&vpn)
    }

    /// Drops entries in `range`. Returns how many were removed.
    pub fn invalidate(&mut self, range: VpnRange) -> usize {
        let victims: Vec<Vpn> = if range.len() as usize <= self.entries.len() {
            range.iter().filter(|v| self.entries.contains_key(v)).collect()
        } else {
            self.entries.keys().filter(|v| range.contains(**v)).copied().collect()
        };
        for vpn in &victims {
            let (_, stamp) = self.entries.remove(vpn).expect("victim present");
            self.lru.remove(&stamp);
        }
        victims.len()
    }

    pub fn flush(&mut self) -> usize {
        let n = self.entries.len();
        self.entries.clear();
        self.lru.clear();
        n
    }

    pub fn entries(&self) -> impl Iterator<Item = (Vpn, TlbSnapshot)> + '_ {
        self.entries.iter().map(|(v, (s, _))| (*v, *s))
    }
}
