//! Counter registry, cost accounting and CSV reports.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::policy::ReplicationPolicy;
use crate::topology::{Cost, NodeId};

/// Simulated cost split by where it was spent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub tlb: Cost,
    pub walk: Cost,
    pub fault: Cost,
    pub coherence: Cost,
    pub ipi: Cost,
    pub data: Cost,
    pub overhead: Cost,
}

impl CostBreakdown {
    pub fn total(&self) -> Cost {
        self.tlb + self.walk + self.fault + self.coherence + self.ipi + self.data + self.overhead
    }

    fn named(&self) -> [(&'static str, Cost); 7] {
        [
            ("cost_coherence", self.coherence),
            ("cost_data", self.data),
            ("cost_fault", self.fault),
            ("cost_ipi", self.ipi),
            ("cost_overhead", self.overhead),
            ("cost_tlb", self.tlb),
            ("cost_walk", self.walk),
        ]
    }
}

impl AddAssign<&CostBreakdown> for CostBreakdown {
    fn add_assign(&mut self, rhs: &CostBreakdown) {
        self.tlb += rhs.tlb;
        self.walk += rhs.walk;
        self.fault += rhs.fault;
        self.coherence += rhs.coherence;
        self.ipi += rhs.ipi;
        self.data += rhs.data;
        self.overhead += rhs.overhead;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpClass {
    Spawn,
    Exit,
    Migrate,
    Mmap,
    Munmap,
    Mprotect,
    Access,
    Spin,
}

impl OpClass {
    pub const ALL: [OpClass; 8] = [
        OpClass::Spawn,
        OpClass::Exit,
        OpClass::Migrate,
        OpClass::Mmap,
        OpClass::Munmap,
        OpClass::Mprotect,
        OpClass::Access,
        OpClass::Spin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpClass::Spawn => "spawn",
            OpClass::Exit => "exit",
            OpClass::Migrate => "migrate",
            OpClass::Mmap => "mmap",
            OpClass::Munmap => "munmap",
            OpClass::Mprotect => "mprotect",
            OpClass::Access => "access",
            OpClass::Spin => "spin",
        }
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

macro_rules! scalars {
    ($($variant:ident => $name:literal),* $(,)?) => {
        /// Machine-wide event counters.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum Scalar { $($variant),* }

        impl Scalar {
            pub const ALL: &'static [Scalar] = &[$(Scalar::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(Scalar::$variant => $name),* }
            }
        }
    };
}

scalars! {
    PteCopies => "pte_copies",
    PtePrefetched => "pte_prefetched",
    PteReplicaInserts => "pte_replica_inserts",
    RingLinks => "ring_links",
    RingUnlinks => "ring_unlinks",
    Walks => "walks",
    OwnerConsults => "owner_consults",
    OwnerWalkLocal => "owner_walk_local",
    OwnerWalkRemote => "owner_walk_remote",
    RootReplicas => "root_replicas_created",
    FaultLocalHit => "faults_local_hit",
    FaultCopied => "faults_copied",
    FaultFresh => "faults_fresh",
    SegFaults => "segfaults",
    ProtectionFaults => "protection_faults",
    TraceErrors => "trace_errors",
    CoherenceLocal => "coherence_local",
    CoherenceRemote => "coherence_remote",
    Shootdowns => "shootdowns",
    ShootdownTargets => "shootdown_targets",
    IpiLocal => "ipis_local",
    IpiRemote => "ipis_remote",
    TlbHits => "tlb_hits",
    TlbMisses => "tlb_misses",
    TlbInvalidations => "tlb_invalidations",
    TlbEvictions => "tlb_evictions",
    DataLocal => "data_local",
    DataRemote => "data_remote",
}

/// Identifies one counter, with its node or level context where relevant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Counter {
    Scalar(Scalar),
    PtPagesAllocated(NodeId),
    PtPagesFreed(NodeId),
    FramesAllocated(NodeId),
    FramesFreed(NodeId),
    /// Table-page reads by translation walks, by level (1 = leaf).
    WalkLocal(u8),
    WalkRemote(u8),
}

impl From<Scalar> for Counter {
    fn from(s: Scalar) -> Self {
        Counter::Scalar(s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpStats {
    pub calls: u64,
    pub cost: Cost,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct NodeCounters {
    pt_allocated: u64,
    pt_freed: u64,
    frames_allocated: u64,
    frames_freed: u64,
}

/// Everything a run measured. Counters only grow; live page counts are
/// derived from allocation and free counters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsReport {
    page_size: u64,
    scalars: Vec<u64>,
    nodes: Vec<NodeCounters>,
    walk_local: Vec<u64>,
    walk_remote: Vec<u64>,
    pt_live: u64,
    pt_peak: u64,
    cost: CostBreakdown,
    ops: BTreeMap<OpClass, OpStats>,
}

impl MetricsReport {
    pub fn new(node_count: usize, levels: u8, page_size: u64) -> Self {
        Self {
            page_size,
            scalars: vec![0; Scalar::ALL.len()],
            nodes: vec![NodeCounters::default(); node_count],
            walk_local: vec![0; levels as usize],
            walk_remote: vec![0; levels as usize],
            pt_live: 0,
            pt_peak: 0,
            cost: CostBreakdown::default(),
            ops: OpClass::ALL.iter().map(|&op| (op, OpStats::default())).collect(),
        }
    }

    pub fn record(&mut self, counter: impl Into<Counter>, amount: u64) {
        match counter.into() {
            Counter::Scalar(s) => self.scalars[s as usize] += amount,
            Counter::PtPagesAllocated(n) => {
                self.nodes[n.index()].pt_allocated += amount;
                self.pt_live += amount;
                self.pt_peak = self.pt_peak.max(self.pt_live);
            }
            Counter::PtPagesFreed(n) => {
                self.nodes[n.index()].pt_freed += amount;
                self.pt_live -= amount;
            }
            Counter::FramesAllocated(n) => self.nodes[n.index()].frames_allocated += amount,
            Counter::FramesFreed(n) => self.nodes[n.index()].frames_freed += amount,
            Counter::WalkLocal(level) => self.walk_local[level as usize - 1] += amount,
            Counter::WalkRemote(level) => self.walk_remote[level as usize - 1] += amount,
        }
    }

    pub fn record_op(&mut self, op: OpClass, cost: &CostBreakdown) {
        let stats = self.ops.entry(op).or_default();
        stats.calls += 1;
        stats.cost += cost.total();
        self.cost += cost;
    }

    pub fn get(&self, counter: impl Into<Counter>) -> u64 {
        match counter.into() {
            Counter::Scalar(s) => self.scalars[s as usize],
            Counter::PtPagesAllocated(n) => self.nodes[n.index()].pt_allocated,
            Counter::PtPagesFreed(n) => self.nodes[n.index()].pt_freed,
            Counter::FramesAllocated(n) => self.nodes[n.index()].frames_allocated,
            Counter::FramesFreed(n) => self.nodes[n.index()].frames_freed,
            Counter::WalkLocal(level) => self.walk_local[level as usize - 1],
            Counter::WalkRemote(level) => self.walk_remote[level as usize - 1],
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Live table pages on `node`.
    pub fn page_count(&self, node: NodeId) -> u64 {
        let n = &self.nodes[node.index()];
        n.pt_allocated - n.pt_freed
    }

    pub fn total_pages(&self) -> u64 {
        self.pt_live
    }

    pub fn peak_pages(&self) -> u64 {
        self.pt_peak
    }

    pub fn footprint_bytes(&self, node: NodeId) -> u64 {
        self.page_count(node) * self.page_size
    }

    pub fn walk_local(&self) -> u64 {
        self.walk_local.iter().sum()
    }

    pub fn walk_remote(&self) -> u64 {
        self.walk_remote.iter().sum()
    }

    pub fn cost(&self) -> &CostBreakdown {
        &self.cost
    }

    pub fn op(&self, op: OpClass) -> OpStats {
        self.ops.get(&op).copied().unwrap_or_default()
    }

    /// All counters by name, sorted.
    pub fn counters(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for &s in Scalar::ALL {
            out.insert(s.name().to_string(), self.get(s));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            out.insert(format!("pt_pages_allocated_node{i}"), n.pt_allocated);
            out.insert(format!("pt_pages_freed_node{i}"), n.pt_freed);
            out.insert(format!("pt_pages_live_node{i}"), n.pt_allocated - n.pt_freed);
            out.insert(format!("frames_allocated_node{i}"), n.frames_allocated);
            out.insert(format!("frames_freed_node{i}"), n.frames_freed);
        }
        out.insert("pt_pages_live".into(), self.pt_live);
        out.insert("pt_pages_peak".into(), self.pt_peak);
        out.insert("footprint_bytes".into(), self.pt_live * self.page_size);
        for level in 1..=self.walk_local.len() {
            out.insert(format!("walk_local_l{level}"), self.walk_local[level - 1]);
            out.insert(format!("walk_remote_l{level}"), self.walk_remote[level - 1]);
        }
        out.insert("walk_local".into(), self.walk_local());
        out.insert("walk_remote".into(), self.walk_remote());
        for (name, value) in self.cost.named() {
            out.insert(name.into(), value);
        }
        out.insert("cost_total".into(), self.cost.total());
        for (op, stats) in &self.ops {
            out.insert(format!("calls_{op}"), stats.calls);
            out.insert(format!("cost_op_{op}"), stats.cost);
        }
        out
    }
}

/// One row of a report.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub run_id: String,
    pub policy: ReplicationPolicy,
    pub report: MetricsReport,
}

const FIXED_COLUMNS: [&str; 4] = ["run_id", "policy", "prefetch", "tlb_opt"];

fn format_ratio(value: u64, base: u64) -> String {
    match (value, base) {
        (0, 0) => format!("{:.6}", 1.0),
        (_, 0) => "inf".into(),
        _ => format!("{:.6}", value as f64 / base as f64),
    }
}

/// Renders runs as RFC 4180 CSV: the fixed columns, then every counter in
/// alphabetical order. With `baseline` set, a `norm_<counter>` column is
/// appended for each counter holding its ratio to the baseline row.
pub fn report_csv(runs: &[RunRecord], baseline: Option<usize>) -> String {
    let rows: Vec<BTreeMap<String, u64>> = runs.iter().map(|r| r.report.counters()).collect();
    let mut names: Vec<String> = rows.iter().flat_map(|r| r.keys().cloned()).collect();
    names.sort();
    names.dedup();

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(names.iter().cloned());
    if baseline.is_some() {
        header.extend(names.iter().map(|n| format!("norm_{n}")));
    }
    w.write_record(&header).expect("write to memory");

    for (run, row) in runs.iter().zip(&rows) {
        let policy = &run.policy;
        let mut record = vec![
            run.run_id.clone(),
            policy.mode.name().to_string(),
            policy.effective_prefetch().to_string(),
            if policy.filters_shootdowns() { "on" } else { "off" }.to_string(),
        ];
        record.extend(names.iter().map(|n| row.get(n).map(u64::to_string).unwrap_or_default()));
        if let Some(b) = baseline {
            let base = &rows[b];
            record.extend(
                names.iter().map(|n| format_ratio(row.get(n).copied().unwrap_or(0), base.get(n).copied().unwrap_or(0))),
            );
        }
        w.write_record(&record).expect("write to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
}
