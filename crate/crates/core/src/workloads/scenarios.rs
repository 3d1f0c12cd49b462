//! Built-in workload generators.
//!
//! Every generator is a pure function of its [`ScenarioSpec`] and the
//! machine shape. Mappings are referenced through handles: an access to
//! byte `o` of the mapping created by event `s` carries `vma = s, addr = o`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gamma::AllocSizes;
use crate::error::ConfigError;
use crate::mmu::AccessKind;
use crate::syscalls::{AddrRef, Op, RangeRef, TraceEvent};
use crate::topology::{MachineTopology, NodeId};
use crate::vmem::{ProcessId, Prot, ThreadId};

const PAGE: u64 = 4096;

/// Names and parameters (with defaults) of every scenario. A default of
/// `"nodes"` means the machine's node count.
const CATALOG: &[(&str, &[(&str, &str)])] = &[
    (
        "mprotect_loop",
        &[
            ("sockets", "nodes"),
            ("spinners_per_socket", "0"),
            ("local_spinners", "1"),
            ("worker_node", "0"),
            ("iters", "1000"),
        ],
    ),
    (
        "munmap_loop",
        &[
            ("sockets", "nodes"),
            ("spinners_per_socket", "0"),
            ("local_spinners", "1"),
            ("worker_node", "0"),
            ("iters", "1000"),
            ("pages", "1"),
        ],
    ),
    (
        "touch_once_traversal",
        &[("size", "1073741824"), ("owner_node", "0"), ("remote_node", "1"), ("passes", "1"), ("init", "1")],
    ),
    (
        "malloc_stateless",
        &[("sockets", "nodes"), ("threads_per_socket", "1"), ("iters", "200"), ("touch", "4"), ("gamma_shape", "2")],
    ),
    (
        "malloc_stateful",
        &[
            ("sockets", "nodes"),
            ("threads_per_socket", "1"),
            ("iters", "200"),
            ("touch", "4"),
            ("gamma_shape", "2"),
            ("live", "256"),
        ],
    ),
    (
        "webserver_churn",
        &[("sockets", "nodes"), ("threads_per_socket", "2"), ("requests", "200"), ("response_kib", "64")],
    ),
    (
        "kv_churn",
        &[
            ("sockets", "nodes"),
            ("threads_per_socket", "2"),
            ("requests", "1000"),
            ("store_pages", "256"),
            ("set_ratio", "0.1"),
            ("private", "1"),
            ("protect_every", "1"),
        ],
    ),
    ("partitioned", &[("nodes", "nodes"), ("pages_per_node", "1000"), ("passes", "1")]),
    ("migration", &[("pages", "16384"), ("from", "0"), ("to", "1"), ("passes_before", "1"), ("passes_after", "2")]),
];

pub const SCENARIO_NAMES: [&str; 9] = [
    "mprotect_loop",
    "munmap_loop",
    "touch_once_traversal",
    "malloc_stateless",
    "malloc_stateful",
    "webserver_churn",
    "kv_churn",
    "partitioned",
    "migration",
];

/// A named scenario with parameter overrides and an RNG seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioSpec {
    pub name: String,
    pub params: BTreeMap<String, String>,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(name: impl Into<String>, seed: u64) -> Self {
        Self { name: name.into(), params: BTreeMap::new(), seed }
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    /// Adds a `key=value` override.
    pub fn set_param(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Scenario(format!("expected key=value, got {assignment:?}")))?;
        self.params.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    fn catalog(&self) -> Result<&'static [(&'static str, &'static str)], ConfigError> {
        CATALOG
            .iter()
            .find(|(n, _)| *n == self.name)
            .map(|(_, p)| *p)
            .ok_or_else(|| ConfigError::Scenario(format!("unknown scenario {:?}", self.name)))
    }

    /// Checks the name and that every parameter is known.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let known = self.catalog()?;
        for key in self.params.keys() {
            if !known.iter().any(|(k, _)| k == key) {
                let names: Vec<&str> = known.iter().map(|(k, _)| *k).collect();
                return Err(ConfigError::Scenario(format!(
                    "{} has no parameter {key:?} (known: {})",
                    self.name,
                    names.join(", ")
                )));
            }
        }
        Ok(())
    }
}

struct Params<'a> {
    spec: &'a ScenarioSpec,
    topo: &'a MachineTopology,
}

impl Params<'_> {
    fn raw(&self, key: &str) -> String {
        if let Some(v) = self.spec.params.get(key) {
            return v.clone();
        }
        let default = self.spec.catalog().expect("validated").iter().find(|(k, _)| *k == key).expect("declared").1;
        if default == "nodes" {
            self.topo.node_count().to_string()
        } else {
            default.to_string()
        }
    }

    fn int(&self, key: &str) -> Result<u64, ConfigError> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| ConfigError::Scenario(format!("{key} must be a non-negative integer, got {raw:?}")))
    }

    fn float(&self, key: &str) -> Result<f64, ConfigError> {
        let raw = self.raw(key);
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| ConfigError::Scenario(format!("{key} must be a number, got {raw:?}")))
    }

    fn flag(&self, key: &str) -> Result<bool, ConfigError> {
        match self.int(key)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(ConfigError::Scenario(format!("{key} must be 0 or 1, got {v}"))),
        }
    }

    fn node(&self, key: &str) -> Result<NodeId, ConfigError> {
        let v = self.int(key)?;
        if v as usize >= self.topo.node_count() {
            return Err(ConfigError::Scenario(format!(
                "{key}={v} but the machine has {} nodes",
                self.topo.node_count()
            )));
        }
        Ok(NodeId(v as u16))
    }

    fn sockets(&self, key: &str) -> Result<u16, ConfigError> {
        let v = self.int(key)?;
        if v == 0 || v as usize > self.topo.node_count() {
            return Err(ConfigError::Scenario(format!("{key}={v} must be in 1..={}", self.topo.node_count())));
        }
        Ok(v as u16)
    }
}

struct Builder {
    events: Vec<TraceEvent>,
    pid: ProcessId,
    per_node: Vec<usize>,
    capacity: usize,
    next_tid: u64,
}

impl Builder {
    fn new(topo: &MachineTopology) -> Self {
        Self {
            events: Vec::new(),
            pid: ProcessId(0),
            per_node: vec![0; topo.node_count()],
            capacity: topo.cores_per_node(),
            next_tid: 0,
        }
    }

    fn push(&mut self, thread: ThreadId, op: Op) -> u64 {
        let seq = self.events.len() as u64 + 1;
        self.events.push(TraceEvent { seq, process: self.pid, thread, op });
        seq
    }

    fn spawn(&mut self, node: NodeId) -> Result<ThreadId, ConfigError> {
        let used = &mut self.per_node[node.index()];
        if *used == self.capacity {
            return Err(ConfigError::Scenario(format!(
                "{node} has only {} cores for the requested threads",
                self.capacity
            )));
        }
        *used += 1;
        let tid = ThreadId(self.next_tid);
        self.next_tid += 1;
        self.push(tid, Op::Spawn { node });
        Ok(tid)
    }

    /// `per_socket` threads on each of the first `sockets` nodes, ordered
    /// round-robin across sockets.
    fn spread(&mut self, sockets: u16, per_socket: u64) -> Result<Vec<ThreadId>, ConfigError> {
        let mut out = Vec::new();
        for _ in 0..per_socket {
            for s in 0..sockets {
                out.push(self.spawn(NodeId(s))?);
            }
        }
        Ok(out)
    }

    fn mmap(&mut self, t: ThreadId, len: u64, prot: Prot) -> u64 {
        self.push(t, Op::Mmap { len, prot, node: None })
    }

    fn access(&mut self, t: ThreadId, handle: u64, page: u64, kind: AccessKind) {
        self.push(t, Op::Access { addr: AddrRef { vma: Some(handle), addr: page * PAGE }, kind });
    }

    fn munmap(&mut self, t: ThreadId, handle: u64) {
        self.push(t, Op::Munmap { range: RangeRef { vma: Some(handle), addr: 0, len: None } });
    }

    fn protect(&mut self, t: ThreadId, handle: u64, page: u64, pages: u64, prot: Prot) {
        let range = RangeRef { vma: Some(handle), addr: page * PAGE, len: Some(pages * PAGE) };
        self.push(t, Op::Mprotect { range, prot });
    }
}

/// Generates the event sequence of `spec` for `topo`.
pub fn gen_scenario(spec: &ScenarioSpec, topo: &MachineTopology) -> Result<Vec<TraceEvent>, ConfigError> {
    spec.validate()?;
    let p = Params { spec, topo };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut b = Builder::new(topo);
    match spec.name.as_str() {
        "mprotect_loop" => shootdown_loop(&p, &mut b, false)?,
        "munmap_loop" => shootdown_loop(&p, &mut b, true)?,
        "touch_once_traversal" => touch_once(&p, &mut b, &mut rng)?,
        "malloc_stateless" => malloc(&p, &mut b, &mut rng, None)?,
        "malloc_stateful" => {
            let live = p.int("live")? as usize;
            malloc(&p, &mut b, &mut rng, Some(live))?
        }
        "webserver_churn" => webserver(&p, &mut b)?,
        "kv_churn" => kv(&p, &mut b, &mut rng)?,
        "partitioned" => partitioned(&p, &mut b)?,
        "migration" => migration(&p, &mut b)?,
        other => unreachable!("validated name {other}"),
    }
    Ok(b.events)
}

/// One worker plus spinner threads. The worker maps and touches a small
/// buffer, then either flips its protection `iters` times (R and RW in
/// turn) or maps, touches and unmaps a fresh buffer `iters` times.
///
/// Spawns: 1 + sockets * spinners, minus the worker socket's spinners when
/// `local_spinners=0`.
fn shootdown_loop(p: &Params, b: &mut Builder, unmap: bool) -> Result<(), ConfigError> {
    let sockets = p.sockets("sockets")?;
    let spinners = p.int("spinners_per_socket")?;
    let local = p.flag("local_spinners")?;
    let worker_node = p.node("worker_node")?;
    let iters = p.int("iters")?;
    let worker = b.spawn(worker_node)?;
    for s in 0..sockets {
        if NodeId(s) == worker_node && !local {
            continue;
        }
        for _ in 0..spinners {
            b.spawn(NodeId(s))?;
        }
    }
    if unmap {
        let pages = p.int("pages")?.max(1);
        for _ in 0..iters {
            let h = b.mmap(worker, pages * PAGE, Prot::RW);
            for page in 0..pages {
                b.access(worker, h, page, AccessKind::Write);
            }
            b.munmap(worker, h);
        }
    } else {
        let h = b.mmap(worker, PAGE, Prot::RW);
        b.access(worker, h, 0, AccessKind::Write);
        for i in 0..iters {
            let prot = if i % 2 == 0 { Prot::R } else { Prot::RW };
            b.protect(worker, h, 0, 1, prot);
        }
    }
    Ok(())
}

/// A buffer owned by `owner_node` is initialised there with one write per
/// page, then read `passes` times by a thread on `remote_node`, each pass in
/// a fresh seeded permutation. A pass has exactly `size / 4096` accesses.
fn touch_once(p: &Params, b: &mut Builder, rng: &mut ChaCha8Rng) -> Result<(), ConfigError> {
    let size = p.int("size")?;
    let owner = p.node("owner_node")?;
    let remote = p.node("remote_node")?;
    if size == 0 {
        return Err(ConfigError::Scenario("size must be positive".into()));
    }
    let pages = size.div_ceil(PAGE);
    let init = b.spawn(owner)?;
    let reader = b.spawn(remote)?;
    let h = b.mmap(init, size, Prot::RW);
    if p.flag("init")? {
        for page in 0..pages {
            b.access(init, h, page, AccessKind::Write);
        }
    }
    let mut order: Vec<u64> = (0..pages).collect();
    for _ in 0..p.int("passes")? {
        order.shuffle(rng);
        for &page in &order {
            b.access(reader, h, page, AccessKind::Read);
        }
    }
    Ok(())
}

/// Allocation churn with Gamma-distributed sizes. Each thread performs
/// `iters` allocations, touching the first `touch` pages of each (0 means
/// all pages). Without `live` every allocation is freed right away. With
/// `live = n` a thread first builds up `n` allocations and from then on
/// frees its oldest allocation after each new one, so exactly `n` stay
/// live. Threads take turns one allocation at a time.
fn malloc(p: &Params, b: &mut Builder, rng: &mut ChaCha8Rng, live: Option<usize>) -> Result<(), ConfigError> {
    let threads = b.spread(p.sockets("sockets")?, p.int("threads_per_socket")?)?;
    let sizes = AllocSizes::new(p.float("gamma_shape")?, PAGE)?;
    let touch = p.int("touch")?;
    let rounds = p.int("iters")? + live.unwrap_or(0) as u64;
    let mut queues: Vec<VecDeque<u64>> = vec![VecDeque::new(); threads.len()];
    for _ in 0..rounds {
        for (t, queue) in threads.iter().zip(queues.iter_mut()) {
            let len = sizes.sample(rng);
            let pages = len / PAGE;
            let h = b.mmap(*t, len, Prot::RW);
            let touched = if touch == 0 { pages } else { touch.min(pages) };
            for page in 0..touched {
                b.access(*t, h, page, AccessKind::Write);
            }
            match live {
                None => b.munmap(*t, h),
                Some(n) => {
                    queue.push_back(h);
                    if queue.len() > n {
                        let old = queue.pop_front().expect("non-empty");
                        b.munmap(*t, old);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Each request maps a response buffer, writes every page of it and unmaps
/// it. Threads serve requests in turn; buffers are thread-private.
fn webserver(p: &Params, b: &mut Builder) -> Result<(), ConfigError> {
    let threads = b.spread(p.sockets("sockets")?, p.int("threads_per_socket")?)?;
    let len = p.int("response_kib")? * 1024;
    if len == 0 {
        return Err(ConfigError::Scenario("response_kib must be positive".into()));
    }
    let pages = len.div_ceil(PAGE);
    for _ in 0..p.int("requests")? {
        for &t in &threads {
            let h = b.mmap(t, len, Prot::RW);
            for page in 0..pages {
                b.access(t, h, page, AccessKind::Write);
            }
            b.munmap(t, h);
        }
    }
    Ok(())
}

/// Key-value store under a read-mostly mix. Each store is populated with
/// one write per page and then made read-only. A GET reads a random page.
/// A SET writes a random page inside an unlock/relock pair:
///
/// * `protect_every = 1`: mprotect(RW) and mprotect(R) on the written page
///   around every SET;
/// * `protect_every = n > 1`: the whole store is unlocked before the first
///   of every n SETs of a thread and relocked after the n-th;
/// * `protect_every = 0`: the store stays writable and SETs are plain
///   writes.
///
/// With `private = 1` each thread owns its own store; otherwise the first
/// thread maps and populates one store used by all.
fn kv(p: &Params, b: &mut Builder, rng: &mut ChaCha8Rng) -> Result<(), ConfigError> {
    let threads = b.spread(p.sockets("sockets")?, p.int("threads_per_socket")?)?;
    let store_pages = p.int("store_pages")?;
    let set_ratio = p.float("set_ratio")?;
    let every = p.int("protect_every")?;
    if store_pages == 0 || !(0.0..=1.0).contains(&set_ratio) {
        return Err(ConfigError::Scenario("store_pages must be positive and set_ratio in [0, 1]".into()));
    }
    let populate = |b: &mut Builder, t: ThreadId| {
        let h = b.mmap(t, store_pages * PAGE, Prot::RW);
        for page in 0..store_pages {
            b.access(t, h, page, AccessKind::Write);
        }
        if every > 0 {
            b.protect(t, h, 0, store_pages, Prot::R);
        }
        h
    };
    let stores: Vec<u64> = if p.flag("private")? {
        threads.iter().map(|&t| populate(b, t)).collect()
    } else {
        let h = populate(b, threads[0]);
        vec![h; threads.len()]
    };
    let mut pending = vec![0u64; threads.len()];
    for _ in 0..p.int("requests")? {
        for (i, &t) in threads.iter().enumerate() {
            let h = stores[i];
            let page = rng.random_range(0..store_pages);
            if !rng.random_bool(set_ratio) {
                b.access(t, h, page, AccessKind::Read);
                continue;
            }
            match every {
                0 => b.access(t, h, page, AccessKind::Write),
                1 => {
                    b.protect(t, h, page, 1, Prot::RW);
                    b.access(t, h, page, AccessKind::Write);
                    b.protect(t, h, page, 1, Prot::R);
                }
                n => {
                    if pending[i] == 0 {
                        b.protect(t, h, 0, store_pages, Prot::RW);
                    }
                    b.access(t, h, page, AccessKind::Write);
                    pending[i] += 1;
                    if pending[i] == n {
                        b.protect(t, h, 0, store_pages, Prot::R);
                        pending[i] = 0;
                    }
                }
            }
        }
    }
    // leave every store read-only again
    for (i, &t) in threads.iter().enumerate() {
        if pending[i] > 0 {
            b.protect(t, stores[i], 0, store_pages, Prot::R);
        }
    }
    Ok(())
}

/// One thread per node maps `pages_per_node` pages and touches only its
/// own pages: one write pass followed by `passes - 1` read passes.
fn partitioned(p: &Params, b: &mut Builder) -> Result<(), ConfigError> {
    let nodes = p.sockets("nodes")?;
    let pages = p.int("pages_per_node")?;
    if pages == 0 {
        return Err(ConfigError::Scenario("pages_per_node must be positive".into()));
    }
    let threads = b.spread(nodes, 1)?;
    let handles: Vec<u64> = threads.iter().map(|&t| b.mmap(t, pages * PAGE, Prot::RW)).collect();
    for pass in 0..p.int("passes")?.max(1) {
        let kind = if pass == 0 { AccessKind::Write } else { AccessKind::Read };
        for (&t, &h) in threads.iter().zip(&handles) {
            for page in 0..pages {
                b.access(t, h, page, kind);
            }
        }
    }
    Ok(())
}

/// A thread initialises a buffer on `from`, reads it `passes_before` times,
/// migrates to `to` and reads it `passes_after` more times.
fn migration(p: &Params, b: &mut Builder) -> Result<(), ConfigError> {
    let pages = p.int("pages")?;
    let (from, to) = (p.node("from")?, p.node("to")?);
    if from == to || pages == 0 {
        return Err(ConfigError::Scenario("migration needs distinct nodes and a positive page count".into()));
    }
    let t = b.spawn(from)?;
    let h = b.mmap(t, pages * PAGE, Prot::RW);
    for page in 0..pages {
        b.access(t, h, page, AccessKind::Write);
    }
    let read_passes = |b: &mut Builder, n: u64| {
        for _ in 0..n {
            for page in 0..pages {
                b.access(t, h, page, AccessKind::Read);
            }
        }
    };
    read_passes(b, p.int("passes_before")?);
    b.push(t, Op::Migrate { node: to });
    read_passes(b, p.int("passes_after")?);
    Ok(())
}
