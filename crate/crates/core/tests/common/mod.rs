//! Randomized trace generator shared by the integration suites.
#![allow(dead_code)]

use ptsim_core::mmu::AccessKind;
use ptsim_core::topology::{CostParams, MachineTopology, NodeId};
use ptsim_core::vmem::{ProcessId, Prot, ThreadId};
use ptsim_core::{AddrRef, Op, RangeRef, TraceEvent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PAGE: u64 = 4096;

pub fn topo(nodes: u16, cores: u32) -> MachineTopology {
    MachineTopology::new(nodes, cores, CostParams::default()).unwrap()
}

#[derive(Debug, Clone)]
pub struct FuzzShape {
    pub nodes: u16,
    pub cores_per_node: u32,
    pub events: usize,
    pub max_live: usize,
    pub max_pages: u64,
    /// Share of access events, in percent.
    pub access_pct: u32,
    /// Emit invalid operations now and then.
    pub errors: bool,
}

impl Default for FuzzShape {
    fn default() -> Self {
        Self { nodes: 4, cores_per_node: 2, events: 10_000, max_live: 8, max_pages: 24, access_pct: 70, errors: true }
    }
}

struct Mapping {
    handle: u64,
    pages: u64,
}

/// A random but well-formed trace for one process: threads come and go
/// and migrate, mappings are created with and without placement overrides,
/// touched, re-protected and unmapped in whole or in part.
pub fn fuzz_trace(seed: u64, shape: &FuzzShape) -> Vec<TraceEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<TraceEvent> = Vec::with_capacity(shape.events);
    let mut threads: Vec<(ThreadId, NodeId)> = Vec::new();
    let mut used = vec![0u32; shape.nodes as usize];
    let mut maps: Vec<Mapping> = Vec::new();
    let mut next_tid = 0u64;
    let pid = ProcessId(0);

    let push = |out: &mut Vec<TraceEvent>, thread: ThreadId, op: Op| -> u64 {
        let seq = out.len() as u64 + 1;
        out.push(TraceEvent { seq, process: pid, thread, op });
        seq
    };

    let first = rng.random_range(1..=shape.nodes.min(4) as usize);
    for _ in 0..first {
        let node = NodeId(rng.random_range(0..shape.nodes));
        if used[node.index()] < shape.cores_per_node {
            used[node.index()] += 1;
            let t = ThreadId(next_tid);
            next_tid += 1;
            push(&mut out, t, Op::Spawn { node });
            threads.push((t, node));
        }
    }
    if threads.is_empty() {
        used[0] += 1;
        push(&mut out, ThreadId(0), Op::Spawn { node: NodeId(0) });
        threads.push((ThreadId(0), NodeId(0)));
        next_tid = 1;
    }

    while out.len() < shape.events {
        let ti = rng.random_range(0..threads.len());
        let (tid, tnode) = threads[ti];
        let roll = rng.random_range(0..100u32);
        if roll < shape.access_pct && !maps.is_empty() {
            let m = &maps[rng.random_range(0..maps.len())];
            let page = rng.random_range(0..m.pages);
            let kind = if rng.random_bool(0.4) { AccessKind::Write } else { AccessKind::Read };
            let addr = AddrRef { vma: Some(m.handle), addr: page * PAGE + rng.random_range(0..PAGE) };
            push(&mut out, tid, Op::Access { addr, kind });
            continue;
        }
        match rng.random_range(0..100u32) {
            0..=29 if maps.len() < shape.max_live => {
                let pages = if rng.random_bool(0.05) {
                    rng.random_range(500..=700)
                } else {
                    rng.random_range(1..=shape.max_pages)
                };
                let prot = if rng.random_bool(0.8) { Prot::RW } else { Prot::R };
                let node = rng.random_bool(0.25).then(|| NodeId(rng.random_range(0..shape.nodes)));
                let len = pages * PAGE - rng.random_range(0..PAGE);
                let handle = push(&mut out, tid, Op::Mmap { len, prot, node });
                maps.push(Mapping { handle, pages });
            }
            30..=49 if !maps.is_empty() => {
                let i = rng.random_range(0..maps.len());
                let m = &maps[i];
                if rng.random_bool(0.6) {
                    let handle = m.handle;
                    push(&mut out, tid, Op::Munmap { range: RangeRef { vma: Some(handle), addr: 0, len: None } });
                    maps.swap_remove(i);
                } else {
                    // carve a hole out of the middle or an edge; later
                    // operations over the hole become recorded errors
                    let start = rng.random_range(0..m.pages);
                    let len = rng.random_range(1..=m.pages - start);
                    let range = RangeRef { vma: Some(m.handle), addr: start * PAGE, len: Some(len * PAGE) };
                    push(&mut out, tid, Op::Munmap { range });
                    if start == 0 && len == m.pages {
                        maps.swap_remove(i);
                    }
                }
            }
            50..=74 if !maps.is_empty() => {
                let m = &maps[rng.random_range(0..maps.len())];
                let start = rng.random_range(0..m.pages);
                let len = rng.random_range(1..=m.pages - start);
                let prot = [Prot::R, Prot::RW, Prot::RW, Prot::NONE, Prot::RWX][rng.random_range(0..5)];
                let range = RangeRef { vma: Some(m.handle), addr: start * PAGE, len: Some(len * PAGE) };
                push(&mut out, tid, Op::Mprotect { range, prot });
            }
            75..=82 => {
                let node = NodeId(rng.random_range(0..shape.nodes));
                if node != tnode && used[node.index()] < shape.cores_per_node {
                    used[tnode.index()] -= 1;
                    used[node.index()] += 1;
                    threads[ti].1 = node;
                }
                push(&mut out, tid, Op::Migrate { node });
            }
            83..=89 => {
                let node = NodeId(rng.random_range(0..shape.nodes));
                let t = ThreadId(next_tid);
                next_tid += 1;
                push(&mut out, t, Op::Spawn { node });
                if used[node.index()] < shape.cores_per_node {
                    used[node.index()] += 1;
                    threads.push((t, node));
                }
            }
            90..=93 if threads.len() > 1 => {
                push(&mut out, tid, Op::Exit);
                used[tnode.index()] -= 1;
                threads.swap_remove(ti);
            }
            94..=97 if shape.errors => {
                let op = if rng.random_bool(0.5) {
                    Op::Access { addr: AddrRef { vma: None, addr: rng.random::<u64>() >> 8 }, kind: AccessKind::Read }
                } else {
                    Op::Munmap { range: RangeRef { vma: Some(u64::MAX), addr: 0, len: None } }
                };
                push(&mut out, tid, op);
            }
            _ => {
                push(&mut out, tid, Op::Spin { iters: rng.random_range(1..100) });
            }
        }
    }
    out
}
