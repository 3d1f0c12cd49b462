//! Line-delimited JSON trace format.
//!
//! Each line holds one event object with the common fields `seq`, `proc`,
//! `thread` and `op`, plus the fields its op needs:
//!
//! | op         | fields                                   |
//! |------------|------------------------------------------|
//! | `spawn`    | `node`                                   |
//! | `exit`     | none                                     |
//! | `migrate`  | `node`                                   |
//! | `mmap`     | `len`, `prot`, optional `node`           |
//! | `munmap`   | `vma` alone, or optional `vma` + `addr` + `len` |
//! | `mprotect` | as `munmap`, plus `prot`                 |
//! | `access`   | `addr`, optional `vma`, `kind`           |
//! | `spin`     | `iters`                                  |
//!
//! When `vma` is present, `addr` is an offset into the mapping created by
//! the mmap event with that `seq`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::TraceError;
use crate::mmu::AccessKind;
use crate::syscalls::{AddrRef, Op, RangeRef, TraceEvent};
use crate::topology::NodeId;
use crate::vmem::{ProcessId, Prot, ThreadId};

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Wire {
    seq: u64,
    proc: u64,
    thread: u64,
    op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    len: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    addr: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vma: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iters: Option<u64>,
}

fn to_wire(ev: &TraceEvent) -> Wire {
    let mut w = Wire { seq: ev.seq, proc: ev.process.0, thread: ev.thread.0, ..Default::default() };
    let range = |w: &mut Wire, r: &RangeRef| {
        w.vma = r.vma;
        w.len = r.len;
        if r.vma.is_none() || r.addr != 0 {
            w.addr = Some(r.addr);
        }
    };
    w.op = match &ev.op {
        Op::Spawn { node } => {
            w.node = Some(node.0);
            "spawn"
        }
        Op::Exit => "exit",
        Op::Migrate { node } => {
            w.node = Some(node.0);
            "migrate"
        }
        Op::Mmap { len, prot, node } => {
            w.len = Some(*len);
            w.prot = Some(prot.to_string());
            w.node = node.map(|n| n.0);
            "mmap"
        }
        Op::Munmap { range: r } => {
            range(&mut w, r);
            "munmap"
        }
        Op::Mprotect { range: r, prot } => {
            range(&mut w, r);
            w.prot = Some(prot.to_string());
            "mprotect"
        }
        Op::Access { addr, kind } => {
            w.vma = addr.vma;
            w.addr = Some(addr.addr);
            w.kind = Some(if kind.is_write() { "w" } else { "r" }.to_string());
            "access"
        }
        Op::Spin { iters } => {
            w.iters = Some(*iters);
            "spin"
        }
    }
    .to_string();
    w
}

/// Serializes one event as a single JSON line without the trailing newline.
pub fn event_to_line(ev: &TraceEvent) -> String {
    serde_json::to_string(&to_wire(ev)).expect("wire events always serialize")
}

pub fn write_trace<W: Write>(mut out: W, events: &[TraceEvent]) -> std::io::Result<()> {
    for ev in events {
        out.write_all(event_to_line(ev).as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn serialize_trace(events: &[TraceEvent]) -> String {
    let mut out = Vec::new();
    write_trace(&mut out, events).expect("writing to memory");
    String::from_utf8(out).expect("JSON is UTF-8")
}

fn from_wire(w: Wire, line: usize) -> Result<TraceEvent, TraceError> {
    let bad = |message: String| TraceError::Validation { line, message };
    let need = |v: Option<u64>, field: &str| v.ok_or_else(|| bad(format!("{} requires `{field}`", w.op)));
    let prot = |p: &Option<String>| -> Result<Prot, TraceError> {
        let text = p.as_deref().ok_or_else(|| bad(format!("{} requires `prot`", w.op)))?;
        text.parse().map_err(|_| bad(format!("invalid protection {text:?}")))
    };
    let allowed: &[&str] = match w.op.as_str() {
        "spawn" | "migrate" => &["node"],
        "exit" => &[],
        "mmap" => &["len", "prot", "node"],
        "munmap" => &["vma", "addr", "len"],
        "mprotect" => &["vma", "addr", "len", "prot"],
        "access" => &["vma", "addr", "kind"],
        "spin" => &["iters"],
        other => return Err(bad(format!("unknown op {other:?}"))),
    };
    let present = [
        ("node", w.node.is_some()),
        ("len", w.len.is_some()),
        ("prot", w.prot.is_some()),
        ("addr", w.addr.is_some()),
        ("vma", w.vma.is_some()),
        ("kind", w.kind.is_some()),
        ("iters", w.iters.is_some()),
    ];
    if let Some((field, _)) = present.iter().find(|(f, set)| *set && !allowed.contains(f)) {
        return Err(bad(format!("field `{field}` does not apply to {}", w.op)));
    }
    let node = |v: Option<u16>| v.map(NodeId).ok_or_else(|| bad(format!("{} requires `node`", w.op)));
    let range = || -> Result<RangeRef, TraceError> {
        if w.len == Some(0) {
            return Err(bad("zero-length range".into()));
        }
        match (w.vma, w.addr, w.len) {
            (Some(_), _, None) if w.addr.unwrap_or(0) != 0 => Err(bad("an offset range needs `len`".into())),
            (None, None, _) | (None, _, None) => Err(bad(format!("{} needs `vma` or `addr` and `len`", w.op))),
            (vma, addr, len) => Ok(RangeRef { vma, addr: addr.unwrap_or(0), len }),
        }
    };
    let op = match w.op.as_str() {
        "spawn" => Op::Spawn { node: node(w.node)? },
        "exit" => Op::Exit,
        "migrate" => Op::Migrate { node: node(w.node)? },
        "mmap" => {
            let len = need(w.len, "len")?;
            if len == 0 {
                return Err(bad("mmap length must be positive".into()));
            }
            Op::Mmap { len, prot: prot(&w.prot)?, node: w.node.map(NodeId) }
        }
        "munmap" => Op::Munmap { range: range()? },
        "mprotect" => Op::Mprotect { range: range()?, prot: prot(&w.prot)? },
        "access" => {
            let kind = match w.kind.as_deref() {
                Some("r") => AccessKind::Read,
                Some("w") => AccessKind::Write,
                Some(other) => return Err(bad(format!("access kind must be \"r\" or \"w\", got {other:?}"))),
                None => return Err(bad("access requires `kind`".into())),
            };
            Op::Access { addr: AddrRef { vma: w.vma, addr: need(w.addr, "addr")? }, kind }
        }
        "spin" => Op::Spin { iters: need(w.iters, "iters")? },
        _ => unreachable!("op checked above"),
    };
    Ok(TraceEvent { seq: w.seq, process: ProcessId(w.proc), thread: ThreadId(w.thread), op })
}

/// Streaming parser. Blank lines are skipped; line numbers start at 1.
pub struct TraceReader<R> {
    input: R,
    line: usize,
    last_seq: Option<u64>,
    buf: String,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(input: R) -> Self {
        Self { input, line: 0, last_seq: None, buf: String::new() }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<TraceEvent, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(TraceError::Io(e.to_string()))),
            }
            self.line += 1;
            let text = self.buf.trim_end_matches(['\n', '\r']);
            if text.trim().is_empty() {
                continue;
            }
            let line = self.line;
            let wire: Wire = match serde_json::from_str(text) {
                Ok(w) => w,
                Err(e) => {
                    let text = e.to_string();
                    let position = format!(" at line {} column {}", e.line(), e.column());
                    let message = text.strip_suffix(&position).unwrap_or(&text).to_string();
                    return Some(Err(TraceError::Parse { line, column: e.column(), message }));
                }
            };
            let event = match from_wire(wire, line) {
                Ok(ev) => ev,
                Err(e) => return Some(Err(e)),
            };
            if let Some(prev) = self.last_seq {
                if event.seq <= prev {
                    return Some(Err(TraceError::Validation {
                        line,
                        message: format!("seq {} does not follow {prev}", event.seq),
                    }));
                }
            }
            self.last_seq = Some(event.seq);
            return Some(Ok(event));
        }
    }
}

pub fn parse_trace<R: BufRead>(input: R) -> Result<Vec<TraceEvent>, TraceError> {
    TraceReader::new(input).collect()
}

pub fn parse_trace_str(text: &str) -> Result<Vec<TraceEvent>, TraceError> {
    parse_trace(text.as_bytes())
}
