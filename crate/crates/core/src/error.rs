use thiserror::Error;

use crate::topology::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("topology: {0}")]
    Topology(String),
    #[error("costs: {0}")]
    Costs(String),
    #[error("address layout: {0}")]
    Layout(String),
    #[error("policy: {0}")]
    Policy(String),
    #[error("scenario: {0}")]
    Scenario(String),
}

/// A trace that cannot be read or is structurally invalid.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("i/o: {0}")]
    Io(String),
}

/// Per-event failures. These are recorded in the event summary and the run
/// continues with the next event.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EventError {
    #[error("segmentation fault at {addr:#x}")]
    SegFault { addr: u64 },
    #[error("protection fault at {addr:#x}")]
    ProtectionFault { addr: u64 },
    #[error("unknown thread {0}")]
    UnknownThread(u64),
    #[error("thread {0} already exists")]
    ThreadExists(u64),
    #[error("unknown process {0}")]
    UnknownProcess(u64),
    #[error("{0} is not part of the machine")]
    NodeOutOfRange(NodeId),
    #[error("no free core on {0}")]
    NoFreeCore(NodeId),
    #[error("unknown mapping handle {0}")]
    UnknownMapping(u64),
    #[error("range [{start:#x}, {end:#x}) is not fully mapped")]
    UnmappedRange { start: u64, end: u64 },
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("virtual address space exhausted on {0}")]
    AddressSpaceExhausted(NodeId),
}
