//! Trace-driven simulator for NUMA page-table replication policies.
//!
//! The engine replays a deterministic event trace against a modelled
//! multi-socket machine and reports walk, fault, coherence and shootdown
//! costs for first-touch, eager and lazy replication.

pub mod audit;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod mmu;
pub mod policy;
pub mod syscalls;
pub mod topology;
pub mod vmem;
pub mod workloads;

pub use audit::{audit, InvariantViolation, ViolationKind};
pub use error::{ConfigError, EventError, TraceError};
pub use experiment::{
    compare, load_events, run_events, run_experiment, AuditMode, ExperimentConfig, RunError, RunOutcome, Workload,
};
pub use metrics::{CostBreakdown, Counter, MetricsReport, OpClass, RunRecord, Scalar};
pub use mmu::{AccessKind, FaultKind, Mmu};
pub use policy::{ReplicationMode, ReplicationPolicy};
pub use syscalls::{AddrRef, EventSummary, Op, RangeRef, SimConfig, Simulator, TraceEvent};
pub use topology::{CoreId, Cost, CostParams, MachineTopology, NodeId};
pub use vmem::{AddressLayout, ProcessId, Prot, ThreadId, Vpn, VpnRange};
pub use workloads::{gen_scenario, parse_trace, serialize_trace, ScenarioSpec};
