//! Running whole experiments: load or generate a trace, replay it under one
//! or several policies, audit invariants and build the report.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::audit::{audit, InvariantViolation};
use crate::error::{ConfigError, TraceError};
use crate::metrics::{report_csv, RunRecord};
use crate::mmu::DEFAULT_TLB_CAPACITY;
use crate::policy::{ReplicationMode, ReplicationPolicy};
use crate::syscalls::{EventSummary, SimConfig, Simulator, TraceEvent};
use crate::topology::MachineTopology;
use crate::vmem::AddressLayout;
use crate::workloads::{gen_scenario, parse_trace, ScenarioSpec};

/// How often invariants are checked during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditMode {
    Off,
    /// Check after every n-th event and after the last one.
    Sampled(u64),
    /// Check after every event, with unbounded TLBs.
    Full,
}

impl AuditMode {
    pub const DEFAULT_INTERVAL: u64 = 64;

    fn due(self, index: u64, last: bool) -> bool {
        match self {
            AuditMode::Off => false,
            AuditMode::Full => true,
            AuditMode::Sampled(n) => last || (index + 1).is_multiple_of(n),
        }
    }
}

impl Default for AuditMode {
    fn default() -> Self {
        AuditMode::Sampled(Self::DEFAULT_INTERVAL)
    }
}

impl fmt::Display for AuditMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuditMode::Off => f.write_str("off"),
            AuditMode::Full => f.write_str("full"),
            AuditMode::Sampled(n) if *n == Self::DEFAULT_INTERVAL => f.write_str("sampled"),
            AuditMode::Sampled(n) => write!(f, "sampled:{n}"),
        }
    }
}

impl FromStr for AuditMode {
    type Err = ConfigError;

    /// `off`, `full`, `sampled` or `sampled:N`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConfigError::Scenario(format!("audit mode must be off, sampled[:N] or full, got {s:?}"));
        match s {
            "off" => Ok(AuditMode::Off),
            "full" => Ok(AuditMode::Full),
            "sampled" => Ok(AuditMode::default()),
            _ => {
                let n: u64 = s.strip_prefix("sampled:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
                if n == 0 {
                    return Err(bad());
                }
                Ok(AuditMode::Sampled(n))
            }
        }
    }
}

/// Where the events come from.
#[derive(Debug, Clone)]
pub enum Workload {
    Scenario(ScenarioSpec),
    TraceFile(PathBuf),
    Events(Vec<TraceEvent>),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub topology: MachineTopology,
    pub policy: ReplicationPolicy,
    pub layout: AddressLayout,
    pub workload: Workload,
    pub audit: AuditMode,
    /// Capacity of each core's TLB. Full audits always use unbounded TLBs.
    pub tlb_capacity: Option<usize>,
    pub run_id: String,
    /// Skip invalidations on shootdown targets. Only for testing the auditor.
    pub drop_invalidations: bool,
}

impl ExperimentConfig {
    pub fn new(topology: MachineTopology, policy: ReplicationPolicy, workload: Workload) -> Self {
        Self {
            topology,
            policy,
            layout: AddressLayout::default(),
            workload,
            audit: AuditMode::default(),
            tlb_capacity: Some(DEFAULT_TLB_CAPACITY),
            run_id: "run0".into(),
            drop_invalidations: false,
        }
    }

    fn simulator(&self) -> Simulator {
        let tlb_capacity = if self.audit == AuditMode::Full { None } else { self.tlb_capacity };
        let mut sim = Simulator::new(SimConfig {
            topology: self.topology.clone(),
            policy: self.policy,
            layout: self.layout,
            tlb_capacity,
        });
        sim.mmu_mut().inject_dropped_invalidations(self.drop_invalidations);
        sim
    }
}

/// Failure of a run, each with its own process exit code.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Invariant(#[from] InvariantViolation),
    #[error("i/o: {0}")]
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) | RunError::Config(_) | RunError::Io(_) => 1,
            RunError::Trace(_) => 2,
            RunError::Invariant(_) => 3,
        }
    }
}

/// Final state and report of one run.
pub struct RunOutcome {
    pub record: RunRecord,
    pub sim: Simulator,
}

/// Materializes the configured workload.
pub fn load_events(config: &ExperimentConfig) -> Result<Vec<TraceEvent>, RunError> {
    match &config.workload {
        Workload::Scenario(spec) => Ok(gen_scenario(spec, &config.topology)?),
        Workload::TraceFile(path) => {
            let file = File::open(path).map_err(|e| TraceError::Io(format!("{}: {e}", path.display())))?;
            Ok(parse_trace(BufReader::new(file))?)
        }
        Workload::Events(events) => Ok(events.clone()),
    }
}

fn check_config(config: &ExperimentConfig) -> Result<(), RunError> {
    config.policy.validate(config.layout.bits_per_level())?;
    if config.topology.node_count() + 1 > config.layout.fanout() {
        return Err(ConfigError::Topology(format!(
            "at most {} nodes fit the address layout",
            config.layout.fanout() - 1
        ))
        .into());
    }
    Ok(())
}

/// Replays `events` and returns the final state. `sink` sees every event
/// summary in order.
pub fn run_events(
    config: &ExperimentConfig,
    events: &[TraceEvent],
    mut sink: Option<&mut dyn FnMut(&EventSummary)>,
) -> Result<RunOutcome, RunError> {
    check_config(config)?;
    let mut sim = config.simulator();
    let last = events.len().saturating_sub(1) as u64;
    for (i, event) in events.iter().enumerate() {
        let i = i as u64;
        let summary = sim.apply(event);
        if let Some(sink) = sink.as_mut() {
            sink(&summary);
        }
        if config.audit.due(i, i == last) {
            if let Err((kind, detail)) = audit(&sim) {
                let violation = InvariantViolation { event_index: i, kind, detail };
                return Err(minimize(config, events, violation).into());
            }
        }
    }
    let record = RunRecord { run_id: config.run_id.clone(), policy: config.policy, report: sim.metrics().clone() };
    Ok(RunOutcome { record, sim })
}

/// Finds the first event after which an invariant fails by replaying the
/// prefix with a check after every event. Falls back to `found` when the
/// replay does not reproduce it.
fn minimize(config: &ExperimentConfig, events: &[TraceEvent], found: InvariantViolation) -> InvariantViolation {
    if config.audit == AuditMode::Full {
        return found;
    }
    let mut sim = config.simulator();
    for (i, event) in events.iter().enumerate().take(found.event_index as usize + 1) {
        sim.apply(event);
        if let Err((kind, detail)) = audit(&sim) {
            return InvariantViolation { event_index: i as u64, kind, detail };
        }
    }
    found
}

/// Loads the workload and runs it.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let events = load_events(config)?;
    run_events(config, &events, None)
}

/// Runs the same trace under every policy, in parallel, and returns the
/// records in `policies` order together with the CSV. Normalized columns
/// are relative to the first first-touch run, or to the first run when
/// there is none.
pub fn compare(base: &ExperimentConfig, policies: &[ReplicationPolicy]) -> Result<(Vec<RunRecord>, String), RunError> {
    if policies.len() < 2 {
        return Err(RunError::Usage("compare needs at least two policies".into()));
    }
    let events = load_events(base)?;
    let results: Vec<Result<RunRecord, RunError>> = policies
        .par_iter()
        .enumerate()
        .map(|(i, &policy)| {
            let config = ExperimentConfig { policy, run_id: format!("run{i}"), ..base.clone() };
            run_events(&config, &events, None).map(|o| o.record)
        })
        .collect();
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let baseline = policies.iter().position(|p| p.mode == ReplicationMode::NoReplication).unwrap_or(0);
    let csv = report_csv(&records, Some(baseline));
    Ok((records, csv))
}
