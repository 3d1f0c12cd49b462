//! Fixtures shared by the benchmarks.

use ptsim_core::topology::{CostParams, MachineTopology};
use ptsim_core::{gen_scenario, ReplicationPolicy, ScenarioSpec, TraceEvent};

/// Policies every replay benchmark is run under.
pub const POLICIES: [&str; 4] = ["none", "eager", "lazy:0+opt", "lazy:9+opt"];

pub fn policy(name: &str) -> ReplicationPolicy {
    name.parse().expect("benchmark policy names are valid")
}

pub fn machine(nodes: u16, cores: u32) -> MachineTopology {
    MachineTopology::new(nodes, cores, CostParams::default()).expect("benchmark machine is valid")
}

/// Generates `name` on `topo` with the given parameter overrides and seed 1.
pub fn scenario(name: &str, params: &[(&str, &str)], topo: &MachineTopology) -> Vec<TraceEvent> {
    let spec = params.iter().fold(ScenarioSpec::new(name, 1), |s, (k, v)| s.with(k, v));
    gen_scenario(&spec, topo).expect("benchmark scenario is valid")
}
