//! Machine description and the abstract cost model.
//!
//! Distances are two-tier: an access is either local to the requesting
//! socket or remote. Remote accesses can additionally be priced at an
//! "interfered" rate to model cross-socket traffic from co-located
//! applications.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Abstract simulation cost unit.
pub type Cost = u64;

/// NUMA node (socket) identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u16);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node{}", self.0)
    }
}

/// Hardware thread identifier, dense over the whole machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoreId(pub u32);

impl CoreId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "core{}", self.0)
    }
}

/// Prices of the primitive interactions, in abstract units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostParams {
    pub local_mem: Cost,
    pub remote_mem: Cost,
    pub remote_mem_interference: Cost,
    pub ipi_local: Cost,
    pub ipi_remote: Cost,
    pub tlb_hit: Cost,
    /// Fixed software cost of entering the page-fault handler.
    pub fault_overhead: Cost,
    /// Fixed software cost of an `mmap` call.
    pub mmap_overhead: Cost,
    /// Fixed software cost of `munmap` and `mprotect` calls.
    pub syscall_overhead: Cost,
    /// Price every remote access at the interfered rate.
    pub interference: bool,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            local_mem: 1,
            remote_mem: 4,
            remote_mem_interference: 12,
            ipi_local: 40,
            ipi_remote: 120,
            tlb_hit: 0,
            fault_overhead: 0,
            mmap_overhead: 100,
            syscall_overhead: 100,
            interference: false,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.local_mem > self.remote_mem || self.remote_mem > self.remote_mem_interference {
            return Err(ConfigError::Costs("expected local_mem <= remote_mem <= remote_mem_interference".into()));
        }
        if self.ipi_local > self.ipi_remote {
            return Err(ConfigError::Costs("expected ipi_local <= ipi_remote".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` override. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::Costs(format!("invalid value {value:?} for {key}"));
        if key == "interference" {
            self.interference = match value {
                "1" | "true" | "on" => true,
                "0" | "false" | "off" => false,
                _ => return Err(bad()),
            };
            return Ok(());
        }
        let slot = match key {
            "local_mem" => &mut self.local_mem,
            "remote_mem" => &mut self.remote_mem,
            "remote_mem_interference" => &mut self.remote_mem_interference,
            "ipi_local" => &mut self.ipi_local,
            "ipi_remote" => &mut self.ipi_remote,
            "tlb_hit" => &mut self.tlb_hit,
            "fault_overhead" => &mut self.fault_overhead,
            "mmap_overhead" => &mut self.mmap_overhead,
            "syscall_overhead" => &mut self.syscall_overhead,
            _ => return Err(ConfigError::Costs(format!("unknown cost key {key:?}"))),
        };
        // Negative numbers fail to parse as unsigned and are rejected here.
        *slot = value.trim().parse().map_err(|_| bad())?;
        Ok(())
    }

    /// Parses a `key=value` file with `#` comments on top of the defaults.
    pub fn parse_overrides(text: &str) -> Result<Self, ConfigError> {
        let mut costs = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Costs(format!("line {}: expected key=value", lineno + 1)))?;
            costs.set(key.trim(), value.trim()).map_err(|e| ConfigError::Costs(format!("line {}: {e}", lineno + 1)))?;
        }
        costs.validate()?;
        Ok(costs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineTopology {
    node_count: u16,
    cores_per_node: u32,
    costs: CostParams,
}

impl MachineTopology {
    /// Eight sockets of eighteen cores.
    pub fn eight_socket() -> Self {
        Self::new(8, 18, CostParams::default()).expect("default topology is valid")
    }

    pub fn new(node_count: u16, cores_per_node: u32, costs: CostParams) -> Result<Self, ConfigError> {
        if node_count == 0 {
            return Err(ConfigError::Topology("node_count must be at least 1".into()));
        }
        if cores_per_node == 0 {
            return Err(ConfigError::Topology("cores_per_node must be at least 1".into()));
        }
        costs.validate()?;
        Ok(Self { node_count, cores_per_node, costs })
    }

    pub fn node_count(&self) -> usize {
        self.node_count as usize
    }

    pub fn cores_per_node(&self) -> usize {
        self.cores_per_node as usize
    }

    pub fn core_count(&self) -> usize {
        self.node_count() * self.cores_per_node()
    }

    pub fn costs(&self) -> &CostParams {
        &self.costs
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + Clone {
        (0..self.node_count).map(NodeId)
    }

    pub fn cores_of(&self, node: NodeId) -> impl Iterator<Item = CoreId> {
        let base = node.0 as u32 * self.cores_per_node;
        (base..base + self.cores_per_node).map(CoreId)
    }

    pub fn node_of(&self, core: CoreId) -> NodeId {
        assert!(core.index() < self.core_count(), "{core} out of range");
        NodeId((core.0 / self.cores_per_node) as u16)
    }

    pub fn contains_node(&self, node: NodeId) -> bool {
        node.0 < self.node_count
    }

    /// Price of a memory access issued on `from` and served by `to`.
    pub fn access_cost(&self, from: NodeId, to: NodeId) -> Cost {
        self.access_cost_with(from, to, self.costs.interference)
    }

    pub fn access_cost_with(&self, from: NodeId, to: NodeId, interference: bool) -> Cost {
        assert!(
            self.contains_node(from) && self.contains_node(to),
            "node out of range: {from} -> {to} on a {}-node machine",
            self.node_count
        );
        if from == to {
            self.costs.local_mem
        } else if interference {
            self.costs.remote_mem_interference
        } else {
            self.costs.remote_mem
        }
    }

    /// Price of one IPI sent from a core on `from` to a core on `to`.
    pub fn ipi_cost(&self, from: NodeId, to: NodeId) -> Cost {
        if from == to {
            self.costs.ipi_local
        } else {
            self.costs.ipi_remote
        }
    }
}
