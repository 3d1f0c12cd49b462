//! Machine description files: `key=value` lines with `#` comments. The keys
//! `nodes` and `cores` size the machine, every other key overrides a cost.

use std::path::Path;

use ptsim_core::topology::CostParams;
use ptsim_core::ConfigError;

#[derive(Debug, Default)]
pub struct MachineFile {
    pub nodes: Option<u16>,
    pub cores: Option<u32>,
    pub costs: CostParams,
}

impl MachineFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut nodes = None;
        let mut cores = None;
        let mut rest = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let Some((key, value)) = line.split_once('=') else {
                rest.push_str(raw);
                rest.push('\n');
                continue;
            };
            let bad = || ConfigError::Topology(format!("line {}: invalid {} {value:?}", lineno + 1, key.trim()));
            match key.trim() {
                "nodes" => nodes = Some(value.trim().parse().map_err(|_| bad())?),
                "cores" => cores = Some(value.trim().parse().map_err(|_| bad())?),
                _ => {
                    rest.push_str(raw);
                    rest.push('\n');
                    continue;
                }
            }
            // keep line numbers of cost errors aligned with the file
            rest.push('\n');
        }
        Ok(Self { nodes, cores, costs: CostParams::parse_overrides(&rest)? })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Costs(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
