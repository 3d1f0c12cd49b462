//! Scenario generators and the trace file format.

mod gamma;
mod scenarios;
mod trace;

pub use gamma::{gamma_alloc_size, AllocSizes, MEAN_ALLOC_BYTES};
pub use scenarios::{gen_scenario, ScenarioSpec, SCENARIO_NAMES};
pub use trace::{event_to_line, parse_trace, parse_trace_str, serialize_trace, write_trace, TraceReader};
