//! `ptsim`: run page-table replication experiments from the command line.
//!
//! Exit status is 0 on success, 1 for usage and configuration errors, 2 for
//! malformed traces and 3 when an invariant check fails.

mod machine;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ptsim_core::workloads::write_trace;
use ptsim_core::{
    compare, gen_scenario, load_events, run_events, AddressLayout, AuditMode, EventSummary, ExperimentConfig,
    MachineTopology, ReplicationPolicy, RunError, ScenarioSpec, Workload,
};

use machine::MachineFile;

#[derive(Parser)]
#[command(name = "ptsim", version, about = "Trace-driven NUMA page-table replication simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay one workload under one policy and print its report.
    Run(RunArgs),
    /// Replay the same workload under several policies and print one row each.
    Compare(CompareArgs),
    /// Generate a scenario trace as JSON lines.
    Gen(GenArgs),
}

#[derive(Args)]
struct MachineArgs {
    /// NUMA nodes (sockets).
    #[arg(long)]
    nodes: Option<u16>,
    /// Cores per node.
    #[arg(long)]
    cores: Option<u32>,
    /// Machine file with `nodes`, `cores` and cost overrides as key=value lines.
    #[arg(long, value_name = "PATH")]
    costs: Option<PathBuf>,
    /// Radix tree depth.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(4..=5))]
    levels: u8,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Built-in scenario to generate.
    #[arg(long, value_name = "NAME")]
    scenario: Option<String>,
    /// JSON-lines trace to replay.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct WorkloadArgs {
    #[command(flatten)]
    source: Source,
    /// Scenario parameter as key=value. Repeatable.
    #[arg(long = "param", value_name = "K=V")]
    params: Vec<String>,
    /// Seed for scenario generation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Invariant checking: off, sampled, sampled:N or full.
    #[arg(long, default_value = "sampled")]
    audit: AuditMode,
    /// Per-core TLB entries.
    #[arg(long, value_name = "N")]
    tlb_capacity: Option<usize>,
    /// Where to write the CSV report (default: stdout).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    machine: MachineArgs,
    #[command(flatten)]
    workload: WorkloadArgs,
    /// none, eager or lazy (also accepts the long form, e.g. lazy:9+opt).
    #[arg(long, default_value = "none")]
    policy: ReplicationPolicy,
    /// Lazy prefetch degree.
    #[arg(long, value_name = "D")]
    prefetch: Option<u8>,
    /// Lazy shootdown filtering by sharer nodes.
    #[arg(long, value_enum)]
    tlb_opt: Option<Switch>,
    /// Also write every event summary as JSON lines.
    #[arg(long, value_name = "PATH")]
    events: Option<PathBuf>,
    /// Label of the run in the report.
    #[arg(long, default_value = "run0")]
    run_id: String,
    /// Skip TLB invalidations on shootdown targets.
    #[arg(long, hide = true)]
    inject_missed_invalidations: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    machine: MachineArgs,
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Comma-separated policies, e.g. none,eager,lazy:9+opt.
    #[arg(long, value_delimiter = ',', required = true)]
    policies: Vec<ReplicationPolicy>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    machine: MachineArgs,
    /// Scenario to generate.
    #[arg(long, value_name = "NAME")]
    scenario: String,
    /// Scenario parameter as key=value. Repeatable.
    #[arg(long = "param", value_name = "K=V")]
    params: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the trace (default: stdout).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn topology(args: &MachineArgs) -> Result<MachineTopology, RunError> {
    let file = match &args.costs {
        Some(path) => MachineFile::load(path)?,
        None => MachineFile::default(),
    };
    let default = MachineTopology::eight_socket();
    let nodes = args.nodes.or(file.nodes).unwrap_or(default.node_count() as u16);
    let cores = args.cores.or(file.cores).unwrap_or(default.cores_per_node() as u32);
    Ok(MachineTopology::new(nodes, cores, file.costs)?)
}

fn layout(args: &MachineArgs) -> AddressLayout {
    if args.levels == 5 {
        AddressLayout::five_level()
    } else {
        AddressLayout::default()
    }
}

fn scenario_spec(name: &str, params: &[String], seed: u64) -> Result<ScenarioSpec, RunError> {
    let mut spec = ScenarioSpec::new(name, seed);
    for p in params {
        spec.set_param(p)?;
    }
    spec.validate()?;
    Ok(spec)
}

fn base_config(
    machine: &MachineArgs,
    w: &WorkloadArgs,
    policy: ReplicationPolicy,
) -> Result<ExperimentConfig, RunError> {
    let workload = match (&w.source.scenario, &w.source.trace) {
        (Some(name), _) => Workload::Scenario(scenario_spec(name, &w.params, w.seed)?),
        (None, Some(path)) if w.params.is_empty() => Workload::TraceFile(path.clone()),
        (None, Some(_)) => return Err(RunError::Usage("--param only applies to --scenario".into())),
        (None, None) => unreachable!("clap requires a workload source"),
    };
    let mut config = ExperimentConfig::new(topology(machine)?, policy, workload);
    config.layout = layout(machine);
    config.audit = w.audit;
    if w.tlb_capacity.is_some() {
        config.tlb_capacity = w.tlb_capacity;
    }
    Ok(config)
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    File::create(path).map(BufWriter::new).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), RunError> {
    let io_err = |e: io::Error| RunError::Io(e.to_string());
    match out {
        Some(path) => {
            let mut file = create(path)?;
            file.write_all(text.as_bytes()).and_then(|_| file.flush()).map_err(io_err)
        }
        None => io::stdout().lock().write_all(text.as_bytes()).map_err(io_err),
    }
}

fn run(args: RunArgs) -> Result<(), RunError> {
    let mut policy = args.policy;
    if (args.prefetch.is_some() || args.tlb_opt.is_some()) && !policy.is_lazy() {
        return Err(RunError::Usage("--prefetch and --tlb-opt only apply to --policy lazy".into()));
    }
    if let Some(d) = args.prefetch {
        policy.prefetch_degree = d;
    }
    if let Some(switch) = args.tlb_opt {
        policy.tlb_filter = matches!(switch, Switch::On);
    }
    let mut config = base_config(&args.machine, &args.workload, policy)?;
    config.run_id = args.run_id;
    config.drop_invalidations = args.inject_missed_invalidations;
    let events = load_events(&config)?;

    let mut log = args.events.as_deref().map(create).transpose()?;
    let mut log_error = None;
    let mut write_summary = |s: &EventSummary| {
        if let (Some(w), None) = (log.as_mut(), &log_error) {
            let line = serde_json::to_string(s).expect("summaries serialize");
            if let Err(e) = writeln!(w, "{line}") {
                log_error = Some(e);
            }
        }
    };
    let result = run_events(&config, &events, Some(&mut write_summary));
    if let Some(e) = log_error {
        return Err(RunError::Io(e.to_string()));
    }
    if let Some(mut w) = log {
        w.flush().map_err(|e| RunError::Io(e.to_string()))?;
    }
    let outcome = result.inspect_err(|e| {
        if let RunError::Invariant(v) = e {
            let seq = events.get(v.event_index as usize).map_or(0, |ev| ev.seq);
            eprintln!("minimized counterexample: event index {} (seq {seq})", v.event_index);
        }
    })?;
    let csv = ptsim_core::metrics::report_csv(std::slice::from_ref(&outcome.record), None);
    emit(args.workload.out.as_deref(), &csv)
}

fn compare_cmd(args: CompareArgs) -> Result<(), RunError> {
    let config = base_config(&args.machine, &args.workload, args.policies[0])?;
    let (_, csv) = compare(&config, &args.policies)?;
    emit(args.workload.out.as_deref(), &csv)
}

fn gen(args: GenArgs) -> Result<(), RunError> {
    let spec = scenario_spec(&args.scenario, &args.params, args.seed)?;
    let events = gen_scenario(&spec, &topology(&args.machine)?)?;
    let io_err = |e: io::Error| RunError::Io(e.to_string());
    match args.out.as_deref() {
        Some(path) => {
            let mut file = create(path)?;
            write_trace(&mut file, &events).and_then(|_| file.flush()).map_err(io_err)
        }
        None => write_trace(io::stdout().lock(), &events).map_err(io_err),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare_cmd(args),
        Command::Gen(args) => gen(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
