//! `qkdchain`: testbed runner, standalone agent and controller, operator
//! client and trace decoder.
//!
//! Exit codes: 0 success, 1 other error, 2 usage, 3 invalid scenario,
//! 4 boot failure, 5 orchestration failure, 6 invariant violation,
//! 7 corrupt capture.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use qkdchain::agent::{run_agent, AgentConfig, NodeAgent};
use qkdchain::controller::Controller;
use qkdchain::harness::{self, AgentMode, HarnessError, Testbed, TestbedOptions};
use qkdchain::northbound::{serve_northbound, NorthboundRequestDoc, OperatorClient, ResponseStatus};
use qkdchain::scenario::{default_scenario_path, Scenario};
use qkdchain::southbound::{EventLog, Southbound, SouthboundOptions};
use qkdchain::trace::{self, TraceSink};
use tokio::sync::watch;
use tracing_subscriber::EnvFilter;

const EXIT_OTHER: u8 = 1;
const EXIT_SCENARIO: u8 = 3;
const EXIT_BOOT: u8 = 4;
const EXIT_ORCHESTRATION: u8 = 5;
const EXIT_INVARIANT: u8 = 6;
const EXIT_CORRUPT: u8 = 7;

#[derive(Debug, Parser)]
#[command(name = "qkdchain", version, about = "SDN-orchestrated heterogeneous QKD chain testbed")]
struct Cli {
    /// More log output (-v info, -vv debug with message hex dumps).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Demo,
    Single,
    Soak,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Boot controller, agents and northbound API from a scenario and run an
    /// experiment.
    Testbed {
        #[arg(long, default_value_os_t = default_scenario_path())]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Demo)]
        mode: Mode,
        #[arg(long, default_value_t = 2)]
        source: u32,
        #[arg(long, default_value_t = 3)]
        dest: u32,
        #[arg(long, default_value_t = 10.0)]
        rate: f64,
        #[arg(long, default_value = "BB84+TF")]
        protocol: String,
        /// Write the southbound capture here (plus a `.txt` sidecar).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Per-message agent processing latency; defaults to the scenario's.
        #[arg(long)]
        agent_latency_ms: Option<u64>,
        /// Run agents as tasks in this process instead of child processes.
        #[arg(long)]
        in_process: bool,
        /// Listen on ephemeral loopback ports instead of the scenario's.
        #[arg(long)]
        ephemeral_ports: bool,
        /// Demo repetitions.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        /// Soak cycles.
        #[arg(long, default_value_t = 100)]
        cycles: usize,
    },
    /// Run one node agent.
    Agent {
        #[arg(long, default_value_os_t = default_scenario_path())]
        scenario: PathBuf,
        #[arg(long)]
        node: u32,
        /// Controller address; defaults to the scenario's.
        #[arg(long)]
        controller: Option<SocketAddr>,
        #[arg(long)]
        agent_latency_ms: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the controller and northbound API, waiting for external agents.
    Controller {
        #[arg(long, default_value_os_t = default_scenario_path())]
        scenario: PathBuf,
        #[arg(long)]
        southbound: Option<SocketAddr>,
        #[arg(long)]
        northbound: Option<SocketAddr>,
        #[arg(long)]
        response_timeout_ms: Option<u64>,
        /// How long to wait for all agents to report.
        #[arg(long, default_value_t = 30)]
        boot_timeout_s: u64,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Submit one chain request to a running northbound API.
    Submit {
        #[arg(long, default_value = "http://127.0.0.1:8181")]
        url: String,
        #[arg(long)]
        source: u32,
        #[arg(long)]
        dest: u32,
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        protocol: String,
    },
    /// Decode a southbound capture.
    DumpTrace { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .with_writer(std::io::stderr)
        .init();

    if let Cmd::DumpTrace { path } = &cli.command {
        return dump_trace(path);
    }
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(EXIT_OTHER);
        }
    };
    rt.block_on(async move {
        match cli.command {
            Cmd::Testbed {
                scenario,
                mode,
                source,
                dest,
                rate,
                protocol,
                trace,
                seed,
                agent_latency_ms,
                in_process,
                ephemeral_ports,
                repeat,
                cycles,
            } => {
                let Some(sc) = load_scenario(&scenario) else { return ExitCode::from(EXIT_SCENARIO) };
                let mut opts = TestbedOptions::in_process(sc.clone());
                opts.seed = seed;
                if let Some(ms) = agent_latency_ms {
                    opts.agent_latency = Duration::from_millis(ms);
                }
                if !ephemeral_ports {
                    opts.southbound_addr = sc.controller.southbound;
                    opts.northbound_addr = sc.controller.northbound;
                }
                if !in_process {
                    let program = match std::env::current_exe() {
                        Ok(p) => p,
                        Err(e) => {
                            eprintln!("error: cannot locate own executable: {e}");
                            return ExitCode::from(EXIT_BOOT);
                        }
                    };
                    opts.agent_mode = AgentMode::Subprocess {
                        program,
                        scenario_path: scenario.clone(),
                        verbose: cli.verbose > 0,
                    };
                }
                let run = RunArgs { mode, source, dest, rate, protocol, repeat, cycles };
                run_testbed(opts, run, trace.as_deref()).await
            }
            Cmd::Agent { scenario, node, controller, agent_latency_ms, seed } => {
                let Some(sc) = load_scenario(&scenario) else { return ExitCode::from(EXIT_SCENARIO) };
                let latency = agent_latency_ms.map(Duration::from_millis).unwrap_or_else(|| sc.agent_latency());
                let addr = controller.unwrap_or(sc.controller.southbound);
                let cfg = match AgentConfig::from_scenario(&sc, node, addr, latency, seed) {
                    Ok(c) => c,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(EXIT_SCENARIO);
                    }
                };
                let state = Arc::new(Mutex::new(NodeAgent::new(&cfg)));
                let (_tx, rx) = watch::channel(false);
                match run_agent(cfg, state, rx).await {
                    Ok(()) => ExitCode::SUCCESS,
                    Err(e) => {
                        eprintln!("error: {e}");
                        ExitCode::from(EXIT_BOOT)
                    }
                }
            }
            Cmd::Controller { scenario, southbound, northbound, response_timeout_ms, boot_timeout_s, trace } => {
                let Some(sc) = load_scenario(&scenario) else { return ExitCode::from(EXIT_SCENARIO) };
                run_controller(
                    &sc,
                    southbound.unwrap_or(sc.controller.southbound),
                    northbound.unwrap_or(sc.controller.northbound),
                    response_timeout_ms.map(Duration::from_millis).unwrap_or_else(|| sc.response_timeout()),
                    Duration::from_secs(boot_timeout_s),
                    trace.as_deref(),
                )
                .await
            }
            Cmd::Submit { url, source, dest, rate, protocol } => {
                let doc = NorthboundRequestDoc { source, destination: dest, required_rate_kbps: rate, protocol };
                submit(&url, &doc).await
            }
            Cmd::DumpTrace { .. } => unreachable!("handled above"),
        }
    })
}

fn load_scenario(path: &Path) -> Option<Scenario> {
    match Scenario::load(path) {
        Ok(s) => Some(s),
        Err(e) => {
            eprintln!("error: scenario {}: {e}", path.display());
            None
        }
    }
}

struct RunArgs {
    mode: Mode,
    source: u32,
    dest: u32,
    rate: f64,
    protocol: String,
    repeat: usize,
    cycles: usize,
}

async fn run_testbed(opts: TestbedOptions, run: RunArgs, trace_path: Option<&Path>) -> ExitCode {
    let tb = match Testbed::boot(opts).await {
        Ok(tb) => tb,
        Err(e) => {
            eprintln!("error: boot failure: {e}");
            return ExitCode::from(EXIT_BOOT);
        }
    };
    println!("northbound API at {}/qkd-chains", tb.base_url());
    let code = match run.mode {
        Mode::Demo => demo(&tb, run.repeat.max(1)).await,
        Mode::Single => single(&tb, &run).await,
        Mode::Soak => match harness::run_soak(&tb, run.cycles).await {
            Ok(r) if r.violations.is_empty() => {
                println!("soak: {} establish/release cycles, resource view restored after each", r.cycles);
                ExitCode::SUCCESS
            }
            Ok(r) => {
                for v in &r.violations {
                    eprintln!("invariant violated: {v}");
                }
                ExitCode::from(EXIT_INVARIANT)
            }
            Err(e) => harness_failure(&e),
        },
    };
    if let Some(path) = trace_path {
        match tb.trace.write(path) {
            Ok(sidecar) => println!("trace written to {} ({})", path.display(), sidecar.display()),
            Err(e) => eprintln!("warning: cannot write trace {}: {e}", path.display()),
        }
    }
    tb.shutdown().await;
    code
}

fn harness_failure(e: &HarnessError) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        HarnessError::Orchestration(_) | HarnessError::Controller(_) => ExitCode::from(EXIT_ORCHESTRATION),
        HarnessError::KeyRelay(_) => ExitCode::from(EXIT_INVARIANT),
        HarnessError::Submit(_) => ExitCode::from(EXIT_OTHER),
    }
}

async fn demo(tb: &Testbed, repeat: usize) -> ExitCode {
    let mut faster = 0;
    let mut last = None;
    for i in 0..repeat {
        let report = match harness::run_demo(tb).await {
            Ok(r) => r,
            Err(e) => return harness_failure(&e),
        };
        let violations = report.violations();
        if !violations.is_empty() {
            for v in &violations {
                eprintln!("invariant violated (run {i}): {v}");
            }
            return ExitCode::from(EXIT_INVARIANT);
        }
        if report.heterogeneous.delay_ms < report.conventional.delay_ms {
            faster += 1;
        }
        last = Some(report);
    }
    let report = last.expect("at least one run");
    println!("{}", report.table());
    for run in [&report.conventional, &report.heterogeneous] {
        let path: Vec<String> = run.record.physical_path.iter().map(|n| n.to_string()).collect();
        println!("{}: chain {} along {}", run.label, run.record.chain_id, path.join(" -> "));
        print!("{}", indent(&run.custody.to_text()));
    }
    if repeat > 1 {
        println!("heterogeneous faster than conventional in {faster} of {repeat} runs");
    }
    ExitCode::SUCCESS
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("  {l}\n")).collect()
}

async fn single(tb: &Testbed, run: &RunArgs) -> ExitCode {
    let doc = NorthboundRequestDoc {
        source: run.source,
        destination: run.dest,
        required_rate_kbps: run.rate,
        protocol: run.protocol.clone(),
    };
    match harness::run_chain(tb, "single", doc).await {
        Ok(r) if r.violations.is_empty() => {
            println!("{}", serde_json::to_string_pretty(&r.response).expect("serializable"));
            println!("control delay {:.2} ms", r.delay_ms);
            ExitCode::SUCCESS
        }
        Ok(r) => {
            for v in &r.violations {
                eprintln!("invariant violated: {v}");
            }
            ExitCode::from(EXIT_INVARIANT)
        }
        Err(HarnessError::Submit(e)) if e.error_doc().is_some() => {
            let d = e.error_doc().expect("checked");
            eprintln!("error: request rejected: {}: {}", d.error, d.reason);
            ExitCode::from(EXIT_ORCHESTRATION)
        }
        Err(e) => harness_failure(&e),
    }
}

async fn run_controller(
    sc: &Scenario,
    southbound: SocketAddr,
    northbound: SocketAddr,
    response_timeout: Duration,
    boot_timeout: Duration,
    trace_path: Option<&Path>,
) -> ExitCode {
    let trace = TraceSink::default();
    let sb = match Southbound::bind(southbound, SouthboundOptions::default(), EventLog::default(), trace.clone()).await {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: cannot listen on {southbound}: {e}");
            return ExitCode::from(EXIT_BOOT);
        }
    };
    let controller = match Controller::initialize(sb.registry.clone(), sc, boot_timeout, response_timeout).await {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_BOOT);
        }
    };
    let topology = Arc::new(controller.physical().clone());
    let (handle, task) = controller.spawn();
    let nb = match serve_northbound(handle.clone(), topology, northbound).await {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: cannot listen on {northbound}: {e}");
            return ExitCode::from(EXIT_BOOT);
        }
    };
    println!("controller ready; northbound API at {}/qkd-chains", nb.base_url());
    let _ = tokio::signal::ctrl_c().await;
    nb.shutdown().await;
    drop(handle);
    let _ = task.await;
    sb.shutdown();
    if let Some(p) = trace_path {
        if let Err(e) = trace.write(p) {
            eprintln!("warning: cannot write trace {}: {e}", p.display());
        }
    }
    ExitCode::SUCCESS
}

async fn submit(url: &str, doc: &NorthboundRequestDoc) -> ExitCode {
    let client = match OperatorClient::new(url) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_OTHER);
        }
    };
    match client.submit(doc).await {
        Ok((resp, delay)) => {
            println!("{}", serde_json::to_string_pretty(&resp).expect("serializable"));
            println!("control delay {delay:.2} ms");
            if resp.status == ResponseStatus::Established {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_ORCHESTRATION)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.error_doc().is_some() { EXIT_ORCHESTRATION } else { EXIT_OTHER })
        }
    }
}

fn dump_trace(path: &Path) -> ExitCode {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return ExitCode::from(EXIT_OTHER);
        }
    };
    let dump = trace::parse_records(&bytes);
    print!("{}", trace::render(&dump));
    if dump.corrupt_tail.is_some() {
        ExitCode::from(EXIT_CORRUPT)
    } else {
        ExitCode::SUCCESS
    }
}
