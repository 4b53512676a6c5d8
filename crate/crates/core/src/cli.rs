//! The `dmf` command line: one subcommand per process role.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, BenchError, ExperimentSpec, WorkerLaunch};
use crate::demand::NodeId;
use crate::node::{
    self, load_node_config, load_transport_config, run_workload, shutdown_workers, ConfigError,
    NodeConfig, NodeError, Role, Worker, WorkerOptions, Workload, WorkloadReport, REPORT_HEADER,
};
use crate::queue::{self, BrokerConfig, BrokerServer};
use crate::space::{self, SpaceServer, SpaceServerConfig};
use crate::transport::{
    connect_dispatcher, BackendRegistry, Endpoint, TransportConfig, TransportError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INCOMPLETE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;

/// Environment variable holding the log level.
pub const LOG_ENV: &str = "DMF_LOG";

#[derive(Parser, Debug)]
#[command(
    name = "dmf",
    version,
    about = "Demand migration over a tuple space or a message broker"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Configuration file.
    #[arg(value_name = "CONFIG")]
    path: Option<PathBuf>,
    #[arg(long = "config", value_name = "PATH", conflicts_with = "path")]
    config: Option<PathBuf>,
    /// Overrides the port of the configured endpoint.
    #[arg(long)]
    port: Option<u16>,
    /// Overrides `transport.backend`.
    #[arg(long)]
    backend: Option<String>,
}

impl ConfigArgs {
    fn path(&self) -> Result<&Path, Failure> {
        self.config
            .as_deref()
            .or(self.path.as_deref())
            .ok_or_else(|| Failure::config("a configuration file is required (--config <path>)"))
    }

    fn apply(&self, transport: &mut TransportConfig) {
        if let Some(port) = self.port {
            transport.endpoint = transport.endpoint.with_port(port);
        }
        if let Some(b) = &self.backend {
            transport.backend_name = b.clone();
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Runs a tuple-space server configured by a transport file.
    StartSpace(ConfigArgs),
    /// Runs a message broker configured by a transport file.
    StartBroker(ConfigArgs),
    /// Runs a worker node until it receives a shutdown demand.
    StartWorker(ConfigArgs),
    /// Runs a generator node and prints its report line.
    StartGenerator {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also append the report line to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the throughput experiment described by a `bench.*` file.
    Bench {
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        /// Output directory for rows.csv, summary.csv and environment.txt.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Starts an in-process server, two workers and a small generator run.
    Demo {
        #[arg(value_name = "BACKEND", required_unless_present = "backend")]
        name: Option<String>,
        #[arg(long, conflicts_with = "name")]
        backend: Option<String>,
    },
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn transport(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_TRANSPORT,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e.to_string())
    }
}

impl From<TransportError> for Failure {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Config(_) | TransportError::UnknownBackend(_) => {
                Failure::config(e.to_string())
            }
            _ => Failure::transport(e.to_string()),
        }
    }
}

impl From<NodeError> for Failure {
    fn from(e: NodeError) -> Self {
        match e {
            NodeError::Config(e) => e.into(),
            NodeError::Transport(e) => e.into(),
            NodeError::WrongRole { .. } => Failure::config(e.to_string()),
            NodeError::Output { .. } => Failure {
                code: EXIT_INCOMPLETE,
                message: e.to_string(),
            },
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Spec(_) | BenchError::Config(_) => Failure::config(e.to_string()),
            BenchError::Empty | BenchError::Io { .. } => Failure {
                code: EXIT_INCOMPLETE,
                message: e.to_string(),
            },
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp_millis()
        .try_init();
}

/// Raises the returned flag on interrupt or terminate.
fn stop_on_signal() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        if flag.swap(true, Ordering::SeqCst) {
            std::process::exit(EXIT_INCOMPLETE);
        }
    }) {
        log::warn!("cannot install signal handler: {e}");
    }
    stop
}

fn wait_for(stop: &AtomicBool) {
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(100));
    }
}

fn transport_file(args: &ConfigArgs) -> Result<TransportConfig, Failure> {
    let mut t = load_transport_config(args.path()?)?;
    args.apply(&mut t);
    Ok(t)
}

fn node_file(args: &ConfigArgs) -> Result<NodeConfig, Failure> {
    let mut n = load_node_config(args.path()?)?;
    args.apply(&mut n.transport);
    Ok(n)
}

fn start_space(args: &ConfigArgs) -> Result<i32, Failure> {
    let t = transport_file(args)?;
    let config = SpaceServerConfig::from_transport(&t)?;
    let stop = stop_on_signal();
    let mut server = SpaceServer::start(config).map_err(|e| Failure::transport(e.to_string()))?;
    println!("space listening on {}", server.local_addr());
    wait_for(&stop);
    server.shutdown().map_err(|e| Failure {
        code: EXIT_INCOMPLETE,
        message: format!("final snapshot failed: {e}"),
    })?;
    Ok(EXIT_OK)
}

fn start_broker(args: &ConfigArgs) -> Result<i32, Failure> {
    let t = transport_file(args)?;
    let config = BrokerConfig::from_transport(&t)?;
    let stop = stop_on_signal();
    let mut server = BrokerServer::start(config).map_err(|e| Failure::transport(e.to_string()))?;
    let report = server.recovery_report();
    println!(
        "broker listening on {} (restored {} messages)",
        server.local_addr(),
        report.restored
    );
    wait_for(&stop);
    server.shutdown();
    Ok(EXIT_OK)
}

fn start_worker(args: &ConfigArgs) -> Result<i32, Failure> {
    let config = node_file(args)?;
    let worker = node::worker_from_config(&config)?;
    let stop = stop_on_signal();
    let flag = worker.stop_flag();
    thread::spawn(move || {
        wait_for(&stop);
        flag.store(true, Ordering::SeqCst);
    });
    let exit = worker.run().map_err(Failure::from)?;
    log::info!("worker {} finished: {exit:?}", config.node_id);
    Ok(EXIT_OK)
}

fn append_report(path: &Path, report: &WorkloadReport) -> io::Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{REPORT_HEADER}")?;
    }
    writeln!(f, "{}", report.csv_row())
}

fn finish_report(report: &WorkloadReport) -> i32 {
    if report.is_complete() {
        EXIT_OK
    } else {
        eprintln!(
            "incomplete: sent {} received {} faults {} missing {} undispatched {}",
            report.demands_sent,
            report.results_received,
            report.faults,
            report.missing,
            report.undispatched
        );
        EXIT_INCOMPLETE
    }
}

fn start_generator(args: &ConfigArgs, out: Option<&Path>) -> Result<i32, Failure> {
    let config = node_file(args)?;
    if !matches!(config.role, Role::Generator(_)) {
        return Err(Failure::config(format!(
            "{}: node.role is not generator",
            args.path()?.display()
        )));
    }
    let report = node::run_generator(&config)?;
    println!("{}", report.csv_row());
    if let Some(path) = out {
        append_report(path, &report).map_err(|e| Failure {
            code: EXIT_INCOMPLETE,
            message: format!("{}: {e}", path.display()),
        })?;
    }
    Ok(finish_report(&report))
}

fn run_bench(config: Option<&Path>, out: &Path) -> Result<i32, Failure> {
    let exe = std::env::current_exe()
        .map_err(|e| Failure::config(format!("cannot locate the dmf executable: {e}")))?;
    let launch = WorkerLaunch::Processes(exe);
    let spec = match config {
        Some(p) => ExperimentSpec::load(p, launch)?,
        None => ExperimentSpec::new(&["space", "queue"], &[1, 2, 4], launch),
    };
    let outcome = bench::run_experiment(&spec)?;
    for d in &outcome.diagnostics {
        eprintln!("skipped {d}");
    }
    let summary = bench::write_outputs(out, &outcome)?;
    if let Some(s) = &summary {
        for c in &s.cells {
            println!(
                "{} workers={} median={} invalid={}",
                c.backend,
                c.workers,
                c.median_throughput
                    .map_or("-".to_string(), |m| format!("{m:.2}/s")),
                c.invalid
            );
        }
    }
    let all_valid = outcome.rows.iter().all(|r| r.valid);
    Ok(
        if all_valid && outcome.diagnostics.is_empty() && !outcome.rows.is_empty() {
            EXIT_OK
        } else {
            EXIT_INCOMPLETE
        },
    )
}

pub const DEMO_WORKERS: usize = 2;
pub const DEMO_DEMANDS: usize = 50;
pub const DEMO_DIGITS: i64 = 100;

enum DemoServer {
    Space(SpaceServer),
    Queue(BrokerServer),
}

/// Runs the demo workload against `backend` and returns the report.
pub fn demo(backend: &str) -> Result<WorkloadReport, String> {
    let listen = Endpoint::localhost(0);
    let server = if backend == space::BACKEND_NAME {
        DemoServer::Space(
            SpaceServer::start(SpaceServerConfig::new(listen)).map_err(|e| e.to_string())?,
        )
    } else if backend == queue::BACKEND_NAME {
        DemoServer::Queue(
            BrokerServer::start(BrokerConfig::new(listen)).map_err(|e| e.to_string())?,
        )
    } else {
        return Err(format!("unknown backend {backend:?}"));
    };
    let endpoint = match &server {
        DemoServer::Space(s) => s.endpoint(),
        DemoServer::Queue(s) => s.endpoint(),
    };
    let transport = TransportConfig::new(backend, endpoint)
        .map_err(|e| e.to_string())?
        .with_option("queue.persistent", "false");
    let registry = BackendRegistry::with_builtin();
    let connect = || connect_dispatcher(&registry, &transport).map_err(|e| e.to_string());

    let mut workers = Vec::new();
    for i in 0..DEMO_WORKERS {
        let worker = Worker::new(
            NodeId::new(format!("demo-worker-{i}")).expect("non-empty"),
            connect()?,
            WorkerOptions::default(),
        );
        workers.push(thread::spawn(move || worker.run()));
    }
    let generator = connect()?;
    let origin = NodeId::new("demo-generator").expect("non-empty");
    let mut report = run_workload(
        &generator,
        &Workload {
            node_id: origin.clone(),
            threads: 4,
            demands: DEMO_DEMANDS,
            pi_digits: DEMO_DIGITS,
            deadline: Duration::from_secs(20),
        },
    );
    report.backend = backend.to_string();
    report.workers = DEMO_WORKERS;
    shutdown_workers(
        generator.as_ref(),
        &origin,
        DEMO_WORKERS,
        Duration::from_secs(5),
    );
    for w in workers {
        match w.join() {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => log::warn!("demo worker: {e}"),
            Err(_) => log::warn!("demo worker panicked"),
        }
    }
    let _ = generator.disconnect();
    drop(server);
    Ok(report)
}

fn run_demo(backend: &str) -> Result<i32, Failure> {
    if backend != space::BACKEND_NAME && backend != queue::BACKEND_NAME {
        return Err(Failure::config(format!(
            "unknown backend {backend:?}; expected {} or {}",
            space::BACKEND_NAME,
            queue::BACKEND_NAME
        )));
    }
    let report = demo(backend).map_err(Failure::transport)?;
    println!("{REPORT_HEADER}");
    println!("{}", report.csv_row());
    println!(
        "sent {} received {} faults {}",
        report.demands_sent, report.results_received, report.faults
    );
    Ok(finish_report(&report))
}

/// Parses `args` and runs the subcommand. Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    init_logging();
    let outcome = match &cli.command {
        Command::StartSpace(a) => start_space(a),
        Command::StartBroker(a) => start_broker(a),
        Command::StartWorker(a) => start_worker(a),
        Command::StartGenerator { config, out } => start_generator(config, out.as_deref()),
        Command::Bench { config, out } => run_bench(config.as_deref(), out),
        Command::Demo { name, backend } => {
            run_demo(name.as_deref().or(backend.as_deref()).unwrap_or_default())
        }
    };
    match outcome {
        Ok(code) => code,
        Err(f) => {
            eprintln!("dmf: {}", f.message);
            f.code
        }
    }
}
