//! Throughput experiment across backends and worker counts.
//!
//! Every cell (backend, workers, repetition) gets a fresh server on loopback,
//! fresh workers and an in-process generator. Rows come back in execution
//! order; cells whose server cannot start are skipped with a diagnostic.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::demand::NodeId;
use crate::node::{
    run_workload, shutdown_workers, ConfigError, Properties, Worker, WorkerOptions, Workload,
};
use crate::queue::{self, BrokerConfig, BrokerServer};
use crate::space::{self, SpaceServer, SpaceServerConfig};
use crate::transport::{
    connect_dispatcher, BackendRegistry, DemandDispatcher, Endpoint, TransportConfig,
};

pub const ROWS_FILE: &str = "rows.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ENVIRONMENT_FILE: &str = "environment.txt";

const SHUTDOWN_WAIT: Duration = Duration::from_secs(15);

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no rows to summarize")]
    Empty,
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> BenchError {
    let context = context.into();
    move |source| BenchError::Io { context, source }
}

/// How worker nodes are started for each cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WorkerLaunch {
    /// Child processes running `<exe> start-worker --config <file>`.
    Processes(PathBuf),
    /// Worker loops on threads of this process.
    Threads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub backends: Vec<String>,
    pub worker_counts: Vec<usize>,
    pub demands_total: usize,
    pub pi_digits: i64,
    pub repetitions: usize,
    pub warmup_demands: usize,
    pub generator_threads: usize,
    pub persistent: bool,
    pub deadline: Duration,
    /// Listen port per backend; 0 or absent picks a free port.
    pub ports: BTreeMap<String, u16>,
    pub launch: WorkerLaunch,
}

impl ExperimentSpec {
    pub fn new(backends: &[&str], worker_counts: &[usize], launch: WorkerLaunch) -> Self {
        ExperimentSpec {
            backends: backends.iter().map(|s| s.to_string()).collect(),
            worker_counts: worker_counts.to_vec(),
            demands_total: 200,
            pi_digits: 2000,
            repetitions: 3,
            warmup_demands: 20,
            generator_threads: 8,
            persistent: true,
            deadline: Duration::from_secs(60),
            ports: BTreeMap::new(),
            launch,
        }
    }

    /// Reads `bench.*` keys from a properties file. Unset keys keep the
    /// defaults of [`ExperimentSpec::new`].
    pub fn load(path: &Path, launch: WorkerLaunch) -> Result<Self, BenchError> {
        let props = Properties::load(path)?;
        let list = |key: &str| -> Option<Vec<String>> {
            props.get(key).map(|v| {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
        };
        let mut spec = ExperimentSpec::new(&["space", "queue"], &[1, 2, 4], launch);
        if let Some(b) = list("bench.backends") {
            spec.backends = b;
        }
        if let Some(w) = list("bench.worker_counts") {
            spec.worker_counts = w
                .iter()
                .map(|s| s.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| BenchError::Spec(format!("bench.worker_counts: {e}")))?;
        }
        if let Some(v) = props.parsed("bench.demands")? {
            spec.demands_total = v;
        }
        if let Some(v) = props.parsed("bench.pi_digits")? {
            spec.pi_digits = v;
        }
        if let Some(v) = props.parsed("bench.repetitions")? {
            spec.repetitions = v;
        }
        if let Some(v) = props.parsed("bench.warmup_demands")? {
            spec.warmup_demands = v;
        }
        if let Some(v) = props.parsed("bench.generator_threads")? {
            spec.generator_threads = v;
        }
        if let Some(v) = props.parsed("bench.persistent")? {
            spec.persistent = v;
        }
        if let Some(v) = props.parsed::<u64>("bench.deadline_ms")? {
            spec.deadline = Duration::from_millis(v);
        }
        for b in spec.backends.clone() {
            if let Some(p) = props.parsed(&format!("bench.{b}_port"))? {
                spec.ports.insert(b, p);
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let fail = |m: &str| Err(BenchError::Spec(m.to_string()));
        if self.backends.is_empty() {
            return fail("no backends");
        }
        if self.worker_counts.is_empty() || self.worker_counts.contains(&0) {
            return fail("worker counts must be a non-empty list of positive numbers");
        }
        if self.demands_total == 0 {
            return fail("demands must be positive");
        }
        if self.pi_digits < 1 {
            return fail("pi_digits must be positive");
        }
        if self.repetitions == 0 {
            return fail("repetitions must be at least 1");
        }
        if self.generator_threads == 0 {
            return fail("generator threads must be at least 1");
        }
        for b in &self.backends {
            if b != space::BACKEND_NAME && b != queue::BACKEND_NAME {
                return Err(BenchError::Spec(format!("no server for backend {b:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub backend: String,
    pub workers: usize,
    #[serde(rename = "rep")]
    pub repetition: usize,
    pub throughput_per_s: f64,
    #[serde(rename = "wall_ms")]
    pub wall_millis: u64,
    pub faults: u64,
    pub valid: bool,
    #[serde(skip)]
    pub demands_sent: u64,
    #[serde(skip)]
    pub missing: u64,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutcome {
    pub rows: Vec<ExperimentRow>,
    /// One line per skipped cell.
    pub diagnostics: Vec<String>,
}

enum Server {
    Space(SpaceServer),
    Queue {
        server: BrokerServer,
        _journal: tempfile::TempDir,
    },
}

impl Server {
    fn start(backend: &str, port: u16) -> io::Result<Server> {
        let listen = Endpoint::new("127.0.0.1", port);
        if backend == space::BACKEND_NAME {
            SpaceServer::start(SpaceServerConfig::new(listen))
                .map(Server::Space)
                .map_err(|e| io::Error::other(e.to_string()))
        } else {
            let dir = tempfile::tempdir()?;
            let mut config = BrokerConfig::new(listen);
            config.journal_path = Some(dir.path().to_path_buf());
            BrokerServer::start(config).map(|server| Server::Queue {
                server,
                _journal: dir,
            })
        }
    }

    fn endpoint(&self) -> Endpoint {
        match self {
            Server::Space(s) => s.endpoint(),
            Server::Queue { server, .. } => server.endpoint(),
        }
    }
}

/// Worker processes or threads of one cell. Dropping kills what is left.
enum Workers {
    Processes(Vec<Child>),
    Threads(Vec<thread::JoinHandle<()>>),
}

impl Workers {
    fn start(
        launch: &WorkerLaunch,
        count: usize,
        transport: &TransportConfig,
        dir: &Path,
    ) -> Result<Workers, BenchError> {
        match launch {
            WorkerLaunch::Processes(exe) => {
                let transport_file = dir.join("transport.conf");
                let mut text = format!(
                    "transport.backend={}\ntransport.endpoint={}\n",
                    transport.backend_name, transport.endpoint
                );
                for (k, v) in &transport.options {
                    text.push_str(&format!("{k}={v}\n"));
                }
                fs::write(&transport_file, text).map_err(io_err("writing transport config"))?;
                let mut children = Vec::with_capacity(count);
                for i in 0..count {
                    let conf = dir.join(format!("worker-{i}.conf"));
                    fs::write(
                        &conf,
                        format!("node.id=bench-worker-{i}\nnode.role=worker\nnode.transport.config=transport.conf\n"),
                    )
                    .map_err(io_err("writing worker config"))?;
                    let child = Command::new(exe)
                        .arg("start-worker")
                        .arg("--config")
                        .arg(&conf)
                        .stdin(Stdio::null())
                        .stdout(Stdio::null())
                        .spawn()
                        .map_err(io_err(format!("starting {}", exe.display())))?;
                    children.push(child);
                }
                Ok(Workers::Processes(children))
            }
            WorkerLaunch::Threads => {
                let mut handles = Vec::with_capacity(count);
                for i in 0..count {
                    let dispatcher = connect(transport)
                        .map_err(|e| BenchError::Spec(format!("worker cannot connect: {e}")))?;
                    let id = NodeId::new(format!("bench-worker-{i}")).expect("non-empty");
                    let worker = Worker::new(id, dispatcher, WorkerOptions::default());
                    handles.push(thread::spawn(move || {
                        if let Err(e) = worker.run() {
                            log::error!("bench worker failed: {e}");
                        }
                    }));
                }
                Ok(Workers::Threads(handles))
            }
        }
    }

    /// Waits for every worker to finish, killing stragglers after `wait`.
    fn finish(&mut self, wait: Duration) {
        let until = Instant::now() + wait;
        match self {
            Workers::Processes(children) => {
                for child in children.iter_mut() {
                    loop {
                        match child.try_wait() {
                            Ok(Some(_)) | Err(_) => break,
                            Ok(None) if Instant::now() >= until => {
                                log::warn!("killing worker process {}", child.id());
                                let _ = child.kill();
                                let _ = child.wait();
                                break;
                            }
                            Ok(None) => thread::sleep(Duration::from_millis(20)),
                        }
                    }
                }
                children.clear();
            }
            Workers::Threads(handles) => {
                for h in handles.drain(..) {
                    // Threads cannot be killed; a stuck one is left behind.
                    while !h.is_finished() && Instant::now() < until {
                        thread::sleep(Duration::from_millis(20));
                    }
                    if h.is_finished() {
                        let _ = h.join();
                    }
                }
            }
        }
    }
}

impl Drop for Workers {
    fn drop(&mut self) {
        if let Workers::Processes(children) = self {
            for c in children.iter_mut() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

fn connect(
    transport: &TransportConfig,
) -> Result<Arc<dyn DemandDispatcher>, crate::transport::TransportError> {
    connect_dispatcher(&BackendRegistry::with_builtin(), transport)
}

fn run_cell(
    spec: &ExperimentSpec,
    backend: &str,
    workers: usize,
    repetition: usize,
) -> Result<ExperimentRow, String> {
    let port = spec.ports.get(backend).copied().unwrap_or(0);
    let server = Server::start(backend, port)
        .map_err(|e| format!("{backend} server on port {port} did not start: {e}"))?;
    let transport = TransportConfig::new(backend, server.endpoint())
        .map_err(|e| e.to_string())?
        .with_option("queue.persistent", spec.persistent.to_string());
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut pool =
        Workers::start(&spec.launch, workers, &transport, dir.path()).map_err(|e| e.to_string())?;
    let dispatcher = connect(&transport).map_err(|e| e.to_string())?;
    let node_id =
        NodeId::new(format!("bench-{backend}-{workers}-{repetition}")).expect("non-empty");
    let mut workload = Workload {
        node_id: node_id.clone(),
        threads: spec.generator_threads,
        demands: spec.warmup_demands,
        pi_digits: spec.pi_digits,
        deadline: spec.deadline,
    };
    if spec.warmup_demands > 0 {
        run_workload(&dispatcher, &workload);
    }
    workload.demands = spec.demands_total;
    let report = run_workload(&dispatcher, &workload);
    let acked = shutdown_workers(dispatcher.as_ref(), &node_id, workers, SHUTDOWN_WAIT);
    if acked < workers {
        log::warn!("{acked} of {workers} workers acknowledged shutdown");
    }
    pool.finish(SHUTDOWN_WAIT);
    let _ = dispatcher.disconnect();
    drop(server);
    Ok(ExperimentRow {
        backend: backend.to_string(),
        workers,
        repetition,
        throughput_per_s: report.throughput_per_s,
        wall_millis: report.wall_millis,
        faults: report.faults,
        valid: report.is_complete(),
        demands_sent: report.demands_sent,
        missing: report.missing + report.undispatched,
    })
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome, BenchError> {
    spec.validate()?;
    let mut outcome = ExperimentOutcome::default();
    for backend in &spec.backends {
        for &workers in &spec.worker_counts {
            for rep in 1..=spec.repetitions {
                match run_cell(spec, backend, workers, rep) {
                    Ok(row) => {
                        log::info!(
                            "{backend} workers={workers} rep={rep}: {:.2}/s valid={}",
                            row.throughput_per_s,
                            row.valid
                        );
                        outcome.rows.push(row);
                    }
                    Err(diag) => {
                        log::error!("skipping {backend} workers={workers} rep={rep}: {diag}");
                        outcome
                            .diagnostics
                            .push(format!("{backend} workers={workers} rep={rep}: {diag}"));
                    }
                }
            }
        }
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryCell {
    pub backend: String,
    pub workers: usize,
    pub runs: usize,
    pub invalid: usize,
    pub median_throughput: Option<f64>,
    pub min_throughput: Option<f64>,
    pub max_throughput: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Environment {
    pub cpu_cores: usize,
    pub total_memory_kib: Option<u64>,
    pub os: String,
}

impl Environment {
    pub fn detect() -> Self {
        let cpu_cores = thread::available_parallelism().map_or(1, |n| n.get());
        let total_memory_kib = fs::read_to_string("/proc/meminfo").ok().and_then(|t| {
            t.lines()
                .find_map(|l| l.strip_prefix("MemTotal:"))
                .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
        });
        let mut os = fs::read_to_string("/etc/os-release")
            .ok()
            .and_then(|t| {
                t.lines()
                    .find_map(|l| l.strip_prefix("PRETTY_NAME="))
                    .map(|v| v.trim_matches('"').to_string())
            })
            .unwrap_or_else(|| std::env::consts::OS.to_string());
        if let Ok(kernel) = fs::read_to_string("/proc/sys/kernel/osrelease") {
            os = format!("{os} (kernel {})", kernel.trim());
        }
        Environment {
            cpu_cores,
            total_memory_kib,
            os,
        }
    }
}

impl fmt::Display for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cpu_cores: {}", self.cpu_cores)?;
        match self.total_memory_kib {
            Some(kib) => writeln!(f, "total_memory: {} MiB", kib / 1024)?,
            None => writeln!(f, "total_memory: unknown")?,
        }
        writeln!(f, "os: {}", self.os)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub cells: Vec<SummaryCell>,
    pub environment: Environment,
}

impl Summary {
    pub fn cell(&self, backend: &str, workers: usize) -> Option<&SummaryCell> {
        self.cells
            .iter()
            .find(|c| c.backend == backend && c.workers == workers)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// Order statistics per (backend, workers) over valid rows, cells in order of
/// first appearance.
pub fn summarize(rows: &[ExperimentRow]) -> Result<Summary, BenchError> {
    if rows.is_empty() {
        return Err(BenchError::Empty);
    }
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, usize), Vec<&ExperimentRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.backend.clone(), r.workers);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let cells = order
        .into_iter()
        .map(|key| {
            let group = &groups[&key];
            let valid: Vec<f64> = group
                .iter()
                .filter(|r| r.valid)
                .map(|r| r.throughput_per_s)
                .collect();
            SummaryCell {
                backend: key.0,
                workers: key.1,
                runs: group.len(),
                invalid: group.len() - valid.len(),
                median_throughput: median(&valid),
                min_throughput: valid.iter().copied().reduce(f64::min),
                max_throughput: valid.iter().copied().reduce(f64::max),
            }
        })
        .collect();
    Ok(Summary {
        cells,
        environment: Environment::detect(),
    })
}

pub fn write_rows(w: impl Write, rows: &[ExperimentRow]) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| BenchError::Io {
            context: "writing rows".into(),
            source: e.into(),
        })?;
    }
    out.flush().map_err(io_err("writing rows"))
}

pub fn write_summary(w: impl Write, summary: &Summary) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "backend",
        "workers",
        "runs",
        "invalid",
        "median_throughput_per_s",
        "min_throughput_per_s",
        "max_throughput_per_s",
    ])
    .map_err(|e| BenchError::Io {
        context: "writing summary".into(),
        source: e.into(),
    })?;
    let num = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
    for c in &summary.cells {
        out.write_record([
            c.backend.clone(),
            c.workers.to_string(),
            c.runs.to_string(),
            c.invalid.to_string(),
            num(c.median_throughput),
            num(c.min_throughput),
            num(c.max_throughput),
        ])
        .map_err(|e| BenchError::Io {
            context: "writing summary".into(),
            source: e.into(),
        })?;
    }
    out.flush().map_err(io_err("writing summary"))
}

/// Writes `rows.csv`, `summary.csv` and `environment.txt` into `dir`.
pub fn write_outputs(
    dir: &Path,
    outcome: &ExperimentOutcome,
) -> Result<Option<Summary>, BenchError> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let create = |name: &str| {
        let p = dir.join(name);
        fs::File::create(&p).map_err(io_err(format!("creating {}", p.display())))
    };
    write_rows(create(ROWS_FILE)?, &outcome.rows)?;
    let summary = match summarize(&outcome.rows) {
        Ok(s) => s,
        Err(BenchError::Empty) => return Ok(None),
        Err(e) => return Err(e),
    };
    write_summary(create(SUMMARY_FILE)?, &summary)?;
    let mut env = create(ENVIRONMENT_FILE)?;
    write!(env, "{}", summary.environment).map_err(io_err("writing environment"))?;
    for d in &outcome.diagnostics {
        writeln!(env, "skipped: {d}").map_err(io_err("writing environment"))?;
    }
    Ok(Some(summary))
}
