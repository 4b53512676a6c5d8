//! One PASS/FAIL/SKIP line per acceptance criterion. Runs without the libtest
//! harness; exits nonzero when any criterion fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use common::procs::{self, ServerProc};
use common::{pi_demand, spawn_workers, spigot_pi, Server};
use dmf::bench::{self, ExperimentSpec, WorkerLaunch};
use dmf::demand::{Demand, DemandKind, NodeId};
use dmf::node::pi::pi_digits;
use dmf::node::shutdown_workers;
use dmf::queue::{QueueAgent, QueueName};
use dmf::space::{EntryTemplate, SpaceAgent, SpaceServer, SpaceServerConfig};
use dmf::transport::{Endpoint, TransportAgent, TransportConfig, TransportError};
use dmf::wire::WireClient;
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, TestRunner};
use serde_json::json;

const INTERCHANGE_DEMANDS: usize = 1_000;
const INTERCHANGE_DIGITS: i64 = 500;
const INTERCHANGE_LIMIT: Duration = Duration::from_secs(120);
const EXACTLY_ONCE_WORKERS: usize = 8;
const EXACTLY_ONCE_DEMANDS: usize = 500;
const EXACTLY_ONCE_RUNS: usize = 10;
const CODEC_CASES: u32 = 10_000;
const PI_ORACLE_N: [usize; 5] = [1, 5, 50, 500, 2000];
const SPACE_CAPACITY: usize = 100;
const STORM_THREADS: usize = 16;
const SPILL_THRESHOLD: usize = 100;
const SPILL_DEMANDS: usize = 10_000;
const RECOVERY_SENT: usize = 100;
const RECOVERY_ACKED: usize = 40;
const SNAPSHOT_ENTRIES: usize = 100;
const SCALING_MIN_CPUS: usize = 4;
const SCALING_RATIO: f64 = 1.5;
const DEMO_LIMIT: Duration = Duration::from_secs(30);

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Outcome = Result<Verdict, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn pass(detail: impl Into<String>) -> Outcome {
    Ok(Verdict::Pass(detail.into()))
}

fn check(ok: bool, detail: String) -> Outcome {
    Ok(if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    })
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn interchangeable() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .and_then(|l| l.local_addr())
        .map_err(err)?
        .port();
    let journal = dir.path().join("journal");
    let transport = dir.path().join("transport.conf");
    let results = dir.path().join("results.txt");
    let gen_conf = procs::write(
        dir.path(),
        "generator.conf",
        &format!(
            "node.id=gen\nnode.role=generator\nnode.transport.config=transport.conf\n\
             generator.threads=8\ngenerator.demands={INTERCHANGE_DEMANDS}\n\
             generator.pi_digits={INTERCHANGE_DIGITS}\ngenerator.workers=4\n\
             generator.results_path=results.txt\n"
        ),
    );
    let workers: Vec<_> = (0..4)
        .map(|i| {
            procs::write(
                dir.path(),
                &format!("w{i}.conf"),
                &format!("node.id=w{i}\nnode.role=worker\nnode.transport.config=transport.conf\n"),
            )
        })
        .collect();

    let mut multisets = BTreeMap::new();
    let mut notes = Vec::new();
    for (backend, subcommand) in [("space", "start-space"), ("queue", "start-broker")] {
        fs::write(
            &transport,
            format!(
                "transport.backend={backend}\ntransport.endpoint=127.0.0.1:{port}\n\
                 space.capacity=100000\nqueue.journal_path={}\nqueue.fsync=false\n",
                journal.display()
            ),
        )
        .map_err(err)?;
        let started = Instant::now();
        let server = ServerProc::start(subcommand, &transport);
        let children: Vec<_> = workers.iter().map(|w| procs::spawn_worker(w)).collect();
        let (out, _) = procs::run_with_limit(
            procs::dmf(&["start-generator", "--config", gen_conf.to_str().unwrap()]),
            INTERCHANGE_LIMIT,
        );
        let ctl = common::dispatcher(
            &TransportConfig::new(backend, Endpoint::new("127.0.0.1", port)).map_err(err)?,
        );
        shutdown_workers(
            ctl.as_ref(),
            &NodeId::new("ctl").unwrap(),
            4,
            Duration::from_secs(10),
        );
        let _ = ctl.disconnect();
        procs::reap(children, Duration::from_secs(10));
        server.terminate();
        let elapsed = started.elapsed();

        let out = out.ok_or(format!(
            "{backend}: generator exceeded {INTERCHANGE_LIMIT:?}"
        ))?;
        let row = String::from_utf8_lossy(&out.stdout).trim().to_string();
        let fields: Vec<&str> = row.split(',').collect();
        let (received, faults) = (fields.get(5).copied(), fields.get(6).copied());
        let expected = INTERCHANGE_DEMANDS.to_string();
        if received != Some(expected.as_str()) || faults != Some("0") || !out.status.success() {
            return check(false, format!("{backend}: report {row:?}"));
        }
        let mut lines: Vec<String> = fs::read_to_string(&results)
            .map_err(err)?
            .lines()
            .map(str::to_string)
            .collect();
        lines.sort();
        multisets.insert(backend, lines);
        notes.push(format!("{backend} {:.1}s", elapsed.as_secs_f64()));
        if elapsed > INTERCHANGE_LIMIT {
            return check(false, format!("{backend} took {elapsed:?}"));
        }
    }
    let oracle = spigot_pi(INTERCHANGE_DIGITS as usize);
    let same = multisets["space"] == multisets["queue"];
    let right = multisets["space"].iter().all(|r| *r == oracle);
    check(
        same && right && multisets["space"].len() == INTERCHANGE_DEMANDS,
        format!(
            "received {INTERCHANGE_DEMANDS} on both, multisets identical={same}, digits correct={right}, {}",
            notes.join(", ")
        ),
    )
}

fn exactly_once() -> Outcome {
    for backend in ["space", "queue"] {
        let server = Server::start(backend);
        let transport = server.transport();
        let workers = spawn_workers(EXACTLY_ONCE_WORKERS, &transport, Duration::from_millis(200));
        let gen = common::dispatcher(&transport);
        for run in 1..=EXACTLY_ONCE_RUNS {
            let demands: Vec<Demand> = (0..EXACTLY_ONCE_DEMANDS)
                .map(|i| pi_demand("gen", 1 + (i % 30) as i64))
                .collect();
            for d in &demands {
                gen.dispatch(d).map_err(err)?;
            }
            let mut computed = Vec::with_capacity(demands.len());
            for d in &demands {
                match gen
                    .obtain_result(d.signature(), Duration::from_secs(30))
                    .map_err(err)?
                {
                    Some(r) => computed.push(r.id()),
                    None => return check(false, format!("{backend} run {run}: lost {}", d.id())),
                }
            }
            let unique: HashSet<_> = computed.iter().copied().collect();
            let sent: HashSet<_> = demands.iter().map(|d| d.id()).collect();
            if unique.len() != computed.len() || unique != sent {
                return check(
                    false,
                    format!(
                        "{backend} run {run}: {} results, {} distinct",
                        computed.len(),
                        unique.len()
                    ),
                );
            }
        }
        let acked = shutdown_workers(
            gen.as_ref(),
            &NodeId::new("ctl").unwrap(),
            EXACTLY_ONCE_WORKERS,
            Duration::from_secs(10),
        );
        let taken: u64 = workers
            .into_iter()
            .map(|w| {
                let _ = w.handle.join();
                w.counters.snapshot().taken
            })
            .sum();
        let expected = (EXACTLY_ONCE_DEMANDS * EXACTLY_ONCE_RUNS + EXACTLY_ONCE_WORKERS) as u64;
        if acked != EXACTLY_ONCE_WORKERS || taken != expected {
            return check(
                false,
                format!("{backend}: workers took {taken}, expected {expected}"),
            );
        }
    }
    pass(format!(
        "{EXACTLY_ONCE_RUNS} runs x {EXACTLY_ONCE_DEMANDS} demands x {EXACTLY_ONCE_WORKERS} workers per backend, no loss or duplicate"
    ))
}

fn codec_roundtrip() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: CODEC_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let kinds = std::cell::RefCell::new(HashSet::new());
    let result = runner.run(&common::arb::demand(), |d| {
        kinds.borrow_mut().insert(d.kind());
        let bytes = d.serialize();
        let back = Demand::deserialize(&bytes).expect("decodes");
        proptest::prop_assert_eq!(&back, &d);
        proptest::prop_assert_eq!(back.serialize(), bytes);
        Ok(())
    });
    if let Err(e) = result {
        return check(false, e.to_string());
    }
    let mut sampler = TestRunner::deterministic();
    let seen: HashSet<DemandKind> = (0..200)
        .filter_map(|_| common::arb::demand().new_tree(&mut sampler).ok())
        .map(|t| t.current().kind())
        .chain(kinds.into_inner())
        .collect();
    check(
        DemandKind::ALL.iter().all(|k| seen.contains(k)),
        format!(
            "{CODEC_CASES} cases, {} of 4 kinds, encodings deterministic",
            seen.len()
        ),
    )
}

fn pi_oracle() -> Outcome {
    for n in PI_ORACLE_N {
        let ours = pi_digits(n as i64).map_err(err)?;
        let oracle = spigot_pi(n);
        if ours != oracle {
            let at = ours.chars().zip(oracle.chars()).position(|(a, b)| a != b);
            return check(false, format!("n={n} differs at {at:?}"));
        }
    }
    pass(format!("n in {PI_ORACLE_N:?} match the spigot"))
}

fn space_capacity() -> Outcome {
    let server = common::space_server(SPACE_CAPACITY);
    let agent = |s: &SpaceServer| -> Result<SpaceAgent, String> {
        let a = SpaceAgent::new();
        a.connect(&TransportConfig::new("space", s.endpoint()).map_err(err)?)
            .map_err(err)?;
        Ok(a)
    };
    let a = agent(&server)?;
    for _ in 0..SPACE_CAPACITY {
        a.write_demand(&pi_demand("gen", 5)).map_err(err)?;
    }
    match a.write_demand(&pi_demand("gen", 5)) {
        Err(TransportError::StoreFull(_)) => {}
        other => {
            return check(
                false,
                format!("write {} gave {other:?}", SPACE_CAPACITY + 1),
            )
        }
    }
    if server
        .store()
        .read(&EntryTemplate::pending(), Duration::ZERO)
        .is_none()
    {
        return check(false, "read failed on a full store".into());
    }
    for _ in 0..SPACE_CAPACITY {
        if a.take_pending(Duration::ZERO).map_err(err)?.is_none() {
            return check(false, "take failed after exhaustion".into());
        }
    }

    let server = Arc::new(server);
    let stop = Arc::new(AtomicBool::new(false));
    let peak = Arc::new(AtomicUsize::new(0));
    let sampler = {
        let (server, stop, peak) = (server.clone(), stop.clone(), peak.clone());
        thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                peak.fetch_max(server.stats().resident, Ordering::Relaxed);
                thread::yield_now();
            }
        })
    };
    let barrier = Arc::new(Barrier::new(STORM_THREADS));
    let writers: Vec<_> = (0..STORM_THREADS)
        .map(|_| {
            let a = agent(&server)?;
            let barrier = barrier.clone();
            Ok(thread::spawn(move || {
                barrier.wait();
                let mut ok = 0;
                let mut full = 0;
                for i in 0..40 {
                    match a.write_demand(&pi_demand("storm", 1 + i)) {
                        Ok(_) => ok += 1,
                        Err(TransportError::StoreFull(_)) => full += 1,
                        Err(e) => panic!("storm write: {e}"),
                    }
                    if i % 4 == 3 {
                        let _ = a.take_pending(Duration::ZERO);
                    }
                }
                (ok, full)
            }))
        })
        .collect::<Result<_, String>>()?;
    let (mut ok, mut full) = (0, 0);
    for w in writers {
        let (o, f) = w.join().map_err(|_| "storm writer panicked".to_string())?;
        ok += o;
        full += f;
    }
    stop.store(true, Ordering::Relaxed);
    sampler.join().unwrap();
    let peak = peak.load(Ordering::Relaxed);
    let resident = server.stats().resident;
    check(
        peak <= SPACE_CAPACITY && resident <= SPACE_CAPACITY && full > 0,
        format!(
            "write {} rejected, storm: {ok} stored, {full} rejected, peak resident {peak}",
            SPACE_CAPACITY + 1
        ),
    )
}

fn queue_spill() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let server = Arc::new(common::broker(|c| {
        c.memory_threshold = SPILL_THRESHOLD;
        c.journal_path = Some(dir.path().to_path_buf());
        c.sync = false;
    }));
    let a = QueueAgent::new();
    a.connect(
        &TransportConfig::new("queue", server.endpoint())
            .map_err(err)?
            .with_option("queue.persistent", "true"),
    )
    .map_err(err)?;
    let stop = Arc::new(AtomicBool::new(false));
    let sampler = {
        let (endpoint, stop) = (server.endpoint(), stop.clone());
        thread::spawn(move || -> Result<(u64, usize), String> {
            let client = WireClient::connect(&endpoint).map_err(err)?;
            let (mut samples, mut peak) = (0u64, 0usize);
            while !stop.load(Ordering::Relaxed) {
                let s = client
                    .call("stats", json!({}), Duration::ZERO)
                    .map_err(err)?;
                peak = peak.max(s["resident_bodies"].as_u64().unwrap_or(u64::MAX) as usize);
                samples += 1;
            }
            Ok((samples, peak))
        })
    };
    let demands: Vec<Demand> = (0..SPILL_DEMANDS)
        .map(|i| pi_demand("gen", 1 + (i % 500) as i64))
        .collect();
    for d in &demands {
        a.write_demand(d).map_err(err)?;
    }
    let mut in_order = true;
    for d in &demands {
        match a.take_pending(Duration::from_secs(1)).map_err(err)? {
            Some(got) if got.serialize() == d.serialize() => {}
            _ => {
                in_order = false;
                break;
            }
        }
    }
    stop.store(true, Ordering::Relaxed);
    let (samples, peak) = sampler.join().map_err(|_| "sampler panicked")??;
    let depth = server.broker().depth(&QueueName::pending());
    check(
        in_order && peak <= SPILL_THRESHOLD && depth.ready == 0,
        format!(
            "{SPILL_DEMANDS} persistent dequeued intact in FIFO order={in_order}, peak resident {peak} over {samples} samples"
        ),
    )
}

fn broker_recovery(dir: &Path) -> Result<String, String> {
    let conf = procs::transport_file(
        dir,
        "queue",
        0,
        &format!("queue.journal_path={}\n", dir.join("journal").display()),
    );
    let server = ServerProc::start("start-broker", &conf);
    let endpoint = Endpoint::new("127.0.0.1", server.port);
    let a = QueueAgent::new();
    a.connect(
        &TransportConfig::new("queue", endpoint.clone())
            .map_err(err)?
            .with_option("queue.persistent", "true"),
    )
    .map_err(err)?;
    let demands: Vec<Demand> = (1..=RECOVERY_SENT as i64)
        .map(|n| pi_demand("gen", n))
        .collect();
    for d in &demands {
        a.write_demand(d).map_err(err)?;
    }
    for _ in 0..RECOVERY_ACKED {
        a.take_pending(Duration::ZERO)
            .map_err(err)?
            .ok_or("queue ran dry")?;
    }
    let _ = a.disconnect();
    server.kill();

    let server = ServerProc::start("start-broker", &conf);
    let restored = server
        .banner
        .split("restored ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .and_then(|n| n.parse::<usize>().ok())
        .ok_or(format!("banner {:?}", server.banner))?;
    let a = QueueAgent::new();
    a.connect(
        &TransportConfig::new("queue", Endpoint::new("127.0.0.1", server.port)).map_err(err)?,
    )
    .map_err(err)?;
    let mut back = Vec::new();
    while let Some(d) = a.take_pending(Duration::ZERO).map_err(err)? {
        back.push(d);
    }
    let expected = &demands[RECOVERY_ACKED..];
    if restored != RECOVERY_SENT - RECOVERY_ACKED || back != expected {
        return Err(format!(
            "broker restored {restored}, drained {}",
            back.len()
        ));
    }
    Ok(format!("broker restored {restored} in order after SIGKILL"))
}

fn space_recovery(dir: &Path) -> Result<String, String> {
    let mut config = SpaceServerConfig::new(common::any_port());
    config.snapshot_path = Some(dir.join("space.snapshot"));
    let demands: Vec<Demand> = (1..=SNAPSHOT_ENTRIES as i64)
        .map(|n| pi_demand("gen", n))
        .collect();
    {
        let server = SpaceServer::start(config.clone()).map_err(err)?;
        let a = SpaceAgent::new();
        a.connect(&TransportConfig::new("space", server.endpoint()).map_err(err)?)
            .map_err(err)?;
        for d in &demands {
            a.write_demand(d).map_err(err)?;
        }
        server.snapshot_now().map_err(err)?;
        drop(server);
    }
    let server = SpaceServer::start(config).map_err(err)?;
    let recovered = server.stats().resident;
    let a = SpaceAgent::new();
    a.connect(&TransportConfig::new("space", server.endpoint()).map_err(err)?)
        .map_err(err)?;
    let mut bytes: Vec<Vec<u8>> = Vec::new();
    while let Some(d) = a.take_pending(Duration::ZERO).map_err(err)? {
        bytes.push(d.serialize());
    }
    let mut want: Vec<Vec<u8>> = demands.iter().map(|d| d.serialize()).collect();
    bytes.sort();
    want.sort();
    if recovered != SNAPSHOT_ENTRIES || bytes != want {
        return Err(format!(
            "space recovered {recovered}, {} matched",
            bytes.len()
        ));
    }
    Ok(format!("space recovered {recovered} with equal bytes"))
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let (a, b) = (broker_recovery(dir.path()), space_recovery(dir.path()));
    match (a, b) {
        (Ok(a), Ok(b)) => pass(format!("{a}; {b}")),
        (a, b) => check(false, format!("{a:?}; {b:?}")),
    }
}

fn scaling() -> Outcome {
    let cpus = thread::available_parallelism().map_or(1, |n| n.get());
    let mut spec = ExperimentSpec::new(
        &["space", "queue"],
        &[1, 4],
        WorkerLaunch::Processes(procs::DMF.into()),
    );
    spec.demands_total = 200;
    spec.pi_digits = 2000;
    spec.repetitions = 3;
    let outcome = bench::run_experiment(&spec).map_err(err)?;
    if !outcome.diagnostics.is_empty() {
        return check(false, outcome.diagnostics.join("; "));
    }
    let summary = bench::summarize(&outcome.rows).map_err(err)?;
    let mut ratios = Vec::new();
    let mut scaled = true;
    for backend in ["space", "queue"] {
        let one = summary.cell(backend, 1).and_then(|c| c.median_throughput);
        let four = summary.cell(backend, 4).and_then(|c| c.median_throughput);
        let ratio = match (one, four) {
            (Some(o), Some(f)) if o > 0.0 => f / o,
            _ => 0.0,
        };
        scaled &= ratio >= SCALING_RATIO;
        ratios.push(format!("{backend} {ratio:.2}x"));
    }
    let detail = format!(
        "workers 4 vs 1: {} on {cpus} logical CPUs",
        ratios.join(", ")
    );
    if cpus < SCALING_MIN_CPUS {
        return Ok(Verdict::Skip(format!("{detail}; needs {SCALING_MIN_CPUS}")));
    }
    check(scaled, detail)
}

fn handler_accounting() -> Outcome {
    let mut counts = Vec::new();
    for backend in ["space", "queue"] {
        let server = Server::start(backend);
        let endpoint = server.transport().endpoint;
        let clients: Vec<WireClient> = (0..3)
            .map(|_| WireClient::connect(&endpoint))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let stats = clients[0]
            .call("stats", json!({}), Duration::ZERO)
            .map_err(err)?;
        counts.push(stats["handlers"].as_u64().unwrap_or(0));
    }
    check(
        counts == [3, 6],
        format!(
            "3 connections: space {} handlers, broker {}",
            counts[0], counts[1]
        ),
    )
}

fn demo_smoke() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for backend in ["space", "queue"] {
        let (out, took) = procs::run_with_limit(procs::dmf(&["demo", backend]), DEMO_LIMIT);
        let good = out.is_some_and(|o| o.status.success()) && took <= DEMO_LIMIT;
        ok &= good;
        notes.push(format!(
            "{backend} {:.1}s exit={}",
            took.as_secs_f64(),
            if good { 0 } else { 1 }
        ));
    }
    check(ok, notes.join(", "))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("interchangeable backends", interchangeable),
        ("exactly-once delivery", exactly_once),
        ("serialization round-trip", codec_roundtrip),
        ("pi correctness", pi_oracle),
        ("space capacity", space_capacity),
        ("queue spill", queue_spill),
        ("persistence recovery", persistence),
        ("scaling sanity", scaling),
        ("handler accounting", handler_accounting),
        ("demo smoke", demo_smoke),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    std::env::set_var("DMF_LOG", "warn");
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| name.contains(f.as_str()) || *f == n.to_string())
        {
            continue;
        }
        let started = Instant::now();
        let verdict = match panic::catch_unwind(AssertUnwindSafe(run)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => Verdict::Fail(e),
            Err(p) => Verdict::Fail(
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()),
            ),
        };
        let secs = started.elapsed().as_secs_f64();
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("{tag} {n:>2} {name}: {detail} [{secs:.1}s]");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
