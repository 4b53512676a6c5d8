//! The multi-threaded Pi workload generator.

use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::pi::pi_digits;
use crate::demand::{
    Demand, DemandKind, DemandPayload, DemandSignature, NodeId, ResultValue, SystemCommand,
};
use crate::transport::{DemandDispatcher, TransportError};

/// Column names of [`WorkloadReport::csv_row`].
pub const REPORT_HEADER: &str =
    "node_id,backend,threads,workers,demands,received,faults,wall_ms,throughput_per_s";

const DISPATCH_ATTEMPTS: u32 = 20;

#[derive(Clone, Debug)]
pub struct Workload {
    pub node_id: NodeId,
    pub threads: usize,
    pub demands: usize,
    pub pi_digits: i64,
    /// Longest wait for any single result.
    pub deadline: Duration,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct WorkloadReport {
    pub node_id: String,
    pub backend: String,
    pub threads: usize,
    pub workers: usize,
    pub demands_sent: u64,
    /// Results carrying the expected digits.
    pub results_received: u64,
    /// Fault results and results with wrong digits.
    pub faults: u64,
    /// Dispatched demands with no result before the deadline.
    pub missing: u64,
    /// Demands that could not be dispatched at all.
    pub undispatched: u64,
    pub wall_millis: u64,
    pub throughput_per_s: f64,
    #[serde(skip)]
    pub results: Vec<String>,
}

impl WorkloadReport {
    pub fn is_complete(&self) -> bool {
        self.faults == 0 && self.missing == 0 && self.undispatched == 0
    }

    pub fn csv_row(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        w.write_record([
            self.node_id.clone(),
            self.backend.clone(),
            self.threads.to_string(),
            self.workers.to_string(),
            self.demands_sent.to_string(),
            self.results_received.to_string(),
            self.faults.to_string(),
            self.wall_millis.to_string(),
            format!("{:.3}", self.throughput_per_s),
        ])
        .expect("write to memory");
        let bytes = w.into_inner().expect("flush to memory");
        String::from_utf8(bytes)
            .expect("utf-8 csv")
            .trim_end()
            .to_string()
    }
}

#[derive(Default)]
struct ThreadTally {
    sent: u64,
    received: u64,
    faults: u64,
    missing: u64,
    undispatched: u64,
    results: Vec<String>,
}

fn dispatch_with_retry(
    dispatcher: &dyn DemandDispatcher,
    demand: &Demand,
) -> Result<DemandSignature, TransportError> {
    let mut delay = Duration::from_millis(20);
    let mut attempt = 0;
    loop {
        match dispatcher.dispatch(demand) {
            Err(e)
                if (e.is_retriable() || matches!(e, TransportError::StoreFull(_)))
                    && attempt < DISPATCH_ATTEMPTS =>
            {
                attempt += 1;
                log::warn!("dispatch retry {attempt}: {e}");
                thread::sleep(delay);
                delay = (delay * 2).min(Duration::from_secs(1));
            }
            other => return other,
        }
    }
}

/// Waits for one result, riding out retriable transport errors until the
/// deadline.
fn await_result(
    dispatcher: &dyn DemandDispatcher,
    signature: &DemandSignature,
    deadline: Duration,
) -> Option<Demand> {
    let until = Instant::now() + deadline;
    loop {
        let left = until.saturating_duration_since(Instant::now());
        match dispatcher.obtain_result(signature, left) {
            Ok(found) => return found,
            Err(e) if e.is_retriable() && !left.is_zero() => {
                log::warn!("waiting for {}: {e}", signature.id);
                thread::sleep(Duration::from_millis(50));
            }
            Err(e) => {
                log::error!("giving up on {}: {e}", signature.id);
                return None;
            }
        }
    }
}

fn run_share(
    dispatcher: &dyn DemandDispatcher,
    workload: &Workload,
    count: usize,
    expected: Option<&str>,
) -> ThreadTally {
    let mut tally = ThreadTally::default();
    let mut signatures = Vec::with_capacity(count);
    for _ in 0..count {
        let demand = match Demand::new_pending(
            DemandKind::Procedural,
            DemandPayload::pi_digits(workload.pi_digits),
            workload.node_id.clone(),
        ) {
            Ok(d) => d,
            Err(e) => {
                log::error!("cannot build demand: {e}");
                tally.undispatched += 1;
                continue;
            }
        };
        match dispatch_with_retry(dispatcher, &demand) {
            Ok(sig) => {
                tally.sent += 1;
                signatures.push(sig);
            }
            Err(e) => {
                log::error!("dispatch failed: {e}");
                tally.undispatched += 1;
            }
        }
    }
    for sig in &signatures {
        let Some(done) = await_result(dispatcher, sig, workload.deadline) else {
            tally.missing += 1;
            continue;
        };
        match done.result() {
            Some(ResultValue::Text(s)) if Some(s.as_str()) == expected => {
                tally.received += 1;
                tally.results.push(s.clone());
            }
            other => {
                log::warn!("unexpected result for {}: {other:?}", sig.id);
                tally.faults += 1;
            }
        }
    }
    tally
}

/// Splits `demands` across `threads` (remainder to the first thread), waits
/// for every result and checks it against the locally computed digits.
pub fn run_workload(dispatcher: &Arc<dyn DemandDispatcher>, workload: &Workload) -> WorkloadReport {
    let threads = workload.threads.max(1);
    let expected = pi_digits(workload.pi_digits).ok();
    let started = Instant::now();
    let tallies: Vec<ThreadTally> = thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let share = workload.demands / threads
                    + if t == 0 {
                        workload.demands % threads
                    } else {
                        0
                    };
                let dispatcher = dispatcher.as_ref();
                let expected = expected.as_deref();
                thread::Builder::new()
                    .name(format!("generator-{t}"))
                    .spawn_scoped(scope, move || {
                        run_share(dispatcher, workload, share, expected)
                    })
                    .expect("spawn generator thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generator thread panicked"))
            .collect()
    });
    let wall = started.elapsed();

    let mut report = WorkloadReport {
        node_id: workload.node_id.to_string(),
        threads,
        ..WorkloadReport::default()
    };
    for t in tallies {
        report.demands_sent += t.sent;
        report.results_received += t.received;
        report.faults += t.faults;
        report.missing += t.missing;
        report.undispatched += t.undispatched;
        report.results.extend(t.results);
    }
    report.wall_millis = wall.as_millis() as u64;
    let secs = wall.as_secs_f64();
    report.throughput_per_s = if report.results_received == 0 || secs == 0.0 {
        0.0
    } else {
        report.results_received as f64 / secs
    };
    report
}

/// Sends one shutdown demand per worker and waits for the acknowledgments.
/// Returns how many were acknowledged.
pub fn shutdown_workers(
    dispatcher: &dyn DemandDispatcher,
    origin: &NodeId,
    workers: usize,
    deadline: Duration,
) -> usize {
    let mut signatures = Vec::new();
    for _ in 0..workers {
        let demand = Demand::new_pending(
            DemandKind::System,
            DemandPayload::system(SystemCommand::Shutdown),
            origin.clone(),
        )
        .expect("system demands are always valid");
        match dispatch_with_retry(dispatcher, &demand) {
            Ok(sig) => signatures.push(sig),
            Err(e) => log::error!("cannot dispatch shutdown: {e}"),
        }
    }
    signatures
        .iter()
        .filter(|sig| await_result(dispatcher, sig, deadline).is_some())
        .count()
}
