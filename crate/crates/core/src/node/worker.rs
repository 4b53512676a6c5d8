//! The worker loop: take a pending demand, evaluate it, return the result.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::pi::pi_digits;
use crate::demand::{Demand, DemandPayload, NodeId, ResultValue, SystemCommand};
use crate::transport::{DemandDispatcher, TransportError};

pub const POLL_INTERVAL: Duration = Duration::from_secs(1);

/// Text result of a `ping` demand.
pub const PONG: &str = "pong";
/// Text result acknowledging a `shutdown` demand.
pub const SHUTDOWN_ACK: &str = "ack";

#[derive(Clone, Debug)]
pub struct WorkerOptions {
    pub poll: Duration,
    /// Consecutive retriable failures tolerated before the loop gives up.
    pub max_retries: u32,
    pub backoff: Duration,
    pub resources: BTreeMap<String, Vec<u8>>,
}

impl Default for WorkerOptions {
    fn default() -> Self {
        WorkerOptions {
            poll: POLL_INTERVAL,
            max_retries: 8,
            backoff: Duration::from_millis(100),
            resources: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Default)]
pub struct WorkerCounters {
    pub taken: AtomicU64,
    pub returned: AtomicU64,
    pub faults: AtomicU64,
    pub undecodable: AtomicU64,
    pub retries: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct WorkerSnapshot {
    pub taken: u64,
    pub returned: u64,
    pub faults: u64,
    pub undecodable: u64,
    pub retries: u64,
}

impl WorkerCounters {
    pub fn snapshot(&self) -> WorkerSnapshot {
        WorkerSnapshot {
            taken: self.taken.load(Ordering::Relaxed),
            returned: self.returned.load(Ordering::Relaxed),
            faults: self.faults.load(Ordering::Relaxed),
            undecodable: self.undecodable.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WorkerExit {
    /// A shutdown demand was acknowledged.
    Shutdown,
    /// The stop flag was raised.
    Stopped,
}

enum Control {
    Continue,
    Exit,
}

/// Evaluates one payload. Never panics on bad input; failures become faults.
fn evaluate(
    payload: &DemandPayload,
    options: &WorkerOptions,
    counters: &WorkerCounters,
) -> (ResultValue, Control) {
    let value = match payload {
        DemandPayload::Procedural { method, args } => match (method.as_str(), args.as_slice()) {
            ("pi_digits", [n]) => match pi_digits(*n) {
                Ok(s) => ResultValue::Text(s),
                Err(_) => ResultValue::fault("argument error"),
            },
            _ => ResultValue::fault(format!("unknown procedure {method:?}")),
        },
        DemandPayload::System { command } => match command {
            SystemCommand::Ping => ResultValue::text(PONG),
            SystemCommand::Shutdown => return (ResultValue::text(SHUTDOWN_ACK), Control::Exit),
            SystemCommand::ReportStats => ResultValue::Text(
                serde_json::to_string(&counters.snapshot()).expect("counters serialize"),
            ),
        },
        DemandPayload::Resource { resource_name } => match options.resources.get(resource_name) {
            Some(blob) => ResultValue::Bytes(blob.clone()),
            None => ResultValue::fault(format!("unknown resource {resource_name:?}")),
        },
        DemandPayload::Intensional {
            identifier,
            context,
        } => match (identifier.as_str(), context.as_slice()) {
            ("nat", [c]) => ResultValue::Integer(c.tag.into()),
            _ => ResultValue::fault("unknown identifier"),
        },
    };
    (value, Control::Continue)
}

pub struct Worker {
    id: NodeId,
    dispatcher: Arc<dyn DemandDispatcher>,
    options: WorkerOptions,
    stop: Arc<AtomicBool>,
    counters: Arc<WorkerCounters>,
}

impl Worker {
    pub fn new(id: NodeId, dispatcher: Arc<dyn DemandDispatcher>, options: WorkerOptions) -> Self {
        Worker {
            id,
            dispatcher,
            options,
            stop: Arc::new(AtomicBool::new(false)),
            counters: Arc::new(WorkerCounters::default()),
        }
    }

    /// Raising this flag ends the loop within one poll interval.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn counters(&self) -> Arc<WorkerCounters> {
        self.counters.clone()
    }

    /// Runs `op` until it succeeds, fails for good, or the retry budget runs
    /// out. Backoff doubles per attempt.
    fn with_retries<T>(
        &self,
        mut op: impl FnMut() -> Result<T, TransportError>,
    ) -> Result<T, TransportError> {
        let mut delay = self.options.backoff;
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_retriable() && attempt < self.options.max_retries => {
                    attempt += 1;
                    self.counters.retries.fetch_add(1, Ordering::Relaxed);
                    log::warn!("{}: retrying after {e}", self.id);
                    thread::sleep(delay);
                    delay = (delay * 2).min(Duration::from_secs(5));
                }
                other => return other,
            }
        }
    }

    pub fn run(&self) -> Result<WorkerExit, TransportError> {
        log::info!("worker {} started", self.id);
        while !self.stop.load(Ordering::Relaxed) {
            let taken =
                self.with_retries(|| match self.dispatcher.next_pending(self.options.poll) {
                    Err(TransportError::Decode(e)) => {
                        self.counters.undecodable.fetch_add(1, Ordering::Relaxed);
                        log::warn!("{}: skipping undecodable demand: {e}", self.id);
                        Ok(None)
                    }
                    other => other,
                })?;
            let Some(demand) = taken else { continue };
            self.counters.taken.fetch_add(1, Ordering::Relaxed);
            if let Control::Exit = self.handle(demand)? {
                log::info!("worker {} acknowledged shutdown", self.id);
                return Ok(WorkerExit::Shutdown);
            }
        }
        Ok(WorkerExit::Stopped)
    }

    fn handle(&self, demand: Demand) -> Result<Control, TransportError> {
        let started = Instant::now();
        let (value, control) = evaluate(demand.payload(), &self.options, &self.counters);
        if value.is_fault() {
            self.counters.faults.fetch_add(1, Ordering::Relaxed);
        }
        let millis = started.elapsed().as_millis() as u64;
        let id = demand.id();
        let computed = demand.into_computed(value, self.id.clone(), millis)?;
        self.with_retries(|| match self.dispatcher.return_result(&computed) {
            // An earlier attempt landed before its reply was lost.
            Err(TransportError::Duplicate(_)) => Ok(()),
            other => other,
        })?;
        self.counters.returned.fetch_add(1, Ordering::Relaxed);
        log::debug!("{}: returned {id}", self.id);
        Ok(control)
    }
}
