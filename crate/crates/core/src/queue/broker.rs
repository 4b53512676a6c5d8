//! Point-to-point broker state: FIFO queues, client acknowledgment,
//! persistent messages and spill-to-journal above the memory threshold.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::io;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::journal::{BodyLocation, Journal, RecoveryReport};
use crate::demand::now_millis;
use crate::transport::{Endpoint, TransportConfig, TransportError};

/// Queue for demands awaiting a worker.
pub const PENDING_QUEUE: &str = "pending";
/// Queue for computed demands awaiting their generator.
pub const COMPUTED_QUEUE: &str = "computed";

/// A queue name: non-empty, no whitespace (it is a journal field).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct QueueName(String);

impl QueueName {
    pub fn new(name: impl Into<String>) -> Result<Self, BrokerError> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(BrokerError::BadQueueName(name));
        }
        Ok(QueueName(name))
    }

    pub fn pending() -> Self {
        QueueName(PENDING_QUEUE.to_string())
    }

    pub fn computed() -> Self {
        QueueName(COMPUTED_QUEUE.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for QueueName {
    type Error = BrokerError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        QueueName::new(s)
    }
}

impl From<QueueName> for String {
    fn from(q: QueueName) -> String {
        q.0
    }
}

impl fmt::Display for QueueName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AckMode {
    /// Removed on delivery.
    Auto,
    /// Held unacked until the consumer acks it.
    Client,
}

impl FromStr for AckMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(AckMode::Auto),
            "client" => Ok(AckMode::Client),
            other => Err(format!("unknown ack mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrokerConfig {
    pub listen: Endpoint,
    /// Most message bodies kept in memory at once.
    pub memory_threshold: usize,
    /// Directory holding the journal; persistence and spill need it.
    pub journal_path: Option<PathBuf>,
    pub ack_mode_default: AckMode,
    /// fsync every journal record.
    pub sync: bool,
}

impl BrokerConfig {
    pub fn new(listen: Endpoint) -> Self {
        BrokerConfig {
            listen,
            memory_threshold: 10_000,
            journal_path: None,
            ack_mode_default: AckMode::Client,
            sync: true,
        }
    }

    /// Reads `transport.endpoint` plus the `queue.*` options.
    pub fn from_transport(config: &TransportConfig) -> Result<Self, TransportError> {
        let mut c = BrokerConfig::new(config.endpoint.clone());
        c.memory_threshold = config.parsed_option("queue.memory_threshold", c.memory_threshold)?;
        if c.memory_threshold == 0 {
            return Err(TransportError::Config(
                "queue.memory_threshold must be at least 1".into(),
            ));
        }
        c.journal_path = config.option("queue.journal_path").map(PathBuf::from);
        c.ack_mode_default = config.parsed_option("queue.ack_mode", c.ack_mode_default)?;
        c.sync = config.flag("queue.fsync", c.sync)?;
        Ok(c)
    }
}

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("queue name {0:?} is invalid")]
    BadQueueName(String),
    #[error("flow control: {resident} bodies resident, threshold {threshold}")]
    FlowControl { resident: usize, threshold: usize },
    #[error("message with key {key:?} is already queued on {queue}")]
    Duplicate { queue: String, key: String },
    #[error("message {0} is not unacked by this session")]
    NotOwned(u64),
    #[error("session {0} is closed")]
    SessionClosed(u64),
    #[error("journal: {0}")]
    Journal(#[from] io::Error),
}

/// Identifies one client connection.
pub type SessionId = u64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub message_id: u64,
    pub queue: QueueName,
    pub body: Vec<u8>,
    pub enqueued_at: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeliveryState {
    Ready,
    Unacked(SessionId),
}

#[derive(Debug)]
enum Body {
    Resident(Vec<u8>),
    Spilled(BodyLocation),
}

#[derive(Debug)]
struct Message {
    queue: QueueName,
    body: Body,
    persistent: bool,
    state: DeliveryState,
    enqueued_at: u64,
    key: Option<String>,
}

#[derive(Default)]
struct QueueState {
    ready: VecDeque<u64>,
    unacked: usize,
    keys: HashMap<String, u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueDepth {
    pub ready: usize,
    pub unacked: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerCounters {
    pub resident_bodies: usize,
    pub spilled_bodies: usize,
    pub memory_threshold: usize,
    pub enqueued: u64,
    pub delivered: u64,
    pub acked: u64,
    pub redelivered: u64,
    pub queues: BTreeMap<String, QueueDepth>,
}

struct Inner {
    queues: HashMap<QueueName, QueueState>,
    messages: HashMap<u64, Message>,
    sessions: HashMap<SessionId, bool>,
    next_id: u64,
    next_session: SessionId,
    resident: usize,
    spilled: usize,
    enqueued: u64,
    delivered: u64,
    acked: u64,
    redelivered: u64,
    journal: Option<Journal>,
}

impl Inner {
    fn queue(&mut self, name: &QueueName) -> &mut QueueState {
        self.queues.entry(name.clone()).or_default()
    }

    fn body_of(&self, m: &Message) -> io::Result<Vec<u8>> {
        match &m.body {
            Body::Resident(b) => Ok(b.clone()),
            Body::Spilled(loc) => match &self.journal {
                Some(j) => j.read_body(*loc),
                None => Err(io::Error::other("spilled body without a journal")),
            },
        }
    }

    /// Drops a message for good, retiring its journal record.
    fn retire(&mut self, id: u64) -> Result<(), BrokerError> {
        let Some(m) = self.messages.remove(&id) else {
            return Ok(());
        };
        match m.body {
            Body::Resident(_) => self.resident -= 1,
            Body::Spilled(_) => self.spilled -= 1,
        }
        if let Some(key) = &m.key {
            let q = self.queue(&m.queue);
            if q.keys.get(key) == Some(&id) {
                q.keys.remove(key);
            }
        }
        if m.persistent {
            if let Some(j) = self.journal.as_mut() {
                j.ack(id)?;
            }
        }
        Ok(())
    }
}

/// Thread-safe broker core shared by every connection.
pub struct Broker {
    inner: Mutex<Inner>,
    ready: Condvar,
    threshold: usize,
    default_ack: AckMode,
    recovery: RecoveryReport,
}

impl Broker {
    /// Opens the broker, replaying the journal if one is configured.
    pub fn open(config: &BrokerConfig) -> io::Result<Broker> {
        let threshold = config.memory_threshold.max(1);
        let mut inner = Inner {
            queues: HashMap::new(),
            messages: HashMap::new(),
            sessions: HashMap::new(),
            next_id: 1,
            next_session: 1,
            resident: 0,
            spilled: 0,
            enqueued: 0,
            delivered: 0,
            acked: 0,
            redelivered: 0,
            journal: None,
        };
        let mut recovery = RecoveryReport::default();
        if let Some(dir) = &config.journal_path {
            let (journal, live, report) = Journal::recover(dir, config.sync)?;
            for (m, loc) in live {
                let Ok(queue) = QueueName::new(m.queue.clone()) else {
                    recovery.skipped += 1;
                    continue;
                };
                let body = if inner.resident < threshold {
                    inner.resident += 1;
                    Body::Resident(m.body)
                } else {
                    inner.spilled += 1;
                    Body::Spilled(loc)
                };
                inner.queue(&queue).ready.push_back(m.message_id);
                inner.next_id = inner.next_id.max(m.message_id + 1);
                inner.messages.insert(
                    m.message_id,
                    Message {
                        queue,
                        body,
                        persistent: true,
                        state: DeliveryState::Ready,
                        enqueued_at: now_millis(),
                        key: None,
                    },
                );
            }
            recovery.records = report.records;
            recovery.restored = report.restored - recovery.skipped;
            recovery.skipped += report.skipped;
            if recovery.records > 0 {
                log::info!(
                    "journal replay: {} records, {} restored, {} skipped",
                    recovery.records,
                    recovery.restored,
                    recovery.skipped
                );
            }
            inner.journal = Some(journal);
        }
        Ok(Broker {
            inner: Mutex::new(inner),
            ready: Condvar::new(),
            threshold,
            default_ack: config.ack_mode_default,
            recovery,
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn recovery_report(&self) -> &RecoveryReport {
        &self.recovery
    }

    pub fn default_ack_mode(&self) -> AckMode {
        self.default_ack
    }

    pub fn open_session(&self) -> SessionId {
        let mut inner = self.lock();
        let id = inner.next_session;
        inner.next_session += 1;
        inner.sessions.insert(id, true);
        id
    }

    /// Ends a session: its unacked messages go back to the head of their
    /// queues in their original order, and blocked dequeues for it return.
    pub fn close_session(&self, session: SessionId) {
        let mut inner = self.lock();
        inner.sessions.insert(session, false);
        let mut owned: Vec<u64> = inner
            .messages
            .iter()
            .filter(|(_, m)| m.state == DeliveryState::Unacked(session))
            .map(|(id, _)| *id)
            .collect();
        owned.sort_unstable();
        for id in owned.into_iter().rev() {
            let m = inner.messages.get_mut(&id).expect("owned message exists");
            m.state = DeliveryState::Ready;
            let queue = m.queue.clone();
            let q = inner.queue(&queue);
            q.unacked -= 1;
            q.ready.push_front(id);
            inner.redelivered += 1;
        }
        drop(inner);
        self.ready.notify_all();
    }

    /// Releases the bookkeeping of a closed session.
    pub fn forget_session(&self, session: SessionId) {
        self.lock().sessions.remove(&session);
    }

    /// Appends a message. Above the memory threshold persistent bodies are
    /// spilled to the journal and everything else is refused.
    pub fn enqueue(
        &self,
        queue: &QueueName,
        body: Vec<u8>,
        persistent: bool,
        key: Option<String>,
    ) -> Result<u64, BrokerError> {
        let mut inner = self.lock();
        if let Some(k) = &key {
            if inner.queue(queue).keys.contains_key(k) {
                return Err(BrokerError::Duplicate {
                    queue: queue.to_string(),
                    key: k.clone(),
                });
            }
        }
        let persist = persistent && inner.journal.is_some();
        let spill = inner.resident >= self.threshold;
        if spill && !persist {
            return Err(BrokerError::FlowControl {
                resident: inner.resident,
                threshold: self.threshold,
            });
        }
        let id = inner.next_id;
        let location = match inner.journal.as_mut() {
            Some(j) if persist => Some(j.append(id, queue.as_str(), &body)?),
            _ => None,
        };
        inner.next_id += 1;
        let body = match location {
            Some(loc) if spill => {
                inner.spilled += 1;
                Body::Spilled(loc)
            }
            _ => {
                inner.resident += 1;
                Body::Resident(body)
            }
        };
        let q = inner.queue(queue);
        q.ready.push_back(id);
        if let Some(k) = &key {
            q.keys.insert(k.clone(), id);
        }
        inner.messages.insert(
            id,
            Message {
                queue: queue.clone(),
                body,
                persistent: persist,
                state: DeliveryState::Ready,
                enqueued_at: now_millis(),
                key,
            },
        );
        inner.enqueued += 1;
        drop(inner);
        self.ready.notify_all();
        Ok(id)
    }

    /// Delivers the head of `queue`, waiting up to `timeout`.
    pub fn dequeue(
        &self,
        session: SessionId,
        queue: &QueueName,
        timeout: Duration,
        mode: AckMode,
    ) -> Result<Option<Delivery>, BrokerError> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.lock();
        loop {
            if inner.sessions.get(&session) != Some(&true) {
                return Err(BrokerError::SessionClosed(session));
            }
            if let Some(id) = inner.queue(queue).ready.pop_front() {
                let m = &inner.messages[&id];
                let enqueued_at = m.enqueued_at;
                let body = match inner.body_of(m) {
                    Ok(b) => b,
                    Err(e) => {
                        inner.queue(queue).ready.push_front(id);
                        return Err(e.into());
                    }
                };
                let delivery = Delivery {
                    message_id: id,
                    queue: queue.clone(),
                    body,
                    enqueued_at,
                };
                inner.delivered += 1;
                match mode {
                    AckMode::Auto => {
                        inner.retire(id)?;
                        inner.acked += 1;
                    }
                    AckMode::Client => {
                        inner.messages.get_mut(&id).expect("present").state =
                            DeliveryState::Unacked(session);
                        inner.queue(queue).unacked += 1;
                    }
                }
                return Ok(Some(delivery));
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            inner = self
                .ready
                .wait_timeout(inner, left)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    fn owned(&self, inner: &Inner, session: SessionId, id: u64) -> Result<(), BrokerError> {
        match inner.messages.get(&id) {
            Some(m) if m.state == DeliveryState::Unacked(session) => Ok(()),
            _ => Err(BrokerError::NotOwned(id)),
        }
    }

    /// Permanently removes a message this session holds unacked.
    pub fn ack(&self, session: SessionId, id: u64) -> Result<(), BrokerError> {
        let mut inner = self.lock();
        self.owned(&inner, session, id)?;
        let queue = inner.messages[&id].queue.clone();
        inner.queue(&queue).unacked -= 1;
        inner.retire(id)?;
        inner.acked += 1;
        Ok(())
    }

    /// Acknowledges a held message and re-appends it at the tail of its queue
    /// under a new id, atomically. Returns the new id.
    pub fn requeue(&self, session: SessionId, id: u64) -> Result<u64, BrokerError> {
        let mut inner = self.lock();
        self.owned(&inner, session, id)?;
        let new_id = inner.next_id;
        let (queue, persistent) = {
            let m = &inner.messages[&id];
            (m.queue.clone(), m.persistent)
        };
        if persistent {
            let body = inner.body_of(&inner.messages[&id])?;
            let loc = inner
                .journal
                .as_mut()
                .expect("persistent implies journal")
                .append(new_id, queue.as_str(), &body)?;
            let m = inner.messages.get_mut(&id).expect("present");
            if let Body::Spilled(old) = &mut m.body {
                *old = loc;
            }
            inner.journal.as_mut().expect("journal").ack(id)?;
        }
        inner.next_id += 1;
        let mut m = inner.messages.remove(&id).expect("present");
        m.state = DeliveryState::Ready;
        let q = inner.queue(&queue);
        q.unacked -= 1;
        q.ready.push_back(new_id);
        if let Some(k) = &m.key {
            q.keys.insert(k.clone(), new_id);
        }
        inner.messages.insert(new_id, m);
        drop(inner);
        self.ready.notify_all();
        Ok(new_id)
    }

    pub fn depth(&self, queue: &QueueName) -> QueueDepth {
        let inner = self.lock();
        inner
            .queues
            .get(queue)
            .map(|q| QueueDepth {
                ready: q.ready.len(),
                unacked: q.unacked,
            })
            .unwrap_or_default()
    }

    pub fn counters(&self) -> BrokerCounters {
        let inner = self.lock();
        BrokerCounters {
            resident_bodies: inner.resident,
            spilled_bodies: inner.spilled,
            memory_threshold: self.threshold,
            enqueued: inner.enqueued,
            delivered: inner.delivered,
            acked: inner.acked,
            redelivered: inner.redelivered,
            queues: inner
                .queues
                .iter()
                .map(|(name, q)| {
                    (
                        name.to_string(),
                        QueueDepth {
                            ready: q.ready.len(),
                            unacked: q.unacked,
                        },
                    )
                })
                .collect(),
        }
    }
}
