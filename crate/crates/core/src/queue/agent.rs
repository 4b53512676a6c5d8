use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::broker::{COMPUTED_QUEUE, PENDING_QUEUE};
use super::server::{BrokerStats, WireMessage};
use crate::demand::{Demand, DemandId, DemandSignature};
use crate::transport::{
    require_computed, require_pending, Result, TransportAgent, TransportConfig, TransportError,
};
use crate::wire::{Session, WireClient};

/// Longest single dequeue issued while scanning for a result.
const SCAN_SLICE: Duration = Duration::from_millis(200);
/// Pause after a full lap of the computed queue without a match.
const LAP_PAUSE: Duration = Duration::from_millis(10);

#[derive(Default)]
struct Router {
    /// Signatures whose results belong to this agent: dispatched through it
    /// or currently awaited by one of its callers.
    claimable: HashSet<DemandId>,
    mailbox: HashMap<DemandId, Demand>,
    scanning: bool,
}

enum Scanned {
    Nothing,
    Mine(Demand),
    /// Claimed on behalf of another caller of this agent.
    Forwarded,
    /// Put back at the tail; carries the signature.
    Requeued(DemandId),
}

/// Transport agent over the message broker.
///
/// Pending demands go to the `pending` queue and are acked as soon as they are
/// handed to the caller. Results go to `computed`; a caller waiting for one
/// signature consumes from the head and puts non-matching results back at the
/// tail. Results for demands dispatched through the same agent are parked
/// in-process for their caller instead of being requeued.
#[derive(Default)]
pub struct QueueAgent {
    client: RwLock<Option<Arc<WireClient>>>,
    persistent: RwLock<bool>,
    router: Mutex<Router>,
    routed: Condvar,
}

fn parse_message(body: &mut Value) -> Result<Option<WireMessage>> {
    let m = body
        .get_mut("message")
        .map(Value::take)
        .unwrap_or(Value::Null);
    if m.is_null() {
        return Ok(None);
    }
    serde_json::from_value(m)
        .map(Some)
        .map_err(|e| TransportError::Protocol(format!("bad message: {e}")))
}

impl QueueAgent {
    pub fn new() -> Self {
        QueueAgent::default()
    }

    fn client(&self) -> Result<Arc<WireClient>> {
        self.client
            .read()
            .unwrap()
            .clone()
            .ok_or(TransportError::NotConnected)
    }

    fn enqueue(&self, queue: &str, demand: &Demand) -> Result<()> {
        let args = json!({
            "queue": queue,
            "demand": demand.to_canonical_string(),
            "persistent": *self.persistent.read().unwrap(),
            "key": demand.id().to_string(),
        });
        self.client()?.call("enq", args, Duration::ZERO).map(|_| ())
    }

    fn dequeue(
        session: &mut Session<'_>,
        queue: &str,
        timeout: Duration,
    ) -> Result<Option<WireMessage>> {
        let args = json!({
            "queue": queue,
            "timeout_ms": timeout.as_millis() as u64,
            "ack": "client",
        });
        let mut body = session.call("deq", args, timeout)?;
        parse_message(&mut body)
    }

    fn ack(session: &mut Session<'_>, message_id: u64, requeue: bool) -> Result<()> {
        session
            .call(
                "ack",
                json!({ "message_id": message_id, "requeue": requeue }),
                Duration::ZERO,
            )
            .map(|_| ())
    }

    pub fn stats(&self) -> Result<BrokerStats> {
        let body = self.client()?.call("stats", json!({}), Duration::ZERO)?;
        serde_json::from_value(body).map_err(|e| TransportError::Protocol(e.to_string()))
    }

    /// One dequeue from `computed`, routing whatever arrives.
    fn scan_once(&self, wanted: DemandId, slice: Duration) -> Result<Scanned> {
        let client = self.client()?;
        let mut session = client.session()?;
        let Some(message) = Self::dequeue(&mut session, COMPUTED_QUEUE, slice)? else {
            return Ok(Scanned::Nothing);
        };
        let demand = match Demand::deserialize(message.demand.as_bytes()) {
            Ok(d) => d,
            Err(e) => {
                // An undecodable result can never be claimed; drop it.
                Self::ack(&mut session, message.message_id, false)?;
                return Err(e.into());
            }
        };
        let id = demand.id();
        if id == wanted {
            Self::ack(&mut session, message.message_id, false)?;
            return Ok(Scanned::Mine(demand));
        }
        if self.router.lock().unwrap().claimable.contains(&id) {
            Self::ack(&mut session, message.message_id, false)?;
            let mut router = self.router.lock().unwrap();
            router.mailbox.insert(id, demand);
            return Ok(Scanned::Forwarded);
        }
        Self::ack(&mut session, message.message_id, true)?;
        Ok(Scanned::Requeued(id))
    }
}

impl TransportAgent for QueueAgent {
    fn connect(&self, config: &TransportConfig) -> Result<()> {
        let persistent = config.flag("queue.persistent", true)?;
        let client = WireClient::connect(&config.endpoint)?;
        *self.persistent.write().unwrap() = persistent;
        *self.client.write().unwrap() = Some(Arc::new(client));
        Ok(())
    }

    fn disconnect(&self) -> Result<()> {
        if let Some(c) = self.client.write().unwrap().take() {
            c.close();
        }
        Ok(())
    }

    fn write_demand(&self, demand: &Demand) -> Result<()> {
        require_pending(demand)?;
        self.enqueue(PENDING_QUEUE, demand)?;
        self.router.lock().unwrap().claimable.insert(demand.id());
        Ok(())
    }

    fn take_pending(&self, timeout: Duration) -> Result<Option<Demand>> {
        let client = self.client()?;
        let mut session = client.session()?;
        let Some(message) = Self::dequeue(&mut session, PENDING_QUEUE, timeout)? else {
            return Ok(None);
        };
        let decoded = Demand::deserialize(message.demand.as_bytes());
        Self::ack(&mut session, message.message_id, false)?;
        let demand = decoded?;
        require_pending(&demand).map_err(|_| {
            TransportError::Protocol("computed demand found on the pending queue".into())
        })?;
        Ok(Some(demand))
    }

    fn write_result(&self, demand: &Demand) -> Result<()> {
        require_computed(demand)?;
        self.enqueue(COMPUTED_QUEUE, demand)
    }

    fn take_result(
        &self,
        signature: &DemandSignature,
        timeout: Duration,
    ) -> Result<Option<Demand>> {
        let wanted = signature.id;
        let deadline = Instant::now() + timeout;
        let mut lapped: HashSet<DemandId> = HashSet::new();
        let mut router = self.router.lock().unwrap();
        router.claimable.insert(wanted);
        let outcome = loop {
            if let Some(d) = router.mailbox.remove(&wanted) {
                break Ok(Some(d));
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                break Ok(None);
            }
            if router.scanning {
                router = self.routed.wait_timeout(router, left).unwrap().0;
                continue;
            }
            router.scanning = true;
            drop(router);
            let scanned = self.scan_once(wanted, left.min(SCAN_SLICE));
            router = self.router.lock().unwrap();
            router.scanning = false;
            self.routed.notify_all();
            match scanned {
                Err(e) => break Err(e),
                Ok(Scanned::Mine(d)) => break Ok(Some(d)),
                Ok(Scanned::Nothing | Scanned::Forwarded) => {}
                Ok(Scanned::Requeued(id)) => {
                    if !lapped.insert(id) {
                        // Went all the way round the queue; let other waiters scan.
                        lapped.clear();
                        let pause =
                            LAP_PAUSE.min(deadline.saturating_duration_since(Instant::now()));
                        router = self.routed.wait_timeout(router, pause).unwrap().0;
                    }
                }
            }
        };
        if let Ok(None) | Err(_) = &outcome {
            // A result may have been parked just as we gave up.
            if let Some(d) = router.mailbox.remove(&wanted) {
                router.claimable.remove(&wanted);
                return Ok(Some(d));
            }
        }
        if let Ok(Some(_)) = &outcome {
            router.claimable.remove(&wanted);
        }
        outcome
    }
}
