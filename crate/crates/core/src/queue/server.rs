use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::broker::{
    AckMode, Broker, BrokerConfig, BrokerCounters, BrokerError, QueueName, SessionId,
};
use super::journal::RecoveryReport;
use crate::transport::Endpoint;
use crate::wire::{self, code, Acceptor, ConnectionSet, Request, Response, TaskCounter, WireError};

const MAX_WAIT: Duration = Duration::from_secs(600);

#[derive(Deserialize)]
struct EnqArgs {
    queue: QueueName,
    demand: String,
    #[serde(default)]
    persistent: bool,
    #[serde(default)]
    key: Option<String>,
}

#[derive(Deserialize)]
struct DeqArgs {
    queue: QueueName,
    #[serde(default)]
    timeout_ms: u64,
    #[serde(default)]
    ack: Option<AckMode>,
}

#[derive(Deserialize)]
struct AckArgs {
    message_id: u64,
    #[serde(default)]
    requeue: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMessage {
    pub message_id: u64,
    pub demand: String,
    pub enqueued_at: u64,
}

/// Counters reported by the `stats` op.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerStats {
    pub handlers: usize,
    pub connections: usize,
    #[serde(flatten)]
    pub counters: BrokerCounters,
}

struct Shared {
    broker: Broker,
    handlers: TaskCounter,
    connections: ConnectionSet,
}

fn broker_error(e: BrokerError) -> WireError {
    match e {
        BrokerError::FlowControl { .. } => WireError::new(code::FLOW_CONTROL, e.to_string(), true),
        BrokerError::Duplicate { .. } => WireError::new(code::DUPLICATE, e.to_string(), false),
        BrokerError::NotOwned(_) => WireError::new(code::ACK, e.to_string(), false),
        BrokerError::BadQueueName(_) => WireError::bad_request(e.to_string()),
        BrokerError::SessionClosed(_) => WireError::new(code::IO, e.to_string(), true),
        BrokerError::Journal(_) => WireError::new(code::IO, e.to_string(), true),
    }
}

impl Shared {
    fn stats(&self) -> BrokerStats {
        BrokerStats {
            handlers: self.handlers.get(),
            connections: self.connections.len(),
            counters: self.broker.counters(),
        }
    }

    fn apply(&self, session: SessionId, request: Request) -> Result<Value, WireError> {
        match request.op.as_str() {
            "enq" => {
                let a: EnqArgs = wire::parse_args(request.args)?;
                let id = self
                    .broker
                    .enqueue(&a.queue, a.demand.into_bytes(), a.persistent, a.key)
                    .map_err(broker_error)?;
                Ok(json!({ "message_id": id }))
            }
            "deq" => {
                let a: DeqArgs = wire::parse_args(request.args)?;
                let mode = a.ack.unwrap_or(self.broker.default_ack_mode());
                let wait = Duration::from_millis(a.timeout_ms).min(MAX_WAIT);
                let found = self
                    .broker
                    .dequeue(session, &a.queue, wait, mode)
                    .map_err(broker_error)?;
                let message = match found {
                    None => None,
                    Some(d) => Some(WireMessage {
                        message_id: d.message_id,
                        demand: String::from_utf8(d.body)
                            .map_err(|_| WireError::bad_request("message body is not UTF-8"))?,
                        enqueued_at: d.enqueued_at,
                    }),
                };
                Ok(json!({ "message": message }))
            }
            "ack" => {
                let a: AckArgs = wire::parse_args(request.args)?;
                if a.requeue {
                    let id = self
                        .broker
                        .requeue(session, a.message_id)
                        .map_err(broker_error)?;
                    Ok(json!({ "message_id": id }))
                } else {
                    self.broker
                        .ack(session, a.message_id)
                        .map_err(broker_error)?;
                    Ok(json!({ "message_id": a.message_id }))
                }
            }
            "stats" => Ok(serde_json::to_value(self.stats()).expect("stats serialize")),
            other => Err(WireError::bad_request(format!("unknown op {other:?}"))),
        }
    }
}

type SharedWriter = Arc<Mutex<BufWriter<TcpStream>>>;

fn respond(writer: &SharedWriter, response: &Response) -> io::Result<()> {
    let mut w = writer.lock().unwrap_or_else(|p| p.into_inner());
    wire::send_json(&mut *w, response)
}

/// Reader side of a connection. Blocking dequeues are handed to the pusher
/// thread so the reader keeps serving enqueues and acks meanwhile.
fn serve_connection(
    shared: &Arc<Shared>,
    stream: TcpStream,
    session: SessionId,
    pusher_guard: wire::TaskGuard,
) -> io::Result<()> {
    let writer: SharedWriter = Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?)));
    let (tx, rx) = mpsc::channel::<Request>();
    let pusher = {
        let shared = shared.clone();
        let writer = writer.clone();
        thread::Builder::new()
            .name("broker-push".into())
            .spawn(move || {
                let _guard = pusher_guard;
                for request in rx {
                    let req = request.req;
                    let response = Response::from_result(req, shared.apply(session, request));
                    if respond(&writer, &response).is_err() {
                        break;
                    }
                }
            })?
    };

    let mut reader = BufReader::new(stream);
    let outcome = (|| -> io::Result<()> {
        while let Some(frame) = wire::read_frame(&mut reader)? {
            let request = match serde_json::from_slice::<Request>(&frame) {
                Ok(r) => r,
                Err(e) => {
                    let err = WireError::bad_request(format!("unreadable request: {e}"));
                    respond(&writer, &Response::err(0, err))?;
                    continue;
                }
            };
            if request.op == "deq" {
                if tx.send(request).is_err() {
                    break;
                }
            } else {
                let req = request.req;
                respond(
                    &writer,
                    &Response::from_result(req, shared.apply(session, request)),
                )?;
            }
        }
        Ok(())
    })();
    shared.broker.close_session(session);
    drop(tx);
    let _ = pusher.join();
    shared.broker.forget_session(session);
    outcome
}

/// A running broker: one acceptor thread plus a reader and a pusher thread per
/// client connection.
pub struct BrokerServer {
    shared: Arc<Shared>,
    acceptor: Acceptor,
}

impl BrokerServer {
    pub fn start(config: BrokerConfig) -> io::Result<BrokerServer> {
        let broker = Broker::open(&config)?;
        let addr = config.listen.resolve()?;
        let listener = TcpListener::bind(addr)?;
        let shared = Arc::new(Shared {
            broker,
            handlers: TaskCounter::default(),
            connections: ConnectionSet::default(),
        });
        let conn_shared = shared.clone();
        let acceptor = Acceptor::spawn(listener, "broker", move |stream| {
            let reader_guard = conn_shared.handlers.enter();
            let pusher_guard = conn_shared.handlers.enter();
            let id = match conn_shared.connections.insert(&stream) {
                Ok(id) => id,
                Err(e) => {
                    log::warn!("cannot track connection: {e}");
                    return;
                }
            };
            let session = conn_shared.broker.open_session();
            let shared = conn_shared.clone();
            let spawned = thread::Builder::new()
                .name("broker-read".into())
                .spawn(move || {
                    let _guard = reader_guard;
                    if let Err(e) = serve_connection(&shared, stream, session, pusher_guard) {
                        log::debug!("broker connection closed: {e}");
                    }
                    shared.connections.remove(id);
                });
            if let Err(e) = spawned {
                log::error!("cannot spawn connection handler: {e}");
            }
        })?;
        log::info!("broker listening on {}", acceptor.local_addr());
        Ok(BrokerServer { shared, acceptor })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.acceptor.local_addr()
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::from(self.local_addr())
    }

    pub fn broker(&self) -> &Broker {
        &self.shared.broker
    }

    pub fn recovery_report(&self) -> &RecoveryReport {
        self.shared.broker.recovery_report()
    }

    pub fn stats(&self) -> BrokerStats {
        self.shared.stats()
    }

    /// Stops accepting and severs every client. Journal records are already
    /// on disk, so nothing else needs flushing.
    pub fn shutdown(&mut self) {
        self.acceptor.stop();
        self.shared.connections.sever_all();
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
