use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::snapshot::{self, SnapshotError};
use super::store::{
    opt_id, opt_lifecycle, EntryTemplate, Lease, NewEntry, SpaceEntry, SpaceError, SpaceStore,
};
use crate::demand::{DemandId, Lifecycle};
use crate::transport::{Endpoint, TransportConfig, TransportError};
use crate::wire::{self, code, Acceptor, ConnectionSet, Request, Response, TaskCounter, WireError};

/// Upper bound on how long one blocking request may hold a handler.
const MAX_WAIT: Duration = Duration::from_secs(600);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpaceServerConfig {
    pub listen: Endpoint,
    pub capacity: usize,
    /// Lease for writes that do not name one; `None` means entries never expire.
    pub lease_default_ms: Option<u64>,
    pub snapshot_path: Option<PathBuf>,
    pub snapshot_interval_ms: u64,
}

impl SpaceServerConfig {
    pub fn new(listen: Endpoint) -> Self {
        SpaceServerConfig {
            listen,
            capacity: 100_000,
            lease_default_ms: None,
            snapshot_path: None,
            snapshot_interval_ms: 5_000,
        }
    }

    /// Reads `transport.endpoint` plus the `space.*` options.
    pub fn from_transport(config: &TransportConfig) -> Result<Self, TransportError> {
        let mut c = SpaceServerConfig::new(config.endpoint.clone());
        c.capacity = config.parsed_option("space.capacity", c.capacity)?;
        if c.capacity == 0 {
            return Err(TransportError::Config(
                "space.capacity must be at least 1".into(),
            ));
        }
        if let Some(ms) = config.option("space.lease_default_ms") {
            let ms: u64 = ms
                .parse()
                .map_err(|_| TransportError::Config(format!("space.lease_default_ms={ms:?}")))?;
            if ms == 0 {
                return Err(TransportError::Config(
                    "space.lease_default_ms must be positive".into(),
                ));
            }
            c.lease_default_ms = Some(ms);
        }
        c.snapshot_path = config.option("space.snapshot_path").map(PathBuf::from);
        c.snapshot_interval_ms =
            config.parsed_option("space.snapshot_interval_ms", c.snapshot_interval_ms)?;
        if c.snapshot_interval_ms == 0 {
            return Err(TransportError::Config(
                "space.snapshot_interval_ms must be positive".into(),
            ));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireEntry {
    pub demand: String,
    #[serde(with = "lifecycle")]
    pub state: Lifecycle,
    #[serde(with = "id")]
    pub signature: DemandId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lease_expiry: Option<u64>,
}

mod lifecycle {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Lifecycle, s: S) -> Result<S::Ok, S::Error> {
        opt_lifecycle::serialize(&Some(*v), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Lifecycle, D::Error> {
        opt_lifecycle::deserialize(d)?.ok_or_else(|| serde::de::Error::custom("state is required"))
    }
}

mod id {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DemandId, s: S) -> Result<S::Ok, S::Error> {
        opt_id::serialize(&Some(*v), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DemandId, D::Error> {
        opt_id::deserialize(d)?.ok_or_else(|| serde::de::Error::custom("signature is required"))
    }
}

impl From<&SpaceEntry> for WireEntry {
    fn from(e: &SpaceEntry) -> Self {
        WireEntry {
            demand: e.demand.clone(),
            state: e.state,
            signature: e.signature,
            entry_id: Some(e.entry_id),
            lease_expiry: e.lease.expiry(),
        }
    }
}

#[derive(Deserialize)]
struct WriteArgs {
    entry: WireEntry,
    #[serde(default)]
    lease_ms: Option<u64>,
}

#[derive(Deserialize)]
struct MatchArgs {
    #[serde(default)]
    template: EntryTemplate,
    #[serde(default)]
    timeout_ms: u64,
}

/// Counters reported by the `stats` op.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceStats {
    pub handlers: usize,
    pub connections: usize,
    pub resident: usize,
    pub capacity: usize,
    pub writes: u64,
    pub takes: u64,
    pub reads: u64,
    pub expired: u64,
}

struct Shared {
    store: SpaceStore,
    lease_default_ms: Option<u64>,
    handlers: TaskCounter,
    connections: ConnectionSet,
}

impl Shared {
    fn stats(&self) -> SpaceStats {
        let s = self.store.stats();
        SpaceStats {
            handlers: self.handlers.get(),
            connections: self.connections.len(),
            resident: s.resident,
            capacity: s.capacity,
            writes: s.writes,
            takes: s.takes,
            reads: s.reads,
            expired: s.expired,
        }
    }

    fn handle(&self, request: Request) -> Response {
        let req = request.req;
        Response::from_result(req, self.apply(request))
    }

    fn apply(&self, request: Request) -> Result<Value, WireError> {
        match request.op.as_str() {
            "write" => {
                let args: WriteArgs = wire::parse_args(request.args)?;
                let entry = NewEntry {
                    demand: args.entry.demand,
                    state: args.entry.state,
                    signature: args.entry.signature,
                };
                entry.verify().map_err(space_error)?;
                let lease = match args.lease_ms.or(self.lease_default_ms) {
                    Some(ms) => Lease::from_now(ms),
                    None => Lease::Forever,
                };
                if args.lease_ms == Some(0) {
                    return Err(space_error(SpaceError::ZeroLease));
                }
                let entry_id = self.store.write(entry, lease).map_err(space_error)?;
                Ok(json!({ "entry_id": entry_id }))
            }
            op @ ("take" | "read") => {
                let args: MatchArgs = wire::parse_args(request.args)?;
                let wait = Duration::from_millis(args.timeout_ms).min(MAX_WAIT);
                let found = if op == "take" {
                    self.store.take(&args.template, wait)
                } else {
                    self.store.read(&args.template, wait)
                };
                Ok(json!({ "entry": found.as_ref().map(WireEntry::from) }))
            }
            "stats" => Ok(serde_json::to_value(self.stats()).expect("stats serialize")),
            other => Err(WireError::bad_request(format!("unknown op {other:?}"))),
        }
    }
}

fn space_error(e: SpaceError) -> WireError {
    match e {
        SpaceError::CapacityExhausted { .. } => {
            WireError::new(code::CAPACITY_EXHAUSTED, e.to_string(), false)
        }
        SpaceError::Duplicate { .. } => WireError::new(code::DUPLICATE, e.to_string(), false),
        SpaceError::IndexMismatch | SpaceError::ZeroLease | SpaceError::Decode(_) => {
            WireError::bad_request(e.to_string())
        }
    }
}

fn serve_connection(shared: &Shared, stream: TcpStream) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(frame) = wire::read_frame(&mut reader)? {
        let response = match serde_json::from_slice::<Request>(&frame) {
            Ok(request) => shared.handle(request),
            Err(e) => Response::err(
                0,
                WireError::bad_request(format!("unreadable request: {e}")),
            ),
        };
        wire::send_json(&mut writer, &response)?;
    }
    Ok(())
}

struct Snapshotter {
    stop: Arc<(Mutex<bool>, Condvar)>,
    thread: JoinHandle<()>,
}

/// A running space server: one acceptor thread plus one handler thread per
/// client connection.
pub struct SpaceServer {
    shared: Arc<Shared>,
    acceptor: Acceptor,
    snapshot_path: Option<PathBuf>,
    snapshotter: Option<Snapshotter>,
    stopped: AtomicBool,
}

impl SpaceServer {
    /// Recovers from the snapshot file if one exists, then binds and serves.
    pub fn start(config: SpaceServerConfig) -> Result<SpaceServer, ServerStartError> {
        let store = match &config.snapshot_path {
            Some(path) if path.exists() => {
                let store = snapshot::recover(path, config.capacity)?;
                log::info!(
                    "recovered {} entries from {}",
                    store.resident(),
                    path.display()
                );
                store
            }
            _ => SpaceStore::new(config.capacity),
        };
        let addr = config.listen.resolve().map_err(ServerStartError::Bind)?;
        let listener = TcpListener::bind(addr).map_err(ServerStartError::Bind)?;
        let shared = Arc::new(Shared {
            store,
            lease_default_ms: config.lease_default_ms,
            handlers: TaskCounter::default(),
            connections: ConnectionSet::default(),
        });

        let conn_shared = shared.clone();
        let acceptor = Acceptor::spawn(listener, "space", move |stream| {
            let guard = conn_shared.handlers.enter();
            let id = match conn_shared.connections.insert(&stream) {
                Ok(id) => id,
                Err(e) => {
                    log::warn!("cannot track connection: {e}");
                    return;
                }
            };
            let shared = conn_shared.clone();
            let spawned = thread::Builder::new()
                .name("space-conn".into())
                .spawn(move || {
                    let _guard = guard;
                    if let Err(e) = serve_connection(&shared, stream) {
                        log::debug!("space connection closed: {e}");
                    }
                    shared.connections.remove(id);
                });
            if let Err(e) = spawned {
                log::error!("cannot spawn connection handler: {e}");
            }
        })
        .map_err(ServerStartError::Bind)?;

        let snapshotter = config.snapshot_path.clone().map(|path| {
            let stop = Arc::new((Mutex::new(false), Condvar::new()));
            let flag = stop.clone();
            let shared = shared.clone();
            let interval = Duration::from_millis(config.snapshot_interval_ms);
            let thread = thread::spawn(move || {
                let (lock, cv) = &*flag;
                let mut stopped = lock.lock().unwrap();
                loop {
                    let (guard, _) = cv.wait_timeout(stopped, interval).unwrap();
                    stopped = guard;
                    if *stopped {
                        break;
                    }
                    if let Err(e) = snapshot::snapshot(&shared.store, &path) {
                        log::error!("periodic snapshot failed: {e}");
                    }
                }
            });
            Snapshotter { stop, thread }
        });

        log::info!("space server listening on {}", acceptor.local_addr());
        Ok(SpaceServer {
            shared,
            acceptor,
            snapshot_path: config.snapshot_path,
            snapshotter,
            stopped: AtomicBool::new(false),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.acceptor.local_addr()
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::from(self.local_addr())
    }

    pub fn store(&self) -> &SpaceStore {
        &self.shared.store
    }

    pub fn stats(&self) -> SpaceStats {
        self.shared.stats()
    }

    /// Writes a snapshot now, if a snapshot path is configured.
    pub fn snapshot_now(&self) -> Result<Option<usize>, SnapshotError> {
        match &self.snapshot_path {
            Some(path) => snapshot::snapshot(&self.shared.store, path).map(Some),
            None => Ok(None),
        }
    }

    /// Stops accepting, severs every client and writes a final snapshot.
    pub fn shutdown(&mut self) -> Result<(), SnapshotError> {
        if self.stopped.swap(true, Ordering::SeqCst) {
            return Ok(());
        }
        self.acceptor.stop();
        self.shared.connections.sever_all();
        if let Some(s) = self.snapshotter.take() {
            *s.stop.0.lock().unwrap() = true;
            s.stop.1.notify_all();
            let _ = s.thread.join();
        }
        self.snapshot_now().map(|_| ())
    }
}

impl Drop for SpaceServer {
    fn drop(&mut self) {
        if let Err(e) = self.shutdown() {
            log::error!("final snapshot failed: {e}");
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServerStartError {
    #[error("cannot bind: {0}")]
    Bind(#[source] io::Error),
    #[error(transparent)]
    Recover(#[from] SnapshotError),
}
