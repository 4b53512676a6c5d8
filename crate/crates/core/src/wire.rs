//! Length-prefixed JSON framing shared by the space server and the broker.
//!
//! Every message is a 4-byte big-endian length followed by a UTF-8 JSON body.
//! Requests are `{"op", "args", "req"}`; responses are `{"ok", "body", "req"}`
//! where a failed response body is `{"error", "retriable", "code"}`.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::transport::{Endpoint, TransportError};

/// Frames larger than this are treated as a protocol violation.
pub const MAX_FRAME_LEN: usize = 64 << 20;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);
/// Extra time a client waits beyond the server-side blocking timeout.
const RESPONSE_GRACE: Duration = Duration::from_secs(10);

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    if body.len() > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "frame too large",
        ));
    }
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream between frames.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut len[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "frame too large",
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: String,
    #[serde(default)]
    pub args: Value,
    pub req: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    pub body: Value,
    pub req: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub retriable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
}

/// Machine-readable error codes carried next to the message.
pub mod code {
    pub const CAPACITY_EXHAUSTED: &str = "capacity_exhausted";
    pub const DUPLICATE: &str = "duplicate";
    pub const FLOW_CONTROL: &str = "flow_control";
    pub const BAD_REQUEST: &str = "bad_request";
    pub const ACK: &str = "ack";
    pub const IO: &str = "io";
}

/// An error a server reports back to its client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireError {
    pub code: &'static str,
    pub message: String,
    pub retriable: bool,
}

impl WireError {
    pub fn new(code: &'static str, message: impl Into<String>, retriable: bool) -> Self {
        WireError {
            code,
            message: message.into(),
            retriable,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        WireError::new(code::BAD_REQUEST, message, false)
    }
}

impl Response {
    pub fn ok(req: u64, body: Value) -> Self {
        Response {
            ok: true,
            body,
            req,
        }
    }

    pub fn err(req: u64, e: WireError) -> Self {
        let body = ErrorBody {
            error: e.message,
            retriable: e.retriable,
            code: Some(e.code.to_string()),
        };
        Response {
            ok: false,
            body: serde_json::to_value(body).expect("error body serializes"),
            req,
        }
    }

    pub fn from_result(req: u64, r: Result<Value, WireError>) -> Self {
        match r {
            Ok(v) => Response::ok(req, v),
            Err(e) => Response::err(req, e),
        }
    }
}

pub fn send_json<T: Serialize>(w: &mut impl Write, msg: &T) -> io::Result<()> {
    let body = serde_json::to_vec(msg).map_err(io::Error::other)?;
    write_frame(w, &body)
}

/// Parses typed request arguments.
pub fn parse_args<T: for<'de> Deserialize<'de>>(args: Value) -> Result<T, WireError> {
    serde_json::from_value(args).map_err(|e| WireError::bad_request(format!("bad arguments: {e}")))
}

fn error_from_body(body: Value) -> TransportError {
    let parsed: ErrorBody = match serde_json::from_value(body) {
        Ok(b) => b,
        Err(e) => return TransportError::Protocol(format!("unreadable error body: {e}")),
    };
    match parsed.code.as_deref() {
        Some(code::CAPACITY_EXHAUSTED) => TransportError::StoreFull(parsed.error),
        Some(code::DUPLICATE) => TransportError::Duplicate(parsed.error),
        Some(code::FLOW_CONTROL) => TransportError::FlowControl(parsed.error),
        _ => TransportError::Remote {
            message: parsed.error,
            retriable: parsed.retriable,
        },
    }
}

/// A pool of request/response connections to one server.
///
/// Each in-flight call owns a connection for its duration, so blocking calls
/// from one thread never hold up calls from another.
pub struct WireClient {
    endpoint: Endpoint,
    addr: SocketAddr,
    idle: Mutex<Vec<TcpStream>>,
    next_req: AtomicU64,
}

impl WireClient {
    /// Resolves the endpoint and opens a first connection to prove it is
    /// reachable.
    pub fn connect(endpoint: &Endpoint) -> Result<WireClient, TransportError> {
        let addr = endpoint
            .resolve()
            .map_err(|source| TransportError::Connect {
                endpoint: endpoint.to_string(),
                source,
            })?;
        let client = WireClient {
            endpoint: endpoint.clone(),
            addr,
            idle: Mutex::new(Vec::new()),
            next_req: AtomicU64::new(1),
        };
        let first = client.open()?;
        client.idle.lock().unwrap().push(first);
        Ok(client)
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn open(&self) -> Result<TcpStream, TransportError> {
        let stream = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT).map_err(|source| {
            TransportError::Connect {
                endpoint: self.endpoint.to_string(),
                source,
            }
        })?;
        stream.set_nodelay(true).ok();
        Ok(stream)
    }

    /// Checks out a connection; it goes back to the pool when the session is
    /// dropped, unless it failed.
    pub fn session(&self) -> Result<Session<'_>, TransportError> {
        let pooled = self.idle.lock().unwrap().pop();
        let stream = match pooled {
            Some(s) => s,
            None => self.open()?,
        };
        Ok(Session {
            client: self,
            stream: Some(stream),
        })
    }

    /// One request on a pooled connection. `wait` is how long the server may
    /// block before answering.
    pub fn call(&self, op: &str, args: Value, wait: Duration) -> Result<Value, TransportError> {
        self.session()?.call(op, args, wait)
    }

    /// Drops every idle connection.
    pub fn close(&self) {
        for s in self.idle.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for WireClient {
    fn drop(&mut self) {
        self.close();
    }
}

pub struct Session<'a> {
    client: &'a WireClient,
    stream: Option<TcpStream>,
}

impl Session<'_> {
    pub fn call(&mut self, op: &str, args: Value, wait: Duration) -> Result<Value, TransportError> {
        let req = self.client.next_req.fetch_add(1, Ordering::Relaxed);
        let request = Request {
            op: op.to_string(),
            args,
            req,
        };
        let stream = self.stream.as_mut().ok_or(TransportError::NotConnected)?;
        let outcome = (|| -> io::Result<Option<Vec<u8>>> {
            stream.set_read_timeout(Some(wait + RESPONSE_GRACE))?;
            send_json(stream, &request)?;
            read_frame(stream)
        })();
        let frame = match outcome {
            Ok(Some(frame)) => frame,
            Ok(None) => return Err(self.fail(io::ErrorKind::UnexpectedEof.into())),
            Err(e) => return Err(self.fail(e)),
        };
        let response: Response = serde_json::from_slice(&frame).map_err(|e| {
            self.stream = None;
            TransportError::Protocol(format!("unreadable response: {e}"))
        })?;
        if response.req != req {
            self.stream = None;
            return Err(TransportError::Protocol(format!(
                "response for request {} arrived on request {req}",
                response.req
            )));
        }
        if response.ok {
            Ok(response.body)
        } else {
            Err(error_from_body(response.body))
        }
    }

    fn fail(&mut self, e: io::Error) -> TransportError {
        self.stream = None;
        // Idle peers of a dead connection are almost certainly dead too.
        self.client.close();
        TransportError::Io(e)
    }
}

impl Drop for Session<'_> {
    fn drop(&mut self) {
        if let Some(s) = self.stream.take() {
            self.client.idle.lock().unwrap().push(s);
        }
    }
}

/// Counts live connection-handler threads; decremented when the guard drops.
#[derive(Clone, Default)]
pub(crate) struct TaskCounter(Arc<AtomicUsize>);

impl TaskCounter {
    pub(crate) fn enter(&self) -> TaskGuard {
        self.0.fetch_add(1, Ordering::SeqCst);
        TaskGuard(self.0.clone())
    }

    pub(crate) fn get(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }
}

pub(crate) struct TaskGuard(Arc<AtomicUsize>);

impl Drop for TaskGuard {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Open server-side connections, kept so shutdown can sever them.
#[derive(Default)]
pub(crate) struct ConnectionSet {
    next: AtomicU64,
    open: Mutex<HashMap<u64, TcpStream>>,
}

impl ConnectionSet {
    pub(crate) fn insert(&self, stream: &TcpStream) -> io::Result<u64> {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        self.open.lock().unwrap().insert(id, stream.try_clone()?);
        Ok(id)
    }

    pub(crate) fn remove(&self, id: u64) {
        self.open.lock().unwrap().remove(&id);
    }

    pub(crate) fn len(&self) -> usize {
        self.open.lock().unwrap().len()
    }

    pub(crate) fn sever_all(&self) {
        for (_, s) in self.open.lock().unwrap().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// Accept loop running on its own thread until `stop` is raised.
pub(crate) struct Acceptor {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Acceptor {
    pub(crate) fn spawn<F>(listener: TcpListener, name: &str, on_conn: F) -> io::Result<Acceptor>
    where
        F: Fn(TcpStream) + Send + 'static,
    {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::Builder::new()
            .name(format!("{name}-acceptor"))
            .spawn(move || {
                for conn in listener.incoming() {
                    if flag.load(Ordering::SeqCst) {
                        break;
                    }
                    match conn {
                        Ok(stream) => {
                            stream.set_nodelay(true).ok();
                            on_conn(stream);
                        }
                        Err(e) => log::warn!("accept failed: {e}"),
                    }
                }
            })?;
        Ok(Acceptor {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    pub(crate) fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub(crate) fn stop(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Acceptor {
    fn drop(&mut self) {
        self.stop();
    }
}
