//! The middleware-neutral transport contract.
//!
//! Generators and workers only ever see a [`DemandDispatcher`]; the dispatcher
//! owns one [`TransportAgent`], and agents are created by backend name through
//! a [`BackendRegistry`]. Swapping the tuple space for the queue broker is a
//! change to one configuration string.

mod config;
mod dispatcher;
mod registry;

use std::io;
use std::time::Duration;

use thiserror::Error;

use crate::demand::{DecodeError, Demand, DemandError, DemandSignature};

pub use config::{Endpoint, TransportConfig};
pub use dispatcher::{
    connect_dispatcher, DemandDispatcher, DispatcherFactory, DispatcherRegistry,
    PassThroughDispatcher, PASS_THROUGH, STRATEGY_OPTION,
};
pub use registry::{AgentFactory, BackendRegistry};

pub type Result<T, E = TransportError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cannot connect to {endpoint}: {source}")]
    Connect {
        endpoint: String,
        #[source]
        source: io::Error,
    },
    #[error("transport i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("agent is not connected")]
    NotConnected,
    #[error("store is full: {0}")]
    StoreFull(String),
    #[error("flow control rejected the message: {0}")]
    FlowControl(String),
    #[error("duplicate: {0}")]
    Duplicate(String),
    #[error("server error: {message}")]
    Remote { message: String, retriable: bool },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    State(#[from] DemandError),
    #[error("undecodable demand: {0}")]
    Decode(#[from] DecodeError),
    #[error("unknown backend {0:?}")]
    UnknownBackend(String),
    #[error("{0:?} is already registered")]
    AlreadyRegistered(String),
    #[error("invalid transport config: {0}")]
    Config(String),
}

impl TransportError {
    /// Whether retrying the same operation (possibly after reconnecting) can
    /// succeed.
    pub fn is_retriable(&self) -> bool {
        match self {
            TransportError::Connect { .. }
            | TransportError::Io(_)
            | TransportError::FlowControl(_) => true,
            TransportError::Remote { retriable, .. } => *retriable,
            _ => false,
        }
    }
}

/// Moves demands through one distribution backend.
///
/// Implementations hide every middleware detail (sockets, sessions, entry
/// wrapping, acknowledgments) behind these six operations and are safe to
/// share between threads.
pub trait TransportAgent: Send + Sync {
    /// Establishes the backend connection described by `config`.
    fn connect(&self, config: &TransportConfig) -> Result<()>;

    /// Releases every resource held for the backend. Later calls fail with
    /// [`TransportError::NotConnected`].
    fn disconnect(&self) -> Result<()>;

    /// Stores a pending demand for some worker to take.
    fn write_demand(&self, demand: &Demand) -> Result<()>;

    /// Removes and returns one pending demand. No two callers ever receive
    /// the same demand.
    fn take_pending(&self, timeout: Duration) -> Result<Option<Demand>>;

    /// Stores a computed demand for its generator.
    fn write_result(&self, demand: &Demand) -> Result<()>;

    /// Removes and returns the computed demand with this signature.
    fn take_result(&self, signature: &DemandSignature, timeout: Duration)
        -> Result<Option<Demand>>;
}

pub(crate) fn require_pending(demand: &Demand) -> Result<()> {
    if demand.is_pending() {
        Ok(())
    } else {
        Err(DemandError::AlreadyComputed(demand.id()).into())
    }
}

pub(crate) fn require_computed(demand: &Demand) -> Result<()> {
    if demand.is_pending() {
        Err(DemandError::NotComputed(demand.id()).into())
    } else {
        Ok(())
    }
}
