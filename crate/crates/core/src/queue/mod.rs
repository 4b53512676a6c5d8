//! Message-queue backend: a broker with FIFO point-to-point queues, client
//! acknowledgment, a persistent journal with spill-to-disk, plus the client
//! agent.

mod agent;
mod broker;
pub mod journal;
mod server;

pub use agent::QueueAgent;
pub use broker::{
    AckMode, Broker, BrokerConfig, BrokerCounters, BrokerError, Delivery, DeliveryState,
    QueueDepth, QueueName, SessionId, COMPUTED_QUEUE, PENDING_QUEUE,
};
pub use journal::RecoveryReport;
pub use server::{BrokerServer, BrokerStats, WireMessage};

/// Registry name of this backend.
pub const BACKEND_NAME: &str = "queue";
