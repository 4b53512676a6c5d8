//! Tuple-space backend: a networked entry store with template matching,
//! leases, a capacity bound and snapshot persistence, plus the client agent.

mod agent;
mod server;
pub mod snapshot;
mod store;

pub use agent::SpaceAgent;
pub use server::{ServerStartError, SpaceServer, SpaceServerConfig, SpaceStats, WireEntry};
pub use snapshot::SnapshotError;
pub use store::{EntryTemplate, Lease, NewEntry, SpaceEntry, SpaceError, SpaceStore, StoreStats};

/// Registry name of this backend.
pub const BACKEND_NAME: &str = "space";
