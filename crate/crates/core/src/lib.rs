//! Demand-driven distributed computation over interchangeable transports.

pub mod bench;
pub mod cli;
pub mod demand;
pub mod node;
pub mod queue;
pub mod space;
pub mod transport;
pub mod wire;
