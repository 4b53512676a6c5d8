//! Generator and worker nodes, the Pi workload and properties-file startup.
//!
//! Nodes only see a [`DemandDispatcher`]; the backend comes from the
//! transport file's `transport.backend` through the registry.

mod config;
mod generator;
pub mod pi;
mod worker;

use std::fs;
use std::io::Write;
use std::sync::Arc;

use thiserror::Error;

pub use config::{
    load_node_config, load_transport_config, transport_from_properties, ConfigError,
    GeneratorSettings, NodeConfig, Properties, Role, WorkerSettings, DEFAULT_DEADLINE,
};
pub use generator::{run_workload, shutdown_workers, Workload, WorkloadReport, REPORT_HEADER};
pub use worker::{
    Worker, WorkerCounters, WorkerExit, WorkerOptions, WorkerSnapshot, POLL_INTERVAL, PONG,
    SHUTDOWN_ACK,
};

use crate::transport::{connect_dispatcher, BackendRegistry, DemandDispatcher, TransportError};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("{node} is configured as a {actual}, not a {wanted}")]
    WrongRole {
        node: String,
        wanted: &'static str,
        actual: &'static str,
    },
    #[error("writing {path}: {source}")]
    Output {
        path: String,
        source: std::io::Error,
    },
}

fn role_name(role: &Role) -> &'static str {
    match role {
        Role::Generator(_) => "generator",
        Role::Worker(_) => "worker",
    }
}

fn connect(config: &NodeConfig) -> Result<Arc<dyn DemandDispatcher>, NodeError> {
    Ok(connect_dispatcher(
        &BackendRegistry::with_builtin(),
        &config.transport,
    )?)
}

fn wrong_role(config: &NodeConfig, wanted: &'static str) -> NodeError {
    NodeError::WrongRole {
        node: config.node_id.to_string(),
        wanted,
        actual: role_name(&config.role),
    }
}

/// Builds a connected worker from its config; resource files are read here.
pub fn worker_from_config(config: &NodeConfig) -> Result<Worker, NodeError> {
    let Role::Worker(settings) = &config.role else {
        return Err(wrong_role(config, "worker"));
    };
    let mut options = WorkerOptions::default();
    for (name, path) in &settings.resources {
        let blob = fs::read(path).map_err(|e| ConfigError {
            path: path.clone(),
            line: None,
            key: Some(format!("worker.resource.{name}")),
            reason: format!("cannot read resource: {e}"),
        })?;
        options.resources.insert(name.clone(), blob);
    }
    Ok(Worker::new(
        config.node_id.clone(),
        connect(config)?,
        options,
    ))
}

/// Runs a worker until it acknowledges a shutdown demand.
pub fn run_worker(config: &NodeConfig) -> Result<WorkerExit, NodeError> {
    Ok(worker_from_config(config)?.run()?)
}

/// Runs the configured workload and writes the result strings to
/// `generator.results_path` when set.
pub fn run_generator(config: &NodeConfig) -> Result<WorkloadReport, NodeError> {
    let Role::Generator(settings) = &config.role else {
        return Err(wrong_role(config, "generator"));
    };
    let dispatcher = connect(config)?;
    let workload = Workload {
        node_id: config.node_id.clone(),
        threads: settings.threads,
        demands: settings.demands,
        pi_digits: settings.pi_digits,
        deadline: settings.deadline,
    };
    let mut report = run_workload(&dispatcher, &workload);
    report.backend = config.transport.backend_name.clone();
    report.workers = settings.workers;
    let _ = dispatcher.disconnect();
    if let Some(path) = &settings.results_path {
        let write = || -> std::io::Result<()> {
            let mut f = std::io::BufWriter::new(fs::File::create(path)?);
            for r in &report.results {
                writeln!(f, "{r}")?;
            }
            f.flush()
        };
        write().map_err(|source| NodeError::Output {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(report)
}
