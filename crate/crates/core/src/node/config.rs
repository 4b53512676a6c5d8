//! `key=value` properties files for node and transport configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::demand::NodeId;
use crate::transport::{Endpoint, TransportConfig};

#[derive(Debug, Error)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub key: Option<String>,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.path.display())?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
        }
        if let Some(key) = &self.key {
            write!(f, ": {key}")?;
        }
        write!(f, ": {}", self.reason)
    }
}

/// A parsed properties file. Each value remembers the line it came from.
#[derive(Clone, Debug)]
pub struct Properties {
    path: PathBuf,
    entries: BTreeMap<String, (String, usize)>,
}

impl Properties {
    pub fn parse(path: &Path, text: &str) -> Result<Properties, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |key: Option<&str>, reason: &str| ConfigError {
                path: path.to_path_buf(),
                line: Some(i + 1),
                key: key.map(str::to_string),
                reason: reason.to_string(),
            };
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(None, "expected key=value"));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(err(None, "empty key"));
            }
            if entries
                .insert(key.to_string(), (value.trim().to_string(), i + 1))
                .is_some()
            {
                return Err(err(Some(key), "key given twice"));
            }
        }
        Ok(Properties {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Properties, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: None,
            key: None,
            reason: format!("cannot read: {e}"),
        })?;
        Properties::parse(path, &text)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn error(&self, key: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError {
            path: self.path.clone(),
            line: self.entries.get(key).map(|(_, l)| *l),
            key: Some(key.to_string()),
            reason: reason.into(),
        }
    }

    pub fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key)
            .ok_or_else(|| self.error(key, "missing required key"))
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| self.error(key, format!("cannot parse {v:?}: {e}"))),
        }
    }

    pub fn parsed_required<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.required(key)?;
        Ok(self.parsed(key)?.expect("present"))
    }

    /// Resolves a path value relative to this file's directory.
    pub fn path_value(&self, key: &str) -> Option<PathBuf> {
        let p = Path::new(self.get(key)?);
        if p.is_absolute() {
            return Some(p.to_path_buf());
        }
        let base = self.path.parent().unwrap_or(Path::new("."));
        Some(base.join(p))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorSettings {
    pub threads: usize,
    pub demands: usize,
    pub pi_digits: i64,
    pub persistent: bool,
    /// Worker count recorded in the report line; the generator does not
    /// start workers itself.
    pub workers: usize,
    pub deadline: Duration,
    pub results_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkerSettings {
    /// Named blobs served to resource demands.
    pub resources: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Role {
    Generator(GeneratorSettings),
    Worker(WorkerSettings),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeConfig {
    pub node_id: NodeId,
    pub role: Role,
    pub transport: TransportConfig,
}

pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(30);

const RESOURCE_PREFIX: &str = "worker.resource.";

/// Reads a transport properties file: `transport.backend`,
/// `transport.endpoint`, and every other key as a backend option.
pub fn load_transport_config(path: &Path) -> Result<TransportConfig, ConfigError> {
    let props = Properties::load(path)?;
    transport_from_properties(&props)
}

pub fn transport_from_properties(props: &Properties) -> Result<TransportConfig, ConfigError> {
    let backend = props.required("transport.backend")?;
    let endpoint: Endpoint = props.parsed_required("transport.endpoint")?;
    let mut config = TransportConfig::new(backend, endpoint)
        .map_err(|e| props.error("transport.backend", e.to_string()))?;
    for key in props.keys() {
        if !key.starts_with("transport.") {
            config = config.with_option(key, props.get(key).expect("listed key"));
        }
    }
    Ok(config)
}

pub fn load_node_config(path: &Path) -> Result<NodeConfig, ConfigError> {
    let props = Properties::load(path)?;
    let node_id = NodeId::new(props.required("node.id")?)
        .map_err(|e| props.error("node.id", e.to_string()))?;
    let role_name = props.required("node.role")?;
    props.required("node.transport.config")?;
    let transport_path = props
        .path_value("node.transport.config")
        .expect("checked above");
    let mut transport = load_transport_config(&transport_path)?;

    let generator_keys: Vec<&str> = props
        .keys()
        .filter(|k| k.starts_with("generator."))
        .collect();
    let worker_keys: Vec<&str> = props.keys().filter(|k| k.starts_with("worker.")).collect();
    let role = match role_name {
        "generator" => {
            if let Some(k) = worker_keys.first() {
                return Err(props.error(k, "worker key in a generator config"));
            }
            let threads: usize = props.parsed_required("generator.threads")?;
            if threads == 0 {
                return Err(props.error("generator.threads", "must be at least 1"));
            }
            let pi_digits: i64 = props.parsed_required("generator.pi_digits")?;
            if pi_digits < 1 {
                return Err(props.error("generator.pi_digits", "must be positive"));
            }
            let persistent = props.parsed("generator.persistent")?.unwrap_or(true);
            if transport.option("queue.persistent").is_none() {
                transport = transport.with_option("queue.persistent", persistent.to_string());
            }
            Role::Generator(GeneratorSettings {
                threads,
                demands: props.parsed_required("generator.demands")?,
                pi_digits,
                persistent,
                workers: props.parsed("generator.workers")?.unwrap_or(0),
                deadline: props
                    .parsed::<u64>("generator.deadline_ms")?
                    .map(Duration::from_millis)
                    .unwrap_or(DEFAULT_DEADLINE),
                results_path: props.path_value("generator.results_path"),
            })
        }
        "worker" => {
            if let Some(k) = generator_keys.first() {
                return Err(props.error(k, "generator key in a worker config"));
            }
            let mut resources = BTreeMap::new();
            for key in worker_keys {
                let Some(name) = key.strip_prefix(RESOURCE_PREFIX) else {
                    return Err(props.error(key, "unknown worker key"));
                };
                resources.insert(name.to_string(), props.path_value(key).expect("listed key"));
            }
            Role::Worker(WorkerSettings { resources })
        }
        other => {
            return Err(props.error(
                "node.role",
                format!("expected generator or worker, got {other:?}"),
            ))
        }
    };
    Ok(NodeConfig {
        node_id,
        role,
        transport,
    })
}
