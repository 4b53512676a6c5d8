use std::collections::BTreeMap;
use std::fmt;
use std::net::{SocketAddr, ToSocketAddrs};
use std::str::FromStr;

use super::TransportError;

/// A `host:port` pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Endpoint {
            host: host.into(),
            port,
        }
    }

    pub fn localhost(port: u16) -> Self {
        Endpoint::new("127.0.0.1", port)
    }

    pub fn with_port(&self, port: u16) -> Self {
        Endpoint::new(self.host.clone(), port)
    }

    pub fn resolve(&self) -> std::io::Result<SocketAddr> {
        (self.host.as_str(), self.port)
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| {
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{self} did not resolve"),
                )
            })
    }
}

impl From<SocketAddr> for Endpoint {
    fn from(addr: SocketAddr) -> Self {
        Endpoint::new(addr.ip().to_string(), addr.port())
    }
}

impl FromStr for Endpoint {
    type Err = TransportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (host, port) = s
            .rsplit_once(':')
            .ok_or_else(|| TransportError::Config(format!("endpoint {s:?} is not host:port")))?;
        let host = host.trim_start_matches('[').trim_end_matches(']');
        if host.is_empty() {
            return Err(TransportError::Config(format!(
                "endpoint {s:?} has no host"
            )));
        }
        let port = port
            .parse::<u16>()
            .map_err(|_| TransportError::Config(format!("endpoint {s:?} has a bad port")))?;
        Ok(Endpoint::new(host, port))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.host.contains(':') {
            write!(f, "[{}]:{}", self.host, self.port)
        } else {
            write!(f, "{}:{}", self.host, self.port)
        }
    }
}

/// Which backend to use, where it lives, and backend-specific options such
/// as `space.capacity` or `queue.journal_path`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransportConfig {
    pub backend_name: String,
    pub endpoint: Endpoint,
    pub options: BTreeMap<String, String>,
}

impl TransportConfig {
    pub fn new(
        backend_name: impl Into<String>,
        endpoint: Endpoint,
    ) -> Result<Self, TransportError> {
        let backend_name = backend_name.into();
        if backend_name.is_empty() {
            return Err(TransportError::Config("backend name is empty".into()));
        }
        Ok(TransportConfig {
            backend_name,
            endpoint,
            options: BTreeMap::new(),
        })
    }

    pub fn with_option(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.options.insert(key.into(), value.into());
        self
    }

    pub fn option(&self, key: &str) -> Option<&str> {
        self.options.get(key).map(String::as_str)
    }

    /// Parses an option, falling back to `default` when it is absent.
    pub fn parsed_option<T: FromStr>(&self, key: &str, default: T) -> Result<T, TransportError> {
        match self.option(key) {
            None => Ok(default),
            Some(raw) => raw
                .trim()
                .parse()
                .map_err(|_| TransportError::Config(format!("option {key}={raw:?} is invalid"))),
        }
    }

    pub fn flag(&self, key: &str, default: bool) -> Result<bool, TransportError> {
        self.parsed_option(key, default)
    }
}
