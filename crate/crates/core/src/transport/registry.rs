use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::{Result, TransportAgent, TransportConfig, TransportError};

/// Builds an unconnected agent.
pub type AgentFactory = Arc<dyn Fn() -> Box<dyn TransportAgent> + Send + Sync>;

/// Name → agent factory map. Lookup is case-sensitive.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    factories: HashMap<String, AgentFactory>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        BackendRegistry::default()
    }

    /// A registry with `space` and `queue` registered.
    pub fn with_builtin() -> Self {
        let mut registry = BackendRegistry::new();
        registry
            .register(crate::space::BACKEND_NAME, || {
                Box::new(crate::space::SpaceAgent::new())
            })
            .expect("fresh registry");
        registry
            .register(crate::queue::BACKEND_NAME, || {
                Box::new(crate::queue::QueueAgent::new())
            })
            .expect("fresh registry");
        registry
    }

    pub fn register<F>(&mut self, name: &str, factory: F) -> Result<()>
    where
        F: Fn() -> Box<dyn TransportAgent> + Send + Sync + 'static,
    {
        if self.factories.contains_key(name) {
            return Err(TransportError::AlreadyRegistered(name.to_string()));
        }
        self.factories.insert(name.to_string(), Arc::new(factory));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.factories.keys().map(String::as_str).collect();
        names.sort_unstable();
        names
    }

    /// Instantiates the backend registered under `name` and connects it.
    pub fn create_agent(
        &self,
        name: &str,
        config: &TransportConfig,
    ) -> Result<Box<dyn TransportAgent>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| TransportError::UnknownBackend(name.to_string()))?;
        let agent = factory();
        agent.connect(config)?;
        Ok(agent)
    }

    /// [`create_agent`](Self::create_agent) using `config.backend_name`.
    pub fn agent_for(&self, config: &TransportConfig) -> Result<Box<dyn TransportAgent>> {
        self.create_agent(&config.backend_name, config)
    }
}

impl fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendRegistry")
            .field("backends", &self.names())
            .finish()
    }
}
