use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use crate::demand::{Demand, DemandSignature};

use super::{
    require_computed, require_pending, BackendRegistry, Result, TransportAgent, TransportConfig,
    TransportError,
};

/// Name of the only built-in scheduling strategy.
pub const PASS_THROUGH: &str = "pass-through";

/// Option key selecting the dispatcher strategy.
pub const STRATEGY_OPTION: &str = "dispatcher.strategy";

/// What generators and workers talk to. A dispatcher decides when and through
/// which agent demands move; it never exposes the agent itself.
pub trait DemandDispatcher: Send + Sync {
    fn dispatch(&self, demand: &Demand) -> Result<DemandSignature>;

    fn obtain_result(
        &self,
        signature: &DemandSignature,
        timeout: Duration,
    ) -> Result<Option<Demand>>;

    fn next_pending(&self, timeout: Duration) -> Result<Option<Demand>>;

    fn return_result(&self, computed: &Demand) -> Result<()>;

    fn disconnect(&self) -> Result<()>;
}

/// Forwards every call to its single agent.
pub struct PassThroughDispatcher {
    agent: Box<dyn TransportAgent>,
}

impl PassThroughDispatcher {
    pub fn new(agent: Box<dyn TransportAgent>) -> Self {
        PassThroughDispatcher { agent }
    }
}

impl DemandDispatcher for PassThroughDispatcher {
    fn dispatch(&self, demand: &Demand) -> Result<DemandSignature> {
        require_pending(demand)?;
        self.agent.write_demand(demand)?;
        Ok(demand.signature().clone())
    }

    fn obtain_result(
        &self,
        signature: &DemandSignature,
        timeout: Duration,
    ) -> Result<Option<Demand>> {
        let found = self.agent.take_result(signature, timeout)?;
        if let Some(d) = &found {
            if d.id() != signature.id {
                return Err(TransportError::Protocol(format!(
                    "asked for result {} but the agent returned {}",
                    signature.id,
                    d.id()
                )));
            }
        }
        Ok(found)
    }

    fn next_pending(&self, timeout: Duration) -> Result<Option<Demand>> {
        self.agent.take_pending(timeout)
    }

    fn return_result(&self, computed: &Demand) -> Result<()> {
        require_computed(computed)?;
        self.agent.write_result(computed)
    }

    fn disconnect(&self) -> Result<()> {
        self.agent.disconnect()
    }
}

pub type DispatcherFactory =
    Arc<dyn Fn(Box<dyn TransportAgent>) -> Box<dyn DemandDispatcher> + Send + Sync>;

/// Strategy name → dispatcher constructor, the same pattern as the backend
/// registry.
#[derive(Clone)]
pub struct DispatcherRegistry {
    strategies: HashMap<String, DispatcherFactory>,
}

impl Default for DispatcherRegistry {
    fn default() -> Self {
        let mut strategies: HashMap<String, DispatcherFactory> = HashMap::new();
        strategies.insert(
            PASS_THROUGH.to_string(),
            Arc::new(|agent| Box::new(PassThroughDispatcher::new(agent))),
        );
        DispatcherRegistry { strategies }
    }
}

impl DispatcherRegistry {
    pub fn register<F>(&mut self, name: &str, factory: F) -> Result<()>
    where
        F: Fn(Box<dyn TransportAgent>) -> Box<dyn DemandDispatcher> + Send + Sync + 'static,
    {
        if self.strategies.contains_key(name) {
            return Err(TransportError::AlreadyRegistered(name.to_string()));
        }
        self.strategies.insert(name.to_string(), Arc::new(factory));
        Ok(())
    }

    pub fn create(
        &self,
        name: &str,
        agent: Box<dyn TransportAgent>,
    ) -> Result<Box<dyn DemandDispatcher>> {
        let factory = self.strategies.get(name).ok_or_else(|| {
            TransportError::Config(format!("unknown dispatcher strategy {name:?}"))
        })?;
        Ok(factory(agent))
    }
}

/// Creates the configured backend agent and wraps it in the configured
/// dispatcher strategy (`dispatcher.strategy`, default pass-through).
pub fn connect_dispatcher(
    backends: &BackendRegistry,
    config: &TransportConfig,
) -> Result<Arc<dyn DemandDispatcher>> {
    let strategy = config.option(STRATEGY_OPTION).unwrap_or(PASS_THROUGH);
    let strategies = DispatcherRegistry::default();
    // Resolve the strategy first so a bad name does not leave a live connection.
    if !strategies.strategies.contains_key(strategy) {
        return Err(TransportError::Config(format!(
            "unknown dispatcher strategy {strategy:?}"
        )));
    }
    let agent = backends.agent_for(config)?;
    Ok(Arc::from(strategies.create(strategy, agent)?))
}
