use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde_json::{json, Value};

use super::server::{SpaceStats, WireEntry};
use super::store::EntryTemplate;
use crate::demand::{Demand, DemandSignature, Lifecycle};
use crate::transport::{
    require_computed, require_pending, Result, TransportAgent, TransportConfig, TransportError,
};
use crate::wire::WireClient;

/// Transport agent over a space server.
///
/// Pending demands are written as pending entries and taken with the
/// `{state: pending}` template; results are written as computed entries and
/// taken with `{state: computed, signature}`.
#[derive(Default)]
pub struct SpaceAgent {
    client: RwLock<Option<Arc<WireClient>>>,
}

impl SpaceAgent {
    pub fn new() -> Self {
        SpaceAgent::default()
    }

    fn client(&self) -> Result<Arc<WireClient>> {
        self.client
            .read()
            .unwrap()
            .clone()
            .ok_or(TransportError::NotConnected)
    }

    fn write(&self, demand: &Demand) -> Result<u64> {
        let entry = WireEntry {
            demand: demand.to_canonical_string(),
            state: demand.lifecycle(),
            signature: demand.id(),
            entry_id: None,
            lease_expiry: None,
        };
        let body = self
            .client()?
            .call("write", json!({ "entry": entry }), Duration::ZERO)?;
        body.get("entry_id")
            .and_then(Value::as_u64)
            .ok_or_else(|| TransportError::Protocol("write response has no entry_id".into()))
    }

    fn take(&self, template: EntryTemplate, timeout: Duration) -> Result<Option<Demand>> {
        let args = json!({ "template": template, "timeout_ms": timeout.as_millis() as u64 });
        let mut body = self.client()?.call("take", args, timeout)?;
        let entry = body
            .get_mut("entry")
            .map(Value::take)
            .unwrap_or(Value::Null);
        if entry.is_null() {
            return Ok(None);
        }
        let entry: WireEntry = serde_json::from_value(entry)
            .map_err(|e| TransportError::Protocol(format!("bad entry: {e}")))?;
        Ok(Some(Demand::deserialize(entry.demand.as_bytes())?))
    }

    /// Server counters, fetched over the wire.
    pub fn stats(&self) -> Result<SpaceStats> {
        let body = self.client()?.call("stats", json!({}), Duration::ZERO)?;
        serde_json::from_value(body).map_err(|e| TransportError::Protocol(e.to_string()))
    }
}

impl TransportAgent for SpaceAgent {
    fn connect(&self, config: &TransportConfig) -> Result<()> {
        let client = WireClient::connect(&config.endpoint)?;
        *self.client.write().unwrap() = Some(Arc::new(client));
        Ok(())
    }

    fn disconnect(&self) -> Result<()> {
        if let Some(c) = self.client.write().unwrap().take() {
            c.close();
        }
        Ok(())
    }

    fn write_demand(&self, demand: &Demand) -> Result<()> {
        require_pending(demand)?;
        self.write(demand).map(|_| ())
    }

    fn take_pending(&self, timeout: Duration) -> Result<Option<Demand>> {
        let found = self.take(EntryTemplate::pending(), timeout)?;
        if let Some(d) = &found {
            if d.lifecycle() != Lifecycle::Pending {
                return Err(TransportError::Protocol(
                    "pending take returned a result".into(),
                ));
            }
        }
        Ok(found)
    }

    fn write_result(&self, demand: &Demand) -> Result<()> {
        require_computed(demand)?;
        self.write(demand).map(|_| ())
    }

    fn take_result(
        &self,
        signature: &DemandSignature,
        timeout: Duration,
    ) -> Result<Option<Demand>> {
        self.take(EntryTemplate::computed(signature.id), timeout)
    }
}
