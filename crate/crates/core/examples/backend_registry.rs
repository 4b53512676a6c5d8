//! Registers a third backend next to the built-in ones and connects through
//! the registry by name.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use dmf::demand::{Demand, DemandKind, DemandPayload, DemandSignature, NodeId};
use dmf::transport::{
    connect_dispatcher, BackendRegistry, Endpoint, Result, TransportAgent, TransportConfig,
};

/// Keeps everything in process memory.
#[derive(Default)]
struct LocalAgent {
    pending: Mutex<VecDeque<Demand>>,
    computed: Mutex<Vec<Demand>>,
}

impl TransportAgent for LocalAgent {
    fn connect(&self, _: &TransportConfig) -> Result<()> {
        Ok(())
    }

    fn disconnect(&self) -> Result<()> {
        Ok(())
    }

    fn write_demand(&self, demand: &Demand) -> Result<()> {
        self.pending.lock().unwrap().push_back(demand.clone());
        Ok(())
    }

    fn take_pending(&self, _: Duration) -> Result<Option<Demand>> {
        Ok(self.pending.lock().unwrap().pop_front())
    }

    fn write_result(&self, demand: &Demand) -> Result<()> {
        self.computed.lock().unwrap().push(demand.clone());
        Ok(())
    }

    fn take_result(&self, sig: &DemandSignature, _: Duration) -> Result<Option<Demand>> {
        let mut computed = self.computed.lock().unwrap();
        let at = computed.iter().position(|d| d.signature() == sig);
        Ok(at.map(|i| computed.remove(i)))
    }
}

fn main() -> std::result::Result<(), Box<dyn std::error::Error>> {
    let mut registry = BackendRegistry::with_builtin();
    registry.register("local", || Box::new(LocalAgent::default()))?;
    println!("backends: {:?}", registry.names());

    let config = TransportConfig::new("local", Endpoint::localhost(0))?;
    let dispatcher = connect_dispatcher(&registry, &config)?;
    let demand = Demand::new_pending(
        DemandKind::Procedural,
        DemandPayload::pi_digits(3),
        NodeId::new("gen")?,
    )?;
    let sig = dispatcher.dispatch(&demand)?;
    let taken = dispatcher.next_pending(Duration::ZERO)?.expect("queued");
    let digits = dmf::node::pi::pi_digits(3)?;
    let done = taken.into_computed(dmf::demand::ResultValue::text(digits), NodeId::new("w")?, 0)?;
    dispatcher.return_result(&done)?;
    let got = dispatcher.obtain_result(&sig, Duration::ZERO)?;
    println!("result: {:?}", got.and_then(|d| d.result().cloned()));

    let unknown = TransportConfig::new("carrier-pigeon", Endpoint::localhost(0))?;
    if let Err(e) = connect_dispatcher(&registry, &unknown) {
        println!("carrier-pigeon: {e}");
    }
    Ok(())
}
