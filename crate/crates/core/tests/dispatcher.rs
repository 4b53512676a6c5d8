mod common;

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use dmf::demand::{Demand, DemandId, DemandSignature, NodeId, ResultValue};
use dmf::transport::{
    connect_dispatcher, BackendRegistry, Endpoint, Result, TransportAgent, TransportConfig,
    TransportError, PASS_THROUGH, STRATEGY_OPTION,
};

#[derive(Default)]
struct Memory {
    connected: bool,
    pending: VecDeque<Demand>,
    computed: HashMap<DemandId, Demand>,
    calls: Vec<&'static str>,
}

/// In-memory agent sharing its state with the test.
#[derive(Clone, Default)]
struct MockAgent(Arc<Mutex<Memory>>);

impl TransportAgent for MockAgent {
    fn connect(&self, config: &TransportConfig) -> Result<()> {
        if config.flag("mock.refuse", false)? {
            return Err(TransportError::NotConnected);
        }
        let mut m = self.0.lock().unwrap();
        m.connected = true;
        m.calls.push("connect");
        Ok(())
    }

    fn disconnect(&self) -> Result<()> {
        let mut m = self.0.lock().unwrap();
        m.connected = false;
        m.calls.push("disconnect");
        Ok(())
    }

    fn write_demand(&self, demand: &Demand) -> Result<()> {
        let mut m = self.0.lock().unwrap();
        m.calls.push("write_demand");
        m.pending.push_back(demand.clone());
        Ok(())
    }

    fn take_pending(&self, _timeout: Duration) -> Result<Option<Demand>> {
        let mut m = self.0.lock().unwrap();
        m.calls.push("take_pending");
        Ok(m.pending.pop_front())
    }

    fn write_result(&self, demand: &Demand) -> Result<()> {
        let mut m = self.0.lock().unwrap();
        m.calls.push("write_result");
        m.computed.insert(demand.id(), demand.clone());
        Ok(())
    }

    fn take_result(
        &self,
        signature: &DemandSignature,
        _timeout: Duration,
    ) -> Result<Option<Demand>> {
        let mut m = self.0.lock().unwrap();
        m.calls.push("take_result");
        Ok(m.computed.remove(&signature.id))
    }
}

/// Hands back whatever result is stored, ignoring the signature asked for.
struct WrongResultAgent(Demand);

impl TransportAgent for WrongResultAgent {
    fn connect(&self, _: &TransportConfig) -> Result<()> {
        Ok(())
    }
    fn disconnect(&self) -> Result<()> {
        Ok(())
    }
    fn write_demand(&self, _: &Demand) -> Result<()> {
        Ok(())
    }
    fn take_pending(&self, _: Duration) -> Result<Option<Demand>> {
        Ok(None)
    }
    fn write_result(&self, _: &Demand) -> Result<()> {
        Ok(())
    }
    fn take_result(&self, _: &DemandSignature, _: Duration) -> Result<Option<Demand>> {
        Ok(Some(self.0.clone()))
    }
}

fn registry_with(agent: MockAgent) -> BackendRegistry {
    let mut r = BackendRegistry::with_builtin();
    r.register("mock", move || Box::new(agent.clone())).unwrap();
    r
}

fn mock_config() -> TransportConfig {
    TransportConfig::new("mock", Endpoint::localhost(1)).unwrap()
}

#[test]
fn pass_through_round_trip() {
    let agent = MockAgent::default();
    let d = connect_dispatcher(&registry_with(agent.clone()), &mock_config()).unwrap();
    let demand = common::pi_demand("gen", 5);
    let sig = d.dispatch(&demand).unwrap();
    assert_eq!(&sig, demand.signature());

    let taken = d.next_pending(Duration::ZERO).unwrap().unwrap();
    assert_eq!(taken, demand);
    let done = taken
        .into_computed(ResultValue::text("3.14159"), NodeId::new("w").unwrap(), 1)
        .unwrap();
    d.return_result(&done).unwrap();

    let got = d.obtain_result(&sig, Duration::ZERO).unwrap().unwrap();
    assert_eq!(got, done);
    assert_eq!(d.obtain_result(&sig, Duration::ZERO).unwrap(), None);
    d.disconnect().unwrap();

    let m = agent.0.lock().unwrap();
    assert_eq!(
        m.calls,
        [
            "connect",
            "write_demand",
            "take_pending",
            "write_result",
            "take_result",
            "take_result",
            "disconnect"
        ]
    );
    assert!(!m.connected);
}

#[test]
fn state_checks_happen_before_the_agent() {
    let agent = MockAgent::default();
    let d = connect_dispatcher(&registry_with(agent.clone()), &mock_config()).unwrap();
    let pending = common::pi_demand("gen", 5);
    let done = pending
        .clone()
        .into_computed(ResultValue::text("x"), NodeId::new("w").unwrap(), 0)
        .unwrap();
    assert!(matches!(d.dispatch(&done), Err(TransportError::State(_))));
    assert!(matches!(
        d.return_result(&pending),
        Err(TransportError::State(_))
    ));
    assert_eq!(agent.0.lock().unwrap().calls, ["connect"]);
}

#[test]
fn mismatched_result_is_a_protocol_error() {
    let other = common::pi_demand("gen", 5)
        .into_computed(ResultValue::text("3.14159"), NodeId::new("w").unwrap(), 0)
        .unwrap();
    let mut r = BackendRegistry::new();
    r.register("liar", move || Box::new(WrongResultAgent(other.clone())))
        .unwrap();
    let cfg = TransportConfig::new("liar", Endpoint::localhost(1)).unwrap();
    let d = connect_dispatcher(&r, &cfg).unwrap();
    let asked = common::pi_demand("gen", 5);
    assert!(matches!(
        d.obtain_result(asked.signature(), Duration::ZERO),
        Err(TransportError::Protocol(_))
    ));
}

#[test]
fn registry_lookup() {
    let r = registry_with(MockAgent::default());
    assert!(r.contains("space") && r.contains("queue") && r.contains("mock"));
    let mut names = r.names();
    names.sort();
    assert_eq!(names, ["mock", "queue", "space"]);

    let cfg = TransportConfig::new("nope", Endpoint::localhost(1)).unwrap();
    assert!(matches!(
        r.agent_for(&cfg),
        Err(TransportError::UnknownBackend(_))
    ));

    let mut r = r;
    assert!(matches!(
        r.register("space", || Box::new(MockAgent::default())),
        Err(TransportError::AlreadyRegistered(_))
    ));
}

#[test]
fn connect_failure_surfaces() {
    let r = registry_with(MockAgent::default());
    let cfg = mock_config().with_option("mock.refuse", "true");
    assert!(matches!(
        connect_dispatcher(&r, &cfg),
        Err(TransportError::NotConnected)
    ));
}

#[test]
fn strategy_option() {
    let agent = MockAgent::default();
    let r = registry_with(agent.clone());
    let cfg = mock_config().with_option(STRATEGY_OPTION, PASS_THROUGH);
    assert!(connect_dispatcher(&r, &cfg).is_ok());
    let cfg = mock_config().with_option(STRATEGY_OPTION, "round-robin");
    assert!(matches!(
        connect_dispatcher(&r, &cfg),
        Err(TransportError::Config(_))
    ));
    // the bad strategy was rejected before connecting
    assert_eq!(agent.0.lock().unwrap().calls, ["connect"]);
}

#[test]
fn unreachable_backend_is_a_connect_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    for backend in ["space", "queue"] {
        let cfg = TransportConfig::new(backend, Endpoint::new("127.0.0.1", port)).unwrap();
        let err = connect_dispatcher(&BackendRegistry::with_builtin(), &cfg)
            .err()
            .expect("nothing listens there");
        assert!(err.is_retriable(), "{backend}: {err}");
    }
}
