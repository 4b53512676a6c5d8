#![allow(dead_code)]

pub mod procs;

use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use dmf::demand::{Demand, DemandKind, DemandPayload, NodeId};
use dmf::node::{Worker, WorkerCounters, WorkerExit, WorkerOptions};
use dmf::queue::{BrokerConfig, BrokerServer};
use dmf::space::{SpaceServer, SpaceServerConfig};
use dmf::transport::{
    connect_dispatcher, BackendRegistry, DemandDispatcher, Endpoint, TransportConfig,
    TransportError,
};

/// Rabinowitz–Wagon spigot: `"3."` and the first `n` decimals of pi.
pub fn spigot_pi(n: usize) -> String {
    let produce = n + 12;
    let len = produce * 10 / 3 + 1;
    let mut a = vec![2u64; len];
    let mut digits = String::with_capacity(produce);
    let mut held_nines = 0;
    let mut predigit: Option<u64> = None;
    for _ in 0..produce {
        let mut carry = 0u64;
        for i in (0..len).rev() {
            let num = a[i] * 10 + carry * (i as u64 + 1);
            let den = 2 * i as u64 + 1;
            a[i] = num % den;
            carry = num / den;
        }
        a[0] = carry % 10;
        match carry / 10 {
            9 => held_nines += 1,
            10 => {
                digits.push_str(&(predigit.unwrap_or(0) + 1).to_string());
                digits.extend(std::iter::repeat_n('0', held_nines));
                predigit = Some(0);
                held_nines = 0;
            }
            q => {
                if let Some(p) = predigit {
                    digits.push_str(&p.to_string());
                }
                digits.extend(std::iter::repeat_n('9', held_nines));
                predigit = Some(q);
                held_nines = 0;
            }
        }
    }
    digits.truncate(n + 1);
    assert_eq!(digits.len(), n + 1, "spigot ran short");
    format!("{}.{}", &digits[..1], &digits[1..])
}

pub fn any_port() -> Endpoint {
    Endpoint::new("127.0.0.1", 0)
}

pub fn space_server(capacity: usize) -> SpaceServer {
    let mut config = SpaceServerConfig::new(any_port());
    config.capacity = capacity;
    SpaceServer::start(config).expect("space server starts")
}

pub fn broker(config: impl FnOnce(&mut BrokerConfig)) -> BrokerServer {
    let mut c = BrokerConfig::new(any_port());
    config(&mut c);
    BrokerServer::start(c).expect("broker starts")
}

/// A running server of either backend.
pub enum Server {
    Space(SpaceServer),
    Queue(BrokerServer),
}

impl Server {
    pub fn start(backend: &str) -> Server {
        match backend {
            "space" => Server::Space(space_server(100_000)),
            "queue" => Server::Queue(broker(|_| {})),
            other => panic!("no server for {other}"),
        }
    }

    pub fn transport(&self) -> TransportConfig {
        let (name, endpoint) = match self {
            Server::Space(s) => ("space", s.endpoint()),
            Server::Queue(s) => ("queue", s.endpoint()),
        };
        TransportConfig::new(name, endpoint).unwrap()
    }
}

pub fn dispatcher(transport: &TransportConfig) -> Arc<dyn DemandDispatcher> {
    connect_dispatcher(&BackendRegistry::with_builtin(), transport).expect("dispatcher connects")
}

pub struct RunningWorker {
    pub counters: Arc<WorkerCounters>,
    pub handle: JoinHandle<Result<WorkerExit, TransportError>>,
}

/// Worker loops on threads, each with its own connection.
pub fn spawn_workers(n: usize, transport: &TransportConfig, poll: Duration) -> Vec<RunningWorker> {
    (0..n)
        .map(|i| {
            let options = WorkerOptions {
                poll,
                ..WorkerOptions::default()
            };
            let worker = Worker::new(
                NodeId::new(format!("w{i}")).unwrap(),
                dispatcher(transport),
                options,
            );
            let counters = worker.counters();
            let handle = thread::spawn(move || worker.run());
            RunningWorker { counters, handle }
        })
        .collect()
}

pub fn pi_demand(origin: &str, n: i64) -> Demand {
    Demand::new_pending(
        DemandKind::Procedural,
        DemandPayload::pi_digits(n),
        NodeId::new(origin).unwrap(),
    )
    .unwrap()
}

pub mod arb {
    use dmf::demand::{
        ContextTag, Demand, DemandId, DemandPayload, DemandSignature, NodeId, ResultValue,
        SystemCommand,
    };
    use num_bigint::{BigInt, Sign};
    use proptest::collection::{btree_map, vec};
    use proptest::prelude::*;

    pub fn node_id() -> impl Strategy<Value = NodeId> {
        "\\PC{1,16}".prop_map(|s| NodeId::new(s).unwrap())
    }

    pub fn signature() -> impl Strategy<Value = DemandSignature> {
        (any::<u128>(), node_id(), any::<u64>()).prop_map(|(id, origin, created_at)| {
            DemandSignature {
                id: DemandId::from_u128(id),
                origin,
                created_at,
            }
        })
    }

    pub fn payload() -> impl Strategy<Value = DemandPayload> {
        prop_oneof![
            any::<i64>().prop_map(DemandPayload::pi_digits),
            ("\\PC{0,12}", btree_map("\\PC{0,8}", any::<i64>(), 0..4)).prop_map(
                |(identifier, ctx)| DemandPayload::Intensional {
                    identifier,
                    context: ctx
                        .into_iter()
                        .map(|(d, t)| ContextTag::new(d, t))
                        .collect(),
                }
            ),
            "\\PC{0,24}".prop_map(|resource_name| DemandPayload::Resource { resource_name }),
            prop_oneof![
                Just(SystemCommand::Ping),
                Just(SystemCommand::Shutdown),
                Just(SystemCommand::ReportStats)
            ]
            .prop_map(DemandPayload::system),
        ]
    }

    pub fn result() -> impl Strategy<Value = ResultValue> {
        prop_oneof![
            any::<String>().prop_map(ResultValue::Text),
            (any::<bool>(), vec(any::<u8>(), 0..40)).prop_map(|(neg, mag)| {
                let sign = if neg { Sign::Minus } else { Sign::Plus };
                ResultValue::Integer(BigInt::from_bytes_be(sign, &mag))
            }),
            vec(any::<u8>(), 0..64).prop_map(ResultValue::Bytes),
            any::<String>().prop_map(ResultValue::Fault),
        ]
    }

    /// Pending or computed demands of every kind.
    pub fn demand() -> impl Strategy<Value = Demand> {
        (
            signature(),
            payload(),
            proptest::option::of((result(), node_id(), any::<u64>())),
        )
            .prop_map(|(sig, payload, done)| {
                let d = Demand::pending_with_signature(payload.kind(), payload, sig).unwrap();
                match done {
                    None => d,
                    Some((r, w, ms)) => d.into_computed(r, w, ms).unwrap(),
                }
            })
    }
}
