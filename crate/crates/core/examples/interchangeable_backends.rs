//! Runs one workload twice, changing only the backend name in the transport
//! config, and compares the results.

use std::thread;
use std::time::Duration;

use dmf::demand::NodeId;
use dmf::node::{run_workload, shutdown_workers, Worker, WorkerOptions, Workload, WorkloadReport};
use dmf::queue::{BrokerConfig, BrokerServer};
use dmf::space::{SpaceServer, SpaceServerConfig};
use dmf::transport::{connect_dispatcher, BackendRegistry, Endpoint, TransportConfig};

fn run(transport: &TransportConfig) -> Result<WorkloadReport, Box<dyn std::error::Error>> {
    let registry = BackendRegistry::with_builtin();
    let workers: Vec<_> = (0..3)
        .map(|i| {
            let w = Worker::new(
                NodeId::new(format!("w{i}")).unwrap(),
                connect_dispatcher(&registry, transport).unwrap(),
                WorkerOptions::default(),
            );
            thread::spawn(move || w.run())
        })
        .collect();
    let generator = connect_dispatcher(&registry, transport)?;
    let workload = Workload {
        node_id: NodeId::new("gen")?,
        threads: 4,
        demands: 300,
        pi_digits: 200,
        deadline: Duration::from_secs(30),
    };
    let report = run_workload(&generator, &workload);
    shutdown_workers(
        generator.as_ref(),
        &workload.node_id,
        workers.len(),
        Duration::from_secs(10),
    );
    for w in workers {
        w.join().unwrap()?;
    }
    Ok(report)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let port = std::net::TcpListener::bind("127.0.0.1:0")?
        .local_addr()?
        .port();
    let endpoint = Endpoint::localhost(port);

    let space = SpaceServer::start(SpaceServerConfig::new(endpoint.clone()))?;
    let a = run(&TransportConfig::new("space", endpoint.clone())?)?;
    drop(space);

    let broker = BrokerServer::start(BrokerConfig::new(endpoint.clone()))?;
    let b =
        run(&TransportConfig::new("queue", endpoint)?.with_option("queue.persistent", "false"))?;
    drop(broker);

    let (mut ra, mut rb) = (a.results.clone(), b.results.clone());
    ra.sort();
    rb.sort();
    println!(
        "space: received {} in {} ms",
        a.results_received, a.wall_millis
    );
    println!(
        "queue: received {} in {} ms",
        b.results_received, b.wall_millis
    );
    println!("identical results: {}", ra == rb);
    Ok(())
}
