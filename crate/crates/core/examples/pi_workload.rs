//! A generator and two workers on threads, sharing a tuple-space server.
//!
//! `cargo run --example pi_workload -- 200 1000` sends 200 demands for 1000
//! digits each.

use std::thread;
use std::time::Duration;

use dmf::demand::NodeId;
use dmf::node::{run_workload, shutdown_workers, Worker, WorkerOptions, Workload, REPORT_HEADER};
use dmf::space::{SpaceServer, SpaceServerConfig};
use dmf::transport::{connect_dispatcher, BackendRegistry, Endpoint, TransportConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let demands = args.next().transpose()?.unwrap_or(100);
    let digits = args.next().transpose()?.unwrap_or(500) as i64;

    let server = SpaceServer::start(SpaceServerConfig::new(Endpoint::localhost(0)))?;
    let transport = TransportConfig::new("space", server.endpoint())?;
    let registry = BackendRegistry::with_builtin();

    let workers: Vec<_> = (0..2)
        .map(|i| {
            let w = Worker::new(
                NodeId::new(format!("worker-{i}")).unwrap(),
                connect_dispatcher(&registry, &transport).unwrap(),
                WorkerOptions::default(),
            );
            thread::spawn(move || w.run())
        })
        .collect();

    let generator = connect_dispatcher(&registry, &transport)?;
    let mut report = run_workload(
        &generator,
        &Workload {
            node_id: NodeId::new("gen")?,
            threads: 4,
            demands,
            pi_digits: digits,
            deadline: Duration::from_secs(60),
        },
    );
    report.backend = "space".into();
    report.workers = workers.len();
    println!("{REPORT_HEADER}\n{}", report.csv_row());
    if let Some(first) = report.results.first() {
        println!("{}...", &first[..first.len().min(40)]);
    }

    shutdown_workers(
        generator.as_ref(),
        &NodeId::new("gen")?,
        workers.len(),
        Duration::from_secs(10),
    );
    for w in workers {
        w.join().unwrap()?;
    }
    Ok(())
}
