mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{pi_demand, spawn_workers, spigot_pi, Server};
use dmf::demand::{NodeId, ResultValue};
use dmf::node::pi::pi_digits;
use dmf::node::{run_workload, shutdown_workers, Workload};
use dmf::transport::DemandDispatcher;

fn workload(threads: usize, demands: usize, digits: i64) -> Workload {
    Workload {
        node_id: NodeId::new("gen").unwrap(),
        threads,
        demands,
        pi_digits: digits,
        deadline: Duration::from_secs(30),
    }
}

fn stop(d: &Arc<dyn DemandDispatcher>, workers: Vec<common::RunningWorker>) -> u64 {
    let n = workers.len();
    assert_eq!(
        shutdown_workers(
            d.as_ref(),
            &NodeId::new("ctl").unwrap(),
            n,
            Duration::from_secs(10)
        ),
        n
    );
    workers
        .into_iter()
        .map(|w| {
            w.handle.join().unwrap().unwrap();
            w.counters.snapshot().faults
        })
        .sum()
}

#[test]
fn machin_matches_spigot() {
    for n in [1, 5, 50, 500, 2000] {
        assert_eq!(pi_digits(n as i64).unwrap(), spigot_pi(n), "n = {n}");
    }
}

#[test]
fn bad_arguments_fault_without_killing_the_worker() {
    for backend in ["space", "queue"] {
        let server = Server::start(backend);
        let transport = server.transport();
        let workers = spawn_workers(1, &transport, Duration::from_millis(100));
        let gen = common::dispatcher(&transport);
        let bad: Vec<_> = (0..100).map(|_| pi_demand("gen", 0)).collect();
        for d in &bad {
            gen.dispatch(d).unwrap();
        }
        for d in &bad {
            let r = gen
                .obtain_result(d.signature(), Duration::from_secs(10))
                .unwrap()
                .expect("fault result");
            assert!(
                matches!(r.result(), Some(ResultValue::Fault(_))),
                "{backend}"
            );
        }
        let good = pi_demand("gen", 10);
        gen.dispatch(&good).unwrap();
        let r = gen
            .obtain_result(good.signature(), Duration::from_secs(10))
            .unwrap()
            .unwrap();
        assert_eq!(r.result(), Some(&ResultValue::text(spigot_pi(10))));
        assert_eq!(stop(&gen, workers), 100, "{backend}");
    }
}

#[test]
fn backends_give_identical_reports() {
    let mut reports = Vec::new();
    for backend in ["space", "queue"] {
        let server = Server::start(backend);
        let transport = server.transport();
        let workers = spawn_workers(2, &transport, Duration::from_millis(100));
        let gen = common::dispatcher(&transport);
        let report = run_workload(&gen, &workload(4, 25, 30));
        assert!(report.is_complete(), "{report:?}");
        stop(&gen, workers);
        reports.push(report);
    }
    let (a, b) = (&reports[0], &reports[1]);
    assert_eq!((a.demands_sent, a.results_received), (25, 25));
    assert_eq!(
        (b.demands_sent, b.results_received, b.faults),
        (a.demands_sent, a.results_received, a.faults)
    );
    let mut ra = a.results.clone();
    let mut rb = b.results.clone();
    ra.sort();
    rb.sort();
    assert_eq!(ra, rb);
    assert!(ra.iter().all(|r| *r == spigot_pi(30)));
}

#[test]
fn empty_workload_has_zero_throughput() {
    let server = Server::start("space");
    let gen = common::dispatcher(&server.transport());
    let report = run_workload(&gen, &workload(3, 0, 10));
    assert_eq!(report.demands_sent, 0);
    assert_eq!(report.throughput_per_s, 0.0);
    assert!(report.is_complete());
}

#[test]
fn uneven_split_sends_every_demand() {
    let server = Server::start("queue");
    let transport = server.transport();
    let workers = spawn_workers(2, &transport, Duration::from_millis(100));
    let gen = common::dispatcher(&transport);
    let report = run_workload(&gen, &workload(4, 7, 5));
    assert_eq!((report.demands_sent, report.results_received), (7, 7));
    stop(&gen, workers);
}

#[test]
fn missing_results_are_counted_not_fatal() {
    let server = Server::start("space");
    let gen = common::dispatcher(&server.transport());
    let mut w = workload(2, 4, 5);
    w.deadline = Duration::from_millis(200);
    let report = run_workload(&gen, &w);
    assert_eq!((report.demands_sent, report.missing), (4, 4));
    assert!(!report.is_complete());
    assert_eq!(report.throughput_per_s, 0.0);
}
