//! A broker with a small memory threshold spills persistent bodies to its
//! journal, then a second broker replays what was never acknowledged.

use std::time::Duration;

use dmf::queue::{AckMode, Broker, BrokerConfig, QueueName};
use dmf::transport::Endpoint;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut config = BrokerConfig::new(Endpoint::localhost(0));
    config.memory_threshold = 10;
    config.journal_path = Some(dir.path().to_path_buf());
    let q = QueueName::pending();

    {
        let broker = Broker::open(&config)?;
        for i in 0..100 {
            broker.enqueue(&q, format!("demand {i}").into_bytes(), true, None)?;
        }
        let c = broker.counters();
        println!(
            "resident {} spilled {}",
            c.resident_bodies, c.spilled_bodies
        );
        let s = broker.open_session();
        for _ in 0..30 {
            let d = broker
                .dequeue(s, &q, Duration::ZERO, AckMode::Client)?
                .unwrap();
            broker.ack(s, d.message_id)?;
        }
    }

    let broker = Broker::open(&config)?;
    println!("{:?}", broker.recovery_report());
    let s = broker.open_session();
    let next = broker
        .dequeue(s, &q, Duration::ZERO, AckMode::Auto)?
        .unwrap();
    println!(
        "next after restart: {}",
        String::from_utf8_lossy(&next.body)
    );
    Ok(())
}
