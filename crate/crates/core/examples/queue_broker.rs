//! Broker sessions: client acknowledgment, redelivery and deduplication.

use std::time::Duration;

use dmf::queue::{AckMode, Broker, BrokerConfig, BrokerError, QueueName};
use dmf::transport::Endpoint;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let broker = Broker::open(&BrokerConfig::new(Endpoint::localhost(0)))?;
    let q = QueueName::pending();
    for body in ["a", "b", "c"] {
        broker.enqueue(&q, body.into(), false, Some(body.into()))?;
    }
    if let Err(BrokerError::Duplicate { key, .. }) =
        broker.enqueue(&q, "a".into(), false, Some("a".into()))
    {
        println!("rejected second copy of {key:?}");
    }

    let careless = broker.open_session();
    let first = broker
        .dequeue(careless, &q, Duration::ZERO, AckMode::Client)?
        .unwrap();
    println!(
        "session {careless:?} holds {:?} unacked",
        String::from_utf8_lossy(&first.body)
    );
    broker.close_session(careless);

    let careful = broker.open_session();
    while let Some(d) = broker.dequeue(careful, &q, Duration::ZERO, AckMode::Client)? {
        println!("got {:?}", String::from_utf8_lossy(&d.body));
        broker.ack(careful, d.message_id)?;
    }
    println!("{:?}", broker.counters());
    Ok(())
}
