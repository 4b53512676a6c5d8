//! Builds demands of every kind, completes one and round-trips the encoding.

use dmf::demand::{
    ContextTag, Demand, DemandKind, DemandPayload, NodeId, ResultValue, SystemCommand,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let origin = NodeId::new("gen-1")?;
    let payloads = [
        DemandPayload::pi_digits(20),
        DemandPayload::Intensional {
            identifier: "nat".into(),
            context: vec![ContextTag::new("t", 7)],
        },
        DemandPayload::Resource {
            resource_name: "logo.png".into(),
        },
        DemandPayload::system(SystemCommand::Ping),
    ];
    for payload in payloads {
        let d = Demand::new_pending(payload.kind(), payload, origin.clone())?;
        println!("{:<12} {}", d.kind().as_str(), d.to_canonical_string());
    }

    let pending = Demand::new_pending(DemandKind::Procedural, DemandPayload::pi_digits(5), origin)?;
    let done =
        pending
            .clone()
            .into_computed(ResultValue::text("3.14159"), NodeId::new("worker-1")?, 2)?;
    assert_eq!(done.signature(), pending.signature());
    let bytes = done.serialize();
    assert_eq!(Demand::deserialize(&bytes)?, done);
    println!(
        "computed: {} bytes, result {:?}",
        bytes.len(),
        done.result()
    );
    Ok(())
}
