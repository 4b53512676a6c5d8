//! The tuple store on its own: templates, blocking take, leases and capacity.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use dmf::demand::{Demand, DemandKind, DemandPayload, NodeId, ResultValue};
use dmf::space::{EntryTemplate, Lease, NewEntry, SpaceStore};

fn pi(n: i64) -> Demand {
    Demand::new_pending(
        DemandKind::Procedural,
        DemandPayload::pi_digits(n),
        NodeId::new("gen").unwrap(),
    )
    .unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let store = Arc::new(SpaceStore::new(3));
    let a = pi(10);
    store.write(NewEntry::from_demand(&a), Lease::Forever)?;
    store.write(NewEntry::from_demand(&pi(20)), Lease::from_now(50))?;

    let peek = store
        .read(&EntryTemplate::pending(), Duration::ZERO)
        .unwrap();
    println!(
        "read {} (still stored: {})",
        peek.signature,
        store.stats().resident
    );

    let taker = {
        let store = store.clone();
        let id = a.id();
        thread::spawn(move || store.take(&EntryTemplate::computed(id), Duration::from_secs(2)))
    };
    let done = a.into_computed(ResultValue::text("3.1415926535"), NodeId::new("w")?, 1)?;
    store.write(NewEntry::from_demand(&done), Lease::Forever)?;
    let got = taker.join().unwrap().expect("woken by the write");
    println!(
        "took computed {} -> {:?}",
        got.signature,
        got.decode()?.result()
    );

    thread::sleep(Duration::from_millis(80));
    println!("after the lease ran out: {:?}", store.stats());

    for n in 0..4 {
        if let Err(e) = store.write(NewEntry::from_demand(&pi(30 + n)), Lease::Forever) {
            println!("write {n}: {e}");
        }
    }
    Ok(())
}
