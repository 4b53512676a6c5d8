//! A small scaling experiment with thread workers. Writes rows.csv,
//! summary.csv and environment.txt to the directory given as the first
//! argument (default `bench-out`).

use std::path::PathBuf;

use dmf::bench::{run_experiment, write_outputs, ExperimentSpec, WorkerLaunch};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| "bench-out".into());
    let mut spec = ExperimentSpec::new(&["space", "queue"], &[1, 2, 4], WorkerLaunch::Threads);
    spec.demands_total = 100;
    spec.pi_digits = 1000;
    spec.repetitions = 2;

    let outcome = run_experiment(&spec)?;
    for d in &outcome.diagnostics {
        eprintln!("skipped {d}");
    }
    if let Some(summary) = write_outputs(&out, &outcome)? {
        println!("{}", summary.environment);
        for c in &summary.cells {
            println!(
                "{:<6} workers={} median={:.1}/s",
                c.backend,
                c.workers,
                c.median_throughput.unwrap_or(0.0)
            );
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
