//! Space snapshots.
//!
//! ```text
//! space-snapshot v1 <count>
//! <entry_id> <lease_expiry_ms|inf> <canonical demand>
//! ...
//! ```
//!
//! Written to a sibling temp file, fsync'd, then renamed over the target, so a
//! failed snapshot leaves the previous one intact.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::store::{Lease, NewEntry, SpaceEntry, SpaceStore};
use crate::demand::now_millis;

const HEADER: &str = "space-snapshot v1";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt snapshot {path} at line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SnapshotError + '_ {
    move |source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Persists every unexpired entry of `store`; returns how many were written.
pub fn snapshot(store: &SpaceStore, path: &Path) -> Result<usize, SnapshotError> {
    write_entries(&store.live_entries(), path)
}

pub(crate) fn write_entries(entries: &[SpaceEntry], path: &Path) -> Result<usize, SnapshotError> {
    let tmp = tmp_path(path);
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> io::Result<()> {
        writeln!(w, "{HEADER} {}", entries.len())?;
        for e in entries {
            match e.lease {
                Lease::Forever => writeln!(w, "{} inf {}", e.entry_id, e.demand)?,
                Lease::Until(t) => writeln!(w, "{} {} {}", e.entry_id, t, e.demand)?,
            }
        }
        w.flush()?;
        w.get_ref().sync_all()
    };
    if let Err(e) = write(&mut w) {
        drop(w);
        let _ = fs::remove_file(&tmp);
        return Err(SnapshotError::Io {
            path: tmp,
            source: e,
        });
    }
    drop(w);
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(entries.len())
}

/// Reads a snapshot, keeping only entries whose lease has not run out.
pub fn read_snapshot(path: &Path) -> Result<Vec<SpaceEntry>, SnapshotError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let corrupt = |line: usize, reason: String| SnapshotError::Corrupt {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let header = match lines.next() {
        Some(l) => l.map_err(io_err(path))?,
        None => return Err(corrupt(1, "missing header".into())),
    };
    let count: usize = header
        .strip_prefix(HEADER)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| corrupt(1, format!("bad header {header:?}")))?;

    let now = now_millis();
    let mut entries = Vec::with_capacity(count);
    let mut seen = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        seen += 1;
        let mut parts = line.splitn(3, ' ');
        let (Some(id), Some(lease), Some(demand)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(corrupt(lineno, "expected `<id> <lease> <demand>`".into()));
        };
        let entry_id: u64 = id
            .parse()
            .map_err(|_| corrupt(lineno, format!("bad entry id {id:?}")))?;
        let lease = match lease {
            "inf" => Lease::Forever,
            t => Lease::Until(
                t.parse()
                    .map_err(|_| corrupt(lineno, format!("bad lease {t:?}")))?,
            ),
        };
        if !lease.is_live_at(now) {
            continue;
        }
        let decoded = crate::demand::Demand::deserialize(demand.as_bytes())
            .map_err(|e| corrupt(lineno, e.to_string()))?;
        let index = NewEntry::from_demand(&decoded);
        entries.push(SpaceEntry {
            entry_id,
            demand: demand.to_string(),
            state: index.state,
            signature: index.signature,
            lease,
        });
    }
    if seen != count {
        return Err(corrupt(
            1,
            format!("header says {count} entries, found {seen}"),
        ));
    }
    Ok(entries)
}

/// Rebuilds a store from a snapshot file.
pub fn recover(path: &Path, capacity: usize) -> Result<SpaceStore, SnapshotError> {
    Ok(SpaceStore::from_entries(capacity, read_snapshot(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{Demand, DemandKind, DemandPayload, NodeId};
    use crate::space::store::EntryTemplate;
    use std::time::Duration;

    fn pending() -> Demand {
        Demand::new_pending(
            DemandKind::Procedural,
            DemandPayload::pi_digits(7),
            NodeId::new("gen").unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_hundred_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("space.snap");
        let store = SpaceStore::new(1000);
        for _ in 0..100 {
            store
                .write(NewEntry::from_demand(&pending()), Lease::Forever)
                .unwrap();
        }
        assert_eq!(snapshot(&store, &path).unwrap(), 100);
        let back = recover(&path, 1000).unwrap();
        assert_eq!(back.live_entries(), store.live_entries());
        // ids continue after the recovered maximum
        let id = back
            .write(NewEntry::from_demand(&pending()), Lease::Forever)
            .unwrap();
        assert_eq!(id, 101);
    }

    #[test]
    fn empty_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("space.snap");
        snapshot(&SpaceStore::new(5), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "space-snapshot v1 0\n");
        assert_eq!(recover(&path, 5).unwrap().resident(), 0);
    }

    #[test]
    fn expiry_spans_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("space.snap");
        let short = pending();
        let entries = vec![
            SpaceEntry {
                entry_id: 1,
                demand: short.to_canonical_string(),
                state: short.lifecycle(),
                signature: short.id(),
                lease: Lease::from_now(1),
            },
            SpaceEntry::from_new(2, NewEntry::from_demand(&pending()), Lease::Forever),
        ];
        write_entries(&entries, &path).unwrap();
        std::thread::sleep(Duration::from_secs(1));
        let back = recover(&path, 5).unwrap();
        let live = back.live_entries();
        assert_eq!(live.len(), 1);
        assert_eq!(live[0].entry_id, 2);
        assert!(back
            .read(&EntryTemplate::with_signature(short.id()), Duration::ZERO)
            .is_none());
    }

    #[test]
    fn failed_snapshot_keeps_previous() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("space.snap");
        snapshot(&SpaceStore::new(5), &path).unwrap();
        let before = fs::read(&path).unwrap();
        // a directory where the temp file should go makes creation fail
        fs::create_dir(tmp_path(&path)).unwrap();
        let store = SpaceStore::new(5);
        store
            .write(NewEntry::from_demand(&pending()), Lease::Forever)
            .unwrap();
        assert!(matches!(
            snapshot(&store, &path),
            Err(SnapshotError::Io { .. })
        ));
        assert_eq!(fs::read(&path).unwrap(), before);
    }

    #[test]
    fn count_mismatch_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("space.snap");
        fs::write(&path, "space-snapshot v1 2\n").unwrap();
        assert!(matches!(
            read_snapshot(&path),
            Err(SnapshotError::Corrupt { .. })
        ));
        fs::write(&path, "garbage\n").unwrap();
        assert!(matches!(
            read_snapshot(&path),
            Err(SnapshotError::Corrupt { line: 1, .. })
        ));
    }
}
