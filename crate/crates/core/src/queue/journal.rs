//! Append-only broker journal.
//!
//! One record per line:
//!
//! ```text
//! A <message_id> <queue> <base64 demand bytes>
//! K <message_id>
//! ```
//!
//! Recovery is a pure fold over the records: an `A` adds a live message, a `K`
//! retires it. Unparseable lines are skipped and counted.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

pub const JOURNAL_FILE: &str = "broker.journal";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Record {
    Append {
        message_id: u64,
        queue: String,
        body: Vec<u8>,
    },
    Ack {
        message_id: u64,
    },
}

impl Record {
    pub fn encode(&self) -> String {
        match self {
            Record::Append {
                message_id,
                queue,
                body,
            } => format!("A {message_id} {queue} {}\n", BASE64.encode(body)),
            Record::Ack { message_id } => format!("K {message_id}\n"),
        }
    }

    pub fn parse(line: &str) -> Option<Record> {
        let mut parts = line.split(' ');
        match parts.next()? {
            "A" => {
                let message_id = parts.next()?.parse().ok()?;
                let queue = parts.next()?;
                let body = BASE64.decode(parts.next()?).ok()?;
                if queue.is_empty() || parts.next().is_some() {
                    return None;
                }
                Some(Record::Append {
                    message_id,
                    queue: queue.to_string(),
                    body,
                })
            }
            "K" => {
                let message_id = parts.next()?.parse().ok()?;
                if parts.next().is_some() {
                    return None;
                }
                Some(Record::Ack { message_id })
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LiveMessage {
    pub message_id: u64,
    pub queue: String,
    pub body: Vec<u8>,
}

/// Outcome of reading a journal back.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub records: usize,
    pub restored: usize,
    pub skipped: usize,
}

/// Reads every record; corrupt lines are skipped and counted.
pub fn read_records(path: &Path) -> io::Result<(Vec<Record>, usize)> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(e),
    };
    let mut records = Vec::new();
    let mut skipped = 0;
    let mut reader = BufReader::new(file);
    let mut buf = Vec::new();
    let mut lineno = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        lineno += 1;
        let complete = buf.last() == Some(&b'\n');
        let text = std::str::from_utf8(&buf)
            .ok()
            .map(|s| s.trim_end_matches('\n'));
        match text.filter(|_| complete).and_then(Record::parse) {
            Some(r) => records.push(r),
            None => {
                log::warn!(
                    "{}:{lineno}: skipping corrupt journal record",
                    path.display()
                );
                skipped += 1;
            }
        }
    }
    Ok((records, skipped))
}

/// Live messages after applying records in order, in append order.
pub fn fold(records: &[Record]) -> Vec<LiveMessage> {
    let mut live: BTreeMap<usize, LiveMessage> = BTreeMap::new();
    let mut position = std::collections::HashMap::new();
    for (i, r) in records.iter().enumerate() {
        match r {
            Record::Append {
                message_id,
                queue,
                body,
            } => {
                position.insert(*message_id, i);
                live.insert(
                    i,
                    LiveMessage {
                        message_id: *message_id,
                        queue: queue.clone(),
                        body: body.clone(),
                    },
                );
            }
            Record::Ack { message_id } => {
                if let Some(i) = position.remove(message_id) {
                    live.remove(&i);
                }
            }
        }
    }
    live.into_values().collect()
}

/// Where a spilled body lives inside the journal file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BodyLocation {
    offset: u64,
    len: usize,
}

pub struct Journal {
    path: PathBuf,
    writer: BufWriter<File>,
    reader: File,
    end: u64,
    sync: bool,
}

/// Live messages paired with where their bodies sit in the rewritten file.
pub type Recovered = Vec<(LiveMessage, BodyLocation)>;

impl Journal {
    /// Replays `dir/broker.journal`, rewrites it to hold only live records and
    /// opens it for appending. Returns the live messages with the location of
    /// each body in the rewritten file.
    pub fn recover(dir: &Path, sync: bool) -> io::Result<(Journal, Recovered, RecoveryReport)> {
        fs::create_dir_all(dir)?;
        let path = dir.join(JOURNAL_FILE);
        let (records, skipped) = read_records(&path)?;
        let live = fold(&records);

        let tmp = dir.join(format!("{JOURNAL_FILE}.compact"));
        let mut located = Vec::with_capacity(live.len());
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            let mut offset = 0u64;
            for m in live {
                let line = Record::Append {
                    message_id: m.message_id,
                    queue: m.queue.clone(),
                    body: m.body.clone(),
                }
                .encode();
                w.write_all(line.as_bytes())?;
                located.push((
                    m,
                    BodyLocation {
                        offset,
                        len: line.len(),
                    },
                ));
                offset += line.len() as u64;
            }
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }

        let report = RecoveryReport {
            records: records.len(),
            restored: located.len(),
            skipped,
        };
        Ok((Journal::open(&path, sync)?, located, report))
    }

    fn open(path: &Path, sync: bool) -> io::Result<Journal> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let end = file.metadata()?.len();
        Ok(Journal {
            path: path.to_path_buf(),
            writer: BufWriter::new(file),
            reader: File::open(path)?,
            end,
            sync,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write(&mut self, record: &Record) -> io::Result<BodyLocation> {
        let line = record.encode();
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        if self.sync {
            self.writer.get_ref().sync_data()?;
        }
        let loc = BodyLocation {
            offset: self.end,
            len: line.len(),
        };
        self.end += line.len() as u64;
        Ok(loc)
    }

    pub fn append(
        &mut self,
        message_id: u64,
        queue: &str,
        body: &[u8],
    ) -> io::Result<BodyLocation> {
        self.write(&Record::Append {
            message_id,
            queue: queue.to_string(),
            body: body.to_vec(),
        })
    }

    pub fn ack(&mut self, message_id: u64) -> io::Result<()> {
        self.write(&Record::Ack { message_id }).map(|_| ())
    }

    /// Reads a spilled body back from its append record.
    pub fn read_body(&self, loc: BodyLocation) -> io::Result<Vec<u8>> {
        let mut buf = vec![0u8; loc.len];
        self.reader.read_exact_at(&mut buf, loc.offset)?;
        let line = std::str::from_utf8(&buf)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?
            .trim_end_matches('\n');
        match Record::parse(line) {
            Some(Record::Append { body, .. }) => Ok(body),
            _ => Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("no append record at journal offset {}", loc.offset),
            )),
        }
    }
}

/// Ids acked by the records, for tests and tooling.
pub fn acked_ids(records: &[Record]) -> HashSet<u64> {
    records
        .iter()
        .filter_map(|r| match r {
            Record::Ack { message_id } => Some(*message_id),
            _ => None,
        })
        .collect()
}
