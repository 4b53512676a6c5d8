//! The shared entry store behind the space server.
//!
//! All entries live behind one mutex; blocked `take`/`read` callers wait on a
//! condition variable signalled by every write.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{now_millis, DecodeError, Demand, DemandId, Lifecycle};

/// When an entry stops being visible.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lease {
    Forever,
    /// Milliseconds since the Unix epoch.
    Until(u64),
}

impl Lease {
    pub fn from_now(ms: u64) -> Lease {
        Lease::Until(now_millis().saturating_add(ms))
    }

    pub fn is_live_at(self, now: u64) -> bool {
        match self {
            Lease::Forever => true,
            Lease::Until(expiry) => now < expiry,
        }
    }

    pub fn expiry(self) -> Option<u64> {
        match self {
            Lease::Forever => None,
            Lease::Until(t) => Some(t),
        }
    }
}

/// An entry as written by a client, before the store assigns an id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NewEntry {
    pub demand: String,
    pub state: Lifecycle,
    pub signature: DemandId,
}

impl NewEntry {
    pub fn from_demand(demand: &Demand) -> NewEntry {
        NewEntry {
            demand: demand.to_canonical_string(),
            state: demand.lifecycle(),
            signature: demand.id(),
        }
    }

    /// Decodes the embedded demand and checks the index fields against it.
    pub fn verify(&self) -> Result<Demand, SpaceError> {
        let demand = Demand::deserialize(self.demand.as_bytes())?;
        if demand.lifecycle() != self.state || demand.id() != self.signature {
            return Err(SpaceError::IndexMismatch);
        }
        Ok(demand)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpaceEntry {
    pub entry_id: u64,
    pub demand: String,
    pub state: Lifecycle,
    pub signature: DemandId,
    pub lease: Lease,
}

impl SpaceEntry {
    pub fn from_new(entry_id: u64, entry: NewEntry, lease: Lease) -> SpaceEntry {
        SpaceEntry {
            entry_id,
            demand: entry.demand,
            state: entry.state,
            signature: entry.signature,
            lease,
        }
    }

    pub fn decode(&self) -> Result<Demand, DecodeError> {
        Demand::deserialize(self.demand.as_bytes())
    }
}

/// Absent fields match anything.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryTemplate {
    #[serde(
        default,
        with = "opt_lifecycle",
        skip_serializing_if = "Option::is_none"
    )]
    pub state: Option<Lifecycle>,
    #[serde(default, with = "opt_id", skip_serializing_if = "Option::is_none")]
    pub signature: Option<DemandId>,
}

impl EntryTemplate {
    pub fn any() -> Self {
        EntryTemplate::default()
    }

    pub fn pending() -> Self {
        EntryTemplate {
            state: Some(Lifecycle::Pending),
            signature: None,
        }
    }

    pub fn computed(signature: DemandId) -> Self {
        EntryTemplate {
            state: Some(Lifecycle::Computed),
            signature: Some(signature),
        }
    }

    pub fn with_signature(signature: DemandId) -> Self {
        EntryTemplate {
            state: None,
            signature: Some(signature),
        }
    }

    pub fn matches(&self, entry: &SpaceEntry) -> bool {
        self.state.is_none_or(|s| s == entry.state)
            && self.signature.is_none_or(|s| s == entry.signature)
    }
}

pub(crate) mod opt_lifecycle {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::demand::Lifecycle;

    pub fn serialize<S: Serializer>(v: &Option<Lifecycle>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(l) => s.serialize_str(l.as_str()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Lifecycle>, D::Error> {
        let raw: Option<String> = Option::deserialize(d)?;
        raw.map(|s| {
            Lifecycle::parse(&s)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown state {s:?}")))
        })
        .transpose()
    }
}

pub(crate) mod opt_id {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::demand::DemandId;

    pub fn serialize<S: Serializer>(v: &Option<DemandId>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(id) => s.serialize_str(&id.to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DemandId>, D::Error> {
        let raw: Option<String> = Option::deserialize(d)?;
        raw.map(|s| {
            DemandId::parse_hex(&s)
                .ok_or_else(|| serde::de::Error::custom(format!("bad signature id {s:?}")))
        })
        .transpose()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpaceError {
    #[error("capacity of {capacity} entries exhausted")]
    CapacityExhausted { capacity: usize },
    #[error("an entry for {signature} in state {} already exists", state.as_str())]
    Duplicate {
        signature: DemandId,
        state: Lifecycle,
    },
    #[error("entry index fields disagree with the embedded demand")]
    IndexMismatch,
    #[error("lease must be positive")]
    ZeroLease,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub resident: usize,
    pub capacity: usize,
    pub writes: u64,
    pub takes: u64,
    pub reads: u64,
    pub expired: u64,
}

fn state_slot(s: Lifecycle) -> usize {
    match s {
        Lifecycle::Pending => 0,
        Lifecycle::Computed => 1,
    }
}

#[derive(Default)]
struct Inner {
    entries: HashMap<u64, SpaceEntry>,
    by_state: [BTreeSet<u64>; 2],
    by_key: HashMap<(DemandId, Lifecycle), u64>,
    next_id: u64,
    stats: StoreStats,
}

impl Inner {
    fn insert(&mut self, entry: SpaceEntry) {
        self.by_state[state_slot(entry.state)].insert(entry.entry_id);
        self.by_key
            .insert((entry.signature, entry.state), entry.entry_id);
        self.next_id = self.next_id.max(entry.entry_id + 1);
        self.entries.insert(entry.entry_id, entry);
    }

    fn remove(&mut self, id: u64) -> Option<SpaceEntry> {
        let entry = self.entries.remove(&id)?;
        self.by_state[state_slot(entry.state)].remove(&id);
        self.by_key.remove(&(entry.signature, entry.state));
        Some(entry)
    }

    fn purge_expired(&mut self, now: u64) {
        let dead: Vec<u64> = self
            .entries
            .values()
            .filter(|e| !e.lease.is_live_at(now))
            .map(|e| e.entry_id)
            .collect();
        for id in dead {
            self.remove(id);
            self.stats.expired += 1;
        }
    }

    /// Oldest live entry matching the template; expired entries met on the
    /// way are dropped.
    fn find(&mut self, template: &EntryTemplate, now: u64) -> Option<u64> {
        let candidates: Vec<u64> = match (template.signature, template.state) {
            (Some(sig), Some(state)) => self
                .by_key
                .get(&(sig, state))
                .copied()
                .into_iter()
                .collect(),
            (Some(sig), None) => {
                let mut ids: Vec<u64> = [Lifecycle::Pending, Lifecycle::Computed]
                    .iter()
                    .filter_map(|s| self.by_key.get(&(sig, *s)).copied())
                    .collect();
                ids.sort_unstable();
                ids
            }
            (None, Some(state)) => {
                let mut found = None;
                let mut dead = Vec::new();
                for id in &self.by_state[state_slot(state)] {
                    if self.entries[id].lease.is_live_at(now) {
                        found = Some(*id);
                        break;
                    }
                    dead.push(*id);
                }
                for id in dead {
                    self.remove(id);
                    self.stats.expired += 1;
                }
                return found;
            }
            (None, None) => {
                let mut ids: Vec<u64> = self.entries.keys().copied().collect();
                ids.sort_unstable();
                ids
            }
        };
        for id in candidates {
            if self.entries[&id].lease.is_live_at(now) {
                return Some(id);
            }
            self.remove(id);
            self.stats.expired += 1;
        }
        None
    }
}

/// Thread-safe tuple store with bounded capacity.
pub struct SpaceStore {
    inner: Mutex<Inner>,
    changed: Condvar,
    capacity: usize,
}

impl SpaceStore {
    /// `capacity` is clamped to at least one entry.
    pub fn new(capacity: usize) -> SpaceStore {
        SpaceStore {
            inner: Mutex::new(Inner {
                next_id: 1,
                ..Inner::default()
            }),
            changed: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    pub(crate) fn from_entries(capacity: usize, entries: Vec<SpaceEntry>) -> SpaceStore {
        let store = SpaceStore::new(capacity);
        {
            let mut inner = store.inner.lock().unwrap();
            for e in entries {
                inner.insert(e);
            }
        }
        store
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Stores an entry and returns its server-assigned id.
    pub fn write(&self, entry: NewEntry, lease: Lease) -> Result<u64, SpaceError> {
        if lease == Lease::Until(0) {
            return Err(SpaceError::ZeroLease);
        }
        let now = now_millis();
        let mut inner = self.lock();
        if inner.by_key.contains_key(&(entry.signature, entry.state)) {
            // The existing entry may only be blocking the key because it expired.
            let id = inner.by_key[&(entry.signature, entry.state)];
            if inner.entries[&id].lease.is_live_at(now) {
                return Err(SpaceError::Duplicate {
                    signature: entry.signature,
                    state: entry.state,
                });
            }
            inner.remove(id);
            inner.stats.expired += 1;
        }
        if inner.entries.len() >= self.capacity {
            inner.purge_expired(now);
            if inner.entries.len() >= self.capacity {
                return Err(SpaceError::CapacityExhausted {
                    capacity: self.capacity,
                });
            }
        }
        let entry_id = inner.next_id;
        inner.insert(SpaceEntry::from_new(entry_id, entry, lease));
        inner.stats.writes += 1;
        drop(inner);
        self.changed.notify_all();
        Ok(entry_id)
    }

    fn wait_for(
        &self,
        template: &EntryTemplate,
        timeout: Duration,
        remove: bool,
    ) -> Option<SpaceEntry> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.lock();
        loop {
            if let Some(id) = inner.find(template, now_millis()) {
                return if remove {
                    inner.stats.takes += 1;
                    inner.remove(id)
                } else {
                    inner.stats.reads += 1;
                    inner.entries.get(&id).cloned()
                };
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return None;
            }
            // Wake at least every 50 ms so lease expiry of the matched entry is
            // observed without a write.
            let (guard, _) = self
                .changed
                .wait_timeout(inner, left.min(Duration::from_millis(50)))
                .unwrap_or_else(|p| p.into_inner());
            inner = guard;
        }
    }

    /// Atomically removes one live matching entry, waiting up to `timeout`.
    pub fn take(&self, template: &EntryTemplate, timeout: Duration) -> Option<SpaceEntry> {
        self.wait_for(template, timeout, true)
    }

    /// Returns a copy of one live matching entry without removing it.
    pub fn read(&self, template: &EntryTemplate, timeout: Duration) -> Option<SpaceEntry> {
        self.wait_for(template, timeout, false)
    }

    /// Live entry count. Expired entries that have not been purged yet are
    /// included until the next purge.
    /// Live entries; expired ones are purged first.
    pub fn resident(&self) -> usize {
        let mut inner = self.lock();
        inner.purge_expired(now_millis());
        inner.entries.len()
    }

    pub fn stats(&self) -> StoreStats {
        let mut inner = self.lock();
        inner.purge_expired(now_millis());
        StoreStats {
            resident: inner.entries.len(),
            capacity: self.capacity,
            ..inner.stats
        }
    }

    /// Unexpired entries in id order.
    pub fn live_entries(&self) -> Vec<SpaceEntry> {
        let now = now_millis();
        let inner = self.lock();
        let mut live: Vec<SpaceEntry> = inner
            .entries
            .values()
            .filter(|e| e.lease.is_live_at(now))
            .cloned()
            .collect();
        live.sort_by_key(|e| e.entry_id);
        live
    }
}
