//! Per-object append-only logs of local operations.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::error::StateError;
use crate::ids::ObjectId;
use crate::state_objects::Operation;

pub const DEFAULT_LOG_CAPACITY: usize = 1 << 16;

/// One replicated operation. A coalesced record stands for the
/// `coalesced_span` consecutive sequence numbers ending at `seq`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub object: ObjectId,
    pub seq: u64,
    pub coalesced_span: u32,
    pub op: Operation,
}

impl LogRecord {
    /// First sequence number covered by this record.
    pub fn first_seq(&self) -> u64 {
        self.seq + 1 - self.coalesced_span as u64
    }
}

/// Transmission bookkeeping kept next to each record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub record: LogRecord,
    pub first_sent: Option<u64>,
    pub last_sent: Option<u64>,
    pub transmissions: u32,
}

#[derive(Debug, Clone)]
pub struct ObjectLog {
    queue: VecDeque<LogEntry>,
    next_seq: u64,
    min_unpruned_seq: u64,
    /// Capacity counts original (uncoalesced) records.
    span_total: u64,
}

impl Default for ObjectLog {
    fn default() -> Self {
        Self { queue: VecDeque::new(), next_seq: 1, min_unpruned_seq: 1, span_total: 0 }
    }
}

impl ObjectLog {
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn min_unpruned_seq(&self) -> u64 {
        self.min_unpruned_seq
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Number of original operations still held, counting coalesced spans.
    pub fn span_len(&self) -> u64 {
        self.span_total
    }

    pub fn entries(&self) -> impl Iterator<Item = &LogEntry> + '_ {
        self.queue.iter()
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut LogEntry> + '_ {
        self.queue.iter_mut()
    }

    /// Position of the first never-transmitted entry. Entries are sent in
    /// seq order, so everything from here on is unsent.
    pub fn unsent_start(&self) -> usize {
        self.queue.iter().rposition(|e| e.transmissions > 0).map_or(0, |i| i + 1)
    }

    pub fn unsent_span(&self) -> u64 {
        self.queue.iter().skip(self.unsent_start()).map(|e| e.record.coalesced_span as u64).sum()
    }
}

/// Volatile log store for one instance.
#[derive(Debug, Clone)]
pub struct LogStore {
    logs: BTreeMap<ObjectId, ObjectLog>,
    capacity: usize,
    backpressure_drops: u64,
}

impl Default for LogStore {
    fn default() -> Self {
        Self::new(DEFAULT_LOG_CAPACITY)
    }
}

impl LogStore {
    pub fn new(capacity: usize) -> Self {
        Self { logs: BTreeMap::new(), capacity: capacity.max(1), backpressure_drops: 0 }
    }

    pub fn register(&mut self, object: ObjectId) {
        self.logs.entry(object).or_default();
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn backpressure_drops(&self) -> u64 {
        self.backpressure_drops
    }

    pub fn log(&self, object: ObjectId) -> Result<&ObjectLog, StateError> {
        self.logs.get(&object).ok_or(StateError::UnknownObject(object))
    }

    pub fn log_mut(&mut self, object: ObjectId) -> Result<&mut ObjectLog, StateError> {
        self.logs.get_mut(&object).ok_or(StateError::UnknownObject(object))
    }

    pub fn objects(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.logs.keys().copied()
    }

    /// True when `object` can accept another record.
    pub fn has_room(&self, object: ObjectId) -> Result<bool, StateError> {
        Ok(self.log(object)?.span_total < self.capacity as u64)
    }

    pub fn append(&mut self, object: ObjectId, op: Operation) -> Result<LogRecord, StateError> {
        let capacity = self.capacity as u64;
        let log = self.logs.get_mut(&object).ok_or(StateError::UnknownObject(object))?;
        if log.span_total >= capacity {
            self.backpressure_drops += 1;
            return Err(StateError::Backpressure(object));
        }
        let record = LogRecord { object, seq: log.next_seq, coalesced_span: 1, op };
        log.next_seq += 1;
        log.span_total += 1;
        log.queue.push_back(LogEntry { record: record.clone(), first_sent: None, last_sent: None, transmissions: 0 });
        Ok(record)
    }

    /// Up to `max_records` unpruned records in seq order.
    pub fn outstanding(&self, object: ObjectId, max_records: usize) -> Vec<LogRecord> {
        self.logs
            .get(&object)
            .map(|log| log.queue.iter().take(max_records).map(|e| e.record.clone()).collect())
            .unwrap_or_default()
    }

    /// Drops every record whose whole span is at or below `min_acked`.
    pub fn prune(&mut self, object: ObjectId, min_acked: u64) -> usize {
        let Some(log) = self.logs.get_mut(&object) else { return 0 };
        let mut pruned = 0;
        while log.queue.front().is_some_and(|e| e.record.seq <= min_acked) {
            let entry = log.queue.pop_front().expect("front checked");
            log.span_total -= entry.record.coalesced_span as u64;
            log.min_unpruned_seq = entry.record.seq + 1;
            pruned += 1;
        }
        pruned
    }

    /// Merges runs of never-transmitted records with `merge(earlier, later)`,
    /// each run covering at most `window` original records. Returns the
    /// number of records removed by merging.
    pub fn coalesce_unsent(
        &mut self,
        object: ObjectId,
        window: u32,
        merge: &dyn Fn(&Operation, &Operation) -> Option<Operation>,
    ) -> usize {
        let Some(log) = self.logs.get_mut(&object) else { return 0 };
        let start = log.unsent_start();
        if log.queue.len() - start < 2 || window < 2 {
            return 0;
        }
        let tail: Vec<LogEntry> = log.queue.drain(start..).collect();
        let before = tail.len();
        let mut current: Option<LogEntry> = None;
        for entry in tail {
            current = Some(match current.take() {
                None => entry,
                Some(mut acc) => {
                    let span = acc.record.coalesced_span + entry.record.coalesced_span;
                    match (span <= window).then(|| merge(&acc.record.op, &entry.record.op)).flatten() {
                        Some(op) => {
                            acc.record.op = op;
                            acc.record.seq = entry.record.seq;
                            acc.record.coalesced_span = span;
                            acc
                        }
                        None => {
                            log.queue.push_back(acc);
                            entry
                        }
                    }
                }
            });
        }
        log.queue.extend(current);
        before - (log.queue.len() - start)
    }

    /// Continues a recycled identity's sequence space.
    pub(crate) fn resume_after(&mut self, object: ObjectId, last_seq: u64) {
        if let Some(log) = self.logs.get_mut(&object) {
            if log.queue.is_empty() && log.next_seq <= last_seq {
                log.next_seq = last_seq + 1;
                log.min_unpruned_seq = last_seq + 1;
            }
        }
    }
}

/// A log store shared between the mutator and the replication contexts.
/// Appends, reads and prunes are serialized by one lock held only for the
/// duration of each call.
#[derive(Debug, Clone, Default)]
pub struct SharedLogStore(Arc<Mutex<LogStore>>);

impl SharedLogStore {
    pub fn new(store: LogStore) -> Self {
        Self(Arc::new(Mutex::new(store)))
    }

    pub fn append(&self, object: ObjectId, op: Operation) -> Result<LogRecord, StateError> {
        self.0.lock().append(object, op)
    }

    pub fn outstanding(&self, object: ObjectId, max_records: usize) -> Vec<LogRecord> {
        self.0.lock().outstanding(object, max_records)
    }

    pub fn prune(&self, object: ObjectId, min_acked: u64) -> usize {
        self.0.lock().prune(object, min_acked)
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut LogStore) -> R) -> R {
        f(&mut self.0.lock())
    }
}
