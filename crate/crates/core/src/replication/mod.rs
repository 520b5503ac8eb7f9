//! Reliable multicast of log records with ack vectors, retransmission,
//! keep-alives, RTT-driven congestion detection and adaptive coalescing.
//!
//! All methods run inside the owning instance's event callbacks: the caller
//! hands in the instance's registry and log store, and collects outgoing
//! datagrams from the returned [`Outgoing`] list.

pub mod ack;
pub mod rtt;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::ids::{InstanceId, ObjectId};
use crate::log_store::{LogRecord, LogStore};
use crate::state_objects::Registry;

use ack::{Admission, OriginState};
use rtt::{PeerRttStats, RttConfig};
use wire::{StateMessage, ACK_ENTRY_LEN, HEADER_LEN, RECORD_OVERHEAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoalescingMode {
    Off,
    /// Coalesce only while some peer is congested, up to the adaptive
    /// lookahead window.
    Adaptive,
    /// Always coalesce unsent records in runs of up to `window`.
    Forced { window: u32 },
}

#[derive(Debug, Clone)]
pub struct ReplicationConfig {
    pub send_interval_us: u64,
    pub keepalive_interval_us: u64,
    pub max_message_bytes: usize,
    pub rtt: RttConfig,
    pub rto_factor: f64,
    pub rto_floor_us: u64,
    /// Retransmission timeout before any RTT sample exists.
    pub initial_rto_us: u64,
    /// Cap on the per-record exponential backoff, as a shift of the rto.
    pub max_backoff_shift: u32,
    pub coalescing: CoalescingMode,
    /// Messages from senders outside the view, held until membership
    /// resolves.
    pub hold_buffer_cap: usize,
    pub hold_timeout_us: u64,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        Self {
            send_interval_us: 1_000,
            keepalive_interval_us: 100_000,
            max_message_bytes: 1400,
            rtt: RttConfig::default(),
            rto_factor: 2.0,
            rto_floor_us: 1_000,
            initial_rto_us: 200_000,
            max_backoff_shift: 3,
            coalescing: CoalescingMode::Adaptive,
            hold_buffer_cap: 1024,
            hold_timeout_us: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Destination {
    Group(ObjectId),
    Instance(InstanceId),
}

/// An encoded datagram ready for the network. Background datagrams are
/// periodic keep-alives that carry no new information.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub dest: Destination,
    pub bytes: Vec<u8>,
    pub background: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ReplicationStats {
    pub data_messages: u64,
    pub ack_messages: u64,
    pub keepalives: u64,
    pub bytes_sent: u64,
    pub records_sent: u64,
    pub retransmitted_records: u64,
    pub records_coalesced_away: u64,
    pub records_applied: u64,
    pub spans_applied: u64,
    pub duplicates: u64,
    pub buffered: u64,
    pub protocol_errors: u64,
    pub apply_errors: u64,
    pub unknown_objects: u64,
    pub held_messages: u64,
    pub held_dropped: u64,
    pub oversize_records: u64,
    pub early_ack_flushes: u64,
}

#[derive(Debug, Clone, Default)]
struct Channel {
    ordered: bool,
    receive: BTreeMap<InstanceId, OriginState>,
    /// What each peer has acknowledged of this instance's records.
    peer_acks: BTreeMap<InstanceId, u64>,
    ack_pending: bool,
    last_send: Option<u64>,
    hold_since: Option<u64>,
}

/// A record applied at this replica, kept when journaling is enabled.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct AppliedRecord {
    pub object: ObjectId,
    pub origin: InstanceId,
    pub first_seq: u64,
    pub seq: u64,
}

#[derive(Debug)]
pub struct Replicator {
    id: InstanceId,
    config: ReplicationConfig,
    peers: BTreeSet<InstanceId>,
    channels: BTreeMap<ObjectId, Channel>,
    rtt: BTreeMap<InstanceId, PeerRttStats>,
    cursor: usize,
    held: VecDeque<(u64, StateMessage)>,
    stats: ReplicationStats,
    journal: Option<Vec<AppliedRecord>>,
}

impl Replicator {
    pub fn new(id: InstanceId, config: ReplicationConfig) -> Self {
        Self {
            id,
            config,
            peers: BTreeSet::new(),
            channels: BTreeMap::new(),
            rtt: BTreeMap::new(),
            cursor: 0,
            held: VecDeque::new(),
            stats: ReplicationStats::default(),
            journal: None,
        }
    }

    pub fn id(&self) -> InstanceId {
        self.id
    }

    pub fn config(&self) -> &ReplicationConfig {
        &self.config
    }

    pub fn stats(&self) -> &ReplicationStats {
        &self.stats
    }

    pub fn enable_journal(&mut self) {
        self.journal.get_or_insert_with(Vec::new);
    }

    pub fn journal(&self) -> &[AppliedRecord] {
        self.journal.as_deref().unwrap_or(&[])
    }

    pub fn register_object(&mut self, object: ObjectId, ordered: bool) {
        let ch = self.channels.entry(object).or_default();
        ch.ordered = ordered;
        for peer in &self.peers {
            ch.peer_acks.entry(*peer).or_insert(0);
        }
    }

    pub fn objects(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.channels.keys().copied()
    }

    pub fn peers(&self) -> &BTreeSet<InstanceId> {
        &self.peers
    }

    pub fn is_peer(&self, id: InstanceId) -> bool {
        self.peers.contains(&id)
    }

    /// Adds a peer (active or joining). Its acknowledgement of local records
    /// starts at zero; receive state from an earlier holder of the id is
    /// kept so a recycled id continues its sequence space.
    pub fn add_peer(&mut self, peer: InstanceId) {
        if peer == self.id || !self.peers.insert(peer) {
            return;
        }
        self.rtt.remove(&peer);
        for ch in self.channels.values_mut() {
            ch.peer_acks.insert(peer, 0);
            ch.ack_pending = true;
        }
    }

    /// Removes a departed peer. Its receive state is retired but retained.
    pub fn remove_peer(&mut self, peer: InstanceId) {
        if self.peers.remove(&peer) {
            self.rtt.remove(&peer);
            for ch in self.channels.values_mut() {
                ch.peer_acks.remove(&peer);
                ch.ack_pending = true;
            }
        }
    }

    pub fn set_peers(&mut self, peers: impl IntoIterator<Item = InstanceId>) {
        let want: BTreeSet<InstanceId> = peers.into_iter().filter(|p| *p != self.id).collect();
        for gone in self.peers.difference(&want).copied().collect::<Vec<_>>() {
            self.remove_peer(gone);
        }
        for new in want {
            self.add_peer(new);
        }
    }

    /// Forces an ack-only reply on `object` at the next send cycle.
    pub fn request_ack(&mut self, object: ObjectId) {
        if let Some(ch) = self.channels.get_mut(&object) {
            ch.ack_pending = true;
        }
    }

    pub fn rtt_stats(&self) -> &BTreeMap<InstanceId, PeerRttStats> {
        &self.rtt
    }

    pub fn max_ewma_us(&self) -> Option<u64> {
        self.rtt.values().filter_map(PeerRttStats::ewma_us).max()
    }

    pub fn rto_us(&self) -> u64 {
        match self.max_ewma_us() {
            Some(ewma) => ((ewma as f64 * self.config.rto_factor) as u64).max(self.config.rto_floor_us),
            None => self.config.initial_rto_us,
        }
    }

    /// Contiguous ack for records of `origin` on `object`.
    pub fn ack_of(&self, object: ObjectId, origin: InstanceId) -> u64 {
        self.channels.get(&object).and_then(|c| c.receive.get(&origin)).map_or(0, OriginState::ack)
    }

    /// Every origin with receive state on `object`, including retired ones.
    pub fn ack_vector(&self, object: ObjectId) -> BTreeMap<InstanceId, u64> {
        self.channels
            .get(&object)
            .map(|c| c.receive.iter().map(|(id, s)| (*id, s.ack())).collect())
            .unwrap_or_default()
    }

    pub fn peer_ack(&self, object: ObjectId, peer: InstanceId) -> Option<u64> {
        self.channels.get(&object).and_then(|c| c.peer_acks.get(&peer).copied())
    }

    /// Seeds receive state from a snapshot's ack vector.
    pub fn restore_acks(&mut self, object: ObjectId, acks: &BTreeMap<InstanceId, u64>) {
        if let Some(ch) = self.channels.get_mut(&object) {
            for (origin, ack) in acks {
                if *origin != self.id {
                    ch.receive.insert(*origin, OriginState::starting_at(*ack));
                }
            }
        }
    }

    /// True when nothing is waiting to be sent or acknowledged.
    pub fn is_drained(&self, log: &LogStore) -> bool {
        self.channels.iter().all(|(id, ch)| !ch.ack_pending && log.log(*id).map_or(true, |l| l.is_empty()))
    }

    pub fn held_len(&self) -> usize {
        self.held.len()
    }

    fn ack_entries(&self, ch: &Channel) -> Vec<(InstanceId, u64)> {
        self.peers.iter().map(|p| (*p, ch.receive.get(p).map_or(0, OriginState::ack))).collect()
    }

    /// Handles a data or keep-alive message. Messages from senders outside
    /// the current view are held.
    pub fn on_data(&mut self, msg: StateMessage, now: u64, registry: &mut Registry, log: &mut LogStore) {
        if msg.sender == self.id {
            return;
        }
        if !self.peers.contains(&msg.sender) {
            self.hold(msg, now);
            return;
        }
        let Some(ch) = self.channels.get_mut(&msg.object) else {
            self.stats.unknown_objects += 1;
            return;
        };
        let object = msg.object;

        // Acknowledgements of this instance's own records.
        if let Some((_, acked)) = msg.acks.iter().find(|(id, _)| *id == self.id) {
            let last = log.log(object).map_or(0, |l| l.last_seq());
            let acked = if *acked > last {
                self.stats.protocol_errors += 1;
                last
            } else {
                *acked
            };
            let entry = ch.peer_acks.entry(msg.sender).or_insert(0);
            if acked > *entry {
                *entry = acked;
                // Karn: only records transmitted exactly once give a sample.
                let sample = log.log(object).ok().and_then(|l| {
                    l.entries()
                        .take_while(|e| e.record.first_seq() <= acked)
                        .last()
                        .filter(|e| e.record.seq >= acked && e.transmissions == 1)
                        .and_then(|e| e.first_sent)
                });
                if let Some(sent) = sample {
                    let stats = self.rtt.entry(msg.sender).or_default();
                    stats.record_sample(now.saturating_sub(sent), &self.config.rtt);
                }
            }
            let min = ch.peer_acks.values().copied().min().unwrap_or(u64::MAX);
            log.prune(object, min);
        }

        if msg.records.is_empty() {
            return;
        }
        ch.ack_pending = true;
        let state = ch.receive.entry(msg.sender).or_default();
        for record in msg.records {
            let admission = if ch.ordered { state.admit_ordered(record) } else { state.admit_unordered(record) };
            match admission {
                Admission::Duplicate => self.stats.duplicates += 1,
                Admission::Buffered => self.stats.buffered += 1,
                Admission::Overlap => self.stats.protocol_errors += 1,
                Admission::Apply(ready) => {
                    for r in ready {
                        Self::apply_record(&mut self.stats, &mut self.journal, registry, msg.sender, &r);
                    }
                }
            }
        }
    }

    fn apply_record(
        stats: &mut ReplicationStats,
        journal: &mut Option<Vec<AppliedRecord>>,
        registry: &mut Registry,
        origin: InstanceId,
        r: &LogRecord,
    ) {
        let result = registry.object_mut(r.object).and_then(|o| o.apply(origin, &r.op));
        match result {
            Ok(()) => {
                stats.records_applied += 1;
                stats.spans_applied += r.coalesced_span as u64;
                if let Some(j) = journal {
                    j.push(AppliedRecord { object: r.object, origin, first_seq: r.first_seq(), seq: r.seq });
                }
            }
            Err(_) => stats.apply_errors += 1,
        }
    }

    fn hold(&mut self, msg: StateMessage, now: u64) {
        self.stats.held_messages += 1;
        self.held.push_back((now, msg));
        while self.held.len() > self.config.hold_buffer_cap {
            self.held.pop_front();
            self.stats.held_dropped += 1;
        }
    }

    /// Re-delivers held messages whose sender has since joined the view and
    /// drops those that waited longer than the hold timeout.
    pub fn release_held(&mut self, now: u64, registry: &mut Registry, log: &mut LogStore) {
        let timeout = self.config.hold_timeout_us;
        let mut keep = VecDeque::new();
        let mut ready = Vec::new();
        for (at, msg) in std::mem::take(&mut self.held) {
            if self.peers.contains(&msg.sender) {
                ready.push(msg);
            } else if now.saturating_sub(at) >= timeout {
                self.stats.held_dropped += 1;
            } else {
                keep.push_back((at, msg));
            }
        }
        self.held = keep;
        for msg in ready {
            self.on_data(msg, now, registry, log);
        }
    }

    /// One full round-robin rotation over all objects.
    pub fn send_tick(&mut self, now: u64, registry: &Registry, log: &mut LogStore) -> Vec<Outgoing> {
        let mut out = Vec::new();
        for _ in 0..self.channels.len() {
            out.extend(self.send_cycle(now, registry, log));
        }
        out
    }

    /// Sends what is due for the next object in round-robin order.
    pub fn send_cycle(&mut self, now: u64, registry: &Registry, log: &mut LogStore) -> Vec<Outgoing> {
        if self.channels.is_empty() {
            return Vec::new();
        }
        let object = *self.channels.keys().nth(self.cursor % self.channels.len()).expect("non-empty");
        self.cursor = (self.cursor + 1) % self.channels.len();
        self.cycle_object(object, now, registry, log)
    }

    /// Window over congested peers, or `None` when nobody is congested.
    fn congested_window(&self) -> Option<u32> {
        self.rtt.iter().filter(|(p, s)| self.peers.contains(p) && s.congested).map(|(_, s)| s.lookahead_window).max()
    }

    fn max_op_len(&self) -> usize {
        self.config.max_message_bytes.saturating_sub(HEADER_LEN + RECORD_OVERHEAD + ACK_ENTRY_LEN * self.peers.len())
    }

    fn cycle_object(&mut self, object: ObjectId, now: u64, registry: &Registry, log: &mut LogStore) -> Vec<Outgoing> {
        let rto = self.rto_us();
        let congested = self.congested_window();
        let max_op = self.max_op_len();
        let Some(ch) = self.channels.get(&object) else { return Vec::new() };
        let min_ack = ch.peer_acks.values().copied().min().unwrap_or(u64::MAX);
        log.prune(object, min_ack);

        // Decide whether unsent records go out now, and coalesce them first
        // if so.
        let Ok(obj) = registry.object(object) else { return Vec::new() };
        let merge = |a: &crate::state_objects::Operation, b: &crate::state_objects::Operation| {
            obj.coalesce(a, b).filter(|op| op.encoded_len() <= max_op)
        };
        let (unsent_span, in_flight) = match log.log(object) {
            Ok(l) => (l.unsent_span(), l.entries().any(|e| e.transmissions > 0)),
            Err(_) => return Vec::new(),
        };
        let mut flush = true;
        let mut early_window = None;
        if unsent_span > 0 {
            match (self.config.coalescing, congested) {
                (CoalescingMode::Off, _) | (CoalescingMode::Adaptive, None) => {}
                (CoalescingMode::Forced { window }, _) => {
                    self.stats.records_coalesced_away += log.coalesce_unsent(object, window, &merge) as u64;
                }
                (CoalescingMode::Adaptive, Some(window)) => {
                    let ch = self.channels.get_mut(&object).expect("checked");
                    let held_for = now.saturating_sub(*ch.hold_since.get_or_insert(now));
                    let full = unsent_span >= window as u64;
                    flush = full || !in_flight || held_for >= rto;
                    if flush {
                        if !full && !in_flight && held_for > 0 {
                            early_window = Some(unsent_span);
                        }
                        self.stats.records_coalesced_away += log.coalesce_unsent(object, window, &merge) as u64;
                    }
                }
            }
        }
        if let Some(flushed) = early_window {
            self.stats.early_ack_flushes += 1;
            for (p, s) in self.rtt.iter_mut() {
                if self.peers.contains(p) {
                    s.on_early_ack(flushed);
                }
            }
        }

        // Collect retransmissions and (if flushing) new records, in seq order.
        let shift_cap = self.config.max_backoff_shift;
        let mut batch = Vec::new();
        let mut retransmits = 0;
        if let Ok(l) = log.log_mut(object) {
            for e in l.entries_mut() {
                let due = match e.last_sent {
                    None => flush,
                    Some(last) => {
                        let backoff = rto.saturating_mul(1 << (e.transmissions.saturating_sub(1)).min(shift_cap));
                        now.saturating_sub(last) >= backoff
                    }
                };
                if due {
                    if e.transmissions > 0 {
                        retransmits += 1;
                    }
                    e.first_sent.get_or_insert(now);
                    e.last_sent = Some(now);
                    e.transmissions += 1;
                    batch.push(e.record.clone());
                }
            }
        }
        self.stats.retransmitted_records += retransmits;
        self.stats.records_sent += batch.len() as u64;

        let ch = self.channels.get(&object).expect("checked");
        let acks = self.ack_entries(ch);
        let mut out = Vec::new();
        if !batch.is_empty() {
            for records in self.pack(batch, acks.len()) {
                let msg = StateMessage::data(self.id, object, now, records, acks.clone());
                self.stats.data_messages += 1;
                out.push(self.emit(Destination::Group(object), &msg, false));
            }
        } else {
            let idle = ch.last_send.is_none_or(|t| now.saturating_sub(t) >= self.config.keepalive_interval_us);
            if ch.ack_pending || idle {
                let background = !ch.ack_pending;
                let msg = StateMessage::data(self.id, object, now, Vec::new(), acks);
                if background {
                    self.stats.keepalives += 1;
                } else {
                    self.stats.ack_messages += 1;
                }
                out.push(self.emit(Destination::Group(object), &msg, background));
            }
        }
        let ch = self.channels.get_mut(&object).expect("checked");
        if !out.is_empty() {
            ch.ack_pending = false;
            ch.last_send = Some(now);
        }
        if flush {
            ch.hold_since = None;
        }
        out
    }

    /// Splits records into messages that fit the datagram budget. A record
    /// too large for any message travels alone.
    fn pack(&mut self, records: Vec<LogRecord>, ack_count: usize) -> Vec<Vec<LogRecord>> {
        let budget = self.config.max_message_bytes;
        let base = HEADER_LEN + ACK_ENTRY_LEN * ack_count;
        let mut groups: Vec<Vec<LogRecord>> = Vec::new();
        let mut size = base;
        for r in records {
            let len = RECORD_OVERHEAD + r.op.encoded_len();
            if base + len > budget {
                self.stats.oversize_records += 1;
            }
            match groups.last_mut() {
                Some(g) if size + len <= budget && g.len() < u16::MAX as usize => {
                    size += len;
                    g.push(r);
                }
                _ => {
                    size = base + len;
                    groups.push(vec![r]);
                }
            }
        }
        groups
    }

    fn emit(&mut self, dest: Destination, msg: &StateMessage, background: bool) -> Outgoing {
        let bytes = msg.encode();
        self.stats.bytes_sent += bytes.len() as u64;
        Outgoing { dest, bytes, background }
    }

    /// Encodes a control message addressed by the caller.
    pub fn control(&mut self, dest: Destination, msg: &StateMessage) -> Outgoing {
        self.emit(dest, msg, false)
    }

    pub fn count_protocol_error(&mut self) {
        self.stats.protocol_errors += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_objects::{CbfConfig, CountingBloomFilter, ObjectSpec, PnCounter};

    const OBJ: ObjectId = ObjectId(1);
    const A: InstanceId = InstanceId(1);
    const B: InstanceId = InstanceId(2);
    const C: InstanceId = InstanceId(3);

    struct Node {
        repl: Replicator,
        reg: Registry,
        log: LogStore,
    }

    impl Node {
        fn new(id: InstanceId, peers: &[InstanceId], objects: &[(ObjectId, ObjectSpec)], mode: CoalescingMode) -> Self {
            let config = ReplicationConfig { coalescing: mode, ..Default::default() };
            let mut n = Self { repl: Replicator::new(id, config), reg: Registry::new(), log: LogStore::default() };
            n.repl.set_peers(peers.iter().copied());
            for (oid, spec) in objects {
                n.reg.register(*oid, spec.clone()).unwrap();
                n.log.register(*oid);
                n.repl.register_object(*oid, n.reg.object(*oid).unwrap().requires_ordered_delivery());
            }
            n
        }

        fn incr(&mut self, object: ObjectId, delta: i64) {
            let id = self.repl.id();
            let op = {
                let obj = self.reg.object_mut(object).unwrap();
                let c = obj.as_any_mut().downcast_mut::<PnCounter>().unwrap();
                c.update_op(id, delta)
            };
            self.reg.object_mut(object).unwrap().apply(id, &op).unwrap();
            self.log.append(object, op).unwrap();
        }

        fn tick(&mut self, now: u64) -> Vec<StateMessage> {
            self.repl
                .send_tick(now, &self.reg, &mut self.log)
                .into_iter()
                .map(|o| StateMessage::decode(&o.bytes).unwrap())
                .collect()
        }

        fn deliver(&mut self, msg: &StateMessage, now: u64) {
            self.repl.on_data(msg.clone(), now, &mut self.reg, &mut self.log);
        }

        fn value(&self, object: ObjectId) -> i64 {
            self.reg.get::<PnCounter>(object).unwrap().value()
        }
    }

    fn counters(n: u32) -> Vec<(ObjectId, ObjectSpec)> {
        (1..=n).map(|i| (ObjectId(i), ObjectSpec::PnCounter)).collect()
    }

    #[test]
    fn idle_channel_sends_keepalive_with_ack_vector() {
        let mut a = Node::new(A, &[B], &counters(1), CoalescingMode::Off);
        let msgs = a.tick(0);
        assert_eq!(msgs.len(), 1);
        assert!(msgs[0].keepalive && msgs[0].records.is_empty());
        assert_eq!(msgs[0].acks, vec![(B, 0)]);
        assert!(a.tick(50_000).is_empty());
        assert_eq!(a.tick(100_000).len(), 1);
    }

    #[test]
    fn round_robin_visits_objects_in_fixed_rotation() {
        let mut a = Node::new(A, &[B], &counters(3), CoalescingMode::Off);
        for i in 1..=3 {
            a.incr(ObjectId(i), 1);
        }
        let order: Vec<ObjectId> =
            (0..6).flat_map(|_| a.repl.send_cycle(0, &a.reg, &mut a.log)).map(|o| StateMessage::decode(&o.bytes).unwrap().object).collect();
        assert_eq!(&order[..3], &[ObjectId(1), ObjectId(2), ObjectId(3)]);
    }

    #[test]
    fn record_then_ack_prunes_and_samples_rtt() {
        let mut a = Node::new(A, &[B], &counters(1), CoalescingMode::Off);
        let mut b = Node::new(B, &[A], &counters(1), CoalescingMode::Off);
        a.incr(OBJ, 5);
        let m = a.tick(0);
        assert_eq!(m[0].records.len(), 1);
        b.deliver(&m[0], 5_000);
        assert_eq!(b.value(OBJ), 5);
        let ack = b.tick(5_500);
        assert_eq!(ack[0].acks, vec![(A, 1)]);
        a.deliver(&ack[0], 10_000);
        assert!(a.log.log(OBJ).unwrap().is_empty());
        assert_eq!(a.repl.rtt_stats()[&B].min_rtt, 10_000);
        assert!(a.repl.is_drained(&a.log));
    }

    #[test]
    fn prune_follows_minimum_peer_ack() {
        let mut a = Node::new(A, &[B, C], &counters(1), CoalescingMode::Off);
        for _ in 0..10 {
            a.incr(OBJ, 1);
        }
        a.tick(0);
        a.deliver(&StateMessage::data(B, OBJ, 0, vec![], vec![(A, 9), (C, 0)]), 1);
        a.deliver(&StateMessage::data(C, OBJ, 0, vec![], vec![(A, 7), (B, 0)]), 1);
        let log = a.log.log(OBJ).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.min_unpruned_seq(), 8);
    }

    #[test]
    fn lost_record_is_retransmitted_after_rto() {
        let mut a = Node::new(A, &[B], &counters(1), CoalescingMode::Off);
        let mut b = Node::new(B, &[A], &counters(1), CoalescingMode::Off);
        a.incr(OBJ, 1);
        let _lost = a.tick(0);
        assert!(a.tick(1_000).iter().all(|m| m.records.is_empty()));
        let rto = a.repl.rto_us();
        let resent = a.tick(rto);
        assert_eq!(resent.len(), 1);
        assert_eq!(resent[0].records[0].seq, 1);
        b.deliver(&resent[0], rto + 5);
        b.deliver(&resent[0], rto + 6);
        assert_eq!(b.value(OBJ), 1);
        assert_eq!(a.repl.stats().retransmitted_records, 1);
    }

    #[test]
    fn ordered_object_applies_once_under_duplication_and_reorder() {
        let spec = vec![(OBJ, ObjectSpec::CountingBloomFilter(CbfConfig { counters: 1 << 12, hashes: 3, seed: 1 }))];
        let mut a = Node::new(A, &[B], &spec, CoalescingMode::Off);
        let mut b = Node::new(B, &[A], &spec, CoalescingMode::Off);
        let mut msgs = Vec::new();
        for (i, x) in [b"p".as_slice(), b"q", b"p", b"r"].iter().enumerate() {
            let op = a.reg.get::<CountingBloomFilter>(OBJ).unwrap().count_op(x).unwrap();
            a.reg.object_mut(OBJ).unwrap().apply(A, &op).unwrap();
            a.log.append(OBJ, op).unwrap();
            msgs.extend(a.tick(i as u64 * 1_000));
        }
        assert_eq!(msgs.len(), 4);
        for i in [3, 2, 3, 0, 2, 1, 0, 1, 3] {
            b.deliver(&msgs[i], 10_000);
        }
        assert_eq!(b.repl.ack_of(OBJ, A), 4);
        assert_eq!(b.reg.object(OBJ).unwrap().fingerprint(), a.reg.object(OBJ).unwrap().fingerprint());
        assert_eq!(b.reg.get::<CountingBloomFilter>(OBJ).unwrap().value(b"p"), 2);
    }

    #[test]
    fn congested_peer_gets_one_coalesced_record() {
        let mut a = Node::new(A, &[B], &counters(1), CoalescingMode::Adaptive);
        let mut b = Node::new(B, &[A], &counters(1), CoalescingMode::Adaptive);
        let stats = a.repl.rtt.entry(B).or_default();
        *stats = PeerRttStats { samples: 10, min_rtt: 5_000, ewma_rtt: 30_000.0, congested: true, lookahead_window: 50 };
        for _ in 0..50 {
            a.incr(OBJ, 1);
        }
        let msgs = a.tick(0);
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].records.len(), 1);
        assert_eq!(msgs[0].records[0].coalesced_span, 50);
        b.deliver(&msgs[0], 1);
        assert_eq!(b.value(OBJ), 50);
    }

    #[test]
    fn adaptive_holds_while_batch_in_flight() {
        let mut a = Node::new(A, &[B], &counters(1), CoalescingMode::Adaptive);
        *a.repl.rtt.entry(B).or_default() =
            PeerRttStats { samples: 10, min_rtt: 5_000, ewma_rtt: 30_000.0, congested: true, lookahead_window: 64 };
        a.incr(OBJ, 1);
        assert_eq!(a.tick(0)[0].records.len(), 1);
        for t in 1..10 {
            a.incr(OBJ, 1);
            assert!(a.tick(t * 1_000).iter().all(|m| m.records.is_empty()), "held at {t}");
        }
        // The ack for the first batch releases the rest as one record.
        a.deliver(&StateMessage::data(B, OBJ, 0, vec![], vec![(A, 1)]), 10_000);
        let msgs = a.tick(10_000);
        assert_eq!(msgs[0].records.len(), 1);
        assert_eq!(msgs[0].records[0].coalesced_span, 9);
        assert_eq!(a.repl.stats().early_ack_flushes, 1);
        assert!(a.repl.rtt_stats()[&B].lookahead_window >= 9);
    }

    #[test]
    fn messages_fit_the_datagram_budget() {
        let mut a = Node::new(A, &[B], &counters(1), CoalescingMode::Off);
        for _ in 0..200 {
            a.incr(OBJ, 1);
        }
        let out = a.repl.send_tick(0, &a.reg, &mut a.log);
        assert!(out.len() > 1);
        assert!(out.iter().all(|o| o.bytes.len() <= 1400));
        let total: usize = out.iter().map(|o| StateMessage::decode(&o.bytes).unwrap().records.len()).sum();
        assert_eq!(total, 200);
    }

    #[test]
    fn unknown_sender_is_held_then_released_or_dropped() {
        let mut a = Node::new(A, &[B], &counters(1), CoalescingMode::Off);
        let mut c = Node::new(C, &[A], &counters(1), CoalescingMode::Off);
        c.incr(OBJ, 3);
        let m = c.tick(0);
        a.deliver(&m[0], 1);
        assert_eq!(a.value(OBJ), 0);
        assert_eq!(a.repl.held_len(), 1);
        a.repl.add_peer(C);
        a.repl.release_held(2, &mut a.reg, &mut a.log);
        assert_eq!(a.value(OBJ), 3);

        let mut d = Node::new(InstanceId(4), &[A], &counters(1), CoalescingMode::Off);
        d.incr(OBJ, 1);
        a.deliver(&d.tick(0)[0], 10);
        a.repl.release_held(10 + a.repl.config().hold_timeout_us, &mut a.reg, &mut a.log);
        assert_eq!(a.repl.held_len(), 0);
        assert_eq!(a.repl.stats().held_dropped, 1);
    }

    #[test]
    fn ack_beyond_last_seq_is_a_protocol_error() {
        let mut a = Node::new(A, &[B], &counters(1), CoalescingMode::Off);
        a.incr(OBJ, 1);
        a.tick(0);
        a.deliver(&StateMessage::data(B, OBJ, 0, vec![], vec![(A, 99)]), 1);
        assert_eq!(a.repl.stats().protocol_errors, 1);
        assert_eq!(a.repl.peer_ack(OBJ, B), Some(1));
    }

    #[test]
    fn removed_peer_no_longer_blocks_pruning() {
        let mut a = Node::new(A, &[B, C], &counters(1), CoalescingMode::Off);
        a.incr(OBJ, 1);
        a.tick(0);
        a.deliver(&StateMessage::data(B, OBJ, 0, vec![], vec![(A, 1)]), 1);
        assert_eq!(a.log.log(OBJ).unwrap().len(), 1);
        a.repl.remove_peer(C);
        a.tick(2);
        assert!(a.log.log(OBJ).unwrap().is_empty());
    }
}
