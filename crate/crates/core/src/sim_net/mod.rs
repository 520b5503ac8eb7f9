//! Deterministic discrete-event WAN simulator with multicast groups.
//!
//! Virtual time is in integer microseconds. Every ordered pair of instances
//! draws loss, duplication and jitter from its own seeded generator, so
//! adding an instance leaves existing pairs' randomness untouched.

pub mod topology;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::ids::{InstanceId, ObjectId};

pub use topology::{LinkParams, PairValue, Topology, TopologyConfig};

/// A datagram handed to its destination.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub at: u64,
    pub sent_at: u64,
    pub src: InstanceId,
    pub dst: InstanceId,
    pub payload: Rc<[u8]>,
}

#[derive(Debug)]
struct Event {
    deliver_at: u64,
    dst: InstanceId,
    seq: u64,
    sent_at: u64,
    src: InstanceId,
    background: bool,
    payload: Rc<[u8]>,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.deliver_at, self.dst, self.seq).cmp(&(other.deliver_at, other.dst, other.seq))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PairStats {
    pub sent: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub delivered: u64,
    pub delivered_bytes: u64,
    pub latency_sum_us: u64,
    pub max_latency_us: u64,
}

/// Callbacks from the event loop into whatever owns the instances.
pub trait Host {
    fn on_deliver(&mut self, net: &mut SimNet, delivery: Delivery);
    /// Earliest virtual time at which the host wants `on_wakeup`.
    fn next_wakeup(&self) -> Option<u64>;
    fn on_wakeup(&mut self, net: &mut SimNet, now: u64);
    /// True when the host has nothing left to replicate or acknowledge.
    fn is_drained(&self) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunOutcome {
    pub quiesced: bool,
    pub at: u64,
}

pub struct SimNet {
    topology: Topology,
    now: u64,
    queue: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
    foreground_pending: usize,
    rngs: HashMap<(InstanceId, InstanceId), ChaCha8Rng>,
    link_free_at: HashMap<(InstanceId, InstanceId), u64>,
    groups: BTreeMap<ObjectId, BTreeSet<InstanceId>>,
    stats: BTreeMap<(InstanceId, InstanceId), PairStats>,
    trace: Sha256,
    events_processed: u64,
}

impl std::fmt::Debug for SimNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimNet").field("now", &self.now).field("pending", &self.queue.len()).finish()
    }
}

fn pair_seed(seed: u64, src: InstanceId, dst: InstanceId) -> u64 {
    // splitmix64 over the seed and the pair
    let mut z = seed ^ ((src.0 as u64) << 32 | dst.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SimNet {
    pub fn new(topology: Topology) -> Self {
        Self {
            topology,
            now: 0,
            queue: BinaryHeap::new(),
            next_seq: 0,
            foreground_pending: 0,
            rngs: HashMap::new(),
            link_free_at: HashMap::new(),
            groups: BTreeMap::new(),
            stats: BTreeMap::new(),
            trace: Sha256::new(),
            events_processed: 0,
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn set_latency(&mut self, src: InstanceId, dst: InstanceId, latency_us: u64) {
        self.topology.link_mut(src, dst).latency_us = latency_us;
    }

    pub fn set_link(&mut self, src: InstanceId, dst: InstanceId, link: LinkParams) {
        *self.topology.link_mut(src, dst) = link;
    }

    pub fn subscribe(&mut self, group: ObjectId, member: InstanceId) {
        self.groups.entry(group).or_default().insert(member);
    }

    pub fn unsubscribe_all(&mut self, member: InstanceId) {
        for members in self.groups.values_mut() {
            members.remove(&member);
        }
    }

    pub fn group(&self, group: ObjectId) -> impl Iterator<Item = InstanceId> + '_ {
        self.groups.get(&group).into_iter().flatten().copied()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Pending deliveries other than background keep-alives.
    pub fn foreground_pending(&self) -> usize {
        self.foreground_pending
    }

    pub fn stats(&self) -> &BTreeMap<(InstanceId, InstanceId), PairStats> {
        &self.stats
    }

    pub fn total_delivered_bytes(&self) -> u64 {
        self.stats.values().map(|s| s.delivered_bytes).sum()
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    /// Digest over every send decision and delivery so far.
    pub fn trace_digest(&self) -> String {
        hex::encode(self.trace.clone().finalize())
    }

    /// Sends to every member of `group` other than `src`.
    pub fn multicast(&mut self, src: InstanceId, group: ObjectId, payload: Vec<u8>, background: bool) {
        let payload: Rc<[u8]> = payload.into();
        let members: Vec<InstanceId> = self.group(group).filter(|m| *m != src).collect();
        for dst in members {
            self.enqueue(src, dst, payload.clone(), background);
        }
    }

    pub fn unicast(&mut self, src: InstanceId, dst: InstanceId, payload: Vec<u8>, background: bool) {
        if src != dst {
            self.enqueue(src, dst, payload.into(), background);
        }
    }

    fn enqueue(&mut self, src: InstanceId, dst: InstanceId, payload: Rc<[u8]>, background: bool) {
        let link = self.topology.link(src, dst);
        let seed = self.topology.seed;
        let rng = self.rngs.entry((src, dst)).or_insert_with(|| ChaCha8Rng::seed_from_u64(pair_seed(seed, src, dst)));
        let stats = self.stats.entry((src, dst)).or_default();
        stats.sent += 1;
        let lost = link.loss > 0.0 && rng.random_bool(link.loss.min(1.0));
        self.trace.update(self.now.to_be_bytes());
        self.trace.update([src.0.to_be_bytes(), dst.0.to_be_bytes()].concat());
        if lost {
            stats.dropped += 1;
            self.trace.update(b"drop");
            return;
        }
        let copies = if link.duplication > 0.0 && rng.random_bool(link.duplication.min(1.0)) {
            stats.duplicated += 1;
            2
        } else {
            1
        };
        // Serialization delay on rate-limited links.
        let mut departure = self.now;
        if let Some(rate) = link.bytes_per_sec {
            let free = self.link_free_at.entry((src, dst)).or_insert(0);
            let start = (*free).max(self.now);
            let tx = (payload.len() as u64 * 1_000_000).div_ceil(rate.max(1));
            *free = start + tx;
            departure = start + tx;
        }
        for _ in 0..copies {
            let jitter = if link.jitter_us > 0 { rng.random_range(0..=2 * link.jitter_us) as i64 - link.jitter_us as i64 } else { 0 };
            let delay = (link.latency_us as i64 + jitter).max(0) as u64;
            let deliver_at = departure + delay;
            self.trace.update(deliver_at.to_be_bytes());
            self.next_seq += 1;
            if !background {
                self.foreground_pending += 1;
            }
            self.queue.push(Reverse(Event {
                deliver_at,
                dst,
                seq: self.next_seq,
                sent_at: self.now,
                src,
                background,
                payload: payload.clone(),
            }));
        }
        self.trace.update(Sha256::digest(&payload));
    }

    fn next_event_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(e)| e.deliver_at)
    }

    fn deliver_next(&mut self, host: &mut dyn Host) {
        let Reverse(e) = self.queue.pop().expect("caller checked");
        self.now = self.now.max(e.deliver_at);
        if !e.background {
            self.foreground_pending -= 1;
        }
        self.events_processed += 1;
        let stats = self.stats.entry((e.src, e.dst)).or_default();
        let latency = e.deliver_at - e.sent_at;
        stats.delivered += 1;
        stats.delivered_bytes += e.payload.len() as u64;
        stats.latency_sum_us += latency;
        stats.max_latency_us = stats.max_latency_us.max(latency);
        self.trace.update(b"dlv");
        self.trace.update(e.deliver_at.to_be_bytes());
        self.trace.update([e.src.0.to_be_bytes(), e.dst.0.to_be_bytes()].concat());
        host.on_deliver(self, Delivery { at: e.deliver_at, sent_at: e.sent_at, src: e.src, dst: e.dst, payload: e.payload });
    }

    /// Processes one event (delivery or host wakeup) no later than `limit`.
    /// Deliveries win ties against wakeups. Returns false when nothing is due.
    fn step(&mut self, host: &mut dyn Host, limit: u64) -> bool {
        let net = self.next_event_time().filter(|t| *t <= limit);
        let wake = host.next_wakeup().filter(|t| *t <= limit);
        match (net, wake) {
            (Some(n), Some(w)) if w < n => {
                self.now = self.now.max(w);
                host.on_wakeup(self, self.now);
            }
            (Some(_), _) => self.deliver_next(host),
            (None, Some(w)) => {
                self.now = self.now.max(w);
                host.on_wakeup(self, self.now);
            }
            (None, None) => return false,
        }
        true
    }

    /// Runs every event up to and including virtual time `t`.
    pub fn run_until(&mut self, host: &mut dyn Host, t: u64) {
        while self.step(host, t) {}
        self.now = self.now.max(t);
    }

    /// Runs until no foreground datagram is in flight and the host reports
    /// itself drained, or until `max_t`.
    pub fn run_to_quiescence(&mut self, host: &mut dyn Host, max_t: u64) -> RunOutcome {
        loop {
            if self.foreground_pending == 0 && host.is_drained() {
                return RunOutcome { quiesced: true, at: self.now };
            }
            if !self.step(host, max_t) {
                self.now = self.now.max(max_t);
                return RunOutcome { quiesced: false, at: self.now };
            }
        }
    }
}
