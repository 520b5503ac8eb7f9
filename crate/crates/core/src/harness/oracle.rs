//! Reference computations the simulated runs are checked against.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::ids::{InstanceId, ObjectId};
use crate::instance::{tick_phase, Instance};
use crate::state_objects::{ObjectSpec, Registry};

use super::workload::TracePacket;

/// Applies every instance's local operations, origin by origin, to one fresh
/// replica and returns its fingerprints.
pub fn sequential_fingerprints<'a>(
    specs: &[(ObjectId, ObjectSpec)],
    instances: impl IntoIterator<Item = &'a Instance>,
) -> BTreeMap<ObjectId, Vec<u8>> {
    let mut reg = Registry::new();
    for (id, spec) in specs {
        reg.register(*id, spec.clone()).expect("distinct object ids");
    }
    let mut by_origin: BTreeMap<InstanceId, &Instance> = BTreeMap::new();
    for inst in instances {
        by_origin.insert(inst.id(), inst);
    }
    for (origin, inst) in by_origin {
        for r in inst.local_journal() {
            reg.object_mut(r.object)
                .and_then(|o| o.apply(origin, &r.op))
                .expect("locally applied operation replays");
        }
    }
    reg.fingerprints()
}

/// Sequence numbers of `origin`'s records on `object` that `inst` applied,
/// expanded from coalesced spans.
pub fn applied_seqs(inst: &Instance, object: ObjectId, origin: InstanceId) -> BTreeSet<u64> {
    inst.replicator()
        .journal()
        .iter()
        .filter(|a| a.object == object && a.origin == origin)
        .flat_map(|a| a.first_seq..=a.seq)
        .collect()
}

/// Index and time of the packet at which a single centralized counter fed
/// the whole trace reaches `threshold_bits`.
pub fn centralized_crossing(trace: &[TracePacket], threshold_bits: u64) -> Option<(usize, u64)> {
    let mut total = 0u64;
    trace.iter().enumerate().find_map(|(i, p)| {
        total += p.bits;
        (total >= threshold_bits).then_some((i, p.at))
    })
}

/// Parameters of the replicated deployment replayed by [`leak_model`].
#[derive(Debug, Clone)]
pub struct LeakModel {
    pub threshold_bits: u64,
    pub send_interval_us: u64,
    /// One-way latency per ordered pair.
    pub latency_us: BTreeMap<(InstanceId, InstanceId), u64>,
}

impl LeakModel {
    fn next_tick(&self, id: InstanceId, at: u64) -> u64 {
        let interval = self.send_interval_us.max(1);
        let phase = tick_phase(id, interval);
        if at <= phase {
            phase
        } else {
            phase + (at - phase).div_ceil(interval) * interval
        }
    }

    /// Replays the trace against per-instance views in which a peer's
    /// updates become visible one send tick plus one link latency after they
    /// happen. Returns per-instance pass decisions in trace order.
    pub fn replay(&self, trace: &[TracePacket]) -> Vec<bool> {
        let ids: BTreeSet<InstanceId> = trace.iter().map(|p| p.instance).collect();
        let mut own: BTreeMap<InstanceId, u64> = BTreeMap::new();
        let mut remote: BTreeMap<InstanceId, u64> = BTreeMap::new();
        let mut inbound: BTreeMap<InstanceId, VecDeque<(u64, u64)>> = BTreeMap::new();
        let mut blocked_local: BTreeSet<InstanceId> = BTreeSet::new();
        let mut notice: BTreeMap<InstanceId, u64> = BTreeMap::new();
        let mut out = Vec::with_capacity(trace.len());
        for p in trace {
            let i = p.instance;
            let q = inbound.entry(i).or_default();
            while q.front().is_some_and(|(arrive, _)| *arrive <= p.at) {
                *remote.entry(i).or_default() += q.pop_front().expect("peeked").1;
            }
            let blocked = blocked_local.contains(&i) || notice.get(&i).is_some_and(|t| *t <= p.at);
            out.push(!blocked);
            if blocked {
                continue;
            }
            *own.entry(i).or_default() += p.bits;
            let sent = self.next_tick(i, p.at);
            let crossed = own[&i] + remote.get(&i).copied().unwrap_or(0) >= self.threshold_bits;
            if crossed {
                blocked_local.insert(i);
            }
            for j in ids.iter().filter(|j| **j != i) {
                let arrive = sent + self.latency_us.get(&(i, *j)).copied().unwrap_or(0);
                inbound.entry(*j).or_default().push_back((arrive, p.bits));
                if crossed {
                    let n = notice.entry(*j).or_insert(u64::MAX);
                    *n = (*n).min(arrive);
                }
            }
        }
        out
    }
}

/// Packets passed after the centralized crossing, per instance.
pub fn leaked_after(trace: &[TracePacket], passed: &[bool], crossing_at: u64) -> BTreeMap<InstanceId, u64> {
    let mut out: BTreeMap<InstanceId, u64> = trace.iter().map(|p| (p.instance, 0)).collect();
    for (p, ok) in trace.iter().zip(passed) {
        if *ok && p.at > crossing_at {
            *out.entry(p.instance).or_default() += 1;
        }
    }
    out
}
