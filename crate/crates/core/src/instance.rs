//! One middlebox instance: its replicated objects, log store, replicator and
//! its side of the membership protocol, driven by datagrams and send ticks.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::StateError;
use crate::ids::{InstanceId, ObjectId};
use crate::log_store::{LogRecord, LogStore, DEFAULT_LOG_CAPACITY};
use crate::membership::{
    JoinState, JoinStep, JoinTimings, LeaveState, LeaveStep, MembershipConfig, MembershipView, ObjectSnapshot, PauseRecord, Snapshot,
};
use crate::replication::wire::{Control, StateMessage, CONTROL_OBJECT};
use crate::replication::{Destination, Outgoing, ReplicationConfig, Replicator};
use crate::state_objects::{ObjectSpec, Operation, Registry};

#[derive(Debug, Clone)]
pub struct InstanceConfig {
    pub replication: ReplicationConfig,
    pub membership: MembershipConfig,
    pub log_capacity: usize,
    /// Keep every local and applied record for offline verification.
    pub journal: bool,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            replication: ReplicationConfig::default(),
            membership: MembershipConfig::default(),
            log_capacity: DEFAULT_LOG_CAPACITY,
            journal: false,
        }
    }
}

/// Offset of an instance's send ticks within the send interval, so that
/// instances do not all tick at the same instant.
pub fn tick_phase(id: InstanceId, interval_us: u64) -> u64 {
    (id.0 as u64 * 7_919) % interval_us.max(1)
}

#[derive(Debug, Clone)]
pub enum Phase {
    Active,
    Joining(Box<JoinState>),
    Leaving(Box<LeaveState>),
    Aborted(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InstanceDiagnostics {
    pub decode_errors: u64,
    pub config_mismatches: u64,
    pub rejected_local_ops: u64,
    pub stray_control: u64,
}

#[derive(Debug)]
pub struct Instance {
    id: InstanceId,
    config: InstanceConfig,
    registry: Registry,
    log: LogStore,
    repl: Replicator,
    view: MembershipView,
    phase: Phase,
    next_tick: u64,
    paused_until: u64,
    pauses: Vec<PauseRecord>,
    donor_cache: BTreeMap<InstanceId, Vec<u8>>,
    deferred: Vec<(u64, Outgoing)>,
    local_journal: Option<Vec<LogRecord>>,
    finished_join: Option<JoinTimings>,
    diag: InstanceDiagnostics,
}

impl Instance {
    pub fn new(
        id: InstanceId,
        config: InstanceConfig,
        specs: &[(ObjectId, ObjectSpec)],
        view: MembershipView,
    ) -> Result<Self, StateError> {
        let mut registry = Registry::new();
        let mut log = LogStore::new(config.log_capacity);
        let mut repl = Replicator::new(id, config.replication.clone());
        if config.journal {
            repl.enable_journal();
        }
        for (oid, spec) in specs {
            registry.register(*oid, spec.clone())?;
            log.register(*oid);
            repl.register_object(*oid, registry.object(*oid)?.requires_ordered_delivery());
        }
        repl.set_peers(view.members());
        let phase_offset = tick_phase(id, config.replication.send_interval_us);
        Ok(Self {
            id,
            local_journal: config.journal.then(Vec::new),
            config,
            registry,
            log,
            repl,
            view,
            phase: Phase::Active,
            next_tick: phase_offset,
            paused_until: 0,
            pauses: Vec::new(),
            donor_cache: BTreeMap::new(),
            deferred: Vec::new(),
            finished_join: None,
            diag: InstanceDiagnostics::default(),
        })
    }

    /// A fresh instance entering an existing deployment. `bootstrap` is the
    /// orchestrator's view including this instance as joining.
    pub fn new_joiner(
        id: InstanceId,
        config: InstanceConfig,
        specs: &[(ObjectId, ObjectSpec)],
        bootstrap: MembershipView,
        donors: Vec<InstanceId>,
        now: u64,
    ) -> Result<Self, StateError> {
        let existing: BTreeSet<InstanceId> = bootstrap.members().into_iter().filter(|m| *m != id).collect();
        let mut inst = Self::new(id, config, specs, bootstrap)?;
        inst.phase = Phase::Joining(Box::new(JoinState::new(existing, donors, now)));
        let interval = inst.config.replication.send_interval_us.max(1);
        inst.next_tick = now + (inst.next_tick % interval);
        Ok(inst)
    }

    pub fn id(&self) -> InstanceId {
        self.id
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    /// Mutable access for building operations; state changes must still go
    /// through [`Instance::submit`].
    pub fn registry_mut(&mut self) -> &mut Registry {
        &mut self.registry
    }

    pub fn log(&self) -> &LogStore {
        &self.log
    }

    pub fn replicator(&self) -> &Replicator {
        &self.repl
    }

    pub fn view(&self) -> &MembershipView {
        &self.view
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    pub fn diagnostics(&self) -> &InstanceDiagnostics {
        &self.diag
    }

    pub fn pauses(&self) -> &[PauseRecord] {
        &self.pauses
    }

    pub fn local_journal(&self) -> &[LogRecord] {
        self.local_journal.as_deref().unwrap_or(&[])
    }

    pub fn fingerprints(&self) -> BTreeMap<ObjectId, Vec<u8>> {
        self.registry.fingerprints()
    }

    /// True while the packet path may run.
    pub fn is_serving(&self) -> bool {
        matches!(self.phase, Phase::Active)
    }

    /// End of the current snapshot-copy pause, if one is in progress.
    pub fn paused_until(&self, now: u64) -> Option<u64> {
        (self.paused_until > now).then_some(self.paused_until)
    }

    pub fn join_state(&self) -> Option<&JoinState> {
        match &self.phase {
            Phase::Joining(j) => Some(j),
            _ => None,
        }
    }

    pub fn leave_state(&self) -> Option<&LeaveState> {
        match &self.phase {
            Phase::Leaving(l) => Some(l),
            _ => None,
        }
    }

    /// Timings of this instance's join, in progress or finished.
    pub fn join_timings(&self) -> Option<&JoinTimings> {
        self.join_state().map(|j| &j.timings).or(self.finished_join.as_ref())
    }

    pub fn join_restored(&self) -> bool {
        self.join_state().is_some_and(|j| j.step == JoinStep::Restored)
    }

    pub fn leave_done(&self) -> bool {
        self.leave_state().is_some_and(|l| l.step == LeaveStep::Done)
    }

    pub fn aborted(&self) -> Option<&str> {
        match &self.phase {
            Phase::Aborted(why) => Some(why),
            _ => None,
        }
    }

    /// Applies a local operation and appends it to the object's log.
    pub fn submit(&mut self, object: ObjectId, op: Operation) -> Result<LogRecord, StateError> {
        if !self.is_serving() {
            self.diag.rejected_local_ops += 1;
            return Err(StateError::NotServing);
        }
        if !self.log.has_room(object)? {
            self.diag.rejected_local_ops += 1;
            return Err(self.log.append(object, op).expect_err("log is full"));
        }
        self.registry.object_mut(object)?.apply(self.id, &op)?;
        let record = self.log.append(object, op)?;
        if let Some(j) = &mut self.local_journal {
            j.push(record.clone());
        }
        Ok(record)
    }

    pub fn next_wakeup(&self) -> u64 {
        self.deferred.iter().map(|(t, _)| *t).min().map_or(self.next_tick, |d| d.min(self.next_tick))
    }

    /// True when nothing local is waiting to be sent or acknowledged.
    pub fn is_drained(&self) -> bool {
        let repl_quiet = self.deferred.is_empty() && self.repl.is_drained(&self.log);
        match &self.phase {
            Phase::Active => repl_quiet,
            Phase::Joining(j) => j.step == JoinStep::Restored && repl_quiet,
            Phase::Leaving(l) => l.step == LeaveStep::Done,
            Phase::Aborted(_) => true,
        }
    }

    pub fn on_wakeup(&mut self, now: u64) -> Vec<Outgoing> {
        let mut out = Vec::new();
        let (due, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.deferred).into_iter().partition(|(t, _)| *t <= now);
        self.deferred = later;
        out.extend(due.into_iter().map(|(_, o)| o));
        if now >= self.next_tick {
            let interval = self.config.replication.send_interval_us.max(1);
            while self.next_tick <= now {
                self.next_tick += interval;
            }
            self.tick(now, &mut out);
        }
        out
    }

    fn multicast_control(&mut self, now: u64, make: impl Fn(ObjectId) -> Control, out: &mut Vec<Outgoing>) {
        let objects: Vec<ObjectId> = self.registry.ids().collect();
        for object in objects {
            let msg = StateMessage::control(self.id, object, now, make(object));
            out.push(self.repl.control(Destination::Group(object), &msg));
        }
    }

    fn tick(&mut self, now: u64, out: &mut Vec<Outgoing>) {
        self.repl.release_held(now, &mut self.registry, &mut self.log);
        let mcfg = self.config.membership.clone();
        match &mut self.phase {
            Phase::Active => out.extend(self.repl.send_tick(now, &self.registry, &mut self.log)),
            Phase::Aborted(_) => {}
            Phase::Joining(js) => match js.step {
                JoinStep::Restored => out.extend(self.repl.send_tick(now, &self.registry, &mut self.log)),
                JoinStep::Announcing => {
                    if js.all_confirmed() {
                        js.step = JoinStep::Transferring;
                        js.timings.confirmed_at = Some(now);
                        js.last_progress = now;
                        self.request_snapshot(now, 0, out);
                    } else if js.last_join_sent.is_none_or(|t| now.saturating_sub(t) >= mcfg.join_retry_us) {
                        js.last_join_sent = Some(now);
                        js.timings.join_messages += 1;
                        let digests: BTreeMap<ObjectId, u64> =
                            self.registry.ids().filter_map(|o| self.registry.digest(o).map(|d| (o, d))).collect();
                        self.multicast_control(now, |o| Control::Join { config_digest: digests[&o] }, out);
                    }
                }
                JoinStep::Transferring => {
                    if now.saturating_sub(js.last_progress) >= mcfg.snapshot_retry_us {
                        js.retries_without_progress += 1;
                        if js.retries_without_progress >= mcfg.donor_switch_after && js.donors.len() > 1 {
                            js.switch_donor();
                        }
                        js.last_progress = now;
                        let offset = js.contiguous_len();
                        self.request_snapshot(now, offset, out);
                    }
                }
            },
            Phase::Leaving(ls) => {
                if let LeaveStep::Grace { until } = ls.step {
                    if now >= until {
                        ls.step = LeaveStep::Draining;
                        ls.timings.drain_started_at = Some(now);
                    }
                }
                if ls.step == LeaveStep::Draining && self.log.objects().all(|o| self.log.log(o).is_ok_and(|l| l.is_empty())) {
                    ls.step = LeaveStep::Announcing;
                    ls.timings.drained_at = Some(now);
                }
                match ls.step {
                    LeaveStep::Grace { .. } | LeaveStep::Draining => {
                        out.extend(self.repl.send_tick(now, &self.registry, &mut self.log));
                    }
                    LeaveStep::Announcing => {
                        if ls.all_confirmed() {
                            ls.step = LeaveStep::Done;
                            ls.timings.completed_at = Some(now);
                        } else if ls.last_leave_sent.is_none_or(|t| now.saturating_sub(t) >= mcfg.leave_retry_us) {
                            ls.last_leave_sent = Some(now);
                            ls.timings.leave_messages += 1;
                            self.multicast_control(now, |_| Control::Leave, out);
                        }
                    }
                    LeaveStep::Done => {}
                }
            }
        }
    }

    fn request_snapshot(&mut self, now: u64, offset: u64, out: &mut Vec<Outgoing>) {
        let Phase::Joining(js) = &mut self.phase else { return };
        js.last_request = Some(now);
        js.timings.snapshot_requests += 1;
        let donor = js.donor();
        let msg = StateMessage::control(self.id, CONTROL_OBJECT, now, Control::SnapshotRequest { offset });
        out.push(self.repl.control(Destination::Instance(donor), &msg));
    }

    /// Begins scale-in: traffic has already been rerouted away.
    pub fn start_leave(&mut self, now: u64) {
        let grace = self.repl.max_ewma_us().map_or(self.repl.rto_us(), |e| 2 * e);
        let peers = self.view.members().into_iter().filter(|m| *m != self.id).collect();
        self.phase = Phase::Leaving(Box::new(LeaveState::new(peers, now, grace)));
    }

    /// Installs a view decided by the orchestrator.
    pub fn install_view(&mut self, view: MembershipView, now: u64) {
        if self.join_restored() && view.active.contains(&self.id) {
            if let Phase::Joining(js) = std::mem::replace(&mut self.phase, Phase::Active) {
                self.finished_join = Some(js.timings);
            }
        }
        self.donor_cache.retain(|j, _| view.joining.contains(j));
        self.repl.set_peers(view.members());
        self.view = view;
        self.repl.release_held(now, &mut self.registry, &mut self.log);
    }

    pub fn on_datagram(&mut self, bytes: &[u8], now: u64) -> Vec<Outgoing> {
        let mut out = Vec::new();
        let msg = match StateMessage::decode(bytes) {
            Ok(m) => m,
            Err(_) => {
                self.diag.decode_errors += 1;
                self.repl.count_protocol_error();
                return out;
            }
        };
        if msg.sender == self.id {
            return out;
        }
        match msg.control.clone() {
            Control::Join { config_digest } => self.on_join(&msg, config_digest, now),
            Control::Leave => self.on_leave(&msg),
            Control::SnapshotRequest { offset } => self.on_snapshot_request(msg.sender, offset, now, &mut out),
            Control::SnapshotChunk { offset, total_len, data } => self.on_chunk(msg.sender, offset, total_len, data, now),
            Control::None => self.on_data(msg, now),
        }
        out
    }

    fn on_join(&mut self, msg: &StateMessage, digest: u64, now: u64) {
        if !matches!(self.phase, Phase::Active) {
            self.diag.stray_control += 1;
            return;
        }
        if self.registry.digest(msg.object) != Some(digest) {
            self.diag.config_mismatches += 1;
            return;
        }
        if self.view.add_joining(msg.sender) {
            self.repl.add_peer(msg.sender);
            self.repl.release_held(now, &mut self.registry, &mut self.log);
        } else {
            self.repl.request_ack(msg.object);
        }
    }

    fn on_leave(&mut self, msg: &StateMessage) {
        if self.view.remove(msg.sender) {
            self.repl.remove_peer(msg.sender);
            self.donor_cache.remove(&msg.sender);
        } else {
            self.repl.request_ack(msg.object);
        }
    }

    fn take_snapshot(&self, now: u64) -> Snapshot {
        let objects = self
            .registry
            .ids()
            .map(|object| {
                let mut acks = self.repl.ack_vector(object);
                acks.insert(self.id, self.log.log(object).map_or(0, |l| l.last_seq()));
                let state = self.registry.object(object).expect("listed").snapshot();
                ObjectSnapshot { object, state, acks }
            })
            .collect();
        Snapshot { donor: self.id, epoch: self.view.epoch, taken_at: now, objects }
    }

    fn on_snapshot_request(&mut self, joiner: InstanceId, offset: u64, now: u64, out: &mut Vec<Outgoing>) {
        if !matches!(self.phase, Phase::Active) || !self.view.joining.contains(&joiner) {
            self.diag.stray_control += 1;
            return;
        }
        if !self.donor_cache.contains_key(&joiner) {
            // Atomic copy at an op boundary; the data path stops meanwhile.
            let bytes = self.take_snapshot(now).encode();
            let start = now.max(self.paused_until);
            let end = start + self.config.membership.copy_cost_us(bytes.len());
            self.pauses.push(PauseRecord { joiner, started_at: start, ended_at: end, snapshot_bytes: bytes.len() as u64 });
            self.paused_until = end;
            self.donor_cache.insert(joiner, bytes);
        }
        let bytes = &self.donor_cache[&joiner];
        let total = bytes.len() as u64;
        let chunk = self.config.membership.chunk_bytes.max(1);
        let mut msgs = Vec::new();
        let mut off = offset.min(total) as usize;
        loop {
            let end = (off + chunk).min(bytes.len());
            msgs.push(StateMessage::control(
                self.id,
                CONTROL_OBJECT,
                now,
                Control::SnapshotChunk { offset: off as u64, total_len: total, data: bytes[off..end].to_vec() },
            ));
            off = end;
            if off >= bytes.len() {
                break;
            }
        }
        let send_at = self.paused_until.max(now);
        for msg in msgs {
            let o = self.repl.control(Destination::Instance(joiner), &msg);
            if send_at > now {
                self.deferred.push((send_at, o));
            } else {
                out.push(o);
            }
        }
    }

    fn on_chunk(&mut self, donor: InstanceId, offset: u64, total_len: u64, data: Vec<u8>, now: u64) {
        let Phase::Joining(js) = &mut self.phase else {
            self.diag.stray_control += 1;
            return;
        };
        if js.step != JoinStep::Transferring || donor != js.donor() {
            self.diag.stray_control += 1;
            return;
        }
        if js.total_len.is_some_and(|t| t != total_len) {
            js.chunks.clear();
        }
        js.total_len = Some(total_len);
        let before = js.contiguous_len();
        js.chunks.entry(offset).or_insert(data);
        if js.contiguous_len() > before {
            js.last_progress = now;
            js.retries_without_progress = 0;
        }
        if js.is_complete() {
            js.timings.snapshot_complete_at = Some(now);
            js.timings.snapshot_bytes = total_len;
            let bytes = js.assemble();
            self.restore(&bytes, now);
        }
    }

    fn restore(&mut self, bytes: &[u8], now: u64) {
        let snap = match Snapshot::decode(bytes) {
            Ok(s) => s,
            Err(e) => {
                self.phase = Phase::Aborted(format!("snapshot decode failed: {e}"));
                return;
            }
        };
        for o in &snap.objects {
            let restored = self.registry.object_mut(o.object).map_err(|e| e.to_string()).and_then(|obj| obj.restore(&o.state).map_err(|e| e.to_string()));
            if let Err(e) = restored {
                self.phase = Phase::Aborted(format!("restore of object {} failed: {e}", o.object));
                return;
            }
            self.repl.restore_acks(o.object, &o.acks);
            if let Some(own) = o.acks.get(&self.id) {
                self.log.resume_after(o.object, *own);
            }
        }
        let Phase::Joining(js) = &mut self.phase else { return };
        let buffer = std::mem::take(&mut js.buffer);
        js.step = JoinStep::Restored;
        js.timings.restored_at = Some(now);
        // Replay what arrived during the transfer, one batch per origin.
        let mut batches: BTreeMap<(ObjectId, InstanceId), Vec<LogRecord>> = BTreeMap::new();
        for ((object, origin, _), record) in buffer {
            batches.entry((object, origin)).or_default().push(record);
        }
        for ((object, origin), records) in batches {
            let msg = StateMessage::data(origin, object, now, records, Vec::new());
            self.repl.on_data(msg, now, &mut self.registry, &mut self.log);
        }
    }

    fn on_data(&mut self, msg: StateMessage, now: u64) {
        match &mut self.phase {
            Phase::Joining(js) if js.step != JoinStep::Restored => {
                if js.bootstrap.contains(&msg.sender) && msg.acks.iter().any(|(id, _)| *id == self.id) {
                    js.confirmed.insert(msg.sender);
                }
                for r in msg.records {
                    js.buffer.insert((r.object, msg.sender, r.seq), r);
                    js.timings.buffered_records += 1;
                }
                if js.buffer.len() > self.config.membership.buffer_cap {
                    self.phase = Phase::Aborted("join buffer overflow".into());
                }
            }
            Phase::Aborted(_) => {}
            Phase::Leaving(ls) => {
                if ls.step == LeaveStep::Announcing && ls.peers.contains(&msg.sender) && !msg.acks.iter().any(|(id, _)| *id == self.id) {
                    ls.confirmed.insert(msg.sender);
                }
                if !matches!(ls.step, LeaveStep::Announcing | LeaveStep::Done) {
                    self.repl.on_data(msg, now, &mut self.registry, &mut self.log);
                }
            }
            _ => self.repl.on_data(msg, now, &mut self.registry, &mut self.log),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_objects::PnCounter;

    const OBJ: ObjectId = ObjectId(1);

    fn pair() -> (Instance, Instance) {
        let view = MembershipView::with_active([InstanceId(1), InstanceId(2)]);
        let specs = [(OBJ, ObjectSpec::PnCounter)];
        let a = Instance::new(InstanceId(1), InstanceConfig::default(), &specs, view.clone()).unwrap();
        let b = Instance::new(InstanceId(2), InstanceConfig::default(), &specs, view).unwrap();
        (a, b)
    }

    fn incr(i: &mut Instance, d: i64) {
        let id = i.id();
        let op = {
            let obj = i.registry.object_mut(OBJ).unwrap();
            obj.as_any_mut().downcast_mut::<PnCounter>().unwrap().update_op(id, d)
        };
        i.submit(OBJ, op).unwrap();
    }

    #[test]
    fn submit_applies_locally_and_logs() {
        let (mut a, _) = pair();
        incr(&mut a, 4);
        assert_eq!(a.registry().get::<PnCounter>(OBJ).unwrap().value(), 4);
        assert_eq!(a.log().log(OBJ).unwrap().len(), 1);
    }

    #[test]
    fn datagrams_replicate_between_instances() {
        let (mut a, mut b) = pair();
        incr(&mut a, 4);
        let out = a.on_wakeup(a.next_wakeup());
        let data: Vec<_> = out.iter().filter(|o| !o.background).collect();
        assert_eq!(data.len(), 1);
        b.on_datagram(&data[0].bytes, 10);
        assert_eq!(b.registry().get::<PnCounter>(OBJ).unwrap().value(), 4);
        let acks = b.on_wakeup(b.next_wakeup().max(10));
        for o in acks {
            a.on_datagram(&o.bytes, 20);
        }
        assert!(a.is_drained());
    }

    #[test]
    fn garbage_datagram_is_counted_and_dropped() {
        let (mut a, _) = pair();
        assert!(a.on_datagram(&[1, 2, 3], 0).is_empty());
        assert_eq!(a.diagnostics().decode_errors, 1);
    }

    #[test]
    fn joiner_rejects_local_ops() {
        let view = MembershipView::with_active([InstanceId(1)]);
        let mut boot = view.clone();
        boot.joining.insert(InstanceId(2));
        let mut j = Instance::new_joiner(InstanceId(2), InstanceConfig::default(), &[(OBJ, ObjectSpec::PnCounter)], boot, vec![InstanceId(1)], 0).unwrap();
        let op = PnCounter::new().update_op(InstanceId(2), 1);
        assert_eq!(j.submit(OBJ, op), Err(StateError::NotServing));
    }
}
