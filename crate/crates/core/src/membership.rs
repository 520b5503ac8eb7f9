//! Membership views, snapshots and the join/leave protocol state.
//!
//! The protocol itself runs inside [`crate::instance::Instance`]; this module
//! holds the data it exchanges and the orchestrator that serializes events.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::codec::{Reader, Writer};
use crate::error::DecodeError;
use crate::ids::{InstanceId, ObjectId};
use crate::log_store::LogRecord;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MembershipView {
    pub active: BTreeSet<InstanceId>,
    pub joining: BTreeSet<InstanceId>,
    pub epoch: u64,
}

impl MembershipView {
    pub fn with_active(ids: impl IntoIterator<Item = InstanceId>) -> Self {
        Self { active: ids.into_iter().collect(), joining: BTreeSet::new(), epoch: 1 }
    }

    /// Active and joining instances.
    pub fn members(&self) -> BTreeSet<InstanceId> {
        self.active.union(&self.joining).copied().collect()
    }

    pub fn contains(&self, id: InstanceId) -> bool {
        self.active.contains(&id) || self.joining.contains(&id)
    }

    pub fn add_joining(&mut self, id: InstanceId) -> bool {
        !self.active.contains(&id) && self.joining.insert(id)
    }

    pub fn activate(&mut self, id: InstanceId) {
        self.joining.remove(&id);
        self.active.insert(id);
    }

    pub fn remove(&mut self, id: InstanceId) -> bool {
        let a = self.active.remove(&id);
        let j = self.joining.remove(&id);
        a || j
    }

    pub fn is_consistent(&self) -> bool {
        self.active.is_disjoint(&self.joining)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectSnapshot {
    pub object: ObjectId,
    pub state: Vec<u8>,
    /// The donor's ack vector for this object, including its own last seq.
    pub acks: BTreeMap<InstanceId, u64>,
}

/// One consistent cut of a donor's replicated state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub donor: InstanceId,
    pub epoch: u64,
    pub taken_at: u64,
    pub objects: Vec<ObjectSnapshot>,
}

impl Snapshot {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u16(self.donor.0).u64(self.epoch).u64(self.taken_at).u32(self.objects.len() as u32);
        for o in &self.objects {
            w.u32(o.object.0).bytes(&o.state).u16(o.acks.len() as u16);
            for (id, seq) in &o.acks {
                w.u16(id.0).u64(*seq);
            }
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let donor = InstanceId(r.u16()?);
        let epoch = r.u64()?;
        let taken_at = r.u64()?;
        let n = r.u32()? as usize;
        let mut objects = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let object = ObjectId(r.u32()?);
            let state = r.bytes()?.to_vec();
            let count = r.u16()?;
            let mut acks = BTreeMap::new();
            for _ in 0..count {
                acks.insert(InstanceId(r.u16()?), r.u64()?);
            }
            objects.push(ObjectSnapshot { object, state, acks });
        }
        r.finish()?;
        Ok(Self { donor, epoch, taken_at, objects })
    }
}

#[derive(Debug, Clone)]
pub struct MembershipConfig {
    pub join_retry_us: u64,
    pub leave_retry_us: u64,
    /// Wait for missing snapshot chunks before re-requesting.
    pub snapshot_retry_us: u64,
    /// Re-requests without progress before switching donor.
    pub donor_switch_after: u32,
    /// Records a joiner buffers before its snapshot arrives.
    pub buffer_cap: usize,
    pub chunk_bytes: usize,
    /// Snapshot copy cost: fixed part plus bytes at the given rate.
    pub copy_base_us: u64,
    pub copy_bytes_per_us: u64,
}

impl Default for MembershipConfig {
    fn default() -> Self {
        Self {
            join_retry_us: 20_000,
            leave_retry_us: 20_000,
            snapshot_retry_us: 50_000,
            donor_switch_after: 4,
            buffer_cap: 1 << 16,
            chunk_bytes: 1300,
            copy_base_us: 10,
            copy_bytes_per_us: 1000,
        }
    }
}

impl MembershipConfig {
    /// Virtual time the donor's data path stops for while copying.
    pub fn copy_cost_us(&self, bytes: usize) -> u64 {
        self.copy_base_us + (bytes as u64).div_ceil(self.copy_bytes_per_us.max(1))
    }
}

/// A data-path pause on a donor while it copied a snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PauseRecord {
    pub joiner: InstanceId,
    pub started_at: u64,
    pub ended_at: u64,
    pub snapshot_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JoinStep {
    /// Multicasting join until every existing member confirms.
    Announcing,
    /// Fetching the snapshot from a donor.
    Transferring,
    /// Snapshot applied and buffered records replayed.
    Restored,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct JoinTimings {
    pub started_at: u64,
    pub confirmed_at: Option<u64>,
    pub snapshot_complete_at: Option<u64>,
    pub restored_at: Option<u64>,
    pub snapshot_bytes: u64,
    pub donor_switches: u32,
    pub snapshot_requests: u32,
    pub join_messages: u32,
    pub buffered_records: u64,
}

#[derive(Debug, Clone)]
pub struct JoinState {
    pub step: JoinStep,
    pub bootstrap: BTreeSet<InstanceId>,
    pub confirmed: BTreeSet<InstanceId>,
    pub last_join_sent: Option<u64>,
    pub donors: Vec<InstanceId>,
    pub donor_index: usize,
    pub chunks: BTreeMap<u64, Vec<u8>>,
    pub total_len: Option<u64>,
    pub last_request: Option<u64>,
    pub last_progress: u64,
    pub retries_without_progress: u32,
    /// Records received before the snapshot, keyed by (object, origin, seq).
    pub buffer: BTreeMap<(ObjectId, InstanceId, u64), LogRecord>,
    pub timings: JoinTimings,
}

impl JoinState {
    pub fn new(bootstrap: BTreeSet<InstanceId>, donors: Vec<InstanceId>, now: u64) -> Self {
        Self {
            step: JoinStep::Announcing,
            bootstrap,
            confirmed: BTreeSet::new(),
            last_join_sent: None,
            donors,
            donor_index: 0,
            chunks: BTreeMap::new(),
            total_len: None,
            last_request: None,
            last_progress: now,
            retries_without_progress: 0,
            buffer: BTreeMap::new(),
            timings: JoinTimings { started_at: now, ..JoinTimings::default() },
        }
    }

    pub fn donor(&self) -> InstanceId {
        self.donors[self.donor_index % self.donors.len()]
    }

    pub fn all_confirmed(&self) -> bool {
        self.bootstrap.is_subset(&self.confirmed)
    }

    /// Length of the contiguous prefix of chunks received so far.
    pub fn contiguous_len(&self) -> u64 {
        let mut end = 0;
        for (off, data) in &self.chunks {
            if *off > end {
                break;
            }
            end = end.max(off + data.len() as u64);
        }
        end
    }

    pub fn is_complete(&self) -> bool {
        self.total_len.is_some_and(|t| self.contiguous_len() >= t)
    }

    pub fn assemble(&self) -> Vec<u8> {
        let total = self.total_len.unwrap_or(0) as usize;
        let mut out = vec![0u8; total];
        for (off, data) in &self.chunks {
            let off = *off as usize;
            let end = (off + data.len()).min(total);
            if off < end {
                out[off..end].copy_from_slice(&data[..end - off]);
            }
        }
        out
    }

    pub fn switch_donor(&mut self) {
        self.donor_index += 1;
        self.chunks.clear();
        self.total_len = None;
        self.retries_without_progress = 0;
        self.timings.donor_switches += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LeaveStep {
    /// Waiting for traffic already in flight to the victim.
    Grace { until: u64 },
    /// Retransmitting until every local record is acknowledged.
    Draining,
    /// Multicasting leave until every peer drops this instance.
    Announcing,
    Done,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LeaveTimings {
    pub started_at: u64,
    pub drain_started_at: Option<u64>,
    pub drained_at: Option<u64>,
    pub completed_at: Option<u64>,
    pub leave_messages: u32,
}

#[derive(Debug, Clone)]
pub struct LeaveState {
    pub step: LeaveStep,
    pub peers: BTreeSet<InstanceId>,
    pub confirmed: BTreeSet<InstanceId>,
    pub last_leave_sent: Option<u64>,
    pub timings: LeaveTimings,
}

impl LeaveState {
    pub fn new(peers: BTreeSet<InstanceId>, now: u64, grace_us: u64) -> Self {
        Self {
            step: LeaveStep::Grace { until: now + grace_us },
            peers,
            confirmed: BTreeSet::new(),
            last_leave_sent: None,
            timings: LeaveTimings { started_at: now, ..LeaveTimings::default() },
        }
    }

    pub fn all_confirmed(&self) -> bool {
        self.peers.is_subset(&self.confirmed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum MembershipEvent {
    ScaleOut { joiner: InstanceId, donor: InstanceId },
    ScaleIn { victim: InstanceId },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MembershipError {
    #[error("a membership event is already in progress")]
    Busy,
    #[error("instance {0} is already a member")]
    AlreadyMember(InstanceId),
    #[error("instance {0} is not an active member")]
    NotActive(InstanceId),
    #[error("join of {0} aborted: {1}")]
    JoinAborted(InstanceId, String),
}

/// Authoritative view kept by the (assumed fault-tolerant) orchestrator. It
/// admits one membership event at a time.
#[derive(Debug, Clone)]
pub struct Orchestrator {
    view: MembershipView,
    in_flight: Option<MembershipEvent>,
    departed: BTreeSet<InstanceId>,
    history: Vec<(u64, MembershipEvent)>,
}

impl Orchestrator {
    pub fn new(view: MembershipView) -> Self {
        Self { view, in_flight: None, departed: BTreeSet::new(), history: Vec::new() }
    }

    pub fn view(&self) -> &MembershipView {
        &self.view
    }

    pub fn in_flight(&self) -> Option<&MembershipEvent> {
        self.in_flight.as_ref()
    }

    /// Lowest id never used, or recycled from a departed instance.
    pub fn next_id(&self, prefer_recycled: bool) -> InstanceId {
        if prefer_recycled {
            if let Some(id) = self.departed.iter().next() {
                return *id;
            }
        }
        let max = self.view.members().into_iter().chain(self.departed.iter().copied()).map(|i| i.0).max().unwrap_or(0);
        InstanceId(max + 1)
    }

    pub fn departed(&self) -> &BTreeSet<InstanceId> {
        &self.departed
    }

    pub fn begin_scale_out(&mut self, joiner: InstanceId, donor: InstanceId) -> Result<MembershipView, MembershipError> {
        if self.in_flight.is_some() {
            return Err(MembershipError::Busy);
        }
        if self.view.contains(joiner) {
            return Err(MembershipError::AlreadyMember(joiner));
        }
        if !self.view.active.contains(&donor) {
            return Err(MembershipError::NotActive(donor));
        }
        self.in_flight = Some(MembershipEvent::ScaleOut { joiner, donor });
        // The joiner bootstraps from the view it will join.
        let mut bootstrap = self.view.clone();
        bootstrap.joining.insert(joiner);
        Ok(bootstrap)
    }

    /// Step 4 done at the joiner: it becomes active in epoch + 1.
    pub fn complete_scale_out(&mut self, now: u64) -> Option<MembershipView> {
        let Some(MembershipEvent::ScaleOut { joiner, donor }) = self.in_flight.clone() else { return None };
        self.view.activate(joiner);
        self.view.epoch += 1;
        self.departed.remove(&joiner);
        self.history.push((now, MembershipEvent::ScaleOut { joiner, donor }));
        self.in_flight = None;
        Some(self.view.clone())
    }

    pub fn abort_scale_out(&mut self) {
        if matches!(self.in_flight, Some(MembershipEvent::ScaleOut { .. })) {
            self.in_flight = None;
        }
    }

    pub fn begin_scale_in(&mut self, victim: InstanceId) -> Result<(), MembershipError> {
        if self.in_flight.is_some() {
            return Err(MembershipError::Busy);
        }
        if !self.view.active.contains(&victim) {
            return Err(MembershipError::NotActive(victim));
        }
        self.in_flight = Some(MembershipEvent::ScaleIn { victim });
        Ok(())
    }

    pub fn complete_scale_in(&mut self, now: u64) -> Option<MembershipView> {
        let Some(MembershipEvent::ScaleIn { victim }) = self.in_flight.clone() else { return None };
        self.view.remove(victim);
        self.view.epoch += 1;
        self.departed.insert(victim);
        self.history.push((now, MembershipEvent::ScaleIn { victim }));
        self.in_flight = None;
        Some(self.view.clone())
    }

    pub fn history(&self) -> &[(u64, MembershipEvent)] {
        &self.history
    }
}
