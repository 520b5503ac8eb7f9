//! Bit-exact state message framing, shared by data and control messages.

use crate::codec::{Reader, Writer};
use crate::error::DecodeError;
use crate::ids::{InstanceId, ObjectId};
use crate::log_store::LogRecord;
use crate::state_objects::Operation;

pub const MAGIC: u16 = 0xC57A;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;
/// Encoded size of one ack entry.
pub const ACK_ENTRY_LEN: usize = 10;
/// Record framing before the operation bytes.
pub const RECORD_OVERHEAD: usize = 12;

/// Object field of instance-wide control messages (snapshot transfer).
pub const CONTROL_OBJECT: ObjectId = ObjectId(u32::MAX);

pub mod flags {
    pub const KEEPALIVE: u8 = 1 << 0;
    pub const COALESCED: u8 = 1 << 1;
    pub const JOIN: u8 = 1 << 2;
    pub const LEAVE: u8 = 1 << 3;
    pub const SNAP_REQ: u8 = 1 << 4;
    pub const SNAP_CHUNK: u8 = 1 << 5;
    pub(super) const CONTROL: u8 = JOIN | LEAVE | SNAP_REQ | SNAP_CHUNK;
    pub(super) const KNOWN: u8 = KEEPALIVE | COALESCED | CONTROL;
}

/// Control payload, selected by exactly one of the control flag bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Control {
    None,
    /// Join announcement carrying the joiner's configuration digest for the
    /// message's object.
    Join { config_digest: u64 },
    Leave,
    SnapshotRequest { offset: u64 },
    SnapshotChunk { offset: u64, total_len: u64, data: Vec<u8> },
}

impl Control {
    fn flag(&self) -> u8 {
        match self {
            Control::None => 0,
            Control::Join { .. } => flags::JOIN,
            Control::Leave => flags::LEAVE,
            Control::SnapshotRequest { .. } => flags::SNAP_REQ,
            Control::SnapshotChunk { .. } => flags::SNAP_CHUNK,
        }
    }

    fn encoded_len(&self) -> usize {
        match self {
            Control::None | Control::Leave => 0,
            Control::Join { .. } | Control::SnapshotRequest { .. } => 8,
            Control::SnapshotChunk { data, .. } => 16 + data.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateMessage {
    pub sender: InstanceId,
    pub object: ObjectId,
    pub keepalive: bool,
    pub send_timestamp: u64,
    pub records: Vec<LogRecord>,
    pub acks: Vec<(InstanceId, u64)>,
    pub control: Control,
}

impl StateMessage {
    pub fn data(sender: InstanceId, object: ObjectId, now: u64, records: Vec<LogRecord>, acks: Vec<(InstanceId, u64)>) -> Self {
        let keepalive = records.is_empty();
        Self { sender, object, keepalive, send_timestamp: now, records, acks, control: Control::None }
    }

    pub fn control(sender: InstanceId, object: ObjectId, now: u64, control: Control) -> Self {
        Self { sender, object, keepalive: false, send_timestamp: now, records: Vec::new(), acks: Vec::new(), control }
    }

    pub fn is_coalesced(&self) -> bool {
        self.records.iter().any(|r| r.coalesced_span > 1)
    }

    pub fn flags(&self) -> u8 {
        let mut f = self.control.flag();
        if self.keepalive {
            f |= flags::KEEPALIVE;
        }
        if self.is_coalesced() {
            f |= flags::COALESCED;
        }
        f
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self.records.iter().map(|r| RECORD_OVERHEAD + r.op.encoded_len()).sum::<usize>()
            + ACK_ENTRY_LEN * self.acks.len()
            + self.control.encoded_len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.encoded_len());
        w.u16(MAGIC)
            .u8(VERSION)
            .u8(self.flags())
            .u16(self.sender.0)
            .u32(self.object.0)
            .u16(self.records.len() as u16)
            .u16(self.acks.len() as u16)
            .u64(self.send_timestamp);
        for r in &self.records {
            w.u64(r.seq).u32(r.coalesced_span);
            r.op.encode(&mut w);
        }
        for (id, seq) in &self.acks {
            w.u16(id.0).u64(*seq);
        }
        match &self.control {
            Control::None | Control::Leave => {}
            Control::Join { config_digest } => {
                w.u64(*config_digest);
            }
            Control::SnapshotRequest { offset } => {
                w.u64(*offset);
            }
            Control::SnapshotChunk { offset, total_len, data } => {
                w.u64(*offset).u64(*total_len).raw(data);
            }
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let magic = r.u16()?;
        if magic != MAGIC {
            return Err(DecodeError::BadMagic(magic));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(DecodeError::BadVersion(version));
        }
        let f = r.u8()?;
        if f & !flags::KNOWN != 0 {
            return Err(DecodeError::invalid("flags", format!("unknown bits 0x{:02x}", f & !flags::KNOWN)));
        }
        if (f & flags::CONTROL).count_ones() > 1 {
            return Err(DecodeError::invalid("flags", "more than one control bit"));
        }
        let sender = InstanceId(r.u16()?);
        let object = ObjectId(r.u32()?);
        let record_count = r.u16()? as usize;
        let ack_count = r.u16()? as usize;
        let send_timestamp = r.u64()?;
        let keepalive = f & flags::KEEPALIVE != 0;
        if keepalive && record_count > 0 {
            return Err(DecodeError::invalid("keepalive", "carries records"));
        }
        let mut records = Vec::with_capacity(record_count.min(256));
        let mut last = 0;
        for _ in 0..record_count {
            let seq = r.u64()?;
            let coalesced_span = r.u32()?;
            if coalesced_span == 0 || coalesced_span as u64 > seq {
                return Err(DecodeError::invalid("record", format!("span {coalesced_span} at seq {seq}")));
            }
            if seq <= last {
                return Err(DecodeError::invalid("record", "seqs not increasing"));
            }
            last = seq;
            let op = Operation::decode(&mut r)?;
            records.push(LogRecord { object, seq, coalesced_span, op });
        }
        let mut acks = Vec::with_capacity(ack_count.min(256));
        for _ in 0..ack_count {
            acks.push((InstanceId(r.u16()?), r.u64()?));
        }
        let control = if f & flags::JOIN != 0 {
            Control::Join { config_digest: r.u64()? }
        } else if f & flags::LEAVE != 0 {
            Control::Leave
        } else if f & flags::SNAP_REQ != 0 {
            Control::SnapshotRequest { offset: r.u64()? }
        } else if f & flags::SNAP_CHUNK != 0 {
            let offset = r.u64()?;
            let total_len = r.u64()?;
            Control::SnapshotChunk { offset, total_len, data: r.rest().to_vec() }
        } else {
            Control::None
        };
        r.finish()?;
        let msg = Self { sender, object, keepalive, send_timestamp, records, acks, control };
        if (f & flags::COALESCED != 0) != msg.is_coalesced() {
            return Err(DecodeError::invalid("flags", "coalesced bit disagrees with record spans"));
        }
        Ok(msg)
    }
}
