use std::fmt;
use std::io;

use serde::Serialize;

use crate::ids::InstanceId;
use crate::state_objects::FlowKey;

/// Minimum plausible IPv4 + TCP header length.
pub const MIN_PACKET_LEN: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Direction {
    /// Inside to outside.
    Outbound,
    /// Outside to inside.
    Inbound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub key: FlowKey,
    pub length: u32,
    pub direction: Direction,
    pub arrival: u64,
}

impl Packet {
    pub fn new(key: FlowKey, length: u32, direction: Direction, arrival: u64) -> Self {
        debug_assert!(length >= MIN_PACKET_LEN, "packet shorter than its headers");
        Self { key, length: length.max(MIN_PACKET_LEN), direction, arrival }
    }

    pub fn bits(&self) -> u64 {
        self.length as u64 * 8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    Blocked,
    NoState,
    PoolExhausted,
    NotServing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    Passed,
    Translated(u16),
    Dropped(DropReason),
    /// The flow lost a port collision and is torn down.
    Reset,
}

impl Verdict {
    pub fn passes(&self) -> bool {
        matches!(self, Verdict::Passed | Verdict::Translated(_))
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Passed => f.write_str("passed"),
            Verdict::Translated(p) => write!(f, "translated:{p}"),
            Verdict::Dropped(DropReason::Blocked) => f.write_str("dropped:blocked"),
            Verdict::Dropped(DropReason::NoState) => f.write_str("dropped:no-state"),
            Verdict::Dropped(DropReason::PoolExhausted) => f.write_str("dropped:pool-exhausted"),
            Verdict::Dropped(DropReason::NotServing) => f.write_str("dropped:not-serving"),
            Verdict::Reset => f.write_str("reset"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerdictEntry {
    pub virtual_time: u64,
    pub instance: u16,
    pub flow: String,
    pub verdict: String,
}

/// Append-only verdict stream, one row per processed packet.
#[derive(Debug, Clone, Default)]
pub struct VerdictLog {
    entries: Vec<VerdictEntry>,
}

impl VerdictLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, at: u64, instance: InstanceId, pkt: &Packet, verdict: Verdict) {
        self.entries.push(VerdictEntry {
            virtual_time: at,
            instance: instance.0,
            flow: pkt.key.to_string(),
            verdict: verdict.to_string(),
        });
    }

    pub fn entries(&self) -> &[VerdictEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.entries {
            out.serialize(e)?;
        }
        out.flush()?;
        Ok(())
    }
}
