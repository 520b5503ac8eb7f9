use std::any::Any;

use crate::codec::{Reader, Writer};
use crate::error::{DecodeError, StateError};

use super::{read_u64_operand, unknown_opcode, InstanceId, ObjectKind, Operation, StateObject};

const OP_SET: u8 = 1;

/// Last-writer-wins register. Writes are ordered by (timestamp, writer id);
/// local timestamps never go backwards, so a writer's own writes are ordered.
#[derive(Debug, Clone, Default)]
pub struct LwwRegister {
    value: Vec<u8>,
    timestamp: u64,
    writer: InstanceId,
}

impl LwwRegister {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self) -> &[u8] {
        &self.value
    }

    pub fn timestamp(&self) -> u64 {
        self.timestamp
    }

    /// `now` is the writer's clock in microseconds.
    pub fn set_op(&self, value: &[u8], now: u64) -> Result<Operation, StateError> {
        let ts = now.max(self.timestamp.saturating_add(1));
        Operation::new(OP_SET, vec![value.to_vec(), ts.to_be_bytes().to_vec()])
    }
}

impl StateObject for LwwRegister {
    fn kind(&self) -> ObjectKind {
        ObjectKind::LwwRegister
    }

    fn apply(&mut self, origin: InstanceId, op: &Operation) -> Result<(), StateError> {
        if op.opcode() != OP_SET {
            return Err(unknown_opcode(self.kind(), op.opcode()));
        }
        let ts = read_u64_operand(op, 1)?;
        let value = op.operand(0)?;
        if (ts, origin) > (self.timestamp, self.writer) {
            self.value = value.to_vec();
            self.timestamp = ts;
            self.writer = origin;
        }
        Ok(())
    }

    fn coalesce(&self, earlier: &Operation, later: &Operation) -> Option<Operation> {
        // Same origin: the later write carries the larger timestamp.
        let (t1, t2) = (read_u64_operand(earlier, 1).ok()?, read_u64_operand(later, 1).ok()?);
        Some(if t2 >= t1 { later.clone() } else { earlier.clone() })
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.value).u64(self.timestamp).u16(self.writer.0);
        w.into_bytes()
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), DecodeError> {
        let mut r = Reader::new(bytes);
        let value = r.bytes()?.to_vec();
        let timestamp = r.u64()?;
        let writer = InstanceId(r.u16()?);
        r.finish()?;
        *self = LwwRegister { value, timestamp, writer };
        Ok(())
    }

    fn fingerprint(&self) -> Vec<u8> {
        self.value.clone()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
