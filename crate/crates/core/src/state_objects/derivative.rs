use std::any::Any;

use crate::codec::{Reader, Writer};
use crate::error::{DecodeError, StateError};

use super::{downcast, unknown_opcode, InstanceId, ObjectId, ObjectKind, Operation, StateObject, MAX_OPERANDS};

const OP_COMPOSITE: u8 = 1;

/// An object built from member objects, mutated only through composite
/// operations so that several member updates travel (and apply) as one record.
#[derive(Debug)]
pub struct Derivative {
    members: Vec<(ObjectId, Box<dyn StateObject>)>,
}

impl Derivative {
    pub fn new(members: Vec<(ObjectId, Box<dyn StateObject>)>) -> Self {
        Self { members }
    }

    pub fn member_ids(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.members.iter().map(|(id, _)| *id)
    }

    pub fn member_object(&self, id: ObjectId) -> Result<&dyn StateObject, StateError> {
        self.members
            .iter()
            .find(|(m, _)| *m == id)
            .map(|(_, o)| o.as_ref())
            .ok_or(StateError::NotAMember(id))
    }

    pub fn member<T: StateObject + 'static>(&self, id: ObjectId) -> Result<&T, StateError> {
        downcast(id, self.member_object(id)?)
    }

    /// Packs member operations into one composite. Each member op becomes a
    /// header operand `[member u32][opcode u8][count u8]` followed by its own
    /// operands.
    pub fn compose(&self, parts: &[(ObjectId, Operation)]) -> Result<Operation, StateError> {
        let mut operands = Vec::new();
        for (id, op) in parts {
            self.member_object(*id)?;
            let mut header = Vec::with_capacity(6);
            header.extend_from_slice(&id.0.to_be_bytes());
            header.push(op.opcode());
            header.push(op.operands().len() as u8);
            operands.push(header);
            operands.extend(op.operands().iter().cloned());
        }
        if operands.len() > MAX_OPERANDS {
            return Err(StateError::TooManyOperands(operands.len()));
        }
        Operation::new(OP_COMPOSITE, operands)
    }

    /// Splits a composite into member operations, resolving each member to
    /// its index.
    pub fn decompose(&self, op: &Operation) -> Result<Vec<(usize, Operation)>, StateError> {
        if op.opcode() != OP_COMPOSITE {
            return Err(unknown_opcode(ObjectKind::Derivative, op.opcode()));
        }
        let mut parts = Vec::new();
        let mut rest = op.operands();
        while let Some((header, tail)) = rest.split_first() {
            if header.len() != 6 {
                return Err(StateError::MalformedOp("derivative header must be 6 bytes".into()));
            }
            let id = ObjectId(u32::from_be_bytes(header[..4].try_into().expect("checked length")));
            let count = header[5] as usize;
            if tail.len() < count {
                return Err(StateError::MalformedOp(format!("member {id} op truncated")));
            }
            let index = self
                .members
                .iter()
                .position(|(m, _)| *m == id)
                .ok_or(StateError::NotAMember(id))?;
            parts.push((index, Operation::new(header[4], tail[..count].to_vec())?));
            rest = &tail[count..];
        }
        Ok(parts)
    }
}

impl StateObject for Derivative {
    fn kind(&self) -> ObjectKind {
        ObjectKind::Derivative
    }

    fn requires_ordered_delivery(&self) -> bool {
        self.members.iter().any(|(_, m)| m.requires_ordered_delivery())
    }

    /// Decodes the whole composite before touching any member, so a malformed
    /// record changes nothing.
    fn apply(&mut self, origin: InstanceId, op: &Operation) -> Result<(), StateError> {
        for (index, part) in self.decompose(op)? {
            self.members[index].1.apply(origin, &part)?;
        }
        Ok(())
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.members.len() as u32);
        for (id, m) in &self.members {
            w.u32(id.0).bytes(&m.snapshot());
        }
        w.into_bytes()
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), DecodeError> {
        let mut r = Reader::new(bytes);
        let n = r.u32()? as usize;
        if n != self.members.len() {
            return Err(DecodeError::invalid("derivative snapshot", format!("{n} members, configured {}", self.members.len())));
        }
        let mut parts = Vec::with_capacity(n);
        for (id, _) in &self.members {
            let got = ObjectId(r.u32()?);
            if got != *id {
                return Err(DecodeError::invalid("derivative snapshot", format!("member {got}, expected {id}")));
            }
            parts.push(r.bytes()?);
        }
        r.finish()?;
        for ((_, m), bytes) in self.members.iter_mut().zip(parts) {
            m.restore(bytes)?;
        }
        Ok(())
    }

    fn fingerprint(&self) -> Vec<u8> {
        let mut w = Writer::new();
        for (id, m) in &self.members {
            w.u32(id.0).bytes(&m.fingerprint());
        }
        w.into_bytes()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
