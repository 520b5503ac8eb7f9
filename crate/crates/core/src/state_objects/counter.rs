use std::any::Any;
use std::collections::BTreeMap;

use crate::codec::{Reader, Writer};
use crate::error::{DecodeError, StateError};

use super::{read_u32_operand, read_u64_operand, unknown_opcode, InstanceId, ObjectKind, Operation, StateObject};

const OP_INC: u8 = 1;
const OP_DEC: u8 = 2;
const OP_TOTALS: u8 = 3;

/// Per-origin running totals of increments and decrements. Records carry the
/// origin's total after the update alongside the delta, so applying is a
/// max-merge: idempotent, commutative, and coalescible by keeping the latest
/// totals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct PnTotals {
    inc: BTreeMap<InstanceId, u64>,
    dec: BTreeMap<InstanceId, u64>,
}

impl PnTotals {
    fn own(&self, origin: InstanceId) -> (u64, u64) {
        (
            self.inc.get(&origin).copied().unwrap_or(0),
            self.dec.get(&origin).copied().unwrap_or(0),
        )
    }

    /// Returns (opcode, |delta|, new total, saturated).
    fn prepare(&self, origin: InstanceId, delta: i64) -> (u8, u64, u64, bool) {
        let (p, n) = self.own(origin);
        let magnitude = delta.unsigned_abs();
        if delta >= 0 {
            let (total, overflow) = p.overflowing_add(magnitude);
            (OP_INC, magnitude, if overflow { u64::MAX } else { total }, overflow)
        } else {
            let (total, overflow) = n.overflowing_add(magnitude);
            (OP_DEC, magnitude, if overflow { u64::MAX } else { total }, overflow)
        }
    }

    fn merge_inc(&mut self, origin: InstanceId, total: u64) {
        let e = self.inc.entry(origin).or_insert(0);
        *e = (*e).max(total);
    }

    fn merge_dec(&mut self, origin: InstanceId, total: u64) {
        let e = self.dec.entry(origin).or_insert(0);
        *e = (*e).max(total);
    }

    /// Value and whether it saturated.
    fn value(&self) -> (i64, bool) {
        let p: u128 = self.inc.values().map(|&v| v as u128).sum();
        let n: u128 = self.dec.values().map(|&v| v as u128).sum();
        let v = p as i128 - n as i128;
        let clamped = v.clamp(i64::MIN as i128, i64::MAX as i128);
        (clamped as i64, clamped != v)
    }

    fn write(&self, w: &mut Writer) {
        for map in [&self.inc, &self.dec] {
            w.u32(map.len() as u32);
            for (origin, total) in map {
                w.u16(origin.0).u64(*total);
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let mut out = PnTotals::default();
        for map in [&mut out.inc, &mut out.dec] {
            let n = r.u32()?;
            for _ in 0..n {
                let origin = InstanceId(r.u16()?);
                map.insert(origin, r.u64()?);
            }
        }
        Ok(out)
    }
}

/// Positive-negative counter.
#[derive(Debug, Clone, Default)]
pub struct PnCounter {
    totals: PnTotals,
    saturations: u64,
}

impl PnCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self) -> i64 {
        self.totals.value().0
    }

    /// Number of updates or reads that hit the 64-bit bound.
    pub fn saturations(&self) -> u64 {
        self.saturations
    }

    /// Operation that adds `delta` on behalf of `origin`. Overflow saturates
    /// and is counted.
    pub fn update_op(&mut self, origin: InstanceId, delta: i64) -> Operation {
        let (opcode, magnitude, total, saturated) = self.totals.prepare(origin, delta);
        if saturated {
            self.saturations += 1;
        }
        Operation::new(opcode, vec![magnitude.to_be_bytes().to_vec(), total.to_be_bytes().to_vec()])
            .expect("fixed-size operands")
    }
}

fn totals_of(op: &Operation) -> Result<(Option<u64>, Option<u64>), StateError> {
    match op.opcode() {
        OP_INC => Ok((Some(read_u64_operand(op, 1)?), None)),
        OP_DEC => Ok((None, Some(read_u64_operand(op, 1)?))),
        OP_TOTALS => Ok((Some(read_u64_operand(op, 0)?), Some(read_u64_operand(op, 1)?))),
        other => Err(unknown_opcode(ObjectKind::PnCounter, other)),
    }
}

impl StateObject for PnCounter {
    fn kind(&self) -> ObjectKind {
        ObjectKind::PnCounter
    }

    fn apply(&mut self, origin: InstanceId, op: &Operation) -> Result<(), StateError> {
        let (p, n) = totals_of(op)?;
        if let Some(p) = p {
            self.totals.merge_inc(origin, p);
        }
        if let Some(n) = n {
            self.totals.merge_dec(origin, n);
        }
        if self.totals.value().1 {
            self.saturations += 1;
        }
        Ok(())
    }

    fn coalesce(&self, earlier: &Operation, later: &Operation) -> Option<Operation> {
        if earlier.opcode() == later.opcode() && earlier.opcode() != OP_TOTALS {
            let d = read_u64_operand(earlier, 0).ok()?.saturating_add(read_u64_operand(later, 0).ok()?);
            let total = read_u64_operand(earlier, 1).ok()?.max(read_u64_operand(later, 1).ok()?);
            return Operation::new(earlier.opcode(), vec![d.to_be_bytes().to_vec(), total.to_be_bytes().to_vec()]).ok();
        }
        let (p1, n1) = totals_of(earlier).ok()?;
        let (p2, n2) = totals_of(later).ok()?;
        let p = p1.unwrap_or(0).max(p2.unwrap_or(0));
        let n = n1.unwrap_or(0).max(n2.unwrap_or(0));
        Operation::new(OP_TOTALS, vec![p.to_be_bytes().to_vec(), n.to_be_bytes().to_vec()]).ok()
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.totals.write(&mut w);
        w.u64(self.saturations);
        w.into_bytes()
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), DecodeError> {
        let mut r = Reader::new(bytes);
        let totals = PnTotals::read(&mut r)?;
        let saturations = r.u64()?;
        r.finish()?;
        self.totals = totals;
        self.saturations = saturations;
        Ok(())
    }

    fn fingerprint(&self) -> Vec<u8> {
        self.value().to_be_bytes().to_vec()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Sparse array of PN-counters indexed by a 32-bit slot (a port number, a
/// backend server index).
#[derive(Debug, Clone, Default)]
pub struct CounterVector {
    slots: BTreeMap<u32, PnTotals>,
    saturations: u64,
}

impl CounterVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, index: u32) -> i64 {
        self.slots.get(&index).map_or(0, |t| t.value().0)
    }

    pub fn saturations(&self) -> u64 {
        self.saturations
    }

    /// Non-zero slots in index order.
    pub fn values(&self) -> impl Iterator<Item = (u32, i64)> + '_ {
        self.slots.iter().map(|(i, t)| (*i, t.value().0)).filter(|(_, v)| *v != 0)
    }

    /// The operand list starts with the slot index, so an update of slot 22
    /// reads `(inc,{22,..})`.
    pub fn update_op(&mut self, origin: InstanceId, index: u32, delta: i64) -> Operation {
        let empty = PnTotals::default();
        let totals = self.slots.get(&index).unwrap_or(&empty);
        let (opcode, magnitude, total, saturated) = totals.prepare(origin, delta);
        if saturated {
            self.saturations += 1;
        }
        Operation::new(
            opcode,
            vec![index.to_be_bytes().to_vec(), magnitude.to_be_bytes().to_vec(), total.to_be_bytes().to_vec()],
        )
        .expect("fixed-size operands")
    }

    fn merge(&mut self, origin: InstanceId, index: u32, p: Option<u64>, n: Option<u64>) {
        let slot = self.slots.entry(index).or_default();
        if let Some(p) = p {
            slot.merge_inc(origin, p);
        }
        if let Some(n) = n {
            slot.merge_dec(origin, n);
        }
        if slot.value().1 {
            self.saturations += 1;
        }
    }
}

/// Entries of the form (index, optional inc total, optional dec total)
/// described by an operation.
type SlotTotals = Vec<(u32, Option<u64>, Option<u64>)>;

fn slot_totals(op: &Operation) -> Result<SlotTotals, StateError> {
    match op.opcode() {
        OP_INC => Ok(vec![(read_u32_operand(op, 0)?, Some(read_u64_operand(op, 2)?), None)]),
        OP_DEC => Ok(vec![(read_u32_operand(op, 0)?, None, Some(read_u64_operand(op, 2)?))]),
        OP_TOTALS => op
            .operands()
            .iter()
            .map(|raw| {
                if raw.len() != 20 {
                    return Err(StateError::MalformedOp(format!("totals entry of {} bytes", raw.len())));
                }
                let idx = u32::from_be_bytes(raw[0..4].try_into().unwrap());
                let p = u64::from_be_bytes(raw[4..12].try_into().unwrap());
                let n = u64::from_be_bytes(raw[12..20].try_into().unwrap());
                Ok((idx, Some(p), Some(n)))
            })
            .collect(),
        other => Err(unknown_opcode(ObjectKind::CounterVector, other)),
    }
}

impl StateObject for CounterVector {
    fn kind(&self) -> ObjectKind {
        ObjectKind::CounterVector
    }

    fn apply(&mut self, origin: InstanceId, op: &Operation) -> Result<(), StateError> {
        for (idx, p, n) in slot_totals(op)? {
            self.merge(origin, idx, p, n);
        }
        Ok(())
    }

    fn coalesce(&self, earlier: &Operation, later: &Operation) -> Option<Operation> {
        let mut merged: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
        for (idx, p, n) in slot_totals(earlier).ok()?.into_iter().chain(slot_totals(later).ok()?) {
            let e = merged.entry(idx).or_insert((0, 0));
            e.0 = e.0.max(p.unwrap_or(0));
            e.1 = e.1.max(n.unwrap_or(0));
        }
        let operands = merged
            .into_iter()
            .map(|(idx, (p, n))| {
                let mut raw = Vec::with_capacity(20);
                raw.extend_from_slice(&idx.to_be_bytes());
                raw.extend_from_slice(&p.to_be_bytes());
                raw.extend_from_slice(&n.to_be_bytes());
                raw
            })
            .collect();
        Operation::new(OP_TOTALS, operands).ok()
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.slots.len() as u32);
        for (idx, totals) in &self.slots {
            w.u32(*idx);
            totals.write(&mut w);
        }
        w.u64(self.saturations);
        w.into_bytes()
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), DecodeError> {
        let mut r = Reader::new(bytes);
        let n = r.u32()?;
        let mut slots = BTreeMap::new();
        for _ in 0..n {
            let idx = r.u32()?;
            slots.insert(idx, PnTotals::read(&mut r)?);
        }
        let saturations = r.u64()?;
        r.finish()?;
        self.slots = slots;
        self.saturations = saturations;
        Ok(())
    }

    fn fingerprint(&self) -> Vec<u8> {
        let mut w = Writer::new();
        for (idx, v) in self.values() {
            w.u32(idx).i64(v);
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
