use std::any::Any;
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::sync::Arc;

use crate::codec::{Reader, Writer};
use crate::error::{DecodeError, StateError};

use super::{unknown_opcode, InstanceId, ObjectKind, Operation, StateObject, MAX_OPERANDS};

const OP_ADD: u8 = 1;
const OP_ADD_MANY: u8 = 2;

pub const FLOW_KEY_LEN: usize = 13;

/// IPv4 five-tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
}

impl FlowKey {
    pub fn new(src: Ipv4Addr, src_port: u16, dst: Ipv4Addr, dst_port: u16, protocol: u8) -> Self {
        Self { src, dst, src_port, dst_port, protocol }
    }

    /// Canonical 13-byte form: src, dst, src port, dst port, protocol, all
    /// big-endian. Byte order of this form is the numeric order of the tuple.
    pub fn to_bytes(&self) -> [u8; FLOW_KEY_LEN] {
        let mut out = [0u8; FLOW_KEY_LEN];
        out[0..4].copy_from_slice(&self.src.octets());
        out[4..8].copy_from_slice(&self.dst.octets());
        out[8..10].copy_from_slice(&self.src_port.to_be_bytes());
        out[10..12].copy_from_slice(&self.dst_port.to_be_bytes());
        out[12] = self.protocol;
        out
    }

    pub fn from_bytes(raw: &[u8]) -> Option<Self> {
        if raw.len() != FLOW_KEY_LEN {
            return None;
        }
        Some(Self {
            src: Ipv4Addr::new(raw[0], raw[1], raw[2], raw[3]),
            dst: Ipv4Addr::new(raw[4], raw[5], raw[6], raw[7]),
            src_port: u16::from_be_bytes([raw[8], raw[9]]),
            dst_port: u16::from_be_bytes([raw[10], raw[11]]),
            protocol: raw[12],
        })
    }

    /// Key of the opposite direction of the same connection.
    pub fn reversed(&self) -> Self {
        Self { src: self.dst, dst: self.src, src_port: self.dst_port, dst_port: self.src_port, protocol: self.protocol }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}->{}:{}/{}", self.src, self.src_port, self.dst, self.dst_port, self.protocol)
    }
}

/// Deployment-wide total order on (key, value) pairs that picks the winner
/// of concurrent adds to the same key. Must be identical on every instance.
pub trait FlowOrder: Send + Sync + fmt::Debug {
    /// Stable name, part of the object's configuration digest.
    fn name(&self) -> &str;
    fn compare(&self, a: (&[u8], &[u8]), b: (&[u8], &[u8])) -> Ordering;
}

/// Larger value wins, compared as bytes (big-endian numerically for equal
/// lengths); key bytes break ties.
#[derive(Debug, Clone, Copy, Default)]
pub struct ValueThenKey;

impl FlowOrder for ValueThenKey {
    fn name(&self) -> &str {
        "value-then-key"
    }

    fn compare(&self, a: (&[u8], &[u8]), b: (&[u8], &[u8])) -> Ordering {
        a.1.cmp(b.1).then_with(|| a.0.cmp(b.0))
    }
}

#[derive(Clone)]
pub struct FlowOrdering(Arc<dyn FlowOrder>);

impl FlowOrdering {
    pub fn new(order: impl FlowOrder + 'static) -> Self {
        Self(Arc::new(order))
    }

    pub fn name(&self) -> &str {
        self.0.name()
    }

    pub fn compare(&self, a: (&[u8], &[u8]), b: (&[u8], &[u8])) -> Ordering {
        self.0.compare(a, b)
    }
}

impl Default for FlowOrdering {
    fn default() -> Self {
        Self::new(ValueThenKey)
    }
}

impl fmt::Debug for FlowOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FlowOrdering({})", self.name())
    }
}

/// Convergent map from flow keys to small values. `add` either inserts or
/// overwrites; concurrent adds to one key are resolved by the ordering
/// callback, which makes `add` commutative as well as idempotent.
#[derive(Debug, Clone, Default)]
pub struct FlowTable {
    entries: BTreeMap<Vec<u8>, Vec<u8>>,
    ordering: FlowOrdering,
}

impl FlowTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_ordering(ordering: FlowOrdering) -> Self {
        Self { entries: BTreeMap::new(), ordering }
    }

    pub fn value(&self, key: &FlowKey) -> Option<&[u8]> {
        self.value_raw(&key.to_bytes())
    }

    pub fn value_raw(&self, key: &[u8]) -> Option<&[u8]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u8], &[u8])> + '_ {
        self.entries.iter().map(|(k, v)| (k.as_slice(), v.as_slice()))
    }

    pub fn add_op(&self, key: &FlowKey, value: &[u8]) -> Result<Operation, StateError> {
        self.add_raw_op(&key.to_bytes(), value)
    }

    /// Add keyed by arbitrary bytes (up to 64), for tables whose key is not a
    /// five-tuple.
    pub fn add_raw_op(&self, key: &[u8], value: &[u8]) -> Result<Operation, StateError> {
        Operation::new(OP_ADD, vec![key.to_vec(), value.to_vec()])
    }

    fn merge(&mut self, key: &[u8], value: &[u8]) {
        match self.entries.get_mut(key) {
            None => {
                self.entries.insert(key.to_vec(), value.to_vec());
            }
            Some(existing) => {
                if self.ordering.compare((key, value), (key, existing)) == Ordering::Greater {
                    *existing = value.to_vec();
                }
            }
        }
    }
}

fn pairs(op: &Operation) -> Result<impl Iterator<Item = (&[u8], &[u8])>, StateError> {
    if !matches!(op.opcode(), OP_ADD | OP_ADD_MANY) {
        return Err(unknown_opcode(ObjectKind::FlowTable, op.opcode()));
    }
    if !op.operands().len().is_multiple_of(2) {
        return Err(StateError::MalformedOp("flow-table add needs key/value pairs".into()));
    }
    Ok(op.operands().chunks(2).map(|c| (c[0].as_slice(), c[1].as_slice())))
}

impl StateObject for FlowTable {
    fn kind(&self) -> ObjectKind {
        ObjectKind::FlowTable
    }

    fn apply(&mut self, _origin: InstanceId, op: &Operation) -> Result<(), StateError> {
        for (k, v) in pairs(op)? {
            self.merge(k, v);
        }
        Ok(())
    }

    fn coalesce(&self, earlier: &Operation, later: &Operation) -> Option<Operation> {
        let mut merged: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
        for (k, v) in pairs(earlier).ok()?.chain(pairs(later).ok()?) {
            match merged.iter_mut().find(|(mk, _)| mk == k) {
                Some((mk, mv)) => {
                    if self.ordering.compare((k, v), (mk, mv)) == Ordering::Greater {
                        *mv = v.to_vec();
                    }
                }
                None => merged.push((k.to_vec(), v.to_vec())),
            }
        }
        if merged.len() * 2 > MAX_OPERANDS {
            return None;
        }
        Operation::new(OP_ADD_MANY, merged.into_iter().flat_map(|(k, v)| [k, v]).collect()).ok()
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.entries.len() as u32);
        for (k, v) in &self.entries {
            w.bytes(k).bytes(v);
        }
        w.into_bytes()
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), DecodeError> {
        let mut r = Reader::new(bytes);
        let mut entries = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.bytes()?.to_vec();
            entries.insert(k, r.bytes()?.to_vec());
        }
        r.finish()?;
        self.entries = entries;
        Ok(())
    }

    fn fingerprint(&self) -> Vec<u8> {
        self.snapshot()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(n: u8) -> FlowKey {
        FlowKey::new(Ipv4Addr::new(10, 0, 0, n), 1000 + n as u16, Ipv4Addr::new(192, 168, 0, 1), 80, 6)
    }

    #[test]
    fn canonical_key_form() {
        let k = FlowKey::new(Ipv4Addr::new(1, 2, 3, 4), 0x0102, Ipv4Addr::new(5, 6, 7, 8), 0x0304, 17);
        assert_eq!(k.to_bytes(), [1, 2, 3, 4, 5, 6, 7, 8, 1, 2, 3, 4, 17]);
        assert_eq!(FlowKey::from_bytes(&k.to_bytes()), Some(k));
        assert_eq!(k.reversed().reversed(), k);
        assert_eq!(k.reversed().src_port, 0x0304);
    }

    #[test]
    fn concurrent_adds_pick_greater_value_in_any_order() {
        let t = FlowTable::new();
        let a = t.add_op(&key(1), &[0x02]).unwrap();
        let b = t.add_op(&key(1), &[0x07]).unwrap();
        for (first, second) in [(&a, &b), (&b, &a)] {
            let mut replica = FlowTable::new();
            replica.apply(InstanceId(1), first).unwrap();
            replica.apply(InstanceId(2), second).unwrap();
            assert_eq!(replica.value(&key(1)), Some(&[0x07][..]));
        }
    }

    #[test]
    fn duplicate_add_is_idempotent() {
        let mut t = FlowTable::new();
        let op = t.add_op(&key(3), b"v").unwrap();
        t.apply(InstanceId(1), &op).unwrap();
        let once = t.snapshot();
        t.apply(InstanceId(1), &op).unwrap();
        assert_eq!(t.snapshot(), once);
    }

    #[test]
    fn value_of_missing_key_is_absent() {
        assert_eq!(FlowTable::new().value(&key(9)), None);
    }

    #[test]
    fn default_order_is_total_on_samples() {
        let o = ValueThenKey;
        let samples: Vec<(Vec<u8>, Vec<u8>)> = (0u8..6)
            .flat_map(|k| (0u8..4).map(move |v| (vec![k % 3], vec![v, k])))
            .collect();
        for a in &samples {
            for b in &samples {
                let ab = o.compare((&a.0, &a.1), (&b.0, &b.1));
                let ba = o.compare((&b.0, &b.1), (&a.0, &a.1));
                assert_eq!(ab, ba.reverse(), "antisymmetry");
                if ab == Ordering::Equal {
                    assert_eq!(a, b);
                }
                for c in &samples {
                    let bc = o.compare((&b.0, &b.1), (&c.0, &c.1));
                    if ab != Ordering::Greater && bc != Ordering::Greater {
                        assert_ne!(o.compare((&a.0, &a.1), (&c.0, &c.1)), Ordering::Greater, "transitivity");
                    }
                }
            }
        }
    }

    proptest! {
        // Brute-force fold: the converged value per key is the max over all adds.
        #[test]
        fn random_concurrent_adds_converge_to_per_key_max(
            adds in prop::collection::vec((0u8..3, 0u8..8, prop::collection::vec(any::<u8>(), 1..3)), 100),
            seed in any::<u64>(),
        ) {
            let t = FlowTable::new();
            let ops: Vec<_> = adds.iter().map(|(o, k, v)| (InstanceId(*o as u16 + 1), t.add_op(&key(*k), v).unwrap())).collect();
            let mut expected: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
            for (_, k, v) in &adds {
                let e = expected.entry(key(*k).to_bytes().to_vec()).or_insert_with(|| v.clone());
                if v > e { *e = v.clone(); }
            }
            for r in 0..3u64 {
                let mut order: Vec<usize> = (0..ops.len()).collect();
                let mut s = seed ^ r;
                for i in (1..order.len()).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                    order.swap(i, (s >> 33) as usize % (i + 1));
                }
                let mut replica = FlowTable::new();
                for i in order { replica.apply(ops[i].0, &ops[i].1).unwrap(); }
                let got: BTreeMap<Vec<u8>, Vec<u8>> = replica.iter().map(|(k, v)| (k.to_vec(), v.to_vec())).collect();
                prop_assert_eq!(&got, &expected);
            }
        }

        #[test]
        fn coalescing_is_transparent(adds in prop::collection::vec((0u8..5, prop::collection::vec(any::<u8>(), 1..4)), 1..40)) {
            let t = FlowTable::new();
            let ops: Vec<_> = adds.iter().map(|(k, v)| t.add_op(&key(*k), v).unwrap()).collect();
            let mut merged = ops[0].clone();
            for op in &ops[1..] { merged = t.coalesce(&merged, op).unwrap(); }
            let mut a = FlowTable::new();
            for op in &ops { a.apply(InstanceId(1), op).unwrap(); }
            let mut b = FlowTable::new();
            b.apply(InstanceId(1), &merged).unwrap();
            prop_assert_eq!(a.fingerprint(), b.fingerprint());
        }
    }
}
