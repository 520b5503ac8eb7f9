use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};

use crate::codec::{Reader, Writer};
use crate::error::{DecodeError, StateError};

use super::{unknown_opcode, InstanceId, ObjectKind, Operation, StateObject, MAX_OPERAND_LEN, MAX_OPERANDS};

const OP_ADD: u8 = 1;
const OP_REMOVE: u8 = 2;
const OP_BATCH: u8 = 3;

const ENTRY_ADD: u8 = 1;
const ENTRY_REMOVE: u8 = 2;
/// kind u8 + tag origin u16 + tag counter u64.
const ENTRY_HEADER: usize = 11;
/// Largest element an entry operand can carry.
pub const MAX_ELEMENT_LEN: usize = MAX_OPERAND_LEN - ENTRY_HEADER;

/// Unique identity of one add: the adding instance and its local counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag {
    pub origin: InstanceId,
    pub counter: u64,
}

/// Observed-remove set. Each add carries a fresh tag; a remove deletes the
/// tags its issuer observed and leaves a tombstone so that a remove delivered
/// before its add still wins.
#[derive(Debug, Clone, Default)]
pub struct OrSet {
    live: BTreeMap<Vec<u8>, BTreeSet<Tag>>,
    tombstones: BTreeSet<Tag>,
    clock: BTreeMap<InstanceId, u64>,
}

enum Entry<'a> {
    Add(Tag, &'a [u8]),
    Remove(Tag, &'a [u8]),
}

fn encode_entry(kind: u8, tag: Tag, element: &[u8]) -> Vec<u8> {
    let mut raw = Vec::with_capacity(ENTRY_HEADER + element.len());
    raw.push(kind);
    raw.extend_from_slice(&tag.origin.0.to_be_bytes());
    raw.extend_from_slice(&tag.counter.to_be_bytes());
    raw.extend_from_slice(element);
    raw
}

fn decode_entries(op: &Operation) -> Result<Vec<Entry<'_>>, StateError> {
    if !matches!(op.opcode(), OP_ADD | OP_REMOVE | OP_BATCH) {
        return Err(unknown_opcode(ObjectKind::OrSet, op.opcode()));
    }
    op.operands()
        .iter()
        .map(|raw| {
            if raw.len() < ENTRY_HEADER {
                return Err(StateError::MalformedOp(format!("or-set entry of {} bytes", raw.len())));
            }
            let tag = Tag {
                origin: InstanceId(u16::from_be_bytes([raw[1], raw[2]])),
                counter: u64::from_be_bytes(raw[3..11].try_into().unwrap()),
            };
            let element = &raw[ENTRY_HEADER..];
            match raw[0] {
                ENTRY_ADD => Ok(Entry::Add(tag, element)),
                ENTRY_REMOVE => Ok(Entry::Remove(tag, element)),
                other => Err(StateError::MalformedOp(format!("or-set entry kind {other}"))),
            }
        })
        .collect()
}

impl OrSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Set whose initial elements are present identically on every replica
    /// without replication, tagged by the reserved genesis instance.
    pub fn with_genesis<I: IntoIterator<Item = Vec<u8>>>(elements: I) -> Self {
        let mut set = Self::new();
        for (i, element) in elements.into_iter().enumerate() {
            let tag = Tag { origin: InstanceId::GENESIS, counter: i as u64 + 1 };
            set.live.entry(element).or_default().insert(tag);
        }
        set
    }

    pub fn contains(&self, element: &[u8]) -> bool {
        self.live.contains_key(element)
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn elements(&self) -> impl Iterator<Item = &[u8]> + '_ {
        self.live.keys().map(Vec::as_slice)
    }

    /// Smallest element in byte order.
    pub fn first(&self) -> Option<&[u8]> {
        self.live.keys().next().map(Vec::as_slice)
    }

    /// First element in byte order satisfying `pred`.
    pub fn first_matching(&self, mut pred: impl FnMut(&[u8]) -> bool) -> Option<&[u8]> {
        self.live.keys().map(Vec::as_slice).find(|e| pred(e))
    }

    pub fn add_op(&self, origin: InstanceId, element: &[u8]) -> Result<Operation, StateError> {
        if element.len() > MAX_ELEMENT_LEN {
            return Err(StateError::OperandTooLong(element.len() + ENTRY_HEADER));
        }
        let counter = self.clock.get(&origin).copied().unwrap_or(0) + 1;
        Operation::new(OP_ADD, vec![encode_entry(ENTRY_ADD, Tag { origin, counter }, element)])
    }

    /// Removes every tag of `element` observed locally. `None` when absent.
    pub fn remove_op(&self, element: &[u8]) -> Result<Option<Operation>, StateError> {
        let Some(tags) = self.live.get(element) else {
            return Ok(None);
        };
        let operands = tags.iter().map(|t| encode_entry(ENTRY_REMOVE, *t, element)).collect();
        Operation::new(OP_REMOVE, operands).map(Some)
    }

    fn observe_tag(&mut self, tag: Tag) {
        if tag.origin != InstanceId::GENESIS {
            let c = self.clock.entry(tag.origin).or_insert(0);
            *c = (*c).max(tag.counter);
        }
    }
}

impl StateObject for OrSet {
    fn kind(&self) -> ObjectKind {
        ObjectKind::OrSet
    }

    fn apply(&mut self, _origin: InstanceId, op: &Operation) -> Result<(), StateError> {
        for entry in decode_entries(op)? {
            match entry {
                Entry::Add(tag, element) => {
                    self.observe_tag(tag);
                    if !self.tombstones.contains(&tag) {
                        self.live.entry(element.to_vec()).or_default().insert(tag);
                    }
                }
                Entry::Remove(tag, element) => {
                    self.observe_tag(tag);
                    self.tombstones.insert(tag);
                    if let Some(tags) = self.live.get_mut(element) {
                        tags.remove(&tag);
                        if tags.is_empty() {
                            self.live.remove(element);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn coalesce(&self, earlier: &Operation, later: &Operation) -> Option<Operation> {
        let count = earlier.operands().len() + later.operands().len();
        if count > MAX_OPERANDS {
            return None;
        }
        let operands = earlier.operands().iter().chain(later.operands()).cloned().collect();
        Operation::new(OP_BATCH, operands).ok()
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.live.len() as u32);
        for (element, tags) in &self.live {
            w.bytes(element).u32(tags.len() as u32);
            for t in tags {
                w.u16(t.origin.0).u64(t.counter);
            }
        }
        w.u32(self.tombstones.len() as u32);
        for t in &self.tombstones {
            w.u16(t.origin.0).u64(t.counter);
        }
        w.u32(self.clock.len() as u32);
        for (origin, c) in &self.clock {
            w.u16(origin.0).u64(*c);
        }
        w.into_bytes()
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), DecodeError> {
        let mut r = Reader::new(bytes);
        let read_tag = |r: &mut Reader<'_>| -> Result<Tag, DecodeError> {
            Ok(Tag { origin: InstanceId(r.u16()?), counter: r.u64()? })
        };
        let mut live = BTreeMap::new();
        for _ in 0..r.u32()? {
            let element = r.bytes()?.to_vec();
            let mut tags = BTreeSet::new();
            for _ in 0..r.u32()? {
                tags.insert(read_tag(&mut r)?);
            }
            live.insert(element, tags);
        }
        let mut tombstones = BTreeSet::new();
        for _ in 0..r.u32()? {
            tombstones.insert(read_tag(&mut r)?);
        }
        let mut clock = BTreeMap::new();
        for _ in 0..r.u32()? {
            clock.insert(InstanceId(r.u16()?), r.u64()?);
        }
        r.finish()?;
        *self = OrSet { live, tombstones, clock };
        Ok(())
    }

    fn fingerprint(&self) -> Vec<u8> {
        let mut w = Writer::new();
        for element in self.live.keys() {
            w.bytes(element);
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: InstanceId = InstanceId(1);
    const B: InstanceId = InstanceId(2);

    fn local_add(s: &mut OrSet, origin: InstanceId, e: &[u8]) -> Operation {
        let op = s.add_op(origin, e).unwrap();
        s.apply(origin, &op).unwrap();
        op
    }

    #[test]
    fn remove_before_add_still_wins() {
        let mut a = OrSet::new();
        let add = local_add(&mut a, A, b"x");
        let remove = a.remove_op(b"x").unwrap().unwrap();
        a.apply(A, &remove).unwrap();

        let mut b = OrSet::new();
        b.apply(A, &remove).unwrap();
        b.apply(A, &add).unwrap();
        assert!(!a.contains(b"x"));
        assert!(!b.contains(b"x"));
    }

    #[test]
    fn concurrent_add_survives_remove() {
        let mut a = OrSet::new();
        let mut b = OrSet::new();
        let add_a = local_add(&mut a, A, b"x");
        b.apply(A, &add_a).unwrap();
        // B removes what it observed while A re-adds concurrently.
        let remove_b = b.remove_op(b"x").unwrap().unwrap();
        b.apply(B, &remove_b).unwrap();
        let readd = local_add(&mut a, A, b"x");
        a.apply(B, &remove_b).unwrap();
        b.apply(A, &readd).unwrap();
        assert!(a.contains(b"x"));
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn tags_continue_after_restore() {
        let mut a = OrSet::new();
        local_add(&mut a, A, b"x");
        local_add(&mut a, A, b"y");
        let mut joined = OrSet::new();
        joined.restore(&a.snapshot()).unwrap();
        let op = joined.add_op(A, b"z").unwrap();
        let entries = decode_entries(&op).unwrap();
        let Entry::Add(tag, _) = entries[0] else { panic!("expected add") };
        assert_eq!(tag.counter, 3);
    }

    #[test]
    fn genesis_elements_are_removable() {
        let ports: Vec<Vec<u8>> = (1000u16..1004).map(|p| p.to_be_bytes().to_vec()).collect();
        let mut pool = OrSet::with_genesis(ports.clone());
        assert_eq!(pool.first(), Some(&1000u16.to_be_bytes()[..]));
        let op = pool.remove_op(&ports[0]).unwrap().unwrap();
        pool.apply(A, &op).unwrap();
        assert_eq!(pool.first(), Some(&1001u16.to_be_bytes()[..]));
        assert_eq!(pool.remove_op(&ports[0]).unwrap(), None);
    }

    #[test]
    fn oversized_element_is_rejected() {
        assert!(OrSet::new().add_op(A, &[0u8; MAX_ELEMENT_LEN + 1]).is_err());
    }

    proptest! {
        // Replicas apply the same ops in different orders with duplicates.
        #[test]
        fn any_order_converges(script in prop::collection::vec((0u16..3, any::<bool>(), 0u8..6), 1..60), seed in any::<u64>()) {
            let mut origins: BTreeMap<u16, OrSet> = BTreeMap::new();
            let mut ops = Vec::new();
            for (o, add, e) in script {
                let s = origins.entry(o).or_default();
                let origin = InstanceId(o + 1);
                let op = if add { Some(s.add_op(origin, &[e]).unwrap()) } else { s.remove_op(&[e]).unwrap() };
                if let Some(op) = op {
                    s.apply(origin, &op).unwrap();
                    ops.push((origin, op));
                }
            }
            let mut forward = OrSet::new();
            for (o, op) in &ops { forward.apply(*o, op).unwrap(); }
            let mut shuffled = ops.clone();
            shuffled.extend(ops.iter().cloned());
            let mut state = seed;
            for i in (1..shuffled.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (state >> 33) as usize % (i + 1));
            }
            let mut other = OrSet::new();
            for (o, op) in &shuffled { other.apply(*o, op).unwrap(); }
            prop_assert_eq!(forward.fingerprint(), other.fingerprint());
        }
    }
}
