//! Convergent state objects.
//!
//! Every object is an operation-based CRDT: local mutations are expressed as
//! an [`Operation`] that is applied locally and then shipped to every other
//! replica through the log store. Applying the same set of operations in any
//! order yields the same observable state. Kinds whose raw operations are not
//! idempotent (the counting bloom filter and count-min sketch) declare
//! [`StateObject::requires_ordered_delivery`], and the replication layer then
//! applies each origin's records exactly once and in sequence order.
//!
//! Building an operation never mutates replicated state: typed helpers such as
//! [`PnCounter::update_op`] read the current state and return the operation,
//! and the caller applies it through [`StateObject::apply`] like any remote
//! record. This keeps the local and remote paths identical.

mod cbf;
mod cms;
mod counter;
mod derivative;
mod flow_table;
mod hashing;
mod orset;
mod register;

use std::any::Any;
use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};

use crate::codec::{Reader, Writer};
use crate::error::{DecodeError, StateError};
pub use crate::ids::{InstanceId, ObjectId};

pub use cbf::{CbfConfig, CountingBloomFilter};
pub use cms::{CmsConfig, CountMinSketch};
pub use counter::{CounterVector, PnCounter};
pub use derivative::Derivative;
pub use flow_table::{FlowKey, FlowOrder, FlowOrdering, FlowTable, ValueThenKey, FLOW_KEY_LEN};
pub use hashing::DoubleHasher;
pub use orset::{OrSet, Tag};
pub use register::LwwRegister;

/// Longest operand an operation may carry.
pub const MAX_OPERAND_LEN: usize = 64;
/// Operand count is encoded in one byte.
pub const MAX_OPERANDS: usize = 255;

/// One self-contained mutation of a state object.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Operation {
    opcode: u8,
    operands: Vec<Vec<u8>>,
}

impl Operation {
    pub fn new(opcode: u8, operands: Vec<Vec<u8>>) -> Result<Self, StateError> {
        if operands.len() > MAX_OPERANDS {
            return Err(StateError::TooManyOperands(operands.len()));
        }
        if let Some(long) = operands.iter().find(|o| o.len() > MAX_OPERAND_LEN) {
            return Err(StateError::OperandTooLong(long.len()));
        }
        Ok(Self { opcode, operands })
    }

    pub fn opcode(&self) -> u8 {
        self.opcode
    }

    pub fn operands(&self) -> &[Vec<u8>] {
        &self.operands
    }

    pub fn operand(&self, i: usize) -> Result<&[u8], StateError> {
        self.operands
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| StateError::MalformedOp(format!("opcode {} missing operand {i}", self.opcode)))
    }

    /// opcode u8, operand count u8, then u16-length-prefixed operands.
    pub fn encode(&self, w: &mut Writer) {
        w.u8(self.opcode).u8(self.operands.len() as u8);
        for operand in &self.operands {
            w.u16(operand.len() as u16).raw(operand);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.encoded_len());
        self.encode(&mut w);
        w.into_bytes()
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let opcode = r.u8()?;
        let count = r.u8()? as usize;
        let mut operands = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            if len > MAX_OPERAND_LEN {
                return Err(DecodeError::invalid("operand", format!("length {len} exceeds {MAX_OPERAND_LEN}")));
            }
            operands.push(r.take(len)?.to_vec());
        }
        Ok(Self { opcode, operands })
    }

    pub fn encoded_len(&self) -> usize {
        2 + self.operands.iter().map(|o| 2 + o.len()).sum::<usize>()
    }
}

impl fmt::Debug for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}", self.opcode)?;
        for o in &self.operands {
            write!(f, ",{}", hex::encode(o))?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ObjectKind {
    PnCounter,
    CounterVector,
    LwwRegister,
    OrSet,
    FlowTable,
    CountingBloomFilter,
    CountMinSketch,
    Derivative,
}

impl ObjectKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::PnCounter => "pn-counter",
            ObjectKind::CounterVector => "counter-vector",
            ObjectKind::LwwRegister => "lww-register",
            ObjectKind::OrSet => "or-set",
            ObjectKind::FlowTable => "flow-table",
            ObjectKind::CountingBloomFilter => "counting-bloom-filter",
            ObjectKind::CountMinSketch => "count-min-sketch",
            ObjectKind::Derivative => "derivative",
        }
    }
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Contract shared by every replicated object kind.
pub trait StateObject: Send + fmt::Debug {
    fn kind(&self) -> ObjectKind;

    /// When true the replication layer applies each origin's records in
    /// sequence order and drops duplicates, supplying idempotence.
    fn requires_ordered_delivery(&self) -> bool {
        false
    }

    /// Applies an operation that originated at `origin`.
    fn apply(&mut self, origin: InstanceId, op: &Operation) -> Result<(), StateError>;

    /// Merges two consecutive operations from the same origin into one whose
    /// effect equals applying `earlier` then `later`. `None` when the pair
    /// cannot be merged.
    fn coalesce(&self, _earlier: &Operation, _later: &Operation) -> Option<Operation> {
        None
    }

    /// Full state including replication metadata (tags, per-origin totals).
    fn snapshot(&self) -> Vec<u8>;

    /// Replaces the state with a snapshot taken from an identically
    /// configured object.
    fn restore(&mut self, bytes: &[u8]) -> Result<(), DecodeError>;

    /// Canonical encoding of everything a query can observe. Two replicas are
    /// query-equivalent exactly when their fingerprints are equal.
    fn fingerprint(&self) -> Vec<u8>;

    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// Configuration from which identical replicas are built on every instance.
#[derive(Debug, Clone)]
pub enum ObjectSpec {
    PnCounter,
    CounterVector,
    LwwRegister,
    OrSet { genesis: Vec<Vec<u8>> },
    FlowTable { ordering: FlowOrdering },
    CountingBloomFilter(CbfConfig),
    CountMinSketch(CmsConfig),
    Derivative(Vec<(ObjectId, ObjectSpec)>),
}

impl ObjectSpec {
    pub fn flow_table() -> Self {
        ObjectSpec::FlowTable { ordering: FlowOrdering::default() }
    }

    pub fn build(&self) -> Box<dyn StateObject> {
        match self {
            ObjectSpec::PnCounter => Box::new(PnCounter::new()),
            ObjectSpec::CounterVector => Box::new(CounterVector::new()),
            ObjectSpec::LwwRegister => Box::new(LwwRegister::new()),
            ObjectSpec::OrSet { genesis } => Box::new(OrSet::with_genesis(genesis.iter().cloned())),
            ObjectSpec::FlowTable { ordering } => Box::new(FlowTable::with_ordering(ordering.clone())),
            ObjectSpec::CountingBloomFilter(cfg) => Box::new(CountingBloomFilter::new(*cfg)),
            ObjectSpec::CountMinSketch(cfg) => Box::new(CountMinSketch::new(*cfg)),
            ObjectSpec::Derivative(members) => Box::new(Derivative::new(
                members.iter().map(|(id, spec)| (*id, spec.build())).collect(),
            )),
        }
    }

    fn write_canonical(&self, w: &mut Writer) {
        match self {
            ObjectSpec::PnCounter => {
                w.u8(1);
            }
            ObjectSpec::CounterVector => {
                w.u8(2);
            }
            ObjectSpec::LwwRegister => {
                w.u8(3);
            }
            ObjectSpec::OrSet { genesis } => {
                w.u8(4).u32(genesis.len() as u32);
                for g in genesis {
                    w.bytes(g);
                }
            }
            ObjectSpec::FlowTable { ordering } => {
                w.u8(5).bytes(ordering.name().as_bytes());
            }
            ObjectSpec::CountingBloomFilter(c) => {
                w.u8(6).u64(c.counters as u64).u32(c.hashes).u64(c.seed);
            }
            ObjectSpec::CountMinSketch(c) => {
                w.u8(7).u32(c.arrays).u64(c.counters_per_array as u64).u64(c.seed);
            }
            ObjectSpec::Derivative(members) => {
                w.u8(8).u32(members.len() as u32);
                for (id, spec) in members {
                    w.u32(id.0);
                    spec.write_canonical(w);
                }
            }
        }
    }

    /// Digest of the configuration, compared when an instance joins so that
    /// mismatched hash seeds or orderings fail loudly.
    pub fn config_digest(&self) -> u64 {
        let mut w = Writer::new();
        self.write_canonical(&mut w);
        let hash = Sha256::digest(w.into_bytes());
        u64::from_be_bytes(hash[..8].try_into().expect("sha256 output is 32 bytes"))
    }
}

struct Registered {
    spec: ObjectSpec,
    digest: u64,
    object: Box<dyn StateObject>,
}

/// The objects one instance has registered, keyed by id.
#[derive(Default)]
pub struct Registry {
    objects: BTreeMap<ObjectId, Registered>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.objects.iter().map(|(id, r)| (id, r.object.kind()))).finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: ObjectId, spec: ObjectSpec) -> Result<(), StateError> {
        if self.objects.contains_key(&id) {
            return Err(StateError::DuplicateObject(id));
        }
        let digest = spec.config_digest();
        let object = spec.build();
        self.objects.insert(id, Registered { spec, digest, object });
        Ok(())
    }

    pub fn contains(&self, id: ObjectId) -> bool {
        self.objects.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.objects.keys().copied()
    }

    pub fn specs(&self) -> impl Iterator<Item = (ObjectId, &ObjectSpec)> + '_ {
        self.objects.iter().map(|(id, r)| (*id, &r.spec))
    }

    pub fn digest(&self, id: ObjectId) -> Option<u64> {
        self.objects.get(&id).map(|r| r.digest)
    }

    pub fn object(&self, id: ObjectId) -> Result<&dyn StateObject, StateError> {
        self.objects.get(&id).map(|r| r.object.as_ref()).ok_or(StateError::UnknownObject(id))
    }

    pub fn object_mut(&mut self, id: ObjectId) -> Result<&mut (dyn StateObject + 'static), StateError> {
        self.objects.get_mut(&id).map(|r| r.object.as_mut()).ok_or(StateError::UnknownObject(id))
    }

    pub fn get<T: StateObject + 'static>(&self, id: ObjectId) -> Result<&T, StateError> {
        downcast(id, self.object(id)?)
    }

    pub fn get_mut<T: StateObject + 'static>(&mut self, id: ObjectId) -> Result<&mut T, StateError> {
        let obj = self.object_mut(id)?;
        let actual = obj.kind().name();
        obj.as_any_mut().downcast_mut::<T>().ok_or(StateError::WrongKind {
            object: id,
            expected: std::any::type_name::<T>(),
            actual,
        })
    }

    pub fn fingerprints(&self) -> BTreeMap<ObjectId, Vec<u8>> {
        self.objects.iter().map(|(id, r)| (*id, r.object.fingerprint())).collect()
    }
}

pub(crate) fn downcast<T: StateObject + 'static>(id: ObjectId, obj: &dyn StateObject) -> Result<&T, StateError> {
    obj.as_any().downcast_ref::<T>().ok_or_else(|| StateError::WrongKind {
        object: id,
        expected: std::any::type_name::<T>(),
        actual: obj.kind().name(),
    })
}

pub(crate) fn read_u64_operand(op: &Operation, i: usize) -> Result<u64, StateError> {
    let raw = op.operand(i)?;
    let arr: [u8; 8] = raw
        .try_into()
        .map_err(|_| StateError::MalformedOp(format!("operand {i} should be 8 bytes, got {}", raw.len())))?;
    Ok(u64::from_be_bytes(arr))
}

pub(crate) fn read_u32_operand(op: &Operation, i: usize) -> Result<u32, StateError> {
    let raw = op.operand(i)?;
    let arr: [u8; 4] = raw
        .try_into()
        .map_err(|_| StateError::MalformedOp(format!("operand {i} should be 4 bytes, got {}", raw.len())))?;
    Ok(u32::from_be_bytes(arr))
}

pub(crate) fn unknown_opcode(kind: ObjectKind, opcode: u8) -> StateError {
    StateError::MalformedOp(format!("{kind} has no opcode {opcode}"))
}
