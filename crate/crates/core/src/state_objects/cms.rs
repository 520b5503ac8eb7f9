use std::any::Any;

use crate::codec::{Reader, Writer};
use crate::error::{DecodeError, StateError};

use super::cbf::{coalesce_counts, count_many_op, counted_operands, read_counters, write_counters, OP_COUNT};
use super::{DoubleHasher, InstanceId, ObjectKind, Operation, StateObject};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmsConfig {
    /// Number of arrays (k), one hash function each.
    pub arrays: u32,
    /// Counters per array (n).
    pub counters_per_array: usize,
    pub seed: u64,
}

/// Count-min sketch. Same operation contract as the counting bloom filter:
/// array `i` is indexed by `h_i(x)`, and a query returns the minimum over the
/// k arrays.
#[derive(Debug, Clone)]
pub struct CountMinSketch {
    config: CmsConfig,
    hasher: DoubleHasher,
    /// Row-major: array i occupies `[i*n, (i+1)*n)`.
    counters: Vec<u32>,
    saturations: u64,
}

impl CountMinSketch {
    pub fn new(config: CmsConfig) -> Self {
        assert!(config.arrays >= 1 && config.counters_per_array >= 1, "count-min sketch needs k >= 1 and n >= 1");
        Self {
            config,
            hasher: DoubleHasher::new(config.seed),
            counters: vec![0; config.arrays as usize * config.counters_per_array],
            saturations: 0,
        }
    }

    pub fn config(&self) -> CmsConfig {
        self.config
    }

    pub fn count_op(&self, x: &[u8]) -> Result<Operation, StateError> {
        Operation::new(OP_COUNT, vec![x.to_vec()])
    }

    /// Counts `x` `times` times in one operation.
    pub fn count_many_op(&self, x: &[u8], times: u32) -> Result<Operation, StateError> {
        count_many_op(x, times)
    }

    fn slots(&self, x: &[u8]) -> impl Iterator<Item = usize> {
        let n = self.config.counters_per_array;
        self.hasher.indices(x, self.config.arrays, n).enumerate().map(move |(row, col)| row * n + col)
    }

    pub fn value(&self, x: &[u8]) -> u64 {
        self.slots(x).map(|i| self.counters[i] as u64).min().unwrap_or(0)
    }

    pub fn array(&self, i: u32) -> &[u32] {
        let n = self.config.counters_per_array;
        &self.counters[i as usize * n..(i as usize + 1) * n]
    }

    pub fn saturations(&self) -> u64 {
        self.saturations
    }

    fn add(&mut self, x: &[u8], n: u32) {
        let slots: Vec<usize> = self.slots(x).collect();
        for i in slots {
            let (v, overflow) = self.counters[i].overflowing_add(n);
            self.counters[i] = if overflow { u32::MAX } else { v };
            self.saturations += overflow as u64;
        }
    }
}

impl StateObject for CountMinSketch {
    fn kind(&self) -> ObjectKind {
        ObjectKind::CountMinSketch
    }

    fn requires_ordered_delivery(&self) -> bool {
        true
    }

    fn apply(&mut self, _origin: InstanceId, op: &Operation) -> Result<(), StateError> {
        for (x, n) in counted_operands(op, self.kind())? {
            self.add(x, n);
        }
        Ok(())
    }

    fn coalesce(&self, earlier: &Operation, later: &Operation) -> Option<Operation> {
        coalesce_counts(earlier, later, self.kind())
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(12 + 4 * self.counters.len());
        write_counters(&mut w, &self.counters);
        w.u64(self.saturations);
        w.into_bytes()
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), DecodeError> {
        let mut r = Reader::new(bytes);
        let counters = read_counters(&mut r, self.counters.len())?;
        let saturations = r.u64()?;
        r.finish()?;
        self.counters = counters;
        self.saturations = saturations;
        Ok(())
    }

    fn fingerprint(&self) -> Vec<u8> {
        let mut w = Writer::new();
        write_counters(&mut w, &self.counters);
        w.into_bytes()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
