use std::any::Any;

use crate::codec::{Reader, Writer};
use crate::error::{DecodeError, StateError};

use super::{unknown_opcode, DoubleHasher, InstanceId, ObjectKind, Operation, StateObject, MAX_OPERANDS};

pub(super) const OP_COUNT: u8 = 1;
pub(super) const OP_COUNT_MANY: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CbfConfig {
    /// Length of the counter vector (m).
    pub counters: usize,
    /// Number of hash functions (k).
    pub hashes: u32,
    pub seed: u64,
}

impl CbfConfig {
    /// Counter vector that fits a byte budget with 32-bit counters.
    pub fn from_byte_budget(bytes: usize, hashes: u32, seed: u64) -> Self {
        Self { counters: (bytes / 4).max(1), hashes, seed }
    }
}

/// Operand multiplicities carried by a count record: `count(x)` is `x` once,
/// a coalesced record lists `x, n` pairs.
pub(super) fn counted_operands(op: &Operation, kind: ObjectKind) -> Result<Vec<(&[u8], u32)>, StateError> {
    match op.opcode() {
        OP_COUNT => Ok(vec![(op.operand(0)?, 1)]),
        OP_COUNT_MANY => {
            if !op.operands().len().is_multiple_of(2) {
                return Err(StateError::MalformedOp("count-many needs operand/multiplicity pairs".into()));
            }
            op.operands()
                .chunks(2)
                .map(|c| {
                    let n: [u8; 4] = c[1]
                        .as_slice()
                        .try_into()
                        .map_err(|_| StateError::MalformedOp("multiplicity must be 4 bytes".into()))?;
                    Ok((c[0].as_slice(), u32::from_be_bytes(n)))
                })
                .collect()
        }
        other => Err(unknown_opcode(kind, other)),
    }
}

/// Sums multiplicities per operand, keeping first-appearance order.
pub(super) fn count_many_op(x: &[u8], times: u32) -> Result<Operation, StateError> {
    Operation::new(OP_COUNT_MANY, vec![x.to_vec(), times.to_be_bytes().to_vec()])
}

pub(super) fn coalesce_counts(earlier: &Operation, later: &Operation, kind: ObjectKind) -> Option<Operation> {
    let mut merged: Vec<(Vec<u8>, u32)> = Vec::new();
    for (x, n) in counted_operands(earlier, kind).ok()?.into_iter().chain(counted_operands(later, kind).ok()?) {
        match merged.iter_mut().find(|(m, _)| m == x) {
            Some((_, total)) => *total = total.checked_add(n)?,
            None => merged.push((x.to_vec(), n)),
        }
    }
    if merged.len() * 2 > MAX_OPERANDS {
        return None;
    }
    let operands = merged.into_iter().flat_map(|(x, n)| [x, n.to_be_bytes().to_vec()]).collect();
    Operation::new(OP_COUNT_MANY, operands).ok()
}

pub(super) fn write_counters(w: &mut Writer, counters: &[u32]) {
    w.u32(counters.len() as u32);
    for c in counters {
        w.u32(*c);
    }
}

pub(super) fn read_counters(r: &mut Reader<'_>, expected: usize) -> Result<Vec<u32>, DecodeError> {
    let n = r.u32()? as usize;
    if n != expected {
        return Err(DecodeError::invalid("counter vector", format!("length {n}, configured {expected}")));
    }
    (0..n).map(|_| r.u32()).collect()
}

/// Counting bloom filter with 32-bit saturating counters. Records carry the
/// counted operand, not the indices, so every replica re-hashes with its own
/// (identically configured) hash family.
#[derive(Debug, Clone)]
pub struct CountingBloomFilter {
    config: CbfConfig,
    hasher: DoubleHasher,
    counters: Vec<u32>,
    saturations: u64,
}

impl CountingBloomFilter {
    pub fn new(config: CbfConfig) -> Self {
        assert!(config.counters >= 1 && config.hashes >= 1, "counting bloom filter needs m >= 1 and k >= 1");
        Self { config, hasher: DoubleHasher::new(config.seed), counters: vec![0; config.counters], saturations: 0 }
    }

    pub fn config(&self) -> CbfConfig {
        self.config
    }

    pub fn count_op(&self, x: &[u8]) -> Result<Operation, StateError> {
        Operation::new(OP_COUNT, vec![x.to_vec()])
    }

    /// Counts `x` `times` times in one operation.
    pub fn count_many_op(&self, x: &[u8], times: u32) -> Result<Operation, StateError> {
        count_many_op(x, times)
    }

    /// Minimum over the k hashed counters; never below the true count.
    pub fn value(&self, x: &[u8]) -> u64 {
        self.hasher
            .indices(x, self.config.hashes, self.config.counters)
            .map(|i| self.counters[i] as u64)
            .min()
            .unwrap_or(0)
    }

    pub fn counters(&self) -> &[u32] {
        &self.counters
    }

    pub fn saturations(&self) -> u64 {
        self.saturations
    }

    fn add(&mut self, x: &[u8], n: u32) {
        for i in self.hasher.indices(x, self.config.hashes, self.config.counters) {
            let (v, overflow) = self.counters[i].overflowing_add(n);
            self.counters[i] = if overflow { u32::MAX } else { v };
            self.saturations += overflow as u64;
        }
    }
}

impl StateObject for CountingBloomFilter {
    fn kind(&self) -> ObjectKind {
        ObjectKind::CountingBloomFilter
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
        let counters = read_counters(&mut r, self.config.counters)?;
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

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const A: InstanceId = InstanceId(1);

    fn count(f: &mut CountingBloomFilter, x: &[u8]) -> Operation {
        let op = f.count_op(x).unwrap();
        f.apply(A, &op).unwrap();
        op
    }

    #[test]
    fn empty_filter_reads_zero() {
        let f = CountingBloomFilter::new(CbfConfig { counters: 100, hashes: 3, seed: 0 });
        assert_eq!(f.value(b"never"), 0);
    }

    #[test]
    fn single_count_without_collisions_is_exact() {
        let cfg = CbfConfig { counters: 1 << 20, hashes: 4, seed: 11 };
        let mut a = CountingBloomFilter::new(cfg);
        let op = count(&mut a, b"10.0.0.1:22");
        let mut b = CountingBloomFilter::new(cfg);
        b.apply(A, &op).unwrap();
        assert_eq!(a.value(b"10.0.0.1:22"), 1);
        assert_eq!(b.value(b"10.0.0.1:22"), 1);
    }

    #[test]
    fn raw_count_is_not_idempotent() {
        // Duplicate suppression is the replication layer's job for this kind.
        let mut f = CountingBloomFilter::new(CbfConfig { counters: 1 << 16, hashes: 2, seed: 0 });
        let op = count(&mut f, b"x");
        f.apply(A, &op).unwrap();
        assert_eq!(f.value(b"x"), 2);
        assert!(f.requires_ordered_delivery());
    }

    #[test]
    fn byte_budget_sizing() {
        let cfg = CbfConfig::from_byte_budget(6250, 4, 0);
        assert_eq!(cfg.counters, 1562);
        assert!(cfg.counters * 4 <= 6250);
    }

    #[test]
    fn never_underestimates_on_random_workload() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut f = CountingBloomFilter::new(CbfConfig { counters: 1250, hashes: 4, seed: 5 });
        let mut exact: HashMap<u32, u64> = HashMap::new();
        for _ in 0..10_000 {
            let key: u32 = rng.random_range(0..10_000);
            count(&mut f, &key.to_be_bytes());
            *exact.entry(key).or_default() += 1;
        }
        for (k, n) in &exact {
            assert!(f.value(&k.to_be_bytes()) >= *n);
        }
    }

    #[test]
    fn coalesced_multiplicities_equal_repeated_counts() {
        let cfg = CbfConfig { counters: 97, hashes: 3, seed: 1 };
        let mut f = CountingBloomFilter::new(cfg);
        let ops: Vec<_> = [&b"a"[..], b"b", b"a", b"c", b"a"].iter().map(|x| count(&mut f, x)).collect();
        let mut merged = ops[0].clone();
        for op in &ops[1..] {
            merged = f.coalesce(&merged, op).unwrap();
        }
        assert_eq!(merged.operands().len(), 6);
        let mut g = CountingBloomFilter::new(cfg);
        g.apply(A, &merged).unwrap();
        assert_eq!(g.counters(), f.counters());
    }

    #[test]
    fn counters_saturate() {
        let mut f = CountingBloomFilter::new(CbfConfig { counters: 1, hashes: 1, seed: 0 });
        let op = f.coalesce(&f.count_op(b"x").unwrap(), &f.count_op(b"x").unwrap()).unwrap();
        let big = Operation::new(OP_COUNT_MANY, vec![b"x".to_vec(), u32::MAX.to_be_bytes().to_vec()]).unwrap();
        f.apply(A, &big).unwrap();
        f.apply(A, &op).unwrap();
        assert_eq!(f.value(b"x"), u32::MAX as u64);
        assert_eq!(f.saturations(), 1);
    }

    #[test]
    fn restore_checks_configured_length() {
        let f = CountingBloomFilter::new(CbfConfig { counters: 8, hashes: 1, seed: 0 });
        let mut g = CountingBloomFilter::new(CbfConfig { counters: 9, hashes: 1, seed: 0 });
        assert!(g.restore(&f.snapshot()).is_err());
    }
}
