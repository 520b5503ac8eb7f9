//! Receive-side bookkeeping per (object, origin): the contiguous ack that is
//! advertised in ack vectors, out-of-order ranges seen beyond it, and the
//! reorder buffer for objects that need in-order application.

use std::collections::BTreeMap;

use crate::log_store::LogRecord;

/// What to do with an arriving record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    /// Already received; nothing to apply.
    Duplicate,
    /// Records to apply now, in this order.
    Apply(Vec<LogRecord>),
    /// Held until the gap before it fills.
    Buffered,
    /// The record straddles the contiguous ack or a buffered record. Senders
    /// never re-cut a transmitted record, so this marks a protocol error.
    Overlap,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OriginState {
    contiguous: u64,
    /// Disjoint, non-adjacent received ranges above `contiguous`, lo -> hi.
    ranges: BTreeMap<u64, u64>,
    /// Ordered objects only: received but unapplied records keyed by first seq.
    pending: BTreeMap<u64, LogRecord>,
}

impl OriginState {
    /// State for an origin whose records up to `ack` are already reflected
    /// (for example through a restored snapshot).
    pub fn starting_at(ack: u64) -> Self {
        Self { contiguous: ack, ..Self::default() }
    }

    /// Highest seq s such that every record with seq <= s has been received.
    pub fn ack(&self) -> u64 {
        self.contiguous
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn has_gaps(&self) -> bool {
        !self.ranges.is_empty() || !self.pending.is_empty()
    }

    fn covered(&self, lo: u64, hi: u64) -> bool {
        if hi <= self.contiguous {
            return true;
        }
        self.ranges.range(..=lo).next_back().is_some_and(|(_, &h)| h >= hi)
    }

    fn insert_range(&mut self, lo: u64, hi: u64) {
        let (mut lo, mut hi) = (lo.max(self.contiguous + 1), hi);
        if lo > hi {
            return;
        }
        // Absorb every range that touches or overlaps [lo, hi].
        let touching: Vec<(u64, u64)> = self
            .ranges
            .range(..=hi.saturating_add(1))
            .rev()
            .take_while(|(_, &h)| h + 1 >= lo)
            .map(|(&l, &h)| (l, h))
            .collect();
        for (l, h) in touching {
            self.ranges.remove(&l);
            lo = lo.min(l);
            hi = hi.max(h);
        }
        if lo == self.contiguous + 1 {
            self.contiguous = hi;
        } else {
            self.ranges.insert(lo, hi);
        }
    }

    /// Admits a record for an object whose operations are idempotent: any
    /// record not yet fully received is applied immediately.
    pub fn admit_unordered(&mut self, record: LogRecord) -> Admission {
        let (lo, hi) = (record.first_seq(), record.seq);
        if self.covered(lo, hi) {
            return Admission::Duplicate;
        }
        self.insert_range(lo, hi);
        Admission::Apply(vec![record])
    }

    /// Admits a record for an object that needs exactly-once, in-order
    /// application.
    pub fn admit_ordered(&mut self, record: LogRecord) -> Admission {
        let (lo, hi) = (record.first_seq(), record.seq);
        if hi <= self.contiguous {
            return Admission::Duplicate;
        }
        if lo <= self.contiguous {
            return Admission::Overlap;
        }
        if lo > self.contiguous + 1 {
            if let Some((&plo, prev)) = self.pending.range(..=hi).next_back() {
                if plo == lo && prev.seq == hi {
                    return Admission::Duplicate;
                }
                if prev.seq >= lo {
                    return Admission::Overlap;
                }
            }
            self.pending.insert(lo, record);
            return Admission::Buffered;
        }
        let mut ready = vec![record];
        self.contiguous = hi;
        while let Some(next) = self.pending.remove(&(self.contiguous + 1)) {
            self.contiguous = next.seq;
            ready.push(next);
        }
        Admission::Apply(ready)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::ObjectId;
    use crate::state_objects::Operation;
    use proptest::prelude::*;

    fn rec(seq: u64, span: u32) -> LogRecord {
        LogRecord { object: ObjectId(1), seq, coalesced_span: span, op: Operation::new(1, vec![seq.to_be_bytes().to_vec()]).unwrap() }
    }

    fn applied(a: Admission) -> Vec<u64> {
        match a {
            Admission::Apply(rs) => rs.iter().map(|r| r.seq).collect(),
            _ => vec![],
        }
    }

    #[test]
    fn ordered_gap_is_buffered_then_drained_in_order() {
        let mut s = OriginState::default();
        assert_eq!(s.admit_ordered(rec(3, 1)), Admission::Buffered);
        assert_eq!(s.admit_ordered(rec(4, 1)), Admission::Buffered);
        assert_eq!(s.ack(), 0);
        assert_eq!(applied(s.admit_ordered(rec(1, 1))), vec![1]);
        assert_eq!(applied(s.admit_ordered(rec(2, 1))), vec![2, 3, 4]);
        assert_eq!(s.ack(), 4);
        assert!(!s.has_gaps());
    }

    #[test]
    fn ordered_duplicates_are_discarded() {
        let mut s = OriginState::default();
        assert_eq!(applied(s.admit_ordered(rec(1, 1))), vec![1]);
        assert_eq!(s.admit_ordered(rec(1, 1)), Admission::Duplicate);
        assert_eq!(s.admit_ordered(rec(5, 2)), Admission::Buffered);
        assert_eq!(s.admit_ordered(rec(5, 2)), Admission::Duplicate);
        assert_eq!(s.admit_ordered(rec(6, 3)), Admission::Overlap);
        assert_eq!(applied(s.admit_ordered(rec(3, 2))), vec![3, 5]);
    }

    #[test]
    fn straddling_record_is_a_protocol_error() {
        let mut s = OriginState::starting_at(5);
        assert_eq!(s.admit_ordered(rec(7, 3)), Admission::Overlap);
        assert_eq!(s.ack(), 5);
    }

    #[test]
    fn unordered_applies_immediately_and_acks_contiguously() {
        let mut s = OriginState::default();
        assert_eq!(applied(s.admit_unordered(rec(4, 2))), vec![4]);
        assert_eq!(s.ack(), 0);
        assert_eq!(s.admit_unordered(rec(4, 2)), Admission::Duplicate);
        assert_eq!(applied(s.admit_unordered(rec(1, 1))), vec![1]);
        assert_eq!(s.ack(), 1);
        assert_eq!(applied(s.admit_unordered(rec(2, 1))), vec![2]);
        assert_eq!(s.ack(), 4);
    }

    proptest! {
        // Whatever the arrival order and duplication, each record of an
        // ordered stream is applied exactly once and in seq order, and the ack
        // never decreases.
        #[test]
        fn ordered_exactly_once_in_order(
            spans in prop::collection::vec(1u32..4, 1..40),
            order in prop::collection::vec(any::<prop::sample::Index>(), 1..200),
        ) {
            let mut seq = 0;
            let records: Vec<LogRecord> = spans.iter().map(|s| { seq += *s as u64; rec(seq, *s) }).collect();
            let mut deliveries: Vec<&LogRecord> = order.iter().map(|i| i.get(&records)).collect();
            deliveries.extend(records.iter());
            let mut s = OriginState::default();
            let mut out = Vec::new();
            let mut last_ack = 0;
            for r in deliveries {
                match s.admit_ordered(r.clone()) {
                    Admission::Apply(rs) => out.extend(rs.into_iter().map(|r| r.seq)),
                    Admission::Overlap => prop_assert!(false, "fixed records never overlap"),
                    _ => {}
                }
                prop_assert!(s.ack() >= last_ack);
                last_ack = s.ack();
            }
            prop_assert_eq!(out, records.iter().map(|r| r.seq).collect::<Vec<_>>());
            prop_assert_eq!(s.ack(), seq);
        }

        #[test]
        fn unordered_ack_is_contiguous_prefix(
            spans in prop::collection::vec(1u32..4, 1..40),
            order in prop::collection::vec(any::<prop::sample::Index>(), 0..100),
        ) {
            let mut seq = 0;
            let records: Vec<LogRecord> = spans.iter().map(|s| { seq += *s as u64; rec(seq, *s) }).collect();
            let mut s = OriginState::default();
            let mut seen = std::collections::BTreeSet::new();
            for i in &order {
                let r = i.get(&records);
                s.admit_unordered(r.clone());
                seen.extend(r.first_seq()..=r.seq);
            }
            let expected = (1..).take_while(|n| seen.contains(n)).last().unwrap_or(0);
            prop_assert_eq!(s.ack(), expected);
        }
    }
}
