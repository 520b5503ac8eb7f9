//! Volume-based port blocker: per-destination-port bit counters plus a
//! replicated set of blocked ports.

use crate::ids::ObjectId;
use crate::instance::Instance;
use crate::state_objects::{CmsConfig, CountMinSketch, CounterVector, ObjectSpec, OrSet};

use super::{DropReason, Packet, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PortCounters {
    /// Exact counter per port.
    Exact,
    /// Count-min sketch keyed by port; never undercounts.
    Sketch(CmsConfig),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdpsConfig {
    pub counters_object: ObjectId,
    pub blocked_object: ObjectId,
    pub threshold_bits: u64,
    pub counters: PortCounters,
}

impl Default for IdpsConfig {
    fn default() -> Self {
        Self {
            counters_object: ObjectId(20),
            blocked_object: ObjectId(21),
            threshold_bits: 1024 * 1_000_000,
            counters: PortCounters::Exact,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Idps {
    config: IdpsConfig,
}

impl Idps {
    pub fn new(config: IdpsConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &IdpsConfig {
        &self.config
    }

    pub fn objects(&self) -> Vec<(ObjectId, ObjectSpec)> {
        let counters = match self.config.counters {
            PortCounters::Exact => ObjectSpec::CounterVector,
            PortCounters::Sketch(cfg) => ObjectSpec::CountMinSketch(cfg),
        };
        vec![(self.config.counters_object, counters), (self.config.blocked_object, ObjectSpec::OrSet { genesis: Vec::new() })]
    }

    pub fn is_blocked(&self, inst: &Instance, port: u16) -> bool {
        inst.registry().get::<OrSet>(self.config.blocked_object).is_ok_and(|s| s.contains(&port.to_be_bytes()))
    }

    /// Bits counted toward `port` as seen by this instance.
    pub fn volume(&self, inst: &Instance, port: u16) -> u64 {
        let reg = inst.registry();
        match self.config.counters {
            PortCounters::Exact => {
                reg.get::<CounterVector>(self.config.counters_object).map_or(0, |c| c.value(port as u32).max(0) as u64)
            }
            PortCounters::Sketch(_) => {
                reg.get::<CountMinSketch>(self.config.counters_object).map_or(0, |c| c.value(&port.to_be_bytes()))
            }
        }
    }

    /// The packet that pushes a port over the threshold still passes; later
    /// ones are dropped.
    pub fn process(&self, inst: &mut Instance, pkt: &Packet) -> Verdict {
        if !inst.is_serving() {
            return Verdict::Dropped(DropReason::NotServing);
        }
        let port = pkt.key.dst_port;
        if self.is_blocked(inst, port) {
            return Verdict::Dropped(DropReason::Blocked);
        }
        let id = inst.id();
        let obj = self.config.counters_object;
        let op = match self.config.counters {
            PortCounters::Exact => inst
                .registry_mut()
                .get_mut::<CounterVector>(obj)
                .map(|c| c.update_op(id, port as u32, pkt.bits() as i64)),
            PortCounters::Sketch(_) => inst
                .registry()
                .get::<CountMinSketch>(obj)
                .and_then(|c| c.count_many_op(&port.to_be_bytes(), pkt.bits().min(u32::MAX as u64) as u32)),
        };
        if op.and_then(|op| inst.submit(obj, op)).is_err() {
            return Verdict::Dropped(DropReason::NotServing);
        }
        if self.volume(inst, port) >= self.config.threshold_bits {
            let add = inst.registry().get::<OrSet>(self.config.blocked_object).and_then(|s| s.add_op(id, &port.to_be_bytes()));
            // A full log only delays blocking; the counters already crossed.
            let _ = add.and_then(|op| inst.submit(self.config.blocked_object, op));
        }
        Verdict::Passed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::InstanceId;
    use crate::instance::InstanceConfig;
    use crate::membership::MembershipView;
    use crate::middleboxes::Direction;
    use crate::state_objects::FlowKey;
    use std::net::Ipv4Addr;

    fn pkt(port: u16, len: u32) -> Packet {
        let key = FlowKey::new(Ipv4Addr::new(10, 0, 0, 9), 5555, Ipv4Addr::new(10, 1, 0, 1), port, 17);
        Packet::new(key, len, Direction::Inbound, 0)
    }

    fn run(counters: PortCounters, threshold: u64, len: u32, n: usize) -> Vec<Verdict> {
        let idps = Idps::new(IdpsConfig { threshold_bits: threshold, counters, ..IdpsConfig::default() });
        let view = MembershipView::with_active([InstanceId(1)]);
        let mut inst = Instance::new(InstanceId(1), InstanceConfig::default(), &idps.objects(), view).unwrap();
        (0..n).map(|_| idps.process(&mut inst, &pkt(8080, len))).collect()
    }

    #[test]
    fn below_threshold_everything_passes() {
        assert!(run(PortCounters::Exact, 1_000_000, 100, 1000).iter().all(Verdict::passes));
    }

    #[test]
    fn blocks_after_ceiling_of_threshold_over_packet_bits() {
        for counters in [PortCounters::Exact, PortCounters::Sketch(CmsConfig { arrays: 4, counters_per_array: 256, seed: 3 })] {
            // 10_000 bits over 1200-bit packets: the 9th packet crosses.
            let verdicts = run(counters, 10_000, 150, 20);
            let passed = verdicts.iter().take_while(|v| v.passes()).count();
            assert_eq!(passed, 10_000usize.div_ceil(1200));
            assert!(verdicts[passed..].iter().all(|v| *v == Verdict::Dropped(DropReason::Blocked)));
        }
    }
}
