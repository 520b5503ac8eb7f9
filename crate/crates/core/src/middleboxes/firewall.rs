//! Stateful firewall: replies from outside pass only after some instance has
//! seen the request from inside.

use crate::ids::ObjectId;
use crate::instance::Instance;
use crate::state_objects::{FlowTable, ObjectSpec};

use super::packet::Direction;
use super::{DropReason, Packet, Verdict};

const SEEN_REQUEST: &[u8] = &[1];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirewallConfig {
    pub object: ObjectId,
}

impl Default for FirewallConfig {
    fn default() -> Self {
        Self { object: ObjectId(30) }
    }
}

#[derive(Debug, Clone)]
pub struct Firewall {
    config: FirewallConfig,
}

impl Firewall {
    pub fn new(config: FirewallConfig) -> Self {
        Self { config }
    }

    pub fn objects(&self) -> Vec<(ObjectId, ObjectSpec)> {
        vec![(self.config.object, ObjectSpec::flow_table())]
    }

    pub fn process(&self, inst: &mut Instance, pkt: &Packet) -> Verdict {
        if !inst.is_serving() {
            return Verdict::Dropped(DropReason::NotServing);
        }
        let Ok(table) = inst.registry().get::<FlowTable>(self.config.object) else {
            return Verdict::Dropped(DropReason::NoState);
        };
        match pkt.direction {
            Direction::Outbound => {
                if table.value(&pkt.key).is_none() {
                    let op = table.add_op(&pkt.key, SEEN_REQUEST);
                    if op.and_then(|op| inst.submit(self.config.object, op)).is_err() {
                        return Verdict::Dropped(DropReason::NotServing);
                    }
                }
                Verdict::Passed
            }
            Direction::Inbound if table.value(&pkt.key.reversed()).is_some() => Verdict::Passed,
            Direction::Inbound => Verdict::Dropped(DropReason::NoState),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::InstanceId;
    use crate::instance::InstanceConfig;
    use crate::membership::MembershipView;
    use crate::state_objects::FlowKey;
    use std::net::Ipv4Addr;

    #[test]
    fn response_needs_prior_request() {
        let fw = Firewall::new(FirewallConfig::default());
        let view = MembershipView::with_active([InstanceId(1)]);
        let mut inst = Instance::new(InstanceId(1), InstanceConfig::default(), &fw.objects(), view).unwrap();
        let req = FlowKey::new(Ipv4Addr::new(10, 0, 0, 1), 40000, Ipv4Addr::new(1, 1, 1, 1), 53, 17);
        let resp = Packet::new(req.reversed(), 80, Direction::Inbound, 0);
        assert_eq!(fw.process(&mut inst, &resp), Verdict::Dropped(DropReason::NoState));
        assert_eq!(fw.process(&mut inst, &Packet::new(req, 80, Direction::Outbound, 1)), Verdict::Passed);
        assert_eq!(fw.process(&mut inst, &resp), Verdict::Passed);
    }
}
