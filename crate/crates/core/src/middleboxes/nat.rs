//! Source NAT whose port pool and translation tables live in one derivative
//! object, so allocating a port and recording the mapping replicate together.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::StateError;
use crate::ids::ObjectId;
use crate::instance::Instance;
use crate::state_objects::{Derivative, FlowKey, FlowTable, ObjectSpec, OrSet};

use super::{DropReason, Packet, Verdict};
use super::packet::Direction;

/// Member ids inside the NAT derivative object.
pub const POOL: ObjectId = ObjectId(1);
pub const FORWARD: ObjectId = ObjectId(2);
pub const REVERSE: ObjectId = ObjectId(3);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allocation {
    /// Lowest free port in the shared pool. Concurrent allocations collide.
    Lowest,
    /// Ports are split into `slots` interleaved leases; instance `i` only
    /// takes ports with `(port - first_port) % slots == i % slots`.
    Leased { slots: u16 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NatConfig {
    pub object: ObjectId,
    pub first_port: u16,
    pub ports: u16,
    pub allocation: Allocation,
}

impl Default for NatConfig {
    fn default() -> Self {
        Self { object: ObjectId(10), first_port: 1024, ports: 4096, allocation: Allocation::Lowest }
    }
}

#[derive(Debug, Clone)]
pub struct Nat {
    config: NatConfig,
}

impl Nat {
    pub fn new(config: NatConfig) -> Self {
        assert!(config.ports > 0, "empty port range");
        Self { config }
    }

    pub fn config(&self) -> &NatConfig {
        &self.config
    }

    pub fn objects(&self) -> Vec<(ObjectId, ObjectSpec)> {
        let genesis = (0..self.config.ports).map(|i| (self.config.first_port + i).to_be_bytes().to_vec()).collect();
        let members = vec![
            (POOL, ObjectSpec::OrSet { genesis }),
            (FORWARD, ObjectSpec::flow_table()),
            // Port -> flow key; on concurrent claims the larger five-tuple wins.
            (REVERSE, ObjectSpec::flow_table()),
        ];
        vec![(self.config.object, ObjectSpec::Derivative(members))]
    }

    fn in_lease(&self, inst: &Instance, port: u16) -> bool {
        match self.config.allocation {
            Allocation::Lowest => true,
            Allocation::Leased { slots } => {
                let slots = slots.max(1);
                (port - self.config.first_port) % slots == inst.id().0 % slots
            }
        }
    }

    pub fn process(&self, inst: &mut Instance, pkt: &Packet) -> Verdict {
        if !inst.is_serving() {
            return Verdict::Dropped(DropReason::NotServing);
        }
        let Ok(nat) = inst.registry().get::<Derivative>(self.config.object) else {
            return Verdict::Dropped(DropReason::NoState);
        };
        let view = NatView::of(nat);
        match pkt.direction {
            Direction::Inbound => match view.owner(pkt.key.dst_port) {
                Some(owner) if owner.reversed().src_port == pkt.key.src_port => Verdict::Passed,
                _ => Verdict::Dropped(DropReason::NoState),
            },
            Direction::Outbound => {
                if let Some(port) = view.port_of(&pkt.key) {
                    return if view.owner(port) == Some(pkt.key) { Verdict::Translated(port) } else { Verdict::Reset };
                }
                let pool = nat.member::<OrSet>(POOL).expect("nat pool");
                let Some(port) = pool
                    .first_matching(|p| self.in_lease(inst, u16::from_be_bytes([p[0], p[1]])))
                    .map(|p| u16::from_be_bytes([p[0], p[1]]))
                else {
                    return Verdict::Dropped(DropReason::PoolExhausted);
                };
                match self.allocate(nat, &pkt.key, port).and_then(|op| inst.submit(self.config.object, op).map(|_| ())) {
                    Ok(()) => Verdict::Translated(port),
                    Err(_) => Verdict::Dropped(DropReason::NotServing),
                }
            }
        }
    }

    fn allocate(&self, nat: &Derivative, key: &FlowKey, port: u16) -> Result<crate::state_objects::Operation, StateError> {
        let pool = nat.member::<OrSet>(POOL)?;
        let forward = nat.member::<FlowTable>(FORWARD)?;
        let reverse = nat.member::<FlowTable>(REVERSE)?;
        let port_bytes = port.to_be_bytes();
        let remove = pool.remove_op(&port_bytes)?.ok_or_else(|| StateError::MalformedOp(format!("port {port} not in pool")))?;
        nat.compose(&[
            (POOL, remove),
            (FORWARD, forward.add_op(key, &port_bytes)?),
            (REVERSE, reverse.add_raw_op(&port_bytes, &key.to_bytes())?),
        ])
    }
}

/// Read-only queries over a NAT derivative object.
#[derive(Debug, Clone, Copy)]
pub struct NatView<'a> {
    forward: &'a FlowTable,
    reverse: &'a FlowTable,
    pool: &'a OrSet,
}

impl<'a> NatView<'a> {
    pub fn of(nat: &'a Derivative) -> Self {
        Self {
            forward: nat.member::<FlowTable>(FORWARD).expect("nat forward table"),
            reverse: nat.member::<FlowTable>(REVERSE).expect("nat reverse table"),
            pool: nat.member::<OrSet>(POOL).expect("nat pool"),
        }
    }

    pub fn port_of(&self, key: &FlowKey) -> Option<u16> {
        self.forward.value(key).map(|p| u16::from_be_bytes([p[0], p[1]]))
    }

    /// The flow that holds `port`: the winner if several claimed it.
    pub fn owner(&self, port: u16) -> Option<FlowKey> {
        self.reverse.value_raw(&port.to_be_bytes()).and_then(FlowKey::from_bytes)
    }

    pub fn is_free(&self, port: u16) -> bool {
        self.pool.contains(&port.to_be_bytes())
    }

    /// Every flow mapped to each port, winners and losers alike.
    pub fn claims(&self) -> BTreeMap<u16, BTreeSet<FlowKey>> {
        let mut out: BTreeMap<u16, BTreeSet<FlowKey>> = BTreeMap::new();
        for (k, p) in self.forward.iter() {
            if let Some(key) = FlowKey::from_bytes(k) {
                out.entry(u16::from_be_bytes([p[0], p[1]])).or_default().insert(key);
            }
        }
        out
    }

    /// Ports claimed by more than one flow.
    pub fn collisions(&self) -> BTreeMap<u16, BTreeSet<FlowKey>> {
        self.claims().into_iter().filter(|(_, flows)| flows.len() > 1).collect()
    }

    /// Flows that lost a collision and are torn down.
    pub fn reset_flows(&self) -> BTreeSet<FlowKey> {
        self.claims()
            .into_iter()
            .flat_map(|(port, flows)| {
                let owner = self.owner(port);
                flows.into_iter().filter(move |f| Some(*f) != owner)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::InstanceId;
    use crate::membership::MembershipView;
    use crate::instance::InstanceConfig;
    use std::net::Ipv4Addr;

    fn flow(n: u16) -> FlowKey {
        FlowKey::new(Ipv4Addr::new(10, 0, 0, 1), 2000 + n, Ipv4Addr::new(93, 184, 216, 34), 443, 6)
    }

    fn out(key: FlowKey) -> Packet {
        Packet::new(key, 64, Direction::Outbound, 0)
    }

    fn instance(nat: &Nat, id: u16) -> Instance {
        let view = MembershipView::with_active([InstanceId(id)]);
        Instance::new(InstanceId(id), InstanceConfig::default(), &nat.objects(), view).unwrap()
    }

    #[test]
    fn flow_keeps_its_port() {
        let nat = Nat::new(NatConfig::default());
        let mut inst = instance(&nat, 1);
        let first = nat.process(&mut inst, &out(flow(1)));
        assert_eq!(first, Verdict::Translated(1024));
        assert_eq!(nat.process(&mut inst, &out(flow(1))), first);
    }

    #[test]
    fn distinct_flows_get_distinct_ports() {
        let nat = Nat::new(NatConfig { ports: 300, ..NatConfig::default() });
        let mut inst = instance(&nat, 1);
        let ports: BTreeSet<_> = (0..300).map(|n| nat.process(&mut inst, &out(flow(n)))).collect();
        assert_eq!(ports.len(), 300);
        assert!(ports.iter().all(|v| matches!(v, Verdict::Translated(_))));
        assert_eq!(nat.process(&mut inst, &out(flow(301))), Verdict::Dropped(DropReason::PoolExhausted));
    }

    #[test]
    fn inbound_needs_a_mapping() {
        let nat = Nat::new(NatConfig::default());
        let mut inst = instance(&nat, 1);
        let Verdict::Translated(port) = nat.process(&mut inst, &out(flow(1))) else { panic!() };
        let mut reply = flow(1).reversed();
        reply.dst_port = port;
        assert_eq!(nat.process(&mut inst, &Packet::new(reply, 64, Direction::Inbound, 1)), Verdict::Passed);
        reply.dst_port = port + 1;
        assert_eq!(
            nat.process(&mut inst, &Packet::new(reply, 64, Direction::Inbound, 1)),
            Verdict::Dropped(DropReason::NoState)
        );
    }

    #[test]
    fn leases_interleave_ports() {
        let nat = Nat::new(NatConfig { allocation: Allocation::Leased { slots: 2 }, ..NatConfig::default() });
        let mut a = instance(&nat, 1);
        let mut b = instance(&nat, 2);
        assert_eq!(nat.process(&mut a, &out(flow(1))), Verdict::Translated(1025));
        assert_eq!(nat.process(&mut b, &out(flow(2))), Verdict::Translated(1024));
        assert_eq!(nat.process(&mut a, &out(flow(3))), Verdict::Translated(1027));
    }
}
