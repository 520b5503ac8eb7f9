//! Middlebox applications. Their state lives in an [`Instance`]'s replicated
//! objects; the processors themselves only hold configuration.

pub mod firewall;
pub mod idps;
pub mod nat;
pub mod packet;

pub use firewall::{Firewall, FirewallConfig};
pub use idps::{Idps, IdpsConfig, PortCounters};
pub use nat::{Allocation, Nat, NatConfig, NatView};
pub use packet::{Direction, DropReason, Packet, Verdict, VerdictEntry, VerdictLog};

use crate::ids::ObjectId;
use crate::instance::Instance;
use crate::state_objects::ObjectSpec;

#[derive(Debug, Clone)]
pub enum Middlebox {
    Nat(Nat),
    Idps(Idps),
    Firewall(Firewall),
}

impl Middlebox {
    pub fn name(&self) -> &'static str {
        match self {
            Middlebox::Nat(_) => "nat",
            Middlebox::Idps(_) => "idps",
            Middlebox::Firewall(_) => "firewall",
        }
    }

    pub fn objects(&self) -> Vec<(ObjectId, ObjectSpec)> {
        match self {
            Middlebox::Nat(m) => m.objects(),
            Middlebox::Idps(m) => m.objects(),
            Middlebox::Firewall(m) => m.objects(),
        }
    }

    pub fn process(&self, inst: &mut Instance, pkt: &Packet) -> Verdict {
        match self {
            Middlebox::Nat(m) => m.process(inst, pkt),
            Middlebox::Idps(m) => m.process(inst, pkt),
            Middlebox::Firewall(m) => m.process(inst, pkt),
        }
    }
}
