//! Simulator host: a set of instances, the orchestrator driving membership,
//! an optional middlebox on the packet path and a workload.

use std::collections::{BTreeMap, VecDeque};
use std::rc::Rc;

use crate::ids::{InstanceId, ObjectId};
use crate::instance::{Instance, InstanceConfig};
use crate::membership::{MembershipError, MembershipView, Orchestrator};
use crate::middleboxes::{DropReason, Middlebox, Packet, Verdict, VerdictLog};
use crate::replication::{Destination, Outgoing};
use crate::sim_net::{Delivery, Host, SimNet};
use crate::state_objects::{ObjectSpec, Operation, Registry};

/// Source of scripted actions. `fire` runs everything due at `now`.
pub trait Workload {
    fn next_at(&self) -> Option<u64>;
    fn fire(&mut self, now: u64, cluster: &mut Cluster, net: &mut SimNet);
}

/// Where a packet goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    To(InstanceId),
    /// The flow's home instance, pinned on first use and moved only when the
    /// home stops serving.
    Flow(u64),
    /// The serving instance after the flow's home (asymmetric return path).
    FlowPeer(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketOutcome {
    pub packet: Packet,
    pub instance: InstanceId,
    pub processed_at: u64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinRecord {
    pub joiner: InstanceId,
    pub donor: InstanceId,
    pub started_at: u64,
    pub completed_at: Option<u64>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaveRecord {
    pub victim: InstanceId,
    pub started_at: u64,
    pub completed_at: Option<u64>,
}

enum Pending {
    Datagram(Rc<[u8]>),
    Packet(Packet),
}

fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub struct Cluster {
    instances: BTreeMap<InstanceId, Instance>,
    departed: BTreeMap<InstanceId, Instance>,
    orchestrator: Orchestrator,
    specs: Vec<(ObjectId, ObjectSpec)>,
    config: InstanceConfig,
    middlebox: Option<Middlebox>,
    workload: Option<Box<dyn Workload>>,
    queued: BTreeMap<InstanceId, VecDeque<Pending>>,
    flow_home: BTreeMap<u64, InstanceId>,
    outcomes: Vec<PacketOutcome>,
    joins: Vec<JoinRecord>,
    leaves: Vec<LeaveRecord>,
    rejected_ops: u64,
    failures: Vec<String>,
    now: u64,
}

impl Cluster {
    /// Instances `initial` start active and subscribed to every object group.
    pub fn new(
        net: &mut SimNet,
        initial: &[InstanceId],
        specs: Vec<(ObjectId, ObjectSpec)>,
        config: InstanceConfig,
        middlebox: Option<Middlebox>,
    ) -> Result<Self, crate::StateError> {
        let view = MembershipView::with_active(initial.iter().copied());
        let mut instances = BTreeMap::new();
        for id in initial {
            instances.insert(*id, Instance::new(*id, config.clone(), &specs, view.clone())?);
            for (obj, _) in &specs {
                net.subscribe(*obj, *id);
            }
        }
        Ok(Self {
            instances,
            departed: BTreeMap::new(),
            orchestrator: Orchestrator::new(view),
            specs,
            config,
            middlebox,
            workload: None,
            queued: BTreeMap::new(),
            flow_home: BTreeMap::new(),
            outcomes: Vec::new(),
            joins: Vec::new(),
            leaves: Vec::new(),
            rejected_ops: 0,
            failures: Vec::new(),
            now: 0,
        })
    }

    pub fn set_workload(&mut self, workload: Box<dyn Workload>) {
        self.workload = Some(workload);
    }

    pub fn instances(&self) -> &BTreeMap<InstanceId, Instance> {
        &self.instances
    }

    pub fn instance_mut(&mut self, id: InstanceId) -> Option<&mut Instance> {
        self.instances.get_mut(&id)
    }

    pub fn departed(&self) -> &BTreeMap<InstanceId, Instance> {
        &self.departed
    }

    /// Current and departed instances.
    pub fn all_instances(&self) -> impl Iterator<Item = &Instance> + '_ {
        self.instances.values().chain(self.departed.values())
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orchestrator
    }

    pub fn specs(&self) -> &[(ObjectId, ObjectSpec)] {
        &self.specs
    }

    pub fn middlebox(&self) -> Option<&Middlebox> {
        self.middlebox.as_ref()
    }

    pub fn outcomes(&self) -> &[PacketOutcome] {
        &self.outcomes
    }

    pub fn joins(&self) -> &[JoinRecord] {
        &self.joins
    }

    pub fn leaves(&self) -> &[LeaveRecord] {
        &self.leaves
    }

    /// Harness-level problems such as a refused membership event.
    pub fn note_failure(&mut self, msg: String) {
        self.failures.push(msg);
    }

    pub fn failures(&self) -> &[String] {
        &self.failures
    }

    pub fn rejected_ops(&self) -> u64 {
        self.rejected_ops
    }

    pub fn verdict_log(&self) -> VerdictLog {
        let mut log = VerdictLog::new();
        for o in &self.outcomes {
            log.push(o.processed_at, o.instance, &o.packet, o.verdict);
        }
        log
    }

    pub fn serving(&self) -> Vec<InstanceId> {
        self.instances.values().filter(|i| i.is_serving()).map(Instance::id).collect()
    }

    fn resolve(&mut self, route: Route) -> Option<InstanceId> {
        let serving = self.serving();
        if serving.is_empty() {
            return None;
        }
        match route {
            Route::To(id) => Some(id),
            Route::Flow(f) => Some(self.home(f, &serving)),
            Route::FlowPeer(f) => {
                let home = self.home(f, &serving);
                let pos = serving.iter().position(|s| *s == home).unwrap_or(0);
                Some(serving[(pos + 1) % serving.len()])
            }
        }
    }

    fn home(&mut self, flow: u64, serving: &[InstanceId]) -> InstanceId {
        match self.flow_home.get(&flow) {
            Some(h) if serving.contains(h) => *h,
            _ => {
                let h = serving[(mix(flow) % serving.len() as u64) as usize];
                self.flow_home.insert(flow, h);
                h
            }
        }
    }

    /// Runs a packet through the middlebox at the routed instance. Packets
    /// reaching a paused instance wait for the pause to end.
    pub fn inject_packet(&mut self, route: Route, pkt: Packet) {
        let Some(id) = self.resolve(route) else { return };
        let now = self.now;
        match self.instances.get(&id) {
            Some(inst) if inst.paused_until(now).is_some() => {
                self.queued.entry(id).or_default().push_back(Pending::Packet(pkt));
            }
            Some(_) => self.process_packet(id, pkt, now),
            None => {}
        }
    }

    fn process_packet(&mut self, id: InstanceId, pkt: Packet, now: u64) {
        let (Some(mb), Some(inst)) = (self.middlebox.as_ref(), self.instances.get_mut(&id)) else { return };
        let verdict = if inst.is_serving() { mb.process(inst, &pkt) } else { Verdict::Dropped(DropReason::NotServing) };
        self.outcomes.push(PacketOutcome { packet: pkt, instance: id, processed_at: now, verdict });
    }

    /// Builds an operation from the instance's current state and submits it.
    pub fn submit_with(
        &mut self,
        id: InstanceId,
        object: ObjectId,
        build: impl FnOnce(InstanceId, &mut Registry) -> Option<Operation>,
    ) -> bool {
        let Some(inst) = self.instances.get_mut(&id) else { return false };
        let op = build(id, inst.registry_mut());
        let ok = op.is_some_and(|op| inst.submit(object, op).is_ok());
        if !ok {
            self.rejected_ops += 1;
        }
        ok
    }

    pub fn begin_scale_out(&mut self, net: &mut SimNet, donor: InstanceId) -> Result<InstanceId, MembershipError> {
        let joiner = self.orchestrator.next_id(false);
        let bootstrap = self.orchestrator.begin_scale_out(joiner, donor)?;
        let mut donors = vec![donor];
        donors.extend(bootstrap.active.iter().copied().filter(|d| *d != donor));
        let inst = Instance::new_joiner(joiner, self.config.clone(), &self.specs, bootstrap, donors, self.now)
            .expect("specs already validated");
        for (obj, _) in &self.specs {
            net.subscribe(*obj, joiner);
        }
        self.instances.insert(joiner, inst);
        self.joins.push(JoinRecord { joiner, donor, started_at: self.now, completed_at: None, aborted: None });
        Ok(joiner)
    }

    pub fn begin_scale_in(&mut self, victim: InstanceId) -> Result<(), MembershipError> {
        self.orchestrator.begin_scale_in(victim)?;
        let now = self.now;
        self.instances.get_mut(&victim).expect("active instance").start_leave(now);
        self.leaves.push(LeaveRecord { victim, started_at: now, completed_at: None });
        Ok(())
    }

    fn send(net: &mut SimNet, src: InstanceId, out: Vec<Outgoing>) {
        for o in out {
            match o.dest {
                Destination::Group(g) => net.multicast(src, g, o.bytes, o.background),
                Destination::Instance(dst) => net.unicast(src, dst, o.bytes, o.background),
            }
        }
    }

    fn install(&mut self, view: MembershipView) {
        let now = self.now;
        for inst in self.instances.values_mut() {
            inst.install_view(view.clone(), now);
        }
    }

    /// Completes membership events whose instance-side work has finished.
    fn progress(&mut self, net: &mut SimNet) {
        let now = self.now;
        if let Some(rec) = self.joins.last_mut().filter(|j| j.completed_at.is_none() && j.aborted.is_none()) {
            let inst = &self.instances[&rec.joiner];
            if let Some(why) = inst.aborted() {
                rec.aborted = Some(why.to_string());
                let joiner = rec.joiner;
                self.orchestrator.abort_scale_out();
                net.unsubscribe_all(joiner);
                let gone = self.instances.remove(&joiner).expect("joiner present");
                self.departed.insert(joiner, gone);
            } else if inst.join_restored() {
                rec.completed_at = Some(now);
                if let Some(view) = self.orchestrator.complete_scale_out(now) {
                    self.install(view);
                }
            }
        }
        if let Some(rec) = self.leaves.last_mut().filter(|l| l.completed_at.is_none()) {
            if self.instances[&rec.victim].leave_done() {
                rec.completed_at = Some(now);
                let victim = rec.victim;
                net.unsubscribe_all(victim);
                let gone = self.instances.remove(&victim).expect("victim present");
                self.departed.insert(victim, gone);
                if let Some(view) = self.orchestrator.complete_scale_in(now) {
                    self.install(view);
                }
            }
        }
    }

    fn drain_queue(&mut self, net: &mut SimNet, id: InstanceId, now: u64) {
        let Some(mut q) = self.queued.remove(&id) else { return };
        while let Some(p) = q.pop_front() {
            match p {
                Pending::Packet(pkt) => self.process_packet(id, pkt, now),
                Pending::Datagram(bytes) => {
                    if let Some(inst) = self.instances.get_mut(&id) {
                        let out = inst.on_datagram(&bytes, now);
                        Self::send(net, id, out);
                    }
                }
            }
        }
    }
}

impl Host for Cluster {
    fn on_deliver(&mut self, net: &mut SimNet, delivery: Delivery) {
        self.now = delivery.at;
        let now = self.now;
        let Some(inst) = self.instances.get_mut(&delivery.dst) else { return };
        if inst.paused_until(now).is_some() {
            self.queued.entry(delivery.dst).or_default().push_back(Pending::Datagram(delivery.payload));
            return;
        }
        let out = inst.on_datagram(&delivery.payload, now);
        Self::send(net, delivery.dst, out);
        self.progress(net);
    }

    fn next_wakeup(&self) -> Option<u64> {
        let instances = self.instances.values().map(|i| match i.paused_until(self.now) {
            Some(until) => until,
            None if self.queued.contains_key(&i.id()) => self.now,
            None => i.next_wakeup(),
        });
        let work = self.workload.as_ref().and_then(|w| w.next_at());
        instances.chain(work).min()
    }

    fn on_wakeup(&mut self, net: &mut SimNet, now: u64) {
        self.now = now;
        if let Some(mut w) = self.workload.take() {
            while w.next_at().is_some_and(|t| t <= now) {
                w.fire(now, self, net);
            }
            self.workload = Some(w);
        }
        let ids: Vec<InstanceId> = self.instances.keys().copied().collect();
        for id in ids {
            if self.instances.get(&id).is_none_or(|i| i.paused_until(now).is_some()) {
                continue;
            }
            self.drain_queue(net, id, now);
            let inst = self.instances.get_mut(&id).expect("listed");
            if inst.next_wakeup() <= now {
                let out = inst.on_wakeup(now);
                Self::send(net, id, out);
            }
        }
        self.progress(net);
    }

    fn is_drained(&self) -> bool {
        self.workload.as_ref().is_none_or(|w| w.next_at().is_none())
            && self.orchestrator.in_flight().is_none()
            && self.queued.is_empty()
            && self.instances.values().all(Instance::is_drained)
    }
}
