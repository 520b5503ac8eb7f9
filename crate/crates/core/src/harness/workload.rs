//! Scripted workloads: timed packets, fuzz operations, counter increments,
//! latency changes and membership events.

use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ids::{InstanceId, ObjectId};
use crate::middleboxes::{Direction, Packet};
use crate::sim_net::SimNet;
use crate::state_objects::{
    CountMinSketch, CounterVector, CountingBloomFilter, FlowKey, FlowTable, LwwRegister, OrSet, PnCounter,
};

use super::cluster::{Cluster, Route, Workload};
use super::config::{ExperimentConfig, FuzzObject, MiddleboxKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Packet { route: Route, pkt: Packet },
    Fuzz { instance: InstanceId },
    Increment { instance: InstanceId, object: ObjectId, delta: i64 },
    SetLatency { src: InstanceId, dst: InstanceId, latency_us: u64 },
    ScaleOut { donor: InstanceId },
    ScaleIn { victim: InstanceId },
}

/// Generates one random operation per fuzz action from the instance's
/// current local state.
#[derive(Debug, Clone)]
pub struct FuzzGen {
    pub kind: FuzzObject,
    pub object: ObjectId,
    rng: ChaCha8Rng,
    flows: u64,
}

impl FuzzGen {
    pub fn new(kind: FuzzObject, object: ObjectId, seed: u64) -> Self {
        Self { kind, object, rng: ChaCha8Rng::seed_from_u64(seed), flows: 0 }
    }

    fn apply(&mut self, cluster: &mut Cluster, id: InstanceId, now: u64) {
        let obj = self.object;
        let rng = &mut self.rng;
        match self.kind {
            FuzzObject::PnCounter => {
                let delta = rng.random_range(-5..=10);
                cluster.submit_with(id, obj, |me, reg| Some(reg.get_mut::<PnCounter>(obj).ok()?.update_op(me, delta)));
            }
            FuzzObject::CounterVector => {
                let (slot, delta) = (rng.random_range(0..16), rng.random_range(-5..=10));
                cluster.submit_with(id, obj, |me, reg| {
                    Some(reg.get_mut::<CounterVector>(obj).ok()?.update_op(me, slot, delta))
                });
            }
            FuzzObject::LwwRegister => {
                let len = rng.random_range(1..=12);
                let value: Vec<u8> = (0..len).map(|_| rng.random()).collect();
                cluster.submit_with(id, obj, |_, reg| reg.get::<LwwRegister>(obj).ok()?.set_op(&value, now).ok());
            }
            FuzzObject::OrSet => {
                let add = rng.random_bool(0.6);
                let element = vec![rng.random_range(0..48u8)];
                let pick = rng.random::<u32>() as usize;
                cluster.submit_with(id, obj, |me, reg| {
                    let set = reg.get::<OrSet>(obj).ok()?;
                    if add || set.is_empty() {
                        set.add_op(me, &element).ok()
                    } else {
                        let victim = set.elements().nth(pick % set.len())?.to_vec();
                        set.remove_op(&victim).ok().flatten()
                    }
                });
            }
            FuzzObject::FlowTable => {
                let k = rng.random_range(0..64u16);
                let key = FlowKey::new(Ipv4Addr::new(10, 0, 0, k as u8), 1000 + k, Ipv4Addr::new(10, 9, 9, 9), 80, 6);
                let value: [u8; 2] = rng.random();
                cluster.submit_with(id, obj, |_, reg| reg.get::<FlowTable>(obj).ok()?.add_op(&key, &value).ok());
            }
            FuzzObject::Cbf => {
                let (x, times) = (rng.random_range(0..2000u32).to_be_bytes(), rng.random_range(1..=3u32));
                cluster.submit_with(id, obj, |_, reg| {
                    let f = reg.get::<CountingBloomFilter>(obj).ok()?;
                    if times == 1 { f.count_op(&x) } else { f.count_many_op(&x, times) }.ok()
                });
            }
            FuzzObject::Cms => {
                let (x, times) = (rng.random_range(0..2000u32).to_be_bytes(), rng.random_range(1..=3u32));
                cluster.submit_with(id, obj, |_, reg| {
                    let s = reg.get::<CountMinSketch>(obj).ok()?;
                    if times == 1 { s.count_op(&x) } else { s.count_many_op(&x, times) }.ok()
                });
            }
            FuzzObject::Nat => {
                self.flows += 1;
                let n = self.flows;
                let src = Ipv4Addr::new(10, id.0 as u8, (n >> 8) as u8, n as u8);
                let key = FlowKey::new(src, rng.random_range(1024..65535), Ipv4Addr::new(93, 184, 216, 34), 443, 6);
                cluster.inject_packet(Route::To(id), Packet::new(key, 64, Direction::Outbound, now));
            }
        }
    }
}

/// Time-ordered list of actions.
#[derive(Debug, Clone, Default)]
pub struct Script {
    events: Vec<(u64, Action)>,
    next: usize,
    fuzz: Option<FuzzGen>,
}

impl Script {
    pub fn new(mut events: Vec<(u64, Action)>, fuzz: Option<FuzzGen>) -> Self {
        events.sort_by_key(|(t, _)| *t);
        Self { events, next: 0, fuzz }
    }

    pub fn events(&self) -> &[(u64, Action)] {
        &self.events
    }
}

impl Workload for Script {
    fn next_at(&self) -> Option<u64> {
        self.events.get(self.next).map(|(t, _)| *t)
    }

    fn fire(&mut self, now: u64, cluster: &mut Cluster, net: &mut SimNet) {
        while let Some((t, action)) = self.events.get(self.next).cloned() {
            if t > now {
                break;
            }
            self.next += 1;
            match action {
                Action::Packet { route, pkt } => cluster.inject_packet(route, pkt),
                Action::Fuzz { instance } => {
                    if let Some(g) = &mut self.fuzz {
                        g.apply(cluster, instance, now);
                    }
                }
                Action::Increment { instance, object, delta } => {
                    cluster.submit_with(instance, object, |me, reg| {
                        Some(reg.get_mut::<PnCounter>(object).ok()?.update_op(me, delta))
                    });
                }
                Action::SetLatency { src, dst, latency_us } => net.set_latency(src, dst, latency_us),
                Action::ScaleOut { donor } => {
                    if let Err(e) = cluster.begin_scale_out(net, donor) {
                        cluster.note_failure(format!("scale-out at {now}: {e}"));
                    }
                }
                Action::ScaleIn { victim } => {
                    if let Err(e) = cluster.begin_scale_in(victim) {
                        cluster.note_failure(format!("scale-in at {now}: {e}"));
                    }
                }
            }
        }
    }
}

/// Gap of `mean_us` perturbed by up to `frac` either way.
fn jittered(rng: &mut ChaCha8Rng, mean_us: f64, frac: f64) -> f64 {
    if frac > 0.0 { mean_us * (1.0 + rng.random_range(-frac..frac)) } else { mean_us }
}

pub fn fuzz_events(cfg: &ExperimentConfig, instances: &[InstanceId], rng: &mut ChaCha8Rng) -> Vec<(u64, Action)> {
    let mut out = Vec::new();
    for id in instances {
        for _ in 0..cfg.ops_per_instance {
            out.push((rng.random_range(0..cfg.duration_us), Action::Fuzz { instance: *id }));
        }
    }
    out
}

fn flow_key(flow: u64, kind: MiddleboxKind, target_port: u16) -> FlowKey {
    let src = Ipv4Addr::new(10, (flow >> 16) as u8, (flow >> 8) as u8, flow as u8);
    let src_port = 1024 + (flow % 60_000) as u16;
    match kind {
        MiddleboxKind::Nat => FlowKey::new(src, src_port, Ipv4Addr::new(93, 184, 216, 34), 443, 6),
        MiddleboxKind::Firewall => FlowKey::new(src, src_port, Ipv4Addr::new(1, 1, 1, 1), 53, 17),
        MiddleboxKind::Idps => FlowKey::new(src, src_port, Ipv4Addr::new(10, 200, 0, 1), target_port, 6),
    }
}

/// Flow-structured traffic for `active` instances' worth of load, routed by
/// flow so that a flow sticks to one instance.
pub fn flow_events(cfg: &ExperimentConfig, kind: MiddleboxKind, active: usize, rng: &mut ChaCha8Rng) -> Vec<(u64, Action)> {
    let t = &cfg.traffic;
    let gap_us = 1e6 / (t.flows_per_sec * active.max(1) as f64);
    let mut out = Vec::new();
    let mut start = 0.0f64;
    let mut flow = 0u64;
    loop {
        start += jittered(rng, gap_us, t.jitter_frac);
        if start >= cfg.duration_us as f64 {
            break;
        }
        flow += 1;
        let key = flow_key(flow, kind, cfg.idps_target_port);
        let mut at = start;
        for i in 0..t.packets_per_flow {
            let (route, pkt_key, dir) = match kind {
                // Replies take the other path.
                MiddleboxKind::Firewall if i % 2 == 1 => (Route::FlowPeer(flow), key.reversed(), Direction::Inbound),
                MiddleboxKind::Idps => (Route::Flow(flow), key, Direction::Inbound),
                _ => (Route::Flow(flow), key, Direction::Outbound),
            };
            let time = at as u64;
            if time < cfg.duration_us {
                out.push((time, Action::Packet { route, pkt: Packet::new(pkt_key, t.packet_bytes, dir, time) }));
            }
            at += jittered(rng, 1000.0, t.jitter_frac);
        }
    }
    out
}

/// One packet in the IDPS trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TracePacket {
    pub at: u64,
    pub instance: InstanceId,
    pub bits: u64,
}

/// Aggregate-rate trace towards one port, split evenly across instances.
pub fn idps_trace(cfg: &ExperimentConfig, instances: &[InstanceId], rng: &mut ChaCha8Rng) -> Vec<(u64, Action)> {
    let t = &cfg.traffic;
    let gap_us = 1e6 / t.packet_rate;
    let mut out = Vec::new();
    let mut at = 0.0f64;
    let mut k = 0u64;
    loop {
        at += jittered(rng, gap_us, t.jitter_frac);
        if at >= cfg.duration_us as f64 {
            break;
        }
        let time = at as u64;
        let id = instances[(k % instances.len() as u64) as usize];
        let key = FlowKey::new(
            Ipv4Addr::new(198, 51, 100, (k % 250) as u8),
            1024 + (k % 60_000) as u16,
            Ipv4Addr::new(10, 200, 0, 1),
            cfg.idps_target_port,
            17,
        );
        out.push((time, Action::Packet { route: Route::To(id), pkt: Packet::new(key, t.packet_bytes, Direction::Inbound, time) }));
        k += 1;
    }
    out
}

pub fn trace_of(events: &[(u64, Action)]) -> Vec<TracePacket> {
    events
        .iter()
        .filter_map(|(at, a)| match a {
            Action::Packet { route: Route::To(instance), pkt } => Some(TracePacket { at: *at, instance: *instance, bits: pkt.bits() }),
            _ => None,
        })
        .collect()
}

/// `count` unit increments at `instance`, evenly spread over the run.
pub fn increment_events(cfg: &ExperimentConfig, instance: InstanceId, object: ObjectId, count: u32) -> Vec<(u64, Action)> {
    (0..count)
        .map(|i| {
            let at = (i as u128 * cfg.duration_us as u128 / count.max(1) as u128) as u64;
            (at, Action::Increment { instance, object, delta: 1 })
        })
        .collect()
}

/// Linear latency ramp between `hub` and every other instance, both ways,
/// updated once per millisecond.
pub fn congestion_events(cfg: &ExperimentConfig, hub: InstanceId, others: &[InstanceId]) -> Vec<(u64, Action)> {
    let c = &cfg.congestion;
    let base = cfg.topology.default.latency_us;
    let steps = (c.ramp_us / 1000).max(1);
    let mut out = Vec::new();
    for s in 1..=steps {
        let at = c.start_us + s * 1000;
        let latency = base + (c.peak_latency_us.saturating_sub(base)) * s / steps;
        for o in others {
            out.push((at, Action::SetLatency { src: hub, dst: *o, latency_us: latency }));
            out.push((at, Action::SetLatency { src: *o, dst: hub, latency_us: latency }));
        }
    }
    out
}
