//! The five experiment kinds and the report assembled from a finished run.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::StateError;
use crate::ids::{InstanceId, ObjectId};
use crate::instance::{Instance, InstanceConfig};
use crate::membership::MembershipConfig;
use crate::middleboxes::{Firewall, FirewallConfig, Idps, Middlebox, Nat, NatView, Verdict};
use crate::replication::{CoalescingMode, ReplicationConfig};
use crate::sim_net::{RunOutcome, SimNet};
use crate::state_objects::{CbfConfig, CmsConfig, Derivative, ObjectSpec};

use super::cluster::Cluster;
use super::config::{ExperimentConfig, ExperimentKind, FuzzObject, MiddleboxKind};
use super::oracle::{applied_seqs, centralized_crossing, leaked_after, sequential_fingerprints, LeakModel};
use super::report::*;
use super::workload::{self, Action, FuzzGen, Script, TracePacket};

/// Object id used by single-object experiments.
pub const FUZZ_OBJECT: ObjectId = ObjectId(1);
/// Virtual time allowed after the workload ends for the system to settle.
pub const QUIESCE_BUDGET_US: u64 = 120_000_000;
const THROUGHPUT_BUCKET_US: u64 = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] super::config::ConfigError),
    #[error("state error: {0}")]
    State(#[from] StateError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// What a run needs besides the configuration.
pub struct Setup {
    pub initial: Vec<InstanceId>,
    pub specs: Vec<(ObjectId, ObjectSpec)>,
    pub middlebox: Option<Middlebox>,
    pub events: Vec<(u64, Action)>,
    pub fuzz: Option<FuzzGen>,
}

pub struct Simulation {
    pub cluster: Cluster,
    pub net: SimNet,
    pub outcome: RunOutcome,
}

pub struct RunOutput {
    pub report: MetricsReport,
    pub artifacts: Artifacts,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(32) ^ 0x6a09_e667_f3bc_c908;
    z = (z ^ (z >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    z = (z ^ (z >> 33)).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    z ^ (z >> 33)
}

pub fn fuzz_spec(kind: FuzzObject, seed: u64) -> ObjectSpec {
    match kind {
        FuzzObject::PnCounter => ObjectSpec::PnCounter,
        FuzzObject::CounterVector => ObjectSpec::CounterVector,
        FuzzObject::LwwRegister => ObjectSpec::LwwRegister,
        FuzzObject::OrSet => ObjectSpec::OrSet { genesis: Vec::new() },
        FuzzObject::FlowTable => ObjectSpec::flow_table(),
        FuzzObject::Cbf => ObjectSpec::CountingBloomFilter(CbfConfig { counters: 1024, hashes: 4, seed }),
        FuzzObject::Cms => ObjectSpec::CountMinSketch(CmsConfig { arrays: 4, counters_per_array: 256, seed }),
        FuzzObject::Nat => unreachable!("the NAT fuzz runs through the middlebox"),
    }
}

pub fn instance_config(cfg: &ExperimentConfig, coalescing: CoalescingMode) -> InstanceConfig {
    let mut replication = ReplicationConfig { coalescing, send_interval_us: cfg.send_interval_us, ..Default::default() };
    if let Some(w) = cfg.max_lookahead {
        replication.rtt.max_lookahead = w;
    }
    InstanceConfig { replication, membership: MembershipConfig::default(), journal: true, ..Default::default() }
}

fn middlebox(cfg: &ExperimentConfig, kind: MiddleboxKind) -> Middlebox {
    match kind {
        MiddleboxKind::Nat => Middlebox::Nat(Nat::new(cfg.nat.clone())),
        MiddleboxKind::Idps => Middlebox::Idps(Idps::new(cfg.idps.clone())),
        MiddleboxKind::Firewall => Middlebox::Firewall(Firewall::new(FirewallConfig::default())),
    }
}

/// Builds the instances, objects and script for `cfg`.
pub fn setup(cfg: &ExperimentConfig) -> Setup {
    let all: Vec<InstanceId> = cfg.topology.instance_ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x5eed));
    let with_mb = |mb: Middlebox, initial: Vec<InstanceId>, events| Setup {
        initial,
        specs: mb.objects(),
        middlebox: Some(mb),
        events,
        fuzz: None,
    };
    match cfg.kind {
        ExperimentKind::ConvergenceFuzz => {
            let events = workload::fuzz_events(cfg, &all, &mut rng);
            let (specs, mb) = match cfg.object {
                FuzzObject::Nat => {
                    let mb = middlebox(cfg, MiddleboxKind::Nat);
                    (mb.objects(), Some(mb))
                }
                other => (vec![(FUZZ_OBJECT, fuzz_spec(other, mix(cfg.seed, 7)))], None),
            };
            let fuzz = Some(FuzzGen::new(cfg.object, FUZZ_OBJECT, mix(cfg.seed, 0xf022)));
            Setup { initial: all, specs, middlebox: mb, events, fuzz }
        }
        ExperimentKind::LeakedPackets => {
            let events = workload::idps_trace(cfg, &all, &mut rng);
            with_mb(middlebox(cfg, MiddleboxKind::Idps), all, events)
        }
        ExperimentKind::Coalescing => {
            let hub = all[0];
            let mut events = workload::increment_events(cfg, hub, FUZZ_OBJECT, cfg.increments);
            events.extend(workload::congestion_events(cfg, hub, &all[1..]));
            Setup { initial: all, specs: vec![(FUZZ_OBJECT, ObjectSpec::PnCounter)], middlebox: None, events, fuzz: None }
        }
        ExperimentKind::ScaleOut => {
            let kind = cfg.middlebox.unwrap_or(MiddleboxKind::Nat);
            let initial = all[..all.len() - 1].to_vec();
            let mut events = workload::flow_events(cfg, kind, initial.len(), &mut rng);
            let donor = InstanceId(cfg.scaling.donor.unwrap_or(initial[0].0));
            events.push((cfg.scaling.at_us, Action::ScaleOut { donor }));
            with_mb(middlebox(cfg, kind), initial, events)
        }
        ExperimentKind::ScaleIn => {
            let kind = cfg.middlebox.unwrap_or(MiddleboxKind::Nat);
            let mut events = workload::flow_events(cfg, kind, all.len(), &mut rng);
            let victim = InstanceId(cfg.scaling.victim.unwrap_or(all[all.len() - 1].0));
            events.push((cfg.scaling.at_us, Action::ScaleIn { victim }));
            with_mb(middlebox(cfg, kind), all, events)
        }
    }
}

/// Runs the workload, then lets the system settle.
pub fn simulate(cfg: &ExperimentConfig, setup: Setup, coalescing: CoalescingMode) -> Result<Simulation, StateError> {
    let mut topology = cfg.topology.clone();
    topology.seed = mix(cfg.seed, topology.seed);
    let mut net = SimNet::new(topology);
    let mut cluster = Cluster::new(&mut net, &setup.initial, setup.specs, instance_config(cfg, coalescing), setup.middlebox)?;
    cluster.set_workload(Box::new(Script::new(setup.events, setup.fuzz)));
    net.run_until(&mut cluster, cfg.duration_us);
    let outcome = net.run_to_quiescence(&mut cluster, cfg.duration_us + QUIESCE_BUDGET_US);
    Ok(Simulation { cluster, net, outcome })
}

fn verdict_class(v: &Verdict) -> String {
    match v {
        Verdict::Translated(_) => "translated".into(),
        other => other.to_string(),
    }
}

/// Records each current instance is still missing from some origin.
pub fn lost_records(cluster: &Cluster) -> u64 {
    let origins: Vec<&Instance> = cluster.all_instances().collect();
    let mut lost = 0;
    for inst in cluster.instances().values() {
        for origin in &origins {
            if origin.id() == inst.id() {
                continue;
            }
            let mut last: BTreeMap<ObjectId, u64> = BTreeMap::new();
            for r in origin.local_journal() {
                last.insert(r.object, r.seq);
            }
            for (object, seq) in last {
                lost += seq.saturating_sub(inst.replicator().ack_of(object, origin.id()));
            }
        }
    }
    lost
}

pub fn converged(sim: &Simulation) -> bool {
    let oracle = sequential_fingerprints(sim.cluster.specs(), sim.cluster.all_instances());
    sim.outcome.quiesced && sim.cluster.instances().values().all(|i| i.fingerprints() == oracle)
}

fn views_agree(cluster: &Cluster) -> bool {
    let expected = cluster.orchestrator().view();
    cluster.instances().values().all(|i| i.view() == expected)
}

fn base_report(cfg: &ExperimentConfig, sim: &Simulation) -> MetricsReport {
    let cluster = &sim.cluster;
    let buckets = cfg.duration_us.div_ceil(THROUGHPUT_BUCKET_US) as usize;
    let mut per_instance: BTreeMap<u16, Vec<u64>> =
        cluster.all_instances().map(|i| (i.id().0, vec![0; buckets])).collect();
    let mut verdicts: BTreeMap<String, u64> = BTreeMap::new();
    for o in cluster.outcomes() {
        *verdicts.entry(verdict_class(&o.verdict)).or_default() += 1;
        if o.verdict.passes() {
            let b = (o.processed_at / THROUGHPUT_BUCKET_US) as usize;
            if let Some(slot) = per_instance.get_mut(&o.instance.0).and_then(|v| v.get_mut(b)) {
                *slot += 1;
            }
        }
    }
    let mut replication_bytes = BTreeMap::new();
    let mut pairs = Vec::new();
    for ((s, d), p) in sim.net.stats() {
        replication_bytes.insert(format!("{}->{}", s.0, d.0), p.delivered_bytes);
        pairs.push(PairSummary {
            src: s.0,
            dst: d.0,
            sent: p.sent,
            dropped: p.dropped,
            duplicated: p.duplicated,
            delivered: p.delivered,
            delivered_bytes: p.delivered_bytes,
            mean_latency_us: if p.delivered > 0 { p.latency_sum_us as f64 / p.delivered as f64 } else { 0.0 },
            max_latency_us: p.max_latency_us,
        });
    }
    let lost = lost_records(cluster);
    let is_converged = converged(sim);
    let agree = views_agree(cluster);
    let mut checks = BTreeMap::new();
    checks.insert("quiesced".to_string(), sim.outcome.quiesced);
    checks.insert("converged".to_string(), is_converged);
    checks.insert("no_lost_records".to_string(), lost == 0);
    checks.insert("views_agree".to_string(), agree);
    let mut failures: Vec<String> = cluster.failures().to_vec();
    for i in cluster.all_instances() {
        if let Some(why) = i.aborted() {
            failures.push(format!("instance {} aborted: {why}", i.id()));
        }
    }
    MetricsReport {
        experiment: cfg.kind.name().to_string(),
        seed: cfg.seed,
        instances: cfg.topology.instances,
        duration_us: cfg.duration_us,
        end_us: sim.outcome.at,
        quiesced: sim.outcome.quiesced,
        converged: is_converged,
        lost_records: lost,
        checks,
        failures,
        throughput: Throughput { bucket_us: THROUGHPUT_BUCKET_US, per_instance },
        total_replication_bytes: sim.net.total_delivered_bytes(),
        replication_bytes,
        pairs,
        replication: cluster.all_instances().map(|i| (i.id().0, i.replicator().stats().clone())).collect(),
        verdicts,
        rejected_ops: cluster.rejected_ops(),
        leaked: None,
        coalescing: None,
        scaling: None,
        nat: None,
        trace_digest: sim.net.trace_digest(),
    }
}

fn nat_report(sim: &Simulation) -> Option<NatReport> {
    let Some(Middlebox::Nat(nat)) = sim.cluster.middlebox() else { return None };
    let inst = sim.cluster.instances().values().next()?;
    let view = NatView::of(inst.registry().get::<Derivative>(nat.config().object).ok()?);
    let collisions = view.collisions();
    // A flow rerouted before its mapping replicated can move to a second
    // port, so the winner may no longer be among the current claimants.
    let owners_ok = collisions.iter().all(|(port, flows)| view.owner(*port) >= flows.iter().max().copied());
    Some(NatReport {
        collisions_at_convergence: collisions.len() as u64,
        owners_follow_tuple_order: owners_ok,
        reset_verdicts: sim.cluster.outcomes().iter().filter(|o| o.verdict == Verdict::Reset).count() as u64,
        mapped_flows: view.claims().values().map(|f| f.len() as u64).sum(),
    })
}

fn scaling_report(sim: &Simulation) -> ScalingReport {
    let cluster = &sim.cluster;
    let find = |id: InstanceId| cluster.instances().get(&id).or_else(|| cluster.departed().get(&id));
    let mut report = ScalingReport {
        final_epoch: cluster.orchestrator().view().epoch,
        views_agree: views_agree(cluster),
        ..Default::default()
    };
    for j in cluster.joins() {
        let t = find(j.joiner).and_then(Instance::join_timings).cloned().unwrap_or_default();
        report.joins.push(JoinSummary {
            joiner: j.joiner.0,
            donor: j.donor.0,
            started_us: j.started_at,
            completed_us: j.completed_at,
            confirmed_us: t.confirmed_at,
            restored_us: t.restored_at,
            aborted: j.aborted.clone(),
            snapshot_bytes: t.snapshot_bytes,
            snapshot_requests: t.snapshot_requests,
            donor_switches: t.donor_switches,
            buffered_records: t.buffered_records,
        });
    }
    for donor in cluster.all_instances() {
        for p in donor.pauses() {
            let received = find(p.joiner).and_then(Instance::join_timings).map_or(0, |t| t.snapshot_bytes);
            let during = cluster
                .outcomes()
                .iter()
                .filter(|o| o.instance == donor.id() && o.processed_at > p.started_at && o.processed_at < p.ended_at)
                .count() as u64;
            report.pauses.push(PauseSummary {
                donor: donor.id().0,
                joiner: p.joiner.0,
                started_us: p.started_at,
                ended_us: p.ended_at,
                pause_us: p.ended_at - p.started_at,
                copy_window_us: MembershipConfig::default().copy_cost_us(received as usize),
                snapshot_bytes: p.snapshot_bytes,
                donor_verdicts_during_pause: during,
            });
        }
    }
    for l in cluster.leaves() {
        let victim = find(l.victim);
        let t = victim.and_then(Instance::leave_state).map(|s| s.timings.clone());
        let mut seqs: BTreeMap<ObjectId, BTreeSet<u64>> = BTreeMap::new();
        for r in victim.map(Instance::local_journal).unwrap_or(&[]) {
            seqs.entry(r.object).or_default().insert(r.seq);
        }
        let mut missing = 0;
        for survivor in cluster.instances().values() {
            for (object, expected) in &seqs {
                missing += expected.difference(&applied_seqs(survivor, *object, l.victim)).count() as u64;
            }
        }
        let drain_started = t.as_ref().and_then(|t| t.drain_started_at);
        let drained = t.as_ref().and_then(|t| t.drained_at);
        report.leaves.push(LeaveSummary {
            victim: l.victim.0,
            started_us: l.started_at,
            drain_started_us: drain_started,
            drained_us: drained,
            completed_us: l.completed_at,
            drain_us: drain_started.zip(drained).map(|(a, b)| b - a),
            victim_records: seqs.values().map(|s| s.len() as u64).sum(),
            victim_records_missing: missing,
        });
    }
    report
}

/// Leak accounting against the centralized oracle and the replay model.
pub fn leaked_report(cfg: &ExperimentConfig, sim: &Simulation, trace: &[TracePacket]) -> LeakedReport {
    let threshold = cfg.idps.threshold_bits;
    let measured_pass: Vec<bool> = sim.cluster.outcomes().iter().map(|o| o.verdict.passes()).collect();
    let mut latency = BTreeMap::new();
    for a in cfg.topology.instance_ids() {
        for b in cfg.topology.instance_ids().filter(|b| *b != a) {
            latency.insert((a, b), cfg.topology.link(a, b).latency_us);
        }
    }
    let model = LeakModel { threshold_bits: threshold, send_interval_us: cfg.send_interval_us, latency_us: latency };
    let crossing = centralized_crossing(trace, threshold);
    let zeros: BTreeMap<u16, u64> = cfg.topology.instance_ids().map(|i| (i.0, 0)).collect();
    let (mut measured, mut expected, mut histogram) = (zeros.clone(), zeros, BTreeMap::new());
    if let Some((_, at)) = crossing {
        for (k, v) in leaked_after(trace, &measured_pass, at) {
            measured.insert(k.0, v);
        }
        for (k, v) in leaked_after(trace, &model.replay(trace), at) {
            expected.insert(k.0, v);
        }
        for (p, ok) in trace.iter().zip(&measured_pass) {
            if *ok && p.at > at {
                *histogram.entry((p.at - at) / 1000).or_insert(0u64) += 1;
            }
        }
    }
    LeakedReport {
        threshold_bits: threshold,
        crossing_us: crossing.map(|(_, at)| at),
        measured_total: measured.values().sum(),
        expected_total: expected.values().sum(),
        measured,
        expected,
        histogram,
    }
}

fn mode_name(mode: CoalescingMode) -> String {
    match mode {
        CoalescingMode::Off => "off".into(),
        CoalescingMode::Adaptive => "adaptive".into(),
        CoalescingMode::Forced { window } => format!("forced:{window}"),
    }
}

fn records_sent(sim: &Simulation) -> u64 {
    sim.cluster.all_instances().map(|i| i.replicator().stats().records_sent).sum()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    let s = setup(cfg);
    let trace = workload::trace_of(&s.events);
    let sim = simulate(cfg, s, cfg.coalescing)?;
    let mut report = base_report(cfg, &sim);
    match cfg.kind {
        ExperimentKind::ConvergenceFuzz => {}
        ExperimentKind::LeakedPackets => {
            let leaked = leaked_report(cfg, &sim, &trace);
            let (m, e) = (leaked.measured_total as f64, leaked.expected_total as f64);
            report.checks.insert("trace_fully_processed".into(), sim.cluster.outcomes().len() == trace.len());
            report.checks.insert("leak_matches_oracle".into(), (m - e).abs() <= (0.2 * e).max(2.0));
            report.leaked = Some(leaked);
        }
        ExperimentKind::Coalescing => {
            let off = simulate(cfg, setup(cfg), CoalescingMode::Off)?;
            let on_bytes = sim.net.total_delivered_bytes();
            let off_bytes = off.net.total_delivered_bytes();
            let states_equal = converged(&off)
                && report.converged
                && sim.cluster.instances().values().zip(off.cluster.instances().values()).all(|(a, b)| a.fingerprints() == b.fingerprints());
            report.checks.insert("states_equal".into(), states_equal);
            report.checks.insert("coalescing_never_costs_bytes".into(), on_bytes <= off_bytes);
            report.coalescing = Some(CoalescingReport {
                mode: mode_name(cfg.coalescing),
                bytes_coalesced: on_bytes,
                bytes_uncoalesced: off_bytes,
                ratio: off_bytes as f64 / on_bytes.max(1) as f64,
                records_sent_coalesced: records_sent(&sim),
                records_sent_uncoalesced: records_sent(&off),
                records_coalesced_away: sim.cluster.all_instances().map(|i| i.replicator().stats().records_coalesced_away).sum(),
                states_equal,
            });
        }
        ExperimentKind::ScaleOut => {
            let s = scaling_report(&sim);
            let done = !s.joins.is_empty() && s.joins.iter().all(|j| j.completed_us.is_some());
            report.checks.insert("join_completed".into(), done);
            report.checks.insert(
                "pause_matches_copy_window".into(),
                !s.pauses.is_empty() && s.pauses.iter().all(|p| p.pause_us == p.copy_window_us),
            );
            report
                .checks
                .insert("no_donor_verdicts_during_pause".into(), s.pauses.iter().all(|p| p.donor_verdicts_during_pause == 0));
            report.scaling = Some(s);
        }
        ExperimentKind::ScaleIn => {
            let s = scaling_report(&sim);
            let done = !s.leaves.is_empty() && s.leaves.iter().all(|l| l.completed_us.is_some());
            report.checks.insert("leave_completed".into(), done);
            report.checks.insert("victim_log_present".into(), s.leaves.iter().all(|l| l.victim_records_missing == 0));
            report.scaling = Some(s);
        }
    }
    if let Some(nat) = nat_report(&sim) {
        report.checks.insert("nat_owners_follow_tuple_order".into(), nat.owners_follow_tuple_order);
        report.nat = Some(nat);
    }
    let mut verdicts_csv = Vec::new();
    sim.cluster.verdict_log().write_csv(&mut verdicts_csv).map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(RunOutput { report, artifacts: Artifacts { verdicts_csv } })
}
