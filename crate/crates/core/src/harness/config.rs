//! Experiment files: TOML with `[experiment]`, `[topology]` (or a
//! `topology_file`), `[workload]` and optional per-middlebox sections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::ids::ObjectId;
use crate::middleboxes::{Allocation, IdpsConfig, NatConfig, PortCounters};
use crate::replication::CoalescingMode;
use crate::sim_net::topology::{ms_to_us, Topology, TopologyConfig};
use crate::state_objects::CmsConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ConvergenceFuzz,
    LeakedPackets,
    Coalescing,
    ScaleOut,
    ScaleIn,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ConvergenceFuzz => "convergence-fuzz",
            ExperimentKind::LeakedPackets => "leaked-packets",
            ExperimentKind::Coalescing => "coalescing",
            ExperimentKind::ScaleOut => "scale-out",
            ExperimentKind::ScaleIn => "scale-in",
        }
    }
}

/// Replicated object exercised by the convergence fuzz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FuzzObject {
    PnCounter,
    CounterVector,
    LwwRegister,
    OrSet,
    FlowTable,
    Cbf,
    Cms,
    Nat,
}

impl FuzzObject {
    pub const ALL: [FuzzObject; 8] = [
        FuzzObject::PnCounter,
        FuzzObject::CounterVector,
        FuzzObject::LwwRegister,
        FuzzObject::OrSet,
        FuzzObject::FlowTable,
        FuzzObject::Cbf,
        FuzzObject::Cms,
        FuzzObject::Nat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FuzzObject::PnCounter => "pn-counter",
            FuzzObject::CounterVector => "counter-vector",
            FuzzObject::LwwRegister => "lww-register",
            FuzzObject::OrSet => "or-set",
            FuzzObject::FlowTable => "flow-table",
            FuzzObject::Cbf => "cbf",
            FuzzObject::Cms => "cms",
            FuzzObject::Nat => "nat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiddleboxKind {
    Nat,
    Idps,
    Firewall,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    kind: ExperimentKind,
    #[serde(default = "default_seed")]
    seed: u64,
    duration_ms: f64,
    #[serde(default)]
    output: Option<PathBuf>,
    #[serde(default)]
    topology_file: Option<PathBuf>,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadSection {
    #[serde(default)]
    middlebox: Option<MiddleboxKind>,
    #[serde(default)]
    object: Option<FuzzObject>,
    #[serde(default)]
    ops_per_instance: Option<u32>,
    #[serde(default)]
    flows_per_sec: Option<f64>,
    #[serde(default)]
    packets_per_flow: Option<u32>,
    #[serde(default)]
    packet_rate: Option<f64>,
    #[serde(default)]
    packet_bytes: Option<u32>,
    #[serde(default)]
    increments: Option<u32>,
    #[serde(default)]
    jitter_frac: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum CoalescingName {
    Off,
    On,
    Adaptive,
    Forced,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReplicationSection {
    #[serde(default)]
    coalescing: Option<CoalescingName>,
    #[serde(default)]
    window: Option<u32>,
    #[serde(default)]
    send_interval_us: Option<u64>,
    #[serde(default)]
    max_lookahead: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum CounterName {
    Exact,
    Sketch,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdpsSection {
    #[serde(default)]
    threshold_bits: Option<u64>,
    #[serde(default)]
    counters: Option<CounterName>,
    #[serde(default)]
    sketch_arrays: Option<u32>,
    #[serde(default)]
    sketch_counters: Option<usize>,
    #[serde(default)]
    target_port: Option<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum AllocationName {
    Lowest,
    Leased,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NatSection {
    #[serde(default)]
    first_port: Option<u16>,
    #[serde(default)]
    ports: Option<u16>,
    #[serde(default)]
    allocation: Option<AllocationName>,
    #[serde(default)]
    lease_slots: Option<u16>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScalingSection {
    #[serde(default)]
    at_ms: Option<f64>,
    #[serde(default)]
    donor: Option<u16>,
    #[serde(default)]
    victim: Option<u16>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CongestionSection {
    #[serde(default)]
    start_ms: Option<f64>,
    #[serde(default)]
    ramp_ms: Option<f64>,
    #[serde(default)]
    peak_latency_ms: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    experiment: ExperimentSection,
    #[serde(default)]
    topology: Option<TopologyConfig>,
    #[serde(default)]
    workload: WorkloadSection,
    #[serde(default)]
    replication: ReplicationSection,
    #[serde(default)]
    idps: IdpsSection,
    #[serde(default)]
    nat: NatSection,
    #[serde(default)]
    scaling: ScalingSection,
    #[serde(default)]
    congestion: CongestionSection,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Packet workload for the middlebox experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficConfig {
    /// New flows per second at each serving instance.
    pub flows_per_sec: f64,
    pub packets_per_flow: u32,
    /// Aggregate packets per second (IDPS trace).
    pub packet_rate: f64,
    pub packet_bytes: u32,
    /// Relative jitter on inter-arrival gaps, in [0, 1).
    pub jitter_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CongestionScript {
    pub start_us: u64,
    pub ramp_us: u64,
    pub peak_latency_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingConfig {
    pub at_us: u64,
    pub donor: Option<u16>,
    pub victim: Option<u16>,
}

/// Fully resolved experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub duration_us: u64,
    pub output: Option<PathBuf>,
    pub topology: Topology,
    pub coalescing: CoalescingMode,
    pub send_interval_us: u64,
    pub max_lookahead: Option<u32>,
    pub middlebox: Option<MiddleboxKind>,
    pub object: FuzzObject,
    pub ops_per_instance: u32,
    pub increments: u32,
    pub traffic: TrafficConfig,
    pub idps: IdpsConfig,
    pub idps_target_port: u16,
    pub nat: NatConfig,
    pub scaling: ScalingConfig,
    pub congestion: CongestionScript,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), path)
    }

    /// Parses experiment TOML; relative `topology_file` paths resolve
    /// against `base`.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self, ConfigError> {
        let file: ExperimentFile =
            toml::from_str(text).map_err(|source| ConfigError::Parse { path: origin.into(), source })?;
        let topology_cfg = match (&file.topology, &file.experiment.topology_file) {
            (Some(t), None) => t.clone(),
            (None, Some(p)) => {
                let path = base.join(p);
                let text = fs::read_to_string(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                #[derive(Deserialize)]
                struct Wrapper {
                    topology: TopologyConfig,
                }
                toml::from_str::<Wrapper>(&text).map_err(|source| ConfigError::Parse { path, source })?.topology
            }
            (Some(_), Some(_)) => return Err(invalid("give either [topology] or topology_file, not both")),
            (None, None) => return Err(invalid("missing [topology] section")),
        };
        let topology = topology_cfg.build().map_err(ConfigError::Invalid)?;
        Self::resolve(file, topology)
    }

    fn resolve(file: ExperimentFile, topology: Topology) -> Result<Self, ConfigError> {
        let e = &file.experiment;
        // Also rejects NaN.
        if e.duration_ms.is_nan() || e.duration_ms <= 0.0 {
            return Err(invalid("duration_ms must be positive"));
        }
        let w = &file.workload;
        let positive = |name: &str, v: Option<f64>, default: f64| -> Result<f64, ConfigError> {
            let v = v.unwrap_or(default);
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(invalid(format!("{name} must be positive")))
            }
        };
        let traffic = TrafficConfig {
            flows_per_sec: positive("flows_per_sec", w.flows_per_sec, 2000.0)?,
            packets_per_flow: w.packets_per_flow.unwrap_or(4).max(1),
            packet_rate: positive("packet_rate", w.packet_rate, 50_000.0)?,
            packet_bytes: w.packet_bytes.unwrap_or(500),
            jitter_frac: w.jitter_frac.unwrap_or(0.2),
        };
        if traffic.packet_bytes < crate::middleboxes::packet::MIN_PACKET_LEN {
            return Err(invalid("packet_bytes is below the header size"));
        }
        if !(0.0..1.0).contains(&traffic.jitter_frac) {
            return Err(invalid("jitter_frac must be in [0, 1)"));
        }
        let ops_per_instance = w.ops_per_instance.unwrap_or(1000);
        if ops_per_instance == 0 {
            return Err(invalid("ops_per_instance must be positive"));
        }
        let r = &file.replication;
        let coalescing = match r.coalescing.unwrap_or(CoalescingName::Adaptive) {
            CoalescingName::Off => CoalescingMode::Off,
            CoalescingName::On | CoalescingName::Adaptive => CoalescingMode::Adaptive,
            CoalescingName::Forced => CoalescingMode::Forced { window: r.window.unwrap_or(1024).max(1) },
        };
        let send_interval_us = r.send_interval_us.unwrap_or(1000);
        if send_interval_us == 0 {
            return Err(invalid("send_interval_us must be positive"));
        }

        let i = &file.idps;
        let counters = match i.counters.unwrap_or(CounterName::Exact) {
            CounterName::Exact => PortCounters::Exact,
            CounterName::Sketch => PortCounters::Sketch(CmsConfig {
                arrays: i.sketch_arrays.unwrap_or(4),
                counters_per_array: i.sketch_counters.unwrap_or(1024),
                seed: 0x1d95,
            }),
        };
        let duration_us = ms_to_us(e.duration_ms);
        // Default threshold: aggregate volume crosses halfway through the run.
        let half_run_bits = traffic.packet_rate * (duration_us as f64 / 2e6) * traffic.packet_bytes as f64 * 8.0;
        let idps = IdpsConfig {
            threshold_bits: i.threshold_bits.unwrap_or(half_run_bits.round().max(1.0) as u64),
            counters,
            ..IdpsConfig::default()
        };

        let n = &file.nat;
        let allocation = match n.allocation.unwrap_or(AllocationName::Lowest) {
            AllocationName::Lowest => Allocation::Lowest,
            AllocationName::Leased => Allocation::Leased { slots: n.lease_slots.unwrap_or(topology.instances).max(1) },
        };
        let nat = NatConfig {
            object: ObjectId(10),
            first_port: n.first_port.unwrap_or(1024),
            ports: n.ports.unwrap_or(16384),
            allocation,
        };
        if nat.ports == 0 || nat.first_port.checked_add(nat.ports - 1).is_none() {
            return Err(invalid("nat port range is empty or overflows"));
        }

        let s = &file.scaling;
        let scaling = ScalingConfig { at_us: ms_to_us(s.at_ms.unwrap_or(e.duration_ms / 3.0)), donor: s.donor, victim: s.victim };
        let c = &file.congestion;
        let congestion = CongestionScript {
            start_us: ms_to_us(c.start_ms.unwrap_or(20.0)),
            ramp_us: ms_to_us(c.ramp_ms.unwrap_or(200.0)),
            peak_latency_us: ms_to_us(c.peak_latency_ms.unwrap_or(200.0)),
        };

        let cfg = ExperimentConfig {
            kind: e.kind,
            seed: e.seed,
            duration_us,
            output: e.output.clone(),
            topology,
            coalescing,
            send_interval_us,
            max_lookahead: r.max_lookahead,
            middlebox: w.middlebox,
            object: w.object.unwrap_or(FuzzObject::PnCounter),
            ops_per_instance,
            increments: w.increments.unwrap_or(10_000),
            traffic,
            idps,
            idps_target_port: i.target_port.unwrap_or(8080),
            nat,
            scaling,
            congestion,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let n = self.topology.instances;
        match self.kind {
            ExperimentKind::ScaleOut | ExperimentKind::ScaleIn if n < 2 => {
                return Err(invalid("scaling experiments need at least 2 instances"));
            }
            ExperimentKind::Coalescing if n < 2 => return Err(invalid("coalescing needs at least 2 instances")),
            _ => {}
        }
        for (what, id) in [("donor", self.scaling.donor), ("victim", self.scaling.victim)] {
            if let Some(id) = id {
                if id == 0 || id > n {
                    return Err(invalid(format!("{what} {id} is not an instance")));
                }
            }
        }
        if matches!(self.kind, ExperimentKind::ScaleOut | ExperimentKind::ScaleIn) && self.scaling.at_us >= self.duration_us {
            return Err(invalid("scaling event must happen before the run ends"));
        }
        Ok(())
    }
}
