//! Metrics report: a JSON summary plus CSV tables.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::replication::ReplicationStats;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Throughput {
    pub bucket_us: u64,
    /// Passed packets per bucket, keyed by instance id.
    pub per_instance: BTreeMap<u16, Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSummary {
    pub src: u16,
    pub dst: u16,
    pub sent: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub delivered: u64,
    pub delivered_bytes: u64,
    pub mean_latency_us: f64,
    pub max_latency_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakedReport {
    pub threshold_bits: u64,
    pub crossing_us: Option<u64>,
    pub measured: BTreeMap<u16, u64>,
    pub expected: BTreeMap<u16, u64>,
    pub measured_total: u64,
    pub expected_total: u64,
    /// Leaked packets by whole milliseconds after the crossing.
    pub histogram: BTreeMap<u64, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoalescingReport {
    pub mode: String,
    pub bytes_coalesced: u64,
    pub bytes_uncoalesced: u64,
    pub ratio: f64,
    pub records_sent_coalesced: u64,
    pub records_sent_uncoalesced: u64,
    pub records_coalesced_away: u64,
    pub states_equal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JoinSummary {
    pub joiner: u16,
    pub donor: u16,
    pub started_us: u64,
    pub completed_us: Option<u64>,
    pub confirmed_us: Option<u64>,
    pub restored_us: Option<u64>,
    pub aborted: Option<String>,
    pub snapshot_bytes: u64,
    pub snapshot_requests: u32,
    pub donor_switches: u32,
    pub buffered_records: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PauseSummary {
    pub donor: u16,
    pub joiner: u16,
    pub started_us: u64,
    pub ended_us: u64,
    pub pause_us: u64,
    /// Copy cost of the snapshot bytes the joiner received.
    pub copy_window_us: u64,
    pub snapshot_bytes: u64,
    pub donor_verdicts_during_pause: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeaveSummary {
    pub victim: u16,
    pub started_us: u64,
    pub drain_started_us: Option<u64>,
    pub drained_us: Option<u64>,
    pub completed_us: Option<u64>,
    /// Time from the start of draining to an empty log.
    pub drain_us: Option<u64>,
    pub victim_records: u64,
    pub victim_records_missing: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScalingReport {
    pub joins: Vec<JoinSummary>,
    pub pauses: Vec<PauseSummary>,
    pub leaves: Vec<LeaveSummary>,
    pub final_epoch: u64,
    pub views_agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NatReport {
    pub collisions_at_convergence: u64,
    pub owners_follow_tuple_order: bool,
    pub reset_verdicts: u64,
    pub mapped_flows: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub seed: u64,
    pub instances: u16,
    pub duration_us: u64,
    pub end_us: u64,
    pub quiesced: bool,
    pub converged: bool,
    pub lost_records: u64,
    pub checks: BTreeMap<String, bool>,
    pub failures: Vec<String>,
    pub throughput: Throughput,
    pub replication_bytes: BTreeMap<String, u64>,
    pub total_replication_bytes: u64,
    pub pairs: Vec<PairSummary>,
    pub replication: BTreeMap<u16, ReplicationStats>,
    pub verdicts: BTreeMap<String, u64>,
    pub rejected_ops: u64,
    pub leaked: Option<LeakedReport>,
    pub coalescing: Option<CoalescingReport>,
    pub scaling: Option<ScalingReport>,
    pub nat: Option<NatReport>,
    pub trace_digest: String,
}

/// CSV artifacts that accompany a report.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub verdicts_csv: Vec<u8>,
}

impl MetricsReport {
    pub fn all_checks_pass(&self) -> bool {
        self.checks.values().all(|ok| *ok) && self.failures.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    fn throughput_csv(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bucket_start_us", "instance", "passed"])?;
        for (inst, buckets) in &self.throughput.per_instance {
            for (i, n) in buckets.iter().enumerate() {
                w.write_record([(i as u64 * self.throughput.bucket_us).to_string(), inst.to_string(), n.to_string()])?;
            }
        }
        w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
    }

    fn pairs_csv(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.pairs {
            w.serialize(p)?;
        }
        w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
    }

    fn leaked_csv(&self) -> Result<Option<Vec<u8>>, csv::Error> {
        let Some(l) = &self.leaked else { return Ok(None) };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["ms_after_crossing", "leaked"])?;
        for (ms, n) in &l.histogram {
            w.write_record([ms.to_string(), n.to_string()])?;
        }
        w.into_inner().map(Some).map_err(|e| csv::Error::from(e.into_error()))
    }

    /// Writes `report.json`, `throughput.csv`, `pairs.csv`, `verdicts.csv`
    /// and, for leak runs, `leaked.csv` into `dir`.
    pub fn write_to(&self, dir: &Path, artifacts: &Artifacts) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let csv_err = |e: csv::Error| io::Error::other(e.to_string());
        fs::write(dir.join("report.json"), self.to_json() + "\n")?;
        fs::write(dir.join("throughput.csv"), self.throughput_csv().map_err(csv_err)?)?;
        fs::write(dir.join("pairs.csv"), self.pairs_csv().map_err(csv_err)?)?;
        fs::write(dir.join("verdicts.csv"), &artifacts.verdicts_csv)?;
        if let Some(bytes) = self.leaked_csv().map_err(csv_err)? {
            fs::write(dir.join("leaked.csv"), bytes)?;
        }
        Ok(())
    }
}
