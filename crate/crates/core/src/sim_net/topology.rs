//! Link parameters and their text configuration.

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::ids::InstanceId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    pub latency_us: u64,
    /// Uniform jitter bound: each delivery is shifted by a draw in
    /// [-jitter, +jitter], never below zero total delay.
    pub jitter_us: u64,
    pub loss: f64,
    pub duplication: f64,
    /// Serialization rate; `None` means unlimited.
    pub bytes_per_sec: Option<u64>,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self { latency_us: 0, jitter_us: 0, loss: 0.0, duplication: 0.0, bytes_per_sec: None }
    }
}

impl LinkParams {
    pub fn with_latency_ms(ms: f64) -> Self {
        Self { latency_us: ms_to_us(ms), ..Self::default() }
    }

    /// Lower bound on the delay of any delivery over this link.
    pub fn min_delay_us(&self) -> u64 {
        self.latency_us.saturating_sub(self.jitter_us)
    }
}

pub fn ms_to_us(ms: f64) -> u64 {
    (ms * 1000.0).round().max(0.0) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub instances: u16,
    pub seed: u64,
    pub default: LinkParams,
    pub links: BTreeMap<(InstanceId, InstanceId), LinkParams>,
}

impl Topology {
    pub fn uniform(instances: u16, link: LinkParams, seed: u64) -> Self {
        Self { instances, seed, default: link, links: BTreeMap::new() }
    }

    pub fn link(&self, src: InstanceId, dst: InstanceId) -> LinkParams {
        self.links.get(&(src, dst)).copied().unwrap_or(self.default)
    }

    pub fn link_mut(&mut self, src: InstanceId, dst: InstanceId) -> &mut LinkParams {
        let default = self.default;
        self.links.entry((src, dst)).or_insert(default)
    }

    pub fn instance_ids(&self) -> impl Iterator<Item = InstanceId> {
        (1..=self.instances).map(InstanceId)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (pair, l) in std::iter::once((None, &self.default)).chain(self.links.iter().map(|(k, v)| (Some(k), v))) {
            for (name, p) in [("loss", l.loss), ("duplication", l.duplication)] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("{name} {p} outside [0, 1] for {pair:?}"));
                }
            }
        }
        Ok(())
    }
}

/// A per-pair quantity: either one number for every pair, or a default with
/// an optional full matrix (row = source, column = destination, instance ids
/// counted from 1) and individual pair overrides.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PairValue {
    Uniform(f64),
    Table {
        #[serde(default)]
        default: f64,
        #[serde(default)]
        matrix: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        pairs: Vec<PairOverride>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairOverride {
    pub src: u16,
    pub dst: u16,
    pub value: f64,
}

impl PairValue {
    fn default_value(&self) -> f64 {
        match self {
            PairValue::Uniform(v) => *v,
            PairValue::Table { default, .. } => *default,
        }
    }

    fn for_each_pair(&self, instances: u16, mut f: impl FnMut(InstanceId, InstanceId, f64)) -> Result<(), String> {
        let PairValue::Table { matrix, pairs, .. } = self else { return Ok(()) };
        if let Some(rows) = matrix {
            if rows.len() != instances as usize || rows.iter().any(|r| r.len() != instances as usize) {
                return Err(format!("matrix must be {instances}x{instances}"));
            }
            for (i, row) in rows.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    if i != j {
                        f(InstanceId(i as u16 + 1), InstanceId(j as u16 + 1), *v);
                    }
                }
            }
        }
        for p in pairs {
            f(InstanceId(p.src), InstanceId(p.dst), p.value);
        }
        Ok(())
    }
}

/// Topology section of an experiment file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub instances: u16,
    #[serde(default)]
    pub seed: u64,
    pub latency_ms: PairValue,
    #[serde(default)]
    pub loss: Option<PairValue>,
    #[serde(default)]
    pub duplication: Option<PairValue>,
    #[serde(default)]
    pub jitter_ms: Option<PairValue>,
    /// Per-pair serialization rate in megabits per second, 0 = unlimited.
    #[serde(default)]
    pub bandwidth_mbps: Option<PairValue>,
}

impl TopologyConfig {
    pub fn build(&self) -> Result<Topology, String> {
        if self.instances == 0 {
            return Err("instances must be at least 1".into());
        }
        let n = self.instances;
        let zero = PairValue::Uniform(0.0);
        let loss = self.loss.as_ref().unwrap_or(&zero);
        let dup = self.duplication.as_ref().unwrap_or(&zero);
        let jitter = self.jitter_ms.as_ref().unwrap_or(&zero);
        let bw = self.bandwidth_mbps.as_ref().unwrap_or(&zero);
        let rate = |mbps: f64| (mbps > 0.0).then(|| (mbps * 1e6 / 8.0) as u64);
        let default = LinkParams {
            latency_us: ms_to_us(self.latency_ms.default_value()),
            jitter_us: ms_to_us(jitter.default_value()),
            loss: loss.default_value(),
            duplication: dup.default_value(),
            bytes_per_sec: rate(bw.default_value()),
        };
        let mut topo = Topology::uniform(n, default, self.seed);
        for (name, value) in [("latency_ms", &self.latency_ms), ("loss", loss), ("duplication", dup), ("jitter_ms", jitter), ("bandwidth_mbps", bw)] {
            let mut err = None;
            value
                .for_each_pair(n, |s, d, v| {
                    if v < 0.0 {
                        err = Some(format!("{name} for {s}->{d} is negative"));
                    }
                    let link = topo.link_mut(s, d);
                    match name {
                        "latency_ms" => link.latency_us = ms_to_us(v),
                        "loss" => link.loss = v,
                        "duplication" => link.duplication = v,
                        "jitter_ms" => link.jitter_us = ms_to_us(v),
                        _ => link.bytes_per_sec = rate(v),
                    }
                })
                .map_err(|e| format!("{name}: {e}"))?;
            if let Some(e) = err {
                return Err(e);
            }
        }
        if self.latency_ms.default_value() < 0.0 {
            return Err("latency_ms default is negative".into());
        }
        topo.validate()?;
        Ok(topo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Topology, String> {
        let cfg: TopologyConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.build()
    }

    #[test]
    fn scalar_and_matrix_forms() {
        let topo = parse(
            r#"
            instances = 3
            seed = 9
            jitter_ms = 0.5
            loss = 0.1
            [latency_ms]
            default = 5.0
            matrix = [[0, 5, 25], [5, 0, 10], [25, 10, 0]]
            [duplication]
            default = 0.0
            pairs = [{ src = 1, dst = 2, value = 0.25 }]
            "#,
        )
        .unwrap();
        assert_eq!(topo.seed, 9);
        assert_eq!(topo.link(InstanceId(1), InstanceId(3)).latency_us, 25_000);
        assert_eq!(topo.link(InstanceId(3), InstanceId(2)).latency_us, 10_000);
        assert_eq!(topo.link(InstanceId(1), InstanceId(2)).duplication, 0.25);
        assert_eq!(topo.link(InstanceId(2), InstanceId(1)).duplication, 0.0);
        assert_eq!(topo.link(InstanceId(2), InstanceId(1)).jitter_us, 500);
        assert_eq!(topo.link(InstanceId(2), InstanceId(1)).loss, 0.1);
        // Ids outside the matrix (later joiners) use the default.
        assert_eq!(topo.link(InstanceId(4), InstanceId(1)).latency_us, 5_000);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(parse("instances = 2\nlatency_ms = 5\nloss = 1.5\n").is_err());
        assert!(parse("instances = 2\nlatency_ms = -1\n").is_err());
        assert!(parse("instances = 2\n[latency_ms]\nmatrix = [[0, 1]]\n").is_err());
        assert!(parse("instances = 0\nlatency_ms = 1\n").is_err());
        assert!(parse("instances = 2\nlatency_ms = 1\nbogus = 3\n").is_err());
    }
}
