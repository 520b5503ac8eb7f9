//! Per-peer RTT estimation, congestion detection and lookahead sizing.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RttConfig {
    /// EWMA smoothing weight given to each new sample.
    pub alpha: f64,
    /// Congested when ewma > min * threshold_factor.
    pub threshold_factor: f64,
    /// Fraction below the threshold the ewma must fall to clear congestion.
    pub hysteresis: f64,
    pub min_samples: u64,
    pub max_lookahead: u32,
}

impl Default for RttConfig {
    fn default() -> Self {
        Self { alpha: 0.125, threshold_factor: 2.0, hysteresis: 0.1, min_samples: 3, max_lookahead: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeerRttStats {
    pub samples: u64,
    pub min_rtt: u64,
    pub ewma_rtt: f64,
    pub congested: bool,
    pub lookahead_window: u32,
}

impl Default for PeerRttStats {
    fn default() -> Self {
        Self { samples: 0, min_rtt: u64::MAX, ewma_rtt: 0.0, congested: false, lookahead_window: 1 }
    }
}

impl PeerRttStats {
    /// Folds in one RTT sample (microseconds), re-evaluates congestion and
    /// grows the lookahead window if the average is still rising.
    pub fn record_sample(&mut self, rtt_us: u64, cfg: &RttConfig) {
        let previous = self.ewma_rtt;
        if self.samples == 0 {
            self.ewma_rtt = rtt_us as f64;
        } else {
            self.ewma_rtt += cfg.alpha * (rtt_us as f64 - self.ewma_rtt);
        }
        self.samples += 1;
        self.min_rtt = self.min_rtt.min(rtt_us);
        let was_congested = self.congested;
        self.detect_congestion(cfg);
        if self.congested && was_congested && self.ewma_rtt > previous {
            self.adjust_lookahead(cfg);
        }
    }

    pub fn detect_congestion(&mut self, cfg: &RttConfig) -> bool {
        if self.samples < cfg.min_samples {
            self.congested = false;
        } else {
            let threshold = self.min_rtt as f64 * cfg.threshold_factor;
            if self.ewma_rtt > threshold {
                self.congested = true;
            } else if self.ewma_rtt < threshold * (1.0 - cfg.hysteresis) {
                self.congested = false;
            }
        }
        if !self.congested {
            self.lookahead_window = 1;
        }
        self.congested
    }

    /// Doubles the window up to the cap.
    pub fn adjust_lookahead(&mut self, cfg: &RttConfig) -> u32 {
        if self.congested {
            self.lookahead_window = self.lookahead_window.saturating_mul(2).min(cfg.max_lookahead).max(1);
        } else {
            self.lookahead_window = 1;
        }
        self.lookahead_window
    }

    /// An ack released a batch of `flushed` records before the window filled:
    /// halve the window, but not below what was actually flushed.
    pub fn on_early_ack(&mut self, flushed: u64) {
        if self.congested {
            let floor = flushed.min(self.lookahead_window as u64) as u32;
            self.lookahead_window = (self.lookahead_window / 2).max(floor).max(1);
        }
    }

    pub fn ewma_us(&self) -> Option<u64> {
        (self.samples > 0).then(|| self.ewma_rtt.round() as u64)
    }
}
