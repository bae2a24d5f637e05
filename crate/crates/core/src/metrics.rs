//! Run metrics and their CSV rendering.
//!
//! Four files are written per run, all with `\n` line endings and a fixed
//! column order:
//!
//! | file           | columns                   |
//! |----------------|---------------------------|
//! | `summary.csv`  | `metric,value`            |
//! | `replicas.csv` | `time,chunk_id,count`     |
//! | `hops.csv`     | `hops,frequency`          |
//! | `load.csv`     | `peer_id,served,stored`   |
//!
//! Floating point values are printed with six decimals (times in
//! `replicas.csv` with three) so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::stream::ChunkId;
use crate::workload::PeerId;

/// Upper bounds, in seconds, of the startup-delay histogram buckets. A last
/// open bucket collects everything above the final bound.
pub const STARTUP_BUCKETS: [f64; 6] = [1.0, 2.0, 5.0, 10.0, 30.0, 60.0];

pub const LAG_DECILES: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PeerLoad {
    pub served: u64,
    pub stored: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DecileStat {
    pub requests: u64,
    pub buffer_sum: f64,
    pub buffer_samples: u64,
}

impl DecileStat {
    pub fn mean_buffer(&self) -> Option<f64> {
        (self.buffer_samples > 0).then(|| self.buffer_sum / self.buffer_samples as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub chunks_produced: u64,
    pub requests: u64,
    pub served: u64,
    pub missing: u64,
    pub failed: u64,
    pub archive_served: u64,
    pub permanent_losses: u64,
    pub hops: BTreeMap<u32, u64>,
    pub startup_hist: [u64; STARTUP_BUCKETS.len() + 1],
    pub startup_sum: f64,
    pub producer_upload_bytes: u64,
    pub peer_upload_bytes: u64,
    pub control_messages: u64,
    pub dropped_messages: u64,
    pub producer_retained: u64,
    pub handoffs: u64,
    pub stale_handoffs: u64,
    pub coverage_samples: u64,
    pub coverage_incident_samples: u64,
    pub coverage_incidents: u64,
    pub coloring_gaps: u64,
    pub domination_samples: u64,
    pub domination_violations: u64,
    pub summary_overhead_bytes: u64,
    pub emergency_rounds: u64,
    pub emergency_restored: u64,
    pub replica_deficits: u64,
    pub routing_detours: u64,
    pub recolorings: u64,
    pub pin_drops: u64,
    pub replica_rows: Vec<(f64, ChunkId, u32)>,
    pub load: BTreeMap<PeerId, PeerLoad>,
    pub lag_deciles: [DecileStat; LAG_DECILES],
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

impl MetricsReport {
    pub fn record_hops(&mut self, hops: u32) {
        *self.hops.entry(hops).or_default() += 1;
    }

    pub fn record_startup(&mut self, delay: f64) {
        let bucket = STARTUP_BUCKETS
            .iter()
            .position(|&b| delay <= b)
            .unwrap_or(STARTUP_BUCKETS.len());
        self.startup_hist[bucket] += 1;
        self.startup_sum += delay;
    }

    pub fn startup_samples(&self) -> u64 {
        self.startup_hist.iter().sum()
    }

    /// Fraction of playback requests the overlay served.
    pub fn availability_ratio(&self) -> f64 {
        ratio(self.served as f64, self.requests as f64)
    }

    /// Share of all chunk bytes moved during the run that peers uploaded
    /// instead of the producer.
    pub fn producer_offload(&self) -> f64 {
        let total = self.producer_upload_bytes + self.peer_upload_bytes;
        ratio(self.peer_upload_bytes as f64, total as f64)
    }

    pub fn coverage_incident_fraction(&self) -> f64 {
        ratio(self.coverage_incident_samples as f64, self.coverage_samples as f64)
    }

    pub fn domination_violation_rate(&self) -> f64 {
        ratio(self.domination_violations as f64, self.domination_samples as f64)
    }

    /// Mean buffer length in the lag deciles with the most and the fewest
    /// playback requests, skipping deciles nobody played in.
    pub fn buffer_by_popularity(&self) -> Option<(f64, f64)> {
        let used: Vec<&DecileStat> = self
            .lag_deciles
            .iter()
            .filter(|d| d.requests > 0 && d.buffer_samples > 0)
            .collect();
        let most = used.iter().max_by_key(|d| d.requests)?;
        let least = used.iter().min_by_key(|d| d.requests)?;
        Some((most.mean_buffer()?, least.mean_buffer()?))
    }

    /// Internal consistency of the counters.
    pub fn check(&self) -> Result<(), String> {
        if self.served > self.requests {
            return Err(format!("served {} > requested {}", self.served, self.requests));
        }
        if self.served + self.missing + self.failed > self.requests {
            return Err("request outcomes exceed requests".into());
        }
        let a = self.availability_ratio();
        if !(0.0..=1.0).contains(&a) {
            return Err(format!("availability {a} outside [0,1]"));
        }
        Ok(())
    }

    pub fn summary_rows(&self) -> Vec<(String, String)> {
        let mut rows: Vec<(String, String)> = Vec::new();
        let mut int = |name: &str, v: u64| rows.push((name.to_string(), v.to_string()));
        int("chunks_produced", self.chunks_produced);
        int("requests", self.requests);
        int("served", self.served);
        int("missing", self.missing);
        int("failed", self.failed);
        int("archive_served", self.archive_served);
        int("permanent_losses", self.permanent_losses);
        int("producer_upload_bytes", self.producer_upload_bytes);
        int("peer_upload_bytes", self.peer_upload_bytes);
        int("control_messages", self.control_messages);
        int("dropped_messages", self.dropped_messages);
        int("producer_retained", self.producer_retained);
        int("handoffs", self.handoffs);
        int("stale_handoffs", self.stale_handoffs);
        int("coverage_samples", self.coverage_samples);
        int("coverage_incident_samples", self.coverage_incident_samples);
        int("coverage_incidents", self.coverage_incidents);
        int("coloring_gaps", self.coloring_gaps);
        int("domination_samples", self.domination_samples);
        int("domination_violations", self.domination_violations);
        int("summary_overhead_bytes", self.summary_overhead_bytes);
        int("emergency_rounds", self.emergency_rounds);
        int("emergency_restored", self.emergency_restored);
        int("replica_deficits", self.replica_deficits);
        int("routing_detours", self.routing_detours);
        int("recolorings", self.recolorings);
        int("pin_drops", self.pin_drops);
        int("startup_samples", self.startup_samples());
        for (i, bound) in STARTUP_BUCKETS.iter().enumerate() {
            int(&format!("startup_delay_le_{bound}s"), self.startup_hist[i]);
        }
        int(
            &format!("startup_delay_gt_{}s", STARTUP_BUCKETS[STARTUP_BUCKETS.len() - 1]),
            self.startup_hist[STARTUP_BUCKETS.len()],
        );
        for (i, d) in self.lag_deciles.iter().enumerate() {
            int(&format!("lag_decile_{i}_requests"), d.requests);
        }
        let mut float = |name: &str, v: f64| rows.push((name.to_string(), format!("{v:.6}")));
        float("availability_ratio", self.availability_ratio());
        float("producer_offload", self.producer_offload());
        float("coverage_incident_fraction", self.coverage_incident_fraction());
        float("domination_violation_rate", self.domination_violation_rate());
        float(
            "startup_delay_mean",
            ratio(self.startup_sum, self.startup_samples() as f64),
        );
        for (i, d) in self.lag_deciles.iter().enumerate() {
            float(&format!("lag_decile_{i}_mean_buffer"), d.mean_buffer().unwrap_or(0.0));
        }
        rows
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.summary_rows() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }

    pub fn replicas_csv(&self) -> String {
        let mut out = String::from("time,chunk_id,count\n");
        for (t, c, n) in &self.replica_rows {
            let _ = writeln!(out, "{t:.3},{c},{n}");
        }
        out
    }

    pub fn hops_csv(&self) -> String {
        let mut out = String::from("hops,frequency\n");
        for (h, f) in &self.hops {
            let _ = writeln!(out, "{h},{f}");
        }
        out
    }

    pub fn load_csv(&self) -> String {
        let mut out = String::from("peer_id,served,stored\n");
        for (p, l) in &self.load {
            let _ = writeln!(out, "{p},{},{}", l.served, l.stored);
        }
        out
    }
}

pub const REPORT_FILES: [&str; 4] = ["summary.csv", "replicas.csv", "hops.csv", "load.csv"];

/// Creates `dir` and probes that files can be written there, so a bad
/// output path fails before any simulation time is spent.
pub fn prepare_output(dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".tssim-write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(probe)
}

pub fn emit_report(report: &MetricsReport, dir: &Path) -> io::Result<()> {
    prepare_output(dir)?;
    fs::write(dir.join("summary.csv"), report.summary_csv())?;
    fs::write(dir.join("replicas.csv"), report.replicas_csv())?;
    fs::write(dir.join("hops.csv"), report.hops_csv())?;
    fs::write(dir.join("load.csv"), report.load_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_has_headers_and_zeros() {
        let r = MetricsReport::default();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&r, dir.path()).unwrap();
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.starts_with("metric,value\n"));
        for line in summary.lines().skip(1) {
            let value: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert_eq!(value, 0.0, "{line}");
        }
        for (file, header) in [
            ("replicas.csv", "time,chunk_id,count\n"),
            ("hops.csv", "hops,frequency\n"),
            ("load.csv", "peer_id,served,stored\n"),
        ] {
            assert_eq!(fs::read_to_string(dir.path().join(file)).unwrap(), header);
        }
    }

    #[test]
    fn ratios_stay_in_range() {
        let r = MetricsReport {
            requests: 10,
            served: 7,
            missing: 3,
            producer_upload_bytes: 1,
            peer_upload_bytes: 3,
            ..Default::default()
        };
        r.check().unwrap();
        assert_eq!(r.availability_ratio(), 0.7);
        assert_eq!(r.producer_offload(), 0.75);
        assert!(r.summary_csv().contains("availability_ratio,0.700000\n"));
        let bad = MetricsReport {
            requests: 1,
            served: 2,
            ..Default::default()
        };
        assert!(bad.check().is_err());
    }

    #[test]
    fn startup_buckets() {
        let mut r = MetricsReport::default();
        for d in [0.5, 1.0, 1.5, 59.0, 61.0] {
            r.record_startup(d);
        }
        assert_eq!(r.startup_hist, [2, 1, 0, 0, 0, 1, 1]);
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain-file");
        fs::write(&file, b"x").unwrap();
        assert!(prepare_output(&file.join("sub")).is_err());
    }
}
