//! Scenario files: flat `key = value` lines, `#` starts a comment.
//!
//! Every key except `horizon` has a default. Unknown keys, duplicates and
//! out-of-range values are all reported together, each with its line.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use crate::engine::{EngineParams, OverlayKind};
use crate::interval::overlay::IntervalParams;
use crate::stream::StreamParams;
use crate::turntable::mesh::MeshParams;
use crate::turntable::summary::SummaryMode;
use crate::turntable::tree::TreeParams;
use crate::turntable::TurntableParams;
use crate::workload::BehaviorParams;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub stream: StreamParams,
    pub show_length: f64,
    pub behavior: BehaviorParams,
    pub engine: EngineParams,
    pub turntable: TurntableParams,
    pub tree: TreeParams,
    pub mesh: MeshParams,
    pub domination_threshold: f64,
    pub interval: IntervalParams,
    pub horizon: f64,
    pub seed: u64,
    pub overlay: OverlayKind,
}

impl ScenarioConfig {
    /// Defaults for everything, with the given horizon.
    pub fn with_horizon(horizon: f64) -> Self {
        Self {
            stream: StreamParams::default(),
            show_length: 1800.0,
            behavior: BehaviorParams::default(),
            engine: EngineParams::default(),
            turntable: TurntableParams::default(),
            tree: TreeParams::default(),
            mesh: MeshParams::default(),
            domination_threshold: 0.05,
            interval: IntervalParams::default(),
            horizon,
            seed: 0,
            overlay: OverlayKind::Tree,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

fn float(key: &str, v: &str, lo: f64, hi: f64, open_lo: bool) -> Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("{key}: expected a number, got `{v}`"))?;
    let below = if open_lo { x <= lo } else { x < lo };
    if x.is_nan() || below || x > hi {
        let left = if open_lo { "(" } else { "[" };
        return Err(format!("{key}: {x} outside {left}{lo}, {hi}]"));
    }
    Ok(x)
}

fn int(key: &str, v: &str, lo: u64, hi: u64) -> Result<u64, String> {
    let x: i128 = v.parse().map_err(|_| format!("{key}: expected an integer, got `{v}`"))?;
    if x < lo as i128 || x > hi as i128 {
        return Err(format!("{key}: {x} outside [{lo}, {hi}]"));
    }
    Ok(x as u64)
}

fn boolean(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got `{v}`")),
    }
}

const INF: f64 = f64::INFINITY;
const U32: u64 = u32::MAX as u64;

/// Every recognised key, in rendering order.
pub const KEYS: &[&str] = &[
    "bitrate_bps",
    "chunk_size_bytes",
    "start_time",
    "show_length",
    "zipf_exponent",
    "early_quit_fraction",
    "early_quit_window",
    "show_end_leave_prob",
    "vcr_rate",
    "arrival_rate",
    "live_join_prob",
    "pause_mean",
    "popularity_session_bias",
    "abrupt_leave_prob",
    "hop_latency",
    "default_cap",
    "cap_spread",
    "storage_chunks",
    "peer_upload_bps",
    "producer_upload_bps",
    "producer_archive",
    "sample_period",
    "seed",
    "horizon",
    "overlay",
    "m",
    "representants",
    "k_rep",
    "k_min",
    "fanout",
    "summary_mode",
    "bloom_bits",
    "bloom_hashes",
    "colors",
    "gossip_period",
    "max_degree",
    "request_ttl",
    "domination_threshold",
    "k",
    "horizon_T",
    "dedicated_server",
    "fill_budget",
    "resweep_period",
];

fn apply(c: &mut ScenarioConfig, key: &str, v: &str) -> Result<(), String> {
    let b = &mut c.behavior;
    let e = &mut c.engine;
    match key {
        "bitrate_bps" => c.stream.bitrate_bps = float(key, v, 0.0, INF, true)?,
        "chunk_size_bytes" => c.stream.chunk_size_bytes = int(key, v, 1, u64::MAX)?,
        "start_time" => c.stream.start_time = float(key, v, -1e12, 1e12, false)?,
        "show_length" => c.show_length = float(key, v, 0.0, 1e12, true)?,
        "zipf_exponent" => b.zipf_exponent = float(key, v, 0.0, 1e6, true)?,
        "early_quit_fraction" => b.early_quit_fraction = float(key, v, 0.0, 1.0, false)?,
        "early_quit_window" => b.early_quit_window = float(key, v, 0.0, 1e12, false)?,
        "show_end_leave_prob" => b.show_end_leave_prob = float(key, v, 0.0, 1.0, false)?,
        "vcr_rate" => b.vcr_rate = float(key, v, 0.0, 1e6, false)?,
        "arrival_rate" => b.arrival_rate = float(key, v, 0.0, 1e6, false)?,
        "live_join_prob" => b.live_join_prob = float(key, v, 0.0, 1.0, false)?,
        "pause_mean" => b.pause_mean = float(key, v, 0.0, 1e12, false)?,
        "popularity_session_bias" => b.popularity_session_bias = float(key, v, -1.0, 1.0, false)?,
        "abrupt_leave_prob" => e.abrupt_leave_prob = float(key, v, 0.0, 1.0, false)?,
        "hop_latency" => e.hop_latency = float(key, v, 0.0, 1e6, false)?,
        "default_cap" => e.default_cap = int(key, v, 0, 1 << 16)? as u32,
        "cap_spread" => e.cap_spread = int(key, v, 0, 1 << 16)? as u32,
        "storage_chunks" => e.storage_chunks = int(key, v, 1, U32)? as u32,
        "peer_upload_bps" => e.peer_upload_bps = float(key, v, 0.0, INF, true)?,
        "producer_upload_bps" => e.producer_upload_bps = float(key, v, 0.0, INF, true)?,
        "producer_archive" => e.producer_archive = boolean(key, v)?,
        "sample_period" => e.sample_period = float(key, v, 0.0, 1e12, false)?,
        "seed" => c.seed = int(key, v, 0, u64::MAX)?,
        "horizon" => c.horizon = float(key, v, 0.0, 1e12, false)?,
        "overlay" => c.overlay = v.parse().map_err(|e: String| format!("overlay: {e}"))?,
        "m" => c.turntable.m = int(key, v, 1, 1 << 20)? as usize,
        "representants" => c.turntable.representants = int(key, v, 1, 1 << 20)? as usize,
        "k_rep" => c.turntable.k_rep = int(key, v, 1, 1 << 20)? as usize,
        "k_min" => c.turntable.k_min = int(key, v, 1, 1 << 20)? as usize,
        "fanout" => c.tree.fanout = int(key, v, 1, 1 << 20)? as usize,
        "summary_mode" => {
            c.tree.mode = match (v, c.tree.mode) {
                ("exact", _) => SummaryMode::Exact,
                ("bloom", SummaryMode::Bloom { bits, hashes }) => SummaryMode::Bloom { bits, hashes },
                ("bloom", SummaryMode::Exact) => SummaryMode::Bloom { bits: 1024, hashes: 3 },
                _ => return Err(format!("summary_mode: expected exact or bloom, got `{v}`")),
            }
        }
        "bloom_bits" | "bloom_hashes" => {
            let x = if key == "bloom_bits" { int(key, v, 8, 1 << 24)? } else { int(key, v, 1, 64)? };
            c.tree.mode = match (c.tree.mode, key) {
                (SummaryMode::Bloom { hashes, .. }, "bloom_bits") => SummaryMode::Bloom { bits: x as usize, hashes },
                (SummaryMode::Bloom { bits, .. }, _) => SummaryMode::Bloom { bits, hashes: x as u32 },
                (SummaryMode::Exact, _) => SummaryMode::Exact,
            };
        }
        "colors" => c.mesh.colors = int(key, v, 1, 1 << 10)? as usize,
        "gossip_period" => c.mesh.gossip_period = float(key, v, 0.0, 1e12, true)?,
        "max_degree" => c.mesh.max_degree = int(key, v, 1, 1 << 16)? as usize,
        "request_ttl" => c.mesh.request_ttl = int(key, v, 0, 1 << 16)? as u32,
        "domination_threshold" => c.domination_threshold = float(key, v, 0.0, 1.0, false)?,
        "k" => c.interval.k = int(key, v, 1, 1 << 16)? as u32,
        "horizon_T" => c.interval.horizon_t = int(key, v, 0, 1 << 32)?,
        "dedicated_server" => c.interval.dedicated_server = boolean(key, v)?,
        "fill_budget" => c.interval.fill_budget = int(key, v, 0, 1 << 16)? as u32,
        "resweep_period" => c.interval.resweep_period = float(key, v, 0.0, 1e12, false)?,
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigErrors> {
    let mut errors = Vec::new();
    let mut entries: Vec<(usize, &str, &str)> = Vec::new();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            errors.push(ConfigError {
                line: Some(line),
                message: format!("expected `key = value`, got `{body}`"),
            });
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        if let Some(first) = seen.get(k) {
            errors.push(ConfigError {
                line: Some(line),
                message: format!("duplicate key `{k}` (lines {first} and {line})"),
            });
            continue;
        }
        seen.insert(k, line);
        entries.push((line, k, v));
    }
    // the summary mode decides how bloom keys are read
    entries.sort_by_key(|&(line, k, _)| (k != "summary_mode", line));
    let mut cfg = ScenarioConfig::with_horizon(0.0);
    for (line, k, v) in entries {
        if let Err(message) = apply(&mut cfg, k, v) {
            errors.push(ConfigError { line: Some(line), message });
        }
    }
    if !seen.contains_key("horizon") {
        errors.push(ConfigError {
            line: None,
            message: "missing required key `horizon`".into(),
        });
    }
    if cfg.turntable.k_min > cfg.turntable.k_rep {
        errors.push(ConfigError {
            line: seen.get("k_min").copied(),
            message: format!("k_min: {} exceeds k_rep {}", cfg.turntable.k_min, cfg.turntable.k_rep),
        });
    }
    errors.sort_by_key(|e| e.line.unwrap_or(usize::MAX));
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(errors))
    }
}

pub fn render_config(c: &ScenarioConfig) -> String {
    let (mode, bits, hashes) = match c.tree.mode {
        SummaryMode::Exact => ("exact", None, None),
        SummaryMode::Bloom { bits, hashes } => ("bloom", Some(bits), Some(hashes)),
    };
    let b = &c.behavior;
    let e = &c.engine;
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    put("bitrate_bps", c.stream.bitrate_bps.to_string());
    put("chunk_size_bytes", c.stream.chunk_size_bytes.to_string());
    put("start_time", c.stream.start_time.to_string());
    put("show_length", c.show_length.to_string());
    put("zipf_exponent", b.zipf_exponent.to_string());
    put("early_quit_fraction", b.early_quit_fraction.to_string());
    put("early_quit_window", b.early_quit_window.to_string());
    put("show_end_leave_prob", b.show_end_leave_prob.to_string());
    put("vcr_rate", b.vcr_rate.to_string());
    put("arrival_rate", b.arrival_rate.to_string());
    put("live_join_prob", b.live_join_prob.to_string());
    put("pause_mean", b.pause_mean.to_string());
    put("popularity_session_bias", b.popularity_session_bias.to_string());
    put("abrupt_leave_prob", e.abrupt_leave_prob.to_string());
    put("hop_latency", e.hop_latency.to_string());
    put("default_cap", e.default_cap.to_string());
    put("cap_spread", e.cap_spread.to_string());
    put("storage_chunks", e.storage_chunks.to_string());
    put("peer_upload_bps", e.peer_upload_bps.to_string());
    put("producer_upload_bps", e.producer_upload_bps.to_string());
    put("producer_archive", e.producer_archive.to_string());
    put("sample_period", e.sample_period.to_string());
    put("seed", c.seed.to_string());
    put("horizon", c.horizon.to_string());
    put("overlay", c.overlay.to_string());
    put("m", c.turntable.m.to_string());
    put("representants", c.turntable.representants.to_string());
    put("k_rep", c.turntable.k_rep.to_string());
    put("k_min", c.turntable.k_min.to_string());
    put("fanout", c.tree.fanout.to_string());
    put("summary_mode", mode.to_string());
    if let (Some(bits), Some(hashes)) = (bits, hashes) {
        put("bloom_bits", bits.to_string());
        put("bloom_hashes", hashes.to_string());
    }
    put("colors", c.mesh.colors.to_string());
    put("gossip_period", c.mesh.gossip_period.to_string());
    put("max_degree", c.mesh.max_degree.to_string());
    put("request_ttl", c.mesh.request_ttl.to_string());
    put("domination_threshold", c.domination_threshold.to_string());
    put("k", c.interval.k.to_string());
    put("horizon_T", c.interval.horizon_t.to_string());
    put("dedicated_server", c.interval.dedicated_server.to_string());
    put("fill_budget", c.interval.fill_budget.to_string());
    put("resweep_period", c.interval.resweep_period.to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let c = parse_config("# tiny\nhorizon = 3600\n").unwrap();
        assert_eq!(c, ScenarioConfig::with_horizon(3600.0));
        assert_eq!(c.turntable.m, 12);
        assert_eq!(c.interval.k, 2);
        assert_eq!(c.engine.hop_latency, 0.05);
    }

    #[test]
    fn negative_k_names_key_and_range() {
        let err = parse_config("horizon = 1\nk = -1\n").unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert_eq!(err.0[0].line, Some(2));
        assert!(err.0[0].message.contains("k: -1 outside [1,"), "{}", err.0[0].message);
    }

    #[test]
    fn duplicate_key_names_both_lines() {
        let err = parse_config("horizon = 1\nm = 3\n\nm = 4\n").unwrap_err();
        assert!(err.0[0].message.contains("lines 2 and 4"), "{err}");
    }

    #[test]
    fn all_errors_reported() {
        let err = parse_config("m = 0\nbogus = 1\nfanout = x\nnot a pair\n").unwrap_err();
        let text = err.to_string();
        for needle in ["line 1: m", "unknown key `bogus`", "line 3: fanout", "line 4", "missing required key `horizon`"] {
            assert!(text.contains(needle), "{needle} not in {text}");
        }
        assert_eq!(err.0.len(), 5);
    }

    #[test]
    fn bloom_keys_apply_in_any_order() {
        let c = parse_config("bloom_bits = 256\nhorizon = 5\nsummary_mode = bloom\nbloom_hashes = 4\n").unwrap();
        assert_eq!(c.tree.mode, SummaryMode::Bloom { bits: 256, hashes: 4 });
    }

    #[test]
    fn every_key_is_rendered() {
        let mut c = ScenarioConfig::with_horizon(10.0);
        c.tree.mode = SummaryMode::Bloom { bits: 64, hashes: 2 };
        let text = render_config(&c);
        for k in KEYS {
            assert!(text.contains(&format!("\n{k} = ")) || text.starts_with(&format!("{k} = ")), "{k}");
        }
    }

    fn arb_config() -> impl Strategy<Value = ScenarioConfig> {
        (
            (1u64..10_000_000, 1e3f64..1e7, -1e5f64..1e5, 1.0f64..1e4, 0u64..u64::MAX),
            (0.0f64..1.0, 0.0f64..1.0, 0.0f64..0.1, 1e-4f64..1.0, 0.01f64..5.0),
            (0u32..16, 1u32..5000, 0.0f64..1.0, any::<bool>(), 0.0f64..1e4),
            (1usize..40, 1usize..5, 1usize..6, 1usize..6, 0u8..3),
            (1usize..6, 1.0f64..100.0, 1usize..20, 0u32..20, 1u32..5),
            (0u64..5000, any::<bool>(), 0u32..10, 0.0f64..500.0, 0.0f64..1e7),
        )
            .prop_map(|(s, w, e, t, m, i)| {
                let mut c = ScenarioConfig::with_horizon(i.4);
                c.stream.chunk_size_bytes = s.0;
                c.stream.bitrate_bps = s.1;
                c.stream.start_time = s.2;
                c.show_length = s.3;
                c.seed = s.4;
                c.behavior.early_quit_fraction = w.0;
                c.behavior.live_join_prob = w.1;
                c.behavior.vcr_rate = w.2;
                c.behavior.arrival_rate = w.3;
                c.behavior.zipf_exponent = w.4;
                c.engine.default_cap = e.0;
                c.engine.storage_chunks = e.1;
                c.engine.abrupt_leave_prob = e.2;
                c.engine.producer_archive = e.3;
                c.engine.sample_period = e.4;
                c.turntable.m = t.0;
                c.turntable.representants = t.1;
                c.turntable.k_rep = t.2.max(t.3);
                c.turntable.k_min = t.3;
                c.overlay = OverlayKind::ALL[t.4 as usize];
                c.tree.mode = if t.4 == 1 { SummaryMode::Bloom { bits: 8 + t.0 * 16, hashes: 1 + t.1 as u32 } } else { SummaryMode::Exact };
                c.mesh.colors = m.0;
                c.mesh.gossip_period = m.1;
                c.mesh.max_degree = m.2;
                c.mesh.request_ttl = m.3;
                c.interval.k = m.4;
                c.interval.horizon_t = i.0;
                c.interval.dedicated_server = i.1;
                c.interval.fill_budget = i.2;
                c.interval.resweep_period = i.3;
                c
            })
    }

    proptest! {
        #[test]
        fn render_round_trips(c in arb_config()) {
            let text = render_config(&c);
            prop_assert_eq!(parse_config(&text).unwrap(), c);
        }
    }
}
