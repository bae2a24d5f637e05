//! Turns a parsed configuration into a runnable engine setup.

use crate::config::ScenarioConfig;
use crate::engine::{Engine, OverlayDriver, OverlayKind, RunSetup, SimError, World};
use crate::interval::overlay::IntervalOverlay;
use crate::metrics::MetricsReport;
use crate::stream::StreamTimeline;
use crate::turntable::mesh::MeshOverlay;
use crate::turntable::tree::TreeOverlay;
use crate::workload::{generate_sessions, shuffled_ranks};

pub fn build_setup(cfg: &ScenarioConfig, seed: u64, check_invariants: bool) -> Result<RunSetup, SimError> {
    let bad = |e: &dyn std::fmt::Display| SimError::Config(e.to_string());
    cfg.stream.validate().map_err(|e| bad(&e))?;
    cfg.behavior.validate().map_err(|e| bad(&e))?;
    if !(cfg.horizon > 0.0) {
        return Err(SimError::Config(format!("horizon must be positive, got {}", cfg.horizon)));
    }
    if cfg.turntable.k_min > cfg.turntable.k_rep {
        return Err(SimError::Config("k_min exceeds k_rep".into()));
    }
    let stream = cfg.stream;
    let total = stream.chunks_in(cfg.horizon - stream.start_time) + 2;
    let show_len = ((cfg.show_length / stream.chunk_duration()).round() as u64).max(1);
    let n_shows = total.div_ceil(show_len) as usize;
    let ranks = shuffled_ranks(n_shows, seed);
    let timeline = StreamTimeline::tiled(stream, total, show_len, &ranks);
    let sessions = generate_sessions(&cfg.behavior, &timeline, cfg.horizon, seed);
    Ok(RunSetup {
        stream,
        timeline,
        params: cfg.engine,
        horizon: cfg.horizon,
        sessions,
        check_invariants,
    })
}

pub fn make_overlay(cfg: &ScenarioConfig, kind: OverlayKind) -> Box<dyn OverlayDriver> {
    match kind {
        OverlayKind::Tree => Box::new(TreeOverlay::new(cfg.turntable, cfg.tree)),
        OverlayKind::Mesh => Box::new(MeshOverlay::new(cfg.turntable, cfg.mesh)),
        OverlayKind::Interval => Box::new(IntervalOverlay::new(cfg.interval)),
    }
}

pub fn run_scenario(cfg: &ScenarioConfig, kind: OverlayKind, seed: u64, check_invariants: bool) -> Result<MetricsReport, SimError> {
    run_scenario_with_world(cfg, kind, seed, check_invariants).map(|w| w.metrics)
}

pub fn run_scenario_with_world(cfg: &ScenarioConfig, kind: OverlayKind, seed: u64, check_invariants: bool) -> Result<World, SimError> {
    let setup = build_setup(cfg, seed, check_invariants)?;
    let mut overlay = make_overlay(cfg, kind);
    Engine::new(setup, overlay.as_mut(), seed).run_with_world()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timeline_covers_horizon() {
        let mut cfg = ScenarioConfig::with_horizon(3600.0);
        cfg.stream.start_time = -1800.0;
        let setup = build_setup(&cfg, 1, false).unwrap();
        let last = setup.timeline.shows.last().unwrap().last_chunk;
        assert!(last >= cfg.stream.chunks_in(5400.0));
        assert_eq!(setup.timeline.show_len(), 56);
    }

    #[test]
    fn rejects_zero_horizon() {
        let cfg = ScenarioConfig::with_horizon(0.0);
        assert!(matches!(build_setup(&cfg, 0, false), Err(SimError::Config(_))));
    }
}
