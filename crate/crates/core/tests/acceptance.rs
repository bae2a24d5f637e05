//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one line whether it passes or not.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tssim::config::ScenarioConfig;
use tssim::engine::{Engine, Lookup, OverlayDriver, OverlayKind, PeerState, RunSetup, World};
use tssim::interval::oracle::{brute_force_oracle, naive_coverage_gaps, naive_overloads, OracleError};
use tssim::interval::sweep::{sweep_assign_bounds, InfeasibleKind, Position};
use tssim::interval::{capacity_counts, check_capacity, check_k_coverage, objective, Capacity, Interval, OverlayConstraints};
use tssim::metrics::{emit_report, REPORT_FILES};
use tssim::scenario::{build_setup, run_scenario};
use tssim::stream::{ChunkId, StreamParams};
use tssim::turntable::mesh::MeshOverlay;
use tssim::turntable::summary::SummaryMode;
use tssim::turntable::tree::{EmergencyOutcome, SectorTree, TreeOverlay};
use tssim::workload::{PeerId, SessionEvent, SessionKind};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn limit(start: Instant, max: Duration) -> Result<String, String> {
    let took = start.elapsed();
    if took > max {
        Err(format!("took {took:.2?}, limit {max:?}"))
    } else {
        Ok(format!("{took:.2?}"))
    }
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    ((x - target) / target).abs() <= tol
}

fn c1_capacity_arithmetic() -> Outcome {
    let s = StreamParams::default();
    // 500 kbit/s for a day is 86400 * 62500 bytes, cut into 2 MB chunks
    let per_day_oracle = 86_400u64 * 500_000 / 8 / 2_000_000;
    if per_day_oracle != 2700 || s.chunks_per_day() != per_day_oracle {
        return Err(format!("chunks/day {} (expected 2700)", s.chunks_per_day()));
    }
    let chunks30 = s.chunks_in(30.0 * 86_400.0);
    let bytes30 = s.storage_bytes(30);
    if chunks30 != 81_000 || bytes30 != 162_000_000_000 {
        return Err(format!("30 days: {chunks30} chunks, {bytes30} bytes"));
    }
    if !within(chunks30 as f64, 80_000.0, 0.05) || !within(bytes30 as f64, 160e9, 0.05) {
        return Err("30-day figures off by more than 5%".into());
    }
    Ok(format!("2700 chunks/day, 30 days = {chunks30} chunks / {} GB", bytes30 / 1_000_000_000))
}

fn run_tree(cfg: &ScenarioConfig, seed: u64, check: bool) -> Result<(TreeOverlay, World), String> {
    let setup = build_setup(cfg, seed, check).map_err(|e| e.to_string())?;
    let mut ov = TreeOverlay::new(cfg.turntable, cfg.tree);
    let w = Engine::new(setup, &mut ov, seed).run_with_world().map_err(|e| e.to_string())?;
    Ok((ov, w))
}

fn c2_assignment_law() -> Outcome {
    let start = Instant::now();
    let mut cfg = ScenarioConfig::with_horizon(86_400.0);
    cfg.turntable.m = 12;
    let (ov, w) = run_tree(&cfg, 2, true)?;
    let m = 12u64;
    let mut pins = 0u64;
    let mut bad = 0u64;
    for (id, p) in w.active_peers() {
        let sector = ov.turntable.sector_of_peer(id).ok_or(format!("peer {id} has no sector"))?;
        for c in p.store.pinned() {
            pins += 1;
            if c % m != sector as u64 {
                bad += 1;
            }
        }
    }
    if bad > 0 || ov.turntable.assignment_violations(&w) > 0 {
        return Err(format!("{bad} of {pins} pins off their sector"));
    }
    if pins == 0 {
        return Err("no pinned chunks to check".into());
    }
    let t = limit(start, Duration::from_secs(10))?;
    Ok(format!("{pins} pins, 0 violations, {t}"))
}

fn c3_tree_routing() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut queries = 0u64;
    for trial in 0..500 {
        let n = rng.random_range(1..=100u32);
        let fanout = rng.random_range(1..=4usize);
        let mut t = SectorTree::new(fanout, SummaryMode::Exact);
        let roots = rng.random_range(1..=3u32).min(n);
        for p in 0..n {
            let cap = rng.random_range(1..=fanout as u32);
            if p < roots {
                t.add_root(p, cap);
            } else {
                t.attach(p, cap);
            }
        }
        // reshape with a few removals
        for _ in 0..rng.random_range(0..=n / 4) {
            let p = rng.random_range(0..n);
            if t.contains(p) && t.len() > 1 {
                t.remove(p, &[]);
            }
        }
        let slots = rng.random_range(1..=20usize);
        let peers: Vec<PeerId> = t.peers().collect();
        for &p in &peers {
            for s in 0..slots {
                if rng.random_bool(0.05) {
                    t.add_own(p, s);
                }
            }
        }
        let depth = t.max_depth() as u32;
        for _ in 0..10 {
            let from = peers[rng.random_range(0..peers.len())];
            let slot = rng.random_range(0..slots);
            let brute = peers.iter().any(|&p| t.node(p).is_some_and(|x| x.own.contains(&slot)));
            let route = t.route(from, slot);
            queries += 1;
            if route.server.is_some() != brute {
                return Err(format!("trial {trial}: route {:?} vs scan {brute}", route.server));
            }
            if let Some(z) = route.server {
                if !t.node(z).is_some_and(|x| x.own.contains(&slot)) {
                    return Err(format!("trial {trial}: server {z} lacks slot {slot}"));
                }
                if route.hops > 2 * depth {
                    return Err(format!("trial {trial}: {} hops, depth {depth}", route.hops));
                }
            }
        }
    }
    let t = limit(start, Duration::from_secs(30))?;
    Ok(format!("500 trees, {queries} queries, 0 mismatches, {t}"))
}

fn c4_emergency() -> Outcome {
    let mut cfg = ScenarioConfig::with_horizon(7200.0);
    cfg.behavior.arrival_rate = 0.05;
    cfg.turntable.m = 4;
    cfg.engine.abrupt_leave_prob = 1.0;
    let mut restored = 0u64;
    let mut lost = 0u64;
    let mut traces_with_drop = 0;
    for seed in 0..100 {
        let (ov, w) = run_tree(&cfg, seed, false)?;
        let rt = TreeOverlay::emergency_round_trip(&w);
        if ov.emergency_log.iter().any(|r| r.before > 0) {
            traces_with_drop += 1;
        }
        if ov.emergency_log.len() as u64 != w.metrics.emergency_rounds {
            return Err(format!("seed {seed}: log and counter disagree"));
        }
        for r in &ov.emergency_log {
            if r.fired_at - r.detected_at > rt + 1e-9 {
                return Err(format!("seed {seed}: chunk {} repaired after {:.3}s > {rt:.3}s", r.chunk, r.fired_at - r.detected_at));
            }
            match r.outcome {
                EmergencyOutcome::Restored if r.after == r.target => restored += 1,
                EmergencyOutcome::PermanentLoss if r.after == 0 => lost += 1,
                _ => return Err(format!("seed {seed}: chunk {} ended {:?} with {}/{}", r.chunk, r.outcome, r.after, r.target)),
            }
        }
    }
    if traces_with_drop == 0 {
        return Err("no trace dropped a chunk below k_min".into());
    }
    Ok(format!("100 traces ({traces_with_drop} with sub-k_min drops): {restored} restored, {lost} permanent losses"))
}

/// 60 peers join in the first minute; from t=900 one random active peer is
/// replaced every minute.
fn mesh_sessions(seed: u64, horizon: f64) -> Vec<SessionEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev: Vec<SessionEvent> = (0..60)
        .map(|i| SessionEvent { time: 1.0 + i as f64, peer_id: i, kind: SessionKind::Join { position: 0 } })
        .collect();
    let mut active: Vec<PeerId> = (0..60).collect();
    let mut next = 60;
    let mut t = 900.0;
    while t < horizon {
        let i = rng.random_range(0..active.len());
        ev.push(SessionEvent { time: t, peer_id: active[i], kind: SessionKind::Leave });
        ev.push(SessionEvent { time: t + 0.5, peer_id: next, kind: SessionKind::Join { position: 0 } });
        active[i] = next;
        next += 1;
        t += 60.0;
    }
    ev
}

fn c5_mesh() -> Outcome {
    let horizon = 4 * 3600;
    let mut worst = 0.0f64;
    let mut pins = 0u64;
    let mut runs = 0;
    for m in [4usize, 12] {
        for seed in 0..5 {
            let mut cfg = ScenarioConfig::with_horizon(horizon as f64);
            cfg.turntable.m = m;
            cfg.mesh.colors = 3;
            let mut setup: RunSetup = build_setup(&cfg, seed, true).map_err(|e| e.to_string())?;
            setup.sessions = mesh_sessions(seed, horizon as f64);
            let mut ov = MeshOverlay::new(cfg.turntable, cfg.mesh);
            let w = Engine::new(setup, &mut ov, seed).run_with_world().map_err(|e| e.to_string())?;
            let bad = ov.color_law_violations(&w);
            if bad > 0 {
                return Err(format!("m={m} seed {seed}: {bad} off-color pins"));
            }
            pins += ov.mesh_pins(&w);
            let after: Vec<_> = ov.domination_log.iter().filter(|x| x.0 >= 600.0).collect();
            let n: u64 = after.iter().map(|x| x.2).sum();
            let v: u64 = after.iter().map(|x| x.1).sum();
            let rate = if n > 0 { v as f64 / n as f64 } else { 1.0 };
            worst = worst.max(rate);
            runs += 1;
        }
    }
    if worst > 0.05 {
        return Err(format!("domination violation rate {worst:.4} > 0.05"));
    }
    Ok(format!("{runs} runs, {pins} final mesh pins all on color, worst domination violation {worst:.4}"))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

fn c6_sweep_vs_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ratios = Vec::new();
    let (mut both_infeasible, mut incomplete, mut too_few) = (0, 0, 0);
    for inst in 0..1000 {
        let n = rng.random_range(1..=6usize);
        let t = rng.random_range(0..=15u64);
        let k = rng.random_range(1..=3u32);
        let positions: Vec<Position> = (0..n).map(|i| Position { peer_id: i as PeerId, c: rng.random_range(0..=t) }).collect();
        let mut cons = OverlayConstraints::new(k, t, Capacity::Finite(2));
        for p in &positions {
            let cap = if rng.random_bool(0.25) { Capacity::Unbounded } else { Capacity::Finite(rng.random_range(0..=3)) };
            cons.caps.insert(p.peer_id, cap);
        }
        let sweep = sweep_assign_bounds(&positions, &cons);
        let oracle = brute_force_oracle(&positions, &cons);
        if matches!(oracle, Err(OracleError::TooLarge)) {
            return Err(format!("instance {inst}: oracle refused"));
        }
        match (&sweep, &oracle) {
            (Ok(ivs), _) => {
                if !naive_coverage_gaps(ivs, &cons).is_empty() || !naive_overloads(ivs, &cons).is_empty() {
                    return Err(format!("instance {inst}: sweep output violates constraints"));
                }
                if check_k_coverage(ivs, &cons).is_err() || check_capacity(ivs, &cons).is_err() {
                    return Err(format!("instance {inst}: checker rejects sweep output"));
                }
                let Ok(best) = oracle else {
                    return Err(format!("instance {inst}: sweep feasible, oracle not"));
                };
                let got = objective(ivs);
                if got < best.objective {
                    return Err(format!("instance {inst}: sweep {got} beats optimum {}", best.objective));
                }
                ratios.push(if best.objective == 0 { if got == 0 { 1.0 } else { f64::INFINITY } } else { got as f64 / best.objective as f64 });
            }
            (Err(e), Err(_)) => {
                both_infeasible += 1;
                too_few += (e.kind == InfeasibleKind::TooFewPeers) as u32;
            }
            (Err(e), Ok(_)) => {
                if n < k as usize || e.kind == InfeasibleKind::TooFewPeers {
                    return Err(format!("instance {inst}: too few peers reported but oracle feasible"));
                }
                incomplete += 1;
            }
        }
    }
    ratios.sort_by(f64::total_cmp);
    let t = limit(start, Duration::from_secs(120))?;
    let dist = if ratios.is_empty() {
        "none".into()
    } else {
        format!(
            "min {:.3} p50 {:.3} p90 {:.3} max {:.3}",
            ratios[0],
            quantile(&ratios, 0.5),
            quantile(&ratios, 0.9),
            ratios[ratios.len() - 1]
        )
    };
    Ok(format!(
        "{} agreed feasible (ratio {dist}), {both_infeasible} both infeasible ({too_few} n<k), incompleteness {incomplete}/1000 = {:.1}%, {t}",
        ratios.len(),
        incomplete as f64 / 10.0
    ))
}

fn c7_checkers() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for set in 0..10_000 {
        let n = rng.random_range(0..=40usize);
        let span = rng.random_range(0..=60u64);
        let ivs: Vec<Interval> = (0..n)
            .map(|i| {
                let mut x = [rng.random_range(0..=span), rng.random_range(0..=span), rng.random_range(0..=span)];
                x.sort_unstable();
                Interval { peer_id: i as PeerId, l: x[0], c: x[1], r: x[2] }
            })
            .collect();
        let cap = if rng.random_bool(0.1) { Capacity::Unbounded } else { Capacity::Finite(rng.random_range(0..=5)) };
        let cons = OverlayConstraints::new(rng.random_range(1..=4), rng.random_range(0..=70), cap);
        let gaps = check_k_coverage(&ivs, &cons).err().unwrap_or_default();
        let over = check_capacity(&ivs, &cons).err().unwrap_or_default();
        if gaps != naive_coverage_gaps(&ivs, &cons) || over != naive_overloads(&ivs, &cons) {
            return Err(format!("set {set}: fast and naive checkers disagree"));
        }
        let counts = capacity_counts(&ivs);
        for (x, &got) in ivs.iter().zip(&counts) {
            let want = ivs.iter().filter(|y| y.peer_id != x.peer_id && y.c >= x.c && y.l <= x.r).count() as u32;
            if got != want {
                return Err(format!("set {set}: peer {} leaned on by {want}, counted {got}", x.peer_id));
            }
        }
    }
    Ok("10000 sets, exact agreement".into())
}

#[derive(Default)]
struct PauseRecorder {
    paused: BTreeMap<PeerId, (u64, f64)>,
    resumed: Vec<(u64, f64, u64)>,
}

impl OverlayDriver for PauseRecorder {
    fn kind(&self) -> OverlayKind {
        OverlayKind::Tree
    }
    fn on_join(&mut self, _w: &mut World, _peer: PeerId) {}
    fn on_leave(&mut self, _w: &mut World, _peer: PeerId, _abrupt: bool) {}
    fn on_chunk_published(&mut self, _w: &mut World, _chunk: ChunkId) {}
    fn locate(&mut self, _w: &mut World, _r: PeerId, _c: ChunkId) -> Lookup {
        Lookup::Missing
    }
    fn on_position_change(&mut self, w: &mut World, peer: PeerId) {
        let Some(p) = w.peer(peer) else { return };
        match p.state {
            PeerState::Paused { lag_at_pause, duration, .. } => {
                self.paused.insert(peer, (lag_at_pause, duration));
            }
            PeerState::Hookup { lag } => {
                if let Some((before, d)) = self.paused.remove(&peer) {
                    self.resumed.push((before, d, lag));
                }
            }
            _ => {}
        }
    }
}

fn c8_pause() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cfg = ScenarioConfig::with_horizon(40_000.0);
    cfg.stream.start_time = -3.0 * 86_400.0;
    let mut setup = build_setup(&cfg, 8, true).map_err(|e| e.to_string())?;
    let mut ev = Vec::new();
    for peer in 0..100u32 {
        let mut t = 1.0 + peer as f64;
        let head = cfg.stream.head_at(t).unwrap();
        ev.push(SessionEvent { time: t, peer_id: peer, kind: SessionKind::Join { position: head - rng.random_range(1..=2000) } });
        for i in 0..10 {
            t += rng.random_range(1.0..100.0);
            let d = match i % 3 {
                0 => 32.0 * rng.random_range(1..=60) as f64,
                1 => rng.random_range(0.001..1.0),
                _ => rng.random_range(1.0..2000.0),
            };
            ev.push(SessionEvent { time: t, peer_id: peer, kind: SessionKind::Pause { duration: d } });
            t += d + 1.0;
        }
    }
    setup.sessions = ev;
    setup.sessions.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.peer_id.cmp(&b.peer_id)));
    let mut rec = PauseRecorder::default();
    Engine::new(setup, &mut rec, 8).run().map_err(|e| e.to_string())?;
    if rec.resumed.len() != 1000 {
        return Err(format!("{} of 1000 pauses resumed", rec.resumed.len()));
    }
    for &(before, d, after) in &rec.resumed {
        let want = (d / 32.0).ceil() as u64;
        if after - before != want {
            return Err(format!("pause {d}s: lag {before} -> {after}, expected +{want}"));
        }
    }
    Ok("1000 pauses, lag increase = ceil(d / 32 s) every time".into())
}

fn det_config() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::with_horizon(2.0 * 3600.0);
    cfg.behavior.arrival_rate = 0.03;
    cfg.behavior.vcr_rate = 0.005;
    cfg.turntable.m = 4;
    cfg.interval.horizon_t = 225;
    cfg.engine.cap_spread = 2;
    cfg.engine.sample_period = 600.0;
    cfg
}

fn c9_determinism() -> Outcome {
    let cfg = det_config();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bytes = 0;
    for kind in OverlayKind::ALL {
        let mut outs = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("{kind}-{run}"));
            let r = run_scenario(&cfg, kind, 99, true).map_err(|e| e.to_string())?;
            emit_report(&r, &out).map_err(|e| e.to_string())?;
            outs.push(out);
        }
        for f in REPORT_FILES {
            let a = std::fs::read(outs[0].join(f)).map_err(|e| e.to_string())?;
            let b = std::fs::read(outs[1].join(f)).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!("{kind}: {f} differs between runs"));
            }
            bytes += a.len();
        }
    }
    Ok(format!("3 overlays x 4 files identical across reruns ({bytes} bytes)"))
}

fn smoke_config() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::with_horizon(6.0 * 3600.0);
    cfg.behavior.arrival_rate = 200.0 / (6.0 * 3600.0);
    cfg.interval.horizon_t = cfg.stream.chunks_in(6.0 * 3600.0);
    cfg.engine.sample_period = 600.0;
    cfg.seed = 10;
    cfg
}

fn c10_smoke() -> Outcome {
    let start = Instant::now();
    let cfg = smoke_config();
    let setup = build_setup(&cfg, cfg.seed, false).map_err(|e| e.to_string())?;
    let peers = setup.sessions.iter().filter(|e| matches!(e.kind, SessionKind::Join { .. })).count();
    let mut parts = vec![format!("{peers} peers")];
    let mut fail = None;
    for kind in OverlayKind::ALL {
        let r = run_scenario(&cfg, kind, cfg.seed, true).map_err(|e| e.to_string())?;
        let a = r.availability_ratio();
        let o = r.producer_offload();
        parts.push(format!("{kind} avail {a:.3} offload {o:.3}"));
        if !(a > 0.0 && o > 0.0) {
            fail.get_or_insert(format!("{kind}: availability {a}, offload {o}"));
        }
        if kind == OverlayKind::Interval {
            match r.buffer_by_popularity() {
                Some((most, least)) => {
                    parts.push(format!("buffer most-requested {most:.1} vs least {least:.1}"));
                    if most > least {
                        fail.get_or_insert(format!("most-requested decile buffer {most:.1} > least {least:.1}"));
                    }
                }
                None => {
                    fail.get_or_insert("no decile statistics".into());
                }
            }
        }
    }
    match limit(start, Duration::from_secs(300)) {
        Ok(t) => parts.push(t),
        Err(e) => {
            fail.get_or_insert(e);
        }
    }
    match fail {
        None => Ok(parts.join(", ")),
        Some(e) => Err(format!("{e} ({})", parts.join(", "))),
    }
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("capacity arithmetic", c1_capacity_arithmetic),
        ("turntable assignment law", c2_assignment_law),
        ("tree routing oracle", c3_tree_routing),
        ("emergency replication", c4_emergency),
        ("mesh color law and domination", c5_mesh),
        ("interval sweep vs oracle", c6_sweep_vs_oracle),
        ("constraint checker equivalence", c7_checkers),
        ("pause semantics", c8_pause),
        ("determinism", c9_determinism),
        ("comparative smoke experiment", c10_smoke),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        match f() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
