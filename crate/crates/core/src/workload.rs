//! Peer population and session events: arrivals, show-boundary churn,
//! early quits and VCR operations.
//!
//! No measurement data exists for time-shifted IPTV, so every distribution
//! here is a parameterised conjecture. The defaults only encode the
//! qualitative trends: Zipfian show popularity, a join burst at each show
//! start, half of the viewers quitting in the first ten minutes, and a
//! departure spike at show ends.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::stream::{ChunkId, Show, StreamParams, StreamTimeline};

pub type PeerId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("rank {rank} outside catalog 1..={size}")]
    RankOutOfRange { rank: u64, size: u64 },
    #[error("{name} must be in [0, 1], got {value}")]
    NotAProbability { name: &'static str, value: f64 },
    #[error("{name} must be non-negative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("zipf exponent must be positive, got {0}")]
    BadExponent(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeerProfile {
    pub peer_id: PeerId,
    /// cap(x): concurrent downstream transfers this peer can sustain.
    pub upload_capacity: u32,
    pub storage_capacity: u32,
    pub join_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SessionKind {
    Join { position: ChunkId },
    Leave,
    Pause { duration: f64 },
    SeekForward { target: ChunkId },
    SeekBackward { target: ChunkId },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionEvent {
    pub time: f64,
    pub peer_id: PeerId,
    pub kind: SessionKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorParams {
    pub zipf_exponent: f64,
    pub early_quit_fraction: f64,
    pub early_quit_window: f64,
    pub show_end_leave_prob: f64,
    pub vcr_rate: f64,
    pub arrival_rate: f64,
    /// Probability that a new session starts at the live edge.
    pub live_join_prob: f64,
    pub pause_mean: f64,
    /// Shifts early-quit probability toward popular shows: the effective
    /// probability is `early_quit_fraction + bias / rank`, clamped to [0, 1].
    pub popularity_session_bias: f64,
}

impl Default for BehaviorParams {
    fn default() -> Self {
        Self {
            zipf_exponent: 1.0,
            early_quit_fraction: 0.5,
            early_quit_window: 600.0,
            show_end_leave_prob: 0.8,
            vcr_rate: 0.001,
            arrival_rate: 0.02,
            live_join_prob: 0.3,
            pause_mean: 120.0,
            popularity_session_bias: 0.0,
        }
    }
}

impl BehaviorParams {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        for (name, value) in [
            ("early_quit_fraction", self.early_quit_fraction),
            ("show_end_leave_prob", self.show_end_leave_prob),
            ("live_join_prob", self.live_join_prob),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(WorkloadError::NotAProbability { name, value });
            }
        }
        for (name, value) in [
            ("early_quit_window", self.early_quit_window),
            ("vcr_rate", self.vcr_rate),
            ("arrival_rate", self.arrival_rate),
            ("pause_mean", self.pause_mean),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(WorkloadError::Negative { name, value });
            }
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return Err(WorkloadError::BadExponent(self.zipf_exponent));
        }
        Ok(())
    }
}

fn zipf_normalizer(exponent: f64, catalog_size: u64) -> f64 {
    // summed smallest-first to keep the rounding error low on large catalogs
    (1..=catalog_size).rev().map(|i| (i as f64).powf(-exponent)).sum()
}

pub fn zipf_popularity(rank: u64, exponent: f64, catalog_size: u64) -> Result<f64, WorkloadError> {
    if rank == 0 || rank > catalog_size {
        return Err(WorkloadError::RankOutOfRange {
            rank,
            size: catalog_size,
        });
    }
    if !(exponent > 0.0) {
        return Err(WorkloadError::BadExponent(exponent));
    }
    Ok((rank as f64).powf(-exponent) / zipf_normalizer(exponent, catalog_size))
}

/// New position after a VCR operation. Pause keeps the position while the
/// head keeps advancing; seeks are clamped into `[0, head]`.
pub fn apply_vcr(kind: &SessionKind, current_position: ChunkId, head: ChunkId) -> ChunkId {
    match *kind {
        SessionKind::SeekForward { target } | SessionKind::SeekBackward { target } => target.min(head),
        SessionKind::Pause { .. } | SessionKind::Join { .. } | SessionKind::Leave => current_position,
    }
}

fn pick_show<'a>(shows: &'a [Show], exponent: f64, rng: &mut ChaCha8Rng) -> Option<&'a Show> {
    if shows.is_empty() {
        return None;
    }
    let weights: Vec<f64> = shows
        .iter()
        .map(|s| (s.popularity_rank.max(1) as f64).powf(-exponent))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random::<f64>() * total;
    for (show, w) in shows.iter().zip(&weights) {
        if draw < *w {
            return Some(show);
        }
        draw -= w;
    }
    shows.last()
}

/// Seeded Fisher-Yates permutation of popularity ranks `1..=n`.
pub fn shuffled_ranks(n: usize, seed: u64) -> Vec<u64> {
    let mut ranks: Vec<u64> = (1..=n as u64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f5_a0e5);
    ranks.shuffle(&mut rng);
    ranks
}

struct SessionBuilder<'a> {
    behavior: &'a BehaviorParams,
    timeline: &'a StreamTimeline,
    horizon: f64,
    peer: PeerId,
    events: Vec<SessionEvent>,
}

impl SessionBuilder<'_> {
    fn params(&self) -> &StreamParams {
        &self.timeline.params
    }

    fn head(&self, t: f64) -> ChunkId {
        self.params().head_at(t).unwrap_or(0)
    }

    fn push(&mut self, time: f64, kind: SessionKind) -> bool {
        if time >= self.horizon {
            return false;
        }
        self.events.push(SessionEvent {
            time,
            peer_id: self.peer,
            kind,
        });
        true
    }

    /// Time at which a player holding a constant `lag` moves past `last`.
    fn crossing_time(&self, last: ChunkId, lag: u64) -> f64 {
        self.params().published_at(last + lag + 1)
    }

    fn show_last(&self, chunk: ChunkId) -> ChunkId {
        self.timeline.show_of(chunk).map_or(chunk, |s| s.last_chunk)
    }

    fn shows_up_to(&self, chunk: ChunkId) -> &[Show] {
        let n = self.timeline.shows.partition_point(|s| s.first_chunk <= chunk);
        &self.timeline.shows[..n]
    }

    fn run(&mut self, join: f64, rng: &mut ChaCha8Rng) {
        let b = *self.behavior;
        let head = self.params().head_at(join);
        let live = head.is_none() || rng.random::<f64>() < b.live_join_prob;
        let mut position = head.unwrap_or(0);
        let mut quit_at = f64::INFINITY;
        if !live {
            let show = *pick_show(self.shows_up_to(position), b.zipf_exponent, rng).expect("a show exists once a chunk does");
            position = show.first_chunk;
            let p = (b.early_quit_fraction + b.popularity_session_bias / show.popularity_rank.max(1) as f64).clamp(0.0, 1.0);
            if rng.random::<f64>() < p {
                quit_at = join + rng.random::<f64>() * b.early_quit_window;
            }
        }
        self.push(join, SessionKind::Join { position });

        let vcr = (b.vcr_rate > 0.0).then(|| Exp::new(b.vcr_rate).expect("positive rate"));
        let pause = (b.pause_mean > 0.0).then(|| Exp::new(1.0 / b.pause_mean).expect("positive mean"));
        let mut t = join;
        let mut lag = self.head(join) - position;
        let mut next_vcr = vcr.as_ref().map_or(f64::INFINITY, |d| t + d.sample(rng));
        let mut show_last = self.show_last(position);
        loop {
            let cross = self.crossing_time(show_last, lag);
            let next = quit_at.min(cross).min(next_vcr);
            if next >= self.horizon || !next.is_finite() {
                return;
            }
            if next == quit_at {
                self.push(quit_at, SessionKind::Leave);
                return;
            }
            if next == cross {
                t = cross;
                if rng.random::<f64>() < b.show_end_leave_prob {
                    self.push(t, SessionKind::Leave);
                    return;
                }
                show_last = self.show_last(show_last + 1);
                continue;
            }
            t = next_vcr;
            let head = self.head(t);
            let pos = head - lag;
            let show = self.timeline.show_of(pos).copied();
            let choice = rng.random_range(0..3u8);
            let kind = match choice {
                0 => {
                    let d = pause.as_ref().map_or(0.0, |p| p.sample(rng));
                    SessionKind::Pause { duration: d }
                }
                1 if pos < head => {
                    let target = if rng.random_bool(0.5) {
                        pos + rng.random_range(1..=self.timeline.show_len())
                    } else {
                        show.map_or(head, |s| s.last_chunk + 1)
                    };
                    SessionKind::SeekForward { target: target.min(head) }
                }
                _ => {
                    let target = if rng.random_bool(0.5) {
                        let floor = show.map_or(0, |s| s.first_chunk);
                        if pos > floor { rng.random_range(floor..pos) } else { floor }
                    } else {
                        pick_show(self.shows_up_to(pos), b.zipf_exponent, rng).map_or(0, |s| s.first_chunk)
                    };
                    SessionKind::SeekBackward { target: target.min(pos) }
                }
            };
            if !self.push(t, kind) {
                return;
            }
            match kind {
                SessionKind::Pause { duration } => {
                    t += duration;
                    lag += self.params().pause_lag(duration);
                    // a pause cannot push the position below chunk zero
                    lag = lag.min(self.head(t));
                }
                _ => {
                    let new_pos = apply_vcr(&kind, pos, head);
                    lag = head - new_pos;
                    show_last = self.show_last(new_pos);
                }
            }
            next_vcr = vcr.as_ref().map_or(f64::INFINITY, |d| t + d.sample(rng));
        }
    }
}

/// Session events for every peer arriving before `horizon`, ordered by
/// time then peer id. Sessions still running at the horizon end without a
/// `Leave`.
pub fn generate_sessions(
    behavior: &BehaviorParams,
    timeline: &StreamTimeline,
    horizon: f64,
    seed: u64,
) -> Vec<SessionEvent> {
    if !(horizon > 0.0) || !(behavior.arrival_rate > 0.0) {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arrivals = Exp::new(behavior.arrival_rate).expect("positive arrival rate");
    let mut events = Vec::new();
    let mut t = arrivals.sample(&mut rng);
    let mut peer: PeerId = 0;
    while t < horizon {
        let mut builder = SessionBuilder {
            behavior,
            timeline,
            horizon,
            peer,
            events: Vec::new(),
        };
        builder.run(t, &mut rng);
        events.append(&mut builder.events);
        peer += 1;
        t += arrivals.sample(&mut rng);
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.peer_id.cmp(&b.peer_id)));
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn timeline(horizon: f64) -> StreamTimeline {
        let params = StreamParams::default();
        let total = params.chunks_in(horizon) + 1;
        let shows = total.div_ceil(56) as usize;
        StreamTimeline::tiled(params, total, 56, &shuffled_ranks(shows, 1))
    }

    #[test]
    fn zipf_examples() {
        assert_eq!(zipf_popularity(1, 1.0, 1).unwrap(), 1.0);
        assert!((zipf_popularity(1, 1.0, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((zipf_popularity(2, 1.0, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(zipf_popularity(0, 1.0, 2).is_err());
        assert!(zipf_popularity(3, 1.0, 2).is_err());
    }

    #[test]
    fn zipf_is_monotone_and_normalised() {
        for &n in &[1u64, 10, 1000, 100_000] {
            let z = zipf_normalizer(1.0, n);
            let mut sum = 0.0;
            let mut prev = f64::INFINITY;
            for r in 1..=n {
                let p = (r as f64).powf(-1.0) / z;
                assert!(p <= prev);
                prev = p;
                sum += p;
            }
            assert!((sum - 1.0).abs() < 1e-12, "n={n} sum={sum}");
        }
    }

    #[test]
    fn vcr_clamps() {
        let p = StreamParams::default();
        assert_eq!(p.pause_lag(64.0), 2);
        assert_eq!(apply_vcr(&SessionKind::Pause { duration: 64.0 }, 7, 20), 7);
        assert_eq!(apply_vcr(&SessionKind::SeekBackward { target: 0 }, 7, 20), 0);
        assert_eq!(apply_vcr(&SessionKind::SeekForward { target: 99 }, 7, 20), 20);
    }

    #[test]
    fn no_arrivals_no_events() {
        let b = BehaviorParams {
            arrival_rate: 0.0,
            ..Default::default()
        };
        assert!(generate_sessions(&b, &timeline(3600.0), 3600.0, 1).is_empty());
        assert!(generate_sessions(&BehaviorParams::default(), &timeline(3600.0), 0.0, 1).is_empty());
    }

    #[test]
    fn sessions_are_deterministic() {
        let b = BehaviorParams {
            arrival_rate: 0.1,
            vcr_rate: 0.01,
            ..Default::default()
        };
        let tl = timeline(7200.0);
        let a = generate_sessions(&b, &tl, 7200.0, 42);
        let c = generate_sessions(&b, &tl, 7200.0, 42);
        assert!(!a.is_empty());
        assert_eq!(format!("{a:?}"), format!("{c:?}"));
        assert_ne!(format!("{a:?}"), format!("{:?}", generate_sessions(&b, &tl, 7200.0, 43)));
    }

    #[test]
    fn session_shape_invariants() {
        let b = BehaviorParams {
            arrival_rate: 0.2,
            vcr_rate: 0.01,
            ..Default::default()
        };
        let horizon = 6.0 * 3600.0;
        let tl = timeline(horizon);
        let events = generate_sessions(&b, &tl, horizon, 9);
        let mut per_peer: BTreeMap<PeerId, Vec<SessionEvent>> = BTreeMap::new();
        for e in &events {
            per_peer.entry(e.peer_id).or_default().push(*e);
        }
        for evs in per_peer.values() {
            assert!(matches!(evs[0].kind, SessionKind::Join { .. }));
            for (i, e) in evs.iter().enumerate() {
                if i > 0 {
                    assert!(!matches!(e.kind, SessionKind::Join { .. }));
                    assert!(e.time >= evs[i - 1].time);
                }
                if matches!(e.kind, SessionKind::Leave) {
                    assert_eq!(i, evs.len() - 1);
                }
                let head = tl.params.head_at(e.time).unwrap_or(0);
                match e.kind {
                    SessionKind::Join { position }
                    | SessionKind::SeekForward { target: position }
                    | SessionKind::SeekBackward { target: position } => assert!(position <= head),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn early_quit_fraction_is_met() {
        let b = BehaviorParams {
            arrival_rate: 1.0,
            vcr_rate: 0.0,
            live_join_prob: 0.0,
            early_quit_fraction: 0.5,
            early_quit_window: 600.0,
            ..Default::default()
        };
        // a day of stream so every arrival finds past shows to join
        let horizon = 10_000.0;
        let tl = timeline(horizon + 86_400.0);
        let mut shifted = tl.clone();
        shifted.params.start_time = -86_400.0;
        let events = generate_sessions(&b, &shifted, horizon, 5);
        let mut joins: BTreeMap<PeerId, f64> = BTreeMap::new();
        let mut quick = 0usize;
        for e in &events {
            match e.kind {
                SessionKind::Join { .. } => {
                    joins.insert(e.peer_id, e.time);
                }
                SessionKind::Leave if e.time - joins[&e.peer_id] <= 600.0 => quick += 1,
                _ => {}
            }
        }
        // sessions truncated by the horizon before their window closes are excluded
        let eligible = joins.values().filter(|&&t| t + 600.0 < horizon).count();
        let quick_eligible = events
            .iter()
            .filter(|e| matches!(e.kind, SessionKind::Leave))
            .filter(|e| joins[&e.peer_id] + 600.0 < horizon && e.time - joins[&e.peer_id] <= 600.0)
            .count();
        assert!(eligible > 9_000, "eligible={eligible}");
        assert!(quick >= quick_eligible);
        let frac = quick_eligible as f64 / eligible as f64;
        assert!((0.45..=0.55).contains(&frac), "fraction {frac}");
    }
}
