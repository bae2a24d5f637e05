//! Interval overlay driven by the engine.
//!
//! Bounds are recomputed globally every `resweep_period` and locally
//! around each join, leave and position change. Peers keep the chunks of
//! their window in an LRU store and fill it a few chunks per tick, next
//! chunk to play first, then the played part. A chunk stays one tick past
//! the window so the next window can still pull it. Peers anchored at lag
//! 0 are fed by the producer.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;

use super::sweep::{sweep_assign_bounds, sweep_local, Position};
use super::{check_capacity, check_k_coverage, coverage_counts, Capacity, Interval, Lag, OverlayConstraints};
use crate::engine::{Endpoint, Lookup, OverlayDriver, OverlayKind, Owner, Purpose, TimerTag, World};
use crate::metrics::LAG_DECILES;
use crate::stream::ChunkId;
use crate::workload::PeerId;

/// Peer id of the optional dedicated server.
pub const DEDICATED: PeerId = PeerId::MAX;

const GOSSIP_CANDIDATES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalParams {
    pub k: u32,
    pub horizon_t: Lag,
    pub dedicated_server: bool,
    pub fill_budget: u32,
    pub resweep_period: f64,
}

impl Default for IntervalParams {
    fn default() -> Self {
        Self {
            k: 2,
            horizon_t: 2700,
            dedicated_server: false,
            fill_budget: 4,
            resweep_period: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Change {
    Join(PeerId),
    Leave(PeerId),
    Moved(PeerId),
}

pub struct IntervalOverlay {
    pub params: IntervalParams,
    pub intervals: BTreeMap<PeerId, Interval>,
    inflight: BTreeMap<(PeerId, ChunkId), f64>,
    pub sweeps: u64,
    pub infeasible_sweeps: u64,
}

impl IntervalOverlay {
    pub fn new(params: IntervalParams) -> Self {
        assert!(params.k >= 1);
        Self {
            params,
            intervals: BTreeMap::new(),
            inflight: BTreeMap::new(),
            sweeps: 0,
            infeasible_sweeps: 0,
        }
    }

    /// Horizon actually protected: lags older than the head do not exist.
    fn effective_horizon(&self, w: &World) -> Lag {
        self.params.horizon_t.min(w.head().unwrap_or(0))
    }

    fn positions(&self, w: &World) -> Vec<Position> {
        w.active_peers()
            .map(|(id, p)| Position { peer_id: id, c: p.lag(w.head()) })
            .collect()
    }

    /// Upload slots as sweep capacities. Peers at lag 0 are fed by the
    /// producer, so their mutual overlap does not use slots.
    fn constraints(&self, w: &World, positions: &[Position]) -> OverlayConstraints {
        let live = positions.iter().filter(|p| p.c == 0).count() as u32;
        let mut cons = OverlayConstraints::new(self.params.k, self.effective_horizon(w), Capacity::Finite(0));
        for p in positions {
            let slots = w.upload_slots(p.peer_id);
            let extra = if p.c == 0 { live.saturating_sub(1) } else { 0 };
            cons.caps.insert(p.peer_id, Capacity::Finite(slots + extra));
        }
        cons.caps.insert(DEDICATED, Capacity::Unbounded);
        cons
    }

    fn dedicated(&self, horizon: Lag) -> Option<Interval> {
        self.params.dedicated_server.then_some(Interval {
            peer_id: DEDICATED,
            l: 0,
            c: 0,
            r: horizon,
        })
    }

    fn all_intervals(&self, horizon: Lag) -> Vec<Interval> {
        let mut v: Vec<Interval> = self.intervals.values().copied().collect();
        v.extend(self.dedicated(horizon));
        v
    }

    pub fn resweep(&mut self, w: &mut World) {
        let positions = self.positions(w);
        let cons = self.constraints(w, &positions);
        self.sweeps += 1;
        let (ivs, ok) = match self.dedicated(cons.horizon) {
            Some(d) => match sweep_local(&positions, &[d], &cons) {
                Ok(v) => (v, true),
                Err(e) => (e.partial, false),
            },
            None => match sweep_assign_bounds(&positions, &cons) {
                Ok(v) => (v, true),
                Err(e) => (e.partial, false),
            },
        };
        if !ok {
            self.infeasible_sweeps += 1;
            w.metrics.coverage_incidents += 1;
        }
        self.intervals = ivs.into_iter().map(|iv| (iv.peer_id, iv)).collect();
    }

    /// Local repair: the changed peer, the peers that overlapped it, and a
    /// couple of gossip-discovered peers are re-swept with everyone else
    /// held fixed.
    pub fn repair_on_event(&mut self, w: &mut World, change: Change) {
        let mut positions = self.positions(w);
        if let Change::Leave(p) = change {
            positions.retain(|x| x.peer_id != p);
        }
        let cons = self.constraints(w, &positions);
        let (peer, old) = match change {
            Change::Join(p) | Change::Moved(p) => (p, self.intervals.get(&p).copied()),
            Change::Leave(p) => (p, self.intervals.remove(&p)),
        };
        let mut free: BTreeSet<PeerId> = BTreeSet::new();
        if !matches!(change, Change::Leave(_)) {
            free.insert(peer);
        }
        if let Some(old) = old {
            free.extend(
                self.intervals
                    .values()
                    .filter(|iv| iv.peer_id != peer && iv.overlaps(&old))
                    .map(|iv| iv.peer_id),
            );
        }
        let others: Vec<PeerId> = self.intervals.keys().copied().filter(|p| !free.contains(p)).collect();
        free.extend(others.choose_multiple(&mut w.rng, GOSSIP_CANDIDATES).copied());
        let free_pos: Vec<Position> = positions.iter().copied().filter(|p| free.contains(&p.peer_id)).collect();
        let mut fixed: Vec<Interval> = self
            .intervals
            .values()
            .copied()
            .filter(|iv| !free.contains(&iv.peer_id) && iv.peer_id != peer)
            .map(|iv| self.clamp(iv, &positions))
            .collect();
        fixed.extend(self.dedicated(cons.horizon));
        let placed = match sweep_local(&free_pos, &fixed, &cons) {
            Ok(v) => v,
            Err(e) => {
                w.metrics.coverage_incidents += 1;
                e.partial
            }
        };
        for iv in placed {
            self.intervals.insert(iv.peer_id, iv);
        }
    }

    /// Re-centres a stored interval on the peer's current position.
    fn clamp(&self, iv: Interval, positions: &[Position]) -> Interval {
        let c = positions.iter().find(|p| p.peer_id == iv.peer_id).map_or(iv.c, |p| p.c);
        Interval {
            l: iv.l.min(c),
            c,
            r: iv.r.max(c),
            ..iv
        }
    }

    fn refresh_positions(&mut self, w: &World) {
        let head = w.head();
        let horizon = self.effective_horizon(w);
        for (id, iv) in self.intervals.iter_mut() {
            // windows that reached the old horizon follow it
            if iv.r + 1 == horizon {
                iv.r = horizon;
            }
            if let Some(p) = w.peer(*id) {
                let c = p.lag(head);
                iv.l = iv.l.min(c);
                iv.r = iv.r.max(c);
                iv.c = c;
            }
        }
    }

    fn chunk_at_lag(w: &World, lag: Lag) -> Option<ChunkId> {
        w.head().and_then(|h| h.checked_sub(lag))
    }

    fn decile(&self, lag: Lag) -> usize {
        ((lag as u128 * LAG_DECILES as u128) / (self.params.horizon_t as u128 + 1)).min(LAG_DECILES as u128 - 1) as usize
    }

    fn trim(&self, w: &mut World) {
        let Some(head) = w.head() else {
            return;
        };
        for (id, iv) in &self.intervals {
            let Some(p) = w.peers.get_mut(id) else {
                continue;
            };
            let drop: Vec<ChunkId> = p
                .store
                .iter()
                .filter(|&c| {
                    let lag = head.saturating_sub(c);
                    // kept one tick past r
                    lag < iv.l || lag > iv.r + 1
                })
                .collect();
            for c in drop {
                p.store.remove(c);
            }
        }
    }

    /// Best peer holding `chunk`: neighbors of the requester first, then
    /// anyone; fewest busy upload slots, lowest id.
    fn find_holder(&self, w: &World, requester: PeerId, chunk: ChunkId) -> Option<(PeerId, u32)> {
        let me = self.intervals.get(&requester);
        let mut best: Option<(u32, usize, PeerId)> = None;
        for (&id, iv) in &self.intervals {
            if id == requester || !w.holds(id, chunk) {
                continue;
            }
            let hops = if me.is_some_and(|m| m.overlaps(iv)) { 1 } else { 2 };
            let busy = w.active_uploads(id) as usize + w.queued_uploads(id);
            let key = (hops, busy, id);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
        best.map(|(h, _, id)| (id, h))
    }

    fn fill(&mut self, w: &mut World) {
        let now = w.now;
        let expiry = 2.0 * w.stream.chunk_duration();
        self.inflight.retain(|_, t| now - *t < expiry);
        let budget = self.params.fill_budget as usize;
        let ids: Vec<PeerId> = self.intervals.keys().copied().collect();
        for id in ids {
            let iv = self.intervals[&id];
            let Some(p) = w.peer(id) else { continue };
            if !p.is_active() {
                continue;
            }
            let wanted: Vec<ChunkId> = (iv.l..=iv.c)
                .rev()
                .chain(iv.c + 1..=iv.r)
                .filter_map(|lag| Self::chunk_at_lag(w, lag))
                .filter(|&c| !p.store.contains(c) && !self.inflight.contains_key(&(id, c)))
                .take(budget * 4)
                .collect();
            let mut sent = 0;
            for c in wanted {
                if sent == budget {
                    break;
                }
                if let Some((server, hops)) = self.find_holder(w, id, c) {
                    w.send_request(id, server, c, Purpose::Fill, hops);
                    self.inflight.insert((id, c), now);
                    sent += 1;
                }
            }
        }
    }

    fn sample(&self, w: &mut World) {
        let horizon = self.effective_horizon(w);
        let cons = OverlayConstraints::new(self.params.k, horizon, Capacity::Unbounded);
        w.metrics.coverage_samples += 1;
        let ivs = self.all_intervals(horizon);
        if check_k_coverage(&ivs, &cons).is_err() {
            w.metrics.coverage_incident_samples += 1;
        }
        for iv in self.intervals.values() {
            let d = &mut w.metrics.lag_deciles[self.decile(iv.c)];
            d.buffer_sum += iv.len() as f64;
            d.buffer_samples += 1;
        }
    }

    /// Lags in `[0, horizon]` covered by fewer than `k` current intervals.
    pub fn uncovered_lags(&self, w: &World) -> usize {
        let horizon = self.effective_horizon(w);
        coverage_counts(&self.all_intervals(horizon), horizon)
            .into_iter()
            .filter(|&m| m < self.params.k)
            .count()
    }
}

impl OverlayDriver for IntervalOverlay {
    fn kind(&self) -> OverlayKind {
        OverlayKind::Interval
    }

    fn init(&mut self, w: &mut World) {
        if self.params.resweep_period > 0.0 {
            w.schedule_timer(self.params.resweep_period, Owner::Overlay, TimerTag::Maintenance);
        }
    }

    fn on_join(&mut self, w: &mut World, peer: PeerId) {
        self.repair_on_event(w, Change::Join(peer));
        w.count_control(1 + GOSSIP_CANDIDATES as u64);
    }

    fn on_leave(&mut self, w: &mut World, peer: PeerId, _abrupt: bool) {
        self.inflight.retain(|(p, _), _| *p != peer);
        self.repair_on_event(w, Change::Leave(peer));
    }

    fn on_position_change(&mut self, w: &mut World, peer: PeerId) {
        self.repair_on_event(w, Change::Moved(peer));
    }

    fn on_chunk_published(&mut self, w: &mut World, chunk: ChunkId) {
        self.refresh_positions(w);
        let fed: Vec<PeerId> = self
            .intervals
            .values()
            .filter(|iv| iv.l == 0 && w.is_active(iv.peer_id))
            .map(|iv| iv.peer_id)
            .collect();
        for p in fed {
            let _ = w.send_chunk(Endpoint::Producer, p, chunk, Purpose::Fill);
        }
    }

    fn locate(&mut self, w: &mut World, requester: PeerId, chunk: ChunkId) -> Lookup {
        let lag = w.head().map_or(0, |h| h.saturating_sub(chunk));
        w.metrics.lag_deciles[self.decile(lag)].requests += 1;
        if w.holds(requester, chunk) {
            if let Some(p) = w.peers.get_mut(&requester) {
                p.store.touch(chunk);
            }
            return Lookup::Local;
        }
        if let Some((server, hops)) = self.find_holder(w, requester, chunk) {
            return Lookup::Found {
                server: Endpoint::Peer(server),
                hops,
            };
        }
        if self.params.dedicated_server && lag <= self.params.horizon_t {
            return Lookup::Found {
                server: Endpoint::Producer,
                hops: 1,
            };
        }
        Lookup::Missing
    }

    fn on_delivered(&mut self, w: &mut World, dst: PeerId, _src: Endpoint, chunk: ChunkId, _purpose: Purpose) {
        self.inflight.remove(&(dst, chunk));
        let Some(iv) = self.intervals.get(&dst).copied() else {
            return;
        };
        let lag = w.head().map_or(0, |h| h.saturating_sub(chunk));
        if lag < iv.l || lag > iv.r {
            return;
        }
        if let Some(p) = w.peers.get_mut(&dst) {
            let _ = p.store.insert(chunk, false);
        }
    }

    fn on_tick(&mut self, w: &mut World) {
        self.trim(w);
        self.fill(w);
        self.sample(w);
    }

    fn on_timer(&mut self, w: &mut World, owner: Owner, tag: TimerTag) {
        if let (Owner::Overlay, TimerTag::Maintenance) = (owner, tag) {
            self.resweep(w);
            w.schedule_timer(w.now + self.params.resweep_period, owner, tag);
        }
    }

    fn check_invariants(&self, w: &World) -> Result<(), String> {
        for (id, iv) in &self.intervals {
            if !iv.is_valid() {
                return Err(format!("peer {id} interval {iv:?} misordered"));
            }
            if !w.is_active(*id) {
                return Err(format!("departed peer {id} keeps an interval"));
            }
        }
        let active = w.active_peers().count();
        if active != self.intervals.len() {
            return Err(format!("{active} active peers but {} intervals", self.intervals.len()));
        }
        Ok(())
    }
}

/// True when `ivs` satisfy both constraints.
pub fn feasible(ivs: &[Interval], cons: &OverlayConstraints) -> bool {
    check_k_coverage(ivs, cons).is_ok() && check_capacity(ivs, cons).is_ok()
}
