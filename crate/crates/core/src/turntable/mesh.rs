//! Mesh variant: sector members gossip partial views, color themselves
//! toward a domatic partition, and keep each chunk only on peers of the
//! chunk's color.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::IndexedRandom;
use rand::Rng;

use super::{sector_of_chunk, Turntable, TurntableParams};
use crate::engine::{Endpoint, Lookup, OverlayDriver, OverlayKind, Owner, TimerTag, World};
use crate::stream::ChunkId;
use crate::workload::PeerId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshParams {
    pub colors: usize,
    pub gossip_period: f64,
    pub max_degree: usize,
    pub request_ttl: u32,
}

impl Default for MeshParams {
    fn default() -> Self {
        Self {
            colors: 3,
            gossip_period: 10.0,
            max_degree: 8,
            request_ttl: 8,
        }
    }
}

pub fn chunk_color(chunk: ChunkId, m: usize, colors: usize) -> usize {
    ((chunk / m as u64) % colors as u64) as usize
}

/// Least represented color among `neighbor_colors`, lowest on ties.
pub fn least_represented(neighbor_colors: impl IntoIterator<Item = usize>, colors: usize) -> usize {
    let mut counts = vec![0usize; colors];
    for c in neighbor_colors {
        counts[c] += 1;
    }
    (0..colors).min_by_key(|&c| (counts[c], c)).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewEntry {
    pub peer: PeerId,
    pub age: u32,
}

#[derive(Debug, Clone, Default)]
pub struct MeshPeer {
    pub color: usize,
    pub view: Vec<ViewEntry>,
    pub last_gossip: f64,
    missing_streak: u32,
    /// Own-color pinned chunks each neighbor advertised at the last exchange.
    offered: BTreeMap<PeerId, BTreeSet<ChunkId>>,
}

impl MeshPeer {
    pub fn neighbors(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.view.iter().map(|e| e.peer)
    }

    fn knows(&self, p: PeerId) -> bool {
        self.view.iter().any(|e| e.peer == p)
    }
}

pub struct MeshOverlay {
    pub turntable: Turntable,
    pub params: MeshParams,
    pub peers: BTreeMap<PeerId, MeshPeer>,
    holders: BTreeMap<ChunkId, BTreeSet<PeerId>>,
    gap_pins: BTreeSet<(PeerId, ChunkId)>,
    /// `(time, undominated, peers)` at every maintenance sample.
    pub domination_log: Vec<(f64, u64, u64)>,
}

const SHUFFLE_LEN: usize = 4;
const REPAIR_PUSHES_PER_ROUND: usize = 4;

impl MeshOverlay {
    pub fn new(tt: TurntableParams, params: MeshParams) -> Self {
        assert!(params.colors >= 1 && params.max_degree >= 1);
        Self {
            turntable: Turntable::new(tt),
            params,
            peers: BTreeMap::new(),
            holders: BTreeMap::new(),
            gap_pins: BTreeSet::new(),
            domination_log: Vec::new(),
        }
    }

    fn m(&self) -> usize {
        self.turntable.m()
    }

    pub fn color_of_chunk(&self, chunk: ChunkId) -> usize {
        chunk_color(chunk, self.m(), self.params.colors)
    }

    pub fn color(&self, p: PeerId) -> Option<usize> {
        self.peers.get(&p).map(|x| x.color)
    }

    fn live_neighbors(&self, w: &World, p: PeerId) -> Vec<PeerId> {
        self.peers
            .get(&p)
            .map(|x| x.neighbors().filter(|&n| w.is_active(n) && self.peers.contains_key(&n)).collect())
            .unwrap_or_default()
    }

    /// Adds `entry` to `p`'s view, evicting the oldest entry on overflow.
    fn merge_entry(&mut self, p: PeerId, entry: ViewEntry) {
        let max = self.params.max_degree;
        let Some(x) = self.peers.get_mut(&p) else {
            return;
        };
        if entry.peer == p {
            return;
        }
        if let Some(e) = x.view.iter_mut().find(|e| e.peer == entry.peer) {
            e.age = e.age.min(entry.age);
            return;
        }
        x.view.push(entry);
        if x.view.len() > max {
            let (i, _) = x
                .view
                .iter()
                .enumerate()
                .max_by_key(|(_, e)| (e.age, e.peer))
                .unwrap();
            let gone = x.view.remove(i).peer;
            x.offered.remove(&gone);
        }
    }

    fn sample_view(&self, w: &mut World, p: PeerId, exclude: PeerId, n: usize) -> Vec<ViewEntry> {
        let entries: Vec<ViewEntry> = self.peers[&p]
            .view
            .iter()
            .copied()
            .filter(|e| e.peer != exclude)
            .collect();
        entries.choose_multiple(&mut w.rng, n).copied().collect()
    }

    fn offered_by(&self, w: &World, p: PeerId) -> BTreeSet<ChunkId> {
        let color = self.peers[&p].color;
        w.peer(p)
            .map(|x| x.store.pinned().filter(|&c| self.color_of_chunk(c) == color).collect())
            .unwrap_or_default()
    }

    /// True when every color appears in `p`'s closed neighborhood.
    pub fn dominated(&self, w: &World, p: PeerId) -> bool {
        let mut seen = vec![false; self.params.colors];
        seen[self.peers[&p].color] = true;
        for n in self.live_neighbors(w, p) {
            seen[self.peers[&n].color] = true;
        }
        seen.into_iter().all(|s| s)
    }

    /// Fraction of active mesh peers missing some color around them.
    pub fn domination_violation_now(&self, w: &World) -> f64 {
        let n = self.peers.len();
        if n == 0 {
            return 0.0;
        }
        let bad = self.peers.keys().filter(|&&p| !self.dominated(w, p)).count();
        bad as f64 / n as f64
    }

    pub fn assign_color(&self, w: &World, p: PeerId) -> usize {
        let colors: Vec<usize> = self
            .live_neighbors(w, p)
            .into_iter()
            .map(|n| self.peers[&n].color)
            .collect();
        least_represented(colors, self.params.colors)
    }

    fn pin_at(&mut self, w: &mut World, p: PeerId, chunk: ChunkId, gap: bool) -> bool {
        if !w.peer(p).is_some_and(|x| x.store.can_pin()) || !w.pin(p, chunk) {
            return false;
        }
        self.holders.entry(chunk).or_default().insert(p);
        if gap {
            self.gap_pins.insert((p, chunk));
        }
        true
    }

    fn unpin_at(&mut self, w: &mut World, p: PeerId, chunk: ChunkId) {
        w.unpin_remove(p, chunk);
        self.gap_pins.remove(&(p, chunk));
        if let Some(h) = self.holders.get_mut(&chunk) {
            h.remove(&p);
        }
    }

    pub fn replica_count(&self, chunk: ChunkId) -> usize {
        self.holders.get(&chunk).map_or(0, BTreeSet::len)
    }

    /// Pinned replicas whose holder's color differs from the chunk color,
    /// gap pins excluded.
    pub fn color_law_violations(&self, w: &World) -> u64 {
        let mut bad = 0;
        for (p, st) in &self.peers {
            if let Some(x) = w.peer(*p) {
                bad += x
                    .store
                    .pinned()
                    .filter(|&c| self.color_of_chunk(c) != st.color && !self.gap_pins.contains(&(*p, c)))
                    .count() as u64;
            }
        }
        bad
    }

    pub fn mesh_pins(&self, w: &World) -> u64 {
        self.peers
            .keys()
            .filter_map(|p| w.peer(*p))
            .map(|x| x.store.pinned_len() as u64)
            .sum::<u64>()
            - self.gap_pins.len() as u64
    }

    /// Same-color breadth-first diffusion from the sector's representants.
    fn colored_diffuse(&mut self, w: &mut World, chunk: ChunkId, reps: &[PeerId]) -> usize {
        let col = self.color_of_chunk(chunk);
        let k_rep = self.turntable.params.k_rep;
        let mut placed = 0;
        let mut seen: BTreeSet<PeerId> = reps.iter().copied().collect();
        let mut queue: VecDeque<PeerId> = reps.iter().copied().collect();
        let mut reached_color = false;
        while let Some(u) = queue.pop_front() {
            if placed == k_rep {
                break;
            }
            if self.peers[&u].color == col {
                reached_color = true;
                if self.pin_at(w, u, chunk, false) {
                    placed += 1;
                }
            }
            for v in self.live_neighbors(w, u) {
                if self.peers[&v].color == col && seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        if !reached_color {
            w.metrics.coloring_gaps += 1;
            if self.pin_at(w, reps[0], chunk, true) {
                placed += 1;
            }
        }
        placed
    }

    fn handover(&mut self, w: &mut World, from: PeerId, chunk: ChunkId, color: usize) -> bool {
        let s = sector_of_chunk(chunk, self.m());
        let mut candidates: Vec<PeerId> = self.live_neighbors(w, from);
        candidates.extend(self.turntable.sector(s).members.iter().copied());
        for p in candidates {
            if p == from || self.peers.get(&p).is_none_or(|x| x.color != color) || w.holds(p, chunk) {
                continue;
            }
            if self.pin_at(w, p, chunk, false) {
                w.account_copies(Endpoint::Peer(from), 1);
                return true;
            }
        }
        false
    }

    fn recolor(&mut self, w: &mut World, p: PeerId) {
        let old = self.peers[&p].color;
        let new = self.assign_color(w, p);
        if new == old {
            return;
        }
        self.peers.get_mut(&p).unwrap().color = new;
        w.metrics.recolorings += 1;
        let pins: Vec<ChunkId> = w
            .peer(p)
            .map(|x| x.store.pinned().filter(|&c| self.color_of_chunk(c) == old).collect())
            .unwrap_or_default();
        for c in pins {
            if self.gap_pins.contains(&(p, c)) {
                continue;
            }
            if self.handover(w, p, c, old) {
                self.unpin_at(w, p, c);
            } else if self.replica_count(c) > 1 {
                self.unpin_at(w, p, c);
                w.metrics.pin_drops += 1;
            } else {
                // sole copy: keep it, flagged
                self.gap_pins.insert((p, c));
                w.metrics.coloring_gaps += 1;
            }
        }
    }

    fn bootstrap(&mut self, w: &mut World, p: PeerId) {
        let Some(s) = self.turntable.sector_of_peer(p) else {
            return;
        };
        let sector = self.turntable.sector(s);
        let rep = self
            .turntable
            .entry_point(p, s)
            .filter(|&r| r != p)
            .or_else(|| sector.members.iter().copied().find(|&q| q != p && self.peers.contains_key(&q)));
        let Some(rep) = rep else {
            return;
        };
        w.count_control(2);
        let sample = self.sample_view(w, rep, p, self.params.max_degree - 1);
        self.merge_entry(p, ViewEntry { peer: rep, age: 0 });
        for e in sample {
            self.merge_entry(p, e);
        }
        self.merge_entry(rep, ViewEntry { peer: p, age: 0 });
    }

    fn gossip_round(&mut self, w: &mut World, p: PeerId) {
        let now = w.now;
        {
            let x = self.peers.get_mut(&p).unwrap();
            x.last_gossip = now;
            for e in &mut x.view {
                e.age += 1;
            }
        }
        let active: BTreeSet<PeerId> = self.peers[&p]
            .neighbors()
            .filter(|&n| w.is_active(n) && self.peers.contains_key(&n))
            .collect();
        let x = self.peers.get_mut(&p).unwrap();
        x.view.retain(|e| active.contains(&e.peer));
        x.offered.retain(|k, _| active.contains(k));
        if x.view.is_empty() {
            self.bootstrap(w, p);
        }
        let neighbors: Vec<PeerId> = self.peers[&p].neighbors().collect();
        if let Some(&q) = neighbors.choose(&mut w.rng) {
            let mine = self.sample_view(w, p, q, SHUFFLE_LEN);
            let theirs = self.sample_view(w, q, p, SHUFFLE_LEN);
            w.count_control(2);
            for e in theirs {
                self.merge_entry(p, e);
            }
            self.merge_entry(p, ViewEntry { peer: q, age: 0 });
            for e in mine {
                self.merge_entry(q, e);
            }
            self.merge_entry(q, ViewEntry { peer: p, age: 0 });
            let offer_q = self.offered_by(w, q);
            let offer_p = self.offered_by(w, p);
            if let Some(x) = self.peers.get_mut(&p) {
                if x.knows(q) {
                    x.offered.insert(q, offer_q);
                }
            }
            if let Some(y) = self.peers.get_mut(&q) {
                if y.knows(p) {
                    y.offered.insert(p, offer_p);
                }
            }
        }
        if self.dominated(w, p) {
            self.peers.get_mut(&p).unwrap().missing_streak = 0;
        } else {
            let x = self.peers.get_mut(&p).unwrap();
            x.missing_streak += 1;
            if x.missing_streak >= 2 {
                x.missing_streak = 0;
                self.recolor(w, p);
            }
        }
        self.repair(w, p);
    }

    /// Tops up under-replicated own-color chunks and moves flagged pins to
    /// a peer of the right color when one shows up.
    fn repair(&mut self, w: &mut World, p: PeerId) {
        let color = self.peers[&p].color;
        let k_rep = self.turntable.params.k_rep;
        let pins: Vec<ChunkId> = w.peer(p).map(|x| x.store.pinned().collect()).unwrap_or_default();
        let mut pushes = 0;
        for c in pins {
            if pushes == REPAIR_PUSHES_PER_ROUND {
                break;
            }
            let col = self.color_of_chunk(c);
            let gap = self.gap_pins.contains(&(p, c));
            if gap {
                if col == color {
                    self.gap_pins.remove(&(p, c));
                } else if self.handover(w, p, c, col) {
                    self.unpin_at(w, p, c);
                    pushes += 1;
                }
                continue;
            }
            if col != color || self.replica_count(c) >= k_rep {
                continue;
            }
            let target = self
                .live_neighbors(w, p)
                .into_iter()
                .find(|&n| self.peers[&n].color == col && !w.holds(n, c) && w.peer(n).is_some_and(|x| x.store.can_pin()));
            if let Some(n) = target {
                if self.pin_at(w, n, c, false) {
                    w.account_copies(Endpoint::Peer(p), 1);
                    pushes += 1;
                }
            }
        }
    }

    /// Greedy color-directed search starting at `start`.
    pub fn route(&self, w: &mut World, start: PeerId, chunk: ChunkId, ttl: u32) -> (Option<PeerId>, u32, u32) {
        let col = self.color_of_chunk(chunk);
        let mut cur = start;
        let mut visited = BTreeSet::from([start]);
        let mut hops = 0;
        let mut detours = 0;
        let mut ttl = ttl;
        loop {
            if w.holds(cur, chunk) {
                return (Some(cur), hops, detours);
            }
            if ttl == 0 {
                return (None, hops, detours);
            }
            let fresh: Vec<PeerId> = self
                .live_neighbors(w, cur)
                .into_iter()
                .filter(|n| !visited.contains(n))
                .collect();
            let same: Vec<PeerId> = fresh.iter().copied().filter(|n| self.peers[n].color == col).collect();
            let offered = &self.peers[&cur].offered;
            let next = same
                .iter()
                .copied()
                .find(|n| offered.get(n).is_some_and(|o| o.contains(&chunk)))
                .or_else(|| same.choose(&mut w.rng).copied())
                .or_else(|| {
                    let d = fresh.choose(&mut w.rng).copied();
                    detours += d.is_some() as u32;
                    d
                });
            let Some(next) = next else {
                return (None, hops, detours);
            };
            visited.insert(next);
            cur = next;
            hops += 1;
            ttl -= 1;
        }
    }
}

impl OverlayDriver for MeshOverlay {
    fn kind(&self) -> OverlayKind {
        OverlayKind::Mesh
    }

    fn init(&mut self, w: &mut World) {
        w.schedule_timer(self.params.gossip_period, Owner::Overlay, TimerTag::Maintenance);
    }

    fn on_join(&mut self, w: &mut World, peer: PeerId) {
        self.turntable.join(peer, w.now);
        self.peers.insert(
            peer,
            MeshPeer {
                last_gossip: w.now,
                ..Default::default()
            },
        );
        self.bootstrap(w, peer);
        let learned: Vec<PeerId> = self.peers[&peer].neighbors().collect();
        for n in learned {
            self.merge_entry(n, ViewEntry { peer, age: 0 });
        }
        let color = self.assign_color(w, peer);
        self.peers.get_mut(&peer).unwrap().color = color;
        let phase = w.rng.random::<f64>() * self.params.gossip_period;
        w.schedule_timer(w.now + phase, Owner::Peer(peer), TimerTag::Gossip);
    }

    fn on_leave(&mut self, w: &mut World, peer: PeerId, abrupt: bool) {
        let pinned: Vec<ChunkId> = w.peer(peer).map(|p| p.store.pinned().collect()).unwrap_or_default();
        for &c in &pinned {
            if let Some(h) = self.holders.get_mut(&c) {
                h.remove(&peer);
            }
            self.gap_pins.remove(&(peer, c));
        }
        let color_known = self.peers.contains_key(&peer);
        if !abrupt && color_known {
            for &c in &pinned {
                let col = self.color_of_chunk(c);
                if !self.handover(w, peer, c, col) {
                    w.metrics.pin_drops += 1;
                }
            }
        }
        self.turntable.leave(peer);
        self.peers.remove(&peer);
        for c in pinned {
            if self.replica_count(c) == 0 && !w.params.producer_archive {
                w.metrics.permanent_losses += 1;
            }
        }
    }

    fn on_chunk_published(&mut self, w: &mut World, chunk: ChunkId) {
        let Some((_, reps)) = self.turntable.publish(w, chunk) else {
            return;
        };
        let placed = self.colored_diffuse(w, chunk, &reps);
        w.account_copies(Endpoint::Peer(reps[0]), placed as u64);
        let k_rep = self.turntable.params.k_rep;
        if placed < k_rep {
            w.metrics.replica_deficits += (k_rep - placed) as u64;
        }
    }

    fn locate(&mut self, w: &mut World, requester: PeerId, chunk: ChunkId) -> Lookup {
        if w.holds(requester, chunk) {
            self.turntable.note_served(requester, chunk, requester);
            return Lookup::Local;
        }
        if self.turntable.retained.contains(&chunk) {
            self.turntable.forget_served(requester);
            return Lookup::Found {
                server: Endpoint::Producer,
                hops: 1,
            };
        }
        if let Some(z) = self.turntable.handoff(w, requester, chunk) {
            self.turntable.note_served(requester, chunk, z);
            return Lookup::Found {
                server: Endpoint::Peer(z),
                hops: 1,
            };
        }
        let s = sector_of_chunk(chunk, self.m());
        let (start, entry_hops) = if self.turntable.sector_of_peer(requester) == Some(s) {
            (Some(requester), 0)
        } else {
            (self.turntable.entry_point(requester, s), 1)
        };
        let Some(start) = start else {
            self.turntable.forget_served(requester);
            return Lookup::Missing;
        };
        let (server, hops, detours) = self.route(w, start, chunk, self.params.request_ttl);
        w.metrics.routing_detours += detours as u64;
        match server {
            Some(z) if z != requester => {
                self.turntable.note_served(requester, chunk, z);
                Lookup::Found {
                    server: Endpoint::Peer(z),
                    hops: hops + entry_hops,
                }
            }
            Some(_) => Lookup::Local,
            None => {
                w.count_control((hops + entry_hops) as u64);
                self.turntable.forget_served(requester);
                Lookup::Missing
            }
        }
    }

    fn on_timer(&mut self, w: &mut World, owner: Owner, tag: TimerTag) {
        match (owner, tag) {
            (Owner::Peer(p), TimerTag::Gossip) => {
                if w.is_active(p) && self.peers.contains_key(&p) {
                    self.gossip_round(w, p);
                    w.schedule_timer(w.now + self.params.gossip_period, owner, tag);
                }
            }
            (Owner::Overlay, TimerTag::Maintenance) => {
                let n = self.peers.len() as u64;
                let bad = self.peers.keys().filter(|&&p| !self.dominated(w, p)).count() as u64;
                w.metrics.domination_samples += n;
                w.metrics.domination_violations += bad;
                self.domination_log.push((w.now, bad, n));
                w.schedule_timer(w.now + self.params.gossip_period, owner, tag);
            }
            _ => {}
        }
    }

    fn check_invariants(&self, w: &World) -> Result<(), String> {
        self.turntable.check(w)?;
        for (p, x) in &self.peers {
            if x.view.len() > self.params.max_degree {
                return Err(format!("peer {p} view {} > {}", x.view.len(), self.params.max_degree));
            }
            if x.knows(*p) {
                return Err(format!("peer {p} lists itself"));
            }
            if x.color >= self.params.colors {
                return Err(format!("peer {p} has color {}", x.color));
            }
        }
        let bad = self.color_law_violations(w);
        if bad > 0 {
            return Err(format!("{bad} pinned replicas off their color"));
        }
        for (&c, h) in &self.holders {
            for &p in h {
                if !w.peer(p).is_some_and(|x| x.is_active() && x.store.is_pinned(c)) {
                    return Err(format!("holder registry lists {p} for chunk {c}"));
                }
            }
        }
        Ok(())
    }
}
