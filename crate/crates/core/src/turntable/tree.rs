//! Tree variant: each sector is a diffusion tree hanging off the producer,
//! with the representants as its top level. Nodes keep availability
//! summaries of their subtrees so requests can be steered up or down.

use std::collections::{BTreeMap, BTreeSet};

use super::summary::{AvailabilitySummary, SummaryMode};
use super::{sector_of_chunk, slot_of_chunk, Turntable, TurntableParams};
use crate::engine::{Endpoint, Lookup, OverlayDriver, OverlayKind, Owner, TimerTag, World};
use crate::stream::ChunkId;
use crate::workload::PeerId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parent {
    Producer,
    Node(PeerId),
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub parent: Parent,
    pub children: Vec<PeerId>,
    pub summary: AvailabilitySummary,
    pub own: BTreeSet<usize>,
    pub capacity: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub server: Option<PeerId>,
    pub hops: u32,
}

/// One sector's tree. Slots are sector-local chunk indices.
#[derive(Debug, Clone)]
pub struct SectorTree {
    pub fanout: usize,
    pub mode: SummaryMode,
    nodes: BTreeMap<PeerId, TreeNode>,
    roots: Vec<PeerId>,
}

impl SectorTree {
    pub fn new(fanout: usize, mode: SummaryMode) -> Self {
        assert!(fanout >= 1);
        Self {
            fanout,
            mode,
            nodes: BTreeMap::new(),
            roots: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, peer: PeerId) -> bool {
        self.nodes.contains_key(&peer)
    }

    pub fn node(&self, peer: PeerId) -> Option<&TreeNode> {
        self.nodes.get(&peer)
    }

    pub fn roots(&self) -> &[PeerId] {
        &self.roots
    }

    pub fn peers(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.nodes.keys().copied()
    }

    fn new_node(&self, parent: Parent, capacity: u32) -> TreeNode {
        TreeNode {
            parent,
            children: Vec::new(),
            summary: AvailabilitySummary::empty(self.mode),
            own: BTreeSet::new(),
            capacity,
        }
    }

    /// Depth below the producer: representants sit at depth 1.
    pub fn depth(&self, peer: PeerId) -> usize {
        let mut d = 1;
        let mut cur = peer;
        while let Some(Parent::Node(p)) = self.nodes.get(&cur).map(|n| n.parent) {
            d += 1;
            cur = p;
        }
        d
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.keys().map(|&p| self.depth(p)).max().unwrap_or(0)
    }

    pub fn add_root(&mut self, peer: PeerId, capacity: u32) {
        let node = self.new_node(Parent::Producer, capacity);
        self.nodes.insert(peer, node);
        self.roots.push(peer);
    }

    /// Whether `node` hangs, through its ancestors, off a current root.
    fn rooted(&self, node: PeerId) -> bool {
        let mut cur = node;
        loop {
            match self.nodes.get(&cur).map(|n| n.parent) {
                Some(Parent::Node(p)) => cur = p,
                Some(Parent::Producer) => return self.roots.contains(&cur),
                None => return false,
            }
        }
    }

    /// Shallowest rooted node with a free child slot, higher upload
    /// capacity first, then lowest id.
    fn attach_point(&self) -> Option<PeerId> {
        self.nodes
            .iter()
            .filter(|(id, n)| n.children.len() < self.fanout && self.rooted(**id))
            .map(|(id, n)| (self.depth(*id), std::cmp::Reverse(n.capacity), *id))
            .min()
            .map(|(_, _, id)| id)
    }

    /// Adds a leaf; returns its parent, or `None` if the tree had no root.
    pub fn attach(&mut self, peer: PeerId, capacity: u32) -> Option<PeerId> {
        let parent = self.attach_point()?;
        let node = self.new_node(Parent::Node(parent), capacity);
        self.nodes.insert(peer, node);
        self.nodes.get_mut(&parent).unwrap().children.push(peer);
        Some(parent)
    }

    fn detach(&mut self, peer: PeerId) -> u64 {
        let parent = self.nodes[&peer].parent;
        match parent {
            Parent::Node(p) => {
                self.nodes.get_mut(&p).unwrap().children.retain(|&c| c != peer);
                self.update_summary(p)
            }
            Parent::Producer => {
                self.roots.retain(|&r| r != peer);
                0
            }
        }
    }

    /// Moves a node with its subtree directly under the producer.
    pub fn promote(&mut self, peer: PeerId) -> u64 {
        if self.roots.contains(&peer) {
            return 0;
        }
        let bytes = self.detach(peer);
        self.nodes.get_mut(&peer).unwrap().parent = Parent::Producer;
        self.roots.push(peer);
        bytes
    }

    /// Re-hangs an orphaned subtree at the best attach point outside it.
    fn reattach(&mut self, orphan: PeerId) -> u64 {
        match self.attach_point() {
            Some(p) => {
                self.nodes.get_mut(&orphan).unwrap().parent = Parent::Node(p);
                self.nodes.get_mut(&p).unwrap().children.push(orphan);
                self.update_summary(p)
            }
            None => {
                self.nodes.get_mut(&orphan).unwrap().parent = Parent::Producer;
                self.roots.push(orphan);
                0
            }
        }
    }

    /// Removes a node. Its children are re-attached after `promote_first`
    /// has been moved to the top level. Returns summary bytes sent.
    pub fn remove(&mut self, peer: PeerId, promote_first: &[PeerId]) -> u64 {
        let Some(node) = self.nodes.get(&peer) else {
            return 0;
        };
        let orphans = node.children.clone();
        let mut bytes = self.detach(peer);
        self.nodes.remove(&peer);
        for &c in &orphans {
            if let Some(n) = self.nodes.get_mut(&c) {
                n.parent = Parent::Producer;
            }
        }
        for &p in promote_first {
            if self.nodes.contains_key(&p) {
                if orphans.contains(&p) {
                    self.roots.push(p);
                } else {
                    bytes += self.promote(p);
                }
            }
        }
        for c in orphans {
            if !promote_first.contains(&c) {
                bytes += self.reattach(c);
            }
        }
        bytes
    }

    /// Recomputes a node's summary from its own slots and its children and
    /// walks up while summaries change. Returns bytes sent to parents.
    pub fn update_summary(&mut self, peer: PeerId) -> u64 {
        let mut bytes = 0;
        let mut cur = peer;
        loop {
            let Some(node) = self.nodes.get(&cur) else {
                return bytes;
            };
            let mut s = AvailabilitySummary::from_slots(self.mode, node.own.iter().copied());
            for c in &node.children {
                s.union_with(&self.nodes[c].summary);
            }
            if s.same_content(&node.summary) {
                return bytes;
            }
            let node = self.nodes.get_mut(&cur).unwrap();
            s.generation = node.summary.generation + 1;
            node.summary = s;
            bytes += node.summary.wire_bytes();
            match node.parent {
                Parent::Node(p) => cur = p,
                Parent::Producer => return bytes,
            }
        }
    }

    pub fn add_own(&mut self, peer: PeerId, slot: usize) -> u64 {
        let changed = self.nodes.get_mut(&peer).is_some_and(|n| n.own.insert(slot));
        if changed {
            self.update_summary(peer)
        } else {
            0
        }
    }

    pub fn remove_own(&mut self, peer: PeerId, slot: usize) -> u64 {
        let changed = self.nodes.get_mut(&peer).is_some_and(|n| n.own.remove(&slot));
        if changed {
            self.update_summary(peer)
        } else {
            0
        }
    }

    pub fn holders(&self, slot: usize) -> Vec<PeerId> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.own.contains(&slot))
            .map(|(id, _)| *id)
            .collect()
    }

    /// Every node, deepest first, lowest id on ties.
    pub fn deepest_first(&self) -> Vec<PeerId> {
        let mut v: Vec<(std::cmp::Reverse<usize>, PeerId)> = self
            .nodes
            .keys()
            .map(|&p| (std::cmp::Reverse(self.depth(p)), p))
            .collect();
        v.sort();
        v.into_iter().map(|(_, p)| p).collect()
    }

    /// Summary-guided search from `start`: serve locally, else descend into
    /// the first child claiming the slot, else climb. A subtree that turns
    /// out empty (Bloom false positive) is left and never re-entered. When
    /// the climb reaches the producer it tries the other representants.
    pub fn route(&self, start: PeerId, slot: usize) -> Route {
        let mut exhausted: BTreeSet<PeerId> = BTreeSet::new();
        let mut hops = 0;
        let Some(mut cur) = self.nodes.contains_key(&start).then_some(start) else {
            return Route { server: None, hops };
        };
        loop {
            let node = &self.nodes[&cur];
            if node.own.contains(&slot) {
                return Route {
                    server: Some(cur),
                    hops,
                };
            }
            let down = node
                .children
                .iter()
                .copied()
                .find(|c| !exhausted.contains(c) && self.nodes[c].summary.claims(slot));
            if let Some(c) = down {
                cur = c;
                hops += 1;
                continue;
            }
            exhausted.insert(cur);
            match node.parent {
                Parent::Node(p) => {
                    cur = p;
                    hops += 1;
                }
                Parent::Producer => {
                    hops += 1;
                    let next = self
                        .roots
                        .iter()
                        .copied()
                        .find(|r| !exhausted.contains(r) && self.nodes[r].summary.claims(slot));
                    match next {
                        Some(r) => {
                            cur = r;
                            hops += 1;
                        }
                        None => return Route { server: None, hops },
                    }
                }
            }
        }
    }

    pub fn check(&self) -> Result<(), String> {
        let mut reached = BTreeSet::new();
        let mut stack: Vec<PeerId> = self.roots.clone();
        for r in &self.roots {
            if self.nodes.get(r).map(|n| n.parent) != Some(Parent::Producer) {
                return Err(format!("root {r} does not hang off the producer"));
            }
        }
        while let Some(p) = stack.pop() {
            if !reached.insert(p) {
                return Err(format!("node {p} reached twice"));
            }
            let n = self.nodes.get(&p).ok_or(format!("dangling node {p}"))?;
            if n.children.len() > self.fanout {
                return Err(format!("node {p} has {} children > fanout {}", n.children.len(), self.fanout));
            }
            for &c in &n.children {
                if self.nodes.get(&c).map(|x| x.parent) != Some(Parent::Node(p)) {
                    return Err(format!("child {c} of {p} points elsewhere"));
                }
                stack.push(c);
            }
        }
        if reached.len() != self.nodes.len() {
            return Err(format!("{} nodes unreachable from the roots", self.nodes.len() - reached.len()));
        }
        for (&p, n) in &self.nodes {
            let mut expect = AvailabilitySummary::from_slots(self.mode, n.own.iter().copied());
            for c in &n.children {
                expect.union_with(&self.nodes[c].summary);
            }
            if !expect.same_content(&n.summary) {
                return Err(format!("stale summary at node {p}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub fanout: usize,
    pub mode: SummaryMode,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            fanout: 3,
            mode: SummaryMode::Exact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmergencyOutcome {
    Restored,
    /// Holders remained but too few nodes had room.
    Deficit,
    PermanentLoss,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmergencyRecord {
    pub chunk: ChunkId,
    pub detected_at: f64,
    pub fired_at: f64,
    pub before: usize,
    pub after: usize,
    pub target: usize,
    pub outcome: EmergencyOutcome,
}

pub struct TreeOverlay {
    pub turntable: Turntable,
    pub params: TreeParams,
    pub trees: Vec<SectorTree>,
    holders: BTreeMap<ChunkId, BTreeSet<PeerId>>,
    pending: BTreeMap<ChunkId, (f64, usize)>,
    pub emergency_log: Vec<EmergencyRecord>,
}

impl TreeOverlay {
    pub fn new(tt: TurntableParams, params: TreeParams) -> Self {
        Self {
            turntable: Turntable::new(tt),
            params,
            trees: (0..tt.m).map(|_| SectorTree::new(params.fanout, params.mode)).collect(),
            holders: BTreeMap::new(),
            pending: BTreeMap::new(),
            emergency_log: Vec::new(),
        }
    }

    fn m(&self) -> usize {
        self.turntable.m()
    }

    pub fn replica_count(&self, chunk: ChunkId) -> usize {
        self.holders.get(&chunk).map_or(0, BTreeSet::len)
    }

    fn pin_at(&mut self, w: &mut World, peer: PeerId, chunk: ChunkId) -> bool {
        if !w.pin(peer, chunk) {
            return false;
        }
        self.holders.entry(chunk).or_default().insert(peer);
        let m = self.m();
        let bytes = self.trees[sector_of_chunk(chunk, m)].add_own(peer, slot_of_chunk(chunk, m));
        w.metrics.summary_overhead_bytes += bytes;
        true
    }

    /// Pins `chunk` on up to `want` more nodes of its sector, deepest first.
    fn place(&mut self, w: &mut World, chunk: ChunkId, want: usize, exclude: Option<PeerId>) -> usize {
        let s = sector_of_chunk(chunk, self.m());
        let mut placed = 0;
        for p in self.trees[s].deepest_first() {
            if placed == want {
                break;
            }
            if Some(p) == exclude || w.holds(p, chunk) {
                continue;
            }
            if w.peer(p).is_some_and(|x| x.store.can_pin()) && self.pin_at(w, p, chunk) {
                placed += 1;
            }
        }
        placed
    }

    fn target(&self, chunk: ChunkId) -> usize {
        let size = self.turntable.sector(sector_of_chunk(chunk, self.m())).members.len();
        self.turntable.params.k_rep.min(size)
    }

    fn fire_emergency(&mut self, w: &mut World, chunk: ChunkId) {
        let Some((detected_at, before)) = self.pending.remove(&chunk) else {
            return;
        };
        w.metrics.emergency_rounds += 1;
        let current: Vec<PeerId> = self
            .holders
            .get(&chunk)
            .map(|h| h.iter().copied().filter(|&p| w.is_active(p)).collect())
            .unwrap_or_default();
        let target = self.target(chunk);
        let source = match current.first() {
            Some(&p) => Some(Endpoint::Peer(p)),
            None if w.params.producer_archive => Some(Endpoint::Producer),
            None => None,
        };
        let (after, outcome) = match source {
            None => {
                w.metrics.permanent_losses += 1;
                (0, EmergencyOutcome::PermanentLoss)
            }
            Some(src) => {
                let need = target.saturating_sub(current.len());
                let placed = self.place(w, chunk, need, None);
                w.account_copies(src, placed as u64);
                w.count_control(placed as u64);
                let after = current.len() + placed;
                if after >= target {
                    w.metrics.emergency_restored += 1;
                    (after, EmergencyOutcome::Restored)
                } else {
                    w.metrics.replica_deficits += (target - after) as u64;
                    (after, EmergencyOutcome::Deficit)
                }
            }
        };
        self.emergency_log.push(EmergencyRecord {
            chunk,
            detected_at,
            fired_at: w.now,
            before,
            after,
            target,
            outcome,
        });
    }

    /// Time for a representant to ask a holder and receive the chunk.
    pub fn emergency_round_trip(w: &World) -> f64 {
        let slots = w.params.default_cap.max(1) as f64;
        let transfer = w.chunk_bytes() as f64 * 8.0 * slots / w.params.peer_upload_bps;
        2.0 * w.params.hop_latency + transfer
    }
}

impl OverlayDriver for TreeOverlay {
    fn kind(&self) -> OverlayKind {
        OverlayKind::Tree
    }

    fn on_join(&mut self, w: &mut World, peer: PeerId) {
        let cap = w.upload_slots(peer);
        let (s, change) = self.turntable.join(peer, w.now);
        if change.added.contains(&peer) {
            self.trees[s].add_root(peer, cap);
        } else {
            self.trees[s].attach(peer, cap);
        }
        w.count_control(1);
    }

    fn on_leave(&mut self, w: &mut World, peer: PeerId, abrupt: bool) {
        let Some(s) = self.turntable.sector_of_peer(peer) else {
            return;
        };
        let pinned: Vec<ChunkId> = w.peer(peer).map(|p| p.store.pinned().collect()).unwrap_or_default();
        for &c in &pinned {
            if let Some(h) = self.holders.get_mut(&c) {
                h.remove(&peer);
            }
        }
        if !abrupt {
            for &c in &pinned {
                if self.place(w, c, 1, Some(peer)) == 1 {
                    w.account_copies(Endpoint::Peer(peer), 1);
                } else {
                    w.metrics.pin_drops += 1;
                }
            }
        }
        let (_, change) = self.turntable.leave(peer).expect("member");
        let bytes = self.trees[s].remove(peer, &change.added);
        w.metrics.summary_overhead_bytes += bytes;
        let size = self.turntable.sector(s).members.len();
        let k_min = self.turntable.params.k_min.min(size);
        let rtt = Self::emergency_round_trip(w);
        for c in pinned {
            let n = self.replica_count(c);
            if (n < k_min || n == 0) && !self.pending.contains_key(&c) {
                self.pending.insert(c, (w.now, n));
                w.schedule_timer(w.now + rtt, Owner::Overlay, TimerTag::Emergency { chunk: c });
            }
        }
    }

    fn on_chunk_published(&mut self, w: &mut World, chunk: ChunkId) {
        if self.turntable.publish(w, chunk).is_none() {
            return;
        }
        let k_rep = self.turntable.params.k_rep;
        let placed = self.place(w, chunk, k_rep, None);
        w.account_copies(Endpoint::Peer(0), placed as u64);
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
        let (start, entry_hops) = if self.trees[s].contains(requester) {
            (Some(requester), 0)
        } else {
            (self.turntable.entry_point(requester, s), 1)
        };
        let Some(start) = start else {
            self.turntable.forget_served(requester);
            return Lookup::Missing;
        };
        let route = self.trees[s].route(start, slot_of_chunk(chunk, self.m()));
        match route.server {
            Some(z) => {
                self.turntable.note_served(requester, chunk, z);
                Lookup::Found {
                    server: Endpoint::Peer(z),
                    hops: route.hops + entry_hops,
                }
            }
            None => {
                w.count_control((route.hops + entry_hops) as u64);
                self.turntable.forget_served(requester);
                Lookup::Missing
            }
        }
    }

    fn on_timer(&mut self, w: &mut World, _owner: Owner, tag: TimerTag) {
        if let TimerTag::Emergency { chunk } = tag {
            self.fire_emergency(w, chunk);
        }
    }

    fn check_invariants(&self, w: &World) -> Result<(), String> {
        self.turntable.check(w)?;
        for (i, t) in self.trees.iter().enumerate() {
            t.check().map_err(|e| format!("sector {i}: {e}"))?;
            let members = &self.turntable.sector(i).members;
            if t.len() != members.len() || t.peers().any(|p| !members.contains(&p)) {
                return Err(format!("sector {i}: tree and membership disagree"));
            }
            let mut roots: Vec<PeerId> = t.roots().to_vec();
            roots.sort();
            let mut reps = self.turntable.sector(i).representants.clone();
            reps.sort();
            if roots != reps {
                return Err(format!("sector {i}: tree roots {roots:?} != representants {reps:?}"));
            }
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
