//! The rotating sector structure shared by the tree and mesh variants.
//!
//! Chunk `c` belongs to sector `c mod m`. Every peer joins one sector; the
//! longest-lived members of a sector act as its representants and receive
//! fresh chunks from the producer. A client playing consecutive chunks
//! therefore hops from sector to sector, and servers keep a couple of links
//! into the next sector to shortcut that hop.

pub mod mesh;
pub mod summary;
pub mod tree;

use std::collections::{BTreeMap, BTreeSet};

use crate::engine::{Endpoint, World};
use crate::stream::ChunkId;
use crate::workload::PeerId;

pub const MAX_LINKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurntableParams {
    pub m: usize,
    pub representants: usize,
    pub k_rep: usize,
    pub k_min: usize,
}

impl Default for TurntableParams {
    fn default() -> Self {
        Self {
            m: 12,
            representants: 2,
            k_rep: 3,
            k_min: 2,
        }
    }
}

pub fn sector_of_chunk(chunk: ChunkId, m: usize) -> usize {
    assert!(m >= 1, "turntable needs at least one sector");
    (chunk % m as u64) as usize
}

/// Position of a chunk among the chunks of its own sector.
pub fn slot_of_chunk(chunk: ChunkId, m: usize) -> usize {
    (chunk / m as u64) as usize
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sector {
    pub index: usize,
    pub members: BTreeSet<PeerId>,
    pub representants: Vec<PeerId>,
}

/// Representant set before and after a membership change.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RepChange {
    pub added: Vec<PeerId>,
    pub removed: Vec<PeerId>,
}

#[derive(Debug, Clone)]
pub struct Turntable {
    pub params: TurntableParams,
    pub sectors: Vec<Sector>,
    member_sector: BTreeMap<PeerId, usize>,
    seniority: BTreeMap<PeerId, (f64, PeerId)>,
    links: BTreeMap<PeerId, Vec<PeerId>>,
    last_served: BTreeMap<PeerId, (PeerId, ChunkId)>,
    /// Chunks published while their sector was empty; the producer keeps
    /// and serves them.
    pub retained: BTreeSet<ChunkId>,
    /// Sector targeted by each publication, in order.
    pub rotation: Vec<usize>,
    record_rotation: bool,
}

impl Turntable {
    pub fn new(params: TurntableParams) -> Self {
        assert!(params.m >= 1 && params.representants >= 1);
        Self {
            params,
            sectors: (0..params.m)
                .map(|index| Sector {
                    index,
                    ..Default::default()
                })
                .collect(),
            member_sector: BTreeMap::new(),
            seniority: BTreeMap::new(),
            links: BTreeMap::new(),
            last_served: BTreeMap::new(),
            retained: BTreeSet::new(),
            rotation: Vec::new(),
            record_rotation: false,
        }
    }

    pub fn with_rotation_log(mut self) -> Self {
        self.record_rotation = true;
        self
    }

    pub fn m(&self) -> usize {
        self.params.m
    }

    pub fn sector_of_peer(&self, peer: PeerId) -> Option<usize> {
        self.member_sector.get(&peer).copied()
    }

    pub fn sector(&self, index: usize) -> &Sector {
        &self.sectors[index]
    }

    pub fn is_representant(&self, peer: PeerId) -> bool {
        self.sector_of_peer(peer)
            .is_some_and(|s| self.sectors[s].representants.contains(&peer))
    }

    /// Sector with the fewest members, lowest index on ties.
    pub fn choose_sector(&self) -> usize {
        self.sectors
            .iter()
            .min_by_key(|s| (s.members.len(), s.index))
            .map_or(0, |s| s.index)
    }

    fn refresh_representants(&mut self, sector: usize) -> RepChange {
        let r = self.params.representants;
        let s = &mut self.sectors[sector];
        let mut by_age: Vec<(f64, PeerId)> = s.members.iter().map(|p| self.seniority[p]).collect();
        by_age.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let new: Vec<PeerId> = by_age.into_iter().take(r).map(|(_, p)| p).collect();
        let change = RepChange {
            added: new.iter().filter(|p| !s.representants.contains(p)).copied().collect(),
            removed: s.representants.iter().filter(|p| !new.contains(p)).copied().collect(),
        };
        s.representants = new;
        change
    }

    pub fn join(&mut self, peer: PeerId, join_time: f64) -> (usize, RepChange) {
        let sector = self.choose_sector();
        self.sectors[sector].members.insert(peer);
        self.member_sector.insert(peer, sector);
        self.seniority.insert(peer, (join_time, peer));
        (sector, self.refresh_representants(sector))
    }

    pub fn leave(&mut self, peer: PeerId) -> Option<(usize, RepChange)> {
        let sector = self.member_sector.remove(&peer)?;
        self.sectors[sector].members.remove(&peer);
        self.seniority.remove(&peer);
        self.links.remove(&peer);
        self.last_served.remove(&peer);
        Some((sector, self.refresh_representants(sector)))
    }

    /// Producer side of a publication: returns the representants that get
    /// the chunk, or `None` when the sector is empty and the producer keeps
    /// it.
    pub fn publish(&mut self, w: &mut World, chunk: ChunkId) -> Option<(usize, Vec<PeerId>)> {
        let sector = sector_of_chunk(chunk, self.params.m);
        if self.record_rotation {
            self.rotation.push(sector);
        }
        let reps = self.sectors[sector].representants.clone();
        if reps.is_empty() {
            w.metrics.producer_retained += 1;
            self.retained.insert(chunk);
            return None;
        }
        w.account_copies(Endpoint::Producer, reps.len() as u64);
        w.count_control(reps.len() as u64);
        Some((sector, reps))
    }

    /// Representant through which `requester` enters `sector`.
    pub fn entry_point(&self, requester: PeerId, sector: usize) -> Option<PeerId> {
        let reps = &self.sectors[sector].representants;
        (!reps.is_empty()).then(|| reps[requester as usize % reps.len()])
    }

    /// Tries the link shortcut: if the peer that served `chunk - 1` to the
    /// requester knows a peer of the next sector holding `chunk`, use it.
    pub fn handoff(&mut self, w: &mut World, requester: PeerId, chunk: ChunkId) -> Option<PeerId> {
        let &(prev_server, prev_chunk) = self.last_served.get(&requester)?;
        if chunk == 0 || prev_chunk + 1 != chunk || !w.is_active(prev_server) {
            return None;
        }
        let links = self.links.get_mut(&prev_server)?;
        let mut found = None;
        let mut stale = false;
        links.retain(|&z| {
            if found.is_some() {
                return true;
            }
            if !w.is_active(z) {
                stale = true;
                return false;
            }
            if w.holds(z, chunk) {
                found = Some(z);
            } else {
                stale = true;
            }
            true
        });
        if stale {
            w.metrics.stale_handoffs += 1;
        }
        if found.is_some() {
            w.metrics.handoffs += 1;
        }
        found
    }

    /// Remembers who served `chunk` and lets the previous server learn a
    /// link to it.
    pub fn note_served(&mut self, requester: PeerId, chunk: ChunkId, server: PeerId) {
        if let Some(&(prev_server, prev_chunk)) = self.last_served.get(&requester) {
            if prev_chunk + 1 == chunk && prev_server != server {
                let links = self.links.entry(prev_server).or_default();
                links.retain(|&z| z != server);
                links.insert(0, server);
                links.truncate(MAX_LINKS);
            }
        }
        self.last_served.insert(requester, (server, chunk));
    }

    pub fn forget_served(&mut self, requester: PeerId) {
        self.last_served.remove(&requester);
    }

    pub fn links_of(&self, peer: PeerId) -> &[PeerId] {
        self.links.get(&peer).map_or(&[], Vec::as_slice)
    }

    /// Structural checks plus the assignment law over every pinned chunk.
    pub fn check(&self, w: &World) -> Result<(), String> {
        let mut seen = 0usize;
        for s in &self.sectors {
            if !s.members.is_empty() && s.representants.is_empty() {
                return Err(format!("sector {} has members but no representant", s.index));
            }
            for r in &s.representants {
                if !s.members.contains(r) {
                    return Err(format!("representant {r} not a member of sector {}", s.index));
                }
            }
            for p in &s.members {
                if self.member_sector.get(p) != Some(&s.index) {
                    return Err(format!("peer {p} listed in sector {} but mapped elsewhere", s.index));
                }
                if !w.is_active(*p) {
                    return Err(format!("departed peer {p} still in sector {}", s.index));
                }
            }
            seen += s.members.len();
        }
        if seen != self.member_sector.len() {
            return Err("a peer belongs to more than one sector".into());
        }
        for (id, p) in w.active_peers() {
            let Some(sector) = self.sector_of_peer(id) else {
                return Err(format!("active peer {id} has no sector"));
            };
            if let Some(c) = p.store.pinned().find(|&c| sector_of_chunk(c, self.params.m) != sector) {
                return Err(format!("peer {id} in sector {sector} pins chunk {c}"));
            }
        }
        Ok(())
    }

    /// Pinned chunks whose holder sits in the wrong sector.
    pub fn assignment_violations(&self, w: &World) -> u64 {
        w.active_peers()
            .map(|(id, p)| {
                let sector = self.sector_of_peer(id);
                p.store
                    .pinned()
                    .filter(|&c| Some(sector_of_chunk(c, self.params.m)) != sector)
                    .count() as u64
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sector_assignment() {
        for m in [1usize, 3, 4, 12] {
            assert_eq!(sector_of_chunk(0, m), 0);
            assert_eq!(sector_of_chunk(m as u64, m), 0);
            assert_eq!(sector_of_chunk(m as u64 - 1, m), m - 1);
            assert_eq!(sector_of_chunk(2 * m as u64 - 1, m), m - 1);
        }
        assert_eq!(sector_of_chunk(7, 3), 1);
        assert_eq!(slot_of_chunk(7, 3), 2);
    }

    #[test]
    fn joins_balance_sectors() {
        let mut t = Turntable::new(TurntableParams {
            m: 3,
            ..Default::default()
        });
        let sectors: Vec<usize> = (0..7).map(|p| t.join(p, p as f64).0).collect();
        assert_eq!(sectors, vec![0, 1, 2, 0, 1, 2, 0]);
        assert_eq!(t.sector(0).representants, vec![0, 3]);
        let (s, change) = t.leave(0).unwrap();
        assert_eq!(s, 0);
        assert_eq!(change.removed, vec![0]);
        assert_eq!(change.added, vec![6]);
        assert_eq!(t.choose_sector(), 0);
    }

    #[test]
    fn links_are_bounded_and_most_recent_first() {
        let mut t = Turntable::new(TurntableParams::default());
        t.note_served(1, 10, 5);
        t.note_served(1, 11, 6);
        t.note_served(2, 10, 5);
        t.note_served(2, 11, 7);
        t.note_served(3, 10, 5);
        t.note_served(3, 11, 8);
        assert_eq!(t.links_of(5), &[8, 7]);
    }
}
