//! Exhaustive reference solver and naive checkers for small instances.

use super::sweep::Position;
use super::{Capacity, CoverageGap, Interval, Lag, OverlayConstraints, Overload};
use crate::workload::PeerId;

pub const MAX_PEERS: usize = 8;
pub const MAX_HORIZON: Lag = 20;

/// Coverage gaps by direct recount at every lag.
pub fn naive_coverage_gaps(intervals: &[Interval], cons: &OverlayConstraints) -> Vec<CoverageGap> {
    (0..=cons.horizon)
        .filter_map(|t| {
            let m = intervals.iter().filter(|iv| iv.l <= t && t <= iv.r).count() as u32;
            (m < cons.k).then_some(CoverageGap { lag: t, multiplicity: m })
        })
        .collect()
}

/// Overloaded peers by checking every ordered pair.
pub fn naive_overloads(intervals: &[Interval], cons: &OverlayConstraints) -> Vec<Overload> {
    let mut out = Vec::new();
    for x in intervals {
        let mut count = 0;
        for y in intervals {
            if y.peer_id != x.peer_id && y.l.max(x.c) <= y.c.min(x.r) {
                count += 1;
            }
        }
        let cap = cons.cap(x.peer_id);
        if !cap.admits(count) {
            out.push(Overload { peer_id: x.peer_id, count, cap });
        }
    }
    out
}

pub fn naive_edges(intervals: &[Interval]) -> Vec<(PeerId, PeerId)> {
    let mut out = Vec::new();
    for (i, a) in intervals.iter().enumerate() {
        for b in &intervals[i + 1..] {
            if a.l.max(b.l) <= a.r.min(b.r) {
                out.push((a.peer_id.min(b.peer_id), a.peer_id.max(b.peer_id)));
            }
        }
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleError {
    Infeasible,
    TooLarge,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleSolution {
    pub objective: u64,
    pub intervals: Vec<Interval>,
}

struct Search<'a> {
    cons: &'a OverlayConstraints,
    peers: Vec<Position>,
    options: Vec<Vec<(Lag, Lag)>>,
    cov: Vec<u32>,
    chosen: Vec<Interval>,
    best: Option<OracleSolution>,
}

impl Search<'_> {
    fn deficit(&self) -> u64 {
        self.cov.iter().map(|&c| self.cons.k.saturating_sub(c) as u64).sum()
    }

    fn capacity_ok(&self) -> bool {
        self.chosen.iter().all(|x| {
            let n = self.chosen.iter().filter(|y| y.leans_on(x)).count() as u32;
            self.cons.cap(x.peer_id).admits(n)
        })
    }

    fn go(&mut self, i: usize, cost: u64) {
        let remaining = (self.peers.len() - i) as u64;
        if self.cov.iter().any(|&c| (c as u64) + remaining < self.cons.k as u64) {
            return;
        }
        // each remaining interval covers len + 1 lags for a cost of len
        let bound = cost + self.deficit().saturating_sub(remaining);
        if self.best.as_ref().is_some_and(|b| bound >= b.objective) {
            return;
        }
        if i == self.peers.len() {
            if naive_coverage_gaps(&self.chosen, self.cons).is_empty() && naive_overloads(&self.chosen, self.cons).is_empty() {
                self.best = Some(OracleSolution {
                    objective: cost,
                    intervals: self.chosen.clone(),
                });
            }
            return;
        }
        let p = self.peers[i];
        for j in 0..self.options[i].len() {
            let (l, r) = self.options[i][j];
            let iv = Interval { peer_id: p.peer_id, l, c: p.c, r };
            for t in l..=r {
                self.cov[t as usize] += 1;
            }
            self.chosen.push(iv);
            if self.capacity_ok() {
                self.go(i + 1, cost + (r - l));
            }
            self.chosen.pop();
            for t in l..=r {
                self.cov[t as usize] -= 1;
            }
        }
    }
}

/// Minimum total buffer length over all integer bounds with
/// `0 <= l <= c <= r <= T`, found by branch and bound.
pub fn brute_force_oracle(positions: &[Position], cons: &OverlayConstraints) -> Result<OracleSolution, OracleError> {
    let t = cons.horizon;
    if positions.len() > MAX_PEERS || t > MAX_HORIZON || positions.iter().any(|p| p.c > t) {
        return Err(OracleError::TooLarge);
    }
    let mut peers = positions.to_vec();
    peers.sort_by_key(|p| (p.c, p.peer_id));
    let options = peers
        .iter()
        .map(|p| {
            let mut v: Vec<(Lag, Lag)> = (0..=p.c).flat_map(|l| (p.c..=t).map(move |r| (l, r))).collect();
            v.sort_by_key(|&(l, r)| (r - l, l));
            v
        })
        .collect();
    let mut s = Search {
        cons,
        peers,
        options,
        cov: vec![0; t as usize + 1],
        chosen: Vec::new(),
        best: None,
    };
    s.go(0, 0);
    s.best.ok_or(OracleError::Infeasible)
}

/// Plain enumeration without pruning, for cross-checking the oracle.
pub fn enumerate_all(positions: &[Position], cons: &OverlayConstraints) -> Option<u64> {
    fn rec(i: usize, ps: &[Position], t: Lag, cons: &OverlayConstraints, cur: &mut Vec<Interval>, best: &mut Option<u64>) {
        if i == ps.len() {
            if naive_coverage_gaps(cur, cons).is_empty() && naive_overloads(cur, cons).is_empty() {
                let o = super::objective(cur);
                *best = Some(best.map_or(o, |b| b.min(o)));
            }
            return;
        }
        let p = ps[i];
        for l in 0..=p.c {
            for r in p.c..=t {
                cur.push(Interval { peer_id: p.peer_id, l, c: p.c, r });
                rec(i + 1, ps, t, cons, cur, best);
                cur.pop();
            }
        }
    }
    let mut best = None;
    rec(0, positions, cons.horizon, cons, &mut Vec::new(), &mut best);
    best
}

pub fn unbounded(k: u32, horizon: Lag) -> OverlayConstraints {
    OverlayConstraints::new(k, horizon, Capacity::Unbounded)
}
