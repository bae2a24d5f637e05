//! Greedy bound assignment, freshest peer first.

use super::{check_capacity, check_k_coverage, Capacity, Interval, Lag, OverlayConstraints};
use crate::workload::PeerId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Position {
    pub peer_id: PeerId,
    pub c: Lag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfeasibleKind {
    TooFewPeers,
    Coverage,
    Capacity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Infeasible {
    pub blocking_lag: Lag,
    pub kind: InfeasibleKind,
    /// Best-effort bounds for the free peers, same order as the output of a
    /// successful sweep.
    pub partial: Vec<Interval>,
}

fn sorted(positions: &[Position]) -> Vec<Position> {
    let mut v = positions.to_vec();
    v.sort_by_key(|p| (p.c, p.peer_id));
    v
}

struct State<'a> {
    cons: &'a OverlayConstraints,
    horizon: Lag,
    cov: Vec<u32>,
    placed: Vec<Interval>,
    served: Vec<u32>,
}

impl<'a> State<'a> {
    fn new(cons: &'a OverlayConstraints, fixed: &[Interval]) -> Self {
        let mut s = Self {
            cons,
            horizon: cons.horizon,
            cov: vec![0; cons.horizon as usize + 1],
            placed: Vec::new(),
            served: Vec::new(),
        };
        for iv in fixed {
            s.place(*iv);
        }
        s
    }

    fn place(&mut self, iv: Interval) {
        if iv.l <= self.horizon {
            for t in iv.l..=iv.r.min(self.horizon) {
                self.cov[t as usize] += 1;
            }
        }
        let mut mine = 0;
        for (x, n) in self.placed.iter().zip(self.served.iter_mut()) {
            if iv.leans_on(x) {
                *n += 1;
            }
            if x.leans_on(&iv) {
                mine += 1;
            }
        }
        self.placed.push(iv);
        self.served.push(mine);
    }

    fn saturated(&self, i: usize) -> bool {
        !self.cons.cap(self.placed[i].peer_id).admits(self.served[i] + 1)
    }

    fn cov_at(&self, t: Lag) -> u32 {
        self.cov.get(t as usize).copied().unwrap_or(0)
    }

    fn left_bound(&self, p: Position, anchor: bool) -> Lag {
        let mut l = if anchor {
            0
        } else {
            (0..p.c.min(self.horizon + 1))
                .find(|&t| self.cov_at(t) < self.cons.k)
                .unwrap_or(p.c)
        };
        // stay clear of placed peers that cannot serve one more
        let block = (0..self.placed.len())
            .filter(|&i| self.placed[i].c <= p.c && self.placed[i].r >= l && self.saturated(i))
            .map(|i| self.placed[i].r + 1)
            .max();
        if let Some(b) = block {
            l = l.max(b);
        }
        l.min(p.c)
    }

    fn right_bound(&self, p: Position, successors: &[Position]) -> Lag {
        let k = self.cons.k as i64;
        let after = successors.len() as i64;
        let mut r = p.c;
        if p.c < self.horizon {
            if let Some(t) = (p.c + 1..=self.horizon)
                .rev()
                .find(|&t| k - self.cov_at(t) as i64 - after > 0)
            {
                r = t;
            }
        }
        let cap = self.cons.cap(p.peer_id);
        if cap == Capacity::Unbounded {
            return r;
        }
        // loads are counts of thresholds <= r, so the largest admissible r
        // sits just below the (cap + 1)-th smallest threshold
        let Capacity::Finite(cap) = cap else { unreachable!() };
        let mut thresholds: Vec<Lag> = self
            .placed
            .iter()
            .filter(|y| y.peer_id != p.peer_id && y.c >= p.c)
            .map(|y| y.l.max(p.c))
            .chain(successors.iter().filter(|s| s.peer_id != p.peer_id).map(|s| s.c))
            .collect();
        thresholds.sort_unstable();
        match thresholds.get(cap as usize) {
            Some(&v) if v <= r => v.saturating_sub(1).max(p.c),
            _ => r,
        }
    }
}

fn run(free: &[Position], fixed: &[Interval], cons: &OverlayConstraints, anchor_first_k: bool) -> Result<Vec<Interval>, Infeasible> {
    let order = sorted(free);
    let mut st = State::new(cons, fixed);
    let mut out = Vec::with_capacity(order.len());
    for (i, &p) in order.iter().enumerate() {
        let anchor = anchor_first_k && i < cons.k as usize;
        let l = st.left_bound(p, anchor);
        let r = st.right_bound(p, &order[i + 1..]);
        let iv = Interval { peer_id: p.peer_id, l, c: p.c, r };
        st.place(iv);
        out.push(iv);
    }
    if anchor_first_k && fixed.len() + order.len() < cons.k as usize {
        return Err(Infeasible {
            blocking_lag: 0,
            kind: InfeasibleKind::TooFewPeers,
            partial: out,
        });
    }
    let mut all = fixed.to_vec();
    all.extend_from_slice(&out);
    if let Err(gaps) = check_k_coverage(&all, cons) {
        return Err(Infeasible {
            blocking_lag: gaps[0].lag,
            kind: InfeasibleKind::Coverage,
            partial: out,
        });
    }
    if let Err(over) = check_capacity(&all, cons) {
        let lag = all.iter().find(|iv| iv.peer_id == over[0].peer_id).map_or(0, |iv| iv.c);
        return Err(Infeasible {
            blocking_lag: lag,
            kind: InfeasibleKind::Capacity,
            partial: out,
        });
    }
    Ok(out)
}

/// Assigns bounds to every peer. The `k` freshest peers anchor at the live
/// edge; each later peer reaches back to the first under-covered lag and
/// extends forward only as far as its successors cannot make up for.
pub fn sweep_assign_bounds(positions: &[Position], cons: &OverlayConstraints) -> Result<Vec<Interval>, Infeasible> {
    if positions.len() < cons.k as usize {
        let partial = sorted(positions)
            .into_iter()
            .map(|p| Interval { peer_id: p.peer_id, l: 0, c: p.c, r: p.c.max(cons.horizon) })
            .collect();
        return Err(Infeasible {
            blocking_lag: 0,
            kind: InfeasibleKind::TooFewPeers,
            partial,
        });
    }
    run(positions, &[], cons, true)
}

/// Re-runs the sweep over `free` peers only, treating `fixed` intervals as
/// already placed. Validation covers the union.
pub fn sweep_local(free: &[Position], fixed: &[Interval], cons: &OverlayConstraints) -> Result<Vec<Interval>, Infeasible> {
    run(free, fixed, cons, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval::objective;

    fn pos(cs: &[Lag]) -> Vec<Position> {
        cs.iter().enumerate().map(|(i, &c)| Position { peer_id: i as PeerId, c }).collect()
    }

    #[test]
    fn single_peer_forced_cover() {
        let cons = OverlayConstraints::new(1, 7, Capacity::Unbounded);
        let out = sweep_assign_bounds(&pos(&[7]), &cons).unwrap();
        assert_eq!(out, vec![Interval { peer_id: 0, l: 0, c: 7, r: 7 }]);
        assert_eq!(objective(&out), 7);
    }

    #[test]
    fn fewer_peers_than_k() {
        let cons = OverlayConstraints::new(3, 5, Capacity::Unbounded);
        let err = sweep_assign_bounds(&pos(&[1, 2]), &cons).unwrap_err();
        assert_eq!(err.kind, InfeasibleKind::TooFewPeers);
        assert_eq!(err.blocking_lag, 0);
    }

    #[test]
    fn last_peer_anchors_horizon() {
        let cons = OverlayConstraints::new(1, 10, Capacity::Unbounded);
        let out = sweep_assign_bounds(&pos(&[0, 4]), &cons).unwrap();
        assert_eq!(out[0], Interval { peer_id: 0, l: 0, c: 0, r: 0 });
        assert_eq!(out[1], Interval { peer_id: 1, l: 1, c: 4, r: 10 });
    }

    #[test]
    fn output_passes_checkers() {
        let cons = OverlayConstraints::new(2, 12, Capacity::Finite(2));
        let out = sweep_assign_bounds(&pos(&[0, 1, 3, 6, 9]), &cons).unwrap();
        assert!(check_k_coverage(&out, &cons).is_ok());
        assert!(check_capacity(&out, &cons).is_ok());
    }

    #[test]
    fn local_respects_fixed() {
        let cons = OverlayConstraints::new(1, 10, Capacity::Unbounded);
        let fixed = [Interval { peer_id: 9, l: 0, c: 0, r: 5 }];
        let out = sweep_local(&[Position { peer_id: 1, c: 7 }], &fixed, &cons).unwrap();
        assert_eq!(out, vec![Interval { peer_id: 1, l: 6, c: 7, r: 10 }]);
    }
}
