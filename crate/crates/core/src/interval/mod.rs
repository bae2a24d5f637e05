//! Interval-graph overlay.
//!
//! Every peer is described by a closed interval of lags `[l, r]` around its
//! playing position `c` (lag 0 is the live edge, larger is older). The part
//! `[l, c]` holds chunks the peer will play, `[c, r]` chunks it has played.
//! Two peers are adjacent when their intervals intersect.
//!
//! The overlay wants every lag in `[0, T]` covered by at least `k`
//! intervals while keeping `Σ (r − l)` small, and a peer `x` may only be
//! leaned on by `cap(x)` peers: those `y ≠ x` whose future part `[l_y, c_y]`
//! meets `x`'s past part `[c_x, r_x]`.

pub mod oracle;
pub mod overlay;
pub mod sweep;

use std::collections::BTreeMap;
use std::fmt;

use crate::workload::PeerId;

pub type Lag = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Interval {
    pub peer_id: PeerId,
    pub l: Lag,
    pub c: Lag,
    pub r: Lag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BadInterval {
    pub peer_id: PeerId,
}

impl fmt::Display for BadInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "interval of peer {} violates l <= c <= r", self.peer_id)
    }
}

impl Interval {
    pub fn new(peer_id: PeerId, l: Lag, c: Lag, r: Lag) -> Result<Self, BadInterval> {
        if l <= c && c <= r {
            Ok(Self { peer_id, l, c, r })
        } else {
            Err(BadInterval { peer_id })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.l <= self.c && self.c <= self.r
    }

    pub fn len(&self) -> Lag {
        self.r - self.l
    }

    pub fn is_empty(&self) -> bool {
        self.r == self.l
    }

    pub fn contains(&self, t: Lag) -> bool {
        self.l <= t && t <= self.r
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.l.max(other.l) <= self.r.min(other.r)
    }

    /// Whether `self` leans on `server`: `self`'s future part meets
    /// `server`'s past part.
    pub fn leans_on(&self, server: &Interval) -> bool {
        self.peer_id != server.peer_id && self.c >= server.c && self.l <= server.r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Capacity {
    Finite(u32),
    Unbounded,
}

impl Capacity {
    pub fn admits(self, count: u32) -> bool {
        match self {
            Capacity::Finite(c) => count <= c,
            Capacity::Unbounded => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayConstraints {
    pub k: u32,
    pub horizon: Lag,
    pub default_cap: Capacity,
    pub caps: BTreeMap<PeerId, Capacity>,
}

impl OverlayConstraints {
    pub fn new(k: u32, horizon: Lag, default_cap: Capacity) -> Self {
        assert!(k >= 1, "k must be at least 1");
        Self {
            k,
            horizon,
            default_cap,
            caps: BTreeMap::new(),
        }
    }

    pub fn with_cap(mut self, peer: PeerId, cap: Capacity) -> Self {
        self.caps.insert(peer, cap);
        self
    }

    pub fn cap(&self, peer: PeerId) -> Capacity {
        self.caps.get(&peer).copied().unwrap_or(self.default_cap)
    }
}

pub fn objective(intervals: &[Interval]) -> u64 {
    intervals.iter().map(Interval::len).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CoverageGap {
    pub lag: Lag,
    pub multiplicity: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Overload {
    pub peer_id: PeerId,
    pub count: u32,
    pub cap: Capacity,
}

/// Number of intervals containing each lag in `[0, horizon]`.
pub fn coverage_counts(intervals: &[Interval], horizon: Lag) -> Vec<u32> {
    let n = horizon as usize + 1;
    let mut diff = vec![0i64; n + 1];
    for iv in intervals {
        if iv.l > horizon {
            continue;
        }
        diff[iv.l as usize] += 1;
        diff[(iv.r.min(horizon) + 1) as usize] -= 1;
    }
    let mut out = Vec::with_capacity(n);
    let mut run = 0i64;
    for d in diff.iter().take(n) {
        run += d;
        out.push(run as u32);
    }
    out
}

pub fn check_k_coverage(intervals: &[Interval], cons: &OverlayConstraints) -> Result<(), Vec<CoverageGap>> {
    let gaps: Vec<CoverageGap> = coverage_counts(intervals, cons.horizon)
        .into_iter()
        .enumerate()
        .filter(|&(_, m)| m < cons.k)
        .map(|(t, multiplicity)| CoverageGap {
            lag: t as Lag,
            multiplicity,
        })
        .collect();
    if gaps.is_empty() {
        Ok(())
    } else {
        Err(gaps)
    }
}

struct Fenwick(Vec<u32>);

impl Fenwick {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Items with index `<= i`.
    fn prefix(&self, i: usize) -> u32 {
        let mut i = i + 1;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// For each interval (in input order), how many others lean on it.
pub fn capacity_counts(intervals: &[Interval]) -> Vec<u32> {
    let n = intervals.len();
    let mut ls: Vec<Lag> = intervals.iter().map(|iv| iv.l).collect();
    ls.sort_unstable();
    ls.dedup();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| intervals[b].c.cmp(&intervals[a].c));
    let mut tree = Fenwick(vec![0; ls.len() + 1]);
    let mut counts = vec![0u32; n];
    let mut i = 0;
    while i < n {
        let c = intervals[order[i]].c;
        let mut j = i;
        while j < n && intervals[order[j]].c == c {
            let li = ls.binary_search(&intervals[order[j]].l).unwrap();
            tree.add(li);
            j += 1;
        }
        for &x in &order[i..j] {
            let r = intervals[x].r;
            let upto = ls.partition_point(|&l| l <= r);
            // every inserted peer has c_y >= c_x; the peer itself is among them
            counts[x] = if upto == 0 { 0 } else { tree.prefix(upto - 1) } - 1;
        }
        i = j;
    }
    counts
}

pub fn check_capacity(intervals: &[Interval], cons: &OverlayConstraints) -> Result<(), Vec<Overload>> {
    let over: Vec<Overload> = capacity_counts(intervals)
        .into_iter()
        .zip(intervals)
        .filter(|(n, iv)| !cons.cap(iv.peer_id).admits(*n))
        .map(|(count, iv)| Overload {
            peer_id: iv.peer_id,
            count,
            cap: cons.cap(iv.peer_id),
        })
        .collect();
    if over.is_empty() {
        Ok(())
    } else {
        Err(over)
    }
}

/// The overlap graph over a set of intervals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntervalGraph {
    pub intervals: Vec<Interval>,
}

impl IntervalGraph {
    pub fn new(intervals: Vec<Interval>) -> Self {
        Self { intervals }
    }

    /// Adjacent pairs `(a, b)` with `a < b`, sorted. Computed by one sweep
    /// over left endpoints.
    pub fn edges(&self) -> Vec<(PeerId, PeerId)> {
        let mut by_l: Vec<&Interval> = self.intervals.iter().collect();
        by_l.sort_by_key(|iv| (iv.l, iv.peer_id));
        let mut out = Vec::new();
        let mut open: Vec<&Interval> = Vec::new();
        for iv in by_l {
            open.retain(|o| o.r >= iv.l);
            for o in &open {
                let (a, b) = (o.peer_id.min(iv.peer_id), o.peer_id.max(iv.peer_id));
                out.push((a, b));
            }
            open.push(iv);
        }
        out.sort_unstable();
        out
    }

    pub fn neighbors(&self, peer: PeerId) -> Vec<PeerId> {
        let Some(me) = self.intervals.iter().find(|iv| iv.peer_id == peer) else {
            return Vec::new();
        };
        self.intervals
            .iter()
            .filter(|iv| iv.peer_id != peer && iv.overlaps(me))
            .map(|iv| iv.peer_id)
            .collect()
    }

    pub fn objective(&self) -> u64 {
        objective(&self.intervals)
    }
}
