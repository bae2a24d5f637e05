//! Per-subtree chunk availability summaries for the tree variant.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use bitvec::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryMode {
    /// One bit per sector slot: no false positives, no false negatives.
    Exact,
    Bloom { bits: usize, hashes: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AvailabilitySummary {
    mode: SummaryMode,
    bits: BitVec,
    pub generation: u64,
}

fn slot_hashes(slot: usize) -> (u64, u64) {
    let mut a = DefaultHasher::new();
    slot.hash(&mut a);
    let h1 = a.finish();
    let mut b = DefaultHasher::new();
    (slot, 0x9e37_79b9_u32).hash(&mut b);
    (h1, b.finish() | 1)
}

impl AvailabilitySummary {
    pub fn empty(mode: SummaryMode) -> Self {
        let bits = match mode {
            SummaryMode::Exact => BitVec::new(),
            SummaryMode::Bloom { bits, .. } => bitvec![0; bits.max(1)],
        };
        Self {
            mode,
            bits,
            generation: 0,
        }
    }

    pub fn from_slots(mode: SummaryMode, slots: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(mode);
        for slot in slots {
            s.insert(slot);
        }
        s
    }

    pub fn mode(&self) -> SummaryMode {
        self.mode
    }

    fn positions(&self, slot: usize) -> impl Iterator<Item = usize> + '_ {
        let (h1, h2, k, b) = match self.mode {
            SummaryMode::Exact => (slot as u64, 0, 1, u64::MAX),
            SummaryMode::Bloom { hashes, .. } => {
                let (h1, h2) = slot_hashes(slot);
                (h1, h2, hashes.max(1), self.bits.len() as u64)
            }
        };
        (0..k as u64).map(move |i| (h1.wrapping_add(i.wrapping_mul(h2)) % b) as usize)
    }

    pub fn insert(&mut self, slot: usize) {
        if self.mode == SummaryMode::Exact && self.bits.len() <= slot {
            self.bits.resize(slot + 1, false);
        }
        let positions: Vec<usize> = self.positions(slot).collect();
        for p in positions {
            self.bits.set(p, true);
        }
    }

    pub fn claims(&self, slot: usize) -> bool {
        self.positions(slot).all(|p| self.bits.get(p).is_some_and(|b| *b))
    }

    pub fn union_with(&mut self, other: &AvailabilitySummary) {
        debug_assert_eq!(self.mode, other.mode);
        if self.bits.len() < other.bits.len() {
            self.bits.resize(other.bits.len(), false);
        }
        for i in other.bits.iter_ones() {
            self.bits.set(i, true);
        }
    }

    /// Same claimed content, ignoring trailing zero padding and generation.
    pub fn same_content(&self, other: &AvailabilitySummary) -> bool {
        self.bits.iter_ones().eq(other.bits.iter_ones())
    }

    /// Bytes needed to ship this summary to a parent.
    pub fn wire_bytes(&self) -> u64 {
        self.bits.len().div_ceil(8) as u64
    }

    pub fn ones(&self) -> usize {
        self.bits.count_ones()
    }

    /// Textbook false-positive estimate for a Bloom filter holding `n`
    /// slots; zero in exact mode.
    pub fn expected_fp_rate(mode: SummaryMode, n: usize) -> f64 {
        match mode {
            SummaryMode::Exact => 0.0,
            SummaryMode::Bloom { bits, hashes } => {
                let k = hashes.max(1) as f64;
                (1.0 - (-k * n as f64 / bits.max(1) as f64).exp()).powf(k)
            }
        }
    }
}
