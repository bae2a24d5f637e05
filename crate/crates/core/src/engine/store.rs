use std::collections::BTreeMap;

use crate::stream::ChunkId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreFull;

#[derive(Debug, Clone, Copy)]
struct Entry {
    pinned: bool,
    stamp: u64,
}

/// Bounded chunk store. Unpinned chunks are evicted least-recently-used
/// first; pinned chunks are never evicted.
#[derive(Debug, Clone)]
pub struct ChunkStore {
    capacity: usize,
    entries: BTreeMap<ChunkId, Entry>,
    lru: BTreeMap<u64, ChunkId>,
    clock: u64,
    pinned: usize,
}

impl ChunkStore {
    pub fn new(capacity: u32) -> Self {
        Self {
            capacity: capacity as usize,
            entries: BTreeMap::new(),
            lru: BTreeMap::new(),
            clock: 0,
            pinned: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pinned_len(&self) -> usize {
        self.pinned
    }

    /// Room for one more pinned chunk, possibly after evicting cached ones.
    pub fn can_pin(&self) -> bool {
        self.pinned < self.capacity
    }

    pub fn contains(&self, chunk: ChunkId) -> bool {
        self.entries.contains_key(&chunk)
    }

    pub fn is_pinned(&self, chunk: ChunkId) -> bool {
        self.entries.get(&chunk).is_some_and(|e| e.pinned)
    }

    pub fn iter(&self) -> impl Iterator<Item = ChunkId> + '_ {
        self.entries.keys().copied()
    }

    pub fn pinned(&self) -> impl Iterator<Item = ChunkId> + '_ {
        self.entries.iter().filter(|(_, e)| e.pinned).map(|(c, _)| *c)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub fn touch(&mut self, chunk: ChunkId) {
        let stamp = self.tick();
        if let Some(e) = self.entries.get_mut(&chunk) {
            if !e.pinned {
                self.lru.remove(&e.stamp);
                self.lru.insert(stamp, chunk);
            }
            e.stamp = stamp;
        }
    }

    /// Inserts a chunk, evicting the least recently used unpinned chunk when
    /// full. Returns the evicted chunk, if any.
    pub fn insert(&mut self, chunk: ChunkId, pinned: bool) -> Result<Option<ChunkId>, StoreFull> {
        if let Some(e) = self.entries.get(&chunk).copied() {
            if pinned && !e.pinned {
                self.pin(chunk)?;
            }
            self.touch(chunk);
            return Ok(None);
        }
        if self.capacity == 0 || (pinned && self.pinned >= self.capacity) {
            return Err(StoreFull);
        }
        let mut evicted = None;
        if self.entries.len() >= self.capacity {
            let (&stamp, &victim) = self.lru.iter().next().ok_or(StoreFull)?;
            self.lru.remove(&stamp);
            self.entries.remove(&victim);
            evicted = Some(victim);
        }
        let stamp = self.tick();
        self.entries.insert(chunk, Entry { pinned, stamp });
        if pinned {
            self.pinned += 1;
        } else {
            self.lru.insert(stamp, chunk);
        }
        Ok(evicted)
    }

    pub fn pin(&mut self, chunk: ChunkId) -> Result<(), StoreFull> {
        let e = self.entries.get_mut(&chunk).ok_or(StoreFull)?;
        if !e.pinned {
            if self.pinned >= self.capacity {
                return Err(StoreFull);
            }
            self.lru.remove(&e.stamp);
            e.pinned = true;
            self.pinned += 1;
        }
        Ok(())
    }

    pub fn remove(&mut self, chunk: ChunkId) -> bool {
        match self.entries.remove(&chunk) {
            Some(e) => {
                if e.pinned {
                    self.pinned -= 1;
                } else {
                    self.lru.remove(&e.stamp);
                }
                true
            }
            None => false,
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.lru.clear();
        self.pinned = 0;
    }
}
