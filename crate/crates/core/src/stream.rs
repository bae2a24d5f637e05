//! The source stream: fixed-size chunks, the shows tiling them, and the lag
//! coordinate every overlay uses.

use thiserror::Error;

/// Global chunk index. Chunk ids are contiguous from zero.
pub type ChunkId = u64;

/// Distance to the live edge in whole chunks. Zero is the live edge.
pub type Lag = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error("bitrate must be positive, got {0}")]
    BadBitrate(f64),
    #[error("chunk size must be positive")]
    BadChunkSize,
    #[error("position {position} s is before the stream start {start} s")]
    BeforeStart { position: f64, start: f64 },
    #[error("position chunk {position} is ahead of the head chunk {head}")]
    AheadOfHead { position: ChunkId, head: ChunkId },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamParams {
    pub bitrate_bps: f64,
    pub chunk_size_bytes: u64,
    pub start_time: f64,
}

impl Default for StreamParams {
    fn default() -> Self {
        Self {
            bitrate_bps: 500_000.0,
            chunk_size_bytes: 2_000_000,
            start_time: 0.0,
        }
    }
}

impl StreamParams {
    pub fn new(bitrate_bps: f64, chunk_size_bytes: u64, start_time: f64) -> Result<Self, StreamError> {
        let params = Self {
            bitrate_bps,
            chunk_size_bytes,
            start_time,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        if !(self.bitrate_bps > 0.0 && self.bitrate_bps.is_finite()) {
            return Err(StreamError::BadBitrate(self.bitrate_bps));
        }
        if self.chunk_size_bytes == 0 {
            return Err(StreamError::BadChunkSize);
        }
        Ok(())
    }

    /// Seconds of playback carried by one chunk.
    pub fn chunk_duration(&self) -> f64 {
        self.chunk_size_bytes as f64 * 8.0 / self.bitrate_bps
    }

    /// Content timestamp of a chunk: the instant its first byte was recorded.
    pub fn produced_at(&self, id: ChunkId) -> f64 {
        self.start_time + id as f64 * self.chunk_duration()
    }

    /// Instant at which a chunk's recording completes and the producer can
    /// publish it.
    pub fn published_at(&self, id: ChunkId) -> f64 {
        self.produced_at(id + 1)
    }

    /// Chunk whose content covers `position_time`.
    pub fn chunk_at_position(&self, position_time: f64) -> Result<ChunkId, StreamError> {
        if position_time < self.start_time {
            return Err(StreamError::BeforeStart {
                position: position_time,
                start: self.start_time,
            });
        }
        Ok(self.completed_by(position_time))
    }

    /// Number of whole chunk durations between the start and `t`, snapped so
    /// that `produced_at(n) <= t < produced_at(n + 1)` holds exactly.
    fn completed_by(&self, t: f64) -> u64 {
        let mut n = ((t - self.start_time) / self.chunk_duration()).floor().max(0.0) as u64;
        while n > 0 && self.produced_at(n) > t {
            n -= 1;
        }
        while self.produced_at(n + 1) <= t {
            n += 1;
        }
        n
    }

    /// Newest chunk published by `now`, if any.
    pub fn head_at(&self, now: f64) -> Option<ChunkId> {
        if now < self.published_at(0) {
            return None;
        }
        Some(self.completed_by(now) - 1)
    }

    /// Number of chunks the source outputs over `seconds` of wall time.
    pub fn chunks_in(&self, seconds: f64) -> u64 {
        (seconds / self.chunk_duration()).floor() as u64
    }

    pub fn chunks_per_day(&self) -> u64 {
        self.chunks_in(86_400.0)
    }

    /// Bytes of archive needed to keep `days` of stream history.
    pub fn storage_bytes(&self, days: u64) -> u64 {
        self.chunks_in(days as f64 * 86_400.0) * self.chunk_size_bytes
    }

    /// Lag increase caused by a pause of `duration` seconds. Rounded up so a
    /// resumed player is never ahead of where the pause leaves it.
    pub fn pause_lag(&self, duration: f64) -> Lag {
        if duration <= 0.0 {
            return 0;
        }
        (duration / self.chunk_duration()).ceil() as Lag
    }
}

pub fn lag_of(position: ChunkId, head: ChunkId) -> Result<Lag, StreamError> {
    head.checked_sub(position)
        .ok_or(StreamError::AheadOfHead { position, head })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Show {
    pub id: u64,
    pub first_chunk: ChunkId,
    pub last_chunk: ChunkId,
    pub popularity_rank: u64,
}

impl Show {
    pub fn contains(&self, chunk: ChunkId) -> bool {
        self.first_chunk <= chunk && chunk <= self.last_chunk
    }

    pub fn len(&self) -> u64 {
        self.last_chunk - self.first_chunk + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// The source's output as a list of shows over a single global chunk space.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamTimeline {
    pub params: StreamParams,
    pub shows: Vec<Show>,
    pub head_chunk: Option<ChunkId>,
    show_len: u64,
}

impl StreamTimeline {
    /// Tiles `total_chunks` chunks with shows of `show_len_chunks` each (the
    /// last show may be shorter). `ranks[i]` is the popularity rank of show
    /// `i`; missing entries default to `i + 1`.
    pub fn tiled(params: StreamParams, total_chunks: u64, show_len_chunks: u64, ranks: &[u64]) -> Self {
        let show_len = show_len_chunks.max(1);
        let mut shows = Vec::new();
        let mut first = 0;
        while first < total_chunks {
            let id = shows.len() as u64;
            let last = (first + show_len - 1).min(total_chunks - 1);
            shows.push(Show {
                id,
                first_chunk: first,
                last_chunk: last,
                popularity_rank: ranks.get(id as usize).copied().unwrap_or(id + 1),
            });
            first = last + 1;
        }
        Self {
            params,
            shows,
            head_chunk: None,
            show_len,
        }
    }

    pub fn show_len(&self) -> u64 {
        self.show_len
    }

    pub fn show_of(&self, chunk: ChunkId) -> Option<&Show> {
        self.shows.get((chunk / self.show_len) as usize).filter(|s| s.contains(chunk))
    }

    /// Advances the head. The head never moves backwards.
    pub fn advance_to(&mut self, head: ChunkId) {
        if self.head_chunk.is_none_or(|h| head > h) {
            self.head_chunk = Some(head);
        }
    }

    /// Checks that the shows tile `[0, head]` with no gap or overlap.
    pub fn check_tiling(&self) -> Result<(), String> {
        let Some(head) = self.head_chunk else {
            return Ok(());
        };
        let mut next = 0;
        for show in &self.shows {
            if show.first_chunk > show.last_chunk {
                return Err(format!("show {} is inverted", show.id));
            }
            if show.first_chunk != next {
                return Err(format!("show {} starts at {} instead of {}", show.id, show.first_chunk, next));
            }
            next = show.last_chunk + 1;
            if next > head {
                return Ok(());
            }
        }
        Err(format!("shows end at {} before head {}", next, head))
    }
}
