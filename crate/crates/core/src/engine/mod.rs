//! Deterministic discrete-event core shared by all overlays.
//!
//! The engine owns the clock, the event queue, the peer table with bounded
//! chunk stores, and a simple network: a fixed per-hop latency plus
//! per-peer upload slots that queue excess transfers FIFO. Overlays plug in
//! through [`OverlayDriver`] and mutate state only from the engine thread.

mod queue;
mod store;

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use queue::{EventQueue, SimEvent};
pub use store::{ChunkStore, StoreFull};

use crate::metrics::MetricsReport;
use crate::stream::{ChunkId, Lag, StreamParams, StreamTimeline};
use crate::workload::{apply_vcr, PeerId, PeerProfile, SessionEvent, SessionKind};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("invariant violated at t={time:.3}: {message}")]
    Invariant { time: f64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineParams {
    pub hop_latency: f64,
    pub default_cap: u32,
    pub cap_spread: u32,
    pub storage_chunks: u32,
    pub peer_upload_bps: f64,
    pub producer_upload_bps: f64,
    pub producer_archive: bool,
    pub abrupt_leave_prob: f64,
    pub sample_period: f64,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            hop_latency: 0.05,
            default_cap: 4,
            cap_spread: 0,
            storage_chunks: 1000,
            peer_upload_bps: 4_000_000.0,
            producer_upload_bps: 100_000_000.0,
            producer_archive: false,
            abrupt_leave_prob: 0.5,
            sample_period: 3600.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Endpoint {
    Producer,
    Peer(PeerId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Purpose {
    /// A chunk the requester is about to play. `hops` is the overlay
    /// routing cost paid to find the server.
    Playback { hops: u32 },
    /// Background download into an overlay-managed buffer.
    Fill,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Message {
    Request {
        requester: PeerId,
        chunk: ChunkId,
        purpose: Purpose,
    },
    Chunk {
        chunk: ChunkId,
        purpose: Purpose,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Owner {
    Engine,
    Peer(PeerId),
    Overlay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerTag {
    TransferDone,
    Resume { epoch: u64 },
    Sample,
    Gossip,
    Emergency { chunk: ChunkId },
    Maintenance,
}

#[derive(Debug, Clone)]
pub enum Payload {
    ProduceChunk(ChunkId),
    Session(SessionEvent),
    MessageDelivery {
        src: Endpoint,
        dst: PeerId,
        message: Message,
    },
    TimerFire {
        owner: Owner,
        tag: TimerTag,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PeerState {
    /// Playing at the live edge.
    Live,
    /// Playing a past portion at a constant lag.
    Hookup { lag: Lag },
    Paused {
        position: ChunkId,
        lag_at_pause: Lag,
        duration: f64,
    },
    Departed,
}

#[derive(Debug, Clone)]
pub struct PeerRuntime {
    pub profile: PeerProfile,
    pub state: PeerState,
    pub store: ChunkStore,
    epoch: u64,
    awaiting_since: Option<f64>,
}

impl PeerRuntime {
    pub fn is_active(&self) -> bool {
        !matches!(self.state, PeerState::Departed)
    }

    pub fn is_playing(&self) -> bool {
        matches!(self.state, PeerState::Live | PeerState::Hookup { .. })
    }

    /// Current lag behind the head, for any non-departed state.
    pub fn lag(&self, head: Option<ChunkId>) -> Lag {
        match self.state {
            PeerState::Live | PeerState::Departed => 0,
            PeerState::Hookup { lag } => lag,
            PeerState::Paused { position, .. } => head.map_or(0, |h| h.saturating_sub(position)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Transfer {
    dst: PeerId,
    chunk: ChunkId,
    purpose: Purpose,
}

#[derive(Debug, Default, Clone)]
struct UploadState {
    active: u32,
    queue: VecDeque<Transfer>,
    peak: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendError {
    SourceMissingChunk,
    SourceDeparted,
    NoUploadSlots,
}

/// What an overlay answers when a peer asks for a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    /// The requester already stores the chunk.
    Local,
    Found { server: Endpoint, hops: u32 },
    Missing,
}

/// Everything an overlay can see and touch besides its own state.
pub struct World {
    pub now: f64,
    pub stream: StreamParams,
    pub timeline: StreamTimeline,
    pub params: EngineParams,
    pub peers: BTreeMap<PeerId, PeerRuntime>,
    pub metrics: MetricsReport,
    pub rng: ChaCha8Rng,
    queue: EventQueue<Payload>,
    uploads: BTreeMap<PeerId, UploadState>,
    horizon: f64,
}

impl World {
    pub fn new(stream: StreamParams, timeline: StreamTimeline, params: EngineParams, horizon: f64, seed: u64) -> Self {
        Self {
            now: stream.start_time.min(0.0),
            stream,
            timeline,
            params,
            peers: BTreeMap::new(),
            metrics: MetricsReport::default(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x00ee_5eed),
            queue: EventQueue::default(),
            uploads: BTreeMap::new(),
            horizon,
        }
    }

    pub fn head(&self) -> Option<ChunkId> {
        self.timeline.head_chunk
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn peer(&self, id: PeerId) -> Option<&PeerRuntime> {
        self.peers.get(&id)
    }

    pub fn is_active(&self, id: PeerId) -> bool {
        self.peers.get(&id).is_some_and(PeerRuntime::is_active)
    }

    pub fn active_peers(&self) -> impl Iterator<Item = (PeerId, &PeerRuntime)> + '_ {
        self.peers.iter().filter(|(_, p)| p.is_active()).map(|(id, p)| (*id, p))
    }

    pub fn holds(&self, id: PeerId, chunk: ChunkId) -> bool {
        self.peers
            .get(&id)
            .is_some_and(|p| p.is_active() && p.store.contains(chunk))
    }

    pub fn lag_of_peer(&self, id: PeerId) -> Lag {
        self.peers.get(&id).map_or(0, |p| p.lag(self.head()))
    }

    pub fn chunk_bytes(&self) -> u64 {
        self.stream.chunk_size_bytes
    }

    pub fn schedule(&mut self, at: f64, payload: Payload) {
        self.queue.push(at.max(self.now), payload);
    }

    pub fn schedule_timer(&mut self, at: f64, owner: Owner, tag: TimerTag) {
        self.schedule(at, Payload::TimerFire { owner, tag });
    }

    /// Pins a chunk on a peer. Fails when the peer is gone or its store is
    /// saturated with pins.
    pub fn pin(&mut self, peer: PeerId, chunk: ChunkId) -> bool {
        match self.peers.get_mut(&peer) {
            Some(p) if p.is_active() => p.store.insert(chunk, true).is_ok(),
            _ => false,
        }
    }

    pub fn unpin_remove(&mut self, peer: PeerId, chunk: ChunkId) -> bool {
        self.peers.get_mut(&peer).is_some_and(|p| p.store.remove(chunk))
    }

    /// Charges the upload of `copies` chunks to `from` without scheduling a
    /// transfer (used for overlay-internal diffusion).
    pub fn account_copies(&mut self, from: Endpoint, copies: u64) {
        let bytes = copies * self.chunk_bytes();
        match from {
            Endpoint::Producer => self.metrics.producer_upload_bytes += bytes,
            Endpoint::Peer(_) => self.metrics.peer_upload_bytes += bytes,
        }
    }

    pub fn count_control(&mut self, n: u64) {
        self.metrics.control_messages += n;
    }

    pub fn transfer_time(&self, src: Endpoint) -> f64 {
        let bits = self.chunk_bytes() as f64 * 8.0;
        match src {
            Endpoint::Producer => bits / self.params.producer_upload_bps,
            Endpoint::Peer(id) => {
                let slots = self.peers.get(&id).map_or(1, |p| p.profile.upload_capacity.max(1));
                bits / (self.params.peer_upload_bps / slots as f64)
            }
        }
    }

    pub fn upload_slots(&self, id: PeerId) -> u32 {
        self.peers.get(&id).map_or(0, |p| p.profile.upload_capacity)
    }

    pub fn active_uploads(&self, id: PeerId) -> u32 {
        self.uploads.get(&id).map_or(0, |u| u.active)
    }

    pub fn queued_uploads(&self, id: PeerId) -> usize {
        self.uploads.get(&id).map_or(0, |u| u.queue.len())
    }

    /// Sends a request control message that reaches `server` after `hops`
    /// overlay hops; the server then starts the chunk transfer.
    pub fn send_request(&mut self, requester: PeerId, server: PeerId, chunk: ChunkId, purpose: Purpose, hops: u32) {
        self.count_control(hops.max(1) as u64);
        let at = self.now + hops.max(1) as f64 * self.params.hop_latency;
        self.schedule(
            at,
            Payload::MessageDelivery {
                src: Endpoint::Peer(requester),
                dst: server,
                message: Message::Request {
                    requester,
                    chunk,
                    purpose,
                },
            },
        );
    }

    /// Starts (or queues) a chunk transfer. The sender must store the chunk
    /// now; delivery happens after one hop plus the transfer time.
    pub fn send_chunk(&mut self, src: Endpoint, dst: PeerId, chunk: ChunkId, purpose: Purpose) -> Result<(), SendError> {
        let transfer = Transfer { dst, chunk, purpose };
        match src {
            Endpoint::Producer => {
                self.metrics.producer_upload_bytes += self.chunk_bytes();
                let at = self.now + self.params.hop_latency + self.transfer_time(src);
                self.schedule(
                    at,
                    Payload::MessageDelivery {
                        src,
                        dst,
                        message: Message::Chunk { chunk, purpose },
                    },
                );
                Ok(())
            }
            Endpoint::Peer(id) => {
                let peer = self.peers.get(&id).ok_or(SendError::SourceDeparted)?;
                if !peer.is_active() {
                    return Err(SendError::SourceDeparted);
                }
                if !peer.store.contains(chunk) {
                    return Err(SendError::SourceMissingChunk);
                }
                let slots = peer.profile.upload_capacity;
                if slots == 0 {
                    return Err(SendError::NoUploadSlots);
                }
                let up = self.uploads.entry(id).or_default();
                if up.active < slots {
                    self.start_transfer(id, transfer);
                } else {
                    up.queue.push_back(transfer);
                }
                Ok(())
            }
        }
    }

    fn start_transfer(&mut self, src: PeerId, t: Transfer) {
        let up = self.uploads.entry(src).or_default();
        up.active += 1;
        up.peak = up.peak.max(up.active);
        self.metrics.peer_upload_bytes += self.chunk_bytes();
        let dur = self.transfer_time(Endpoint::Peer(src));
        self.schedule_timer(self.now + dur, Owner::Peer(src), TimerTag::TransferDone);
        self.schedule(
            self.now + self.params.hop_latency + dur,
            Payload::MessageDelivery {
                src: Endpoint::Peer(src),
                dst: t.dst,
                message: Message::Chunk {
                    chunk: t.chunk,
                    purpose: t.purpose,
                },
            },
        );
    }

    fn transfer_done(&mut self, src: PeerId) {
        let Some(up) = self.uploads.get_mut(&src) else {
            return;
        };
        up.active = up.active.saturating_sub(1);
        let slots = self.upload_slots(src);
        while self.uploads[&src].active < slots {
            let Some(t) = self.uploads.get_mut(&src).and_then(|u| u.queue.pop_front()) else {
                break;
            };
            if !self.is_active(t.dst) {
                self.metrics.dropped_messages += 1;
                continue;
            }
            if !self.holds(src, t.chunk) {
                self.fail_transfer(t.purpose);
                continue;
            }
            self.start_transfer(src, t);
        }
    }

    fn fail_transfer(&mut self, purpose: Purpose) {
        if matches!(purpose, Purpose::Playback { .. }) {
            self.metrics.failed += 1;
        }
    }

    /// The producer answers a request directly, `hops` overlay hops after
    /// it was issued.
    pub fn producer_serve(&mut self, requester: PeerId, chunk: ChunkId, purpose: Purpose, hops: u32) {
        self.count_control(hops.max(1) as u64);
        self.metrics.producer_upload_bytes += self.chunk_bytes();
        let at = self.now
            + (hops.max(1) + 1) as f64 * self.params.hop_latency
            + self.transfer_time(Endpoint::Producer);
        self.schedule(
            at,
            Payload::MessageDelivery {
                src: Endpoint::Producer,
                dst: requester,
                message: Message::Chunk { chunk, purpose },
            },
        );
    }

    fn check(&self) -> Result<(), String> {
        for (id, p) in &self.peers {
            if p.store.len() > p.store.capacity() {
                return Err(format!("peer {id} stores {} > {}", p.store.len(), p.store.capacity()));
            }
            if let Some(up) = self.uploads.get(id) {
                if up.active > p.profile.upload_capacity {
                    return Err(format!("peer {id} has {} transfers > {} slots", up.active, p.profile.upload_capacity));
                }
            }
            if !p.is_active() && !p.store.is_empty() {
                return Err(format!("departed peer {id} still stores chunks"));
            }
        }
        self.metrics.check()
    }

    /// Highest number of simultaneous uploads ever seen at each peer.
    pub fn peak_uploads(&self) -> BTreeMap<PeerId, u32> {
        self.uploads.iter().map(|(id, u)| (*id, u.peak)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OverlayKind {
    Tree,
    Mesh,
    Interval,
}

impl OverlayKind {
    pub const ALL: [OverlayKind; 3] = [OverlayKind::Tree, OverlayKind::Mesh, OverlayKind::Interval];

    pub fn name(self) -> &'static str {
        match self {
            OverlayKind::Tree => "tree",
            OverlayKind::Mesh => "mesh",
            OverlayKind::Interval => "interval",
        }
    }
}

impl std::fmt::Display for OverlayKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OverlayKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tree" => Ok(OverlayKind::Tree),
            "mesh" => Ok(OverlayKind::Mesh),
            "interval" => Ok(OverlayKind::Interval),
            other => Err(format!("unknown overlay `{other}`; expected one of tree, mesh, interval")),
        }
    }
}

/// Hooks an overlay implements to be driven by the engine.
pub trait OverlayDriver {
    fn kind(&self) -> OverlayKind;

    fn init(&mut self, _w: &mut World) {}

    fn on_join(&mut self, w: &mut World, peer: PeerId);

    /// Called while the peer's store is still intact, right before it is
    /// marked departed.
    fn on_leave(&mut self, w: &mut World, peer: PeerId, abrupt: bool);

    fn on_position_change(&mut self, _w: &mut World, _peer: PeerId) {}

    fn on_chunk_published(&mut self, w: &mut World, chunk: ChunkId);

    fn locate(&mut self, w: &mut World, requester: PeerId, chunk: ChunkId) -> Lookup;

    fn on_delivered(&mut self, _w: &mut World, _dst: PeerId, _src: Endpoint, _chunk: ChunkId, _purpose: Purpose) {}

    /// Runs after each publication and the playback requests it triggers.
    fn on_tick(&mut self, _w: &mut World) {}

    fn on_timer(&mut self, _w: &mut World, _owner: Owner, _tag: TimerTag) {}

    fn check_invariants(&self, _w: &World) -> Result<(), String> {
        Ok(())
    }

    fn finish(&mut self, _w: &mut World) {}
}

/// Inputs for one engine run, already validated.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub stream: StreamParams,
    pub timeline: StreamTimeline,
    pub params: EngineParams,
    pub horizon: f64,
    pub sessions: Vec<SessionEvent>,
    pub check_invariants: bool,
}

pub struct Engine<'a> {
    pub world: World,
    overlay: &'a mut dyn OverlayDriver,
    check_invariants: bool,
}

impl<'a> Engine<'a> {
    pub fn new(setup: RunSetup, overlay: &'a mut dyn OverlayDriver, seed: u64) -> Self {
        let mut world = World::new(setup.stream, setup.timeline, setup.params, setup.horizon, seed);
        for e in setup.sessions {
            if e.time < setup.horizon {
                world.schedule(e.time, Payload::Session(e));
            }
        }
        let first = world.stream.published_at(0);
        if first < setup.horizon {
            world.schedule(first, Payload::ProduceChunk(0));
        }
        if world.params.sample_period > 0.0 && world.params.sample_period < setup.horizon {
            world.schedule_timer(world.params.sample_period, Owner::Engine, TimerTag::Sample);
        }
        Self {
            world,
            overlay,
            check_invariants: setup.check_invariants,
        }
    }

    pub fn run(self) -> Result<MetricsReport, SimError> {
        self.run_with_world().map(|w| w.metrics)
    }

    /// Like `run`, but hands back the final world for inspection.
    pub fn run_with_world(mut self) -> Result<World, SimError> {
        self.overlay.init(&mut self.world);
        while let Some(ev) = self.world.queue.pop() {
            if ev.time >= self.world.horizon {
                break;
            }
            self.world.now = ev.time;
            let tick = matches!(ev.payload, Payload::ProduceChunk(_));
            self.dispatch(ev.payload);
            if tick && self.check_invariants {
                self.verify()?;
            }
        }
        self.overlay.finish(&mut self.world);
        if self.check_invariants {
            self.verify()?;
        }
        let mut w = self.world;
        for (id, p) in &w.peers {
            if p.is_active() {
                w.metrics.load.entry(*id).or_default().stored = p.store.len() as u64;
            }
        }
        Ok(w)
    }

    fn verify(&self) -> Result<(), SimError> {
        self.world
            .check()
            .and_then(|_| self.overlay.check_invariants(&self.world))
            .map_err(|message| SimError::Invariant {
                time: self.world.now,
                message,
            })
    }

    fn dispatch(&mut self, payload: Payload) {
        match payload {
            Payload::ProduceChunk(chunk) => self.produce(chunk),
            Payload::Session(e) => self.session(e),
            Payload::MessageDelivery { src, dst, message } => self.deliver(src, dst, message),
            Payload::TimerFire { owner, tag } => self.timer(owner, tag),
        }
    }

    fn produce(&mut self, chunk: ChunkId) {
        let w = &mut self.world;
        w.timeline.advance_to(chunk);
        w.metrics.chunks_produced += 1;
        let next = w.stream.published_at(chunk + 1);
        if next < w.horizon {
            w.schedule(next, Payload::ProduceChunk(chunk + 1));
        }
        self.overlay.on_chunk_published(&mut self.world, chunk);
        let requests: Vec<(PeerId, ChunkId)> = self
            .world
            .active_peers()
            .filter_map(|(id, p)| match p.state {
                PeerState::Hookup { lag } if lag > 0 && lag <= chunk => Some((id, chunk - lag)),
                _ => None,
            })
            .collect();
        for (peer, wanted) in requests {
            self.playback_request(peer, wanted);
        }
        self.overlay.on_tick(&mut self.world);
    }

    fn playback_request(&mut self, peer: PeerId, chunk: ChunkId) {
        self.world.metrics.requests += 1;
        match self.overlay.locate(&mut self.world, peer, chunk) {
            Lookup::Local => {
                let w = &mut self.world;
                w.metrics.served += 1;
                w.metrics.record_hops(0);
                self.startup_done(peer);
            }
            Lookup::Found {
                server: Endpoint::Peer(server),
                hops,
            } if server != peer => {
                self.world
                    .send_request(peer, server, chunk, Purpose::Playback { hops }, hops);
            }
            Lookup::Found {
                server: Endpoint::Producer,
                hops,
            } => {
                self.world
                    .producer_serve(peer, chunk, Purpose::Playback { hops }, hops);
            }
            Lookup::Found { .. } | Lookup::Missing => {
                if self.world.params.producer_archive {
                    self.world.metrics.archive_served += 1;
                    self.world
                        .producer_serve(peer, chunk, Purpose::Playback { hops: 1 }, 1);
                } else {
                    self.world.metrics.missing += 1;
                }
            }
        }
    }

    fn startup_done(&mut self, peer: PeerId) {
        let now = self.world.now;
        if let Some(p) = self.world.peers.get_mut(&peer) {
            if let Some(since) = p.awaiting_since.take() {
                self.world.metrics.record_startup(now - since);
            }
        }
    }

    fn session(&mut self, e: SessionEvent) {
        let head = self.world.head();
        let now = self.world.now;
        match e.kind {
            SessionKind::Join { position } => {
                if self.world.peers.contains_key(&e.peer_id) {
                    return;
                }
                let spread = self.world.params.cap_spread;
                let base = self.world.params.default_cap;
                let cap = if spread > 0 {
                    let lo = base.saturating_sub(spread);
                    self.world.rng.random_range(lo..=base + spread)
                } else {
                    base
                };
                let profile = PeerProfile {
                    peer_id: e.peer_id,
                    upload_capacity: cap,
                    storage_capacity: self.world.params.storage_chunks.max(1),
                    join_time: now,
                };
                let state = match head {
                    Some(h) if position < h => PeerState::Hookup { lag: h - position },
                    _ => PeerState::Live,
                };
                let awaiting_since = matches!(state, PeerState::Hookup { .. }).then_some(now);
                self.world.peers.insert(
                    e.peer_id,
                    PeerRuntime {
                        profile,
                        state,
                        store: ChunkStore::new(profile.storage_capacity),
                        epoch: 0,
                        awaiting_since,
                    },
                );
                self.world.metrics.load.entry(e.peer_id).or_default();
                self.overlay.on_join(&mut self.world, e.peer_id);
            }
            SessionKind::Leave => {
                if !self.world.is_active(e.peer_id) {
                    return;
                }
                let abrupt = self.world.rng.random::<f64>() < self.world.params.abrupt_leave_prob;
                self.overlay.on_leave(&mut self.world, e.peer_id, abrupt);
                self.depart(e.peer_id);
            }
            SessionKind::Pause { duration } => {
                let Some(p) = self.world.peers.get_mut(&e.peer_id).filter(|p| p.is_playing()) else {
                    return;
                };
                let lag = p.lag(head);
                let position = head.map_or(0, |h| h - lag);
                p.state = PeerState::Paused {
                    position,
                    lag_at_pause: lag,
                    duration,
                };
                p.epoch += 1;
                let epoch = p.epoch;
                self.world
                    .schedule_timer(now + duration, Owner::Peer(e.peer_id), TimerTag::Resume { epoch });
                self.overlay.on_position_change(&mut self.world, e.peer_id);
            }
            SessionKind::SeekForward { .. } | SessionKind::SeekBackward { .. } => {
                let Some(p) = self.world.peers.get_mut(&e.peer_id).filter(|p| p.is_active()) else {
                    return;
                };
                let h = head.unwrap_or(0);
                let current = h - p.lag(head).min(h);
                let target = apply_vcr(&e.kind, current, h);
                p.epoch += 1;
                p.state = if target >= h { PeerState::Live } else { PeerState::Hookup { lag: h - target } };
                p.awaiting_since = matches!(p.state, PeerState::Hookup { .. }).then_some(now);
                self.overlay.on_position_change(&mut self.world, e.peer_id);
            }
        }
    }

    fn depart(&mut self, peer: PeerId) {
        let w = &mut self.world;
        if let Some(p) = w.peers.get_mut(&peer) {
            w.metrics.load.entry(peer).or_default().stored = p.store.len() as u64;
            p.state = PeerState::Departed;
            p.store.clear();
            p.epoch += 1;
        }
        if let Some(up) = w.uploads.get_mut(&peer) {
            let lost: Vec<Transfer> = up.queue.drain(..).collect();
            for t in lost {
                w.metrics.dropped_messages += 1;
                w.fail_transfer(t.purpose);
            }
        }
    }

    fn deliver(&mut self, src: Endpoint, dst: PeerId, message: Message) {
        match message {
            Message::Request {
                requester,
                chunk,
                purpose,
            } => {
                if !self.world.is_active(dst) {
                    self.world.metrics.dropped_messages += 1;
                    self.world.fail_transfer(purpose);
                    return;
                }
                if self.world.send_chunk(Endpoint::Peer(dst), requester, chunk, purpose).is_err() {
                    self.world.fail_transfer(purpose);
                }
            }
            Message::Chunk { chunk, purpose } => {
                let src_gone = matches!(src, Endpoint::Peer(s) if !self.world.is_active(s));
                if !self.world.is_active(dst) || src_gone {
                    self.world.metrics.dropped_messages += 1;
                    self.world.fail_transfer(purpose);
                    return;
                }
                if let Purpose::Playback { hops } = purpose {
                    self.world.metrics.served += 1;
                    self.world.metrics.record_hops(hops);
                    self.startup_done(dst);
                }
                if let Endpoint::Peer(s) = src {
                    self.world.metrics.load.entry(s).or_default().served += 1;
                }
                self.overlay.on_delivered(&mut self.world, dst, src, chunk, purpose);
            }
        }
    }

    fn timer(&mut self, owner: Owner, tag: TimerTag) {
        match (owner, tag) {
            (Owner::Peer(p), TimerTag::TransferDone) => self.world.transfer_done(p),
            (Owner::Peer(p), TimerTag::Resume { epoch }) => self.resume(p, epoch),
            (Owner::Engine, TimerTag::Sample) => {
                self.sample_replicas();
                let next = self.world.now + self.world.params.sample_period;
                if next < self.world.horizon {
                    self.world.schedule_timer(next, Owner::Engine, TimerTag::Sample);
                }
            }
            _ => self.overlay.on_timer(&mut self.world, owner, tag),
        }
    }

    fn resume(&mut self, peer: PeerId, epoch: u64) {
        let head = self.world.head();
        let now = self.world.now;
        let cd = self.world.stream;
        let Some(p) = self.world.peers.get_mut(&peer) else {
            return;
        };
        if p.epoch != epoch {
            return;
        }
        if let PeerState::Paused {
            lag_at_pause, duration, ..
        } = p.state
        {
            let lag = (lag_at_pause + cd.pause_lag(duration)).min(head.unwrap_or(0));
            p.state = if lag == 0 { PeerState::Live } else { PeerState::Hookup { lag } };
            p.awaiting_since = (lag > 0).then_some(now);
            self.overlay.on_position_change(&mut self.world, peer);
        }
    }

    fn sample_replicas(&mut self) {
        let w = &mut self.world;
        let Some(head) = w.head() else {
            return;
        };
        let mut counts = vec![0u32; head as usize + 1];
        for (_, p) in w.peers.iter().filter(|(_, p)| p.is_active()) {
            for c in p.store.iter() {
                if let Some(slot) = counts.get_mut(c as usize) {
                    *slot += 1;
                }
            }
        }
        let now = w.now;
        w.metrics
            .replica_rows
            .extend(counts.into_iter().enumerate().map(|(c, n)| (now, c as ChunkId, n)));
    }
}

/// Lag increase a paused peer accumulates, exposed for tests and drivers.
pub fn resumed_lag(stream: &StreamParams, lag_at_pause: Lag, duration: f64) -> Lag {
    lag_at_pause + stream.pause_lag(duration)
}
