//! Byte-addressable persistence abstraction with explicit ordering semantics.
//!
//! A [`Device`] models a region of persistent memory. Plain stores land in a
//! volatile view and become durable only once the covering cache line has been
//! written back (`write_back`) and a `fence` has been issued. Streaming stores
//! bypass the cache and are durable after the next fence with no explicit
//! write-back. `persist` is the usual write-back-every-line-then-fence
//! combination.
//!
//! Two backends exist: a `Simulated` backend that additionally records every
//! store/write-back/fence as an [`Event`] (the input to the crash checker),
//! and a `Real` backend over a memory-mapped file for timing runs.

mod real;
mod sim;
pub(crate) mod tracker;

use std::path::Path;
use std::sync::Mutex;

use crate::error::{Error, Result};

pub use real::DurabilityMapping;

/// Write-back and torn-persistence granularity.
pub const CACHE_LINE_SIZE: u64 = 64;
/// Internal device access granularity; capacities are multiples of this.
pub const BLOCK_SIZE: u64 = 256;
/// Stores are atomic in aligned units of this many bytes; larger writes are
/// decomposed before tracing.
pub const STORE_ATOM: u64 = 8;

/// Which backend a device runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Memory-mapped file; supports concurrent writers on disjoint ranges.
    Real,
    /// In-memory region with full event tracing; single logical actor.
    Simulated,
}

/// Device geometry and backend selection.
#[derive(Debug, Clone)]
pub struct DeviceConfig {
    /// Region size in bytes; must be a positive multiple of [`BLOCK_SIZE`].
    pub capacity: u64,
    pub backend: Backend,
    /// Track per-line fence-epoch history and per-block touch sets. Costs a
    /// map update per persisted line; timing-sensitive real-backend runs can
    /// switch it off (the gauges then stay zero).
    pub detailed_stats: bool,
}

impl DeviceConfig {
    pub fn simulated(capacity: u64) -> Self {
        DeviceConfig { capacity, backend: Backend::Simulated, detailed_stats: true }
    }

    pub fn real(capacity: u64) -> Self {
        DeviceConfig { capacity, backend: Backend::Real, detailed_stats: true }
    }

    pub fn with_detailed_stats(mut self, on: bool) -> Self {
        self.detailed_stats = on;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.capacity == 0 || self.capacity % BLOCK_SIZE != 0 {
            return Err(Error::UnalignedCapacity {
                capacity: self.capacity,
                block_size: BLOCK_SIZE,
            });
        }
        Ok(())
    }
}

/// Durability statistics. All counters are monotone between resets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeviceStats {
    /// Number of fence events.
    pub barriers: u64,
    /// Number of write-back events.
    pub lines_written_back: u64,
    /// Distinct 256-byte blocks that received any store since the last reset.
    pub distinct_blocks_touched: u64,
    /// Total payload bytes stored.
    pub bytes_stored: u64,
    /// Cache lines persisted (written back or streamed) in two or more
    /// distinct fence epochs since the last reset, counted once per extra
    /// epoch.
    pub repeat_persist_lines: u64,
}

/// Payload of a single traced store: at most 8 bytes, never crossing an
/// 8-byte-aligned boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreData {
    len: u8,
    bytes: [u8; 8],
}

impl StoreData {
    fn new(src: &[u8]) -> Self {
        debug_assert!(src.len() <= 8);
        let mut bytes = [0u8; 8];
        bytes[..src.len()].copy_from_slice(src);
        StoreData { len: src.len() as u8, bytes }
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.bytes[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// One traced device event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    /// Strictly increasing index within the trace, starting at 1.
    pub seq: u64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Store { offset: u64, data: StoreData },
    StreamingStore { offset: u64, data: StoreData },
    /// Cache-line write-back; `line_offset` is line-aligned, length implied.
    WriteBack { line_offset: u64 },
    Fence,
}

impl EventKind {
    /// Cache line a store event writes into, if it is a store.
    pub fn store_line(&self) -> Option<u64> {
        match self {
            EventKind::Store { offset, .. } | EventKind::StreamingStore { offset, .. } => {
                Some(offset / CACHE_LINE_SIZE)
            }
            _ => None,
        }
    }
}

/// Ordered record of events since device creation or the last trace reset,
/// together with the region content at trace start (treated as durable).
#[derive(Debug, Clone)]
pub struct EventTrace {
    pub capacity: u64,
    pub baseline: Vec<u8>,
    pub events: Vec<Event>,
}

impl EventTrace {
    pub fn len(&self) -> u64 {
        self.events.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Decompose an application-level store into trace fragments: each at most
/// [`STORE_ATOM`] bytes and never crossing an atom-aligned boundary, in
/// ascending offset order.
pub(crate) fn store_fragments(offset: u64, data: &[u8]) -> impl Iterator<Item = (u64, &[u8])> {
    let mut pos = 0usize;
    std::iter::from_fn(move || {
        if pos >= data.len() {
            return None;
        }
        let at = offset + pos as u64;
        let until_boundary = STORE_ATOM - (at % STORE_ATOM);
        let take = until_boundary.min((data.len() - pos) as u64) as usize;
        let frag = (at, &data[pos..pos + take]);
        pos += take;
        Some(frag)
    })
}

/// Cache lines covering the byte range `[offset, offset+len)`.
pub(crate) fn covering_lines(offset: u64, len: u64) -> std::ops::RangeInclusive<u64> {
    if len == 0 {
        #[allow(clippy::reversed_empty_ranges)]
        return 1..=0;
    }
    (offset / CACHE_LINE_SIZE)..=((offset + len - 1) / CACHE_LINE_SIZE)
}

enum DeviceInner {
    Sim(Mutex<sim::SimState>),
    Real(real::RealDevice),
}

/// A persistence region. All operations take `&self`; the simulated backend
/// serializes internally (it models a single logical actor), the real backend
/// allows concurrent writers on disjoint byte ranges.
pub struct Device {
    config: DeviceConfig,
    inner: DeviceInner,
}

impl Device {
    /// Open a device. A newly created region reads as all zero bytes. The
    /// real backend requires `path`; reopening an existing file of the right
    /// size keeps its content so persisted state can be recovered.
    pub fn open(config: DeviceConfig, path: Option<&Path>) -> Result<Device> {
        config.validate()?;
        let inner = match config.backend {
            Backend::Simulated => {
                DeviceInner::Sim(Mutex::new(sim::SimState::new(config.capacity)))
            }
            Backend::Real => {
                let path = path.ok_or(Error::PathRequired)?;
                DeviceInner::Real(real::RealDevice::open(path, config.capacity)?)
            }
        };
        Ok(Device { config, inner })
    }

    /// Open a simulated device whose initial (and baseline) content is given.
    /// Used to materialize crash images and on-disk fixtures.
    pub fn open_simulated_with_content(config: DeviceConfig, content: &[u8]) -> Result<Device> {
        config.validate()?;
        if config.backend != Backend::Simulated {
            return Err(Error::TraceUnavailable);
        }
        if content.len() as u64 != config.capacity {
            return Err(Error::OutOfRange {
                offset: 0,
                len: content.len() as u64,
                capacity: config.capacity,
            });
        }
        let inner = DeviceInner::Sim(Mutex::new(sim::SimState::with_content(content.to_vec())));
        Ok(Device { config, inner })
    }

    pub fn capacity(&self) -> u64 {
        self.config.capacity
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn backend(&self) -> Backend {
        self.config.backend
    }

    /// Durability mapping chosen for the real backend, if any.
    pub fn durability_mapping(&self) -> Option<DurabilityMapping> {
        match &self.inner {
            DeviceInner::Real(r) => Some(r.mapping()),
            DeviceInner::Sim(_) => None,
        }
    }

    fn check_range(&self, offset: u64, len: u64) -> Result<()> {
        if offset.checked_add(len).is_none_or(|end| end > self.config.capacity) {
            return Err(Error::OutOfRange { offset, len, capacity: self.config.capacity });
        }
        Ok(())
    }

    /// Plain store. Visible to subsequent reads immediately; durable only
    /// after a write-back of the covering lines plus a fence.
    pub fn store(&self, offset: u64, data: &[u8]) -> Result<()> {
        self.check_range(offset, data.len() as u64)?;
        match &self.inner {
            DeviceInner::Sim(m) => {
                m.lock().unwrap().store(offset, data, false, self.config.detailed_stats)
            }
            DeviceInner::Real(r) => r.store(offset, data, self.config.detailed_stats),
        }
        Ok(())
    }

    /// Streaming (non-temporal) store: bypasses the cache, durable after the
    /// next fence without an explicit write-back.
    pub fn store_streaming(&self, offset: u64, data: &[u8]) -> Result<()> {
        self.check_range(offset, data.len() as u64)?;
        match &self.inner {
            DeviceInner::Sim(m) => {
                m.lock().unwrap().store(offset, data, true, self.config.detailed_stats)
            }
            DeviceInner::Real(r) => r.store_streaming(offset, data, self.config.detailed_stats),
        }
        Ok(())
    }

    /// Mark the cache line covering `offset` for durable write-back. Its
    /// current content is guaranteed durable only after the next fence.
    pub fn write_back(&self, offset: u64) -> Result<()> {
        self.check_range(offset, 1)?;
        let line_offset = offset / CACHE_LINE_SIZE * CACHE_LINE_SIZE;
        match &self.inner {
            DeviceInner::Sim(m) => {
                m.lock().unwrap().write_back(line_offset, self.config.detailed_stats)
            }
            DeviceInner::Real(r) => r.write_back(line_offset, self.config.detailed_stats),
        }
        Ok(())
    }

    /// Write back every cache line covering `[offset, offset+len)`.
    pub fn write_back_range(&self, offset: u64, len: u64) -> Result<()> {
        self.check_range(offset, len)?;
        for line in covering_lines(offset, len) {
            self.write_back(line * CACHE_LINE_SIZE)?;
        }
        Ok(())
    }

    /// Store fence: all previously issued write-backs and streaming stores
    /// become durable.
    pub fn fence(&self) {
        match &self.inner {
            DeviceInner::Sim(m) => m.lock().unwrap().fence(),
            DeviceInner::Real(r) => r.fence(),
        }
    }

    /// Write back every covering line, then issue exactly one fence.
    pub fn persist(&self, offset: u64, len: u64) -> Result<()> {
        self.write_back_range(offset, len)?;
        self.fence();
        Ok(())
    }

    /// Current (volatile-view) content of the range.
    pub fn read(&self, offset: u64, len: u64) -> Result<Vec<u8>> {
        let mut out = vec![0u8; len as usize];
        self.read_into(offset, &mut out)?;
        Ok(out)
    }

    pub fn read_into(&self, offset: u64, out: &mut [u8]) -> Result<()> {
        self.check_range(offset, out.len() as u64)?;
        match &self.inner {
            DeviceInner::Sim(m) => m.lock().unwrap().read_into(offset, out),
            DeviceInner::Real(r) => r.read_into(offset, out),
        }
        Ok(())
    }

    pub fn stats(&self) -> DeviceStats {
        match &self.inner {
            DeviceInner::Sim(m) => m.lock().unwrap().stats(),
            DeviceInner::Real(r) => r.stats(),
        }
    }

    pub fn reset_stats(&self) {
        match &self.inner {
            DeviceInner::Sim(m) => m.lock().unwrap().reset_stats(),
            DeviceInner::Real(r) => r.reset_stats(),
        }
    }

    /// Snapshot of the event trace since creation or the last trace reset.
    /// Simulated backend only.
    pub fn trace(&self) -> Result<EventTrace> {
        match &self.inner {
            DeviceInner::Sim(m) => Ok(m.lock().unwrap().trace(self.config.capacity)),
            DeviceInner::Real(_) => Err(Error::TraceUnavailable),
        }
    }

    /// Number of events currently in the trace (cheap watermark accessor).
    pub fn trace_len(&self) -> Result<u64> {
        match &self.inner {
            DeviceInner::Sim(m) => Ok(m.lock().unwrap().trace_len()),
            DeviceInner::Real(_) => Err(Error::TraceUnavailable),
        }
    }

    /// Clear the trace and adopt the current content as the new baseline.
    /// The baseline is treated as fully durable by the crash checker, so call
    /// this only at a quiescent point (e.g. after a fence, or right after
    /// setup whose durability is not under test).
    pub fn reset_trace(&self) -> Result<()> {
        match &self.inner {
            DeviceInner::Sim(m) => {
                m.lock().unwrap().reset_trace();
                Ok(())
            }
            DeviceInner::Real(_) => Err(Error::TraceUnavailable),
        }
    }

    /// Simulated scratch device without event recording, for internal
    /// recovery runs over crash images.
    pub(crate) fn sim_untraced(capacity: u64) -> Result<Device> {
        let device = Device::open(DeviceConfig::simulated(capacity), None)?;
        if let DeviceInner::Sim(m) = &device.inner {
            m.lock().unwrap().set_tracing(false);
        }
        Ok(device)
    }

    /// Overwrite content directly, bypassing events, stats, and tracking.
    pub(crate) fn sim_patch(&self, offset: u64, data: &[u8]) {
        if let DeviceInner::Sim(m) = &self.inner {
            m.lock().unwrap().patch(offset, data);
        }
    }

    pub(crate) fn sim_install_tracker(&self) {
        if let DeviceInner::Sim(m) = &self.inner {
            let mut state = m.lock().unwrap();
            state.tracker = Some(tracker::ReadTracker::new(self.config.capacity));
        }
    }

    pub(crate) fn sim_take_tracker(&self) -> Option<tracker::ReadTracker> {
        if let DeviceInner::Sim(m) = &self.inner {
            m.lock().unwrap().tracker.take()
        } else {
            None
        }
    }
}

impl std::fmt::Debug for Device {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Device")
            .field("backend", &self.config.backend)
            .field("capacity", &self.config.capacity)
            .finish()
    }
}
