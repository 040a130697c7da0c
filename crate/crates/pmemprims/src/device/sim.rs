//! Simulated backend: in-memory region plus full event tracing and exact
//! durability statistics. Single logical actor; the enclosing `Device`
//! serializes access.

use std::collections::{HashMap, HashSet};

use super::tracker::ReadTracker;
use super::{
    covering_lines, store_fragments, DeviceStats, Event, EventKind, EventTrace, StoreData,
    BLOCK_SIZE, CACHE_LINE_SIZE,
};

pub(super) struct SimState {
    content: Vec<u8>,
    baseline: Vec<u8>,
    events: Vec<Event>,
    /// Event recording can be switched off for internal scratch devices
    /// (crash-image recovery runs) that never consult the trace.
    tracing: bool,
    stats: DeviceStats,
    /// Fence epoch, advanced on every fence. Only equality between marks
    /// matters, so it is never reset.
    epoch: u64,
    /// Last epoch in which each line was persisted (written back or
    /// streamed), since the last stats reset.
    line_last_epoch: HashMap<u64, u64>,
    blocks_touched: HashSet<u64>,
    pub(super) tracker: Option<ReadTracker>,
}

impl SimState {
    pub fn new(capacity: u64) -> Self {
        Self::with_content(vec![0u8; capacity as usize])
    }

    pub fn with_content(content: Vec<u8>) -> Self {
        SimState {
            baseline: content.clone(),
            content,
            events: Vec::new(),
            tracing: true,
            stats: DeviceStats::default(),
            epoch: 0,
            line_last_epoch: HashMap::new(),
            blocks_touched: HashSet::new(),
            tracker: None,
        }
    }

    pub fn set_tracing(&mut self, on: bool) {
        self.tracing = on;
    }

    /// Overwrite content directly: no events, no stats, no tracker marks.
    /// Used to materialize crash images and fixtures.
    pub fn patch(&mut self, offset: u64, data: &[u8]) {
        self.content[offset as usize..offset as usize + data.len()].copy_from_slice(data);
    }

    fn push(&mut self, kind: EventKind) {
        if !self.tracing {
            return;
        }
        let seq = self.events.len() as u64 + 1;
        self.events.push(Event { seq, kind });
    }

    /// Count a line as persisted in the current epoch; a line persisted in
    /// two or more distinct epochs bumps `repeat_persist_lines` once per
    /// extra epoch.
    fn mark_line_persisted(&mut self, line: u64) {
        match self.line_last_epoch.entry(line) {
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(self.epoch);
            }
            std::collections::hash_map::Entry::Occupied(mut o) => {
                if *o.get() != self.epoch {
                    *o.get_mut() = self.epoch;
                    self.stats.repeat_persist_lines += 1;
                }
            }
        }
    }

    pub fn store(&mut self, offset: u64, data: &[u8], streaming: bool, detailed: bool) {
        self.content[offset as usize..offset as usize + data.len()].copy_from_slice(data);
        if let Some(tracker) = &mut self.tracker {
            tracker.on_store(offset, data.len() as u64);
        }
        self.stats.bytes_stored += data.len() as u64;
        if detailed && !data.is_empty() {
            for block in offset / BLOCK_SIZE..=(offset + data.len() as u64 - 1) / BLOCK_SIZE {
                self.blocks_touched.insert(block);
            }
            self.stats.distinct_blocks_touched = self.blocks_touched.len() as u64;
            if streaming {
                for line in covering_lines(offset, data.len() as u64) {
                    self.mark_line_persisted(line);
                }
            }
        }
        for (at, frag) in store_fragments(offset, data) {
            let data = StoreData::new(frag);
            let kind = if streaming {
                EventKind::StreamingStore { offset: at, data }
            } else {
                EventKind::Store { offset: at, data }
            };
            self.push(kind);
        }
    }

    pub fn write_back(&mut self, line_offset: u64, detailed: bool) {
        self.stats.lines_written_back += 1;
        if detailed {
            self.mark_line_persisted(line_offset / CACHE_LINE_SIZE);
        }
        self.push(EventKind::WriteBack { line_offset });
    }

    pub fn fence(&mut self) {
        self.stats.barriers += 1;
        self.epoch += 1;
        self.push(EventKind::Fence);
    }

    pub fn read_into(&mut self, offset: u64, out: &mut [u8]) {
        if let Some(tracker) = &mut self.tracker {
            tracker.on_read(offset, out.len() as u64);
        }
        out.copy_from_slice(&self.content[offset as usize..offset as usize + out.len()]);
    }

    pub fn stats(&self) -> DeviceStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = DeviceStats::default();
        self.line_last_epoch.clear();
        self.blocks_touched.clear();
    }

    pub fn trace(&self, capacity: u64) -> EventTrace {
        EventTrace { capacity, baseline: self.baseline.clone(), events: self.events.clone() }
    }

    pub fn trace_len(&self) -> u64 {
        self.events.len() as u64
    }

    pub fn reset_trace(&mut self) {
        self.events.clear();
        self.baseline = self.content.clone();
    }
}
