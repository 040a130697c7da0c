//! Crash-image derivation: every (or a sampled subset of) persisted state a
//! region can be in if the system crashes at a given point in an event trace.
//!
//! The model: crash points sit at event boundaries. Cache lines persist
//! independently and monotonically. For a crash at event `c`, each line `L`
//! holds its volatile content replayed up to some `persist_seq[L]` in
//! `[floor(L, c), c]`, where the floor is the last fence preceded by a
//! write-back of `L` (or a streaming store into `L`) issued after `L`'s
//! previous floor. 8-byte store atomicity is already encoded in the trace, so
//! snapping to event boundaries captures intra-store tearing exactly.

mod harness;

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::device::{EventKind, EventTrace, CACHE_LINE_SIZE};
use crate::error::{Error, Result};

pub use harness::{check_crash_consistency, CrashCheck, StepOracle, StepRecorder};

/// Default exhaustive-enumeration cap.
pub const DEFAULT_IMAGE_CAP: u128 = 1 << 20;

/// How to generate images at a crash point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageMode {
    /// Every distinct legal image, exactly once. Refuses above `cap`.
    Exhaustive { cap: u128 },
    /// `count` images, drawn uniformly per line over the legal persist
    /// sequence numbers; reproducible for a given seed.
    Sampled { count: u64, seed: u64 },
}

impl ImageMode {
    pub fn exhaustive() -> Self {
        ImageMode::Exhaustive { cap: DEFAULT_IMAGE_CAP }
    }

    pub fn sampled(count: u64, seed: u64) -> Self {
        ImageMode::Sampled { count, seed }
    }
}

/// Which event boundaries to crash at.
#[derive(Debug, Clone)]
pub enum CrashPoints {
    /// Every boundary `0..=trace_len`.
    All,
    At(Vec<u64>),
}

/// One crash-reachable persisted state of a region.
#[derive(Debug, Clone)]
pub struct CrashImage {
    pub content: Vec<u8>,
    pub crash_seq: u64,
    /// Chosen persist sequence per cache line touched by the trace; untouched
    /// lines implicitly persist at 0 (the baseline).
    pub per_line_persist_seq: BTreeMap<u64, u64>,
}

/// A predicate violation found on one crash image.
#[derive(Debug, Clone)]
pub struct CrashFailure {
    pub crash_seq: u64,
    pub diagnostic: String,
    /// Lines where the failing image differs from the trace's final content,
    /// as (line index, hex dump).
    pub differing_lines: Vec<(u64, String)>,
}

/// Outcome of a crash-consistency check.
#[derive(Debug, Clone)]
pub struct CrashReport {
    pub images_checked: u64,
    /// First failures in check order (capped; see `failed_count` for the
    /// total).
    pub failures: Vec<CrashFailure>,
    pub failed_count: u64,
    pub mode: ImageMode,
}

impl CrashReport {
    pub fn passed(&self) -> bool {
        self.failed_count == 0
    }
}

impl std::fmt::Display for CrashReport {
    /// Line-oriented: one line per recorded failure, then
    /// `checked=<n> failed=<m>`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for failure in &self.failures {
            write!(f, "crash_seq={} diag={:?}", failure.crash_seq, failure.diagnostic)?;
            for (line, hex) in &failure.differing_lines {
                write!(f, " line[{line}]={hex}")?;
            }
            writeln!(f)?;
        }
        writeln!(f, "checked={} failed={}", self.images_checked, self.failed_count)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

const LINE: usize = CACHE_LINE_SIZE as usize;

/// Per-line snapshot taken after a store event.
#[derive(Clone)]
pub(crate) struct Snapshot {
    pub seq: u64,
    pub content: [u8; LINE],
}

/// Incremental replay of a trace tracking, for every line, its floor state
/// and the snapshots reachable beyond it.
pub(crate) struct Walker<'t> {
    trace: &'t EventTrace,
    consumed: usize,
    volatile: Vec<u8>,
    /// Every line at its floor content.
    base: Vec<u8>,
    floor_seq: BTreeMap<u64, u64>,
    /// Lines with stores since their floor: snapshot after each store event.
    pub(crate) open: BTreeMap<u64, Vec<Snapshot>>,
    /// Lines written back or streamed since the last fence.
    pending_persist: std::collections::BTreeSet<u64>,
}

impl<'t> Walker<'t> {
    pub fn new(trace: &'t EventTrace) -> Self {
        Walker {
            trace,
            consumed: 0,
            volatile: trace.baseline.clone(),
            base: trace.baseline.clone(),
            floor_seq: BTreeMap::new(),
            open: BTreeMap::new(),
            pending_persist: std::collections::BTreeSet::new(),
        }
    }

    pub fn base(&self) -> &[u8] {
        &self.base
    }

    fn line_of(&self, line: u64) -> [u8; LINE] {
        let start = line as usize * LINE;
        self.volatile[start..start + LINE].try_into().unwrap()
    }

    /// Consume events until `upto` events have been applied.
    pub fn advance_to(&mut self, upto: u64) {
        while (self.consumed as u64) < upto {
            let event = &self.trace.events[self.consumed];
            self.consumed += 1;
            match &event.kind {
                EventKind::Store { offset, data } | EventKind::StreamingStore { offset, data } => {
                    let off = *offset as usize;
                    self.volatile[off..off + data.len()].copy_from_slice(data.as_slice());
                    let line = offset / CACHE_LINE_SIZE;
                    let snap = Snapshot { seq: event.seq, content: self.line_of(line) };
                    self.open.entry(line).or_default().push(snap);
                    if matches!(event.kind, EventKind::StreamingStore { .. }) {
                        self.pending_persist.insert(line);
                    }
                }
                EventKind::WriteBack { line_offset } => {
                    self.pending_persist.insert(line_offset / CACHE_LINE_SIZE);
                }
                EventKind::Fence => {
                    for line in std::mem::take(&mut self.pending_persist) {
                        let start = line as usize * LINE;
                        self.base[start..start + LINE]
                            .copy_from_slice(&self.volatile[start..start + LINE]);
                        self.floor_seq.insert(line, event.seq);
                        self.open.remove(&line);
                    }
                }
            }
        }
    }

    pub fn floor(&self, line: u64) -> u64 {
        self.floor_seq.get(&line).copied().unwrap_or(0)
    }

    fn base_line(&self, line: u64) -> [u8; LINE] {
        let start = line as usize * LINE;
        self.base[start..start + LINE].try_into().unwrap()
    }

    /// Distinct reachable contents for a line at the current position, floor
    /// state first, then in first-reached order.
    pub fn distinct_candidates(&self, line: u64) -> Vec<[u8; LINE]> {
        let base = self.base_line(line);
        let mut out = vec![base];
        if let Some(snaps) = self.open.get(&line) {
            for snap in snaps {
                if !out.contains(&snap.content) {
                    out.push(snap.content);
                }
            }
        }
        out
    }

    /// Content of a line if it persisted at `seq` (which must be within the
    /// legal range for the current position).
    pub fn content_at(&self, line: u64, seq: u64) -> [u8; LINE] {
        match self.open.get(&line) {
            None => self.base_line(line),
            Some(snaps) => {
                let idx = snaps.partition_point(|s| s.seq <= seq);
                if idx == 0 {
                    self.base_line(line)
                } else {
                    snaps[idx - 1].content
                }
            }
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent RNG stream for one crash point of one run.
pub(crate) fn point_rng(seed: u64, crash_seq: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(crash_seq)))
}

/// Derive crash images for a crash placed after the first `crash_seq` events
/// of `trace`. Exhaustive mode yields every image satisfying the model
/// exactly once (refusing above the cap); sampled mode yields `count` images
/// drawn uniformly per line over legal persist sequence numbers.
pub fn crash_images<'t>(
    trace: &'t EventTrace,
    crash_seq: u64,
    mode: &ImageMode,
) -> Result<CrashImages<'t>> {
    if crash_seq > trace.len() {
        return Err(Error::BadCrashPoint { crash_seq, len: trace.len() });
    }
    let mut walker = Walker::new(trace);
    walker.advance_to(crash_seq);

    let lines: Vec<u64> = walker.open.keys().copied().collect();
    let state = match mode {
        ImageMode::Exhaustive { cap } => {
            let mut per_line = Vec::with_capacity(lines.len());
            let mut count: u128 = 1;
            for &line in &lines {
                let cands = walker.distinct_candidates(line);
                count = count.saturating_mul(cands.len() as u128);
                per_line.push(cands);
            }
            if count > *cap {
                return Err(Error::ImageCountAboveCap { count, cap: *cap });
            }
            IterState::Exhaustive { per_line, odometer: vec![0; lines.len()], done: false }
        }
        ImageMode::Sampled { count, seed } => IterState::Sampled {
            remaining: *count,
            rng: point_rng(*seed, crash_seq),
        },
    };
    Ok(CrashImages { walker, crash_seq, lines, state })
}

enum IterState {
    Exhaustive { per_line: Vec<Vec<[u8; LINE]>>, odometer: Vec<usize>, done: bool },
    Sampled { remaining: u64, rng: ChaCha8Rng },
}

/// Iterator over the images at one crash point.
pub struct CrashImages<'t> {
    walker: Walker<'t>,
    crash_seq: u64,
    lines: Vec<u64>,
    state: IterState,
}

impl CrashImages<'_> {
    /// Number of distinct images (exhaustive mode only).
    pub fn distinct_count(&self) -> Option<u128> {
        match &self.state {
            IterState::Exhaustive { per_line, .. } => {
                Some(per_line.iter().map(|c| c.len() as u128).product())
            }
            IterState::Sampled { .. } => None,
        }
    }

    fn build(&self, chosen: &[(u64, [u8; LINE], u64)]) -> CrashImage {
        let mut content = self.walker.base().to_vec();
        let mut per_line = BTreeMap::new();
        for (line, bytes, seq) in chosen {
            let start = *line as usize * LINE;
            content[start..start + LINE].copy_from_slice(bytes);
            per_line.insert(*line, *seq);
        }
        // Lines at their floor keep the floor seq.
        for (&line, &floor) in &self.walker.floor_seq {
            per_line.entry(line).or_insert(floor);
        }
        CrashImage { content, crash_seq: self.crash_seq, per_line_persist_seq: per_line }
    }
}

impl Iterator for CrashImages<'_> {
    type Item = CrashImage;

    fn next(&mut self) -> Option<CrashImage> {
        let walker = &self.walker;
        let lines = &self.lines;
        let crash_seq = self.crash_seq;
        let chosen: Vec<(u64, [u8; LINE], u64)> = match &mut self.state {
            IterState::Exhaustive { per_line, odometer, done } => {
                if *done {
                    return None;
                }
                let chosen = lines
                    .iter()
                    .enumerate()
                    .map(|(i, &line)| {
                        let content = per_line[i][odometer[i]];
                        // Smallest legal seq yielding this content.
                        let seq = if odometer[i] == 0 {
                            walker.floor(line)
                        } else {
                            walker.open[&line]
                                .iter()
                                .find(|s| s.content == content)
                                .map(|s| s.seq)
                                .unwrap_or(crash_seq)
                        };
                        (line, content, seq)
                    })
                    .collect();
                // Advance odometer, last line fastest.
                *done = true;
                let mut i = odometer.len();
                while i > 0 {
                    i -= 1;
                    odometer[i] += 1;
                    if odometer[i] < per_line[i].len() {
                        *done = false;
                        break;
                    }
                    odometer[i] = 0;
                }
                chosen
            }
            IterState::Sampled { remaining, rng } => {
                if *remaining == 0 {
                    return None;
                }
                *remaining -= 1;
                lines
                    .iter()
                    .map(|&line| {
                        let floor = walker.floor(line);
                        let seq = rng.gen_range(floor..=crash_seq);
                        (line, walker.content_at(line, seq), seq)
                    })
                    .collect()
            }
        };
        Some(self.build(&chosen))
    }
}
