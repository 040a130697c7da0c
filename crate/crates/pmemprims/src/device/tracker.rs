//! Byte-granular read/write tracking for simulated devices. The crash-check
//! harness uses it to prove that a recovery run never observed the bytes a
//! set of crash images disagrees on, letting one representative run stand in
//! for the whole set.

/// Bitmap with one bit per byte of the region. Each 64-bit word covers
/// exactly one cache line, so per-line queries are single-word tests.
#[derive(Clone)]
pub(crate) struct ByteBitmap {
    words: Vec<u64>,
}

impl ByteBitmap {
    pub fn new(capacity: u64) -> Self {
        ByteBitmap { words: vec![0; capacity.div_ceil(64) as usize] }
    }

    pub fn set_range(&mut self, offset: u64, len: u64) {
        if len == 0 {
            return;
        }
        let (mut word, mut bit) = ((offset / 64) as usize, offset % 64);
        let mut remaining = len;
        while remaining > 0 {
            let take = (64 - bit).min(remaining);
            let mask = if take == 64 { u64::MAX } else { ((1u64 << take) - 1) << bit };
            self.words[word] |= mask;
            remaining -= take;
            word += 1;
            bit = 0;
        }
    }

    /// `self |= range & !written`.
    pub fn observe_range(&mut self, offset: u64, len: u64, written: &ByteBitmap) {
        if len == 0 {
            return;
        }
        let (mut word, mut bit) = ((offset / 64) as usize, offset % 64);
        let mut remaining = len;
        while remaining > 0 {
            let take = (64 - bit).min(remaining);
            let mask = if take == 64 { u64::MAX } else { ((1u64 << take) - 1) << bit };
            self.words[word] |= mask & !written.words[word];
            remaining -= take;
            word += 1;
            bit = 0;
        }
    }

    pub fn intersects(&self, other: &ByteBitmap) -> bool {
        self.words.iter().zip(&other.words).any(|(a, b)| a & b != 0)
    }

    /// Cache lines with at least one bit set (word index == line index).
    pub fn nonzero_lines(&self) -> impl Iterator<Item = u64> + '_ {
        self.words
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0)
            .map(|(i, _)| i as u64)
    }
}

/// Tracks which pristine (not self-written) bytes a run has read.
pub(crate) struct ReadTracker {
    pub written: ByteBitmap,
    pub observed: ByteBitmap,
}

impl ReadTracker {
    pub fn new(capacity: u64) -> Self {
        ReadTracker { written: ByteBitmap::new(capacity), observed: ByteBitmap::new(capacity) }
    }

    pub fn on_store(&mut self, offset: u64, len: u64) {
        self.written.set_range(offset, len);
    }

    pub fn on_read(&mut self, offset: u64, len: u64) {
        self.observed.observe_range(offset, len, &self.written);
    }
}
