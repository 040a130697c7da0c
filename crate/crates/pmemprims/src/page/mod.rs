//! Failure-atomic propagation of volatile pages to persistent slots.
//!
//! A page store divides its device region into a micro-log area (one
//! micro-log per flusher) followed by page slots. Each slot is a 256-byte
//! header block (pid, pvn; pid 0 means free, pvn 0 means never validated)
//! and `page_size` data bytes. Among durable slots, the highest pvn per pid
//! is authoritative; recovery scans all headers, so no slot ever needs to be
//! invalidated before reuse.
//!
//! Three flush paths:
//!
//! - [`PageStore::flush_cow`] writes the full image to a free slot, persists
//!   it, then validates the header — two barriers, old slot freed afterwards.
//! - [`PageStore::flush_mulog`] records only the dirty lines in the flusher's
//!   micro-log (invalidate, fill, validate), then patches the slot in place —
//!   four barriers but far fewer bytes for small deltas. Recovery reapplies
//!   micro-logs guarded by their pvn: a log with `pvn == slot.pvn + 1`
//!   applies, `pvn == slot.pvn` reapplies idempotently (healing a torn
//!   in-place update), anything older is skipped.
//! - [`PageStore::flush_hybrid`] picks between them on the dirty-line count.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Mutex;

use crate::device::{Device, BLOCK_SIZE, CACHE_LINE_SIZE};
use crate::error::{Error, Result};
use crate::wal::StoreFlavor;

/// Slot header block: pid u64, pvn u64, rest zero. A full device block so
/// page data stays block-aligned.
pub const SLOT_HEADER_LEN: u64 = BLOCK_SIZE;
/// Micro-log header line: pid u64 (0 = invalid), pvn u64, count u32, pad.
pub const MULOG_HEADER_LEN: u64 = CACHE_LINE_SIZE;
/// Offsets region: 256 little-endian u16 cache-line indices.
pub const MULOG_OFFSETS_LEN: u64 = 512;
/// Data region holds up to a full 256-line page of 64-byte images.
pub const MULOG_DATA_LEN: u64 = 256 * CACHE_LINE_SIZE;
/// Micro-log footprint, rounded up to whole 256-byte blocks.
pub const MULOG_STRIDE: u64 =
    (MULOG_HEADER_LEN + MULOG_OFFSETS_LEN + MULOG_DATA_LEN).div_ceil(BLOCK_SIZE) * BLOCK_SIZE;

/// Default page size: 256 cache lines.
pub const DEFAULT_PAGE_SIZE: u64 = 16384;

/// Page store geometry and policy.
#[derive(Debug, Clone)]
pub struct PageStoreConfig {
    /// Power-of-two multiple of 256, at most 16384 (the micro-log's 256-line
    /// capacity and the dirty mask cover any such page in full).
    pub page_size: u64,
    pub slot_count: usize,
    /// One micro-log per flusher.
    pub mulog_count: usize,
    /// Hybrid threshold with a single flusher configured.
    pub dirty_threshold_single: u64,
    /// Hybrid threshold with several flushers.
    pub dirty_threshold_multi: u64,
    pub flavor: StoreFlavor,
}

impl PageStoreConfig {
    pub fn new(slot_count: usize, mulog_count: usize) -> Self {
        PageStoreConfig {
            page_size: DEFAULT_PAGE_SIZE,
            slot_count,
            mulog_count,
            dirty_threshold_single: 112,
            dirty_threshold_multi: 32,
            flavor: StoreFlavor::Streaming,
        }
    }

    pub fn page_size(mut self, page_size: u64) -> Self {
        self.page_size = page_size;
        self
    }

    pub fn flavor(mut self, flavor: StoreFlavor) -> Self {
        self.flavor = flavor;
        self
    }

    fn validate(&self) -> Result<()> {
        let blocks = self.page_size / BLOCK_SIZE;
        if self.page_size == 0
            || self.page_size % BLOCK_SIZE != 0
            || !blocks.is_power_of_two()
            || self.page_size > DEFAULT_PAGE_SIZE
        {
            return Err(Error::BadStoreConfig(
                "page_size must be a power-of-two multiple of 256, at most 16384",
            ));
        }
        if self.slot_count == 0 {
            return Err(Error::BadStoreConfig("slot_count must be at least 1"));
        }
        Ok(())
    }

    pub fn page_lines(&self) -> u64 {
        self.page_size / CACHE_LINE_SIZE
    }

    pub fn slot_stride(&self) -> u64 {
        SLOT_HEADER_LEN + self.page_size
    }

    /// Absolute offset of one micro-log.
    pub fn mulog_offset(&self, flusher: usize) -> u64 {
        flusher as u64 * MULOG_STRIDE
    }

    /// Absolute offset of a slot's header block.
    pub fn slot_offset(&self, slot: usize) -> u64 {
        self.mulog_count as u64 * MULOG_STRIDE + slot as u64 * self.slot_stride()
    }

    pub fn slot_data_offset(&self, slot: usize) -> u64 {
        self.slot_offset(slot) + SLOT_HEADER_LEN
    }

    /// Device bytes the store occupies, from offset 0.
    pub fn required_capacity(&self) -> u64 {
        self.slot_offset(self.slot_count)
    }
}

/// Bitset over a page's cache lines (up to 256).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DirtyMask {
    bits: [u64; 4],
}

impl DirtyMask {
    pub fn new() -> Self {
        DirtyMask::default()
    }

    pub fn from_lines(lines: impl IntoIterator<Item = u16>) -> Self {
        let mut mask = DirtyMask::default();
        for line in lines {
            mask.set(line);
        }
        mask
    }

    /// All lines of a page with `page_lines` lines.
    pub fn full(page_lines: u64) -> Self {
        DirtyMask::from_lines(0..page_lines as u16)
    }

    pub fn set(&mut self, line: u16) {
        assert!(line < 256, "dirty mask covers lines 0..256");
        self.bits[line as usize / 64] |= 1 << (line % 64);
    }

    pub fn get(&self, line: u16) -> bool {
        self.bits[line as usize / 64] & (1 << (line % 64)) != 0
    }

    pub fn count(&self) -> u32 {
        self.bits.iter().map(|w| w.count_ones()).sum()
    }

    /// Set lines in ascending order.
    pub fn lines(&self) -> impl Iterator<Item = u16> + '_ {
        (0u16..256).filter(|&l| self.get(l))
    }
}

/// Which path a hybrid flush took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushKind {
    Cow,
    MicroLog,
}

/// One pid's authoritative state after recovery.
#[derive(Debug, Clone)]
pub struct RecoveredPage {
    pub slot: usize,
    pub pvn: u64,
    pub image: Vec<u8>,
}

/// Decoded micro-log.
#[derive(Debug, Clone)]
pub struct MicroLogState {
    pub pid: u64,
    pub pvn: u64,
    pub lines: Vec<(u16, Vec<u8>)>,
}

#[derive(Debug, Clone, Copy)]
struct SlotState {
    pid: u64,
    pvn: u64,
}

struct StoreInner {
    slots: Vec<SlotState>,
    /// pid → authoritative slot.
    directory: BTreeMap<u64, usize>,
    next_pvn: BTreeMap<u64, u64>,
    /// Never-used slots, preferred for allocation: their headers are zero, so
    /// a crash mid-validation can never collide with a live (pid, pvn) pair.
    free_pristine: BTreeSet<usize>,
    /// Superseded slots; stale headers stay readable until overwritten.
    free_recycled: BTreeSet<usize>,
}

/// A page store over a device region starting at offset 0.
pub struct PageStore<'d> {
    device: &'d Device,
    config: PageStoreConfig,
    inner: Mutex<StoreInner>,
}

impl<'d> PageStore<'d> {
    /// Set up over a fresh all-zero region.
    pub fn create(device: &'d Device, config: PageStoreConfig) -> Result<PageStore<'d>> {
        config.validate()?;
        let needed = config.required_capacity();
        if needed > device.capacity() {
            return Err(Error::StoreTooSmall { needed, available: device.capacity() });
        }
        let inner = StoreInner {
            slots: vec![SlotState { pid: 0, pvn: 0 }; config.slot_count],
            directory: BTreeMap::new(),
            next_pvn: BTreeMap::new(),
            free_pristine: (0..config.slot_count).collect(),
            free_recycled: BTreeSet::new(),
        };
        Ok(PageStore { device, config, inner: Mutex::new(inner) })
    }

    /// Rebuild from a previously used region: scan all slot headers, pick the
    /// maximal pvn per pid, then reapply valid micro-logs in ascending pvn
    /// order under the applicability guard. Returns the store and the
    /// recovered directory.
    pub fn recover(
        device: &'d Device,
        config: PageStoreConfig,
    ) -> Result<(PageStore<'d>, BTreeMap<u64, RecoveredPage>)> {
        config.validate()?;
        let needed = config.required_capacity();
        if needed > device.capacity() {
            return Err(Error::StoreTooSmall { needed, available: device.capacity() });
        }

        let mut slots = Vec::with_capacity(config.slot_count);
        for s in 0..config.slot_count {
            let header = device.read(config.slot_offset(s), 16)?;
            slots.push(SlotState {
                pid: u64::from_le_bytes(header[0..8].try_into().unwrap()),
                pvn: u64::from_le_bytes(header[8..16].try_into().unwrap()),
            });
        }

        let mut seen = HashSet::new();
        let mut directory: BTreeMap<u64, usize> = BTreeMap::new();
        for (s, state) in slots.iter().enumerate() {
            if state.pid == 0 || state.pvn == 0 {
                continue;
            }
            if !seen.insert((state.pid, state.pvn)) {
                return Err(Error::Corruption(format!(
                    "duplicate (pid {}, pvn {}) across slots",
                    state.pid, state.pvn
                )));
            }
            match directory.get(&state.pid) {
                Some(&cur) if slots[cur].pvn > state.pvn => {}
                _ => {
                    directory.insert(state.pid, s);
                }
            }
        }

        // Collect valid micro-logs and reapply in ascending pvn order.
        let mut mulogs = Vec::new();
        for f in 0..config.mulog_count {
            if let Some(state) = read_mulog(device, &config, f)? {
                mulogs.push(state);
            }
        }
        mulogs.sort_by_key(|m| m.pvn);
        for mulog in mulogs {
            let &slot = directory.get(&mulog.pid).ok_or_else(|| {
                Error::Corruption(format!("micro-log for pid {} with no durable slot", mulog.pid))
            })?;
            let slot_pvn = slots[slot].pvn;
            if mulog.pvn < slot_pvn {
                // Already superseded by a newer flush.
                continue;
            }
            if mulog.pvn > slot_pvn + 1 {
                return Err(Error::Corruption(format!(
                    "micro-log pvn {} skips ahead of slot pvn {} for pid {}",
                    mulog.pvn, slot_pvn, mulog.pid
                )));
            }
            // pvn == slot.pvn reapplies idempotently: the slot may hold a
            // torn in-place update whose header line drained first.
            let data = config.slot_data_offset(slot);
            let mut hi = 0u64;
            for (line, image) in &mulog.lines {
                device.store(data + *line as u64 * CACHE_LINE_SIZE, image)?;
                hi = hi.max(*line as u64);
            }
            device.store(config.slot_offset(slot) + 8, &mulog.pvn.to_le_bytes())?;
            device.write_back_range(data, (hi + 1) * CACHE_LINE_SIZE)?;
            device.write_back(config.slot_offset(slot))?;
            device.fence();
            slots[slot].pvn = mulog.pvn;
        }

        let mut next_pvn = BTreeMap::new();
        let mut recovered = BTreeMap::new();
        for (&pid, &slot) in &directory {
            next_pvn.insert(pid, slots[slot].pvn + 1);
            recovered.insert(
                pid,
                RecoveredPage {
                    slot,
                    pvn: slots[slot].pvn,
                    image: device.read(config.slot_data_offset(slot), config.page_size)?,
                },
            );
        }

        let mut free_pristine = BTreeSet::new();
        let mut free_recycled = BTreeSet::new();
        for (s, state) in slots.iter().enumerate() {
            if directory.get(&state.pid) == Some(&s) && state.pid != 0 && state.pvn != 0 {
                continue;
            }
            if state.pid == 0 && state.pvn == 0 {
                free_pristine.insert(s);
            } else {
                free_recycled.insert(s);
            }
        }

        let inner = StoreInner { slots, directory, next_pvn, free_pristine, free_recycled };
        Ok((PageStore { device, config, inner: Mutex::new(inner) }, recovered))
    }

    pub fn config(&self) -> &PageStoreConfig {
        &self.config
    }

    /// Next pvn a flush of `pid` would be assigned.
    pub fn next_pvn(&self, pid: u64) -> u64 {
        *self.inner.lock().unwrap().next_pvn.get(&pid).unwrap_or(&1)
    }

    /// Authoritative slot of a pid, if any.
    pub fn slot_of(&self, pid: u64) -> Option<usize> {
        self.inner.lock().unwrap().directory.get(&pid).copied()
    }

    fn write(&self, offset: u64, bytes: &[u8]) -> Result<()> {
        match self.config.flavor {
            StoreFlavor::Streaming => self.device.store_streaming(offset, bytes),
            StoreFlavor::PlainWriteBack => self.device.store(offset, bytes),
        }
    }

    /// One barrier over a set of ranges.
    fn persist(&self, ranges: &[(u64, u64)]) -> Result<()> {
        if self.config.flavor == StoreFlavor::PlainWriteBack {
            for &(offset, len) in ranges {
                self.device.write_back_range(offset, len)?;
            }
        }
        self.device.fence();
        Ok(())
    }

    /// Copy-on-write flush: the full image goes to a free slot, then the
    /// header validates it. Exactly two barriers; the pid's previous slot is
    /// freed only after the second completes.
    pub fn flush_cow(&self, pid: u64, image: &[u8]) -> Result<()> {
        if pid == 0 {
            return Err(Error::InvalidPid(0));
        }
        assert_eq!(image.len() as u64, self.config.page_size, "image must be one page");

        let (slot, pvn) = {
            let mut inner = self.inner.lock().unwrap();
            let slot = inner
                .free_pristine
                .pop_first()
                .or_else(|| inner.free_recycled.pop_first())
                .ok_or(Error::NoFreeSlot)?;
            let pvn = *inner.next_pvn.get(&pid).unwrap_or(&1);
            (slot, pvn)
        };

        // 1. Write data.
        let data = self.config.slot_data_offset(slot);
        self.write(data, image)?;
        self.persist(&[(data, self.config.page_size)])?;

        // 2. Make the slot valid: pid first, then pvn; both live on one
        // cache line, so the stores stay ordered without an extra fence.
        let header = self.config.slot_offset(slot);
        self.write(header, &pid.to_le_bytes())?;
        self.write(header + 8, &pvn.to_le_bytes())?;
        self.persist(&[(header, 16)])?;

        let mut inner = self.inner.lock().unwrap();
        inner.slots[slot] = SlotState { pid, pvn };
        if let Some(old) = inner.directory.insert(pid, slot) {
            inner.free_recycled.insert(old);
        }
        inner.next_pvn.insert(pid, pvn + 1);
        Ok(())
    }

    /// Micro-log flush: record the dirty lines in this flusher's micro-log,
    /// then patch the page slot in place. Exactly four barriers.
    pub fn flush_mulog(
        &self,
        flusher_id: usize,
        pid: u64,
        image: &[u8],
        dirty: &DirtyMask,
    ) -> Result<()> {
        if flusher_id >= self.config.mulog_count {
            return Err(Error::FlusherOutOfRange { id: flusher_id, count: self.config.mulog_count });
        }
        if dirty.count() == 0 {
            return Err(Error::EmptyDirtyMask);
        }
        assert_eq!(image.len() as u64, self.config.page_size, "image must be one page");
        let page_lines = self.config.page_lines();
        let (slot, pvn) = {
            let inner = self.inner.lock().unwrap();
            let slot = *inner.directory.get(&pid).ok_or(Error::UnknownPid(pid))?;
            (slot, *inner.next_pvn.get(&pid).unwrap_or(&1))
        };

        let mulog = self.config.mulog_offset(flusher_id);
        let count = dirty.count();

        // 1. Invalidate the micro-log.
        self.write(mulog, &0u64.to_le_bytes())?;
        self.persist(&[(mulog, 8)])?;

        // 2. Fill it: header line minus the pid field, the full offsets
        // region, and one 64-byte image per dirty line.
        let mut header_rest = [0u8; 56];
        header_rest[0..8].copy_from_slice(&pvn.to_le_bytes());
        header_rest[8..12].copy_from_slice(&count.to_le_bytes());
        self.write(mulog + 8, &header_rest)?;

        let mut offsets = [0u8; MULOG_OFFSETS_LEN as usize];
        let mut images = Vec::with_capacity((count as u64 * CACHE_LINE_SIZE) as usize);
        for (j, line) in dirty.lines().enumerate() {
            assert!((line as u64) < page_lines, "dirty line beyond page");
            offsets[j * 2..j * 2 + 2].copy_from_slice(&line.to_le_bytes());
            let start = line as usize * CACHE_LINE_SIZE as usize;
            images.extend_from_slice(&image[start..start + CACHE_LINE_SIZE as usize]);
        }
        self.write(mulog + MULOG_HEADER_LEN, &offsets)?;
        let data_region = mulog + MULOG_HEADER_LEN + MULOG_OFFSETS_LEN;
        self.write(data_region, &images)?;
        self.persist(&[(mulog, MULOG_HEADER_LEN + MULOG_OFFSETS_LEN + images.len() as u64)])?;

        // 3. Validate the micro-log.
        self.write(mulog, &pid.to_le_bytes())?;
        self.persist(&[(mulog, 8)])?;

        // 4. Patch the page in place and bump the slot's pvn.
        let data = self.config.slot_data_offset(slot);
        let header = self.config.slot_offset(slot);
        let mut ranges = Vec::with_capacity(count as usize + 1);
        for (j, line) in dirty.lines().enumerate() {
            let at = data + line as u64 * CACHE_LINE_SIZE;
            let src = j * CACHE_LINE_SIZE as usize;
            self.write(at, &images[src..src + CACHE_LINE_SIZE as usize])?;
            ranges.push((at, CACHE_LINE_SIZE));
        }
        self.write(header + 8, &pvn.to_le_bytes())?;
        ranges.push((header + 8, 8));
        self.persist(&ranges)?;

        let mut inner = self.inner.lock().unwrap();
        inner.slots[slot].pvn = pvn;
        inner.next_pvn.insert(pid, pvn + 1);
        Ok(())
    }

    /// Cost-model dispatch: micro-log below the dirty-line threshold (single-
    /// or multi-flusher variant per the configured micro-log count), CoW
    /// otherwise. A pid without a durable slot always takes the CoW path.
    pub fn flush_hybrid(
        &self,
        flusher_id: usize,
        pid: u64,
        image: &[u8],
        dirty: &DirtyMask,
    ) -> Result<FlushKind> {
        let threshold = if self.config.mulog_count <= 1 {
            self.config.dirty_threshold_single
        } else {
            self.config.dirty_threshold_multi
        };
        let known = self.inner.lock().unwrap().directory.contains_key(&pid);
        if known && (dirty.count() as u64) < threshold {
            self.flush_mulog(flusher_id, pid, image, dirty)?;
            Ok(FlushKind::MicroLog)
        } else {
            self.flush_cow(pid, image)?;
            Ok(FlushKind::Cow)
        }
    }

    /// Authoritative durable image of a pid (volatile view).
    pub fn read_page(&self, pid: u64) -> Result<Vec<u8>> {
        let slot = self.slot_of(pid).ok_or(Error::UnknownPid(pid))?;
        self.device.read(self.config.slot_data_offset(slot), self.config.page_size)
    }
}

/// Decode one micro-log; `None` when invalid (pid 0). Malformed metadata in
/// a pid-valid micro-log signals external damage.
pub fn read_mulog(
    device: &Device,
    config: &PageStoreConfig,
    flusher: usize,
) -> Result<Option<MicroLogState>> {
    let base = config.mulog_offset(flusher);
    let header = device.read(base, 20)?;
    let pid = u64::from_le_bytes(header[0..8].try_into().unwrap());
    if pid == 0 {
        return Ok(None);
    }
    let pvn = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let count = u32::from_le_bytes(header[16..20].try_into().unwrap());
    if count == 0 || count > 256 {
        return Err(Error::Corruption(format!("micro-log {flusher} has line count {count}")));
    }
    let offsets = device.read(base + MULOG_HEADER_LEN, count as u64 * 2)?;
    let mut lines = Vec::with_capacity(count as usize);
    let mut prev: Option<u16> = None;
    for j in 0..count as usize {
        let line = u16::from_le_bytes(offsets[j * 2..j * 2 + 2].try_into().unwrap());
        if prev.is_some_and(|p| p >= line) || (line as u64) >= config.page_lines() {
            return Err(Error::Corruption(format!(
                "micro-log {flusher} offsets not strictly increasing within the page"
            )));
        }
        prev = Some(line);
        let image = device.read(
            base + MULOG_HEADER_LEN + MULOG_OFFSETS_LEN + j as u64 * CACHE_LINE_SIZE,
            CACHE_LINE_SIZE,
        )?;
        lines.push((line, image));
    }
    Ok(Some(MicroLogState { pid, pvn, lines }))
}

#[cfg(test)]
mod tests;
