//! Real backend: a memory-mapped file of exactly `capacity` raw bytes, no
//! header. Stores are direct writes into the mapping; durability maps either
//! to cache-line write-back plus store fence (when the build targets x86_64,
//! the CPU supports it, and `PMEMPRIMS_ASSUME_DAX=1` asserts the mapping is
//! DAX-backed) or to file-range synchronization (`msync`) at each fence.
//!
//! Concurrent writers on disjoint byte ranges are allowed; counters are
//! atomic, and the per-line epoch tracker takes a short lock per persisted
//! line (disable `detailed_stats` for timing-sensitive runs).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::OpenOptions;
use std::os::unix::io::AsRawFd;
use std::path::Path;
use std::ptr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::error::Result;

use super::{covering_lines, DeviceStats, BLOCK_SIZE, CACHE_LINE_SIZE};

const PAGE: u64 = 4096;

/// How `write_back`/`fence` reach stable storage on this machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DurabilityMapping {
    /// `clwb`/`clflushopt` per line, `sfence` at fences. Only durable on a
    /// DAX mapping; selected when `PMEMPRIMS_ASSUME_DAX=1`.
    CacheLineWriteBack,
    /// Dirty page ranges are flushed with `msync(MS_SYNC)` at each fence.
    FileRangeSync,
}

impl std::fmt::Display for DurabilityMapping {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DurabilityMapping::CacheLineWriteBack => write!(f, "cache-line write-back + sfence"),
            DurabilityMapping::FileRangeSync => write!(f, "file-range msync at fence"),
        }
    }
}

#[derive(Default)]
struct LineStats {
    line_last_epoch: HashMap<u64, u64>,
    blocks_touched: HashSet<u64>,
}

pub(super) struct RealDevice {
    map: *mut u8,
    capacity: u64,
    mapping: DurabilityMapping,
    barriers: AtomicU64,
    lines_written_back: AtomicU64,
    bytes_stored: AtomicU64,
    repeat_persist_lines: AtomicU64,
    distinct_blocks: AtomicU64,
    line_stats: Mutex<LineStats>,
    /// 4 KiB pages awaiting msync at the next fence (FileRangeSync only).
    dirty_pages: Mutex<BTreeSet<u64>>,
}

// The raw mapping is shared; writers must target disjoint ranges (caller
// contract), everything else is atomics or mutex-protected.
unsafe impl Send for RealDevice {}
unsafe impl Sync for RealDevice {}

impl RealDevice {
    pub fn open(path: &Path, capacity: u64) -> Result<RealDevice> {
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path)?;
        let len = file.metadata()?.len();
        if len != capacity {
            // ftruncate: new files (and extensions) read as zeros.
            file.set_len(capacity)?;
        }
        let map = unsafe {
            libc::mmap(
                ptr::null_mut(),
                capacity as usize,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_SHARED,
                file.as_raw_fd(),
                0,
            )
        };
        if map == libc::MAP_FAILED {
            return Err(std::io::Error::last_os_error().into());
        }
        let mapping = choose_mapping();
        if std::env::var("PMEMPRIMS_BACKEND_REPORT").as_deref() == Ok("1") {
            eprintln!("pmemprims: real backend durability mapping: {mapping}");
        }
        Ok(RealDevice {
            map: map as *mut u8,
            capacity,
            mapping,
            barriers: AtomicU64::new(0),
            lines_written_back: AtomicU64::new(0),
            bytes_stored: AtomicU64::new(0),
            repeat_persist_lines: AtomicU64::new(0),
            distinct_blocks: AtomicU64::new(0),
            line_stats: Mutex::new(LineStats::default()),
            dirty_pages: Mutex::new(BTreeSet::new()),
        })
    }

    pub fn mapping(&self) -> DurabilityMapping {
        self.mapping
    }

    fn mark_blocks(&self, offset: u64, len: u64) {
        if len == 0 {
            return;
        }
        let mut ls = self.line_stats.lock().unwrap();
        for block in offset / BLOCK_SIZE..=(offset + len - 1) / BLOCK_SIZE {
            ls.blocks_touched.insert(block);
        }
        self.distinct_blocks.store(ls.blocks_touched.len() as u64, Ordering::Relaxed);
    }

    fn mark_line_persisted(&self, line: u64) {
        let epoch = self.barriers.load(Ordering::Relaxed);
        let mut ls = self.line_stats.lock().unwrap();
        match ls.line_last_epoch.entry(line) {
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(epoch);
            }
            std::collections::hash_map::Entry::Occupied(mut o) => {
                if *o.get() != epoch {
                    *o.get_mut() = epoch;
                    self.repeat_persist_lines.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }

    fn mark_dirty_pages(&self, offset: u64, len: u64) {
        if self.mapping != DurabilityMapping::FileRangeSync || len == 0 {
            return;
        }
        let mut pages = self.dirty_pages.lock().unwrap();
        for page in offset / PAGE..=(offset + len - 1) / PAGE {
            pages.insert(page);
        }
    }

    pub fn store(&self, offset: u64, data: &[u8], detailed: bool) {
        unsafe {
            ptr::copy_nonoverlapping(data.as_ptr(), self.map.add(offset as usize), data.len());
        }
        self.bytes_stored.fetch_add(data.len() as u64, Ordering::Relaxed);
        if detailed {
            self.mark_blocks(offset, data.len() as u64);
        }
    }

    pub fn store_streaming(&self, offset: u64, data: &[u8], detailed: bool) {
        streaming_copy(unsafe { self.map.add(offset as usize) }, data);
        self.bytes_stored.fetch_add(data.len() as u64, Ordering::Relaxed);
        self.mark_dirty_pages(offset, data.len() as u64);
        if detailed {
            self.mark_blocks(offset, data.len() as u64);
            for line in covering_lines(offset, data.len() as u64) {
                self.mark_line_persisted(line);
            }
        }
    }

    pub fn write_back(&self, line_offset: u64, detailed: bool) {
        if self.mapping == DurabilityMapping::CacheLineWriteBack {
            cache_line_write_back(unsafe { self.map.add(line_offset as usize) });
        } else {
            self.mark_dirty_pages(line_offset, CACHE_LINE_SIZE);
        }
        self.lines_written_back.fetch_add(1, Ordering::Relaxed);
        if detailed {
            self.mark_line_persisted(line_offset / CACHE_LINE_SIZE);
        }
    }

    pub fn fence(&self) {
        match self.mapping {
            DurabilityMapping::CacheLineWriteBack => store_fence(),
            DurabilityMapping::FileRangeSync => {
                store_fence();
                let pages = std::mem::take(&mut *self.dirty_pages.lock().unwrap());
                let mut iter = pages.into_iter().peekable();
                while let Some(start) = iter.next() {
                    let mut end = start;
                    while iter.peek() == Some(&(end + 1)) {
                        end = iter.next().unwrap();
                    }
                    let addr = unsafe { self.map.add((start * PAGE) as usize) };
                    let len = ((end - start + 1) * PAGE).min(self.capacity - start * PAGE);
                    unsafe {
                        libc::msync(addr as *mut libc::c_void, len as usize, libc::MS_SYNC);
                    }
                }
            }
        }
        self.barriers.fetch_add(1, Ordering::Relaxed);
    }

    pub fn read_into(&self, offset: u64, out: &mut [u8]) {
        unsafe {
            ptr::copy_nonoverlapping(self.map.add(offset as usize), out.as_mut_ptr(), out.len());
        }
    }

    pub fn stats(&self) -> DeviceStats {
        DeviceStats {
            barriers: self.barriers.load(Ordering::Relaxed),
            lines_written_back: self.lines_written_back.load(Ordering::Relaxed),
            distinct_blocks_touched: self.distinct_blocks.load(Ordering::Relaxed),
            bytes_stored: self.bytes_stored.load(Ordering::Relaxed),
            repeat_persist_lines: self.repeat_persist_lines.load(Ordering::Relaxed),
        }
    }

    pub fn reset_stats(&self) {
        // The epoch counter (barriers) keeps running; only the tracked
        // history is cleared, so repeats are counted within the new window.
        self.lines_written_back.store(0, Ordering::Relaxed);
        self.bytes_stored.store(0, Ordering::Relaxed);
        self.repeat_persist_lines.store(0, Ordering::Relaxed);
        self.distinct_blocks.store(0, Ordering::Relaxed);
        let mut ls = self.line_stats.lock().unwrap();
        ls.line_last_epoch.clear();
        ls.blocks_touched.clear();
        drop(ls);
        self.barriers.store(0, Ordering::Relaxed);
    }
}

impl Drop for RealDevice {
    fn drop(&mut self) {
        unsafe {
            libc::munmap(self.map as *mut libc::c_void, self.capacity as usize);
        }
    }
}

/// CPUID leaf 7 EBX feature bits; `is_x86_feature_detected!` does not cover
/// the cache-control instructions.
#[cfg(target_arch = "x86_64")]
fn cpu_has_clwb_or_clflushopt() -> (bool, bool) {
    use std::sync::OnceLock;
    static BITS: OnceLock<(bool, bool)> = OnceLock::new();
    *BITS.get_or_init(|| {
        let leaf7 = std::arch::x86_64::__cpuid_count(7, 0);
        let clwb = leaf7.ebx & (1 << 24) != 0;
        let clflushopt = leaf7.ebx & (1 << 23) != 0;
        (clwb, clflushopt)
    })
}

fn choose_mapping() -> DurabilityMapping {
    #[cfg(target_arch = "x86_64")]
    {
        let assume_dax = std::env::var("PMEMPRIMS_ASSUME_DAX").as_deref() == Ok("1");
        let (clwb, clflushopt) = cpu_has_clwb_or_clflushopt();
        if assume_dax && (clwb || clflushopt) {
            return DurabilityMapping::CacheLineWriteBack;
        }
    }
    DurabilityMapping::FileRangeSync
}

#[cfg(target_arch = "x86_64")]
fn cache_line_write_back(ptr: *mut u8) {
    let (clwb, clflushopt) = cpu_has_clwb_or_clflushopt();
    unsafe {
        // Encoded via asm: core::arch gates these behind unstable features.
        if clwb {
            std::arch::asm!("clwb [{0}]", in(reg) ptr, options(nostack));
        } else if clflushopt {
            std::arch::asm!("clflushopt [{0}]", in(reg) ptr, options(nostack));
        } else {
            std::arch::x86_64::_mm_clflush(ptr);
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
fn cache_line_write_back(_ptr: *mut u8) {}

#[cfg(target_arch = "x86_64")]
fn store_fence() {
    unsafe { std::arch::x86_64::_mm_sfence() }
}

#[cfg(not(target_arch = "x86_64"))]
fn store_fence() {
    std::sync::atomic::fence(Ordering::Release);
}

/// Non-temporal copy where alignment allows, plain copy otherwise.
fn streaming_copy(dst: *mut u8, data: &[u8]) {
    #[cfg(target_arch = "x86_64")]
    {
        let mut off = 0usize;
        // Head up to 8-byte alignment.
        while off < data.len() && (dst as usize + off) % 8 != 0 {
            unsafe { *dst.add(off) = data[off] };
            off += 1;
        }
        while off + 8 <= data.len() {
            let v = i64::from_le_bytes(data[off..off + 8].try_into().unwrap());
            unsafe { std::arch::x86_64::_mm_stream_si64(dst.add(off) as *mut i64, v) };
            off += 8;
        }
        while off < data.len() {
            unsafe { *dst.add(off) = data[off] };
            off += 1;
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    unsafe {
        ptr::copy_nonoverlapping(data.as_ptr(), dst, data.len());
    }
}
