//! Failure-atomic append-only logs.
//!
//! Four write protocols over a device region, each with a bit-exact layout
//! (integers little-endian) and a matching recovery reader:
//!
//! - `Classic` — `header ∥ payload ∥ footer`; the footer repeats the lsn and
//!   is persisted separately, so recovery trusts an entry only when both lsn
//!   copies match. Two barriers per append.
//! - `Header` — a size field on the first line of the region counts the
//!   valid entry bytes, libpmemlog-style; entries follow from offset 64.
//!   Two barriers per append, and every append re-persists the size line.
//! - `HeaderDance` — `Header` with k size fields on distinct cache lines,
//!   written round-robin; the valid size is the maximum over the fields.
//!   Avoids persisting the same line on consecutive appends.
//! - `Zero` — entry carries a population count over its own bytes. On a
//!   zero-initialized region a torn entry cannot reproduce its bit count
//!   (the count field itself reads zero if its line never drained), so one
//!   barrier per append suffices.
//!
//! All writers default to streaming stores; `aligned` mode pads entries to
//! cache-line boundaries so no line is persisted in two fence epochs of one
//! append.

use crate::device::{Device, CACHE_LINE_SIZE};
use crate::error::{Error, Result};

/// Fixed header widths.
pub const CLASSIC_HEADER_LEN: u64 = 16;
pub const CLASSIC_FOOTER_LEN: u64 = 8;
pub const HEADER_ENTRY_HEADER_LEN: u64 = 16;
pub const ZERO_HEADER_LEN: u64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogAlgorithm {
    Classic,
    Header,
    HeaderDance,
    Zero,
}

impl LogAlgorithm {
    pub fn name(&self) -> &'static str {
        match self {
            LogAlgorithm::Classic => "classic",
            LogAlgorithm::Header => "header",
            LogAlgorithm::HeaderDance => "header-dance",
            LogAlgorithm::Zero => "zero",
        }
    }
}

impl std::str::FromStr for LogAlgorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "classic" => Ok(LogAlgorithm::Classic),
            "header" => Ok(LogAlgorithm::Header),
            "header-dance" | "headerdance" | "dance" => Ok(LogAlgorithm::HeaderDance),
            "zero" => Ok(LogAlgorithm::Zero),
            other => Err(format!("unknown log algorithm {other:?}")),
        }
    }
}

/// How appended bytes reach the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StoreFlavor {
    /// Streaming (non-temporal) stores; a fence alone makes them durable.
    #[default]
    Streaming,
    /// Plain stores followed by explicit write-backs of the covering lines.
    PlainWriteBack,
}

/// Log placement and behaviour.
#[derive(Debug, Clone)]
pub struct LogOptions {
    pub algo: LogAlgorithm,
    /// Pad entries to cache-line boundaries (and give the Classic footer its
    /// own line).
    pub aligned: bool,
    /// Number of dancing size fields (HeaderDance only).
    pub dance_k: u32,
    /// Byte offset of the log region within the device.
    pub region_offset: u64,
    /// Region length in bytes.
    pub region_len: u64,
    pub flavor: StoreFlavor,
}

impl LogOptions {
    pub fn new(algo: LogAlgorithm, region_offset: u64, region_len: u64) -> Self {
        LogOptions {
            algo,
            aligned: false,
            dance_k: 64,
            region_offset,
            region_len,
            flavor: StoreFlavor::Streaming,
        }
    }

    pub fn aligned(mut self, aligned: bool) -> Self {
        self.aligned = aligned;
        self
    }

    pub fn dance_k(mut self, k: u32) -> Self {
        self.dance_k = k;
        self
    }

    pub fn flavor(mut self, flavor: StoreFlavor) -> Self {
        self.flavor = flavor;
        self
    }

    fn validate(&self, device: &Device) -> Result<()> {
        let bad = |reason| Error::BadLogRegion {
            offset: self.region_offset,
            len: self.region_len,
            reason,
        };
        if self.region_offset % CACHE_LINE_SIZE != 0 || self.region_len % CACHE_LINE_SIZE != 0 {
            return Err(bad("offset and length must be cache-line aligned"));
        }
        if self.region_len == 0 {
            return Err(bad("empty region"));
        }
        if self
            .region_offset
            .checked_add(self.region_len)
            .is_none_or(|end| end > device.capacity())
        {
            return Err(bad("region exceeds device capacity"));
        }
        if self.algo == LogAlgorithm::HeaderDance && self.dance_k == 0 {
            return Err(bad("dance_k must be at least 1"));
        }
        if self.entries_start() >= self.region_offset + self.region_len {
            return Err(bad("region too small for the reserved header lines"));
        }
        Ok(())
    }

    /// Absolute offset of the first entry.
    pub fn entries_start(&self) -> u64 {
        let reserved = match self.algo {
            LogAlgorithm::Classic | LogAlgorithm::Zero => 0,
            LogAlgorithm::Header => CACHE_LINE_SIZE,
            LogAlgorithm::HeaderDance => self.dance_k as u64 * CACHE_LINE_SIZE,
        };
        self.region_offset + reserved
    }

    fn region_end(&self) -> u64 {
        self.region_offset + self.region_len
    }
}

/// A recovered log record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    /// Consecutive from 1; 0 is the zeroed-file sentinel and never assigned.
    pub lsn: u64,
    pub payload: Vec<u8>,
}

fn round_line(n: u64) -> u64 {
    n.div_ceil(CACHE_LINE_SIZE) * CACHE_LINE_SIZE
}

/// Bytes an entry occupies in the log, including alignment padding.
pub fn entry_footprint(algo: LogAlgorithm, aligned: bool, payload_len: u64) -> u64 {
    match algo {
        LogAlgorithm::Classic => {
            if aligned {
                // Footer starts on the next line after the payload and the
                // next entry on the next line after the footer.
                round_line(CLASSIC_HEADER_LEN + payload_len) + CACHE_LINE_SIZE
            } else {
                CLASSIC_HEADER_LEN + payload_len + CLASSIC_FOOTER_LEN
            }
        }
        LogAlgorithm::Header | LogAlgorithm::HeaderDance => {
            let raw = HEADER_ENTRY_HEADER_LEN + payload_len;
            if aligned {
                round_line(raw)
            } else {
                raw
            }
        }
        LogAlgorithm::Zero => {
            let raw = ZERO_HEADER_LEN + payload_len;
            if aligned {
                round_line(raw)
            } else {
                raw
            }
        }
    }
}

/// Header bytes for a Classic or Header entry: lsn u64, payload_len u32,
/// pad u32, little-endian.
pub fn entry_header_bytes(lsn: u64, payload_len: u32) -> [u8; 16] {
    let mut out = [0u8; 16];
    out[0..8].copy_from_slice(&lsn.to_le_bytes());
    out[8..12].copy_from_slice(&payload_len.to_le_bytes());
    out
}

/// Header bytes for a Zero entry: lsn u64, payload_len u32, pad u32,
/// pop_cnt u64, little-endian.
pub fn zero_header_bytes(lsn: u64, payload_len: u32, pop_cnt: u64) -> [u8; 24] {
    let mut out = [0u8; 24];
    out[0..8].copy_from_slice(&lsn.to_le_bytes());
    out[8..12].copy_from_slice(&payload_len.to_le_bytes());
    out[16..24].copy_from_slice(&pop_cnt.to_le_bytes());
    out
}

/// Population count over a Zero entry: the 24 header bytes with the pop_cnt
/// field taken as zero, followed by the payload. Pure.
pub fn popcount_entry(header: &[u8; 24], payload: &[u8]) -> u64 {
    let mut count: u64 = 0;
    for (i, b) in header.iter().enumerate() {
        if !(16..24).contains(&i) {
            count += b.count_ones() as u64;
        }
    }
    for b in payload {
        count += b.count_ones() as u64;
    }
    count
}

struct Recovered {
    entries: Vec<LogEntry>,
    next_lsn: u64,
    /// First free absolute offset for the writer.
    tail: u64,
    /// Valid entry bytes after the header area (Header variants).
    size: u64,
}

/// A log writer. One writer per log region; appends are durable on return.
pub struct Log<'d> {
    device: &'d Device,
    opts: LogOptions,
    tail: u64,
    next_lsn: u64,
    size: u64,
}

impl<'d> Log<'d> {
    /// Open a log over `region`. A fresh (all-zero) region starts empty with
    /// lsn 1; a previously used region is recovered and the writer positioned
    /// after the last valid entry.
    pub fn create(device: &'d Device, opts: LogOptions) -> Result<Log<'d>> {
        opts.validate(device)?;
        let recovered = recover(device, &opts)?;
        Ok(Log {
            device,
            opts,
            tail: recovered.tail,
            next_lsn: recovered.next_lsn,
            size: recovered.size,
        })
    }

    pub fn options(&self) -> &LogOptions {
        &self.opts
    }

    pub fn next_lsn(&self) -> u64 {
        self.next_lsn
    }

    /// First free absolute offset.
    pub fn tail(&self) -> u64 {
        self.tail
    }

    fn write(&self, offset: u64, bytes: &[u8]) -> Result<()> {
        match self.opts.flavor {
            StoreFlavor::Streaming => self.device.store_streaming(offset, bytes),
            StoreFlavor::PlainWriteBack => self.device.store(offset, bytes),
        }
    }

    /// One persistency barrier over `[offset, offset+len)`.
    fn persist(&self, offset: u64, len: u64) -> Result<()> {
        if self.opts.flavor == StoreFlavor::PlainWriteBack {
            self.device.write_back_range(offset, len)?;
        }
        self.device.fence();
        Ok(())
    }

    /// Append a payload; returns its lsn. Durable on return, costing exactly
    /// two barriers (Classic, Header, HeaderDance) or one (Zero).
    pub fn append(&mut self, payload: &[u8]) -> Result<u64> {
        let p = payload.len() as u64;
        let footprint = entry_footprint(self.opts.algo, self.opts.aligned, p);
        let area = self.opts.region_end() - self.opts.entries_start();
        if footprint > area {
            return Err(Error::PayloadTooLarge { needed: footprint, region: area });
        }
        let remaining = self.opts.region_end() - self.tail;
        if footprint > remaining {
            return Err(Error::LogFull { needed: footprint, remaining });
        }

        let lsn = self.next_lsn;
        match self.opts.algo {
            LogAlgorithm::Classic => {
                let mut buf = Vec::with_capacity((CLASSIC_HEADER_LEN + p) as usize);
                buf.extend_from_slice(&entry_header_bytes(lsn, p as u32));
                buf.extend_from_slice(payload);
                self.write(self.tail, &buf)?;
                self.persist(self.tail, buf.len() as u64)?;

                let footer_off = if self.opts.aligned {
                    self.tail + round_line(CLASSIC_HEADER_LEN + p)
                } else {
                    self.tail + CLASSIC_HEADER_LEN + p
                };
                self.write(footer_off, &lsn.to_le_bytes())?;
                self.persist(footer_off, CLASSIC_FOOTER_LEN)?;
            }
            LogAlgorithm::Header | LogAlgorithm::HeaderDance => {
                let mut buf = Vec::with_capacity((HEADER_ENTRY_HEADER_LEN + p) as usize);
                buf.extend_from_slice(&entry_header_bytes(lsn, p as u32));
                buf.extend_from_slice(payload);
                self.write(self.tail, &buf)?;
                self.persist(self.tail, buf.len() as u64)?;

                self.size += footprint;
                let field = self.size_field_offset(lsn);
                self.write(field, &self.size.to_le_bytes())?;
                self.persist(field, 8)?;
            }
            LogAlgorithm::Zero => {
                let mut header = zero_header_bytes(lsn, p as u32, 0);
                let pop = popcount_entry(&header, payload);
                header[16..24].copy_from_slice(&pop.to_le_bytes());
                let mut buf = Vec::with_capacity((ZERO_HEADER_LEN + p) as usize);
                buf.extend_from_slice(&header);
                buf.extend_from_slice(payload);
                self.write(self.tail, &buf)?;
                self.persist(self.tail, buf.len() as u64)?;
            }
        }

        self.tail += footprint;
        self.next_lsn += 1;
        Ok(lsn)
    }

    /// Size-field cache line used by the append with this lsn.
    fn size_field_offset(&self, lsn: u64) -> u64 {
        match self.opts.algo {
            LogAlgorithm::Header => self.opts.region_offset,
            LogAlgorithm::HeaderDance => {
                self.opts.region_offset + ((lsn - 1) % self.opts.dance_k as u64) * CACHE_LINE_SIZE
            }
            _ => unreachable!("only Header variants have size fields"),
        }
    }
}

/// Read back the maximal valid prefix of a log region. Returns the entries
/// and the next lsn. Corruption beyond the valid prefix is ignored by
/// construction: the scan stops at the first invalid entry (Classic, Zero) or
/// at the recovered size (Header variants).
pub fn log_recover(device: &Device, opts: &LogOptions) -> Result<(Vec<LogEntry>, u64)> {
    opts.validate(device)?;
    let recovered = recover(device, opts)?;
    Ok((recovered.entries, recovered.next_lsn))
}

fn recover(device: &Device, opts: &LogOptions) -> Result<Recovered> {
    let start = opts.entries_start();
    let mut entries = Vec::new();
    let mut tail = start;
    let mut expected_lsn: u64 = 1;

    let read_u64 = |off: u64| -> Result<u64> {
        let mut b = [0u8; 8];
        device.read_into(off, &mut b)?;
        Ok(u64::from_le_bytes(b))
    };

    match opts.algo {
        LogAlgorithm::Classic => loop {
            if tail + CLASSIC_HEADER_LEN > opts.region_end() {
                break;
            }
            let mut header = [0u8; 16];
            device.read_into(tail, &mut header)?;
            let lsn = u64::from_le_bytes(header[0..8].try_into().unwrap());
            if lsn != expected_lsn {
                break;
            }
            let p = u32::from_le_bytes(header[8..12].try_into().unwrap()) as u64;
            let footprint = entry_footprint(opts.algo, opts.aligned, p);
            if tail + footprint > opts.region_end() {
                break;
            }
            let footer_off = if opts.aligned {
                tail + round_line(CLASSIC_HEADER_LEN + p)
            } else {
                tail + CLASSIC_HEADER_LEN + p
            };
            if read_u64(footer_off)? != lsn {
                break;
            }
            entries.push(LogEntry {
                lsn,
                payload: device.read(tail + CLASSIC_HEADER_LEN, p)?,
            });
            tail += footprint;
            expected_lsn += 1;
        },
        LogAlgorithm::Header | LogAlgorithm::HeaderDance => {
            let fields = if opts.algo == LogAlgorithm::Header { 1 } else { opts.dance_k as u64 };
            let mut size: u64 = 0;
            for i in 0..fields {
                size = size.max(read_u64(opts.region_offset + i * CACHE_LINE_SIZE)?);
            }
            let end = (start + size).min(opts.region_end());
            loop {
                if tail + HEADER_ENTRY_HEADER_LEN > end {
                    break;
                }
                let mut header = [0u8; 16];
                device.read_into(tail, &mut header)?;
                let lsn = u64::from_le_bytes(header[0..8].try_into().unwrap());
                if lsn != expected_lsn {
                    break;
                }
                let p = u32::from_le_bytes(header[8..12].try_into().unwrap()) as u64;
                let footprint = entry_footprint(opts.algo, opts.aligned, p);
                if tail + footprint > end {
                    break;
                }
                entries.push(LogEntry {
                    lsn,
                    payload: device.read(tail + HEADER_ENTRY_HEADER_LEN, p)?,
                });
                tail += footprint;
                expected_lsn += 1;
            }
            let next_lsn = entries.len() as u64 + 1;
            return Ok(Recovered { entries, next_lsn, tail: start + size, size });
        }
        LogAlgorithm::Zero => loop {
            if tail + ZERO_HEADER_LEN > opts.region_end() {
                break;
            }
            let mut header = [0u8; 24];
            device.read_into(tail, &mut header)?;
            let lsn = u64::from_le_bytes(header[0..8].try_into().unwrap());
            let pop = u64::from_le_bytes(header[16..24].try_into().unwrap());
            if pop == 0 || lsn != expected_lsn {
                break;
            }
            let p = u32::from_le_bytes(header[8..12].try_into().unwrap()) as u64;
            let footprint = entry_footprint(opts.algo, opts.aligned, p);
            if tail + footprint > opts.region_end() {
                break;
            }
            let payload = device.read(tail + ZERO_HEADER_LEN, p)?;
            if popcount_entry(&header, &payload) != pop {
                break;
            }
            entries.push(LogEntry { lsn, payload });
            tail += footprint;
            expected_lsn += 1;
        },
    }

    let next_lsn = entries.len() as u64 + 1;
    let size = tail - start;
    Ok(Recovered { entries, next_lsn, tail, size })
}

#[cfg(test)]
mod tests;
