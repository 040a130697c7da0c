//! Storage primitives for byte-addressable persistent memory.
//!
//! Writes to persistent memory sit in the CPU cache until the covering cache
//! line is written back and a store fence completes, so a crash can leave a
//! structure half-updated at cache-line (and 8-byte store) granularity. This
//! crate packages the two failure-atomic I/O primitives storage engines need
//! on such hardware, together with the machinery to prove them correct:
//!
//! - [`device`] — the persistence model: plain/streaming stores, `write_back`,
//!   `fence`, and `persist` over a real (memory-mapped file) or simulated
//!   backend. The simulated backend records an event trace and exact
//!   durability statistics (barriers, lines written back, bytes stored,
//!   repeated same-line persists).
//! - [`crash`] — derives every (or a sampled set of) crash-reachable image
//!   from a trace and drives recovery over them, verifying failure atomicity
//!   by enumeration rather than by argument.
//! - [`wal`] — append-only log writers and recovery readers: `Classic`
//!   (header + payload + lsn footer, two barriers), `Header`
//!   (libpmemlog-style size field, two barriers), `HeaderDance` (size field
//!   rotated across k cache lines), and `Zero` (validity by population count
//!   over a zero-initialized file, a single barrier).
//! - [`page`] — failure-atomic propagation of buffer-pool pages to persistent
//!   slots: copy-on-write with page version numbers (two barriers), micro-log
//!   delta flushing of dirty lines (four barriers), and a hybrid policy
//!   switching on the dirty-line count.
//! - [`bench`] — benchmark harness behind the `pmemprims` binary: bandwidth,
//!   latency, log, flush, and YCSB-style experiments emitting CSV; structural
//!   metrics on the simulated backend, timing on the real one.
//!
//! Start with the runnable examples (`cargo run --example persist_basics`)
//! for a tour of each capability.

pub mod bench;
pub mod crash;
pub mod device;
pub mod error;
pub mod page;
pub mod wal;

pub use crash::{
    check_crash_consistency, crash_images, CrashCheck, CrashImage, CrashPoints, CrashReport,
    ImageMode, StepOracle, StepRecorder,
};
pub use device::{Backend, Device, DeviceConfig, DeviceStats, EventTrace};
pub use error::{Error, Result};
pub use page::{DirtyMask, PageStore, PageStoreConfig};
pub use wal::{Log, LogAlgorithm, LogEntry, LogOptions, StoreFlavor};
