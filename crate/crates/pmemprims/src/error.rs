use thiserror::Error;

/// Errors produced by devices, logs, page stores, and the crash checker.
#[derive(Debug, Error)]
pub enum Error {
    #[error("capacity {capacity} is not a positive multiple of the {block_size}-byte block size")]
    UnalignedCapacity { capacity: u64, block_size: u64 },

    #[error("access [{offset}, {offset}+{len}) is out of range for capacity {capacity}")]
    OutOfRange { offset: u64, len: u64, capacity: u64 },

    #[error("event tracing is only available on the simulated backend")]
    TraceUnavailable,

    #[error("a file path is required to open a real-backend device")]
    PathRequired,

    #[error("log region [{offset}, {offset}+{len}) is invalid: {reason}")]
    BadLogRegion { offset: u64, len: u64, reason: &'static str },

    #[error("log is full: entry of {needed} bytes does not fit in the {remaining} remaining bytes")]
    LogFull { needed: u64, remaining: u64 },

    #[error("entry of {needed} bytes can never fit the {region} byte entry area")]
    PayloadTooLarge { needed: u64, region: u64 },

    #[error("page store needs {needed} bytes but the device region holds {available}")]
    StoreTooSmall { needed: u64, available: u64 },

    #[error("invalid page store configuration: {0}")]
    BadStoreConfig(&'static str),

    #[error("pid {0} is not a valid page id (0 is reserved)")]
    InvalidPid(u64),

    #[error("pid {0} has no durable slot")]
    UnknownPid(u64),

    #[error("no free page slot available")]
    NoFreeSlot,

    #[error("dirty mask is empty")]
    EmptyDirtyMask,

    #[error("flusher id {id} out of range (store has {count} micro-logs)")]
    FlusherOutOfRange { id: usize, count: usize },

    #[error("persistent state is corrupt: {0}")]
    Corruption(String),

    #[error(
        "exhaustive enumeration would produce {count} crash images, above the cap of {cap}; \
         use sampled mode instead"
    )]
    ImageCountAboveCap { count: u128, cap: u128 },

    #[error("crash point {crash_seq} is beyond the trace length {len}")]
    BadCrashPoint { crash_seq: u64, len: u64 },

    #[error("invalid benchmark spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
