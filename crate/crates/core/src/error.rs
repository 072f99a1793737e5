use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("plaintext is {got} bytes, page size is {expected}")]
    Seal { expected: usize, got: usize },

    #[error("integrity check failed for slot {slot}")]
    Integrity { slot: usize },

    #[error("nonce counter exhausted")]
    NonceExhausted,

    #[error("slot {index} out of range (store has {len} slots)")]
    OutOfRange { index: usize, len: usize },

    #[error("slot image is {got} bytes, expected {expected}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("snapshot shapes differ: {left} vs {right} slots")]
    ShapeMismatch { left: usize, right: usize },

    #[error("logical address {addr} out of range (capacity {capacity})")]
    AddressOutOfRange { addr: usize, capacity: usize },

    #[error("instance poisoned by an earlier integrity failure")]
    Poisoned,

    #[error("preload buffer lifecycle violation: {0}")]
    Lifecycle(String),

    #[error("out of memory: page {page} exceeds backing capacity {capacity}")]
    OutOfMemory { page: usize, capacity: usize },

    #[error("workloads evict different page counts ({left} vs {right})")]
    UnequalWriteCounts { left: u64, right: u64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("workload error: {0}")]
    Workload(String),

    #[error("background worker failed: {0}")]
    Worker(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
