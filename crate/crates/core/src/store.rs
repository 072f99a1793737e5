//! Untrusted backing store: a flat array of sealed slots.
//!
//! Every access is appended to an [`AccessTrace`]. Reads are recorded for
//! metrics only; under the write-only model the adversary sees writes and
//! [`Snapshot`] diffs, never reads.
//!
//! Writes to distinct slots may run concurrently. Trace appends are
//! serialized internally.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::sealer::SealedSlot;
use crate::{par, Error, OramConfig, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    #[serde(rename = "r")]
    Read,
    #[serde(rename = "w")]
    Write,
}

/// One line of the exported trace: `{"seq":int,"kind":"r"|"w","slot":int}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: AccessKind,
    pub slot: usize,
}

/// Ordered list of store accesses.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessTrace {
    pub events: Vec<TraceEvent>,
}

impl AccessTrace {
    /// Slot indices of the write events, in order.
    pub fn write_indices(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter(|e| e.kind == AccessKind::Write)
            .map(|e| e.slot)
            .collect()
    }

    /// The write events alone, renumbered from zero: exactly what a
    /// write-observing adversary records.
    pub fn writes(&self) -> AccessTrace {
        let events = self
            .events
            .iter()
            .filter(|e| e.kind == AccessKind::Write)
            .enumerate()
            .map(|(seq, e)| TraceEvent { seq: seq as u64, ..*e })
            .collect();
        AccessTrace { events }
    }

    pub fn count(&self, kind: AccessKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<TraceEvent>, _>>()?;
        Ok(Self { events })
    }
}

/// Per-slot SHA-256 digests of the store at one instant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    digests: Vec<[u8; 32]>,
}

impl Snapshot {
    pub fn len(&self) -> usize {
        self.digests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digests.is_empty()
    }

    /// Slots whose bytes differ between `self` and `later`.
    pub fn diff(&self, later: &Snapshot) -> Result<BTreeSet<usize>> {
        if self.len() != later.len() {
            return Err(Error::ShapeMismatch {
                left: self.len(),
                right: later.len(),
            });
        }
        Ok(self
            .digests
            .iter()
            .zip(&later.digests)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect())
    }
}

enum Backend {
    Memory(Vec<RwLock<Vec<u8>>>),
    File(File),
}

pub struct BackingStore {
    backend: Backend,
    slot_count: usize,
    page_size: usize,
    trace: Mutex<Vec<TraceEvent>>,
    reads: AtomicU64,
    writes: AtomicU64,
}

impl std::fmt::Debug for BackingStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackingStore")
            .field("slot_count", &self.slot_count)
            .field("page_size", &self.page_size)
            .field("file_backed", &matches!(self.backend, Backend::File(_)))
            .finish()
    }
}

impl BackingStore {
    /// Zero-filled in-memory store of `slot_count` slots.
    pub fn in_memory(slot_count: usize, page_size: usize) -> Self {
        let slot_size = SealedSlot::size_for(page_size);
        let slots = (0..slot_count).map(|_| RwLock::new(vec![0u8; slot_size])).collect();
        Self::with_backend(Backend::Memory(slots), slot_count, page_size)
    }

    /// Store backed by a single file, slot `i` at byte offset `i * slot_size`.
    /// The file is created (or truncated) and sized up front.
    pub fn file_backed(path: &Path, slot_count: usize, page_size: usize) -> Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.set_len((slot_count * SealedSlot::size_for(page_size)) as u64)?;
        Ok(Self::with_backend(Backend::File(file), slot_count, page_size))
    }

    pub fn for_config(cfg: &OramConfig) -> Self {
        Self::in_memory(cfg.slot_count(), cfg.page_size())
    }

    fn with_backend(backend: Backend, slot_count: usize, page_size: usize) -> Self {
        Self {
            backend,
            slot_count,
            page_size,
            trace: Mutex::new(Vec::new()),
            reads: AtomicU64::new(0),
            writes: AtomicU64::new(0),
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn slot_size(&self) -> usize {
        SealedSlot::size_for(self.page_size)
    }

    fn check(&self, index: usize) -> Result<()> {
        if index >= self.slot_count {
            return Err(Error::OutOfRange {
                index,
                len: self.slot_count,
            });
        }
        Ok(())
    }

    fn record(&self, kind: AccessKind, slot: usize) {
        let mut trace = self.trace.lock().unwrap();
        let seq = trace.len() as u64;
        trace.push(TraceEvent { seq, kind, slot });
    }

    fn load(&self, index: usize) -> Result<Vec<u8>> {
        match &self.backend {
            Backend::Memory(slots) => Ok(slots[index].read().unwrap().clone()),
            Backend::File(file) => {
                let mut buf = vec![0u8; self.slot_size()];
                read_at(file, &mut buf, (index * self.slot_size()) as u64)?;
                Ok(buf)
            }
        }
    }

    fn put(&self, index: usize, bytes: &[u8]) -> Result<()> {
        match &self.backend {
            Backend::Memory(slots) => {
                slots[index].write().unwrap().copy_from_slice(bytes);
                Ok(())
            }
            Backend::File(file) => write_at(file, bytes, (index * self.slot_size()) as u64),
        }
    }

    /// Current bytes of slot `index`, parsed. Records a read event.
    pub fn read(&self, index: usize) -> Result<SealedSlot> {
        SealedSlot::from_bytes(&self.read_raw(index)?, self.page_size)
    }

    pub fn read_raw(&self, index: usize) -> Result<Vec<u8>> {
        self.check(index)?;
        let bytes = self.load(index)?;
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.record(AccessKind::Read, index);
        Ok(bytes)
    }

    /// Replaces slot `index`. Records a write event before returning.
    pub fn write(&self, index: usize, slot: &SealedSlot) -> Result<()> {
        self.write_raw(index, &slot.to_bytes())
    }

    pub fn write_raw(&self, index: usize, bytes: &[u8]) -> Result<()> {
        self.check(index)?;
        if bytes.len() != self.slot_size() {
            return Err(Error::SizeMismatch {
                expected: self.slot_size(),
                got: bytes.len(),
            });
        }
        self.put(index, bytes)?;
        self.writes.fetch_add(1, Ordering::Relaxed);
        self.record(AccessKind::Write, index);
        Ok(())
    }

    /// Mutates a slot out-of-band, as an active adversary would. Not traced.
    pub fn tamper(&self, index: usize, f: impl FnOnce(&mut [u8])) -> Result<()> {
        self.check(index)?;
        let mut bytes = self.load(index)?;
        f(&mut bytes);
        self.put(index, &bytes)
    }

    /// Per-slot digests. Not traced.
    pub fn snapshot(&self) -> Result<Snapshot> {
        let digests = par::map_indexed(self.slot_count, |i| {
            self.load(i).map(|bytes| Sha256::digest(&bytes).into())
        })
        .into_iter()
        .collect::<Result<Vec<[u8; 32]>>>()?;
        Ok(Snapshot { digests })
    }

    pub fn trace(&self) -> AccessTrace {
        AccessTrace {
            events: self.trace.lock().unwrap().clone(),
        }
    }

    /// Number of events recorded so far; usable as a mark for
    /// [`trace_since`](Self::trace_since).
    pub fn trace_len(&self) -> usize {
        self.trace.lock().unwrap().len()
    }

    pub fn trace_since(&self, mark: usize) -> AccessTrace {
        AccessTrace {
            events: self.trace.lock().unwrap()[mark..].to_vec(),
        }
    }

    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn write_count(&self) -> u64 {
        self.writes.load(Ordering::Relaxed)
    }
}

impl SealedSlot {
    /// Serialized slot size for pages of `page_size` bytes.
    pub const fn size_for(page_size: usize) -> usize {
        crate::sealer::NONCE_LEN + page_size + crate::sealer::MAC_LEN
    }
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)?;
    Ok(())
}

#[cfg(unix)]
fn write_at(file: &File, buf: &[u8], offset: u64) -> Result<()> {
    use std::os::unix::fs::FileExt;
    file.write_all_at(buf, offset)?;
    Ok(())
}
