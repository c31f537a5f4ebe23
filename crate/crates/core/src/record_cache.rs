//! Record cache: a lossy hash index over a log-structured buffer.
//!
//! Each bucket holds one mapping, `entry offset + 1`, and a newer record
//! hashing to the same bucket simply overwrites it. Reads verify the id
//! stored in the entry header, so a displaced or stale mapping yields a miss,
//! never another record's bytes. Entries carry embedded link slots which are
//! reclaimed together with the entry.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::log_buffer::{BufferError, EntryInfo, LogBuffer};

pub type RecordId = u64;

/// Buffer entry kind used for cached records.
pub const RECORD_ENTRY: u8 = 2;

const FIB: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheError {
    #[error("record of {needed} bytes can never fit a {capacity}-byte buffer")]
    Capacity { needed: u64, capacity: u64 },
    #[error("buffer full")]
    Full,
    #[error("link slot {slot} out of range ({slots} slots)")]
    SlotOutOfRange { slot: usize, slots: usize },
    #[error("record {0} is not cached")]
    Missing(RecordId),
}

impl From<BufferError> for CacheError {
    fn from(e: BufferError) -> Self {
        match e {
            BufferError::Full { .. } => CacheError::Full,
            BufferError::Capacity { needed, capacity } => CacheError::Capacity { needed, capacity },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CacheConfig {
    pub buffer_bytes: u64,
    /// log2 of the bucket count.
    pub bucket_bits: u32,
    pub link_slots: usize,
    /// Retention window in operations; `None` means twice the number of
    /// entries the buffer currently holds.
    pub window: Option<u64>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            buffer_bytes: 1 << 20,
            bucket_bits: 12,
            link_slots: 2,
            window: None,
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

pub struct RecordCache {
    buffer: LogBuffer,
    buckets: Box<[AtomicU64]>,
    bits: u32,
    window: Option<u64>,
    clock: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
}

impl std::fmt::Debug for RecordCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RecordCache")
            .field("buckets", &self.buckets.len())
            .field("used", &self.buffer.used())
            .field("capacity", &self.buffer.capacity())
            .finish()
    }
}

impl RecordCache {
    pub fn new(cfg: CacheConfig) -> Self {
        assert!((1..=32).contains(&cfg.bucket_bits), "bucket_bits must be in 1..=32");
        Self {
            buffer: LogBuffer::new(cfg.buffer_bytes, cfg.link_slots),
            buckets: (0..1usize << cfg.bucket_bits).map(|_| AtomicU64::new(0)).collect(),
            bits: cfg.bucket_bits,
            window: cfg.window,
            clock: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        }
    }

    /// Bucket for `id`: the top bits of a Fibonacci hash.
    pub fn bucket_of(&self, id: RecordId) -> usize {
        (id.wrapping_mul(FIB) >> (64 - self.bits)) as usize
    }

    pub fn buffer(&self) -> &LogBuffer {
        &self.buffer
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
        }
    }

    /// Logical time: one tick per put or get.
    pub fn now(&self) -> u64 {
        self.clock.load(Ordering::Relaxed)
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed) + 1
    }

    /// Offset of the live entry for `id`, if the index maps it.
    fn locate(&self, id: RecordId) -> Option<u64> {
        let off = self.buckets[self.bucket_of(id)].load(Ordering::Acquire).checked_sub(1)?;
        (self.buffer.id_at(off) == Some(id)).then_some(off)
    }

    /// Append `record` and point the index at it.
    pub fn put(&self, id: RecordId, record: &[u8]) -> Result<(), CacheError> {
        let off = self.buffer.append(RECORD_ENTRY, id, record)?;
        self.buffer.touch(off, self.tick());
        let prev = self.buckets[self.bucket_of(id)].swap(off + 1, Ordering::AcqRel);
        if let Some(p) = prev.checked_sub(1) {
            if self.buffer.id_at(p) == Some(id) {
                // Superseded version of the same record.
                self.buffer.drop_entry(p);
            }
        }
        Ok(())
    }

    /// Put, evicting cold entries and then everything else if the buffer is
    /// full.
    pub fn put_or_evict(&mut self, id: RecordId, record: &[u8]) -> Result<(), CacheError> {
        match self.put(id, record) {
            Err(CacheError::Full) => {}
            other => return other,
        }
        self.evict_cold(self.window());
        match self.put(id, record) {
            Err(CacheError::Full) => {}
            other => return other,
        }
        self.evict_where(|_| false);
        self.put(id, record)
    }

    pub fn get(&self, id: RecordId) -> Option<Vec<u8>> {
        let now = self.tick();
        let hit = self.locate(id).and_then(|off| {
            let e = self.buffer.read(off)?;
            (e.id == id).then(|| {
                self.buffer.touch(off, now);
                e.bytes
            })
        });
        let c = if hit.is_some() { &self.hits } else { &self.misses };
        c.fetch_add(1, Ordering::Relaxed);
        hit
    }

    pub fn contains(&self, id: RecordId) -> bool {
        self.locate(id).is_some()
    }

    /// Retention window used by [`RecordCache::put_or_evict`].
    pub fn window(&self) -> u64 {
        self.window
            .unwrap_or_else(|| 2 * self.buffer.live_entries().len() as u64)
    }

    /// Drop entries not touched within the last `window` operations.
    /// Returns reclaimed bytes.
    pub fn evict_cold(&mut self, window: u64) -> u64 {
        let cutoff = self.now().saturating_sub(window);
        self.compact(|e| e.touched > cutoff)
    }

    /// Keep only entries whose id satisfies `keep`. Returns reclaimed bytes.
    pub fn evict_where(&mut self, mut keep: impl FnMut(RecordId) -> bool) -> u64 {
        self.compact(|e| keep(e.id))
    }

    fn compact(&mut self, mut keep: impl FnMut(&EntryInfo) -> bool) -> u64 {
        let mut kept = HashSet::new();
        let mut moves = HashMap::new();
        let report = self.buffer.compact(
            |e| {
                let k = keep(e);
                if k {
                    kept.insert(e.offset);
                }
                k
            },
            |from, to| {
                moves.insert(from, to);
            },
        );
        for b in self.buckets.iter() {
            let Some(off) = b.load(Ordering::Relaxed).checked_sub(1) else { continue };
            let now = match moves.get(&off) {
                Some(&to) => to + 1,
                None if kept.contains(&off) => off + 1,
                None => 0,
            };
            b.store(now, Ordering::Relaxed);
        }
        self.evictions
            .fetch_add(report.dropped as u64, Ordering::Relaxed);
        report.reclaimed
    }

    /// Point `from`'s embedded link `slot` at `to`.
    pub fn link_attach(&self, from: RecordId, slot: usize, to: RecordId) -> Result<(), CacheError> {
        let slots = self.buffer.link_slots();
        if slot >= slots {
            return Err(CacheError::SlotOutOfRange { slot, slots });
        }
        let f = self.locate(from).ok_or(CacheError::Missing(from))?;
        let t = self.locate(to).ok_or(CacheError::Missing(to))?;
        self.buffer.set_link(f, slot, Some(t));
        Ok(())
    }

    /// Target of `from`'s link `slot`, if both ends are live.
    pub fn link(&self, from: RecordId, slot: usize) -> Result<Option<RecordId>, CacheError> {
        let slots = self.buffer.link_slots();
        if slot >= slots {
            return Err(CacheError::SlotOutOfRange { slot, slots });
        }
        let f = self.locate(from).ok_or(CacheError::Missing(from))?;
        Ok(self.buffer.link(f, slot).and_then(|t| self.buffer.id_at(t)))
    }

    /// Ids reached from `from` by repeatedly following link `slot`, `from`
    /// included. Stops at a missing target or a cycle.
    pub fn traverse(&self, from: RecordId, slot: usize) -> Result<Vec<RecordId>, CacheError> {
        let slots = self.buffer.link_slots();
        if slot >= slots {
            return Err(CacheError::SlotOutOfRange { slot, slots });
        }
        let mut off = self.locate(from).ok_or(CacheError::Missing(from))?;
        let mut seen = HashSet::from([off]);
        let mut out = vec![from];
        while let Some(t) = self.buffer.link(off, slot) {
            let Some(id) = self.buffer.id_at(t) else { break };
            if !seen.insert(t) {
                break;
            }
            out.push(id);
            off = t;
        }
        Ok(out)
    }

    /// Ids of all live entries in buffer order.
    pub fn live_ids(&self) -> Vec<RecordId> {
        self.buffer.live_entries().into_iter().map(|e| e.id).collect()
    }
}
