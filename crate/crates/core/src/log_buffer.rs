//! In-memory log-structured buffer segment.
//!
//! Space is handed out by an atomic bump of the head offset. A reserved
//! region is private to its owner until [`LogBuffer::write_and_release`]
//! publishes it; a region whose ticket is abandoned never becomes visible
//! and is reclaimed by the next compaction. Compaction slides the kept
//! entries down to offset zero and reports each move.
//!
//! Entry layout, in 8-byte words:
//!
//! ```text
//! [state|kind|len] [id] [touch] [link 0] .. [link n-1] [payload ..]
//! ```
//!
//! Link words hold `target offset + 1`, or zero when empty.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

const HEADER_WORDS: usize = 3;
const WORD: u64 = 8;

const EMPTY: u64 = 0;
const RESERVED: u64 = 1;
const RELEASED: u64 = 2;
const DROPPED: u64 = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BufferError {
    #[error("buffer full: {needed} bytes requested, {free} free")]
    Full { needed: u64, free: u64 },
    #[error("entry of {needed} bytes exceeds buffer capacity {capacity}")]
    Capacity { needed: u64, capacity: u64 },
}

/// A reserved, not yet published region.
#[derive(Debug, PartialEq, Eq)]
pub struct BufferTicket {
    pub offset: u64,
    /// Whole region size in bytes, header included.
    pub length: u64,
    /// Payload capacity in bytes.
    pub payload: u64,
}

/// A ticket together with the buffer segment it was taken from.
#[derive(Debug)]
pub struct Reservation {
    pub segment: std::sync::Arc<LogBuffer>,
    pub ticket: BufferTicket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryState {
    Reserved,
    Released,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryInfo {
    pub offset: u64,
    pub length: u64,
    pub kind: u8,
    pub id: u64,
    pub touched: u64,
    pub state: EntryState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub kind: u8,
    pub id: u64,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CompactReport {
    pub reclaimed: u64,
    pub kept: usize,
    pub moved: usize,
    pub dropped: usize,
}

pub struct LogBuffer {
    words: Box<[AtomicU64]>,
    head: AtomicU64,
    link_slots: usize,
}

fn pack(state: u64, kind: u8, len: u64) -> u64 {
    state | (kind as u64) << 8 | len << 32
}

fn words_for(bytes: u64) -> u64 {
    bytes.div_ceil(WORD)
}

impl LogBuffer {
    /// A buffer of `capacity` bytes (rounded down to whole words) whose
    /// entries carry `link_slots` embedded links.
    pub fn new(capacity: u64, link_slots: usize) -> Self {
        let n = (capacity / WORD) as usize;
        Self {
            words: (0..n).map(|_| AtomicU64::new(0)).collect(),
            head: AtomicU64::new(0),
            link_slots,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.words.len() as u64 * WORD
    }

    pub fn used(&self) -> u64 {
        self.head.load(Ordering::SeqCst) * WORD
    }

    pub fn link_slots(&self) -> usize {
        self.link_slots
    }

    /// Bytes a payload of `n` bytes occupies including its header.
    pub fn footprint(&self, n: u64) -> u64 {
        (HEADER_WORDS as u64 + self.link_slots as u64 + words_for(n)) * WORD
    }

    fn w(&self, offset: u64, i: usize) -> &AtomicU64 {
        &self.words[(offset / WORD) as usize + i]
    }

    /// Reserve room for an `n`-byte payload.
    pub fn reserve(&self, n: u64) -> Result<BufferTicket, BufferError> {
        let need = self.footprint(n);
        if need > self.capacity() {
            return Err(BufferError::Capacity {
                needed: need,
                capacity: self.capacity(),
            });
        }
        let cap_words = self.words.len() as u64;
        let need_words = need / WORD;
        let start = self
            .head
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |h| {
                (h + need_words <= cap_words).then_some(h + need_words)
            })
            .map_err(|h| BufferError::Full {
                needed: need,
                free: (cap_words - h) * WORD,
            })?;
        let offset = start * WORD;
        self.w(offset, 0).store(pack(RESERVED, 0, n), Ordering::Release);
        Ok(BufferTicket {
            offset,
            length: need,
            payload: n,
        })
    }

    /// Publish `bytes` into a reserved region and return its offset.
    ///
    /// # Panics
    /// If the ticket was already released or `bytes` does not fit.
    pub fn write_and_release(&self, t: &BufferTicket, kind: u8, id: u64, bytes: &[u8]) -> u64 {
        assert!(
            bytes.len() as u64 <= t.payload,
            "contract violation: {} bytes written into a {}-byte ticket",
            bytes.len(),
            t.payload
        );
        let hdr = self.w(t.offset, 0).load(Ordering::Acquire);
        assert_eq!(
            hdr & 0xff,
            RESERVED,
            "contract violation: ticket at {} released twice",
            t.offset
        );
        self.w(t.offset, 1).store(id, Ordering::Relaxed);
        self.w(t.offset, 2).store(0, Ordering::Relaxed);
        for l in 0..self.link_slots {
            self.w(t.offset, HEADER_WORDS + l).store(0, Ordering::Relaxed);
        }
        let base = HEADER_WORDS + self.link_slots;
        for (i, chunk) in bytes.chunks(WORD as usize).enumerate() {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            self.w(t.offset, base + i).store(u64::from_le_bytes(word), Ordering::Relaxed);
        }
        let published = pack(RELEASED, kind, bytes.len() as u64);
        self.w(t.offset, 0)
            .compare_exchange(hdr, published, Ordering::Release, Ordering::Relaxed)
            .unwrap_or_else(|_| panic!("contract violation: ticket at {} released twice", t.offset));
        t.offset
    }

    /// Reserve and publish in one go.
    pub fn append(&self, kind: u8, id: u64, bytes: &[u8]) -> Result<u64, BufferError> {
        let t = self.reserve(bytes.len() as u64)?;
        Ok(self.write_and_release(&t, kind, id, bytes))
    }

    fn header(&self, offset: u64) -> Option<(EntryState, u8, u64)> {
        if !offset.is_multiple_of(WORD) || offset >= self.used() {
            return None;
        }
        let h = self.w(offset, 0).load(Ordering::Acquire);
        let state = match h & 0xff {
            RESERVED => EntryState::Reserved,
            RELEASED => EntryState::Released,
            DROPPED => EntryState::Dropped,
            _ => return None,
        };
        Some((state, (h >> 8) as u8, h >> 32))
    }

    /// Contents of a published entry.
    pub fn read(&self, offset: u64) -> Option<Entry> {
        let (state, kind, len) = self.header(offset)?;
        if state != EntryState::Released {
            return None;
        }
        let base = HEADER_WORDS + self.link_slots;
        let mut bytes = Vec::with_capacity(len as usize);
        for i in 0..words_for(len) as usize {
            bytes.extend_from_slice(&self.w(offset, base + i).load(Ordering::Relaxed).to_le_bytes());
        }
        bytes.truncate(len as usize);
        Some(Entry {
            kind,
            id: self.w(offset, 1).load(Ordering::Relaxed),
            bytes,
        })
    }

    /// Stored id of a published entry.
    pub fn id_at(&self, offset: u64) -> Option<u64> {
        match self.header(offset)? {
            (EntryState::Released, _, _) => Some(self.w(offset, 1).load(Ordering::Relaxed)),
            _ => None,
        }
    }

    pub fn touch(&self, offset: u64, stamp: u64) {
        if self.header(offset).is_some_and(|h| h.0 == EntryState::Released) {
            self.w(offset, 2).fetch_max(stamp, Ordering::Relaxed);
        }
    }

    pub fn set_link(&self, offset: u64, slot: usize, target: Option<u64>) {
        assert!(slot < self.link_slots, "link slot {slot} out of range");
        self.w(offset, HEADER_WORDS + slot)
            .store(target.map_or(0, |t| t + 1), Ordering::Release);
    }

    pub fn link(&self, offset: u64, slot: usize) -> Option<u64> {
        assert!(slot < self.link_slots, "link slot {slot} out of range");
        self.w(offset, HEADER_WORDS + slot)
            .load(Ordering::Acquire)
            .checked_sub(1)
    }

    /// Mark a published entry dead; it is reclaimed by the next compaction.
    pub fn drop_entry(&self, offset: u64) {
        if let Some((EntryState::Released, kind, len)) = self.header(offset) {
            self.w(offset, 0).store(pack(DROPPED, kind, len), Ordering::Release);
        }
    }

    /// All entries between offset zero and the head. Requires quiescence.
    pub fn entries(&self) -> Vec<EntryInfo> {
        let mut out = Vec::new();
        let mut off = 0;
        let end = self.used();
        while off < end {
            let Some((state, kind, len)) = self.header(off) else { break };
            let length = self.footprint(len);
            out.push(EntryInfo {
                offset: off,
                length,
                kind,
                id: self.w(off, 1).load(Ordering::Relaxed),
                touched: self.w(off, 2).load(Ordering::Relaxed),
                state,
            });
            off += length;
        }
        out
    }

    /// Published entries only.
    pub fn live_entries(&self) -> Vec<EntryInfo> {
        self.entries()
            .into_iter()
            .filter(|e| e.state == EntryState::Released)
            .collect()
    }

    /// Slide every published entry accepted by `keep` down toward offset
    /// zero, calling `relocate(old, new)` for each entry whose offset changes.
    /// Links into dropped entries are cleared; links into moved entries are
    /// rewritten.
    pub fn compact(
        &mut self,
        mut keep: impl FnMut(&EntryInfo) -> bool,
        mut relocate: impl FnMut(u64, u64),
    ) -> CompactReport {
        let before = self.used();
        let all = self.entries();
        let mut report = CompactReport::default();
        let mut moves: HashMap<u64, u64> = HashMap::new();
        let mut dest = 0u64;
        let mut plan = Vec::new();
        for e in &all {
            if e.state == EntryState::Released && keep(e) {
                moves.insert(e.offset, dest);
                plan.push((e.offset, dest, e.length));
                dest += e.length;
            } else {
                report.dropped += 1;
            }
        }
        for &(from, to, len) in &plan {
            if from != to {
                for i in 0..(len / WORD) as usize {
                    let v = self.w(from, i).load(Ordering::Relaxed);
                    self.w(to, i).store(v, Ordering::Relaxed);
                }
                report.moved += 1;
                relocate(from, to);
            }
        }
        for &(_, to, _) in &plan {
            for l in 0..self.link_slots {
                let target = self.link(to, l);
                self.set_link(to, l, target.and_then(|t| moves.get(&t).copied()));
            }
        }
        for w in &self.words[(dest / WORD) as usize..(before / WORD) as usize] {
            w.store(EMPTY, Ordering::Relaxed);
        }
        self.head.store(dest / WORD, Ordering::SeqCst);
        report.kept = plan.len();
        report.reclaimed = before - dest;
        report
    }

    /// Text listing of all entries: offset, length, kind, id, state.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for e in self.entries() {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{:?}", e.offset, e.length, e.kind, e.id, e.state);
        }
        s
    }
}

impl std::fmt::Debug for LogBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogBuffer")
            .field("capacity", &self.capacity())
            .field("used", &self.used())
            .finish()
    }
}
