//! PID-indexed indirection table. Every link between nodes is a [`PageId`]
//! and every state change is a single compare-and-swap on one slot.

use std::collections::VecDeque;
use std::fmt;
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crossbeam_queue::SegQueue;
use thiserror::Error;

use crate::chain::Node;
use crate::epoch::{Collector, Guard};

pub const DEFAULT_CAPACITY: usize = 1 << 20;
/// Poisoned states kept alive so stray readers hit the sentinel instead of
/// freed memory.
const QUARANTINE_LEN: usize = 4096;
const LIVE: u64 = u64::MAX;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PageId(pub u32);

impl PageId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Debug for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MappingError {
    #[error("mapping table full ({capacity} slots)")]
    TableFull { capacity: usize },
}

type Quarantine = Arc<Mutex<VecDeque<Arc<Node>>>>;

pub struct MappingTable {
    slots: Arc<[AtomicPtr<Node>]>,
    /// Global epoch at which a slot was freed, or `LIVE`.
    freed_at: Box<[AtomicU64]>,
    fresh: AtomicU32,
    free_list: Arc<SegQueue<u32>>,
    quarantine: Quarantine,
    poison: bool,
    collector: Collector,
}

impl MappingTable {
    pub fn new(capacity: usize) -> Self {
        Self::with_options(capacity, false)
    }

    /// `poison` overwrites reclaimed states with a sentinel and quarantines
    /// them, so any later read through them is counted.
    pub fn with_options(capacity: usize, poison: bool) -> Self {
        assert!(capacity > 0 && capacity <= u32::MAX as usize);
        Self {
            slots: (0..capacity).map(|_| AtomicPtr::new(ptr::null_mut())).collect(),
            freed_at: (0..capacity).map(|_| AtomicU64::new(LIVE)).collect(),
            fresh: AtomicU32::new(0),
            free_list: Arc::new(SegQueue::new()),
            quarantine: Arc::new(Mutex::new(VecDeque::new())),
            poison,
            collector: Collector::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn collector(&self) -> &Collector {
        &self.collector
    }

    pub fn pin(&self) -> Guard<'_> {
        self.collector.enter()
    }

    /// Slots ever handed out, including freed ones.
    pub fn high_water(&self) -> usize {
        (self.fresh.load(Ordering::SeqCst) as usize).min(self.capacity())
    }

    pub fn free_count(&self) -> usize {
        self.free_list.len()
    }

    pub fn is_live(&self, pid: PageId) -> bool {
        pid.index() < self.high_water()
            && self.freed_at[pid.index()].load(Ordering::SeqCst) == LIVE
            && !self.slots[pid.index()].load(Ordering::SeqCst).is_null()
    }

    /// Reserve a slot and install `init(pid)` before returning the id.
    pub fn allocate_with(
        &self,
        init: impl FnOnce(PageId) -> Arc<Node>,
    ) -> Result<PageId, MappingError> {
        let idx = match self.free_list.pop() {
            Some(i) => i,
            None => {
                let cap = self.capacity() as u32;
                self.fresh
                    .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < cap).then_some(n + 1))
                    .map_err(|_| MappingError::TableFull {
                        capacity: self.capacity(),
                    })?
            }
        };
        let pid = PageId(idx);
        let state = Arc::into_raw(init(pid)) as *mut Node;
        crate::step::note_write();
        self.freed_at[pid.index()].store(LIVE, Ordering::SeqCst);
        let prev = self.slots[pid.index()].swap(state, Ordering::AcqRel);
        debug_assert!(prev.is_null(), "allocated slot {pid:?} was not empty");
        Ok(pid)
    }

    /// Current chain head of `pid`.
    pub fn read<'g>(&self, pid: PageId, guard: &'g Guard<'_>) -> &'g Node {
        #[cfg(debug_assertions)]
        {
            let freed = self.freed_at[pid.index()].load(Ordering::SeqCst);
            assert!(
                freed == LIVE || freed >= guard.epoch().0,
                "contract violation: read of freed page {pid:?}"
            );
        }
        let _ = guard;
        let p = self.slots[pid.index()].load(Ordering::Acquire);
        assert!(!p.is_null(), "contract violation: read of unallocated page {pid:?}");
        // SAFETY: non-null slot values come from `Arc::into_raw` and are only
        // released through the collector after every guard that could have
        // loaded them has exited.
        unsafe { &*p }
    }

    /// Like [`read`](Self::read) but returns `None` for a page that was
    /// freed before `guard` was taken or holds no state.
    pub fn read_checked<'g>(&self, pid: PageId, guard: &'g Guard<'_>) -> Option<&'g Node> {
        if pid.index() >= self.capacity() {
            return None;
        }
        let freed = self.freed_at[pid.index()].load(Ordering::SeqCst);
        if freed != LIVE && freed < guard.epoch().0 {
            return None;
        }
        let p = self.slots[pid.index()].load(Ordering::Acquire);
        // SAFETY: as in `read`.
        (!p.is_null()).then(|| unsafe { &*p })
    }

    /// Replace `expected` with `new` if the slot still holds `expected`.
    /// On failure `new` is handed back.
    pub fn try_install(
        &self,
        pid: PageId,
        expected: &Node,
        new: Arc<Node>,
        guard: &Guard<'_>,
    ) -> Result<(), Arc<Node>> {
        let exp = expected as *const Node as *mut Node;
        crate::step::note_write();
        let raw = Arc::into_raw(new) as *mut Node;
        match self.slots[pid.index()].compare_exchange(exp, raw, Ordering::AcqRel, Ordering::Acquire) {
            Ok(old) => {
                self.retire_state(old, guard);
                Ok(())
            }
            Err(_) => {
                // SAFETY: `raw` was produced above and never published.
                Err(unsafe { Arc::from_raw(raw) })
            }
        }
    }

    pub fn cas_install(&self, pid: PageId, expected: &Node, new: Arc<Node>, guard: &Guard<'_>) -> bool {
        self.try_install(pid, expected, new, guard).is_ok()
    }

    fn retire_state(&self, old: *mut Node, guard: &Guard<'_>) {
        // SAFETY: `old` was the slot's reference, now owned by this closure.
        let arc = unsafe { Arc::from_raw(old) };
        let poison = self.poison;
        let quarantine = self.quarantine.clone();
        self.collector.retire(
            guard,
            old as usize,
            Box::new(move || release(arc, poison, &quarantine)),
        );
    }

    /// Retire `pid`. Its slot keeps its last state until reclamation, then is
    /// cleared and the id becomes reusable.
    pub fn free_pid(&self, pid: PageId, guard: &Guard<'_>) {
        let now = self.collector.current().0;
        crate::step::note_write();
        self.freed_at[pid.index()].store(now, Ordering::SeqCst);
        let slots = self.slots.clone();
        let free_list = self.free_list.clone();
        let quarantine = self.quarantine.clone();
        let poison = self.poison;
        // Page ids are tagged into the upper half of the address space, which
        // never collides with heap addresses of retired states.
        let tag = (1usize << (usize::BITS - 1)) | pid.index();
        self.collector.retire(
            guard,
            tag,
            Box::new(move || {
                let p = slots[pid.index()].swap(ptr::null_mut(), Ordering::AcqRel);
                if !p.is_null() {
                    // SAFETY: the slot owned this reference.
                    release(unsafe { Arc::from_raw(p) }, poison, &quarantine);
                }
                free_list.push(pid.0);
            }),
        );
    }

    /// Ids that currently hold a state.
    pub fn live_pids(&self) -> Vec<PageId> {
        (0..self.high_water() as u32)
            .map(PageId)
            .filter(|p| self.is_live(*p))
            .collect()
    }
}

fn release(state: Arc<Node>, poison: bool, quarantine: &Quarantine) {
    if !poison {
        return;
    }
    Node::poison_unique(&state);
    if state.is_poisoned() {
        let mut q = quarantine.lock().unwrap();
        q.push_back(state);
        if q.len() > QUARANTINE_LEN {
            q.pop_front();
        }
    }
}

impl Drop for MappingTable {
    fn drop(&mut self) {
        self.collector.drain();
        for s in self.slots.iter() {
            let p = s.swap(ptr::null_mut(), Ordering::AcqRel);
            if !p.is_null() {
                // SAFETY: the slot owned this reference.
                drop(unsafe { Arc::from_raw(p) });
            }
        }
    }
}

impl fmt::Debug for MappingTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MappingTable")
            .field("capacity", &self.capacity())
            .field("high_water", &self.high_water())
            .field("free", &self.free_count())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{prepend, Delta, Element};

    fn put(head: &Node, k: u8) -> Arc<Node> {
        prepend(
            &head.share(),
            Element::Delta(Delta::Insert {
                key: vec![k],
                value: vec![k],
            }),
        )
    }

    #[test]
    fn fresh_table_hands_out_zero() {
        let t = MappingTable::new(4);
        assert_eq!(t.allocate_with(|_| Node::empty_leaf()).unwrap(), PageId(0));
        assert_eq!(t.allocate_with(|_| Node::empty_leaf()).unwrap(), PageId(1));
    }

    #[test]
    fn full_table_errors() {
        let t = MappingTable::new(2);
        t.allocate_with(|_| Node::empty_leaf()).unwrap();
        t.allocate_with(|_| Node::empty_leaf()).unwrap();
        assert_eq!(
            t.allocate_with(|_| Node::empty_leaf()),
            Err(MappingError::TableFull { capacity: 2 })
        );
    }

    #[test]
    fn install_and_read_back() {
        let t = MappingTable::new(4);
        let p = t.allocate_with(|_| Node::empty_leaf()).unwrap();
        let g = t.pin();
        let h = t.read(p, &g);
        let x = put(h, 1);
        let xp = Arc::as_ptr(&x);
        assert!(t.cas_install(p, h, x, &g));
        assert!(ptr::eq(t.read(p, &g), xp));
    }

    #[test]
    fn stale_expected_fails_and_leaves_slot() {
        let t = MappingTable::new(4);
        let p = t.allocate_with(|_| Node::empty_leaf()).unwrap();
        let g = t.pin();
        let h = t.read(p, &g);
        assert!(t.cas_install(p, h, put(h, 1), &g));
        let now = t.read(p, &g) as *const Node;
        assert!(!t.cas_install(p, h, put(h, 2), &g));
        assert!(ptr::eq(t.read(p, &g), now));
    }

    #[test]
    fn free_is_deferred_then_recycled() {
        let t = MappingTable::new(4);
        let p = t.allocate_with(|_| Node::empty_leaf()).unwrap();
        {
            let g = t.pin();
            t.free_pid(p, &g);
        }
        assert_eq!(t.free_count(), 0);
        t.collector().drain();
        assert_eq!(t.free_count(), 1);
        assert_eq!(t.allocate_with(|_| Node::empty_leaf()).unwrap(), p);
    }

    #[test]
    fn old_reader_still_sees_freed_state() {
        let t = MappingTable::new(4);
        let p = t.allocate_with(|_| Node::empty_leaf()).unwrap();
        let reader = t.pin();
        let seen = t.read(p, &reader);
        {
            let g = t.pin();
            t.free_pid(p, &g);
        }
        t.collector().drain();
        assert_eq!(t.free_count(), 0);
        assert!(seen.next().is_none());
        drop(reader);
        t.collector().drain();
        assert_eq!(t.free_count(), 1);
    }

    #[cfg(debug_assertions)]
    #[test]
    #[should_panic(expected = "contract violation")]
    fn read_after_free_panics_in_debug() {
        let t = MappingTable::new(4);
        let p = t.allocate_with(|_| Node::empty_leaf()).unwrap();
        {
            let g = t.pin();
            t.free_pid(p, &g);
        }
        t.collector().try_advance();
        let g = t.pin();
        let _ = t.read(p, &g);
    }

    #[test]
    fn poisoning_marks_unreachable_states() {
        let t = MappingTable::with_options(4, true);
        let p = t.allocate_with(|_| Node::empty_leaf()).unwrap();
        let before = crate::chain::sentinel_touches();
        {
            let g = t.pin();
            let h = t.read(p, &g);
            let fresh = Node::empty_leaf();
            assert!(t.cas_install(p, h, fresh, &g));
        }
        t.collector().drain();
        assert_eq!(t.quarantine.lock().unwrap().len(), 1);
        let q = t.quarantine.lock().unwrap();
        assert!(q[0].is_poisoned());
        let _ = q[0].body();
        assert!(crate::chain::sentinel_touches() > before);
    }

    #[test]
    fn concurrent_allocations_are_distinct() {
        let t = MappingTable::new(4096);
        let ids: Vec<Vec<PageId>> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..4)
                .map(|_| s.spawn(|| (0..512).map(|_| t.allocate_with(|_| Node::empty_leaf()).unwrap()).collect()))
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut all: Vec<_> = ids.into_iter().flatten().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 2048);
    }
}
