//! Epoch-based deferred reclamation.
//!
//! Readers pin the global epoch with a [`Guard`] for the duration of one
//! operation. Unlinked state is handed to [`Collector::retire`] together with
//! the action that releases it; the action runs only once the global epoch is
//! at least two ahead of the epoch in which the state was retired. The global
//! epoch moves from `e` to `e + 1` only when every active guard was entered in
//! epoch `e`, so a guard entered in `e` keeps everything retired in `e` or
//! later alive until it exits.
//!
//! The epoch number doubles as the clock for notice time-outs.

use std::cell::Cell;
use std::fmt;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use crossbeam_queue::SegQueue;
use crossbeam_utils::CachePadded;

/// Number of epochs a retired item must age before its action may run.
pub const RECLAIM_LAG: u64 = 2;

/// Default number of guard slots per collector.
pub const DEFAULT_SLOTS: usize = 256;

const FREE: u64 = 0;

/// Monotonic epoch counter value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Epoch(pub u64);

impl fmt::Display for Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[inline]
fn pinned(epoch: u64) -> u64 {
    (epoch << 1) | 1
}

#[inline]
fn unpin(word: u64) -> Option<u64> {
    (word & 1 == 1).then_some(word >> 1)
}

struct Retired {
    epoch: u64,
    addr: usize,
    action: Box<dyn FnOnce() + Send>,
}

thread_local! {
    static SLOT_HINT: Cell<usize> = const { Cell::new(0) };
}

/// Shared epoch state: the global counter, the guard slots and the retire list.
pub struct Collector {
    global: CachePadded<AtomicU64>,
    slots: Box<[CachePadded<AtomicU64>]>,
    retired: SegQueue<Retired>,
    reclaimed: AtomicU64,
    retired_total: AtomicU64,
    pending: AtomicUsize,
    #[cfg(debug_assertions)]
    live_addrs: std::sync::Mutex<std::collections::HashSet<usize>>,
}

impl Default for Collector {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Collector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Collector")
            .field("epoch", &self.current())
            .field("active", &self.active_guards())
            .field("pending", &self.pending())
            .finish()
    }
}

impl Collector {
    pub fn new() -> Self {
        Self::with_slots(DEFAULT_SLOTS)
    }

    /// A collector that admits at most `slots` simultaneously active guards.
    pub fn with_slots(slots: usize) -> Self {
        assert!(slots > 0, "collector needs at least one guard slot");
        Self {
            global: CachePadded::new(AtomicU64::new(0)),
            slots: (0..slots).map(|_| CachePadded::new(AtomicU64::new(FREE))).collect(),
            retired: SegQueue::new(),
            reclaimed: AtomicU64::new(0),
            retired_total: AtomicU64::new(0),
            pending: AtomicUsize::new(0),
            #[cfg(debug_assertions)]
            live_addrs: Default::default(),
        }
    }

    pub fn current(&self) -> Epoch {
        Epoch(self.global.load(Ordering::SeqCst))
    }

    /// Pin the current epoch.
    pub fn enter(&self) -> Guard<'_> {
        let n = self.slots.len();
        let start = SLOT_HINT.with(Cell::get) % n;
        let mut idx = start;
        loop {
            let slot = &self.slots[idx];
            if slot.load(Ordering::Relaxed) == FREE {
                let e = self.global.load(Ordering::SeqCst);
                if slot
                    .compare_exchange(FREE, pinned(e), Ordering::SeqCst, Ordering::Relaxed)
                    .is_ok()
                {
                    // Re-validate so the pinned value is an epoch that was
                    // current after the pin became visible.
                    let mut pinned_at = e;
                    loop {
                        let now = self.global.load(Ordering::SeqCst);
                        if now == pinned_at {
                            break;
                        }
                        slot.store(pinned(now), Ordering::SeqCst);
                        pinned_at = now;
                    }
                    SLOT_HINT.with(|h| h.set(idx));
                    return Guard {
                        collector: self,
                        slot: idx,
                        epoch: Epoch(pinned_at),
                        _not_send: PhantomData,
                    };
                }
            }
            idx = (idx + 1) % n;
            if idx == start {
                std::hint::spin_loop();
            }
        }
    }

    /// Number of guards currently pinning some epoch.
    pub fn active_guards(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| unpin(s.load(Ordering::SeqCst)).is_some())
            .count()
    }

    /// Oldest epoch pinned by an active guard.
    pub fn oldest_pinned(&self) -> Option<Epoch> {
        self.slots
            .iter()
            .filter_map(|s| unpin(s.load(Ordering::SeqCst)))
            .min()
            .map(Epoch)
    }

    /// Advance the epoch if no active guard lags behind it. Returns the epoch
    /// observed after the attempt.
    pub fn try_advance(&self) -> Epoch {
        let e = self.global.load(Ordering::SeqCst);
        for slot in self.slots.iter() {
            if let Some(p) = unpin(slot.load(Ordering::SeqCst)) {
                if p != e {
                    return Epoch(self.global.load(Ordering::SeqCst));
                }
            }
        }
        crate::step::note_write();
        match self
            .global
            .compare_exchange(e, e + 1, Ordering::SeqCst, Ordering::SeqCst)
        {
            Ok(_) => Epoch(e + 1),
            Err(now) => Epoch(now),
        }
    }

    /// Queue `action` to run once no guard can still observe the item at
    /// `addr`. `addr` is only used for identity checks.
    pub fn retire(&self, _guard: &Guard<'_>, addr: usize, action: Box<dyn FnOnce() + Send>) {
        #[cfg(debug_assertions)]
        {
            let fresh = self.live_addrs.lock().unwrap().insert(addr);
            assert!(fresh, "item {addr:#x} retired twice");
        }
        let epoch = self.global.load(Ordering::SeqCst);
        self.pending.fetch_add(1, Ordering::Relaxed);
        self.retired_total.fetch_add(1, Ordering::Relaxed);
        self.retired.push(Retired { epoch, addr, action });
    }

    /// Run every retired action whose retirement epoch is at least
    /// [`RECLAIM_LAG`] behind the current epoch. Returns how many ran.
    pub fn collect(&self) -> usize {
        let now = self.global.load(Ordering::SeqCst);
        let mut ran = 0;
        for _ in 0..self.retired.len() {
            let Some(item) = self.retired.pop() else { break };
            if item.epoch + RECLAIM_LAG <= now {
                self.run(item);
                ran += 1;
            } else {
                self.retired.push(item);
            }
        }
        ran
    }

    fn run(&self, item: Retired) {
        #[cfg(debug_assertions)]
        self.live_addrs.lock().unwrap().remove(&item.addr);
        #[cfg(not(debug_assertions))]
        let _ = item.addr;
        (item.action)();
        self.pending.fetch_sub(1, Ordering::Relaxed);
        self.reclaimed.fetch_add(1, Ordering::Relaxed);
    }

    pub fn pending(&self) -> usize {
        self.pending.load(Ordering::Relaxed)
    }

    pub fn reclaimed(&self) -> u64 {
        self.reclaimed.load(Ordering::Relaxed)
    }

    pub fn retired_total(&self) -> u64 {
        self.retired_total.load(Ordering::Relaxed)
    }

    /// Advance-and-collect until nothing is pending or no progress is made.
    /// Intended for quiescent points.
    pub fn drain(&self) -> usize {
        let mut total = 0;
        for _ in 0..(RECLAIM_LAG + 2) {
            self.try_advance();
            total += self.collect();
            if self.pending() == 0 {
                break;
            }
        }
        total
    }
}

impl Drop for Collector {
    fn drop(&mut self) {
        while let Some(item) = self.retired.pop() {
            (item.action)();
        }
    }
}

/// An active pin on one epoch. Not transferable between threads.
pub struct Guard<'c> {
    collector: &'c Collector,
    slot: usize,
    epoch: Epoch,
    _not_send: PhantomData<*const ()>,
}

impl Guard<'_> {
    /// The epoch that was current when this guard was entered.
    pub fn epoch(&self) -> Epoch {
        self.epoch
    }

    pub fn collector(&self) -> &Collector {
        self.collector
    }

    /// Explicit exit; equivalent to dropping the guard. Exiting twice is
    /// impossible because the guard is consumed.
    pub fn exit(self) {}
}

impl Drop for Guard<'_> {
    fn drop(&mut self) {
        let prev = self.collector.slots[self.slot].swap(FREE, Ordering::SeqCst);
        debug_assert_eq!(unpin(prev), Some(self.epoch.0), "guard slot corrupted");
    }
}

impl fmt::Debug for Guard<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Guard").field("epoch", &self.epoch).finish()
    }
}
