//! The latch-free B-link tree: lookups, delta updates, range scans and
//! cNOTICE consolidation.
//!
//! Every operation exists in two forms. The plain method runs to completion
//! on the calling thread. The `*_with` form is an `async fn` taking a
//! [`Pace`]; with [`Pace::Stepped`] it suspends before each mapping-table
//! read and each install so an external scheduler can interleave it with
//! other operations one atomic step at a time.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use arc_swap::ArcSwap;
use thiserror::Error;

use crate::chain::{
    blocking_notice, bounds, chain_length, dead_notice, elements_above, has_stale_notice,
    index_view, leaf_view, pending_notice, prepend, relink, route_index, search_chain, BaseNode,
    Body, Delta, Element, Entries, Key, Lookup, Node, Notice, NoticeKind, Probe, Route, Value,
};
use crate::epoch::Guard;
use crate::log_buffer::{BufferError, LogBuffer, Reservation};
use crate::mapping::{MappingTable, PageId, DEFAULT_CAPACITY};
use crate::step::{run_free, Pace};

/// Slot holding the current root page id.
pub const ROOT_SLOT: PageId = PageId(0);

/// Upper bound on follow-up work an operation performs after its own effect.
const MAX_FOLLOW_UP: usize = 64;
/// Operations between cooperative epoch advances.
const ADVANCE_EVERY: u64 = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("consolidate_threshold must be at least 1")]
    ConsolidateThreshold,
    #[error("split_threshold ({split}) must exceed twice merge_threshold ({merge})")]
    SplitVsMerge { split: usize, merge: usize },
    #[error("notice_timeout_epochs must be at least 2, got {0}")]
    Timeout(u64),
    #[error("mapping table needs at least 2 slots")]
    Capacity,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("invalid range: low bound is above high bound")]
    InvalidRange,
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeConfig {
    /// Data deltas that trigger consolidation.
    pub consolidate_threshold: usize,
    /// Records (or index terms) that trigger a split.
    pub split_threshold: usize,
    /// Data nodes with fewer records are merged into their left sibling.
    pub merge_threshold: usize,
    /// Age after which another thread may complete a notice.
    pub notice_timeout_epochs: u64,
    pub table_capacity: usize,
    /// Size of each log buffer segment used for split reservations.
    pub segment_bytes: u64,
    /// Overwrite reclaimed states with a sentinel.
    pub poison: bool,
    /// Run consolidation, splits, merges and parent updates after each
    /// operation. Off means they only happen when called explicitly.
    pub auto_smo: bool,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            consolidate_threshold: 8,
            split_threshold: 64,
            merge_threshold: 8,
            notice_timeout_epochs: 3,
            table_capacity: DEFAULT_CAPACITY,
            segment_bytes: 1 << 20,
            poison: false,
            auto_smo: true,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.consolidate_threshold < 1 {
            return Err(ConfigError::ConsolidateThreshold);
        }
        if self.split_threshold <= 2 * self.merge_threshold {
            return Err(ConfigError::SplitVsMerge {
                split: self.split_threshold,
                merge: self.merge_threshold,
            });
        }
        if self.notice_timeout_epochs < 2 {
            return Err(ConfigError::Timeout(self.notice_timeout_epochs));
        }
        if self.table_capacity < 2 {
            return Err(ConfigError::Capacity);
        }
        Ok(())
    }

    /// Small table, no automatic maintenance. Used for step-driven tests.
    pub fn manual(capacity: usize) -> Self {
        Self {
            table_capacity: capacity,
            auto_smo: false,
            segment_bytes: 1 << 16,
            ..Self::default()
        }
    }
}

macro_rules! stats {
    ($($name:ident),* $(,)?) => {
        #[derive(Debug, Default)]
        pub struct Stats {
            $(pub $name: AtomicU64,)*
        }

        #[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
        pub struct StatsSnapshot {
            $(pub $name: u64,)*
        }

        impl Stats {
            pub fn snapshot(&self) -> StatsSnapshot {
                StatsSnapshot {
                    $($name: self.$name.load(Ordering::Relaxed),)*
                }
            }
        }

        impl StatsSnapshot {
            /// Counter increments since `earlier`.
            pub fn since(&self, earlier: &StatsSnapshot) -> StatsSnapshot {
                StatsSnapshot {
                    $($name: self.$name - earlier.$name,)*
                }
            }

            pub fn pairs(&self) -> Vec<(&'static str, u64)> {
                vec![$((stringify!($name), self.$name),)*]
            }
        }
    };
}

stats!(
    ops,
    cas_update,
    cas_consolidate,
    cas_split,
    cas_index,
    consolidations,
    consolidation_losses,
    split_notices,
    splits,
    split_losses,
    records_moved,
    merges,
    merges_deferred,
    takeovers,
    index_posts,
    root_growths,
    buffer_segments,
    buffer_full,
    table_full,
);

impl StatsSnapshot {
    /// Failed installs over all sites.
    pub fn cas_failures(&self) -> u64 {
        self.cas_update + self.cas_consolidate + self.cas_split + self.cas_index
    }
}

pub(crate) fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

/// Follow-up work discovered while running an operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Work {
    Takeover(PageId),
    Consolidate(PageId),
    Split(PageId),
    Merge(PageId),
    Post { level: u8, sep: Key, child: PageId },
}

#[derive(Default)]
pub(crate) struct OpCtx {
    pub(crate) work: Vec<Work>,
}

impl OpCtx {
    pub(crate) fn push(&mut self, w: Work) {
        if !self.work.contains(&w) {
            self.work.push(w);
        }
    }
}

/// Node reached by a descent.
pub(crate) struct Landing<'g> {
    pub pid: PageId,
    pub head: &'g Node,
    /// Page whose side link led here, if the last hop was a side link.
    pub from: Option<PageId>,
}

pub struct Tree {
    pub(crate) table: MappingTable,
    pub(crate) segment: ArcSwap<LogBuffer>,
    pub(crate) config: TreeConfig,
    pub(crate) stats: Stats,
}

impl std::fmt::Debug for Tree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tree")
            .field("config", &self.config)
            .field("table", &self.table)
            .finish()
    }
}

pub(crate) fn notice(kind: NoticeKind, epoch: u64) -> Element {
    Element::Notice(Notice {
        kind,
        owner_epoch: epoch,
    })
}

impl Tree {
    pub fn new(config: TreeConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let table = MappingTable::with_options(config.table_capacity, config.poison);
        let root = table
            .allocate_with(|_| Node::new(Body::Root(PageId(1))))
            .expect("fresh table");
        debug_assert_eq!(root, ROOT_SLOT);
        let first = table.allocate_with(|_| Node::empty_leaf()).expect("fresh table");
        debug_assert_eq!(first, PageId(1));
        Ok(Self {
            table,
            segment: ArcSwap::from_pointee(LogBuffer::new(config.segment_bytes, 0)),
            config,
            stats: Stats::default(),
        })
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn stats(&self) -> &Stats {
        &self.stats
    }

    pub fn table(&self) -> &MappingTable {
        &self.table
    }

    /// Current log buffer segment.
    pub fn segment(&self) -> Arc<LogBuffer> {
        self.segment.load_full()
    }

    pub fn pin(&self) -> Guard<'_> {
        self.table.pin()
    }

    pub fn current_epoch(&self) -> u64 {
        self.table.collector().current().0
    }

    /// Try to advance the global epoch and run due reclamations.
    pub fn advance_epoch(&self) -> u64 {
        let e = self.table.collector().try_advance();
        self.table.collector().collect();
        e.0
    }

    pub fn root_pid(&self, g: &Guard<'_>) -> PageId {
        match self.table.read(ROOT_SLOT, g).body() {
            Body::Root(p) => *p,
            _ => unreachable!("root slot holds a node state"),
        }
    }

    /// Reserve buffer space, moving to a fresh segment when the current one
    /// is full. `None` if the request exceeds a whole segment.
    pub(crate) fn reserve(&self, n: u64) -> Option<Reservation> {
        loop {
            let seg = self.segment.load_full();
            match seg.reserve(n) {
                Ok(ticket) => {
                    return Some(Reservation {
                        segment: seg,
                        ticket,
                    })
                }
                Err(BufferError::Full { .. }) => {
                    let fresh = Arc::new(LogBuffer::new(self.config.segment_bytes, 0));
                    let prev = self.segment.compare_and_swap(&seg, fresh);
                    if Arc::ptr_eq(&prev, &seg) {
                        bump(&self.stats.buffer_segments);
                    }
                }
                Err(BufferError::Capacity { .. }) => {
                    bump(&self.stats.buffer_full);
                    return None;
                }
            }
        }
    }

    // ---- plain entry points -------------------------------------------

    pub fn get(&self, key: &[u8]) -> Option<Value> {
        run_free(self.get_with(key, Pace::Free))
    }

    pub fn upsert(&self, key: &[u8], value: &[u8]) {
        run_free(self.upsert_with(key, value, Pace::Free))
    }

    pub fn delete(&self, key: &[u8]) {
        run_free(self.delete_with(key, Pace::Free))
    }

    /// Live records with `low <= key < high`, in key order.
    pub fn range_scan(&self, low: &[u8], high: &[u8]) -> Result<Vec<(Key, Value)>, TreeError> {
        run_free(self.range_scan_with(low, high, Pace::Free))
    }

    /// Every live record in key order.
    pub fn scan_all(&self) -> Vec<(Key, Value)> {
        run_free(self.scan_with(&[], None, Pace::Free))
    }

    pub fn consolidate(&self, pid: PageId) -> bool {
        run_free(self.consolidate_with(pid, Pace::Free))
    }

    pub fn maybe_takeover(&self, pid: PageId) -> bool {
        run_free(self.maybe_takeover_with(pid, Pace::Free))
    }

    // ---- traversal ----------------------------------------------------

    pub(crate) fn note_stale(&self, pid: PageId, head: &Node, ctx: &mut OpCtx) {
        let now = self.current_epoch();
        if has_stale_notice(head, now, self.config.notice_timeout_epochs) {
            ctx.push(Work::Takeover(pid));
        }
    }

    fn note_hop(&self, level: u8, head: &Node, pid: PageId, to: PageId, ctx: &mut OpCtx) {
        if !self.config.auto_smo {
            return;
        }
        if let Some(sep) = bounds(head, pid).high {
            ctx.push(Work::Post {
                level: level + 1,
                sep: sep.to_vec(),
                child: to,
            });
        }
    }

    /// Walk from the root to the node at `level` responsible for `probe`.
    /// `None` when the tree is not that tall.
    pub(crate) async fn descend<'g>(
        &self,
        g: &'g Guard<'_>,
        probe: Probe<'_>,
        level: u8,
        pace: Pace,
        ctx: &mut OpCtx,
    ) -> Option<Landing<'g>> {
        'restart: loop {
            pace.step().await;
            let root = self.root_pid(g);
            let mut pid = root;
            let mut from = None;
            loop {
                pace.step().await;
                let head = self.table.read(pid, g);
                self.note_stale(pid, head, ctx);
                let l = head.level();
                if l == level {
                    return Some(Landing { pid, head, from });
                }
                if l < level {
                    if pid == root {
                        return None;
                    }
                    continue 'restart;
                }
                match route_index(head, pid, probe) {
                    Route::Child(c) => {
                        pid = c;
                        from = None;
                    }
                    Route::Redirect(p) => {
                        pid = p;
                        from = None;
                    }
                    Route::Beyond(s) => {
                        self.note_hop(l, head, pid, s, ctx);
                        from = Some(pid);
                        pid = s;
                    }
                }
            }
        }
    }

    /// Move along the data level until reaching the node that owns `key`
    /// for reading.
    async fn read_key<'g>(
        &self,
        g: &'g Guard<'_>,
        key: &[u8],
        pace: Pace,
        ctx: &mut OpCtx,
    ) -> Option<&'g [u8]> {
        let land = self
            .descend(g, Probe::Key(key), 0, pace, ctx)
            .await
            .expect("data level always exists");
        let (mut pid, mut head, mut via_left) = (land.pid, land.head, land.from.is_some());
        loop {
            match search_chain(head, pid, key, via_left) {
                Lookup::Found(v) => return Some(v),
                Lookup::Absent => return None,
                Lookup::Redirect(p) | Lookup::Dead(p) => {
                    pid = p;
                    via_left = false;
                }
                Lookup::Beyond(s) => {
                    self.note_hop(0, head, pid, s, ctx);
                    pid = s;
                    via_left = true;
                }
            }
            pace.step().await;
            head = self.table.read(pid, g);
            self.note_stale(pid, head, ctx);
        }
    }

    /// Find the node on which an update of `key` must be installed, starting
    /// at `pid`. Returns the node, the head to install against, and whether
    /// the key currently has a value.
    #[allow(clippy::too_many_arguments)]
    pub(crate) async fn locate_for_update<'g>(
        &self,
        g: &'g Guard<'_>,
        mut pid: PageId,
        mut head: &'g Node,
        mut from: Option<PageId>,
        key: &[u8],
        pace: Pace,
        ctx: &mut OpCtx,
    ) -> (PageId, &'g Node, bool) {
        loop {
            if let Some(m) = dead_notice(head, pid) {
                // Updates for a node being merged away go to its left
                // neighbour, as deltas beyond that neighbour's high key
                // when the neighbour does not yet cover them.
                match from.take() {
                    Some(x) => {
                        pace.step().await;
                        let xh = self.table.read(x, g);
                        let b = bounds(xh, x);
                        if b.side == Some(pid) && Probe::Key(key).beyond_high(b.high) {
                            let exists = match search_chain(xh, x, key, false) {
                                Lookup::Found(_) => true,
                                Lookup::Absent => false,
                                _ => matches!(search_chain(head, pid, key, true), Lookup::Found(_)),
                            };
                            return (x, xh, exists);
                        }
                        pid = x;
                        head = xh;
                    }
                    None => {
                        pid = m.left;
                        pace.step().await;
                        head = self.table.read(pid, g);
                    }
                }
                continue;
            }
            match search_chain(head, pid, key, from.is_some()) {
                Lookup::Found(_) => return (pid, head, true),
                Lookup::Absent => return (pid, head, false),
                Lookup::Redirect(p) | Lookup::Dead(p) => {
                    pid = p;
                    from = None;
                }
                Lookup::Beyond(s) => {
                    self.note_hop(0, head, pid, s, ctx);
                    from = Some(pid);
                    pid = s;
                }
            }
            pace.step().await;
            head = self.table.read(pid, g);
            self.note_stale(pid, head, ctx);
        }
    }

    // ---- public async operations ----------------------------------------

    pub async fn get_with(&self, key: &[u8], pace: Pace) -> Option<Value> {
        let g = self.pin();
        let mut ctx = OpCtx::default();
        let v = self.read_key(&g, key, pace, &mut ctx).await.map(<[u8]>::to_vec);
        self.finish_op(&g, ctx, pace).await;
        v
    }

    pub async fn upsert_with(&self, key: &[u8], value: &[u8], pace: Pace) {
        self.write(key, Some(value), pace).await
    }

    pub async fn delete_with(&self, key: &[u8], pace: Pace) {
        self.write(key, None, pace).await
    }

    async fn write(&self, key: &[u8], value: Option<&[u8]>, pace: Pace) {
        let g = self.pin();
        let mut ctx = OpCtx::default();
        let land = self
            .descend(&g, Probe::Key(key), 0, pace, &mut ctx)
            .await
            .expect("data level always exists");
        let (mut pid, mut head, mut exists) = self
            .locate_for_update(&g, land.pid, land.head, land.from, key, pace, &mut ctx)
            .await;
        loop {
            let delta = match (value, exists) {
                (Some(v), true) => Delta::Update {
                    key: key.to_vec(),
                    value: v.to_vec(),
                },
                (Some(v), false) => Delta::Insert {
                    key: key.to_vec(),
                    value: v.to_vec(),
                },
                (None, true) => Delta::Delete { key: key.to_vec() },
                // Deleting an absent key changes nothing.
                (None, false) => break,
            };
            let len = chain_length(head).data_deltas + 1;
            let own = self.config.auto_smo
                && len >= self.config.consolidate_threshold
                && pending_notice(head).is_none();
            let mut new = prepend(&head.share(), Element::Delta(delta));
            if own {
                new = prepend(&new, notice(NoticeKind::Consolidate, g.epoch().0));
            }
            let cnotice = Arc::as_ptr(&new);
            pace.step().await;
            match self.table.try_install(pid, head, new, &g) {
                Ok(()) => {
                    if own {
                        if let Some(base) = self.finish_consolidation(&g, pid, cnotice, pace).await {
                            self.after_consolidation(pid, &base, &mut ctx);
                        }
                    } else if self.config.auto_smo && len >= self.config.consolidate_threshold {
                        ctx.push(Work::Consolidate(pid));
                    }
                    break;
                }
                Err(_) => {
                    bump(&self.stats.cas_update);
                    pace.step().await;
                    let h = self.table.read(pid, &g);
                    (pid, head, exists) =
                        self.locate_for_update(&g, pid, h, None, key, pace, &mut ctx).await;
                }
            }
        }
        self.finish_op(&g, ctx, pace).await;
    }

    pub async fn range_scan_with(
        &self,
        low: &[u8],
        high: &[u8],
        pace: Pace,
    ) -> Result<Vec<(Key, Value)>, TreeError> {
        if low > high {
            return Err(TreeError::InvalidRange);
        }
        if low == high {
            return Ok(Vec::new());
        }
        Ok(self.scan_with(low, Some(high), pace).await)
    }

    /// Records in `[low, high)`; `None` is unbounded. The result is a
    /// snapshot: every visited node is re-read after collection and the scan
    /// restarts if any of them changed.
    pub async fn scan_with(&self, low: &[u8], high: Option<&[u8]>, pace: Pace) -> Vec<(Key, Value)> {
        let g = self.pin();
        let mut ctx = OpCtx::default();
        let out = self.collect_range(&g, low, high, pace, &mut ctx).await;
        self.finish_op(&g, ctx, pace).await;
        out
    }

    async fn collect_range(
        &self,
        g: &Guard<'_>,
        low: &[u8],
        high: Option<&[u8]>,
        pace: Pace,
        ctx: &mut OpCtx,
    ) -> Vec<(Key, Value)> {
        'attempt: loop {
            let land = self
                .descend(g, Probe::Key(low), 0, pace, ctx)
                .await
                .expect("data level always exists");
            let (mut pid, mut head, mut via_left) = (land.pid, land.head, land.from.is_some());
            let mut visited: Vec<(PageId, *const Node)> = Vec::new();
            let mut out: Vec<(Key, Value)> = Vec::new();
            let mut carry: Vec<(Key, Option<Value>)> = Vec::new();
            let mut first = true;
            loop {
                visited.push((pid, head as *const Node));
                if !via_left {
                    if let Some(m) = dead_notice(head, pid) {
                        pid = m.left;
                        pace.step().await;
                        head = self.table.read(pid, g);
                        continue;
                    }
                }
                let v = leaf_view(head, pid);
                if first && !Probe::Key(low).above_low(v.low.as_deref()) {
                    // Arrived right of `low` through a shared split state.
                    match search_chain(head, pid, low, via_left) {
                        Lookup::Redirect(p) | Lookup::Dead(p) => {
                            pid = p;
                            via_left = false;
                            pace.step().await;
                            head = self.table.read(pid, g);
                            continue;
                        }
                        _ => continue 'attempt,
                    }
                }
                if first && Probe::Key(low).beyond_high(v.high.as_deref()) {
                    pid = v.side.expect("bounded node without side link");
                    via_left = true;
                    pace.step().await;
                    head = self.table.read(pid, g);
                    continue;
                }
                first = false;
                let mut records: std::collections::BTreeMap<Key, Option<Value>> =
                    v.records.into_iter().map(|(k, v)| (k, Some(v))).collect();
                for (k, val) in carry.drain(..) {
                    if Probe::Key(&k).above_low(v.low.as_deref())
                        && !Probe::Key(&k).beyond_high(v.high.as_deref())
                    {
                        records.insert(k, val);
                    }
                }
                for (k, val) in records {
                    if k.as_slice() >= low && high.is_none_or(|h| k.as_slice() < h) {
                        if let Some(val) = val {
                            out.push((k, val));
                        }
                    }
                }
                carry = v.overflow;
                let done = match (v.high.as_deref(), high) {
                    (None, _) => true,
                    (Some(nh), Some(h)) => nh >= h,
                    (Some(_), None) => false,
                };
                if done {
                    break;
                }
                pid = v.side.expect("bounded node without side link");
                via_left = true;
                pace.step().await;
                head = self.table.read(pid, g);
            }
            // One step: a change to an already validated page after its
            // re-read cannot affect the snapshot taken before validation.
            pace.step().await;
            if visited.iter().any(|(p, seen)| !std::ptr::eq(self.table.read(*p, g), *seen)) {
                continue 'attempt;
            }
            return out;
        }
    }

    // ---- consolidation ----------------------------------------------------

    /// Consolidate `pid` if its chain has at least `consolidate_threshold`
    /// data deltas. Returns whether this call installed the cNOTICE.
    pub async fn consolidate_with(&self, pid: PageId, pace: Pace) -> bool {
        let g = self.pin();
        let mut ctx = OpCtx::default();
        let won = self.try_consolidate(&g, pid, pace, &mut ctx).await;
        self.finish_op(&g, ctx, pace).await;
        won
    }

    pub(crate) async fn try_consolidate(
        &self,
        g: &Guard<'_>,
        pid: PageId,
        pace: Pace,
        ctx: &mut OpCtx,
    ) -> bool {
        pace.step().await;
        let Some(head) = self.table.read_checked(pid, g) else {
            return false;
        };
        if matches!(head.body(), Body::Root(_))
            || chain_length(head).data_deltas < self.config.consolidate_threshold
            || blocking_notice(head).is_some()
        {
            return false;
        }
        let new = prepend(&head.share(), notice(NoticeKind::Consolidate, g.epoch().0));
        let cnotice = Arc::as_ptr(&new);
        pace.step().await;
        if self.table.try_install(pid, head, new, g).is_err() {
            bump(&self.stats.consolidation_losses);
            return false;
        }
        if let Some(base) = self.finish_consolidation(g, pid, cnotice, pace).await {
            self.after_consolidation(pid, &base, ctx);
        }
        true
    }

    /// Replace the cNOTICE at `cnotice` and everything below it with a fresh
    /// base, keeping any elements prepended above it. Returns the new base if
    /// this call installed it.
    pub(crate) async fn finish_consolidation(
        &self,
        g: &Guard<'_>,
        pid: PageId,
        cnotice: *const Node,
        pace: Pace,
    ) -> Option<Arc<Node>> {
        let mut built: Option<Arc<Node>> = None;
        loop {
            pace.step().await;
            let cur = self.table.read_checked(pid, g)?;
            let above = elements_above(cur, cnotice)?;
            let base = match &built {
                Some(b) => b.clone(),
                None => {
                    // SAFETY of the deref: `cnotice` is in `cur`'s chain,
                    // which the guard keeps alive.
                    let guarded = unsafe { &*cnotice }.next().expect("notice has a successor");
                    let b = consolidated(guarded, pid);
                    built = Some(b.clone());
                    b
                }
            };
            let new = relink(&above, base.clone());
            pace.step().await;
            if self.table.try_install(pid, cur, new, g).is_ok() {
                bump(&self.stats.consolidations);
                return Some(base);
            }
            bump(&self.stats.cas_consolidate);
        }
    }

    pub(crate) fn after_consolidation(&self, pid: PageId, base: &Node, ctx: &mut OpCtx) {
        if !self.config.auto_smo {
            return;
        }
        let b = base.base_node();
        match &b.entries {
            Entries::Leaf(r) => {
                if r.len() >= self.config.split_threshold {
                    ctx.push(Work::Split(pid));
                } else if r.len() < self.config.merge_threshold && b.low.is_some() {
                    ctx.push(Work::Merge(pid));
                }
            }
            Entries::Index(t) => {
                if t.len() >= self.config.split_threshold {
                    ctx.push(Work::Split(pid));
                }
            }
        }
    }

    // ---- takeover -----------------------------------------------------------

    pub async fn maybe_takeover_with(&self, pid: PageId, pace: Pace) -> bool {
        let g = self.pin();
        let mut ctx = OpCtx::default();
        let done = self.takeover(&g, pid, false, false, pace, &mut ctx).await;
        self.finish_op(&g, ctx, pace).await;
        done
    }

    /// Complete the first stale pending notice in `pid`'s chain. `force`
    /// ignores the timeout. `smo_only` skips cNOTICEs.
    pub(crate) async fn takeover(
        &self,
        g: &Guard<'_>,
        pid: PageId,
        force: bool,
        smo_only: bool,
        pace: Pace,
        ctx: &mut OpCtx,
    ) -> bool {
        pace.step().await;
        let Some(head) = self.table.read_checked(pid, g) else {
            return false;
        };
        let now = self.current_epoch();
        let timeout = self.config.notice_timeout_epochs;
        for n in head.iter() {
            let Body::Notice { notice, .. } = n.body() else { continue };
            if !notice.kind.is_pending() || !(force || notice.owner_epoch + timeout <= now) {
                continue;
            }
            let done = match &notice.kind {
                NoticeKind::Consolidate if smo_only => continue,
                NoticeKind::Consolidate => {
                    match self.finish_consolidation(g, pid, n as *const Node, pace).await {
                        Some(base) => {
                            self.after_consolidation(pid, &base, ctx);
                            true
                        }
                        None => false,
                    }
                }
                NoticeKind::Split(info) => {
                    let info = info.clone();
                    if pid == info.new && !self.split_posted(g, &info, pace).await {
                        // The splitter stopped before installing at O; N is
                        // an orphan nobody can reach.
                        return false;
                    }
                    self.complete_split(g, &info, pace).await;
                    self.post_index_entry(g, info.level + 1, &info.split_key, info.new, pace, ctx)
                        .await;
                    true
                }
                NoticeKind::MergeParent(m)
                | NoticeKind::MergeDead(m)
                | NoticeKind::MergeAbsorb { merge: m, .. } => {
                    let m = m.clone();
                    self.continue_merge(g, &m, pace).await == crate::smo::MergeOutcome::Completed
                }
            };
            if done {
                bump(&self.stats.takeovers);
            }
            return done;
        }
        false
    }

    // ---- follow-up work -----------------------------------------------------

    pub(crate) async fn finish_op(&self, g: &Guard<'_>, mut ctx: OpCtx, pace: Pace) {
        let mut budget = MAX_FOLLOW_UP;
        while budget > 0 && !ctx.work.is_empty() {
            budget -= 1;
            let w = ctx.work.remove(0);
            match w {
                Work::Takeover(pid) => {
                    self.takeover(g, pid, false, false, pace, &mut ctx).await;
                }
                Work::Consolidate(pid) => {
                    self.try_consolidate(g, pid, pace, &mut ctx).await;
                }
                Work::Split(pid) => {
                    self.split_node(g, pid, None, pace, &mut ctx).await;
                }
                Work::Merge(pid) => {
                    self.merge_node(g, pid, pace).await;
                }
                Work::Post { level, sep, child } => {
                    self.post_index_entry(g, level, &sep, child, pace, &mut ctx).await;
                }
            }
        }
        if pace == Pace::Free {
            let n = self.stats.ops.fetch_add(1, Ordering::Relaxed);
            if n.is_multiple_of(ADVANCE_EVERY) {
                self.advance_epoch();
            }
        }
    }

    /// Bring the tree to a settled shape: complete every pending notice,
    /// consolidate every long chain and reclaim retired state. Intended for
    /// single-threaded use between workloads.
    pub fn quiesce(&self) {
        for _ in 0..8 {
            let mut changed = false;
            {
                let g = self.pin();
                for pid in self.table.live_pids() {
                    if pid == ROOT_SLOT {
                        continue;
                    }
                    let mut ctx = OpCtx::default();
                    changed |= run_free(self.takeover(&g, pid, true, false, Pace::Free, &mut ctx));
                    changed |= run_free(self.try_consolidate(&g, pid, Pace::Free, &mut ctx));
                    run_free(self.finish_op(&g, ctx, Pace::Free));
                }
            }
            self.table.collector().drain();
            if !changed {
                break;
            }
        }
    }

    // ---- inspection ---------------------------------------------------------

    /// Every live record, read without helping, installing or counting an
    /// operation. Used by checkers between scheduler steps.
    pub fn snapshot(&self) -> Vec<(Key, Value)> {
        let g = self.pin();
        run_free(self.collect_range(&g, &[], None, Pace::Free, &mut OpCtx::default()))
    }

    /// Point lookup with the same no-side-effect guarantee as [`Tree::snapshot`].
    pub fn peek(&self, key: &[u8]) -> Option<Value> {
        let g = self.pin();
        run_free(self.read_key(&g, key, Pace::Free, &mut OpCtx::default())).map(<[u8]>::to_vec)
    }

    /// Pending notices on all live pages.
    pub fn pending_notices(&self) -> usize {
        let g = self.pin();
        self.table
            .live_pids()
            .into_iter()
            .filter(|p| *p != ROOT_SLOT)
            .filter_map(|p| self.table.read_checked(p, &g))
            .map(|h| {
                h.iter()
                    .filter(|n| n.notice().is_some_and(|x| x.kind.is_pending()))
                    .count()
            })
            .sum()
    }

    /// Height of the tree: 1 for a single data node.
    pub fn height(&self) -> u8 {
        let g = self.pin();
        let root = self.root_pid(&g);
        self.table.read(root, &g).level() + 1
    }

    /// Data and notice counts for a page.
    pub fn chain_length(&self, pid: PageId) -> crate::chain::ChainLength {
        let g = self.pin();
        chain_length(self.table.read(pid, &g))
    }

    /// Pages of the data level from left to right, following side links.
    pub fn data_pages(&self) -> Vec<PageId> {
        let g = self.pin();
        let mut pid = self.root_pid(&g);
        loop {
            let head = self.table.read(pid, &g);
            if head.level() == 0 {
                break;
            }
            let v = index_view(head, pid);
            pid = v.terms[0].1;
        }
        let mut out = vec![pid];
        loop {
            let head = self.table.read(pid, &g);
            match bounds(head, pid).side {
                Some(s) => {
                    out.push(s);
                    pid = s;
                }
                None => break,
            }
        }
        out
    }

    /// Longest data-delta run of any live page.
    pub fn max_data_deltas(&self) -> usize {
        let g = self.pin();
        self.table
            .live_pids()
            .into_iter()
            .filter(|p| *p != ROOT_SLOT)
            .filter_map(|p| self.table.read_checked(p, &g))
            .map(|h| chain_length(h).data_deltas)
            .max()
            .unwrap_or(0)
    }
}

/// A fresh base for the state `guarded` at `pid`. Pending parent merge
/// notices and deltas beyond the node's high key are kept on top.
pub(crate) fn consolidated(guarded: &Node, pid: PageId) -> Arc<Node> {
    if guarded.level() == 0 {
        let v = leaf_view(guarded, pid);
        let base = Node::base(BaseNode {
            level: 0,
            low: v.low,
            high: v.high,
            side: v.side,
            entries: Entries::Leaf(v.records),
        });
        overflow_onto(base, v.overflow)
    } else {
        let v = index_view(guarded, pid);
        let base = Node::base(BaseNode {
            level: v.level,
            low: v.low,
            high: v.high,
            side: v.side,
            entries: Entries::Index(v.terms),
        });
        pending_merges_onto(base, v.merges.iter().filter(|m| !m.is_done()).cloned(), guarded)
    }
}

pub(crate) fn overflow_onto(base: Arc<Node>, overflow: Vec<(Key, Option<Value>)>) -> Arc<Node> {
    overflow.into_iter().fold(base, |acc, (key, v)| {
        let d = match v {
            Some(value) => Delta::Insert { key, value },
            None => Delta::Delete { key },
        };
        prepend(&acc, Element::Delta(d))
    })
}

/// Re-post copies of pending parent merge notices, keeping their original
/// owner epochs.
pub(crate) fn pending_merges_onto(
    base: Arc<Node>,
    merges: impl Iterator<Item = Arc<crate::chain::MergeInfo>>,
    source: &Node,
) -> Arc<Node> {
    let epoch_of = |m: &Arc<crate::chain::MergeInfo>| {
        source
            .iter()
            .find_map(|n| match n.notice() {
                Some(Notice {
                    kind: NoticeKind::MergeParent(x),
                    owner_epoch,
                }) if Arc::ptr_eq(x, m) => Some(*owner_epoch),
                _ => None,
            })
            .unwrap_or(0)
    };
    let mut all: Vec<_> = merges.collect();
    all.reverse();
    all.into_iter().fold(base, |acc, m| {
        let e = epoch_of(&m);
        prepend(&acc, notice(NoticeKind::MergeParent(m), e))
    })
}
