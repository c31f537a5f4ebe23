//! Immutable node states: base nodes, delta records and notices.
//!
//! A node state is a singly linked chain of elements ending in exactly one
//! [`BaseNode`]. Elements are reference counted and never mutated after
//! construction, so a new state shares everything below its new head with
//! the state it replaces. All nodes are created through [`Node::new`] and
//! therefore always live inside an `Arc`.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::log_buffer::Reservation;
use crate::mapping::PageId;

pub type Key = Vec<u8>;
pub type Value = Vec<u8>;

const LIVE: u64 = 0x0B5E_55ED_C0FF_EE00;
/// Canary value written into reclaimed nodes when poisoning is enabled.
pub const POISON: u64 = 0xDEAD_BEEF_DEAD_BEEF;

static SENTINEL_TOUCHES: AtomicU64 = AtomicU64::new(0);

/// Number of times any thread has read through a poisoned node.
pub fn sentinel_touches() -> u64 {
    SENTINEL_TOUCHES.load(Ordering::SeqCst)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChainError {
    #[error("chain holds a redirecting {0} notice; resolve the sharing first")]
    UnresolvedNotice(&'static str),
}

/// One element of a node state.
pub struct Node {
    canary: AtomicU64,
    body: Body,
}

pub enum Body {
    Base(BaseNode),
    Delta { delta: Delta, next: Arc<Node> },
    Notice { notice: Notice, next: Arc<Node> },
    /// Content of the root-pointer slot.
    Root(PageId),
}

pub struct BaseNode {
    /// 0 for data nodes, parents are one above their children.
    pub level: u8,
    /// Exclusive lower bound; `None` is unbounded.
    pub low: Option<Key>,
    /// Inclusive upper bound; `None` is unbounded.
    pub high: Option<Key>,
    /// Right sibling, present whenever `high` is.
    pub side: Option<PageId>,
    pub entries: Entries,
}

pub enum Entries {
    /// Sorted, unique keys.
    Leaf(Vec<(Key, Value)>),
    /// Sorted by exclusive low key; the first term's low equals the node's low.
    Index(Vec<(Option<Key>, PageId)>),
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub enum Delta {
    Insert { key: Key, value: Value },
    Update { key: Key, value: Value },
    Delete { key: Key },
    /// New index term: `child` covers keys above `low`.
    IndexEntry { low: Key, child: PageId },
}

impl Delta {
    pub fn data_key(&self) -> Option<&[u8]> {
        match self {
            Delta::Insert { key, .. } | Delta::Update { key, .. } | Delta::Delete { key } => {
                Some(key)
            }
            Delta::IndexEntry { .. } => None,
        }
    }

    fn data_value(&self) -> Option<Option<&Value>> {
        match self {
            Delta::Insert { value, .. } | Delta::Update { value, .. } => Some(Some(value)),
            Delta::Delete { .. } => Some(None),
            Delta::IndexEntry { .. } => None,
        }
    }
}

#[derive(Clone)]
pub struct Notice {
    pub kind: NoticeKind,
    /// Epoch in which the posting thread was running.
    pub owner_epoch: u64,
}

#[derive(Clone)]
pub enum NoticeKind {
    /// cNOTICE: the poster is consolidating the state below.
    Consolidate,
    /// sNOTICE: the state below is shared by `old` and `new` until the split
    /// completes. Both slots carry their own copy of the notice element; the
    /// copies share this info and the guarded state.
    Split(Arc<SplitInfo>),
    /// mNOTICE at the parent: the index term for `dead` is logically gone and
    /// its key space routes through `left`.
    MergeParent(Arc<MergeInfo>),
    /// dNOTICE at the node being removed; accessors are sent to `left`.
    MergeDead(Arc<MergeInfo>),
    /// xNOTICE at the absorbing left node; guards its state and the frozen
    /// state of the dead node while both are folded together.
    MergeAbsorb {
        merge: Arc<MergeInfo>,
        dead_state: Arc<Node>,
        high: Option<Key>,
        side: Option<PageId>,
    },
}

impl NoticeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoticeKind::Consolidate => "cNOTICE",
            NoticeKind::Split(_) => "sNOTICE",
            NoticeKind::MergeParent(_) => "mNOTICE",
            NoticeKind::MergeDead(_) => "dNOTICE",
            NoticeKind::MergeAbsorb { .. } => "xNOTICE",
        }
    }

    /// A notice is pending until the transformation it announces has been
    /// installed. All but the parent notice disappear from the chain when that
    /// happens; the parent notice stays until the parent is consolidated.
    pub fn is_pending(&self) -> bool {
        match self {
            NoticeKind::MergeParent(m) => !m.is_done(),
            _ => true,
        }
    }
}

pub struct SplitInfo {
    pub split_key: Key,
    pub old: PageId,
    pub new: PageId,
    pub level: u8,
    /// Buffer space for both result nodes, when the buffer could provide it.
    pub reservation: Option<Reservation>,
    pub buffer_done: AtomicBool,
}

/// Merge progress markers.
pub mod merge_stage {
    pub const PARENT_POSTED: u8 = 1;
    pub const DEAD_POSTED: u8 = 2;
    pub const ABSORB_POSTED: u8 = 3;
    pub const DONE: u8 = 4;
}

pub struct MergeInfo {
    pub parent: PageId,
    pub left: PageId,
    pub dead: PageId,
    /// Low bound of the dead node; the separator that disappears.
    pub merge_low: Key,
    /// High bound of the dead node when the merge was planned.
    pub merge_high: Option<Key>,
    pub stage: AtomicU8,
    pub freed: AtomicBool,
}

impl MergeInfo {
    pub fn stage(&self) -> u8 {
        self.stage.load(Ordering::SeqCst)
    }

    pub fn advance(&self, to: u8) {
        crate::step::note_write();
        self.stage.fetch_max(to, Ordering::SeqCst);
    }

    pub fn is_done(&self) -> bool {
        self.stage() >= merge_stage::DONE
    }

    /// Whether `sep` would separate the left and dead nodes.
    pub fn blocks_separator(&self, sep: &[u8]) -> bool {
        sep >= self.merge_low.as_slice()
            && self.merge_high.as_deref().is_none_or(|h| sep < h)
    }
}

impl fmt::Debug for MergeInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MergeInfo")
            .field("parent", &self.parent)
            .field("left", &self.left)
            .field("dead", &self.dead)
            .field("stage", &self.stage())
            .finish()
    }
}

/// Either a delta or a notice, ready to be prepended.
pub enum Element {
    Delta(Delta),
    Notice(Notice),
}

impl Node {
    pub fn new(body: Body) -> Arc<Node> {
        Arc::new(Node {
            canary: AtomicU64::new(LIVE),
            body,
        })
    }

    pub fn base(base: BaseNode) -> Arc<Node> {
        Node::new(Body::Base(base))
    }

    pub fn empty_leaf() -> Arc<Node> {
        Node::base(BaseNode {
            level: 0,
            low: None,
            high: None,
            side: None,
            entries: Entries::Leaf(Vec::new()),
        })
    }

    #[inline]
    fn touch(&self) {
        if self.canary.load(Ordering::Relaxed) != LIVE {
            SENTINEL_TOUCHES.fetch_add(1, Ordering::SeqCst);
        }
    }

    #[inline]
    pub fn body(&self) -> &Body {
        self.touch();
        &self.body
    }

    pub fn is_poisoned(&self) -> bool {
        self.canary.load(Ordering::Relaxed) == POISON
    }

    /// Another strong reference to this node.
    pub fn share(&self) -> Arc<Node> {
        let ptr = self as *const Node;
        // SAFETY: every `Node` is allocated by `Node::new` inside an `Arc`,
        // and `&self` proves the allocation is alive.
        unsafe {
            Arc::increment_strong_count(ptr);
            Arc::from_raw(ptr)
        }
    }

    pub fn next(&self) -> Option<&Node> {
        match self.body() {
            Body::Delta { next, .. } | Body::Notice { next, .. } => Some(next),
            Body::Base(_) | Body::Root(_) => None,
        }
    }

    pub fn notice(&self) -> Option<&Notice> {
        match self.body() {
            Body::Notice { notice, .. } => Some(notice),
            _ => None,
        }
    }

    pub fn iter(&self) -> ChainIter<'_> {
        ChainIter { cur: Some(self) }
    }

    /// The base node terminating this chain.
    pub fn base_node(&self) -> &BaseNode {
        for n in self.iter() {
            if let Body::Base(b) = n.body() {
                return b;
            }
        }
        panic!("chain without base node");
    }

    pub fn level(&self) -> u8 {
        self.base_node().level
    }

    /// Copy of this element on top of a different successor.
    pub fn with_next(&self, next: Arc<Node>) -> Arc<Node> {
        match self.body() {
            Body::Delta { delta, .. } => Node::new(Body::Delta {
                delta: delta.clone(),
                next,
            }),
            Body::Notice { notice, .. } => Node::new(Body::Notice {
                notice: notice.clone(),
                next,
            }),
            Body::Base(_) | Body::Root(_) => panic!("base nodes have no successor"),
        }
    }

    /// Overwrite the canary of this node and of every node below it that is
    /// referenced only from here.
    pub(crate) fn poison_unique(this: &Arc<Node>) {
        if Arc::strong_count(this) != 1 {
            return;
        }
        let mut cur: &Arc<Node> = this;
        loop {
            cur.canary.store(POISON, Ordering::SeqCst);
            let next = match &cur.body {
                Body::Delta { next, .. } | Body::Notice { next, .. } => next,
                _ => break,
            };
            if Arc::strong_count(next) != 1 {
                break;
            }
            cur = next;
        }
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        // Unlink iteratively so long chains do not overflow the stack.
        let mut next = match std::mem::replace(&mut self.body, Body::Root(PageId(0))) {
            Body::Delta { next, .. } | Body::Notice { next, .. } => Some(next),
            _ => None,
        };
        while let Some(arc) = next {
            match Arc::try_unwrap(arc) {
                Ok(mut node) => {
                    next = match std::mem::replace(&mut node.body, Body::Root(PageId(0))) {
                        Body::Delta { next, .. } | Body::Notice { next, .. } => Some(next),
                        _ => None,
                    };
                }
                Err(_) => break,
            }
        }
    }
}

pub struct ChainIter<'a> {
    cur: Option<&'a Node>,
}

impl<'a> Iterator for ChainIter<'a> {
    type Item = &'a Node;

    fn next(&mut self) -> Option<&'a Node> {
        let n = self.cur?;
        self.cur = n.next();
        Some(n)
    }
}

/// Prepend one element to a chain. The old chain is untouched.
pub fn prepend(head: &Arc<Node>, element: Element) -> Arc<Node> {
    let next = head.clone();
    match element {
        Element::Delta(delta) => Node::new(Body::Delta { delta, next }),
        Element::Notice(notice) => Node::new(Body::Notice { notice, next }),
    }
}

/// Copy `above` (listed head first) onto `onto`, preserving order.
pub fn relink(above: &[&Node], onto: Arc<Node>) -> Arc<Node> {
    above.iter().rev().fold(onto, |acc, n| n.with_next(acc))
}

/// Elements strictly above `target`, head first, or `None` if `target` is not
/// in the chain.
pub fn elements_above(head: &Node, target: *const Node) -> Option<Vec<&Node>> {
    let mut above = Vec::new();
    for n in head.iter() {
        if std::ptr::eq(n, target) {
            return Some(above);
        }
        above.push(n);
    }
    None
}

pub fn contains(head: &Node, target: *const Node) -> bool {
    head.iter().any(|n| std::ptr::eq(n, target))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChainLength {
    pub data_deltas: usize,
    pub notices: usize,
}

/// Number of deltas and notices above the base node.
pub fn chain_length(head: &Node) -> ChainLength {
    let mut len = ChainLength::default();
    for n in head.iter() {
        match n.body() {
            Body::Delta { .. } => len.data_deltas += 1,
            Body::Notice { .. } => len.notices += 1,
            _ => {}
        }
    }
    len
}

/// First pending notice in the chain together with the node carrying it.
pub fn pending_notice(head: &Node) -> Option<(&Node, &Notice)> {
    head.iter().find_map(|n| match n.body() {
        Body::Notice { notice, .. } if notice.kind.is_pending() => Some((n, notice)),
        _ => None,
    })
}

/// Pending notices other than parent merge notices.
pub fn blocking_notice(head: &Node) -> Option<(&Node, &Notice)> {
    head.iter().find_map(|n| match n.body() {
        Body::Notice { notice, .. }
            if notice.kind.is_pending() && !matches!(notice.kind, NoticeKind::MergeParent(_)) =>
        {
            Some((n, notice))
        }
        _ => None,
    })
}

/// Effective range and side link of a node as seen from slot `at`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bounds<'a> {
    pub low: Option<&'a [u8]>,
    pub high: Option<&'a [u8]>,
    pub side: Option<PageId>,
}

pub fn bounds(head: &Node, at: PageId) -> Bounds<'_> {
    let mut low: Option<Option<&[u8]>> = None;
    let mut upper: Option<(Option<&[u8]>, Option<PageId>)> = None;
    for n in head.iter() {
        match n.body() {
            Body::Notice { notice, .. } => match &notice.kind {
                NoticeKind::Split(s) if at == s.old => {
                    upper.get_or_insert((Some(&s.split_key), Some(s.new)));
                }
                NoticeKind::Split(s) if at == s.new => {
                    low.get_or_insert(Some(&s.split_key));
                }
                NoticeKind::MergeAbsorb { high, side, .. } => {
                    upper.get_or_insert((high.as_deref(), *side));
                }
                _ => {}
            },
            Body::Base(b) => {
                let (high, side) = upper.unwrap_or((b.high.as_deref(), b.side));
                return Bounds {
                    low: low.unwrap_or(b.low.as_deref()),
                    high,
                    side,
                };
            }
            _ => {}
        }
    }
    panic!("chain without base node")
}

/// The merge that is removing `at`, if its dNOTICE is in the chain.
pub fn dead_notice(head: &Node, at: PageId) -> Option<&Arc<MergeInfo>> {
    head.iter().find_map(|n| match n.body() {
        Body::Notice {
            notice:
                Notice {
                    kind: NoticeKind::MergeDead(m),
                    ..
                },
            ..
        } if m.dead == at => Some(m),
        _ => None,
    })
}

/// Whether any pending notice in the chain is at least `timeout` epochs old.
pub fn has_stale_notice(head: &Node, now: u64, timeout: u64) -> bool {
    head.iter().any(|n| match n.body() {
        Body::Notice { notice, .. } => {
            notice.kind.is_pending() && notice.owner_epoch + timeout <= now
        }
        _ => false,
    })
}

/// Where a key or separator falls relative to node bounds.
#[derive(Debug, Clone, Copy)]
pub enum Probe<'a> {
    /// A data key; a node covers it when `low < key <= high`.
    Key(&'a [u8]),
    /// The range that starts just above a separator; a node covers it when
    /// `low <= sep < high`.
    After(&'a [u8]),
}

impl Probe<'_> {
    /// Strictly beyond bound `b` in the sense of the node range convention.
    #[inline]
    pub fn above(&self, b: &[u8]) -> bool {
        match self {
            Probe::Key(k) => *k > b,
            Probe::After(s) => *s >= b,
        }
    }

    #[inline]
    pub fn above_low(&self, low: Option<&[u8]>) -> bool {
        low.is_none_or(|l| self.above(l))
    }

    #[inline]
    pub fn beyond_high(&self, high: Option<&[u8]>) -> bool {
        high.is_some_and(|h| self.above(h))
    }
}

/// Result of looking a key up in one data node's chain.
#[derive(Debug, PartialEq, Eq)]
pub enum Lookup<'g> {
    Found(&'g [u8]),
    Absent,
    /// Another node owns the key (split sharing).
    Redirect(PageId),
    /// The key lies beyond this node; follow the side link.
    Beyond(PageId),
    /// This node is being merged away; go to the surviving left node.
    Dead(PageId),
}

/// Look up `key` in the chain of data node `at`.
///
/// `via_left` is set when the caller reached `at` through the side link of
/// its left neighbour; a dead node's frozen state is then read directly
/// instead of redirecting back.
pub fn search_chain<'g>(head: &'g Node, at: PageId, key: &[u8], via_left: bool) -> Lookup<'g> {
    let mut bounds: Option<(Option<&'g [u8]>, Option<PageId>)> = None;
    let mut absorb: Option<(&'g Node, PageId)> = None;
    for n in head.iter() {
        match n.body() {
            Body::Delta { delta, .. } => {
                if delta.data_key() == Some(key) {
                    return match delta.data_value() {
                        Some(Some(v)) => Lookup::Found(v),
                        _ => Lookup::Absent,
                    };
                }
            }
            Body::Notice { notice, .. } => match &notice.kind {
                NoticeKind::Consolidate | NoticeKind::MergeParent(_) => {}
                NoticeKind::Split(s) => {
                    if at == s.old {
                        if key > s.split_key.as_slice() {
                            return Lookup::Redirect(s.new);
                        }
                        bounds.get_or_insert((Some(&s.split_key), Some(s.new)));
                    } else if at == s.new && key <= s.split_key.as_slice() {
                        return Lookup::Redirect(s.old);
                    }
                }
                NoticeKind::MergeDead(m) => {
                    if !via_left && at == m.dead {
                        return Lookup::Dead(m.left);
                    }
                }
                NoticeKind::MergeAbsorb {
                    merge,
                    dead_state,
                    high,
                    side,
                } => {
                    bounds.get_or_insert((high.as_deref(), *side));
                    absorb.get_or_insert((dead_state, merge.dead));
                }
            },
            Body::Base(b) => {
                let (high, side) = bounds.unwrap_or((b.high.as_deref(), b.side));
                if Probe::Key(key).beyond_high(high) {
                    return Lookup::Beyond(side.expect("bounded node without side link"));
                }
                if Probe::Key(key).beyond_high(b.high.as_deref()) {
                    if let Some((dead_state, dead)) = absorb {
                        return search_chain(dead_state, dead, key, true);
                    }
                }
                let Entries::Leaf(records) = &b.entries else {
                    panic!("data lookup reached an index node");
                };
                return match records.binary_search_by(|(k, _)| k.as_slice().cmp(key)) {
                    Ok(i) => Lookup::Found(&records[i].1),
                    Err(_) => Lookup::Absent,
                };
            }
            Body::Root(_) => panic!("root pointer inside a chain"),
        }
    }
    unreachable!("chain without base node")
}

/// Result of routing through one index node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Child(PageId),
    Redirect(PageId),
    Beyond(PageId),
}

/// Pick the child of index node `at` responsible for `probe`.
pub fn route_index(head: &Node, at: PageId, probe: Probe<'_>) -> Route {
    let mut bounds: Option<(Option<&[u8]>, Option<PageId>)> = None;
    let mut removed: Vec<&[u8]> = Vec::new();
    let mut best: Option<(&[u8], PageId)> = None;
    for n in head.iter() {
        match n.body() {
            Body::Delta { delta, .. } => {
                if let Delta::IndexEntry { low, child } = delta {
                    if probe.above(low)
                        && !removed.contains(&low.as_slice())
                        && best.is_none_or(|(b, _)| low.as_slice() > b)
                    {
                        best = Some((low, *child));
                    }
                }
            }
            Body::Notice { notice, .. } => match &notice.kind {
                NoticeKind::MergeParent(m) => removed.push(&m.merge_low),
                NoticeKind::Split(s) => {
                    if at == s.old {
                        if probe.above(&s.split_key) {
                            return Route::Redirect(s.new);
                        }
                        bounds.get_or_insert((Some(&s.split_key), Some(s.new)));
                    } else if at == s.new && !probe.above(&s.split_key) {
                        return Route::Redirect(s.old);
                    }
                }
                NoticeKind::Consolidate => {}
                NoticeKind::MergeDead(_) | NoticeKind::MergeAbsorb { .. } => {
                    panic!("data-node merge notice on an index node")
                }
            },
            Body::Base(b) => {
                let (high, side) = bounds.unwrap_or((b.high.as_deref(), b.side));
                if probe.beyond_high(high) {
                    return Route::Beyond(side.expect("bounded node without side link"));
                }
                let Entries::Index(terms) = &b.entries else {
                    panic!("index routing reached a data node");
                };
                let mut idx = terms.partition_point(|(low, _)| probe.above_low(low.as_deref()));
                let base_pick = loop {
                    if idx == 0 {
                        break None;
                    }
                    idx -= 1;
                    let (low, child) = &terms[idx];
                    match low {
                        Some(l) if removed.contains(&l.as_slice()) => continue,
                        _ => break Some((low.as_deref(), *child)),
                    }
                };
                return match (best, base_pick) {
                    (Some((dl, dc)), Some((Some(bl), _))) if dl > bl => Route::Child(dc),
                    (Some((_, dc)), Some((None, _))) => Route::Child(dc),
                    (_, Some((_, bc))) => Route::Child(bc),
                    (Some((_, dc)), None) => Route::Child(dc),
                    (None, None) => panic!("index node without a covering term"),
                };
            }
            Body::Root(_) => panic!("root pointer inside a chain"),
        }
    }
    unreachable!("chain without base node")
}

/// Logical content of a data node as seen from mapping-table slot `at`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafView {
    pub low: Option<Key>,
    pub high: Option<Key>,
    pub side: Option<PageId>,
    /// Live records inside `(low, high]`, sorted.
    pub records: Vec<(Key, Value)>,
    /// Deltas for keys above `high`, posted while the right neighbour is
    /// being merged into this node. Newest binding per key, sorted.
    pub overflow: Vec<(Key, Option<Value>)>,
}

pub fn leaf_view(head: &Node, at: PageId) -> LeafView {
    let mut decided: BTreeMap<&[u8], Option<&Value>> = BTreeMap::new();
    let mut low: Option<Option<&Key>> = None;
    let mut bounds: Option<(Option<&Key>, Option<PageId>)> = None;
    let mut absorb: Option<(&Node, PageId)> = None;
    let mut base: Option<&BaseNode> = None;
    // Set when the upper bound comes from a pending split: records above it
    // live on in the new node's copy.
    let mut split_high = false;
    for n in head.iter() {
        match n.body() {
            Body::Delta { delta, .. } => {
                if let (Some(k), Some(v)) = (delta.data_key(), delta.data_value()) {
                    decided.entry(k).or_insert(v);
                }
            }
            Body::Notice { notice, .. } => match &notice.kind {
                NoticeKind::Split(s) => {
                    if at == s.old {
                        if bounds.is_none() {
                            split_high = true;
                        }
                        bounds.get_or_insert((Some(&s.split_key), Some(s.new)));
                    } else if at == s.new {
                        low.get_or_insert(Some(&s.split_key));
                    }
                }
                NoticeKind::MergeAbsorb {
                    merge,
                    dead_state,
                    high,
                    side,
                } => {
                    bounds.get_or_insert((high.as_ref(), *side));
                    absorb.get_or_insert((dead_state, merge.dead));
                }
                NoticeKind::Consolidate | NoticeKind::MergeDead(_) | NoticeKind::MergeParent(_) => {}
            },
            Body::Base(b) => base = Some(b),
            Body::Root(_) => panic!("root pointer inside a chain"),
        }
    }
    let base = base.expect("chain without base node");
    let Entries::Leaf(records) = &base.entries else {
        panic!("leaf view of an index node");
    };
    for (k, v) in records {
        decided.entry(k).or_insert(Some(v));
    }
    let frozen = absorb.map(|(state, dead)| leaf_view(state, dead));
    let low = low.unwrap_or(base.low.as_ref()).cloned();
    let (high, side) = bounds.unwrap_or((base.high.as_ref(), base.side));
    let high = high.cloned();
    let mut view = LeafView {
        low,
        high,
        side,
        records: Vec::new(),
        overflow: Vec::new(),
    };
    let mut merged: BTreeMap<&[u8], Option<&Value>> = decided;
    if let Some(f) = &frozen {
        for (k, v) in &f.records {
            merged.entry(k).or_insert(Some(v));
        }
    }
    for (k, v) in merged {
        if !Probe::Key(k).above_low(view.low.as_deref()) {
            continue;
        }
        if Probe::Key(k).beyond_high(view.high.as_deref()) {
            if !split_high {
                view.overflow.push((k.to_vec(), v.cloned()));
            }
        } else if let Some(v) = v {
            view.records.push((k.to_vec(), v.clone()));
        }
    }
    view
}

/// Logical content of an index node.
#[derive(Clone)]
pub struct IndexView {
    pub level: u8,
    pub low: Option<Key>,
    pub high: Option<Key>,
    pub side: Option<PageId>,
    pub terms: Vec<(Option<Key>, PageId)>,
    /// Parent merge notices found in the chain, newest first.
    pub merges: Vec<Arc<MergeInfo>>,
}

impl IndexView {
    pub fn pending_merges(&self) -> impl Iterator<Item = &Arc<MergeInfo>> {
        self.merges.iter().filter(|m| !m.is_done())
    }
}

pub fn index_view(head: &Node, at: PageId) -> IndexView {
    let mut removed: BTreeSet<&[u8]> = BTreeSet::new();
    let mut decided: BTreeMap<Option<&[u8]>, PageId> = BTreeMap::new();
    let mut merges = Vec::new();
    let mut low: Option<Option<&Key>> = None;
    let mut bounds: Option<(Option<&Key>, Option<PageId>)> = None;
    let mut base = None;
    for n in head.iter() {
        match n.body() {
            Body::Delta { delta, .. } => {
                if let Delta::IndexEntry { low, child } = delta {
                    if !removed.contains(low.as_slice()) {
                        decided.entry(Some(low.as_slice())).or_insert(*child);
                    }
                }
            }
            Body::Notice { notice, .. } => match &notice.kind {
                NoticeKind::MergeParent(m) => {
                    removed.insert(&m.merge_low);
                    merges.push(m.clone());
                }
                NoticeKind::Split(s) => {
                    if at == s.old {
                        bounds.get_or_insert((Some(&s.split_key), Some(s.new)));
                    } else if at == s.new {
                        low.get_or_insert(Some(&s.split_key));
                    }
                }
                NoticeKind::Consolidate => {}
                NoticeKind::MergeDead(_) | NoticeKind::MergeAbsorb { .. } => {
                    panic!("data-node merge notice on an index node")
                }
            },
            Body::Base(b) => base = Some(b),
            Body::Root(_) => panic!("root pointer inside a chain"),
        }
    }
    let base = base.expect("chain without base node");
    let Entries::Index(terms) = &base.entries else {
        panic!("index view of a data node");
    };
    for (l, c) in terms {
        if let Some(k) = l {
            if removed.contains(k.as_slice()) {
                continue;
            }
        }
        decided.entry(l.as_deref()).or_insert(*c);
    }
    let low = low.unwrap_or(base.low.as_ref()).cloned();
    let (high, side) = bounds.unwrap_or((base.high.as_ref(), base.side));
    let high = high.cloned();
    let terms = decided
        .into_iter()
        .filter(|(l, _)| match (l, low.as_deref()) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some(t), Some(nl)) => *t >= nl,
        })
        .filter(|(l, _)| match (l, high.as_deref()) {
            (_, None) | (None, _) => true,
            (Some(t), Some(h)) => *t < h,
        })
        .map(|(l, c)| (l.map(<[u8]>::to_vec), c))
        .collect();
    IndexView {
        level: base.level,
        low,
        high,
        side,
        terms,
        merges,
    }
}

/// Fully applied record set of a chain that holds no redirecting notice.
pub fn logical_view(head: &Node) -> Result<Vec<(Key, Value)>, ChainError> {
    for n in head.iter() {
        if let Body::Notice { notice, .. } = n.body() {
            match notice.kind {
                NoticeKind::Split(_) | NoticeKind::MergeDead(_) => {
                    return Err(ChainError::UnresolvedNotice(notice.kind.name()))
                }
                _ => {}
            }
        }
    }
    // No split notice means the slot id does not influence the view.
    Ok(leaf_view(head, PageId(u32::MAX)).records)
}

/// Content hash of the whole chain, used to check that guarded state is
/// never altered.
pub fn checksum(head: &Node) -> u64 {
    let mut h = DefaultHasher::new();
    for n in head.iter() {
        match n.body() {
            Body::Delta { delta, .. } => {
                0u8.hash(&mut h);
                delta.hash(&mut h);
            }
            Body::Notice { notice, .. } => {
                1u8.hash(&mut h);
                notice.kind.name().hash(&mut h);
                notice.owner_epoch.hash(&mut h);
            }
            Body::Base(b) => {
                2u8.hash(&mut h);
                b.level.hash(&mut h);
                b.low.hash(&mut h);
                b.high.hash(&mut h);
                b.side.hash(&mut h);
                match &b.entries {
                    Entries::Leaf(r) => r.hash(&mut h),
                    Entries::Index(t) => t.hash(&mut h),
                }
            }
            Body::Root(p) => p.hash(&mut h),
        }
    }
    h.finish()
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut list = f.debug_list();
        for n in self.iter() {
            match n.body() {
                Body::Delta { delta, .. } => list.entry(delta),
                Body::Notice { notice, .. } => list.entry(&notice.kind.name()),
                Body::Base(b) => list.entry(b),
                Body::Root(p) => list.entry(&format_args!("root->{p:?}")),
            };
        }
        list.finish()
    }
}

impl fmt::Debug for Delta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Delta::Insert { key, value } => write!(f, "ins({key:?}={value:?})"),
            Delta::Update { key, value } => write!(f, "upd({key:?}={value:?})"),
            Delta::Delete { key } => write!(f, "del({key:?})"),
            Delta::IndexEntry { low, child } => write!(f, "term({low:?}->{child:?})"),
        }
    }
}

impl fmt::Debug for BaseNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = match &self.entries {
            Entries::Leaf(r) => r.len(),
            Entries::Index(t) => t.len(),
        };
        write!(
            f,
            "base(l{} {:?}..={:?} side={:?} n={})",
            self.level, self.low, self.high, self.side, n
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k(n: u32) -> Key {
        n.to_be_bytes().to_vec()
    }

    fn leaf(records: &[(u32, u32)]) -> Arc<Node> {
        Node::base(BaseNode {
            level: 0,
            low: None,
            high: None,
            side: None,
            entries: Entries::Leaf(records.iter().map(|(a, b)| (k(*a), k(*b))).collect()),
        })
    }

    fn put(head: &Arc<Node>, key: u32, v: u32) -> Arc<Node> {
        prepend(
            head,
            Element::Delta(Delta::Insert {
                key: k(key),
                value: k(v),
            }),
        )
    }

    fn del(head: &Arc<Node>, key: u32) -> Arc<Node> {
        prepend(head, Element::Delta(Delta::Delete { key: k(key) }))
    }

    fn notice(head: &Arc<Node>, kind: NoticeKind) -> Arc<Node> {
        prepend(
            head,
            Element::Notice(Notice {
                kind,
                owner_epoch: 0,
            }),
        )
    }

    const AT: PageId = PageId(1);

    #[test]
    fn prepend_insert_on_base() {
        let b = leaf(&[(1, 1)]);
        let c = put(&b, 2, 2);
        assert_eq!(chain_length(&c).data_deltas, 1);
        assert_eq!(
            logical_view(&c).unwrap(),
            vec![(k(1), k(1)), (k(2), k(2))]
        );
        // The original base chain is untouched.
        assert_eq!(logical_view(&b).unwrap(), vec![(k(1), k(1))]);
    }

    #[test]
    fn prepend_twice_keeps_old_chain() {
        let b = leaf(&[(1, 1)]);
        let c1 = put(&b, 2, 2);
        let before = checksum(&c1);
        let c2 = put(&c1, 3, 3);
        assert_eq!(chain_length(&c2).data_deltas, 2);
        assert_eq!(checksum(&c1), before);
        assert_eq!(logical_view(&c1).unwrap().len(), 2);
    }

    #[test]
    fn reads_through_cnotice_unchanged() {
        let b = leaf(&[(1, 1), (2, 2)]);
        let c = put(&b, 3, 3);
        let guarded = notice(&c, NoticeKind::Consolidate);
        let above = put(&guarded, 4, 4);
        for key in 0..6 {
            let below = search_chain(&c, AT, &k(key), false);
            if key == 4 {
                assert_eq!(search_chain(&above, AT, &k(key), false), Lookup::Found(&k(4)[..]));
            } else {
                assert_eq!(search_chain(&above, AT, &k(key), false), below);
                assert_eq!(search_chain(&guarded, AT, &k(key), false), below);
            }
        }
    }

    #[test]
    fn delete_shadows_base() {
        let c = del(&leaf(&[(1, 1)]), 1);
        assert_eq!(search_chain(&c, AT, &k(1), false), Lookup::Absent);
    }

    #[test]
    fn update_then_delete_view() {
        let b = leaf(&[(1, 1), (2, 2)]);
        let c = del(&b, 2);
        let c = prepend(
            &c,
            Element::Delta(Delta::Update {
                key: k(1),
                value: k(9),
            }),
        );
        assert_eq!(logical_view(&c).unwrap(), vec![(k(1), k(9))]);
    }

    fn split_info(split: u32) -> Arc<SplitInfo> {
        Arc::new(SplitInfo {
            split_key: k(split),
            old: PageId(1),
            new: PageId(2),
            level: 0,
            reservation: None,
            buffer_done: AtomicBool::new(false),
        })
    }

    #[test]
    fn split_notice_redirects_upper_keys() {
        let base = leaf(&(1..=10).map(|i| (i, i)).collect::<Vec<_>>());
        let s = notice(&base, NoticeKind::Split(split_info(5)));
        assert_eq!(search_chain(&s, PageId(1), &k(8), false), Lookup::Redirect(PageId(2)));
        assert_eq!(search_chain(&s, PageId(1), &k(3), false), Lookup::Found(&k(3)[..]));
        // From the new node the shared state serves the upper half.
        assert_eq!(search_chain(&s, PageId(2), &k(8), false), Lookup::Found(&k(8)[..]));
        assert_eq!(search_chain(&s, PageId(2), &k(3), false), Lookup::Redirect(PageId(1)));
        let old = leaf_view(&s, PageId(1));
        assert_eq!(old.records.len(), 5);
        assert_eq!(old.high, Some(k(5)));
        assert_eq!(old.side, Some(PageId(2)));
        let new = leaf_view(&s, PageId(2));
        assert_eq!(new.records.len(), 5);
        assert_eq!(new.low, Some(k(5)));
        assert_eq!(new.high, None);
        assert!(logical_view(&s).is_err());
    }

    #[test]
    fn chain_length_counts_notices_separately() {
        let b = leaf(&[]);
        assert_eq!(chain_length(&b), ChainLength::default());
        let c = put(&put(&b, 1, 1), 2, 2);
        let c = notice(&c, NoticeKind::Consolidate);
        assert_eq!(
            chain_length(&c),
            ChainLength {
                data_deltas: 2,
                notices: 1
            }
        );
    }

    #[test]
    fn index_routing_with_entries_and_removal() {
        let base = Node::base(BaseNode {
            level: 1,
            low: None,
            high: None,
            side: None,
            entries: Entries::Index(vec![(None, PageId(10)), (Some(k(100)), PageId(11))]),
        });
        let with_entry = prepend(
            &base,
            Element::Delta(Delta::IndexEntry {
                low: k(50),
                child: PageId(12),
            }),
        );
        assert_eq!(route_index(&with_entry, AT, Probe::Key(&k(10))), Route::Child(PageId(10)));
        assert_eq!(route_index(&with_entry, AT, Probe::Key(&k(50))), Route::Child(PageId(10)));
        assert_eq!(route_index(&with_entry, AT, Probe::Key(&k(51))), Route::Child(PageId(12)));
        assert_eq!(route_index(&with_entry, AT, Probe::After(&k(50))), Route::Child(PageId(12)));
        assert_eq!(route_index(&with_entry, AT, Probe::Key(&k(101))), Route::Child(PageId(11)));
        let merge = Arc::new(MergeInfo {
            parent: AT,
            left: PageId(12),
            dead: PageId(11),
            merge_low: k(100),
            merge_high: None,
            stage: AtomicU8::new(merge_stage::PARENT_POSTED),
            freed: AtomicBool::new(false),
        });
        let m = notice(&with_entry, NoticeKind::MergeParent(merge));
        assert_eq!(route_index(&m, AT, Probe::Key(&k(101))), Route::Child(PageId(12)));
        let view = index_view(&m, AT);
        assert_eq!(
            view.terms,
            vec![(None, PageId(10)), (Some(k(50)), PageId(12))]
        );
        assert_eq!(view.pending_merges().count(), 1);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Put(u8, u8),
        Del(u8),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..24, any::<u8>()).prop_map(|(a, b)| Op::Put(a, b)),
            (0u8..24).prop_map(Op::Del),
        ]
    }

    proptest! {
        // Chains of up to 32 deltas agree with a sorted-map replay.
        #[test]
        fn chain_matches_sorted_map(
            base in proptest::collection::btree_map(0u8..24, any::<u8>(), 0..12),
            ops in proptest::collection::vec(op(), 0..32),
        ) {
            let mut oracle: BTreeMap<Key, Value> =
                base.iter().map(|(a, b)| (vec![*a], vec![*b])).collect();
            let mut head = Node::base(BaseNode {
                level: 0, low: None, high: None, side: None,
                entries: Entries::Leaf(oracle.clone().into_iter().collect()),
            });
            for o in &ops {
                head = match o {
                    Op::Put(a, b) => {
                        oracle.insert(vec![*a], vec![*b]);
                        prepend(&head, Element::Delta(Delta::Insert { key: vec![*a], value: vec![*b] }))
                    }
                    Op::Del(a) => {
                        oracle.remove(&vec![*a]);
                        prepend(&head, Element::Delta(Delta::Delete { key: vec![*a] }))
                    }
                };
            }
            let view = logical_view(&head).unwrap();
            prop_assert_eq!(&view, &oracle.clone().into_iter().collect::<Vec<_>>());
            for probe in 0u8..26 {
                let got = match search_chain(&head, AT, &[probe], false) {
                    Lookup::Found(v) => Some(v.to_vec()),
                    Lookup::Absent => None,
                    other => panic!("unexpected {other:?}"),
                };
                prop_assert_eq!(got.as_ref(), oracle.get(&vec![probe]));
                let in_view = view.iter().find(|(kk, _)| kk == &vec![probe]).map(|(_, v)| v.clone());
                prop_assert_eq!(got, in_view);
            }
        }

        // A consolidation notice never changes any lookup.
        #[test]
        fn cnotice_is_transparent(
            ops in proptest::collection::vec(op(), 0..16),
        ) {
            let mut head = Node::empty_leaf();
            for o in &ops {
                head = match o {
                    Op::Put(a, b) => prepend(&head, Element::Delta(Delta::Insert { key: vec![*a], value: vec![*b] })),
                    Op::Del(a) => prepend(&head, Element::Delta(Delta::Delete { key: vec![*a] })),
                };
            }
            let before = checksum(&head);
            let guarded = notice(&head, NoticeKind::Consolidate);
            for probe in 0u8..26 {
                prop_assert_eq!(
                    search_chain(&head, AT, &[probe], false),
                    search_chain(&guarded, AT, &[probe], false)
                );
            }
            prop_assert_eq!(checksum(&head), before);
        }
    }
}
