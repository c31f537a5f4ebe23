//! Structure modifications: the sNOTICE split and the three-notice merge.
//!
//! Split of node O:
//!
//! 1. reserve buffer space for both halves and a mapping slot for N;
//! 2. build the sNOTICE (split key, both ids, the reservation) and put a
//!    copy of it into N's fresh slot;
//! 3. install the sNOTICE at O. A loser frees N and has moved nothing;
//! 4. build N's base from the upper half of the guarded state and replace
//!    N's notice with it, keeping deltas posted above the notice;
//! 5. rebuild O from the lower half with N as its side link, then publish
//!    the buffer region;
//! 6. post an index term for N at the parent.
//!
//! Merge of D into its left neighbour L under parent P posts an mNOTICE at
//! P, a dNOTICE at D and an xNOTICE at the node whose side link is D, then
//! replaces the xNOTICE with a base covering both ranges and frees D.

use std::sync::atomic::{AtomicBool, AtomicU8};
use std::sync::Arc;

use thiserror::Error;

use crate::chain::{
    blocking_notice, bounds, dead_notice, elements_above, index_view, leaf_view, merge_stage,
    prepend, relink, route_index, BaseNode, Body, Delta, Element, Entries, Key, MergeInfo, Node,
    NoticeKind, Probe, Route, SplitInfo,
};
use crate::epoch::Guard;
use crate::mapping::PageId;
use crate::step::{run_free, Pace};
use crate::tree::{
    bump, notice, overflow_onto, pending_merges_onto, OpCtx, Tree, Work, ROOT_SLOT,
};

/// Buffer entry kind for the pair of nodes written by a split.
pub const SPLIT_ENTRY: u8 = 1;
/// Re-reads of a node held by a short-lived notice before giving up.
const BUSY_RETRIES: usize = 64;

#[derive(Debug, Clone, Error, PartialEq, Eq, Hash)]
pub enum SmoError {
    #[error("merge not eligible: {0}")]
    Ineligible(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SplitOutcome {
    /// This thread installed the sNOTICE and the split is complete.
    Won { split_key: Key, new: PageId, moved: usize },
    /// Another thread changed the node first; `moved` is always zero.
    Lost { moved: usize },
    /// Too small, busy with another notice, or out of table space.
    Skipped(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergePlan {
    pub parent: PageId,
    pub left: PageId,
    pub dead: PageId,
    pub separator: Key,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MergeOutcome {
    Completed,
    /// Lost the race to install the mNOTICE; nothing changed.
    Lost,
    /// Started but waiting for another notice to clear; any thread may
    /// finish it later.
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostOutcome {
    Posted,
    Present,
    Skipped,
}

fn encode_leaf(out: &mut Vec<u8>, records: &[(Key, Vec<u8>)]) {
    for (k, v) in records {
        out.extend_from_slice(&(k.len() as u32).to_le_bytes());
        out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        out.extend_from_slice(k);
        out.extend_from_slice(v);
    }
}

fn encode_index(out: &mut Vec<u8>, terms: &[(Option<Key>, PageId)]) {
    for (l, c) in terms {
        match l {
            Some(k) => {
                out.extend_from_slice(&(k.len() as u32).to_le_bytes());
                out.extend_from_slice(k);
            }
            None => out.extend_from_slice(&u32::MAX.to_le_bytes()),
        }
        out.extend_from_slice(&c.0.to_le_bytes());
    }
}

/// Both halves of a split, built from the guarded state.
struct Halves {
    lower: Arc<Node>,
    upper: Arc<Node>,
    upper_count: usize,
    image: Vec<u8>,
}

fn halves(s: &Node, info_old: PageId, new: PageId, sk: &[u8]) -> Halves {
    let mut image = Vec::new();
    if s.level() == 0 {
        let v = leaf_view(s, info_old);
        let cut = v.records.partition_point(|(k, _)| k.as_slice() <= sk);
        let (lo, hi) = v.records.split_at(cut);
        encode_leaf(&mut image, lo);
        encode_leaf(&mut image, hi);
        let lower = Node::base(BaseNode {
            level: 0,
            low: v.low.clone(),
            high: Some(sk.to_vec()),
            side: Some(new),
            entries: Entries::Leaf(lo.to_vec()),
        });
        let upper = Node::base(BaseNode {
            level: 0,
            low: Some(sk.to_vec()),
            high: v.high.clone(),
            side: v.side,
            entries: Entries::Leaf(hi.to_vec()),
        });
        Halves {
            lower,
            upper: overflow_onto(upper, v.overflow),
            upper_count: hi.len(),
            image,
        }
    } else {
        let v = index_view(s, info_old);
        let cut = v
            .terms
            .partition_point(|(l, _)| l.as_deref().is_none_or(|l| l < sk));
        let (lo, hi) = v.terms.split_at(cut);
        encode_index(&mut image, lo);
        encode_index(&mut image, hi);
        let lower = Node::base(BaseNode {
            level: v.level,
            low: v.low.clone(),
            high: Some(sk.to_vec()),
            side: Some(new),
            entries: Entries::Index(lo.to_vec()),
        });
        let upper = Node::base(BaseNode {
            level: v.level,
            low: Some(sk.to_vec()),
            high: v.high.clone(),
            side: v.side,
            entries: Entries::Index(hi.to_vec()),
        });
        let pending: Vec<_> = v.pending_merges().cloned().collect();
        let (pl, pu): (Vec<_>, Vec<_>) = pending
            .into_iter()
            .partition(|m| m.merge_low.as_slice() < sk);
        Halves {
            lower: pending_merges_onto(lower, pl.into_iter(), s),
            upper: pending_merges_onto(upper, pu.into_iter(), s),
            upper_count: hi.len(),
            image,
        }
    }
}

/// The element carrying `info`'s sNOTICE and the elements above it.
fn find_split<'a>(head: &'a Node, info: &Arc<SplitInfo>) -> Option<(&'a Node, Vec<&'a Node>)> {
    let target = head.iter().find(|n| {
        matches!(n.notice(), Some(x) if matches!(&x.kind, NoticeKind::Split(i) if Arc::ptr_eq(i, info)))
    })?;
    let above = elements_above(head, target)?;
    Some((target, above))
}

fn find_merge_notice<'a>(
    head: &'a Node,
    m: &Arc<MergeInfo>,
    absorb: bool,
) -> Option<(&'a Node, Vec<&'a Node>)> {
    let target = head.iter().find(|n| match n.notice().map(|x| &x.kind) {
        Some(NoticeKind::MergeAbsorb { merge, .. }) => absorb && Arc::ptr_eq(merge, m),
        Some(NoticeKind::MergeDead(x)) => !absorb && Arc::ptr_eq(x, m),
        _ => false,
    })?;
    let above = elements_above(head, target)?;
    Some((target, above))
}

impl Tree {
    pub fn split(&self, pid: PageId) -> SplitOutcome {
        run_free(self.split_with(pid, None, Pace::Free))
    }

    /// Split at a chosen key instead of the median.
    pub fn split_at(&self, pid: PageId, key: &[u8]) -> SplitOutcome {
        run_free(self.split_with(pid, Some(key), Pace::Free))
    }

    pub fn merge(&self, plan: &MergePlan) -> Result<MergeOutcome, SmoError> {
        run_free(self.merge_with(plan, Pace::Free))
    }

    pub fn plan_merge(&self, dead: PageId) -> Result<MergePlan, SmoError> {
        run_free(self.plan_merge_with(dead, Pace::Free))
    }

    pub fn smo_takeover(&self, pid: PageId) -> bool {
        run_free(self.smo_takeover_with(pid, Pace::Free))
    }

    pub async fn split_with(&self, pid: PageId, key: Option<&[u8]>, pace: Pace) -> SplitOutcome {
        let g = self.pin();
        let mut ctx = OpCtx::default();
        let out = self.split_node(&g, pid, key, pace, &mut ctx).await;
        self.finish_op(&g, ctx, pace).await;
        out
    }

    pub async fn smo_takeover_with(&self, pid: PageId, pace: Pace) -> bool {
        let g = self.pin();
        let mut ctx = OpCtx::default();
        let done = self.takeover(&g, pid, false, true, pace, &mut ctx).await;
        self.finish_op(&g, ctx, pace).await;
        done
    }

    fn choose_split_key(&self, head: &Node, pid: PageId, key: Option<&[u8]>) -> Option<Key> {
        if head.level() == 0 {
            let v = leaf_view(head, pid);
            let n = v.records.len();
            if let Some(k) = key {
                let inside = Probe::Key(k).above_low(v.low.as_deref())
                    && v.records.last().is_some_and(|(last, _)| k < last.as_slice())
                    && v.records.first().is_some_and(|(first, _)| k >= first.as_slice());
                return inside.then(|| k.to_vec());
            }
            if n < 2 {
                return None;
            }
            Some(v.records[(n - 1) / 2].0.clone())
        } else {
            let v = index_view(head, pid);
            let n = v.terms.len();
            if n < 2 {
                return None;
            }
            let blocked = |sep: &[u8]| v.pending_merges().any(|m| m.blocks_separator(sep));
            if let Some(k) = key {
                let ok = v.terms[1..].iter().any(|(l, _)| l.as_deref() == Some(k)) && !blocked(k);
                return ok.then(|| k.to_vec());
            }
            // Candidates nearest the middle first; never index 0.
            let mid = n / 2;
            let mut order: Vec<usize> = (1..n).collect();
            order.sort_by_key(|i| i.abs_diff(mid));
            order.into_iter().find_map(|i| {
                let sep = v.terms[i].0.as_deref()?;
                (!blocked(sep)).then(|| sep.to_vec())
            })
        }
    }

    pub(crate) async fn split_node(
        &self,
        g: &Guard<'_>,
        pid: PageId,
        key: Option<&[u8]>,
        pace: Pace,
        ctx: &mut OpCtx,
    ) -> SplitOutcome {
        let mut lost_cas = false;
        let (sk, level, new, info) = loop {
            pace.step().await;
            let Some(head) = self.table.read_checked(pid, g) else {
                return SplitOutcome::Skipped("page gone");
            };
            if matches!(head.body(), Body::Root(_)) {
                return SplitOutcome::Skipped("root pointer");
            }
            if blocking_notice(head).is_some() || dead_notice(head, pid).is_some() {
                if lost_cas {
                    bump(&self.stats.split_losses);
                    return SplitOutcome::Lost { moved: 0 };
                }
                return SplitOutcome::Skipped("pending notice");
            }
            if key.is_none() {
                let size = if head.level() == 0 {
                    leaf_view(head, pid).records.len()
                } else {
                    index_view(head, pid).terms.len()
                };
                if size < self.config.split_threshold {
                    return SplitOutcome::Skipped("below threshold");
                }
            }
            let Some(sk) = self.choose_split_key(head, pid, key) else {
                return SplitOutcome::Skipped("no usable split key");
            };
            let level = head.level();

            // Step 1: slot for N and buffer space for both halves. Nothing moves.
            let image_len = halves(head, pid, PageId(u32::MAX), &sk).image.len() as u64;
            let reservation = self.reserve(image_len);
            let mut info = None;
            let epoch = g.epoch().0;
            let new = match self.table.allocate_with(|n| {
                // Step 2: the notice, with a copy at N's slot.
                let i = Arc::new(SplitInfo {
                    split_key: sk.clone(),
                    old: pid,
                    new: n,
                    level,
                    reservation,
                    buffer_done: AtomicBool::new(false),
                });
                info = Some(i.clone());
                prepend(&head.share(), notice(NoticeKind::Split(i), epoch))
            }) {
                Ok(n) => n,
                Err(_) => {
                    bump(&self.stats.table_full);
                    return SplitOutcome::Skipped("mapping table full");
                }
            };
            let info = info.expect("allocation ran the initializer");

            // Step 3.
            let s_notice = prepend(&head.share(), notice(NoticeKind::Split(info.clone()), epoch));
            pace.step().await;
            if self.table.try_install(pid, head, s_notice, g).is_err() {
                // Nothing has moved yet. Start over from the new state; if an
                // SMO got there first this call is the loser.
                self.table.free_pid(new, g);
                bump(&self.stats.cas_split);
                lost_cas = true;
                continue;
            }
            bump(&self.stats.split_notices);
            break (sk, level, new, info);
        };

        // Steps 4 and 5.
        let moved = self.complete_split(g, &info, pace).await;
        // Step 6.
        self.post_index_entry(g, level + 1, &sk, new, pace, ctx).await;
        SplitOutcome::Won {
            split_key: sk,
            new,
            moved,
        }
    }

    /// Whether O carries the notice of `info`, or the split already
    /// completed there.
    pub(crate) async fn split_posted(&self, g: &Guard<'_>, info: &Arc<SplitInfo>, pace: Pace) -> bool {
        pace.step().await;
        self.table
            .read_checked(info.old, g)
            .is_some_and(|oh| find_split(oh, info).is_some())
    }

    /// Finish steps 4 and 5 of the split described by `info`. Safe to call
    /// from any number of threads; each step lands once. Returns the records
    /// this call moved into N.
    pub(crate) async fn complete_split(&self, g: &Guard<'_>, info: &Arc<SplitInfo>, pace: Pace) -> usize {
        let mut moved = 0;
        loop {
            pace.step().await;
            let Some(nh) = self.table.read_checked(info.new, g) else { break };
            let Some((elem, above)) = find_split(nh, info) else { break };
            let s = elem.next().expect("notice has a successor");
            let h = halves(s, info.old, info.new, &info.split_key);
            let new = relink(&above, h.upper);
            pace.step().await;
            if self.table.try_install(info.new, nh, new, g).is_ok() {
                moved = h.upper_count;
                self.stats
                    .records_moved
                    .fetch_add(moved as u64, std::sync::atomic::Ordering::Relaxed);
                break;
            }
            bump(&self.stats.cas_split);
        }
        loop {
            pace.step().await;
            let Some(oh) = self.table.read_checked(info.old, g) else { break };
            let Some((elem, above)) = find_split(oh, info) else { break };
            let s = elem.next().expect("notice has a successor");
            let h = halves(s, info.old, info.new, &info.split_key);
            let new = relink(&above, h.lower);
            pace.step().await;
            if self.table.try_install(info.old, oh, new, g).is_ok() {
                bump(&self.stats.splits);
                if let Some(r) = &info.reservation {
                    if !info.buffer_done.swap(true, std::sync::atomic::Ordering::SeqCst) {
                        let id = (info.new.0 as u64) << 32 | info.old.0 as u64;
                        r.segment.write_and_release(&r.ticket, SPLIT_ENTRY, id, &h.image);
                    }
                }
                break;
            }
            bump(&self.stats.cas_split);
        }
        moved
    }

    /// Add the term `(sep, child)` to the index node at `level` covering
    /// `sep`, growing the tree when `level` is above the root. Idempotent.
    pub(crate) async fn post_index_entry(
        &self,
        g: &Guard<'_>,
        level: u8,
        sep: &[u8],
        child: PageId,
        pace: Pace,
        ctx: &mut OpCtx,
    ) -> PostOutcome {
        loop {
            let Some(land) = self.descend(g, Probe::After(sep), level, pace, ctx).await else {
                match self.grow_root(g, level, sep, child, pace).await {
                    Some(out) => return out,
                    None => continue,
                }
            };
            let (mut pid, mut head) = (land.pid, land.head);
            loop {
                match route_index(head, pid, Probe::After(sep)) {
                    Route::Child(_) => break,
                    Route::Redirect(p) | Route::Beyond(p) => {
                        pid = p;
                        pace.step().await;
                        head = self.table.read(pid, g);
                    }
                }
            }
            let v = index_view(head, pid);
            if v.terms.iter().any(|(l, _)| l.as_deref() == Some(sep)) {
                return PostOutcome::Present;
            }
            if v.merges.iter().any(|m| m.merge_low == sep) {
                return PostOutcome::Skipped;
            }
            pace.step().await;
            match self.table.read_checked(child, g) {
                Some(ch) if dead_notice(ch, child).is_none() => {}
                _ => return PostOutcome::Skipped,
            }
            let delta = Delta::IndexEntry {
                low: sep.to_vec(),
                child,
            };
            let new = prepend(&head.share(), Element::Delta(delta));
            let len = crate::chain::chain_length(&new).data_deltas;
            pace.step().await;
            if self.table.try_install(pid, head, new, g).is_ok() {
                bump(&self.stats.index_posts);
                if self.config.auto_smo && len >= self.config.consolidate_threshold {
                    ctx.push(Work::Consolidate(pid));
                }
                return PostOutcome::Posted;
            }
            bump(&self.stats.cas_index);
        }
    }

    /// Install a new root above the current one. `None` means the root
    /// changed underneath and the caller should retry.
    async fn grow_root(
        &self,
        g: &Guard<'_>,
        level: u8,
        sep: &[u8],
        child: PageId,
        pace: Pace,
    ) -> Option<PostOutcome> {
        pace.step().await;
        let root_node = self.table.read(ROOT_SLOT, g);
        let Body::Root(r) = root_node.body() else { unreachable!() };
        let r = *r;
        pace.step().await;
        let rh = self.table.read(r, g);
        if rh.level() + 1 != level {
            return None;
        }
        let b = bounds(rh, r);
        if b.high != Some(sep) || b.side != Some(child) {
            // Some other split of the root must be indexed first; side-link
            // traversals will post it.
            return Some(PostOutcome::Skipped);
        }
        let base = Node::base(BaseNode {
            level,
            low: None,
            high: None,
            side: None,
            entries: Entries::Index(vec![(None, r), (Some(sep.to_vec()), child)]),
        });
        let Ok(new_root) = self.table.allocate_with(|_| base) else {
            bump(&self.stats.table_full);
            return Some(PostOutcome::Skipped);
        };
        pace.step().await;
        if self
            .table
            .try_install(ROOT_SLOT, root_node, Node::new(Body::Root(new_root)), g)
            .is_ok()
        {
            bump(&self.stats.root_growths);
            Some(PostOutcome::Posted)
        } else {
            self.table.free_pid(new_root, g);
            None
        }
    }

    // ---- merge ----------------------------------------------------------------

    pub async fn plan_merge_with(&self, dead: PageId, pace: Pace) -> Result<MergePlan, SmoError> {
        let g = self.pin();
        let mut ctx = OpCtx::default();
        let plan = self.plan(&g, dead, pace, &mut ctx).await;
        plan.map(|(p, _)| p)
    }

    async fn plan<'g>(
        &self,
        g: &'g Guard<'_>,
        dead: PageId,
        pace: Pace,
        ctx: &mut OpCtx,
    ) -> Result<(MergePlan, &'g Node), SmoError> {
        pace.step().await;
        let dh = self
            .table
            .read_checked(dead, g)
            .ok_or(SmoError::Ineligible("page gone"))?;
        if matches!(dh.body(), Body::Root(_)) || dh.level() != 0 {
            return Err(SmoError::Ineligible("only data nodes merge"));
        }
        let Some(low) = bounds(dh, dead).low else {
            return Err(SmoError::Ineligible("leftmost node"));
        };
        let land = self
            .descend(g, Probe::After(low), 1, pace, ctx)
            .await
            .ok_or(SmoError::Ineligible("no parent"))?;
        let (mut pid, mut head) = (land.pid, land.head);
        loop {
            match route_index(head, pid, Probe::After(low)) {
                Route::Child(_) => break,
                Route::Redirect(p) | Route::Beyond(p) => {
                    pid = p;
                    pace.step().await;
                    head = self.table.read(pid, g);
                }
            }
        }
        let v = index_view(head, pid);
        let idx = v
            .terms
            .iter()
            .position(|(l, c)| *c == dead && l.as_deref() == Some(low))
            .ok_or(SmoError::Ineligible("no index term"))?;
        if idx == 0 {
            return Err(SmoError::Ineligible("lowest child of its parent"));
        }
        Ok((
            MergePlan {
                parent: pid,
                left: v.terms[idx - 1].1,
                dead,
                separator: low.to_vec(),
            },
            head,
        ))
    }

    pub async fn merge_with(&self, plan: &MergePlan, pace: Pace) -> Result<MergeOutcome, SmoError> {
        let g = self.pin();
        let out = self.run_merge(&g, plan, pace).await;
        self.finish_op(&g, OpCtx::default(), pace).await;
        out
    }

    pub(crate) async fn merge_node(&self, g: &Guard<'_>, dead: PageId, pace: Pace) {
        let mut ctx = OpCtx::default();
        if let Ok((plan, _)) = self.plan(g, dead, pace, &mut ctx).await {
            let _ = self.run_merge(g, &plan, pace).await;
        }
    }

    async fn run_merge(&self, g: &Guard<'_>, plan: &MergePlan, pace: Pace) -> Result<MergeOutcome, SmoError> {
        pace.step().await;
        let ph = self
            .table
            .read_checked(plan.parent, g)
            .ok_or(SmoError::Ineligible("parent gone"))?;
        if blocking_notice(ph).is_some() {
            return Err(SmoError::Ineligible("parent busy"));
        }
        let v = index_view(ph, plan.parent);
        if v.pending_merges().next().is_some() {
            return Err(SmoError::Ineligible("parent already has a pending merge"));
        }
        let idx = v
            .terms
            .iter()
            .position(|(l, c)| *c == plan.dead && l.as_deref() == Some(plan.separator.as_slice()))
            .ok_or(SmoError::Ineligible("no index term"))?;
        if idx == 0 {
            return Err(SmoError::Ineligible("lowest child of its parent"));
        }
        if v.terms[idx - 1].1 != plan.left {
            return Err(SmoError::Ineligible("left node is not the preceding child"));
        }
        pace.step().await;
        let lh = self.table.read(plan.left, g);
        if blocking_notice(lh).is_some() {
            return Err(SmoError::Ineligible("left node busy"));
        }
        if bounds(lh, plan.left).side != Some(plan.dead) {
            return Err(SmoError::Ineligible("left node does not link to the dead node"));
        }
        pace.step().await;
        let dh = self.table.read(plan.dead, g);
        if blocking_notice(dh).is_some() {
            return Err(SmoError::Ineligible("dead node busy"));
        }
        if dh.level() != 0 {
            return Err(SmoError::Ineligible("only data nodes merge"));
        }
        if leaf_view(dh, plan.dead).records.len() >= self.config.merge_threshold {
            return Err(SmoError::Ineligible("dead node too large"));
        }
        let m = Arc::new(MergeInfo {
            parent: plan.parent,
            left: plan.left,
            dead: plan.dead,
            merge_low: plan.separator.clone(),
            merge_high: bounds(dh, plan.dead).high.map(<[u8]>::to_vec),
            stage: AtomicU8::new(0),
            freed: AtomicBool::new(false),
        });
        // (1) mNOTICE at the parent.
        let new = prepend(&ph.share(), notice(NoticeKind::MergeParent(m.clone()), g.epoch().0));
        pace.step().await;
        if self.table.try_install(plan.parent, ph, new, g).is_err() {
            return Ok(MergeOutcome::Lost);
        }
        m.advance(merge_stage::PARENT_POSTED);
        Ok(self.continue_merge(g, &m, pace).await)
    }

    /// Advance the merge `m` as far as possible. Any thread may call this.
    pub(crate) async fn continue_merge(&self, g: &Guard<'_>, m: &Arc<MergeInfo>, pace: Pace) -> MergeOutcome {
        let epoch = g.epoch().0;
        // (2) dNOTICE at D.
        let mut busy = 0;
        while m.stage() < merge_stage::DEAD_POSTED {
            pace.step().await;
            let dh = self.table.read(m.dead, g);
            if find_merge_notice(dh, m, false).is_some() {
                m.advance(merge_stage::DEAD_POSTED);
                break;
            }
            if blocking_notice(dh).is_some() {
                busy += 1;
                if busy > BUSY_RETRIES || pace == Pace::Stepped {
                    bump(&self.stats.merges_deferred);
                    return MergeOutcome::Deferred;
                }
                continue;
            }
            let new = prepend(&dh.share(), notice(NoticeKind::MergeDead(m.clone()), epoch));
            pace.step().await;
            if self.table.try_install(m.dead, dh, new, g).is_ok() {
                m.advance(merge_stage::DEAD_POSTED);
            }
        }
        // (3) xNOTICE at the node whose side link is D.
        let mut x = m.left;
        busy = 0;
        while m.stage() < merge_stage::ABSORB_POSTED {
            pace.step().await;
            let xh = self.table.read(x, g);
            if find_merge_notice(xh, m, true).is_some() {
                m.advance(merge_stage::ABSORB_POSTED);
                break;
            }
            let b = bounds(xh, x);
            if b.side == Some(m.dead) {
                if blocking_notice(xh).is_some() {
                    busy += 1;
                    if busy > BUSY_RETRIES || pace == Pace::Stepped {
                        bump(&self.stats.merges_deferred);
                        return MergeOutcome::Deferred;
                    }
                    continue;
                }
                pace.step().await;
                let Some(dh) = self.table.read_checked(m.dead, g) else { continue };
                let Some((dn, _)) = find_merge_notice(dh, m, false) else { continue };
                let frozen = dn.next().expect("notice has a successor");
                let fb = bounds(frozen, m.dead);
                let kind = NoticeKind::MergeAbsorb {
                    merge: m.clone(),
                    dead_state: frozen.share(),
                    high: fb.high.map(<[u8]>::to_vec),
                    side: fb.side,
                };
                let new = prepend(&xh.share(), notice(kind, epoch));
                pace.step().await;
                if self.table.try_install(x, xh, new, g).is_ok() {
                    m.advance(merge_stage::ABSORB_POSTED);
                }
            } else if b.high.is_some_and(|h| h < m.merge_low.as_slice()) {
                x = b.side.expect("bounded node without side link");
            } else {
                // `x` already covers D's range: absorption finished.
                m.advance(merge_stage::DONE);
            }
        }
        // (4) merged base replaces the xNOTICE.
        x = m.left;
        while m.stage() < merge_stage::DONE {
            pace.step().await;
            let xh = self.table.read(x, g);
            match find_merge_notice(xh, m, true) {
                Some((xn, above)) => {
                    let v = leaf_view(xn, x);
                    let base = Node::base(BaseNode {
                        level: 0,
                        low: v.low,
                        high: v.high,
                        side: v.side,
                        entries: Entries::Leaf(v.records),
                    });
                    let new = relink(&above, overflow_onto(base, v.overflow));
                    pace.step().await;
                    if self.table.try_install(x, xh, new, g).is_ok() {
                        m.advance(merge_stage::DONE);
                    }
                }
                None => {
                    let b = bounds(xh, x);
                    if b.high.is_some_and(|h| h < m.merge_low.as_slice()) {
                        x = b.side.expect("bounded node without side link");
                    } else {
                        m.advance(merge_stage::DONE);
                    }
                }
            }
        }
        // (5) D is unreachable now.
        if !m.freed.swap(true, std::sync::atomic::Ordering::SeqCst) {
            self.table.free_pid(m.dead, g);
            bump(&self.stats.merges);
        }
        MergeOutcome::Completed
    }
}
