//! Protocol invariants evaluated between scheduler steps and after each
//! complete schedule.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use super::{linearize::linearizable, Final, OpDesc, Outcome, Role};
use crate::chain::{
    checksum, dead_notice, merge_stage, route_index, sentinel_touches, Key, MergeInfo, NoticeKind,
    Probe, Route, Value,
};
use crate::mapping::PageId;
use crate::smo::SplitOutcome;
use crate::tree::{StatsSnapshot, Tree, ROOT_SLOT};

pub const KEY_SET: &str = "key-set preservation";
pub const GUARD: &str = "guard inviolability";
pub const PATH: &str = "notice path-coverage";
pub const EPOCH: &str = "epoch safety";
pub const LINEAR: &str = "no lost update";
pub const WINNER: &str = "winner uniqueness";
pub const LOSER: &str = "loser moved no data";
pub const SCENARIO: &str = "scenario check";
pub const PROGRESS: &str = "non-blocking progress";
pub const SELF_TEST: &str = "self-test";

pub type Failure = (&'static str, String);

pub(crate) struct CheckState {
    initial: BTreeMap<Key, Value>,
    universe: BTreeSet<Key>,
    notices: HashMap<usize, u64>,
    sentinel: u64,
    pub(crate) stats: StatsSnapshot,
}

fn snapshot(tree: &Tree) -> BTreeMap<Key, Value> {
    tree.snapshot().into_iter().collect()
}

impl CheckState {
    pub(crate) fn new(tree: &Tree, roles: &[Role]) -> Self {
        let initial = snapshot(tree);
        let mut universe: BTreeSet<Key> = initial.keys().cloned().collect();
        for r in roles {
            if let Role::Op(OpDesc::Get(k) | OpDesc::Upsert(k, _) | OpDesc::Delete(k)) = r {
                universe.insert(k.clone());
            }
        }
        let mut s = Self {
            initial,
            universe,
            notices: HashMap::new(),
            sentinel: sentinel_touches(),
            stats: tree.stats().snapshot(),
        };
        s.record_notices(tree).expect("fresh scenario state");
        s
    }

    /// Values `key` may hold once the machines in `started` have begun.
    fn allowed(&self, key: &Key, roles: &[Role], started: &[bool]) -> Vec<Option<Value>> {
        let mut out = vec![self.initial.get(key).cloned()];
        for (r, s) in roles.iter().zip(started) {
            if let (Role::Op(op), true) = (r, *s) {
                if let Some((k, v)) = op.write() {
                    if k == key {
                        out.push(v.cloned());
                    }
                }
            }
        }
        out
    }

    pub(crate) fn on_step(
        &mut self,
        tree: &Tree,
        roles: &[Role],
        started: &[bool],
        changed: bool,
    ) -> Result<(), Failure> {
        if changed {
            self.key_set(tree, roles, started)?;
            self.record_notices(tree)?;
            path_coverage(tree)?;
        }
        if sentinel_touches() != self.sentinel {
            return Err((EPOCH, "a reader touched reclaimed state".into()));
        }
        Ok(())
    }

    fn key_set(&self, tree: &Tree, roles: &[Role], started: &[bool]) -> Result<(), Failure> {
        let snap = snapshot(tree);
        for k in snap.keys() {
            if !self.universe.contains(k) {
                return Err((KEY_SET, format!("unknown key {k:?} appeared")));
            }
        }
        for k in &self.universe {
            let allowed = self.allowed(k, roles, started);
            let seen = snap.get(k).cloned();
            if !allowed.contains(&seen) {
                return Err((KEY_SET, format!("scan sees {k:?} = {seen:?}, allowed {allowed:?}")));
            }
            let got = tree.peek(k);
            if !allowed.contains(&got) {
                return Err((KEY_SET, format!("lookup of {k:?} = {got:?}, allowed {allowed:?}")));
            }
        }
        Ok(())
    }

    /// The state under every notice must hash the same for as long as the
    /// notice is present.
    fn record_notices(&mut self, tree: &Tree) -> Result<(), Failure> {
        let g = tree.pin();
        let mut seen = HashSet::new();
        for pid in tree.table().live_pids() {
            if pid == ROOT_SLOT {
                continue;
            }
            for n in tree.table().read(pid, &g).iter() {
                let (Some(notice), Some(below)) = (n.notice(), n.next()) else { continue };
                let addr = n as *const _ as usize;
                let sum = checksum(below);
                seen.insert(addr);
                match self.notices.insert(addr, sum) {
                    Some(prev) if prev != sum => {
                        return Err((
                            GUARD,
                            format!("state under {} at {pid:?} changed", notice.kind.name()),
                        ))
                    }
                    _ => {}
                }
            }
        }
        self.notices.retain(|a, _| seen.contains(a));
        Ok(())
    }

    pub(crate) fn on_finish(
        &self,
        tree: &Tree,
        roles: &[Role],
        outcomes: &[Outcome],
        spans: &[(usize, usize)],
    ) -> Result<(), Failure> {
        let fin = snapshot(tree);
        for k in &self.universe {
            if tree.peek(k) != fin.get(k).cloned() {
                return Err((KEY_SET, format!("{k:?} unreachable from the root")));
            }
        }
        let history: Vec<_> = roles
            .iter()
            .zip(outcomes)
            .zip(spans)
            .filter_map(|((r, o), s)| match r {
                Role::Op(op) => Some((op.clone(), o.clone(), s.0, s.1)),
                _ => None,
            })
            .collect();
        if !linearizable(&self.initial, &history, &fin) {
            return Err((LINEAR, format!("history {history:?} ends in {fin:?}")));
        }
        winners(roles, outcomes)?;
        let stats = tree.stats().snapshot().since(&self.stats);
        let mergers: HashSet<PageId> = roles
            .iter()
            .filter_map(|r| match r {
                Role::Merge(d) => Some(*d),
                _ => None,
            })
            .collect();
        if stats.merges > mergers.len().max(1) as u64 {
            return Err((WINNER, format!("{} merges completed", stats.merges)));
        }
        Ok(())
    }

    pub(crate) fn finished<'a>(&self, tree: &'a Tree, roles: &'a [Role], outcomes: &'a [Outcome]) -> Final<'a> {
        Final {
            tree,
            roles,
            outcomes,
            stats: tree.stats().snapshot().since(&self.stats),
        }
    }
}

fn winners(roles: &[Role], outcomes: &[Outcome]) -> Result<(), Failure> {
    let mut cons: HashMap<PageId, usize> = HashMap::new();
    let mut splits: HashMap<PageId, usize> = HashMap::new();
    for (r, o) in roles.iter().zip(outcomes) {
        match (r, o) {
            (Role::Consolidate(p), Outcome::Flag(true)) => *cons.entry(*p).or_default() += 1,
            (Role::Split(p), Outcome::Split(SplitOutcome::Won { .. })) => *splits.entry(*p).or_default() += 1,
            (Role::Split(_), Outcome::Split(SplitOutcome::Lost { moved })) if *moved != 0 => {
                return Err((LOSER, format!("split loser moved {moved} records")));
            }
            _ => {}
        }
    }
    if let Some((p, n)) = cons.iter().chain(&splits).find(|(_, n)| **n > 1) {
        return Err((WINNER, format!("{n} winners on {p:?}")));
    }
    Ok(())
}

/// Every pending merge keeps D's data behind a notice on every path: the
/// parent no longer routes to D once the mNOTICE is in, D carries the
/// dNOTICE from step two until it is freed, and notices appear in order.
fn path_coverage(tree: &Tree) -> Result<(), Failure> {
    let g = tree.pin();
    let mut merges: Vec<(Arc<MergeInfo>, &'static str)> = Vec::new();
    for pid in tree.table().live_pids() {
        if pid == ROOT_SLOT {
            continue;
        }
        for n in tree.table().read(pid, &g).iter() {
            let Some(notice) = n.notice() else { continue };
            let m = match &notice.kind {
                NoticeKind::MergeParent(m) | NoticeKind::MergeDead(m) => m,
                NoticeKind::MergeAbsorb { merge, .. } => merge,
                _ => continue,
            };
            merges.push((m.clone(), notice.kind.name()));
        }
    }
    for (m, kind) in &merges {
        let stage = m.stage();
        let need = match *kind {
            "dNOTICE" => merge_stage::PARENT_POSTED,
            "xNOTICE" => merge_stage::DEAD_POSTED,
            _ => 0,
        };
        if stage < need {
            return Err((PATH, format!("{kind} posted at merge stage {stage}")));
        }
        if m.is_done() || m.freed.load(std::sync::atomic::Ordering::SeqCst) {
            continue;
        }
        if stage >= merge_stage::PARENT_POSTED {
            if let Some(ph) = tree.table().read_checked(m.parent, &g) {
                if route_index(ph, m.parent, Probe::After(&m.merge_low)) == Route::Child(m.dead) {
                    return Err((PATH, format!("parent {:?} still routes to {:?}", m.parent, m.dead)));
                }
            }
        }
        if stage >= merge_stage::DEAD_POSTED {
            let ok = tree
                .table()
                .read_checked(m.dead, &g)
                .is_none_or(|dh| dead_notice(dh, m.dead).is_some());
            if !ok {
                return Err((PATH, format!("{:?} lost its dNOTICE", m.dead)));
            }
        }
    }
    Ok(())
}
