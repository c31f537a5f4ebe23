//! The shipped scenario library.

use std::sync::Arc;

use super::{Final, Instance, Machine, OpDesc, Outcome, Role, Scenario};
use crate::chain::Key;
use crate::mapping::PageId;
use crate::smo::{MergeOutcome, SmoError, SplitOutcome, SPLIT_ENTRY};
use crate::step::{poll_once, Pace};
use crate::tree::{Tree, TreeConfig};

pub fn k(n: u8) -> Key {
    vec![n]
}

pub fn v(n: u8) -> Key {
    vec![b'v', n]
}

const LEAF: PageId = PageId(1);
const NEW: PageId = PageId(2);

/// Small thresholds, no automatic follow-up work, poisoning on.
pub fn config() -> TreeConfig {
    TreeConfig {
        consolidate_threshold: 2,
        split_threshold: 7,
        merge_threshold: 3,
        segment_bytes: 1 << 12,
        poison: true,
        ..TreeConfig::manual(64)
    }
}

fn tree_with(cfg: TreeConfig, keys: impl IntoIterator<Item = u8>) -> Arc<Tree> {
    let t = Tree::new(cfg).expect("valid config");
    for i in keys {
        t.upsert(&k(i), &v(i));
    }
    t.quiesce();
    Arc::new(t)
}

/// Leaf {1..=n}.
fn leaf(n: u8) -> Arc<Tree> {
    tree_with(config(), 1..=n)
}

/// Leaf {1, 2, 3} with two delta updates on top.
fn busy_leaf() -> Arc<Tree> {
    let t = leaf(3);
    t.upsert(&k(4), &v(4));
    t.upsert(&k(5), &v(5));
    t
}

/// L = {1, 2, 3} at P1 and D = {4, 5} at P2 under a root index node.
fn two_leaves() -> Arc<Tree> {
    let t = leaf(5);
    assert!(matches!(t.split_at(LEAF, &k(3)), SplitOutcome::Won { new: NEW, .. }));
    t.quiesce();
    t
}

fn op(t: &Arc<Tree>, o: OpDesc) -> Machine {
    Machine::op(t, o)
}

fn up(n: u8, val: u8) -> OpDesc {
    OpDesc::Upsert(k(n), v(val))
}

/// Poll a stepped operation `polls` times, then abandon it as if its thread
/// had stopped.
fn halt<F: std::future::Future>(fut: F, polls: usize) {
    let mut f = Box::pin(fut);
    for i in 0..polls {
        assert!(poll_once(f.as_mut()).is_pending(), "operation finished after {i} polls");
    }
}

fn age_notices(t: &Tree) {
    let target = t.current_epoch() + t.config().notice_timeout_epochs;
    while t.current_epoch() < target {
        t.advance_epoch();
    }
}

fn count(outcomes: &[Outcome], want: impl Fn(&Outcome) -> bool) -> usize {
    outcomes.iter().filter(|o| want(o)).count()
}

fn settled(f: &Final<'_>) -> Result<(), String> {
    match f.tree.pending_notices() {
        0 => Ok(()),
        n => Err(format!("{n} notices still pending")),
    }
}

/// Leaf {1..=6} whose split at 3 stopped after `polls` polls, with any
/// notice it left old enough to take over.
fn halted_split(polls: usize) -> Arc<Tree> {
    let t = leaf(6);
    halt(t.split_with(LEAF, Some(&k(3)), Pace::Stepped), polls);
    assert!(t.segment().live_entries().iter().all(|e| e.kind != SPLIT_ENTRY));
    age_notices(&t);
    t
}

fn split_taken_over(f: &Final<'_>, published: bool) -> Result<(), String> {
    let (splits, height) = if published { (1, 2) } else { (0, 1) };
    if f.stats.splits != splits {
        return Err(format!("{} split completions", f.stats.splits));
    }
    let written = f
        .tree
        .segment()
        .live_entries()
        .iter()
        .filter(|e| e.kind == SPLIT_ENTRY)
        .count();
    if written as u64 != splits {
        return Err(format!("{written} split images in the buffer"));
    }
    if f.tree.height() != height {
        return Err(format!("height {}", f.tree.height()));
    }
    if !published {
        return match f.tree.pending_notices() {
            0 | 1 => Ok(()),
            n => Err(format!("{n} notices still pending")),
        };
    }
    settled(f)
}

/// Two leaves whose merge stopped after `polls` polls; returns the parent.
fn halted_merge(polls: usize) -> (Arc<Tree>, PageId) {
    let t = two_leaves();
    let plan = t.plan_merge(NEW).expect("eligible");
    halt(t.merge_with(&plan, Pace::Stepped), polls);
    age_notices(&t);
    (t, plan.parent)
}

fn merge_taken_over(f: &Final<'_>) -> Result<(), String> {
    if f.stats.merges != 1 || f.tree.table().is_live(NEW) {
        return Err(format!("{} merge completions", f.stats.merges));
    }
    settled(f)
}

fn cnotice_scenarios() -> Vec<Scenario> {
    vec![
        Scenario::new("cnotice_race_pure", || {
            let t = busy_leaf();
            let m = vec![Machine::consolidate(&t, LEAF), Machine::consolidate(&t, LEAF)];
            Instance { tree: t, machines: m }
        })
        .with_check(|f| {
            let won = count(f.outcomes, |o| *o == Outcome::Flag(true));
            if won != 1 || f.stats.consolidations != 1 {
                return Err(format!("{won} winners, {} consolidations", f.stats.consolidations));
            }
            Ok(())
        }),
        Scenario::new("cnotice_race", || {
            let t = busy_leaf();
            let m = vec![
                Machine::consolidate(&t, LEAF),
                Machine::consolidate(&t, LEAF),
                op(&t, up(6, 6)),
            ];
            Instance { tree: t, machines: m }
        })
        .with_check(|f| {
            let won = count(f.outcomes, |o| *o == Outcome::Flag(true)) as u64;
            if f.stats.consolidations != won {
                return Err(format!("{won} winners, {} consolidations", f.stats.consolidations));
            }
            Ok(())
        }),
        Scenario::new("cnotice_vs_update_and_read", || {
            let t = busy_leaf();
            let m = vec![
                Machine::consolidate(&t, LEAF),
                op(&t, up(2, 9)),
                op(&t, OpDesc::Get(k(4))),
            ];
            Instance { tree: t, machines: m }
        }),
    ]
}

fn split_scenarios() -> Vec<Scenario> {
    let mut out = Vec::new();
    let rivals: [(&str, OpDesc); 7] = [
        ("upsert_upper", up(5, 9)),
        ("upsert_lower", up(2, 9)),
        ("insert_upper", up(7, 7)),
        ("delete_upper", OpDesc::Delete(k(6))),
        ("get_upper", OpDesc::Get(k(5))),
        ("get_lower", OpDesc::Get(k(3))),
        ("scan", OpDesc::Scan(k(2), k(4))),
    ];
    for (name, rival) in rivals {
        out.push(
            Scenario::new(format!("split_vs_{name}"), move || {
                let t = leaf(6);
                // First polls only pin, and nothing here advances the epoch.
                let m = vec![
                    Machine::split(&t, LEAF, Some(k(3))).after_polls(1),
                    op(&t, rival.clone()).after_polls(1),
                ];
                Instance { tree: t, machines: m }
            })
            .with_check(|f| match &f.outcomes[0] {
                Outcome::Split(SplitOutcome::Won { split_key, moved, .. })
                    if *split_key == k(3) && f.stats.splits == 1 && *moved >= 2 =>
                {
                    settled(f)
                }
                o => Err(format!("unexpected split result {o:?}")),
            }),
        );
    }
    out.push(
        Scenario::new("split_race", || {
            let t = leaf(6);
            let m = vec![
                Machine::split(&t, LEAF, Some(k(3))),
                Machine::split(&t, LEAF, Some(k(3))),
            ];
            Instance { tree: t, machines: m }
        })
        .with_check(|f| {
            let won = count(f.outcomes, |o| matches!(o, Outcome::Split(SplitOutcome::Won { .. })));
            if won != 1 || f.stats.splits != 1 {
                return Err(format!("{won} winners, {} splits", f.stats.splits));
            }
            Ok(())
        }),
    );
    out.push(Scenario::new("split_under_parent_vs_upsert", || {
        let t = leaf(8);
        assert!(matches!(t.split_at(LEAF, &k(4)), SplitOutcome::Won { new: NEW, .. }));
        t.quiesce();
        let m = vec![Machine::split(&t, NEW, Some(k(6))), op(&t, up(7, 9))];
        Instance { tree: t, machines: m }
    }));
    out
}

fn merge_scenarios() -> Vec<Scenario> {
    let mut out = Vec::new();
    let rivals: [(&str, OpDesc); 7] = [
        ("update_dead", up(4, 9)),
        ("insert_dead", up(6, 6)),
        ("delete_dead", OpDesc::Delete(k(5))),
        ("update_left", up(2, 9)),
        ("get_dead", OpDesc::Get(k(5))),
        ("get_left", OpDesc::Get(k(1))),
        ("scan", OpDesc::Scan(k(1), k(9))),
    ];
    for (name, rival) in rivals {
        let grows = name == "insert_dead";
        out.push(
            Scenario::new(format!("merge_vs_{name}"), move || {
                let t = two_leaves();
                let plan = t.plan_merge(NEW).expect("eligible");
                // Rivals never write the parent, so its read may go first.
                let m = vec![
                    Machine::merge(&t, plan).after_polls(2),
                    op(&t, rival.clone()).after_polls(1),
                ];
                Instance { tree: t, machines: m }
            })
            .with_check(move |f| match &f.outcomes[0] {
                Outcome::Merge(Ok(MergeOutcome::Completed)) if f.stats.merges == 1 => {
                    if f.tree.table().is_live(NEW) {
                        return Err("dead page still live".into());
                    }
                    settled(f)
                }
                // An insert that lands first can make D too big to merge.
                Outcome::Merge(Err(SmoError::Ineligible(_))) if grows && f.stats.merges == 0 => {
                    settled(f)
                }
                o => Err(format!("unexpected merge result {o:?}")),
            }),
        );
    }
    out.push(
        Scenario::new("merge_race", || {
            let t = two_leaves();
            let plan = t.plan_merge(NEW).expect("eligible");
            let m = vec![Machine::merge(&t, plan.clone()), Machine::merge(&t, plan)];
            Instance { tree: t, machines: m }
        })
        .with_check(|f| {
            if f.stats.merges != 1 {
                return Err(format!("{} merges", f.stats.merges));
            }
            settled(f)
        }),
    );
    for sep in [3u8, 6] {
        out.push(
            Scenario::new(format!("parent_split_at_{sep}_vs_pending_merge"), move || {
                // Leaves {1,2,3} {4} {7,8,9} under one index node; the
                // middle one merges into the first.
                let t = leaf(9);
                assert!(matches!(t.split_at(LEAF, &k(3)), SplitOutcome::Won { new: NEW, .. }));
                t.quiesce();
                assert!(matches!(t.split_at(NEW, &k(6)), SplitOutcome::Won { .. }));
                for i in [5, 6] {
                    t.delete(&k(i));
                }
                t.quiesce();
                let plan = t.plan_merge(NEW).expect("eligible");
                let parent = plan.parent;
                // The merge's first four polls only read; the split's first only pins.
                let m = vec![
                    Machine::merge(&t, plan).after_polls(4),
                    Machine::split(&t, parent, Some(k(sep))).after_polls(1),
                ];
                Instance { tree: t, machines: m }
            })
            .with_check(move |f| {
                let merged = matches!(f.outcomes[0], Outcome::Merge(Ok(MergeOutcome::Completed)));
                let split_at_sep = matches!(
                    &f.outcomes[1],
                    Outcome::Split(SplitOutcome::Won { split_key, .. }) if *split_key == k(3)
                );
                if merged && split_at_sep {
                    return Err("parent split between L and D while their merge ran".into());
                }
                Ok(())
            })
            .with_labels(|f| vec![format!("merge={:?} split={:?}", f.outcomes[0], f.outcomes[1])]),
        );
    }
    out
}

fn takeover_scenarios() -> Vec<Scenario> {
    let mut out = Vec::new();
    out.push(
        Scenario::new("takeover_consolidate_after_halt", || {
            let t = busy_leaf();
            halt(t.consolidate_with(LEAF, Pace::Stepped), 3);
            assert_eq!(t.pending_notices(), 1);
            age_notices(&t);
            let m = vec![Machine::takeover(&t, LEAF), op(&t, up(4, 9))];
            Instance { tree: t, machines: m }
        })
        .with_check(|f| {
            if f.stats.takeovers != 1 || f.stats.consolidations != 1 {
                return Err(format!("{:?}", f.stats));
            }
            settled(f)
        }),
    );
    // The splitter has N's slot after its second poll, installs the sNOTICE
    // on the third and finishes the split on the seventh. A stop after the
    // second poll leaves an orphan N holding a copy of the notice.
    for polls in 2..=6 {
        out.push(
            Scenario::new(format!("takeover_split_halted_after_{polls}"), move || {
                let t = halted_split(polls);
                let m = vec![Machine::takeover(&t, LEAF), Machine::advance_epochs(&t, 2)];
                Instance { tree: t, machines: m }
            })
            .with_check(move |f| split_taken_over(f, polls > 2)),
        );
    }
    out.push(
        Scenario::new("takeover_split_race", || {
            let t = halted_split(5);
            let m = vec![Machine::takeover(&t, LEAF), Machine::takeover(&t, NEW)];
            Instance { tree: t, machines: m }
        })
        .with_check(|f| split_taken_over(f, true)),
    );
    // mNOTICE lands on the fifth poll, dNOTICE on the seventh, xNOTICE on
    // the tenth and the merged base on the twelfth.
    for polls in 5..=11 {
        out.push(
            Scenario::new(format!("takeover_merge_halted_after_{polls}"), move || {
                let (t, parent) = halted_merge(polls);
                let m = vec![Machine::takeover(&t, parent), Machine::advance_epochs(&t, 2)];
                Instance { tree: t, machines: m }
            })
            .with_check(merge_taken_over),
        );
    }
    out.push(
        Scenario::new("takeover_merge_race", || {
            let (t, parent) = halted_merge(8);
            let m = vec![Machine::takeover(&t, parent), Machine::takeover(&t, NEW)];
            Instance { tree: t, machines: m }
        })
        .with_check(merge_taken_over),
    );
    out.push(
        Scenario::new("takeover_consolidate_race", || {
            let t = busy_leaf();
            halt(t.consolidate_with(LEAF, Pace::Stepped), 3);
            age_notices(&t);
            let m = vec![Machine::takeover(&t, LEAF), Machine::takeover(&t, LEAF)];
            Instance { tree: t, machines: m }
        })
        .with_check(|f| {
            let won = count(f.outcomes, |o| *o == Outcome::Flag(true));
            if won != 1 || f.stats.consolidations != 1 {
                return Err(format!("{won} takeovers won, {} consolidations", f.stats.consolidations));
            }
            settled(f)
        }),
    );
    // A stopped splitter whose notices are still fresh delays nobody.
    let rivals: [(&str, OpDesc); 2] = [("get", OpDesc::Get(k(4))), ("scan", OpDesc::Scan(k(1), k(9)))];
    for polls in 1..=6 {
        for (name, rival) in rivals.clone() {
            out.push(
                Scenario::new(format!("split_paused_after_{polls}_vs_upsert_and_{name}"), move || {
                    let t = leaf(6);
                    halt(t.split_with(LEAF, Some(&k(3)), Pace::Stepped), polls);
                    let m = vec![op(&t, up(5, 9)), op(&t, rival.clone())];
                    Instance { tree: t, machines: m }
                })
                .with_check(|f| {
                    if f.stats.takeovers != 0 || f.stats.splits != 0 {
                        return Err(format!("{:?}", f.stats));
                    }
                    Ok(())
                }),
            );
        }
    }
    out.push(
        Scenario::new("unindexed_split_completed_by_traversal", || {
            let t = tree_with(TreeConfig { auto_smo: true, ..config() }, 1..=6);
            // Stops after the split itself, before the parent is updated.
            halt(t.split_with(LEAF, Some(&k(3)), Pace::Stepped), 7);
            assert_eq!(t.height(), 1);
            let m = vec![op(&t, OpDesc::Get(k(5))), op(&t, up(6, 9))];
            Instance { tree: t, machines: m }
        })
        .with_check(|f| match f.tree.height() {
            2 => Ok(()),
            h => Err(format!("height {h} after traversals crossed the side link")),
        }),
    );
    out
}

fn misc_scenarios() -> Vec<Scenario> {
    vec![
        Scenario::new("upsert_race", || {
            let t = leaf(3);
            let m = vec![op(&t, up(2, 1)), op(&t, up(2, 2)), op(&t, OpDesc::Get(k(2)))];
            Instance { tree: t, machines: m }
        })
        .with_labels(|f| vec![format!("final={:?}", f.tree.peek(&k(2)))]),
        Scenario::new("buffer_reserve_race", || {
            let t = leaf(1);
            let reserve = |t: &Arc<Tree>| {
                let seg = t.segment();
                Machine::new(Role::Other("reserve"), async move {
                    Pace::Stepped.step().await;
                    let r = seg.reserve(100).expect("room");
                    Outcome::Offset(r.offset, r.length)
                })
            };
            let m = vec![reserve(&t), reserve(&t), reserve(&t)];
            Instance { tree: t, machines: m }
        })
        .with_check(|f| {
            let mut spans: Vec<(u64, u64)> = f
                .outcomes
                .iter()
                .filter_map(|o| match o {
                    Outcome::Offset(a, l) => Some((*a, a + l)),
                    _ => None,
                })
                .collect();
            spans.sort_unstable();
            if spans.windows(2).any(|w| w[0].1 > w[1].0) {
                return Err(format!("overlapping reservations {spans:?}"));
            }
            Ok(())
        }),
    ]
}

/// Every shipped scenario.
pub fn library() -> Vec<Scenario> {
    let mut all = cnotice_scenarios();
    all.extend(split_scenarios());
    all.extend(merge_scenarios());
    all.extend(takeover_scenarios());
    all.extend(misc_scenarios());
    all
}

/// Scenario by name.
pub fn find(name: &str) -> Option<Scenario> {
    library().into_iter().find(|s| s.name == name)
}
