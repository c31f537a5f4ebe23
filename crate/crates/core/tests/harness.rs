use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;
use std::time::Instant;

use noticekv::harness::scenarios::{self, k, v};
use noticekv::harness::{
    Explorer, HarnessError, Instance, Machine, OpDesc, Outcome, Scenario, ScenarioReport, Schedule,
};
use noticekv::{PageId, Tree, TreeConfig};

fn counters(a: usize, b: usize) -> Scenario {
    Scenario::new(format!("counters_{a}_{b}"), move || Instance {
        tree: Arc::new(Tree::new(TreeConfig::manual(8)).unwrap()),
        machines: vec![Machine::steps(a), Machine::steps(b)],
    })
}

#[test]
fn interleaving_counts_are_multinomial() {
    let ex = Explorer::default();
    assert_eq!(ex.explore_exhaustive(&counters(1, 1)).unwrap().schedules, 2);
    assert_eq!(ex.explore_exhaustive(&counters(3, 3)).unwrap().schedules, 20);
    let three = Scenario::new("three", || Instance {
        tree: Arc::new(Tree::new(TreeConfig::manual(8)).unwrap()),
        machines: vec![Machine::steps(2), Machine::steps(2), Machine::steps(2)],
    });
    assert_eq!(ex.explore_exhaustive(&three).unwrap().schedules, 90);
}

#[test]
fn bound_is_enforced() {
    let ex = Explorer {
        bound: 19,
        ..Explorer::default()
    };
    assert!(matches!(
        ex.explore_exhaustive(&counters(3, 3)),
        Err(HarnessError::Explosion { count: 20, bound: 19, .. })
    ));
}

fn state_hash(tree: &Tree) -> u64 {
    let mut h = DefaultHasher::new();
    tree.snapshot().hash(&mut h);
    h.finish()
}

/// Replays "run `first` to completion, then the other machine".
fn run_in_turn(scn: &Scenario, first: usize) -> ScenarioReport {
    let ex = Explorer::default();
    (1..64)
        .flat_map(|n| (1..64).map(move |m| (n, m)))
        .find_map(|(n, m)| {
            let mut choices = vec![first; n];
            choices.extend(vec![1 - first; m]);
            ex.replay(scn, &Schedule { choices }).ok()
        })
        .expect("some split point replays")
}

#[test]
fn sequential_schedules_match_direct_calls() {
    let scn = scenarios::find("split_vs_upsert_upper").unwrap();
    for first in [0, 1] {
        let r = run_in_turn(&scn, first);
        assert!(r.is_clean(), "{r}");
        let direct = scn.instance().tree;
        if first == 0 {
            direct.split_at(PageId(1), &k(3));
            direct.upsert(&k(5), &v(9));
        } else {
            direct.upsert(&k(5), &v(9));
            direct.split_at(PageId(1), &k(3));
        }
        assert_eq!(r.final_state, Some(state_hash(&direct)));
    }
}

#[test]
fn random_mode_is_deterministic_per_seed() {
    let scn = scenarios::find("cnotice_race").unwrap();
    let ex = Explorer::default();
    let a = ex.explore_random(&scn, 200, 1).unwrap();
    let b = ex.explore_random(&scn, 200, 1).unwrap();
    let c = ex.explore_random(&scn, 200, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.digest, c.digest);
    assert!(a.is_clean(), "{a}");
}

#[test]
fn ten_thousand_random_split_schedules() {
    let scn = scenarios::find("split_vs_upsert_upper").unwrap();
    let r = Explorer::default().explore_random(&scn, 10_000, 42).unwrap();
    assert!(r.is_clean(), "{r}");
}

#[test]
fn both_consolidators_win_somewhere() {
    let scn = scenarios::find("cnotice_race_pure").unwrap();
    let r = Explorer::default().explore_exhaustive(&scn).unwrap();
    assert!(r.is_clean(), "{r}");
    assert!(r.coverage["won.consolidate.m0"] > 0);
    assert!(r.coverage["won.consolidate.m1"] > 0);
}

#[test]
fn both_upsert_orders_observed() {
    let scn = scenarios::find("upsert_race").unwrap();
    let r = Explorer::default().explore_exhaustive(&scn).unwrap();
    assert!(r.is_clean(), "{r}");
    assert!(r.coverage.keys().any(|l| l.contains("final=Some([118, 1])")), "{r}");
    assert!(r.coverage.keys().any(|l| l.contains("final=Some([118, 2])")), "{r}");
}

#[test]
fn self_test_violation_replays() {
    let ex = Explorer {
        self_test: true,
        ..Explorer::default()
    };
    let scn = scenarios::find("cnotice_race_pure").unwrap();
    let r = ex.explore_exhaustive(&scn).unwrap();
    let bad = r.violations.first().expect("self-test checker fires");
    let again = ex.replay(&scn, &bad.schedule).unwrap();
    assert_eq!(again.violations[0].checker, bad.checker);
    assert_eq!(again.violations[0].schedule, bad.schedule);
    let clean = Explorer::default().replay(&scn, &bad.schedule).unwrap();
    assert!(clean.is_clean());
}

#[test]
fn replay_rejects_foreign_schedules() {
    let scn = scenarios::find("cnotice_race_pure").unwrap();
    let ex = Explorer::default();
    assert!(matches!(ex.replay(&scn, &"7".parse().unwrap()), Err(HarnessError::Mismatch(_))));
    assert!(matches!(ex.replay(&scn, &"0".parse().unwrap()), Err(HarnessError::Mismatch(_))));
}

#[test]
fn broken_tree_behaviour_is_caught() {
    // A machine that loses an update behind the tree's back.
    let scn = Scenario::new("lost_update", || {
        let t = Arc::new(Tree::new(scenarios::config()).unwrap());
        t.upsert(&k(1), &v(1));
        let t2 = t.clone();
        let m = vec![
            Machine::op(&t, OpDesc::Upsert(k(1), v(2))),
            Machine::new(noticekv::harness::Role::Other("vandal"), async move {
                noticekv::Pace::Stepped.step().await;
                t2.delete(&k(1));
                Outcome::Done
            }),
        ];
        Instance { tree: t, machines: m }
    });
    let r = Explorer::default().explore_exhaustive(&scn).unwrap();
    assert!(!r.is_clean());
}

#[test]
#[ignore = "timing survey"]
fn survey() {
    let ex = Explorer::default();
    for s in scenarios::library() {
        let t = Instant::now();
        let est = ex.estimate(&s);
        let r = ex.explore_exhaustive(&s);
        match r {
            Ok(r) => println!("{:?} est={est:?} {:.2?}\n{r}", s.name, t.elapsed()),
            Err(e) => println!("{} ERROR {e}", s.name),
        }
    }
}
