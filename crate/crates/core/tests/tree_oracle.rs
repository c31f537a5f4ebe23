use std::collections::BTreeMap;

use noticekv::{MergeOutcome, PageId, SplitOutcome, Tree, TreeConfig, TreeError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn k(n: u32) -> Vec<u8> {
    n.to_be_bytes().to_vec()
}

fn small() -> TreeConfig {
    TreeConfig {
        consolidate_threshold: 4,
        split_threshold: 16,
        merge_threshold: 4,
        table_capacity: 1 << 16,
        ..TreeConfig::default()
    }
}

#[test]
fn empty_tree_misses() {
    let t = Tree::new(TreeConfig::default()).unwrap();
    assert_eq!(t.get(b"a"), None);
}

#[test]
fn upsert_then_get() {
    let t = Tree::new(TreeConfig::default()).unwrap();
    t.upsert(b"a", b"1");
    assert_eq!(t.get(b"a"), Some(b"1".to_vec()));
    t.upsert(b"a", b"2");
    assert_eq!(t.get(b"a"), Some(b"2".to_vec()));
}

#[test]
fn delete_removes_and_absent_delete_is_noop() {
    let t = Tree::new(TreeConfig::default()).unwrap();
    t.upsert(b"a", b"1");
    t.delete(b"a");
    assert_eq!(t.get(b"a"), None);
    t.delete(b"zzz");
    assert_eq!(t.scan_all(), vec![]);
}

#[test]
fn range_scan_half_open() {
    let t = Tree::new(TreeConfig::default()).unwrap();
    for key in [b"a", b"b", b"c"] {
        t.upsert(key, b"v");
    }
    let got: Vec<_> = t.range_scan(b"a", b"c").unwrap().into_iter().map(|(k, _)| k).collect();
    assert_eq!(got, vec![b"a".to_vec(), b"b".to_vec()]);
    assert_eq!(t.range_scan(b"b", b"b").unwrap(), vec![]);
    assert_eq!(t.range_scan(b"c", b"a"), Err(TreeError::InvalidRange));
}

#[test]
fn config_validation() {
    let bad = |c: TreeConfig| Tree::new(c).is_err();
    assert!(bad(TreeConfig { consolidate_threshold: 0, ..TreeConfig::default() }));
    assert!(bad(TreeConfig { split_threshold: 16, merge_threshold: 8, ..TreeConfig::default() }));
    assert!(bad(TreeConfig { notice_timeout_epochs: 1, ..TreeConfig::default() }));
    assert!(!bad(TreeConfig { split_threshold: 17, merge_threshold: 8, ..TreeConfig::default() }));
}

#[test]
fn consolidation_of_eight_deltas_matches_oracle() {
    let t = Tree::new(TreeConfig::manual(64)).unwrap();
    let mut oracle = BTreeMap::new();
    for i in 0..8u32 {
        t.upsert(&k(i % 5), &k(i));
        oracle.insert(k(i % 5), k(i));
    }
    let leaf = PageId(1);
    assert_eq!(t.chain_length(leaf).data_deltas, 8);
    assert!(t.consolidate(leaf));
    assert_eq!(t.chain_length(leaf).data_deltas, 0);
    assert_eq!(t.scan_all(), oracle.into_iter().collect::<Vec<_>>());
}

#[test]
fn split_of_one_to_ten_at_five() {
    let t = Tree::new(TreeConfig {
        split_threshold: 10,
        merge_threshold: 4,
        ..TreeConfig::manual(64)
    })
    .unwrap();
    for i in 1..=10 {
        t.upsert(&k(i), &k(i));
    }
    let out = t.split(PageId(1));
    let SplitOutcome::Won { split_key, new, moved } = out else { panic!("{out:?}") };
    assert_eq!(split_key, k(5));
    assert_eq!(moved, 5);
    let lower = t.range_scan(&k(0), &k(100)).unwrap();
    assert_eq!(lower.len(), 10);
    assert_eq!(t.data_pages(), vec![PageId(1), new]);
    assert_eq!(t.height(), 2);
    for i in 1..=10 {
        assert_eq!(t.get(&k(i)), Some(k(i)));
    }
}

#[test]
fn merge_small_right_sibling() {
    let t = Tree::new(TreeConfig::manual(64)).unwrap();
    for i in 1..=5 {
        t.upsert(&k(i), &k(i));
    }
    let SplitOutcome::Won { new, .. } = t.split_at(PageId(1), &k(3)) else { panic!() };
    let plan = t.plan_merge(new).unwrap();
    assert_eq!(plan.left, PageId(1));
    assert_eq!(t.merge(&plan), Ok(MergeOutcome::Completed));
    assert_eq!(t.data_pages(), vec![PageId(1)]);
    assert_eq!(t.scan_all().len(), 5);
    t.upsert(&k(4), b"x");
    assert_eq!(t.get(&k(4)), Some(b"x".to_vec()));
    // The lowest child of a parent never merges.
    assert!(t.plan_merge(PageId(1)).is_err());
}

fn replay(seed: u64, n: usize, keyspace: u32, cfg: TreeConfig) {
    let t = Tree::new(cfg).unwrap();
    let mut oracle: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let key = k(rng.random_range(0..keyspace));
        match rng.random_range(0..10) {
            0..=4 => {
                let v = k(i as u32);
                t.upsert(&key, &v);
                oracle.insert(key, v);
            }
            5..=6 => {
                t.delete(&key);
                oracle.remove(&key);
            }
            7..=8 => assert_eq!(t.get(&key), oracle.get(&key).cloned(), "op {i}"),
            _ => {
                let hi = k(rng.random_range(0..keyspace));
                let (lo, hi) = if key <= hi { (key, hi) } else { (hi, key) };
                let expect: Vec<_> = oracle
                    .range(lo.clone()..hi.clone())
                    .map(|(a, b)| (a.clone(), b.clone()))
                    .collect();
                assert_eq!(t.range_scan(&lo, &hi).unwrap(), expect, "op {i}");
            }
        }
    }
    t.quiesce();
    assert_eq!(t.scan_all(), oracle.into_iter().collect::<Vec<_>>());
    assert!(t.max_data_deltas() < t.config().consolidate_threshold);
}

#[test]
fn hundred_thousand_ops_match_oracle() {
    replay(1, 100_000, 5_000, small());
}

#[test]
fn default_thresholds_match_oracle() {
    replay(2, 50_000, 20_000, TreeConfig { table_capacity: 1 << 16, ..TreeConfig::default() });
}

#[test]
fn shrinking_workload_merges() {
    let t = Tree::new(small()).unwrap();
    for i in 0..2_000 {
        t.upsert(&k(i), &k(i));
    }
    let pages = t.data_pages().len();
    for i in 0..2_000 {
        if i % 10 != 0 {
            t.delete(&k(i));
        }
    }
    t.quiesce();
    assert!(t.stats().snapshot().merges > 0);
    assert!(t.data_pages().len() < pages);
    assert_eq!(t.scan_all().len(), 200);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sequential_ops_match_oracle(seed in any::<u64>(), keyspace in 4u32..400) {
        replay(seed, 1_500, keyspace, TreeConfig {
            consolidate_threshold: 2,
            split_threshold: 7,
            merge_threshold: 3,
            table_capacity: 4096,
            ..TreeConfig::default()
        });
    }
}
