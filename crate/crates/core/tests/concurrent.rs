use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;

use noticekv::chain::sentinel_touches;
use noticekv::{Tree, TreeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Write {
    key: u32,
    value: Option<u64>,
    start: u64,
    end: u64,
}

fn key(n: u32) -> [u8; 4] {
    n.to_be_bytes()
}

/// Every key's final value must come from a write that no other write to the
/// same key strictly followed. Absent keys need such a delete, or no writes.
fn check(tree: &Tree, writes: &[Write], keys: u32) {
    let mut per_key: HashMap<u32, Vec<&Write>> = HashMap::new();
    for w in writes {
        per_key.entry(w.key).or_default().push(w);
    }
    for k in 0..keys {
        let got = tree.get(&key(k)).map(|v| u64::from_be_bytes(v.try_into().unwrap()));
        let Some(ws) = per_key.get(&k) else {
            assert_eq!(got, None, "key {k} never written");
            continue;
        };
        let ok = ws
            .iter()
            .filter(|w| w.value == got)
            .any(|w| !ws.iter().any(|o| o.start > w.end));
        assert!(ok, "key {k}: final value {got:?} is not a possible last write");
    }
}

fn run(threads: usize, ops: usize, keys: u32, cfg: TreeConfig, seed: u64) -> Tree {
    let tree = Tree::new(cfg).unwrap();
    let clock = AtomicU64::new(0);
    let writes: Vec<Write> = thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let tree = &tree;
                let clock = &clock;
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ t as u64);
                    let mut log = Vec::new();
                    for i in 0..ops / threads {
                        let k = rng.random_range(0..keys);
                        let roll = rng.random_range(0..10);
                        if roll >= 7 {
                            tree.get(&key(k));
                            continue;
                        }
                        let value = (roll < 5).then_some(((t as u64) << 32) | i as u64);
                        let start = clock.fetch_add(1, Ordering::SeqCst);
                        match value {
                            Some(v) => tree.upsert(&key(k), &v.to_be_bytes()),
                            None => tree.delete(&key(k)),
                        }
                        let end = clock.fetch_add(1, Ordering::SeqCst);
                        log.push(Write { key: k, value, start, end });
                    }
                    log
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    tree.quiesce();
    check(&tree, &writes, keys);
    tree
}

fn smo_heavy() -> TreeConfig {
    TreeConfig {
        consolidate_threshold: 3,
        split_threshold: 12,
        merge_threshold: 4,
        table_capacity: 1 << 16,
        ..TreeConfig::default()
    }
}

#[test]
fn four_threads_small_keyspace() {
    let t = run(4, 80_000, 64, smo_heavy(), 7);
    let s = t.stats().snapshot();
    assert!(s.consolidations > 0);
}

#[test]
fn eight_threads_forces_splits_and_merges() {
    let t = run(8, 200_000, 2_000, smo_heavy(), 11);
    let s = t.stats().snapshot();
    assert!(s.splits > 0 && s.merges > 0, "{s:?}");
    assert!(t.max_data_deltas() < t.config().consolidate_threshold);
}

#[test]
fn poisoned_run_never_touches_reclaimed_state() {
    let before = sentinel_touches();
    for seed in 0..3 {
        run(4, 40_000, 500, TreeConfig { poison: true, ..smo_heavy() }, seed);
    }
    assert_eq!(sentinel_touches(), before);
}
