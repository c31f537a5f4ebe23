use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::{Arc, Barrier, Mutex};

use noticekv::chain::Node;
use noticekv::cost_model::{
    break_even_interval, cost_per_op_mem, cost_per_op_ssd, simulate_hit_ratio, CostError, CostParams, Granularity,
};
use noticekv::epoch::Collector;
use noticekv::mapping::MappingTable;
use noticekv::record_cache::{CacheConfig, CacheError, RecordCache};
use noticekv::workload::{trace, KeyDist};
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        ((a - b) / b).abs()
    }
}

/// Rents in $/byte/s and per-op costs in $, spread over several decades.
fn params() -> impl Strategy<Value = (f64, f64, f64, f64)> {
    (-14.0f64..-10.0, 0.01f64..0.99, -9.0f64..-5.0, -9.0f64..-4.0).prop_map(|(m, f, c, io)| {
        let mem = 10f64.powf(m);
        (mem, mem * f, 10f64.powf(c), 10f64.powf(io))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn per_op_costs_match_arithmetic(
        (mem, flash, cpu, io) in params(),
        size in 16.0f64..1e6,
        rop in 1e-6f64..1e4,
    ) {
        let p = CostParams::new(mem, flash, cpu, io).unwrap();
        // Rent for the bytes held between two accesses, plus the op itself.
        let interval = 1.0 / rop;
        let ss = (cpu + io) + flash * size * interval;
        let mm = cpu + mem * size * interval;
        prop_assert!(rel(cost_per_op_ssd(&p, size, rop), ss) <= 1e-12);
        prop_assert!(rel(cost_per_op_mem(&p, size, rop), mm) <= 1e-12);

        // Equal cost where the extra rent of DRAM matches the I/O overhead.
        let t = break_even_interval(&p, size).unwrap();
        let want = io / (size * (mem - flash));
        prop_assert!(rel(t, want) <= 1e-12, "{t} vs {want}");
        let at = 1.0 / t;
        prop_assert!(rel(cost_per_op_ssd(&p, size, at), cost_per_op_mem(&p, size, at)) <= 1e-9);
    }

    #[test]
    fn break_even_is_inversely_proportional_to_size(
        (mem, flash, cpu, io) in params(),
        sizes in proptest::collection::vec(1.0f64..1e7, 2..8),
    ) {
        let p = CostParams::new(mem, flash, cpu, io).unwrap();
        let c0 = break_even_interval(&p, sizes[0]).unwrap() * sizes[0];
        for s in &sizes[1..] {
            let c = break_even_interval(&p, *s).unwrap() * s;
            prop_assert!(rel(c, c0) <= 1e-12, "{c} vs {c0}");
        }
    }

    #[test]
    fn io_identity_is_checked(
        (mem, flash, cpu, io) in params(),
        off in prop_oneof![-0.5f64..-1e-6, 1e-6f64..0.5],
    ) {
        prop_assert!(CostParams::with_io_op(mem, flash, cpu, io, cpu + io).is_ok());
        let bad = (cpu + io) * (1.0 + off);
        prop_assert!(
            matches!(
                CostParams::with_io_op(mem, flash, cpu, io, bad),
                Err(CostError::IoIdentity { .. })
            ),
            "accepted io_op {} for {} + {}",
            bad,
            cpu,
            io
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hit_ratio_grows_with_budget(seed in any::<u64>(), rpp in 2u64..16) {
        let t = trace(2_000, KeyDist::Zipf(0.99), 20_000, seed).unwrap();
        let budgets = [2_000u64, 5_000, 10_000, 40_000, 100_000, 200_000];
        for g in [
            Granularity::Record { bytes: 100 },
            Granularity::Page { bytes: 100 * rpp, records_per_page: rpp },
        ] {
            let h: Vec<f64> = budgets
                .iter()
                .map(|b| simulate_hit_ratio(&t, g, *b).unwrap())
                .collect();
            prop_assert!(h.windows(2).all(|w| w[0] <= w[1]), "{}: {:?}", g, h);
        }
    }
}

#[derive(Debug, Clone)]
enum CacheOp {
    Put(u64, u8, usize),
    Get(u64),
    Link(u64, usize, u64),
    EvictCold(u64),
    EvictOdd,
}

fn cache_op() -> impl Strategy<Value = CacheOp> {
    prop_oneof![
        4 => (0u64..40, any::<u8>(), 1usize..120).prop_map(|(i, b, n)| CacheOp::Put(i, b, n)),
        4 => (0u64..48).prop_map(CacheOp::Get),
        2 => (0u64..40, 0usize..2, 0u64..40).prop_map(|(f, s, t)| CacheOp::Link(f, s, t)),
        1 => (0u64..64).prop_map(CacheOp::EvictCold),
        1 => Just(CacheOp::EvictOdd),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cache_never_returns_foreign_bytes(
        ops in proptest::collection::vec(cache_op(), 1..300),
        bucket_bits in 2u32..6,
    ) {
        // Few buckets and a small buffer force displacement and eviction.
        let mut c = RecordCache::new(CacheConfig {
            buffer_bytes: 2_048,
            bucket_bits,
            link_slots: 2,
            window: None,
        });
        let mut last: HashMap<u64, Vec<u8>> = HashMap::new();
        let mut attached: HashMap<(u64, usize), HashSet<u64>> = HashMap::new();
        for op in ops {
            let compacted = match op {
                CacheOp::Put(id, b, n) => {
                    let bytes: Vec<u8> = (0..n).map(|i| b.wrapping_add(i as u8) ^ id as u8).collect();
                    match c.put_or_evict(id, &bytes) {
                        Ok(()) => {
                            last.insert(id, bytes);
                            attached.retain(|(f, _), _| *f != id);
                        }
                        Err(CacheError::Capacity { .. }) => {}
                        Err(e) => prop_assert!(false, "put failed: {e}"),
                    }
                    true
                }
                CacheOp::Get(id) => {
                    if let Some(got) = c.get(id) {
                        prop_assert_eq!(Some(&got), last.get(&id), "id {}", id);
                    }
                    false
                }
                CacheOp::Link(f, s, t) => {
                    if c.link_attach(f, s, t).is_ok() {
                        attached.entry((f, s)).or_default().insert(t);
                    }
                    false
                }
                CacheOp::EvictCold(w) => {
                    c.evict_cold(w);
                    true
                }
                CacheOp::EvictOdd => {
                    c.evict_where(|id| id % 2 == 0);
                    true
                }
            };
            if compacted {
                let live: BTreeSet<u64> = c.live_ids().into_iter().collect();
                // Displaced entries stay in the buffer until compaction but
                // can no longer be looked up.
                for &f in live.iter().filter(|f| c.contains(**f)) {
                    for s in 0..2 {
                        for t in c.traverse(f, s).unwrap() {
                            prop_assert!(live.contains(&t), "{} reaches reclaimed {}", f, t);
                        }
                        if let Some(t) = c.link(f, s).unwrap() {
                            let ok = attached.get(&(f, s)).is_some_and(|a| a.contains(&t));
                            prop_assert!(ok, "{}.{} links to {} which was never attached", f, s, t);
                        }
                    }
                }
            }
        }
        // Ids never written are never hits.
        for id in 1_000..1_010 {
            prop_assert!(c.get(id).is_none());
        }
    }
}

#[derive(Debug, Clone)]
enum EpochOp {
    Enter,
    Exit(usize),
    Retire,
    Advance,
    Collect,
}

fn epoch_op() -> impl Strategy<Value = EpochOp> {
    prop_oneof![
        2 => Just(EpochOp::Enter),
        2 => (0usize..8).prop_map(EpochOp::Exit),
        3 => Just(EpochOp::Retire),
        3 => Just(EpochOp::Advance),
        2 => Just(EpochOp::Collect),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn reclamation_waits_for_older_guards(ops in proptest::collection::vec(epoch_op(), 1..200)) {
        let c = Collector::new();
        let reclaimed: Arc<Mutex<Vec<usize>>> = Arc::default();
        let mut retired_at: Vec<u64> = Vec::new();
        let mut seen = 0;
        let mut guards = Vec::new();
        let mut epoch = c.current().0;
        for op in ops {
            match op {
                EpochOp::Enter if guards.len() < 8 => guards.push(c.enter()),
                EpochOp::Enter => {}
                EpochOp::Exit(i) => {
                    if !guards.is_empty() {
                        let i = i % guards.len();
                        guards.swap_remove(i);
                    }
                }
                EpochOp::Retire => {
                    let g = c.enter();
                    let n = retired_at.len();
                    retired_at.push(c.current().0);
                    let r = reclaimed.clone();
                    c.retire(&g, n + 1, Box::new(move || r.lock().unwrap().push(n)));
                }
                EpochOp::Advance => {
                    c.try_advance();
                }
                EpochOp::Collect => {
                    c.collect();
                }
            }
            let now = c.current().0;
            prop_assert!(now >= epoch);
            epoch = now;
            let r = reclaimed.lock().unwrap();
            for &n in &r[seen..] {
                for g in &guards {
                    prop_assert!(
                        g.epoch().0 > retired_at[n],
                        "item retired at {} reclaimed under a guard from {}",
                        retired_at[n],
                        g.epoch()
                    );
                }
            }
            seen = r.len();
        }
        drop(guards);
        for _ in 0..2 {
            c.try_advance();
            c.collect();
        }
        prop_assert_eq!(c.pending(), 0);
        prop_assert_eq!(reclaimed.lock().unwrap().len(), retired_at.len());
    }
}

#[derive(Debug, Clone)]
enum TableOp {
    Allocate,
    Free(usize),
    Pin,
    Unpin(usize),
    Advance,
}

fn table_op() -> impl Strategy<Value = TableOp> {
    prop_oneof![
        3 => Just(TableOp::Allocate),
        2 => (0usize..64).prop_map(TableOp::Free),
        1 => Just(TableOp::Pin),
        1 => (0usize..8).prop_map(TableOp::Unpin),
        3 => Just(TableOp::Advance),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn page_ids_recycle_only_after_older_guards_leave(
        ops in proptest::collection::vec(table_op(), 1..200),
    ) {
        let table = MappingTable::new(16);
        let mut live: Vec<(noticekv::PageId, Arc<Node>)> = Vec::new();
        let mut freed_at: HashMap<u32, u64> = HashMap::new();
        let mut guards = Vec::new();
        for op in ops {
            match op {
                TableOp::Allocate => {
                    let node = Node::empty_leaf();
                    let n = node.clone();
                    match table.allocate_with(move |_| n) {
                        Ok(pid) => {
                            prop_assert!(live.iter().all(|(p, _)| *p != pid), "{:?} handed out twice", pid);
                            if let Some(f) = freed_at.remove(&pid.0) {
                                for g in &guards {
                                    let g: &noticekv::epoch::Guard<'_> = g;
                                    prop_assert!(
                                        g.epoch().0 > f,
                                        "{:?} freed at {} reused under a guard from {}",
                                        pid,
                                        f,
                                        g.epoch()
                                    );
                                }
                            }
                            live.push((pid, node));
                        }
                        Err(_) => prop_assert_eq!(table.free_count(), 0),
                    }
                }
                TableOp::Free(i) if !live.is_empty() => {
                    let (pid, _) = live.swap_remove(i % live.len());
                    let g = table.pin();
                    freed_at.insert(pid.0, table.collector().current().0);
                    table.free_pid(pid, &g);
                }
                TableOp::Free(_) => {}
                TableOp::Pin if guards.len() < 8 => guards.push(table.pin()),
                TableOp::Pin => {}
                TableOp::Unpin(i) => {
                    if !guards.is_empty() {
                        let i = i % guards.len();
                        guards.swap_remove(i);
                    }
                }
                TableOp::Advance => {
                    table.collector().try_advance();
                    table.collector().collect();
                }
            }
            // Every live id resolves to the state installed for it.
            let g = table.pin();
            for (pid, node) in &live {
                prop_assert!(table.is_live(*pid));
                prop_assert!(std::ptr::eq(table.read(*pid, &g), Arc::as_ptr(node)));
            }
        }
    }
}

#[test]
fn racing_installs_have_one_winner() {
    for round in 0..200 {
        let table = Arc::new(MappingTable::new(4));
        let first = Node::empty_leaf();
        let pid = table.allocate_with(|_| first.clone()).unwrap();
        let k = 2 + round % 2;
        let start = Arc::new(Barrier::new(k));
        let handles: Vec<_> = (0..k)
            .map(|_| {
                let (table, first, start) = (table.clone(), first.clone(), start.clone());
                std::thread::spawn(move || {
                    let mine = Node::empty_leaf();
                    let addr = Arc::as_ptr(&mine) as usize;
                    start.wait();
                    let g = table.pin();
                    (table.cas_install(pid, &first, mine, &g), addr)
                })
            })
            .collect();
        let results: Vec<(bool, usize)> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let winners: Vec<usize> = results.iter().filter(|r| r.0).map(|r| r.1).collect();
        assert_eq!(winners.len(), 1, "round {round}: {results:?}");
        let g = table.pin();
        assert_eq!(table.read(pid, &g) as *const Node as usize, winners[0]);
    }
}
