//! Multi-thread stress runs with post-run verification.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use noticekv::chain::sentinel_touches;
use noticekv::record_cache::{CacheConfig, RecordCache};
use noticekv::tree::StatsSnapshot;
use noticekv::workload::KeySampler;
use noticekv::{Tree, TreeError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::workload::{OpKind, SpecError, WorkloadSpec};

/// Diagnostics kept per run; later failures are only counted.
const MAX_REPORTED: usize = 20;

#[derive(Debug, Error)]
pub enum StressError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("{} invariant failures", .failures.len())]
    Invariant {
        failures: Vec<String>,
        stats: Box<RunStats>,
    },
}

#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub ops: u64,
    pub threads: usize,
    pub elapsed: Duration,
    pub cache_lookups: u64,
    pub cache_hits: u64,
    /// Longest data-delta chain seen while the workload ran.
    pub max_chain: usize,
    pub final_records: usize,
    pub sentinel_touches: u64,
    pub tree: StatsSnapshot,
}

impl RunStats {
    pub fn ops_per_sec(&self) -> f64 {
        self.ops as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }

    pub fn hit_ratio(&self) -> f64 {
        if self.cache_lookups == 0 {
            0.0
        } else {
            self.cache_hits as f64 / self.cache_lookups as f64
        }
    }
}

impl fmt::Display for RunStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ops={}", self.ops)?;
        writeln!(f, "threads={}", self.threads)?;
        writeln!(f, "elapsed_s={:.3}", self.elapsed.as_secs_f64())?;
        writeln!(f, "ops_per_sec={:.0}", self.ops_per_sec())?;
        writeln!(f, "cache_hit_ratio={:.4}", self.hit_ratio())?;
        writeln!(f, "max_chain={}", self.max_chain)?;
        writeln!(f, "final_records={}", self.final_records)?;
        writeln!(f, "sentinel_touches={}", self.sentinel_touches)?;
        writeln!(f, "cas_failures={}", self.tree.cas_failures())?;
        for (k, v) in self.tree.pairs() {
            if k != "ops" {
                writeln!(f, "{k}={v}")?;
            }
        }
        Ok(())
    }
}

pub fn key(id: u64) -> Vec<u8> {
    id.to_be_bytes().to_vec()
}

/// Values carry their key and the writing thread and sequence number, so a
/// read can be checked without knowing what other threads did.
fn value(id: u64, thread: u32, seq: u64) -> Vec<u8> {
    let mut v = Vec::with_capacity(20);
    v.extend_from_slice(&id.to_be_bytes());
    v.extend_from_slice(&thread.to_be_bytes());
    v.extend_from_slice(&seq.to_be_bytes());
    v
}

type Tag = (u32, u64);

fn decode(v: &[u8]) -> Option<(u64, Tag)> {
    if v.len() != 20 {
        return None;
    }
    let id = u64::from_be_bytes(v[..8].try_into().ok()?);
    let t = u32::from_be_bytes(v[8..12].try_into().ok()?);
    let s = u64::from_be_bytes(v[12..].try_into().ok()?);
    Some((id, (t, s)))
}

fn decode_key(k: &[u8]) -> Option<u64> {
    Some(u64::from_be_bytes(k.try_into().ok()?))
}

/// An acknowledged write: `tag` is `None` for deletes. `start` and `end`
/// are global tickets taken before the call and after it returned.
#[derive(Debug, Clone, Copy)]
struct Ack {
    id: u64,
    tag: Option<Tag>,
    start: u64,
    end: u64,
}

#[derive(Default)]
struct Failures {
    list: Vec<String>,
}

impl Failures {
    fn push(&mut self, msg: String) {
        if self.list.len() < MAX_REPORTED {
            self.list.push(msg);
        } else if self.list.len() == MAX_REPORTED {
            self.list.push("further failures suppressed".into());
        }
    }
}

struct ThreadLog {
    acks: Vec<Ack>,
    failures: Failures,
    lookups: u64,
    hits: u64,
}

/// Run `spec` on real threads, then verify the final contents against the
/// merged acknowledgement logs. With one thread every answer is also
/// compared against a sorted-map model.
pub fn run_stress(spec: &WorkloadSpec) -> Result<RunStats, StressError> {
    spec.validate()?;
    let sampler = KeySampler::new(spec.keys, spec.dist, spec.seed).map_err(SpecError::from)?;
    let tree = Tree::new(spec.tree.clone()).map_err(SpecError::from)?;
    let clock = AtomicU64::new(0);
    let running = AtomicUsize::new(spec.threads);
    let touches_before = sentinel_touches();
    let before = tree.stats().snapshot();

    let started = Instant::now();
    let (logs, max_chain, elapsed) = std::thread::scope(|s| {
        let handles: Vec<_> = (0..spec.threads)
            .map(|t| {
                let (tree, sampler, clock, running) = (&tree, &sampler, &clock, &running);
                s.spawn(move || {
                    let log = worker(spec, t, tree, sampler, clock);
                    running.fetch_sub(1, Ordering::SeqCst);
                    log
                })
            })
            .collect();
        let mut max_chain = 0;
        while running.load(Ordering::SeqCst) > 0 {
            max_chain = max_chain.max(tree.max_data_deltas());
            std::thread::sleep(Duration::from_millis(2));
        }
        let elapsed = started.elapsed();
        let logs: Vec<ThreadLog> = handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect();
        max_chain = max_chain.max(tree.max_data_deltas());
        (logs, max_chain, elapsed)
    });

    let mut failures = Failures::default();
    let mut acks: HashMap<u64, Vec<Ack>> = HashMap::new();
    let (mut lookups, mut hits) = (0, 0);
    for log in logs {
        for f in log.failures.list {
            failures.push(f);
        }
        for a in log.acks {
            acks.entry(a.id).or_default().push(a);
        }
        lookups += log.lookups;
        hits += log.hits;
    }

    tree.quiesce();
    let fin = tree.scan_all();
    verify_final(&fin, &acks, &mut failures);
    if tree.config().auto_smo {
        let longest = tree.max_data_deltas();
        if longest >= tree.config().consolidate_threshold {
            failures.push(format!("chain of {longest} data deltas after quiescing"));
        }
    }
    let stats = tree.stats().snapshot().since(&before);
    if stats.splits > stats.split_notices {
        failures.push(format!("{} splits from {} sNOTICEs", stats.splits, stats.split_notices));
    }
    let touched = sentinel_touches() - touches_before;
    if touched > 0 {
        failures.push(format!("{touched} reads through reclaimed state"));
    }

    let run = RunStats {
        ops: spec.ops,
        threads: spec.threads,
        elapsed,
        cache_lookups: lookups,
        cache_hits: hits,
        max_chain,
        final_records: fin.len(),
        sentinel_touches: touched,
        tree: stats,
    };
    if failures.list.is_empty() {
        Ok(run)
    } else {
        Err(StressError::Invariant {
            failures: failures.list,
            stats: Box::new(run),
        })
    }
}

fn worker(spec: &WorkloadSpec, t: usize, tree: &Tree, sampler: &KeySampler, clock: &AtomicU64) -> ThreadLog {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(t as u64 + 1);
    let mut cache = (spec.cache_bytes > 0).then(|| {
        RecordCache::new(CacheConfig {
            buffer_bytes: spec.cache_bytes,
            bucket_bits: (64 - spec.keys.leading_zeros()).clamp(8, 20),
            ..CacheConfig::default()
        })
    });
    // Exact model, only meaningful when this is the sole writer.
    let mut model = (spec.threads == 1).then(BTreeMap::<u64, Tag>::new);
    let mut log = ThreadLog {
        acks: Vec::new(),
        failures: Failures::default(),
        lookups: 0,
        hits: 0,
    };
    let tid = t as u32;
    for seq in 0..spec.ops_for(t) {
        let u: f64 = rng.random();
        let id = sampler.sample(&mut rng);
        match spec.mix.pick(u) {
            OpKind::Read => {
                let got = tree.get(&key(id));
                if let Some(v) = &got {
                    if decode(v).map(|d| d.0) != Some(id) {
                        log.failures.push(format!("get({id}) returned a value written for another key"));
                    }
                }
                if let Some(m) = &model {
                    let want = m.get(&id).map(|&(t, s)| value(id, t, s));
                    if got != want {
                        log.failures.push(format!("op {seq}: get({id}) = {got:?}, model has {want:?}"));
                    }
                }
                if let Some(c) = cache.as_mut() {
                    log.lookups += 1;
                    match c.get(id) {
                        Some(cached) => {
                            log.hits += 1;
                            // Private cache of the only writer: must agree.
                            if model.is_some() && Some(&cached).filter(|c| !c.is_empty()) != got.as_ref() {
                                log.failures.push(format!("cache answer for {id} disagrees with the tree"));
                            }
                        }
                        None => {
                            let _ = c.put_or_evict(id, got.as_deref().unwrap_or_default());
                        }
                    }
                }
            }
            kind @ (OpKind::Upsert | OpKind::Delete) => {
                let tag = (kind == OpKind::Upsert).then_some((tid, seq));
                let start = clock.fetch_add(1, Ordering::SeqCst);
                match tag {
                    Some((t, s)) => tree.upsert(&key(id), &value(id, t, s)),
                    None => tree.delete(&key(id)),
                }
                let end = clock.fetch_add(1, Ordering::SeqCst);
                log.acks.push(Ack { id, tag, start, end });
                if let Some(m) = model.as_mut() {
                    match tag {
                        Some(tag) => m.insert(id, tag),
                        None => m.remove(&id),
                    };
                }
                if let (Some(c), true) = (cache.as_mut(), model.is_some()) {
                    let bytes = tag.map(|(t, s)| value(id, t, s)).unwrap_or_default();
                    let _ = c.put_or_evict(id, &bytes);
                }
            }
            OpKind::Scan => {
                let hi = id.saturating_add(spec.scan_len);
                let got = match tree.range_scan(&key(id), &key(hi)) {
                    Ok(r) => r,
                    Err(TreeError::InvalidRange | TreeError::Config(_)) => unreachable!("low <= high"),
                };
                check_scan(id, hi, &got, &mut log.failures);
                if let Some(m) = &model {
                    let want: Vec<(Vec<u8>, Vec<u8>)> = m
                        .range(id..hi)
                        .map(|(&k, &(t, s))| (key(k), value(k, t, s)))
                        .collect();
                    if got != want {
                        log.failures.push(format!("op {seq}: scan [{id}, {hi}) differs from the model"));
                    }
                }
            }
        }
    }
    log
}

fn check_scan(lo: u64, hi: u64, got: &[(Vec<u8>, Vec<u8>)], failures: &mut Failures) {
    let mut prev = None;
    for (k, v) in got {
        let Some(id) = decode_key(k) else {
            failures.push(format!("scan returned malformed key {k:?}"));
            return;
        };
        if id < lo || id >= hi || prev.is_some_and(|p| p >= id) {
            failures.push(format!("scan [{lo}, {hi}) returned {id} out of order or range"));
        }
        if decode(v).map(|d| d.0) != Some(id) {
            failures.push(format!("scan returned a foreign value under {id}"));
        }
        prev = Some(id);
    }
}

/// Each key must hold the value of a write that no other write to that key
/// strictly followed, or be absent if that write was a delete.
fn verify_final(fin: &[(Vec<u8>, Vec<u8>)], acks: &HashMap<u64, Vec<Ack>>, failures: &mut Failures) {
    let mut seen: HashMap<u64, Option<Tag>> = HashMap::new();
    let mut prev = None;
    for (k, v) in fin {
        let Some(id) = decode_key(k) else {
            failures.push(format!("malformed key {k:?} in final state"));
            continue;
        };
        if prev.is_some_and(|p| p >= id) {
            failures.push(format!("final scan out of order at {id}"));
        }
        prev = Some(id);
        match decode(v) {
            Some((owner, tag)) if owner == id => {
                seen.insert(id, Some(tag));
            }
            _ => failures.push(format!("foreign value under {id} in final state")),
        }
    }
    for id in seen.keys() {
        if !acks.contains_key(id) {
            failures.push(format!("{id} present but never written"));
        }
    }
    for (id, writes) in acks {
        let last_start = writes.iter().map(|a| a.start).max().expect("non-empty");
        let allowed: Vec<Option<Tag>> = writes.iter().filter(|a| a.end >= last_start).map(|a| a.tag).collect();
        let got = seen.get(id).copied().flatten();
        if !allowed.contains(&got) {
            failures.push(format!("{id} holds {got:?}, last acknowledged writes {allowed:?}"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_round_trip() {
        let v = value(7, 3, 99);
        assert_eq!(decode(&v), Some((7, (3, 99))));
        assert_eq!(decode(b"short"), None);
        assert_eq!(decode_key(&key(42)), Some(42));
    }

    #[test]
    fn final_state_accepts_any_unfollowed_write() {
        let mut acks = HashMap::new();
        acks.insert(
            1,
            vec![
                Ack { id: 1, tag: Some((0, 0)), start: 0, end: 3 },
                Ack { id: 1, tag: Some((1, 0)), start: 1, end: 2 },
            ],
        );
        for t in [0, 1] {
            let mut f = Failures::default();
            verify_final(&[(key(1), value(1, t, 0))], &acks, &mut f);
            assert!(f.list.is_empty(), "{:?}", f.list);
        }
        acks.get_mut(&1).unwrap()[1] = Ack { id: 1, tag: None, start: 4, end: 5 };
        let mut f = Failures::default();
        verify_final(&[(key(1), value(1, 0, 0))], &acks, &mut f);
        assert_eq!(f.list.len(), 1);
        let mut f = Failures::default();
        verify_final(&[], &acks, &mut f);
        assert!(f.list.is_empty());
    }
}
