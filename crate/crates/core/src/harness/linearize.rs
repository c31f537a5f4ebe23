//! Brute-force linearizability check for small histories.

use std::collections::BTreeMap;

use super::{OpDesc, Outcome};
use crate::chain::{Key, Value};

/// Apply `op` to `model` and return what a sequential tree would answer.
fn apply(model: &mut BTreeMap<Key, Value>, op: &OpDesc) -> Outcome {
    match op {
        OpDesc::Get(k) => Outcome::Value(model.get(k).cloned()),
        OpDesc::Upsert(k, v) => {
            model.insert(k.clone(), v.clone());
            Outcome::Done
        }
        OpDesc::Delete(k) => {
            model.remove(k);
            Outcome::Done
        }
        OpDesc::Scan(lo, hi) => Outcome::Records(if lo >= hi {
            Vec::new()
        } else {
            model
                .range(lo.clone()..hi.clone())
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        }),
    }
}

/// Whether some order of `ops` that respects real time (an op that ended
/// before another started stays before it) reproduces every outcome and
/// leaves `initial` equal to `final_state`.
///
/// Each entry is `(op, outcome, start step, end step)`.
pub fn linearizable(
    initial: &BTreeMap<Key, Value>,
    ops: &[(OpDesc, Outcome, usize, usize)],
    final_state: &BTreeMap<Key, Value>,
) -> bool {
    fn go(
        model: &BTreeMap<Key, Value>,
        ops: &[(OpDesc, Outcome, usize, usize)],
        placed: &mut Vec<bool>,
        left: usize,
        final_state: &BTreeMap<Key, Value>,
    ) -> bool {
        if left == 0 {
            return model == final_state;
        }
        for i in 0..ops.len() {
            if placed[i] {
                continue;
            }
            // Every op that finished before `i` started must already be placed.
            let ready = (0..ops.len()).all(|j| placed[j] || j == i || ops[j].3 >= ops[i].2);
            if !ready {
                continue;
            }
            let mut m = model.clone();
            if apply(&mut m, &ops[i].0) != ops[i].1 {
                continue;
            }
            placed[i] = true;
            let ok = go(&m, ops, placed, left - 1, final_state);
            placed[i] = false;
            if ok {
                return true;
            }
        }
        false
    }
    go(initial, ops, &mut vec![false; ops.len()], ops.len(), final_state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(s: &str) -> Vec<u8> {
        s.as_bytes().to_vec()
    }

    #[test]
    fn overlapping_writes_may_go_either_way() {
        let ops = vec![
            (OpDesc::Upsert(b("k"), b("1")), Outcome::Done, 0, 5),
            (OpDesc::Upsert(b("k"), b("2")), Outcome::Done, 1, 4),
        ];
        for v in ["1", "2"] {
            let fin = BTreeMap::from([(b("k"), b(v))]);
            assert!(linearizable(&BTreeMap::new(), &ops, &fin));
        }
    }

    #[test]
    fn real_time_order_is_respected() {
        let ops = vec![
            (OpDesc::Upsert(b("k"), b("1")), Outcome::Done, 0, 1),
            (OpDesc::Upsert(b("k"), b("2")), Outcome::Done, 2, 3),
        ];
        let fin = BTreeMap::from([(b("k"), b("1"))]);
        assert!(!linearizable(&BTreeMap::new(), &ops, &fin));
    }

    #[test]
    fn reads_must_match() {
        let ops = vec![
            (OpDesc::Upsert(b("k"), b("1")), Outcome::Done, 0, 1),
            (OpDesc::Get(b("k")), Outcome::Value(None), 2, 3),
        ];
        let fin = BTreeMap::from([(b("k"), b("1"))]);
        assert!(!linearizable(&BTreeMap::new(), &ops, &fin));
    }
}
