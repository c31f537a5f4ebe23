//! Schedule enumeration, sampling and replay.
//!
//! Exploration is stateless: every schedule runs on a fresh instance from
//! the start. The exhaustive search is a depth-first walk over choice
//! points; after each run it backtracks to the deepest step where a
//! higher-numbered machine could have gone instead.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::task::Poll;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::check::{self, CheckState, Failure};
use super::{Outcome, Role, Scenario};
use crate::smo::SplitOutcome;
use crate::step::{poll_once, take_write};

pub const DEFAULT_BOUND: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HarnessError {
    #[error("{scenario}: {count} interleavings exceed the bound of {bound}")]
    Explosion { scenario: String, count: u128, bound: u64 },
    #[error("schedule does not fit scenario: {0}")]
    Mismatch(String),
    #[error("bad schedule text: {0}")]
    Parse(String),
}

/// Machine chosen at each step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Schedule {
    pub choices: Vec<usize>,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.choices.iter().map(usize::to_string).collect();
        f.write_str(&s.join(" "))
    }
}

impl FromStr for Schedule {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split_whitespace()
            .map(|t| t.parse().map_err(|_| HarnessError::Parse(t.to_string())))
            .collect::<Result<_, _>>()
            .map(|choices| Schedule { choices })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub checker: &'static str,
    pub message: String,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScenarioReport {
    pub scenario: String,
    pub schedules: u64,
    /// First violation per checker, shortest schedule first.
    pub violations: Vec<Violation>,
    pub coverage: BTreeMap<String, u64>,
    /// Order-independent hash of the set of schedules run.
    pub digest: u64,
    /// Hash of the final tree contents, for single runs.
    pub final_state: Option<u64>,
}

impl ScenarioReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn absorb(&mut self, run: Run) {
        self.schedules += 1;
        self.digest = self.digest.wrapping_add(hash_of(&run.schedule));
        self.final_state = Some(run.final_state);
        for (k, v) in run.coverage {
            *self.coverage.entry(k).or_default() += v;
        }
        if let Some((checker, message)) = run.failure {
            self.add_violation(Violation {
                checker,
                message,
                schedule: run.schedule,
            });
        }
    }

    fn add_violation(&mut self, v: Violation) {
        match self.violations.iter_mut().find(|x| x.checker == v.checker) {
            Some(x) => {
                let key = |v: &Violation| (v.schedule.choices.len(), v.schedule.clone());
                if key(&v) < key(x) {
                    *x = v;
                }
            }
            None => {
                self.violations.push(v);
                self.violations.sort_by_key(|v| v.checker);
            }
        }
    }

    fn merge(&mut self, other: ScenarioReport) {
        self.schedules += other.schedules;
        self.digest = self.digest.wrapping_add(other.digest);
        for (k, v) in other.coverage {
            *self.coverage.entry(k).or_default() += v;
        }
        for v in other.violations {
            self.add_violation(v);
        }
        self.final_state = None;
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.is_clean() { "ok" } else { "FAILED" };
        writeln!(f, "scenario={} status={} schedules={}", self.scenario, status, self.schedules)?;
        for (k, v) in &self.coverage {
            writeln!(f, "  {k}={v}")?;
        }
        for v in &self.violations {
            writeln!(f, "  violation [{}] {}", v.checker, v.message)?;
            writeln!(f, "  schedule: {}", v.schedule)?;
        }
        Ok(())
    }
}

fn hash_of<T: Hash>(t: &T) -> u64 {
    let mut h = DefaultHasher::new();
    t.hash(&mut h);
    h.finish()
}

/// One complete or aborted schedule.
struct Run {
    schedule: Schedule,
    /// Machines that could run at each step, ascending.
    enabled: Vec<Vec<usize>>,
    failure: Option<Failure>,
    coverage: Vec<(String, u64)>,
    final_state: u64,
}

#[derive(Debug, Clone)]
pub struct Explorer {
    /// Largest number of schedules an exhaustive search may run.
    pub bound: u64,
    /// Steps after which a schedule counts as not making progress.
    pub max_steps: usize,
    /// Run the checkers after every step, not only at the end.
    pub per_step: bool,
    /// Add a checker that is wrong on purpose, to exercise failure reporting.
    pub self_test: bool,
    /// Spread the search over the rayon pool. Ignored without the
    /// `parallel` feature.
    pub parallel: bool,
}

impl Default for Explorer {
    fn default() -> Self {
        Self {
            bound: DEFAULT_BOUND,
            max_steps: 2_000,
            per_step: true,
            self_test: false,
            parallel: true,
        }
    }
}

impl Explorer {
    /// Run `scn` following `prefix`, then `pick` among the enabled machines.
    fn execute(
        &self,
        scn: &Scenario,
        prefix: &[usize],
        mut pick: impl FnMut(&[usize]) -> Option<usize>,
    ) -> Result<Run, HarnessError> {
        let inst = scn.instance();
        let tree = inst.tree;
        let roles: Vec<Role> = inst.machines.iter().map(|m| m.role.clone()).collect();
        let mut futs: Vec<_> = inst.machines.into_iter().map(|m| Some(m.fut)).collect();
        let n = futs.len();
        let mut outcomes: Vec<Option<Outcome>> = vec![None; n];
        let mut spans = vec![(usize::MAX, usize::MAX); n];
        let mut started = vec![false; n];
        let mut state = CheckState::new(&tree, &roles);
        let mut choices = Vec::new();
        let mut enabled_at = Vec::new();
        let mut failure = None;
        let mut step = 0;
        loop {
            let enabled: Vec<usize> = (0..n).filter(|&i| futs[i].is_some()).collect();
            if enabled.is_empty() {
                break;
            }
            if step >= self.max_steps {
                failure = Some((check::PROGRESS, format!("no completion after {step} steps")));
                break;
            }
            let m = match prefix.get(step) {
                Some(&m) if enabled.contains(&m) => m,
                Some(&m) => {
                    return Err(HarnessError::Mismatch(format!(
                        "machine {m} cannot run at step {step}"
                    )))
                }
                None => match pick(&enabled) {
                    Some(i) => enabled[i],
                    None => {
                        return Err(HarnessError::Mismatch(format!(
                            "schedule ends at step {step} with machines {enabled:?} unfinished"
                        )))
                    }
                },
            };
            choices.push(m);
            enabled_at.push(enabled);
            if !started[m] {
                started[m] = true;
                spans[m].0 = step;
            }
            let fut = futs[m].as_mut().expect("enabled machine");
            take_write();
            if let Poll::Ready(o) = poll_once(fut.as_mut()) {
                futs[m] = None;
                outcomes[m] = Some(o);
                spans[m].1 = step;
            }
            step += 1;
            if self.per_step {
                // A step that only read leaves nothing new to check.
                if let Err(f) = state.on_step(&tree, &roles, &started, take_write()) {
                    failure = Some(f);
                    break;
                }
            }
        }
        drop(futs);
        let mut coverage = Vec::new();
        if failure.is_none() {
            let outcomes: Vec<Outcome> = outcomes.into_iter().map(|o| o.expect("finished")).collect();
            failure = state
                .on_finish(&tree, &roles, &outcomes, &spans)
                .err()
                .or_else(|| {
                    let fin = state.finished(&tree, &roles, &outcomes);
                    if let Some(l) = &scn.label {
                        coverage.extend(l(&fin).into_iter().map(|s| (s, 1)));
                    }
                    scn.check
                        .as_ref()
                        .and_then(|c| c(&fin).err())
                        .map(|e| (check::SCENARIO, e))
                })
                .or_else(|| {
                    (self.self_test && choices.last() == Some(&0))
                        .then(|| (check::SELF_TEST, "machine 0 took the last step".to_string()))
                });
            for (i, (r, o)) in roles.iter().zip(&outcomes).enumerate() {
                let label = match (r, o) {
                    (Role::Consolidate(_), Outcome::Flag(true)) => format!("won.consolidate.m{i}"),
                    (Role::Split(_), Outcome::Split(SplitOutcome::Won { .. })) => format!("won.split.m{i}"),
                    (Role::Takeover(_), Outcome::Flag(true)) => format!("won.takeover.m{i}"),
                    _ => continue,
                };
                coverage.push((label, 1));
            }
        }
        let stats = tree.stats().snapshot().since(&state.stats);
        coverage.extend(
            stats
                .pairs()
                .into_iter()
                .filter(|(_, v)| *v > 0)
                .map(|(k, v)| (k.to_string(), v)),
        );
        if let Some((c, _)) = &failure {
            coverage.push((format!("violation.{c}"), 1));
        }
        let final_state = hash_of(&tree.snapshot());
        Ok(Run {
            schedule: Schedule { choices },
            enabled: enabled_at,
            failure,
            coverage,
            final_state,
        })
    }

    /// Interleavings of the machines if each took as many steps as it does
    /// running alone. Races usually cut some machines short, so the real
    /// count can be much lower.
    pub fn estimate(&self, scn: &Scenario) -> Result<u128, HarnessError> {
        let n = scn.instance().machines.len();
        let mut steps = Vec::with_capacity(n);
        for i in 0..n {
            let inst = scn.instance();
            let mut fut = inst.machines.into_iter().nth(i).expect("machine").fut;
            let mut k = 1u32;
            while poll_once(fut.as_mut()).is_pending() {
                k += 1;
                if k as usize > self.max_steps {
                    return Err(HarnessError::Mismatch(format!("machine {i} does not finish alone")));
                }
            }
            steps.push(k);
        }
        Ok(multinomial(&steps))
    }

    /// Every schedule of `scn`.
    pub fn explore_exhaustive(&self, scn: &Scenario) -> Result<ScenarioReport, HarnessError> {
        let counter = AtomicU64::new(0);
        let mut report = ScenarioReport {
            scenario: scn.name.clone(),
            ..ScenarioReport::default()
        };
        for part in self.subtrees(scn, &counter)? {
            report.merge(part);
        }
        Ok(report)
    }

    #[cfg(feature = "parallel")]
    fn subtrees(&self, scn: &Scenario, counter: &AtomicU64) -> Result<Vec<ScenarioReport>, HarnessError> {
        use rayon::prelude::*;
        if !self.parallel {
            return Ok(vec![self.dfs_from(scn, Vec::new(), counter)?]);
        }
        let frontier = self.frontier(scn, 4 * rayon::current_num_threads())?;
        frontier
            .into_par_iter()
            .map(|p| self.dfs_from(scn, p, counter))
            .collect()
    }

    #[cfg(not(feature = "parallel"))]
    fn subtrees(&self, scn: &Scenario, counter: &AtomicU64) -> Result<Vec<ScenarioReport>, HarnessError> {
        Ok(vec![self.dfs_from(scn, Vec::new(), counter)?])
    }

    /// Schedule prefixes, at least `want` of them when the tree is wide
    /// enough, whose subtrees partition the whole search.
    #[cfg_attr(not(feature = "parallel"), allow(dead_code))]
    fn frontier(&self, scn: &Scenario, want: usize) -> Result<Vec<Vec<usize>>, HarnessError> {
        let mut layer: Vec<Vec<usize>> = vec![Vec::new()];
        for depth in 0..8 {
            if layer.len() >= want {
                break;
            }
            let mut next = Vec::new();
            for p in layer {
                let run = self.execute(scn, &p, |_| Some(0))?;
                if run.failure.is_some() || run.schedule.choices.len() <= depth {
                    next.push(p);
                    continue;
                }
                for &c in &run.enabled[depth] {
                    let mut q = p.clone();
                    q.push(c);
                    next.push(q);
                }
            }
            layer = next;
        }
        Ok(layer)
    }

    /// Every schedule that starts with `prefix`.
    fn dfs_from(&self, scn: &Scenario, prefix: Vec<usize>, counter: &AtomicU64) -> Result<ScenarioReport, HarnessError> {
        let mut report = ScenarioReport {
            scenario: scn.name.clone(),
            ..ScenarioReport::default()
        };
        let fixed = prefix.len();
        let mut cur = prefix;
        loop {
            let run = self.execute(scn, &cur, |_| Some(0))?;
            let n = counter.fetch_add(1, Ordering::Relaxed) + 1;
            if n > self.bound {
                return Err(HarnessError::Explosion {
                    scenario: scn.name.clone(),
                    count: n as u128,
                    bound: self.bound,
                });
            }
            let mut next = None;
            for i in (fixed..run.schedule.choices.len()).rev() {
                let en = &run.enabled[i];
                let pos = en
                    .iter()
                    .position(|&c| c == run.schedule.choices[i])
                    .expect("choice was enabled");
                if let Some(&alt) = en.get(pos + 1) {
                    let mut p = run.schedule.choices[..i].to_vec();
                    p.push(alt);
                    next = Some(p);
                    break;
                }
            }
            report.absorb(run);
            match next {
                Some(p) => cur = p,
                None => break,
            }
        }
        report.final_state = None;
        Ok(report)
    }

    /// `schedules` random schedules; the choice at each step is uniform over
    /// the runnable machines. Deterministic for a given seed.
    pub fn explore_random(&self, scn: &Scenario, schedules: u64, seed: u64) -> Result<ScenarioReport, HarnessError> {
        let one = |i: u64| -> Result<ScenarioReport, HarnessError> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            let run = self.execute(scn, &[], |en| Some(rng.random_range(0..en.len())))?;
            let mut r = ScenarioReport::default();
            r.absorb(run);
            Ok(r)
        };
        #[cfg(feature = "parallel")]
        let parts: Vec<_> = if self.parallel {
            use rayon::prelude::*;
            (0..schedules).into_par_iter().map(one).collect::<Result<_, _>>()?
        } else {
            (0..schedules).map(one).collect::<Result<_, _>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let parts: Vec<_> = (0..schedules).map(one).collect::<Result<_, _>>()?;
        let mut report = ScenarioReport {
            scenario: scn.name.clone(),
            ..ScenarioReport::default()
        };
        for p in parts {
            report.merge(p);
        }
        Ok(report)
    }

    /// Run exactly `schedule`.
    pub fn replay(&self, scn: &Scenario, schedule: &Schedule) -> Result<ScenarioReport, HarnessError> {
        let run = self.execute(scn, &schedule.choices, |_| None)?;
        if run.failure.is_none() && run.schedule.choices.len() != schedule.choices.len() {
            return Err(HarnessError::Mismatch(format!(
                "machines finished after {} of {} steps",
                run.schedule.choices.len(),
                schedule.choices.len()
            )));
        }
        let mut report = ScenarioReport {
            scenario: scn.name.clone(),
            ..ScenarioReport::default()
        };
        report.absorb(run);
        Ok(report)
    }
}

/// `(sum k)! / prod(k!)`, saturating.
fn multinomial(ks: &[u32]) -> u128 {
    let mut total: u128 = 1;
    let mut n: u128 = 0;
    for &k in ks {
        for i in 1..=k as u128 {
            n += 1;
            // total * n / i stays integral: total is C(n-1, i-1)-scaled.
            total = match total.checked_mul(n) {
                Some(t) => t / i,
                None => return u128::MAX,
            };
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multinomials() {
        assert_eq!(multinomial(&[1, 1]), 2);
        assert_eq!(multinomial(&[3, 3]), 20);
        assert_eq!(multinomial(&[2, 2, 2]), 90);
        assert_eq!(multinomial(&[5]), 1);
    }

    #[test]
    fn schedule_text_round_trip() {
        let s: Schedule = "0 1 1 0 2".parse().unwrap();
        assert_eq!(s.choices, vec![0, 1, 1, 0, 2]);
        assert_eq!(s.to_string().parse::<Schedule>().unwrap(), s);
        assert!("0 x".parse::<Schedule>().is_err());
    }
}
