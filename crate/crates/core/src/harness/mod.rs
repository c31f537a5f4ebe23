//! Deterministic interleaving of tree operations.
//!
//! A scenario builds a fresh tree plus a handful of suspended operations
//! (machines), each an `async` tree call made with [`Pace::Stepped`]. One
//! poll of a machine runs it up to its next shared read or install, so
//! choosing which machine to poll next is choosing an interleaving of atomic
//! steps. Everything runs on one thread. The explorer enumerates every
//! schedule, or samples them at random, and runs the checkers after each
//! step and at completion.

mod check;
mod explore;
mod linearize;
pub mod scenarios;

use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;

use crate::chain::{Key, Value};
use crate::mapping::PageId;
use crate::smo::{MergeOutcome, MergePlan, SmoError, SplitOutcome};
use crate::step::Pace;
use crate::tree::Tree;

pub use explore::{Explorer, HarnessError, ScenarioReport, Schedule, Violation, DEFAULT_BOUND};
pub use linearize::linearizable;

/// A logical data operation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum OpDesc {
    Get(Key),
    Upsert(Key, Value),
    Delete(Key),
    /// Half-open range `[low, high)`.
    Scan(Key, Key),
}

impl OpDesc {
    /// Key and new value if this op writes.
    pub fn write(&self) -> Option<(&Key, Option<&Value>)> {
        match self {
            OpDesc::Upsert(k, v) => Some((k, Some(v))),
            OpDesc::Delete(k) => Some((k, None)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Outcome {
    Done,
    Value(Option<Value>),
    Records(Vec<(Key, Value)>),
    Flag(bool),
    Split(SplitOutcome),
    Merge(Result<MergeOutcome, SmoError>),
    Offset(u64, u64),
}

/// What a machine does, as far as the checkers are concerned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Role {
    Op(OpDesc),
    Consolidate(PageId),
    Split(PageId),
    Merge(PageId),
    Takeover(PageId),
    Other(&'static str),
}

type Fut = Pin<Box<dyn Future<Output = Outcome>>>;

pub struct Machine {
    pub role: Role,
    fut: Fut,
}

impl std::fmt::Debug for Machine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Machine").field("role", &self.role).finish()
    }
}

impl Machine {
    pub fn new(role: Role, fut: impl Future<Output = Outcome> + 'static) -> Self {
        Self {
            role,
            fut: Box::pin(fut),
        }
    }

    /// A machine taking exactly `n` polls and touching nothing.
    pub fn steps(n: usize) -> Self {
        assert!(n >= 1);
        Self::new(Role::Other("steps"), async move {
            for _ in 1..n {
                Pace::Stepped.step().await;
            }
            Outcome::Done
        })
    }

    pub fn op(tree: &Arc<Tree>, op: OpDesc) -> Self {
        let t = tree.clone();
        let o = op.clone();
        Self::new(Role::Op(op), async move {
            let p = Pace::Stepped;
            match o {
                OpDesc::Get(k) => Outcome::Value(t.get_with(&k, p).await),
                OpDesc::Upsert(k, v) => {
                    t.upsert_with(&k, &v, p).await;
                    Outcome::Done
                }
                OpDesc::Delete(k) => {
                    t.delete_with(&k, p).await;
                    Outcome::Done
                }
                OpDesc::Scan(lo, hi) => Outcome::Records(
                    t.range_scan_with(&lo, &hi, p).await.expect("scenario ranges are valid"),
                ),
            }
        })
    }

    pub fn consolidate(tree: &Arc<Tree>, pid: PageId) -> Self {
        let t = tree.clone();
        Self::new(Role::Consolidate(pid), async move {
            Outcome::Flag(t.consolidate_with(pid, Pace::Stepped).await)
        })
    }

    pub fn split(tree: &Arc<Tree>, pid: PageId, key: Option<Key>) -> Self {
        let t = tree.clone();
        Self::new(Role::Split(pid), async move {
            Outcome::Split(t.split_with(pid, key.as_deref(), Pace::Stepped).await)
        })
    }

    pub fn merge(tree: &Arc<Tree>, plan: MergePlan) -> Self {
        let t = tree.clone();
        Self::new(Role::Merge(plan.dead), async move {
            Outcome::Merge(t.merge_with(&plan, Pace::Stepped).await)
        })
    }

    /// Take over any stale notice on `pid`.
    pub fn takeover(tree: &Arc<Tree>, pid: PageId) -> Self {
        let t = tree.clone();
        Self::new(Role::Takeover(pid), async move {
            Outcome::Flag(t.maybe_takeover_with(pid, Pace::Stepped).await)
        })
    }

    /// Run the first `polls` steps now, alone, before exploration starts.
    pub fn after_polls(mut self, polls: usize) -> Self {
        for i in 0..polls {
            assert!(
                crate::step::poll_once(self.fut.as_mut()).is_pending(),
                "machine finished after {i} polls"
            );
        }
        self
    }

    /// Try `n` epoch advances, one per step.
    pub fn advance_epochs(tree: &Arc<Tree>, n: usize) -> Self {
        let t = tree.clone();
        Self::new(Role::Other("epochs"), async move {
            for _ in 0..n {
                Pace::Stepped.step().await;
                t.advance_epoch();
            }
            Outcome::Done
        })
    }
}

/// A fresh tree and the machines to interleave on it.
#[derive(Debug)]
pub struct Instance {
    pub tree: Arc<Tree>,
    pub machines: Vec<Machine>,
}

/// Everything a scenario-specific check sees once all machines finished.
#[derive(Debug)]
pub struct Final<'a> {
    pub tree: &'a Tree,
    pub roles: &'a [Role],
    pub outcomes: &'a [Outcome],
    /// Stats counters accumulated while the machines ran.
    pub stats: crate::tree::StatsSnapshot,
}

type Build = dyn Fn() -> Instance + Send + Sync;
type Check = dyn Fn(&Final<'_>) -> Result<(), String> + Send + Sync;
type Label = dyn Fn(&Final<'_>) -> Vec<String> + Send + Sync;

#[derive(Clone)]
pub struct Scenario {
    pub name: String,
    build: Arc<Build>,
    check: Option<Arc<Check>>,
    label: Option<Arc<Label>>,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario").field("name", &self.name).finish()
    }
}

impl Scenario {
    pub fn new(name: impl Into<String>, build: impl Fn() -> Instance + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            build: Arc::new(build),
            check: None,
            label: None,
        }
    }

    /// Extra condition checked after every complete schedule.
    pub fn with_check(
        mut self,
        check: impl Fn(&Final<'_>) -> Result<(), String> + Send + Sync + 'static,
    ) -> Self {
        self.check = Some(Arc::new(check));
        self
    }

    /// Labels counted in the report's coverage map, e.g. which machine won.
    pub fn with_labels(mut self, label: impl Fn(&Final<'_>) -> Vec<String> + Send + Sync + 'static) -> Self {
        self.label = Some(Arc::new(label));
        self
    }

    pub fn instance(&self) -> Instance {
        (self.build)()
    }
}
