use std::fmt;
use std::str::FromStr;

use noticekv::workload::{DistError, KeyDist};
use noticekv::{ConfigError, TreeConfig};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("mix must be four fractions r:u:d:s, got `{0}`")]
    MixShape(String),
    #[error("bad fraction `{0}` in mix")]
    Fraction(String),
    #[error("mix fractions sum to {0}, not 1")]
    MixSum(f64),
    #[error("key space must be non-empty")]
    NoKeys,
    #[error("need at least one thread")]
    NoThreads,
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Fractions of reads, upserts, deletes and scans.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mix {
    pub read: f64,
    pub upsert: f64,
    pub delete: f64,
    pub scan: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Read,
    Upsert,
    Delete,
    Scan,
}

impl Mix {
    pub fn new(read: f64, upsert: f64, delete: f64, scan: f64) -> Result<Self, SpecError> {
        let parts = [read, upsert, delete, scan];
        if let Some(bad) = parts.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(SpecError::Fraction(bad.to_string()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SpecError::MixSum(sum));
        }
        Ok(Self {
            read,
            upsert,
            delete,
            scan,
        })
    }

    /// Operation for a uniform draw `u` in `[0, 1)`.
    pub fn pick(&self, u: f64) -> OpKind {
        if u < self.read {
            OpKind::Read
        } else if u < self.read + self.upsert {
            OpKind::Upsert
        } else if u < self.read + self.upsert + self.delete {
            OpKind::Delete
        } else {
            OpKind::Scan
        }
    }

    pub fn writes(&self) -> bool {
        self.upsert > 0.0 || self.delete > 0.0
    }
}

impl FromStr for Mix {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 4 {
            return Err(SpecError::MixShape(s.to_string()));
        }
        let mut f = [0.0; 4];
        for (slot, p) in f.iter_mut().zip(&parts) {
            *slot = p.trim().parse().map_err(|_| SpecError::Fraction(p.to_string()))?;
        }
        Mix::new(f[0], f[1], f[2], f[3])
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.read, self.upsert, self.delete, self.scan)
    }
}

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub mix: Mix,
    pub keys: u64,
    pub dist: KeyDist,
    pub ops: u64,
    pub threads: usize,
    pub seed: u64,
    /// Keys covered by one scan.
    pub scan_len: u64,
    /// Record cache size per thread; 0 disables the cache.
    pub cache_bytes: u64,
    pub tree: TreeConfig,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            mix: Mix::new(0.5, 0.3, 0.15, 0.05).expect("valid mix"),
            keys: 10_000,
            dist: KeyDist::Uniform,
            ops: 100_000,
            threads: 1,
            seed: 1,
            scan_len: 16,
            cache_bytes: 1 << 20,
            tree: TreeConfig::default(),
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.keys == 0 {
            return Err(SpecError::NoKeys);
        }
        if self.threads == 0 {
            return Err(SpecError::NoThreads);
        }
        self.tree.validate()?;
        Ok(())
    }

    /// Operations run by thread `t`.
    pub fn ops_for(&self, t: usize) -> u64 {
        let n = self.threads as u64;
        self.ops / n + u64::from((t as u64) < self.ops % n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_parses_and_checks_sum() {
        let m: Mix = "0.5:0.3:0.15:0.05".parse().unwrap();
        assert_eq!(m.pick(0.1), OpKind::Read);
        assert_eq!(m.pick(0.6), OpKind::Upsert);
        assert_eq!(m.pick(0.9), OpKind::Delete);
        assert_eq!(m.pick(0.99), OpKind::Scan);
        assert!(matches!("0.5:0.5:0.1:0.1".parse::<Mix>(), Err(SpecError::MixSum(s)) if (s - 1.2).abs() < 1e-12));
        assert!(matches!("1:0:0".parse::<Mix>(), Err(SpecError::MixShape(_))));
        assert!(matches!("1:0:x:0".parse::<Mix>(), Err(SpecError::Fraction(_))));
    }

    #[test]
    fn ops_are_split_across_threads() {
        let s = WorkloadSpec {
            ops: 10,
            threads: 4,
            ..WorkloadSpec::default()
        };
        let per: Vec<u64> = (0..4).map(|t| s.ops_for(t)).collect();
        assert_eq!(per, vec![3, 3, 2, 2]);
    }
}
