//! Cache economics: what one operation costs when the data it touches is
//! kept in DRAM versus on flash, and the access interval at which the two
//! are equal.
//!
//! For a cached unit of `size` bytes accessed `rop` times per second:
//!
//! ```text
//! ssd = io_op  + flash_rent * size / rop      where io_op = cpu_op + io_overhead
//! mem = cpu_op + mem_rent   * size / rop
//! ```
//!
//! The two are equal at `1 / rop = io_overhead / ((mem_rent - flash_rent) * size)`.

use std::fmt;
use std::io::{self, Write};

use lru::LruCache;
use thiserror::Error;

const DEFAULT_PARAMS: &str = include_str!("../params/default.params");
const REL_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing parameter `{0}`")]
    Missing(&'static str),
    #[error("parameter `{0}` must be finite and non-negative")]
    Negative(&'static str),
    #[error("io_op {io_op} differs from cpu_op + io_overhead = {sum}")]
    IoIdentity { io_op: f64, sum: f64 },
    #[error("break-even needs mem_rent > flash_rent and io_overhead > 0")]
    Degenerate,
    #[error("{0}")]
    Input(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    mem_rent: f64,
    flash_rent: f64,
    cpu_op: f64,
    io_overhead: f64,
}

impl CostParams {
    pub fn new(mem_rent: f64, flash_rent: f64, cpu_op: f64, io_overhead: f64) -> Result<Self, CostError> {
        for (name, v) in [
            ("mem_rent", mem_rent),
            ("flash_rent", flash_rent),
            ("cpu_op", cpu_op),
            ("io_overhead", io_overhead),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CostError::Negative(name));
            }
        }
        Ok(Self {
            mem_rent,
            flash_rent,
            cpu_op,
            io_overhead,
        })
    }

    /// Build from a total per-I/O cost, which must equal `cpu_op + io_overhead`.
    pub fn with_io_op(
        mem_rent: f64,
        flash_rent: f64,
        cpu_op: f64,
        io_overhead: f64,
        io_op: f64,
    ) -> Result<Self, CostError> {
        let p = Self::new(mem_rent, flash_rent, cpu_op, io_overhead)?;
        let sum = p.io_op();
        if (io_op - sum).abs() > REL_EPS * sum.abs().max(f64::MIN_POSITIVE) {
            return Err(CostError::IoIdentity { io_op, sum });
        }
        Ok(p)
    }

    /// Parse `key = value` lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CostError> {
        let mut vals: [Option<f64>; 4] = [None; 4];
        const KEYS: [&str; 4] = ["mem_rent", "flash_rent", "cpu_op", "io_overhead"];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| CostError::Parse {
                line,
                msg: format!("expected key = value, got `{l}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let slot = KEYS.iter().position(|x| *x == k).ok_or_else(|| CostError::Parse {
                line,
                msg: format!("unknown key `{k}`"),
            })?;
            let x = v.parse::<f64>().map_err(|_| CostError::Parse {
                line,
                msg: format!("`{v}` is not a number"),
            })?;
            vals[slot] = Some(x);
        }
        let get = |i: usize| vals[i].ok_or(CostError::Missing(KEYS[i]));
        Self::new(get(0)?, get(1)?, get(2)?, get(3)?)
    }

    pub fn mem_rent(&self) -> f64 {
        self.mem_rent
    }
    pub fn flash_rent(&self) -> f64 {
        self.flash_rent
    }
    pub fn cpu_op(&self) -> f64 {
        self.cpu_op
    }
    pub fn io_overhead(&self) -> f64 {
        self.io_overhead
    }
    pub fn io_op(&self) -> f64 {
        self.cpu_op + self.io_overhead
    }
}

impl Default for CostParams {
    fn default() -> Self {
        Self::parse(DEFAULT_PARAMS).expect("shipped parameter file parses")
    }
}

/// Cost per operation with the unit on flash.
pub fn cost_per_op_ssd(p: &CostParams, size: f64, rop: f64) -> f64 {
    p.io_op() + p.flash_rent * size / rop
}

/// Cost per operation with the unit in DRAM.
pub fn cost_per_op_mem(p: &CostParams, size: f64, rop: f64) -> f64 {
    p.cpu_op + p.mem_rent * size / rop
}

/// Access interval, in seconds, at which both placements cost the same.
pub fn break_even_interval(p: &CostParams, size: f64) -> Result<f64, CostError> {
    if size.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(CostError::Input("unit size must be positive"));
    }
    if p.mem_rent <= p.flash_rent || p.io_overhead <= 0.0 {
        return Err(CostError::Degenerate);
    }
    Ok(p.io_overhead / ((p.mem_rent - p.flash_rent) * size))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Ssd,
    Mem,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Ssd => "ssd",
            Tier::Mem => "mem",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub size: f64,
    pub rop: f64,
    pub ss_cost: f64,
    pub mm_cost: f64,
    pub cheaper: Tier,
}

/// `n` rates spaced evenly on a log scale from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, CostError> {
    if n == 0 || !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(CostError::Input("rate grid needs 0 < lo <= hi and at least one point"));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect())
}

/// Cost of both placements for every size and rate. Ties go to flash.
pub fn crossover_curves(p: &CostParams, sizes: &[f64], rates: &[f64]) -> Result<Vec<CurveRow>, CostError> {
    if sizes.is_empty() || rates.is_empty() {
        return Err(CostError::Input("empty size or rate grid"));
    }
    if sizes.iter().chain(rates).any(|&x| x.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
        return Err(CostError::Input("sizes and rates must be positive"));
    }
    let mut out = Vec::with_capacity(sizes.len() * rates.len());
    for &size in sizes {
        for &rop in rates {
            let ss = cost_per_op_ssd(p, size, rop);
            let mm = cost_per_op_mem(p, size, rop);
            out.push(CurveRow {
                size,
                rop,
                ss_cost: ss,
                mm_cost: mm,
                cheaper: if mm < ss { Tier::Mem } else { Tier::Ssd },
            });
        }
    }
    Ok(out)
}

/// Smallest grid rate at which DRAM is cheaper for `size`.
pub fn boundary_rop(rows: &[CurveRow], size: f64) -> Option<f64> {
    rows.iter()
        .filter(|r| r.size == size && r.cheaper == Tier::Mem)
        .map(|r| r.rop)
        .min_by(f64::total_cmp)
}

pub fn write_csv(rows: &[CurveRow], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "size_bytes,rop,ss_cost,mm_cost,cheaper")?;
    for r in rows {
        writeln!(w, "{},{:e},{:e},{:e},{}", r.size, r.rop, r.ss_cost, r.mm_cost, r.cheaper)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// Each id is cached on its own.
    Record { bytes: u64 },
    /// Ids `k * records_per_page .. (k + 1) * records_per_page` share a page.
    Page { bytes: u64, records_per_page: u64 },
}

impl Granularity {
    pub fn unit_bytes(&self) -> u64 {
        match *self {
            Granularity::Record { bytes } | Granularity::Page { bytes, .. } => bytes,
        }
    }

    fn unit_of(&self, id: u64) -> u64 {
        match *self {
            Granularity::Record { .. } => id,
            Granularity::Page { records_per_page, .. } => id / records_per_page,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::Record { bytes } => write!(f, "record:{bytes}"),
            Granularity::Page {
                bytes,
                records_per_page,
            } => write!(f, "page:{bytes}:{records_per_page}"),
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CostError::Input("granularity must be record:BYTES or page:BYTES:RPP");
        let parts: Vec<&str> = s.split(':').collect();
        let num = |x: &str| x.parse::<u64>().ok().filter(|&v| v > 0).ok_or_else(bad);
        match parts.as_slice() {
            ["record", b] => Ok(Granularity::Record { bytes: num(b)? }),
            ["page", b, r] => Ok(Granularity::Page {
                bytes: num(b)?,
                records_per_page: num(r)?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Replay `trace` against an LRU cache of `budget` bytes holding units of
/// the given granularity. Returns hits / accesses.
pub fn simulate_hit_ratio(trace: &[u64], granularity: Granularity, budget: u64) -> Result<f64, CostError> {
    let units = budget / granularity.unit_bytes();
    let cap = std::num::NonZeroUsize::new(units as usize)
        .ok_or(CostError::Input("budget smaller than one cached unit"))?;
    let mut cache = LruCache::new(cap);
    let mut hits = 0u64;
    for &id in trace {
        let u = granularity.unit_of(id);
        if cache.get(&u).is_some() {
            hits += 1;
        } else {
            cache.put(u, ());
        }
    }
    Ok(if trace.is_empty() { 0.0 } else { hits as f64 / trace.len() as f64 })
}

/// Hit ratio for every budget and granularity, budget-major. Runs the
/// cells in parallel when the `parallel` feature is on.
pub fn hit_ratio_sweep(
    trace: &[u64],
    budgets: &[u64],
    granularities: &[Granularity],
) -> Result<Vec<(u64, Granularity, f64)>, CostError> {
    let cells: Vec<(u64, Granularity)> = budgets
        .iter()
        .flat_map(|&b| granularities.iter().map(move |&g| (b, g)))
        .collect();
    let run = |&(b, g): &(u64, Granularity)| simulate_hit_ratio(trace, g, b).map(|h| (b, g, h));
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        cells.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        cells.iter().map(run).collect()
    }
}
