//! The single-threaded subcommands. Each returns its full output so it can
//! be tested without spawning the binary.

use std::fmt::Write as _;
use std::path::Path;

use noticekv::cost_model::{
    boundary_rop, crossover_curves, hit_ratio_sweep, log_grid, write_csv, CostError, CostParams, Granularity,
};
use noticekv::harness::{scenarios, Explorer, HarnessError, Scenario, ScenarioReport, Schedule};
use noticekv::workload::{trace, DistError, KeyDist};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("bad rop range `{0}` (expected LO:HI:N)")]
    RopRange(String),
    #[error("bad number `{0}`")]
    Number(String),
    #[error("no scenario named `{0}`")]
    UnknownScenario(String),
    #[error("--replay needs exactly one --only scenario")]
    ReplayTarget,
}

/// Comma-separated list of numbers.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, CommandError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| CommandError::Number(p.to_string())))
        .collect()
}

/// `LO:HI:N`.
pub fn parse_rop_range(s: &str) -> Result<(f64, f64, usize), CommandError> {
    let bad = || CommandError::RopRange(s.to_string());
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else { return Err(bad()) };
    Ok((
        lo.parse().map_err(|_| bad())?,
        hi.parse().map_err(|_| bad())?,
        n.parse().map_err(|_| bad())?,
    ))
}

pub fn load_params(path: Option<&Path>) -> Result<CostParams, CommandError> {
    match path {
        None => Ok(CostParams::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| CommandError::Read {
                path: p.display().to_string(),
                source,
            })?;
            Ok(CostParams::parse(&text)?)
        }
    }
}

/// CSV of the cost curves, plus one `boundary` line per size for stderr.
pub fn cost_curves(
    params: &CostParams,
    sizes: &[f64],
    rop: (f64, f64, usize),
) -> Result<(String, Vec<String>), CommandError> {
    let rates = log_grid(rop.0, rop.1, rop.2)?;
    let rows = crossover_curves(params, sizes, &rates)?;
    let mut csv = Vec::new();
    write_csv(&rows, &mut csv).expect("writing to memory");
    let notes = sizes
        .iter()
        .map(|&s| match boundary_rop(&rows, s) {
            Some(b) => format!("size={s} boundary_rop={b:e}"),
            None => format!("size={s} boundary_rop=none"),
        })
        .collect();
    Ok((String::from_utf8(csv).expect("ascii csv"), notes))
}

#[derive(Debug, Clone)]
pub struct CacheSim {
    pub ids: u64,
    pub accesses: usize,
    pub dist: KeyDist,
    pub seed: u64,
    pub budgets: Vec<u64>,
    pub granularities: Vec<Granularity>,
}

/// CSV `budget,granularity,hit_ratio`, one row per budget and granularity.
pub fn cache_sim(sim: &CacheSim) -> Result<String, CommandError> {
    let t = trace(sim.ids, sim.dist, sim.accesses, sim.seed)?;
    let mut out = String::from("budget,granularity,hit_ratio\n");
    for (b, g, h) in hit_ratio_sweep(&t, &sim.budgets, &sim.granularities)? {
        writeln!(out, "{b},{g},{h:.6}").expect("writing to a string");
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct ScenarioRun {
    pub self_test: bool,
    pub empty: bool,
    pub only: Vec<String>,
    /// Random schedules per scenario instead of exhaustive search.
    pub random: Option<u64>,
    pub seed: u64,
    pub replay: Option<Schedule>,
}

/// Run the library. Returns the report text and whether everything passed.
pub fn run_scenarios(run: &ScenarioRun) -> Result<(String, bool), CommandError> {
    let ex = Explorer {
        self_test: run.self_test,
        ..Explorer::default()
    };
    let library: Vec<Scenario> = if run.empty {
        Vec::new()
    } else if run.only.is_empty() {
        scenarios::library()
    } else {
        run.only
            .iter()
            .map(|n| scenarios::find(n).ok_or_else(|| CommandError::UnknownScenario(n.clone())))
            .collect::<Result<_, _>>()?
    };
    if run.replay.is_some() && library.len() != 1 {
        return Err(CommandError::ReplayTarget);
    }
    let mut out = String::new();
    let (mut ok, mut schedules) = (true, 0);
    for s in &library {
        let report: Result<ScenarioReport, HarnessError> = match (&run.replay, run.random) {
            (Some(sched), _) => ex.replay(s, sched),
            (None, Some(n)) => ex.explore_random(s, n, run.seed),
            (None, None) => ex.explore_exhaustive(s),
        };
        match report {
            Ok(r) => {
                ok &= r.is_clean();
                schedules += r.schedules;
                out.push_str(&r.to_string());
            }
            Err(e) => {
                ok = false;
                writeln!(out, "scenario={} status=error error=\"{e}\"", s.name).expect("writing to a string");
            }
        }
    }
    writeln!(
        out,
        "{} scenarios schedules={schedules} status={}",
        library.len(),
        if ok { "ok" } else { "FAILED" }
    )
    .expect("writing to a string");
    Ok((out, ok))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rop_range_parses() {
        assert_eq!(parse_rop_range("1e-3:10:5").unwrap(), (1e-3, 10.0, 5));
        assert!(parse_rop_range("1:2").is_err());
        assert!(parse_rop_range("a:2:3").is_err());
    }

    #[test]
    fn lists_parse() {
        assert_eq!(parse_list::<u64>("4096, 2048").unwrap(), vec![4096, 2048]);
        assert!(parse_list::<u64>("4096,x").is_err());
    }

    #[test]
    fn empty_library_passes() {
        let (text, ok) = run_scenarios(&ScenarioRun {
            empty: true,
            ..ScenarioRun::default()
        })
        .unwrap();
        assert!(ok);
        assert!(text.starts_with("0 scenarios"));
    }
}
