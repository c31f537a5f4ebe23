use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use noticekv::cost_model::Granularity;
use noticekv::harness::Schedule;
use noticekv::workload::KeyDist;
use noticekv::TreeConfig;
use noticekv_cli::commands::{self, CacheSim, ScenarioRun};
use noticekv_cli::{run_stress, Mix, StressError, WorkloadSpec};

#[derive(Parser)]
#[command(name = "noticekv", version, about = "Stress, verification and model driver for noticekv")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload on real threads and verify the result.
    Stress(StressArgs),
    /// Run the interleaving scenario library.
    Scenarios(ScenarioArgs),
    /// Emit SSD and memory cost curves as CSV.
    CostCurves(CostArgs),
    /// Simulate cache hit ratios for record and page granularity.
    CacheSim(CacheArgs),
}

#[derive(Args)]
struct StressArgs {
    #[arg(long, default_value_t = 100_000)]
    ops: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Read:upsert:delete:scan fractions.
    #[arg(long, default_value = "0.5:0.3:0.15:0.05")]
    mix: Mix,
    #[arg(long, default_value_t = 10_000)]
    keys: u64,
    /// uniform or zipf:THETA
    #[arg(long, default_value = "uniform")]
    dist: KeyDist,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    consolidate_threshold: usize,
    #[arg(long, default_value_t = 64)]
    split_threshold: usize,
    #[arg(long, default_value_t = 8)]
    merge_threshold: usize,
    #[arg(long, default_value_t = 16)]
    scan_len: u64,
    /// Record cache bytes per thread; 0 disables it.
    #[arg(long, default_value_t = 1 << 20)]
    cache_bytes: u64,
    /// Overwrite reclaimed states and count reads through them.
    #[arg(long)]
    poison: bool,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Add a checker that fails on purpose.
    #[arg(long)]
    self_test: bool,
    /// Run no scenarios.
    #[arg(long)]
    empty: bool,
    /// Run only the named scenarios.
    #[arg(long)]
    only: Vec<String>,
    /// Sample this many random schedules per scenario.
    #[arg(long)]
    random: Option<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Replay one schedule, given as space-separated machine numbers.
    #[arg(long)]
    replay: Option<Schedule>,
}

#[derive(Args)]
struct CostArgs {
    /// key = value parameter file; the shipped defaults when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value = "4096,2048")]
    sizes: String,
    #[arg(long, default_value = "1e-4:10:81")]
    rop_range: String,
}

#[derive(Args)]
struct CacheArgs {
    #[arg(long, default_value_t = 100_000)]
    ids: u64,
    #[arg(long, default_value_t = 1_000_000)]
    accesses: usize,
    #[arg(long, default_value = "zipf:0.99")]
    dist: KeyDist,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "1000000")]
    budget_bytes: String,
    /// record:BYTES or page:BYTES:RPP, comma-separated.
    #[arg(long, default_value = "record:100,page:1000:10")]
    granularity: String,
}

fn stress(a: StressArgs) -> Result<bool, Box<dyn std::error::Error>> {
    let spec = WorkloadSpec {
        mix: a.mix,
        keys: a.keys,
        dist: a.dist,
        ops: a.ops,
        threads: a.threads,
        seed: a.seed,
        scan_len: a.scan_len,
        cache_bytes: a.cache_bytes,
        tree: TreeConfig {
            consolidate_threshold: a.consolidate_threshold,
            split_threshold: a.split_threshold,
            merge_threshold: a.merge_threshold,
            poison: a.poison,
            ..TreeConfig::default()
        },
    };
    match run_stress(&spec) {
        Ok(stats) => {
            print!("{stats}");
            println!("status=ok");
            Ok(true)
        }
        Err(StressError::Invariant { failures, stats }) => {
            print!("{stats}");
            println!("status=FAILED");
            for f in failures {
                eprintln!("invariant: {f}");
            }
            Ok(false)
        }
        Err(e) => Err(e.into()),
    }
}

fn run(cli: Cli) -> Result<bool, Box<dyn std::error::Error>> {
    match cli.cmd {
        Cmd::Stress(a) => stress(a),
        Cmd::Scenarios(a) => {
            let (text, ok) = commands::run_scenarios(&ScenarioRun {
                self_test: a.self_test,
                empty: a.empty,
                only: a.only,
                random: a.random,
                seed: a.seed,
                replay: a.replay,
            })?;
            print!("{text}");
            Ok(ok)
        }
        Cmd::CostCurves(a) => {
            let params = commands::load_params(a.params.as_deref())?;
            let sizes = commands::parse_list(&a.sizes)?;
            let rop = commands::parse_rop_range(&a.rop_range)?;
            let (csv, notes) = commands::cost_curves(&params, &sizes, rop)?;
            print!("{csv}");
            for n in notes {
                eprintln!("{n}");
            }
            Ok(true)
        }
        Cmd::CacheSim(a) => {
            let granularities = a
                .granularity
                .split(',')
                .map(str::parse::<Granularity>)
                .collect::<Result<_, _>>()?;
            let csv = commands::cache_sim(&CacheSim {
                ids: a.ids,
                accesses: a.accesses,
                dist: a.dist,
                seed: a.seed,
                budgets: commands::parse_list(&a.budget_bytes)?,
                granularities,
            })?;
            print!("{csv}");
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
