use std::process::{Command, Output};

fn noticekv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noticekv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn field(text: &str, name: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{name}=")))
        .unwrap_or_else(|| panic!("no {name} in\n{text}"))
        .parse()
        .unwrap()
}

#[test]
fn stress_single_thread_passes() {
    let o = noticekv(&[
        "stress",
        "--ops",
        "20000",
        "--keys",
        "500",
        "--consolidate-threshold",
        "3",
        "--split-threshold",
        "12",
        "--merge-threshold",
        "4",
    ]);
    let out = stdout(&o);
    assert!(o.status.success(), "{out}{}", stderr(&o));
    assert!(out.contains("status=ok"));
    assert!(field(&out, "splits") > 0.0);
    assert!(field(&out, "consolidations") > 0.0);
}

#[test]
fn stress_rejects_bad_mix() {
    let o = noticekv(&["stress", "--mix", "0.5:0.5:0.1:0.1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("sum to 1.2"), "{}", stderr(&o));
}

#[test]
fn stress_rejects_bad_thresholds() {
    let o = noticekv(&["stress", "--split-threshold", "8", "--merge-threshold", "4"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn scenarios_empty_library() {
    let o = noticekv(&["scenarios", "--empty"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("0 scenarios"));
}

#[test]
fn scenarios_self_test_fails_with_replayable_schedule() {
    let o = noticekv(&["scenarios", "--self-test", "--only", "cnotice_race_pure"]);
    assert!(!o.status.success());
    let out = stdout(&o);
    let sched = out
        .lines()
        .find_map(|l| l.trim().strip_prefix("schedule: "))
        .unwrap_or_else(|| panic!("{out}"))
        .to_string();
    let again = noticekv(&[
        "scenarios",
        "--self-test",
        "--only",
        "cnotice_race_pure",
        "--replay",
        &sched,
    ]);
    assert!(!again.status.success());
    assert!(stdout(&again).contains("self-test"));
    let clean = noticekv(&["scenarios", "--only", "cnotice_race_pure", "--replay", &sched]);
    assert!(clean.status.success(), "{}", stdout(&clean));
}

#[test]
fn scenarios_unknown_name_is_an_error() {
    let o = noticekv(&["scenarios", "--only", "no_such_scenario"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cost_curves_default_boundaries_halve() {
    let o = noticekv(&["cost-curves", "--sizes", "4096,2048", "--rop-range", "1e-4:10:51"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("size_bytes,rop,ss_cost,mm_cost,cheaper"));
    assert_eq!(out.lines().count(), 1 + 2 * 51);
    let b: Vec<f64> = stderr(&o)
        .lines()
        .map(|l| l.rsplit('=').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(b.len(), 2);
    // Boundaries sit on grid points, so the ratio holds to grid resolution.
    let step = (10f64 / 1e-4).powf(1.0 / 50.0);
    assert!(b[1] / b[0] <= 1.0 && b[1] / b[0] >= 0.5 / step, "{b:?}");
}

#[test]
fn cost_curves_single_point() {
    let o = noticekv(&["cost-curves", "--sizes", "4096", "--rop-range", "0.01:0.01:1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn cost_curves_bad_params_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.params");
    std::fs::write(&p, "mem_rent = 1e-13\nflash_rent = nope\n").unwrap();
    let o = noticekv(&["cost-curves", "--params", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn cache_sim_is_deterministic_and_monotone() {
    let args = [
        "cache-sim",
        "--ids",
        "2000",
        "--accesses",
        "50000",
        "--budget-bytes",
        "10000,20000,40000",
        "--granularity",
        "record:100,page:1000:10",
    ];
    let a = noticekv(&args);
    let b = noticekv(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let out = stdout(&a);
    let rows: Vec<(u64, String, f64)> = out
        .lines()
        .skip(1)
        .map(|l| {
            let p: Vec<&str> = l.split(',').collect();
            (p[0].parse().unwrap(), p[1].to_string(), p[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 6);
    for g in ["record:100", "page:1000:10"] {
        let h: Vec<f64> = rows.iter().filter(|r| r.1 == g).map(|r| r.2).collect();
        assert!(h.windows(2).all(|w| w[0] <= w[1]), "{g}: {h:?}");
    }
    for pair in rows.chunks(2) {
        assert!(pair[0].2 >= pair[1].2, "{pair:?}");
    }
}

#[test]
fn cache_sim_rejects_bad_granularity() {
    let o = noticekv(&["cache-sim", "--granularity", "block:4096"]);
    assert_eq!(o.status.code(), Some(2));
}
