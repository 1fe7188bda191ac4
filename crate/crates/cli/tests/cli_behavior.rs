//! End-to-end checks of the installed binary: flag handling, exit codes,
//! report determinism, and the shapes of every CSV artifact.
//!
//! Reports embed their inputs and record no wall-clock times, so two runs
//! with the same inputs (and the same seed, for the heuristics) must be
//! byte-identical — including across different worker-thread counts. Only
//! the scaling CSV carries measured times and is exempt.

use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use tempfile::tempdir;

use fusemap_core::{ArchSpec, Workload};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fusemap")
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run_env<I, S>(args: I, envs: &[(&str, &str)]) -> Run
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let mut cmd = Command::new(bin());
    cmd.args(args);
    // Keep the spawned process independent of the ambient environment.
    cmd.env_remove("FUSEMAP_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("spawning the fusemap binary");
    Run {
        code: out.status.code().expect("binary terminated by signal"),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn run<I, S>(args: I) -> Run
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    run_env(args, &[])
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Matmul-chain workload and a two-level machine, serialized through the
/// same canonical documents the reports embed.
fn chain_files(dir: &Path, n: usize, m: u64, pat: &[(u64, u64)], cap: u64) -> (PathBuf, PathBuf) {
    let w = Workload::make_chain(n, m, pat).unwrap();
    let a = ArchSpec::two_level(cap);
    (
        write(dir, "workload.json", &w.to_json()),
        write(dir, "arch.json", &a.to_json()),
    )
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>())
        .collect();
    (header, rows)
}

#[test]
fn reports_are_byte_identical_across_reruns_and_thread_counts() {
    let dir = tempdir().unwrap();
    let (w, a) = chain_files(dir.path(), 2, 4, &[(4, 4)], 96);
    let outs: Vec<PathBuf> = (0..4).map(|i| dir.path().join(format!("r{i}.json"))).collect();

    let mut runs = vec![
        run([
            "map".as_ref(),
            "--workload".as_ref(),
            w.as_os_str(),
            "--arch".as_ref(),
            a.as_os_str(),
            "--objective".as_ref(),
            "edp".as_ref(),
            "--out".as_ref(),
            outs[0].as_os_str(),
        ]),
        run([
            "map".as_ref(),
            "--workload".as_ref(),
            w.as_os_str(),
            "--arch".as_ref(),
            a.as_os_str(),
            "--objective".as_ref(),
            "edp".as_ref(),
            "--out".as_ref(),
            outs[1].as_os_str(),
        ]),
    ];
    for (threads, out) in [("1", &outs[2]), ("4", &outs[3])] {
        runs.push(run([
            "map".as_ref(),
            "--threads".as_ref(),
            threads.as_ref(),
            "--workload".as_ref(),
            w.as_os_str(),
            "--arch".as_ref(),
            a.as_os_str(),
            "--objective".as_ref(),
            "edp".as_ref(),
            "--out".as_ref(),
            out.as_os_str(),
        ]));
    }
    for r in &runs {
        assert_eq!(r.code, 0, "stderr: {}", r.stderr);
        assert!(r.stdout.contains("best edp ="), "stdout: {}", r.stdout);
    }
    let first = fs::read(&outs[0]).unwrap();
    for out in &outs[1..] {
        assert_eq!(fs::read(out).unwrap(), first, "{} differs", out.display());
    }

    let rep = report(&outs[0]);
    assert_eq!(rep["tool"]["name"], "fusemap");
    assert_eq!(rep["command"], "map");
    assert_eq!(rep["objective"], "edp");
    assert_eq!(rep["best"]["labels"].as_array().unwrap().len(), 2);
    assert!(rep["best"]["objective_value"]["value"].as_f64().unwrap() > 0.0);
    // The embedded documents are the canonical forms of the inputs.
    let w_doc: Value = serde_json::from_str(&fs::read_to_string(&w).unwrap()).unwrap();
    assert_eq!(rep["workload"], w_doc);
    assert_eq!(rep["steps"].as_array().unwrap().len(), 2);
}

/// A candidate table poses the joint-optimization puzzle directly: the
/// cheapest per-stage picks are interface-incompatible, so the search must
/// return the best compatible pair instead of the greedy sum.
#[test]
fn candidate_table_search_prefers_the_compatible_pair() {
    let dir = tempdir().unwrap();
    let (w, a) = chain_files(dir.path(), 2, 1, &[(1, 1)], 96);
    let table = write(
        dir.path(),
        "candidates.json",
        r#"{
  "entries": [
    {"einsum": "E1", "label": "A1", "fuse_level": "DRAM", "latency_cycles": 7},
    {"einsum": "E1", "label": "A2", "fuse_level": "GLB",  "latency_cycles": 10},
    {"einsum": "E2", "label": "B1", "fuse_level": "DRAM", "latency_cycles": 8},
    {"einsum": "E2", "label": "B2", "fuse_level": "GLB",  "latency_cycles": 2}
  ]
}"#,
    );
    let out = dir.path().join("toy.json");
    let r = run([
        "map".as_ref(),
        "--workload".as_ref(),
        w.as_os_str(),
        "--arch".as_ref(),
        a.as_os_str(),
        "--objective".as_ref(),
        "latency".as_ref(),
        "--candidates".as_ref(),
        table.as_os_str(),
        "--out".as_ref(),
        out.as_os_str(),
    ]);
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    assert!(r.stdout.contains("best latency = 12"), "stdout: {}", r.stdout);

    let rep = report(&out);
    // Greedy would take 7 + 2 = 9, but those picks exchange through
    // different levels; the optimum is the fused pair at 10 + 2.
    assert_eq!(rep["best"]["latency_cycles"]["exact"], "12");
    assert_eq!(rep["best"]["labels"], serde_json::json!(["A2", "B2"]));
    assert!(rep["candidate_table"]["entries"].as_array().unwrap().len() == 4);
}

#[test]
fn oracle_and_map_agree_through_the_binary() {
    let dir = tempdir().unwrap();
    let (w, a) = chain_files(dir.path(), 2, 2, &[(2, 2)], 64);
    let mout = dir.path().join("map.json");
    let oout = dir.path().join("oracle.json");
    for (cmd, out) in [("map", &mout), ("oracle", &oout)] {
        let r = run([
            cmd.as_ref(),
            "--workload".as_ref(),
            w.as_os_str(),
            "--arch".as_ref(),
            a.as_os_str(),
            "--objective".as_ref(),
            "energy".as_ref(),
            "--out".as_ref(),
            out.as_os_str(),
        ]);
        assert_eq!(r.code, 0, "{cmd} stderr: {}", r.stderr);
    }
    let m = report(&mout);
    let o = report(&oout);
    assert_eq!(
        m["best"]["objective_value"]["exact"],
        o["best"]["objective_value"]["exact"]
    );
    assert_eq!(m["best"]["energy"]["exact"], o["best"]["energy"]["exact"]);
    let stats = &o["oracle"];
    let complete = stats["complete"].as_u64().unwrap();
    let feasible = stats["feasible"].as_u64().unwrap();
    assert!(feasible > 0 && complete >= feasible);
    assert!(stats["mapspace_bound"].as_str().unwrap().parse::<u128>().unwrap() >= complete as u128);
}

#[test]
fn exit_codes_distinguish_missing_mappings_from_bad_input() {
    let dir = tempdir().unwrap();
    let (w, a) = chain_files(dir.path(), 2, 1, &[(1, 1)], 96);
    let out = dir.path().join("out.json");

    // Only interface-incompatible candidates: searchable, but no joinable
    // pair exists — a missing mapping, not an input error.
    let table = write(
        dir.path(),
        "incompatible.json",
        r#"{
  "entries": [
    {"einsum": "E1", "label": "A1", "fuse_level": "DRAM", "latency_cycles": 7},
    {"einsum": "E2", "label": "B2", "fuse_level": "GLB",  "latency_cycles": 2}
  ]
}"#,
    );
    let r = run([
        "map".as_ref(),
        "--workload".as_ref(),
        w.as_os_str(),
        "--arch".as_ref(),
        a.as_os_str(),
        "--candidates".as_ref(),
        table.as_os_str(),
        "--out".as_ref(),
        out.as_os_str(),
    ]);
    assert_eq!(r.code, 2, "stderr: {}", r.stderr);
    assert!(!out.exists(), "no report should be written on failure");

    // A workload naming an undeclared rank is invalid input.
    let bad = write(
        dir.path(),
        "bad_workload.json",
        r#"{
  "ranks": [{"name": "M", "extent": 4}],
  "tensors": [{"name": "T0", "ranks": ["M", "K_missing"], "role": "input"}],
  "einsums": []
}"#,
    );
    let r = run([
        "map".as_ref(),
        "--workload".as_ref(),
        bad.as_os_str(),
        "--arch".as_ref(),
        a.as_os_str(),
        "--out".as_ref(),
        out.as_os_str(),
    ]);
    assert_eq!(r.code, 1);
    assert!(
        r.stderr.contains("bad_workload.json") && r.stderr.contains("K_missing"),
        "stderr should name the file and the offending rank: {}",
        r.stderr
    );

    // A candidate table that names a missing einsum is invalid input too.
    let ghost = write(
        dir.path(),
        "ghost.json",
        r#"{"entries": [{"einsum": "E9", "label": "X", "fuse_level": "GLB"}]}"#,
    );
    let r = run([
        "map".as_ref(),
        "--workload".as_ref(),
        w.as_os_str(),
        "--arch".as_ref(),
        a.as_os_str(),
        "--candidates".as_ref(),
        ghost.as_os_str(),
        "--out".as_ref(),
        out.as_os_str(),
    ]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("E9"), "stderr: {}", r.stderr);

    // Flag mistakes are caught by the parser.
    assert_eq!(run(["map", "--no-such-flag"]).code, 1);
    assert_eq!(run(["frobnicate"]).code, 1);

    let r = run([
        "map".as_ref(),
        "--threads".as_ref(),
        "0".as_ref(),
        "--workload".as_ref(),
        w.as_os_str(),
        "--arch".as_ref(),
        a.as_os_str(),
        "--out".as_ref(),
        out.as_os_str(),
    ]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("--threads"), "stderr: {}", r.stderr);
}

/// Every heuristic writes a best-so-far curve: one row per trial for the
/// samplers, one row per generation for the genetic search, whose
/// evaluation counts advance by the population size.
#[test]
fn trace_csv_counts_evaluations_and_echoes_search_parameters() {
    let dir = tempdir().unwrap();
    let (w, a) = chain_files(dir.path(), 2, 2, &[(2, 2)], 64);

    let base = |alg: &str, budget: &str, out: &Path, trace: &Path| {
        let mut v: Vec<std::ffi::OsString> = vec!["baseline".into(), alg.into()];
        for (flag, val) in [
            ("--workload", w.as_os_str()),
            ("--arch", a.as_os_str()),
            ("--budget", budget.as_ref()),
            ("--seed", "3".as_ref()),
            ("--out", out.as_os_str()),
            ("--trace", trace.as_os_str()),
        ] {
            v.push(flag.into());
            v.push(val.into());
        }
        v
    };

    // Random sampling: one point per trial.
    let rout = dir.path().join("random.json");
    let rtrace = dir.path().join("random.csv");
    let r = run(base("random", "30", &rout, &rtrace));
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    let (header, rows) = csv(&rtrace);
    assert_eq!(header, ["evaluations", "best_objective"]);
    assert_eq!(rows.len(), 30);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), i + 1);
    }
    let rrep = report(&rout);
    assert_eq!(rrep["search"]["algorithm"], "random");
    assert_eq!(rrep["seed"], 3);
    assert_eq!(rrep["search"]["genome"].as_array().unwrap().len(), 2);

    // Annealing: same per-trial shape, plus the schedule echo.
    let sout = dir.path().join("sa.json");
    let strace = dir.path().join("sa.csv");
    let r = run(base("sa", "25", &sout, &strace));
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    let (_, rows) = csv(&strace);
    assert_eq!(rows.len(), 25);
    let srep = report(&sout);
    assert_eq!(srep["search"]["schedule"]["cooling"], 0.98);
    assert_eq!(srep["search"]["schedule"]["t0"], Value::Null);

    // Genetic search: one point per generation, population evaluations each.
    let gout = dir.path().join("ga.json");
    let gtrace = dir.path().join("ga.csv");
    let mut args = base("ga", "5", &gout, &gtrace);
    args.extend(["--population".into(), "20".into()]);
    let r = run(&args);
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    let (_, rows) = csv(&gtrace);
    assert_eq!(rows.len(), 5);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), (i + 1) * 20);
    }
    let grep = report(&gout);
    // Unset knobs echo the documented defaults.
    assert_eq!(grep["search"]["ga"]["population"], 20);
    assert_eq!(grep["search"]["ga"]["crossover_rate"], 0.7);
    assert_eq!(grep["search"]["ga"]["mutation_rate"], 0.2);
    assert_eq!(grep["search"]["ga"]["elitism"], 1);

    // Curves never move backwards, and the final point is the reported best.
    for (trace, rep) in [(&rtrace, &rrep), (&strace, &srep), (&gtrace, &grep)] {
        let (_, rows) = csv(trace);
        let curve: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
        assert!(curve.windows(2).all(|w| w[1] <= w[0]), "{}", trace.display());
        let best = rep["best"]["objective_value"]["value"].as_f64().unwrap();
        assert_eq!(*curve.last().unwrap(), best);
    }

    // Same seed, same bytes — report and trace alike.
    let rout2 = dir.path().join("random2.json");
    let rtrace2 = dir.path().join("random2.csv");
    let r = run(base("random", "30", &rout2, &rtrace2));
    assert_eq!(r.code, 0);
    let norm = |p: &Path, from: &str, to: &str| {
        String::from_utf8(fs::read(p).unwrap()).unwrap().replace(from, to)
    };
    // The report embeds no paths, so the bytes must match exactly.
    assert_eq!(norm(&rout, "", ""), norm(&rout2, "", ""));
    assert_eq!(fs::read(&rtrace).unwrap(), fs::read(&rtrace2).unwrap());
}

#[test]
fn ablation_csv_reports_more_work_without_pruning() {
    let dir = tempdir().unwrap();
    let (w, a) = chain_files(dir.path(), 3, 2, &[(2, 2)], 64);
    let out = dir.path().join("ablate.csv");
    let r = run([
        "ablate".as_ref(),
        "--workload".as_ref(),
        w.as_os_str(),
        "--arch".as_ref(),
        a.as_os_str(),
        "--objective".as_ref(),
        "edp".as_ref(),
        "--out".as_ref(),
        out.as_os_str(),
    ]);
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    assert!(r.stdout.contains("ablations agree"), "stdout: {}", r.stdout);

    let (header, rows) = csv(&out);
    assert_eq!(
        header,
        [
            "einsum",
            "candidates",
            "joins_attempted",
            "joins_attempted_no_skip",
            "joins_skipped",
            "frontier",
            "frontier_no_consolidation"
        ]
    );
    assert_eq!(rows.len(), 3, "one row per einsum");
    let col = |row: &[String], i: usize| row[i].parse::<u64>().unwrap();
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], format!("E{}", i + 1));
        assert!(col(row, 3) >= col(row, 2), "skipping joins cannot add work");
        assert!(col(row, 6) >= col(row, 5), "consolidation cannot grow the frontier");
    }
    // Join steps exist where the filter actually bites.
    assert!(rows.iter().skip(1).any(|r| col(r, 3) > col(r, 2)));
}

#[test]
fn scaling_csv_writes_one_row_per_join() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("scaling.csv");
    let r = run([
        "scaling".as_ref(),
        "--einsums".as_ref(),
        "2,3".as_ref(),
        "--m".as_ref(),
        "2".as_ref(),
        "--k".as_ref(),
        "2".as_ref(),
        "--n".as_ref(),
        "2".as_ref(),
        "--out".as_ref(),
        out.as_os_str(),
    ]);
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    assert!(r.stdout.contains("5 join records"), "stdout: {}", r.stdout);

    let (header, rows) = csv(&out);
    assert_eq!(
        header,
        [
            "num_einsums",
            "einsum",
            "candidates",
            "groups",
            "frontier_size",
            "joins_attempted",
            "joins_skipped",
            "join_time_us"
        ]
    );
    let lens: Vec<u64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(lens, [2, 2, 3, 3, 3]);
    for row in &rows {
        // Measured time: positive and parseable, but deliberately not
        // reproducible across runs.
        assert!(row[7].parse::<f64>().unwrap() > 0.0);
    }
}

/// The timeline CSV replays the winning mapping allocation by allocation;
/// its running per-level usage must peak exactly at the report's
/// per-level peak bytes and drain back to zero.
#[test]
fn timeline_csv_replays_the_best_mapping_and_matches_reported_peaks() {
    let dir = tempdir().unwrap();
    let (w, a) = chain_files(dir.path(), 2, 4, &[(4, 4)], 96);
    let out = dir.path().join("map.json");
    let tl = dir.path().join("timeline.csv");
    let r = run([
        "map".as_ref(),
        "--workload".as_ref(),
        w.as_os_str(),
        "--arch".as_ref(),
        a.as_os_str(),
        "--objective".as_ref(),
        "latency".as_ref(),
        "--out".as_ref(),
        out.as_os_str(),
        "--timeline".as_ref(),
        tl.as_os_str(),
    ]);
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);

    let (header, rows) = csv(&tl);
    assert_eq!(
        header,
        ["event", "action", "level", "tensor", "bytes", "usage_DRAM", "usage_GLB"]
    );
    assert!(!rows.is_empty());
    let mut peaks = [0u64; 2];
    let mut allocs = 0i64;
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), i);
        match row[1].as_str() {
            "alloc" => allocs += 1,
            "free" => allocs -= 1,
            other => panic!("unknown action {other}"),
        }
        for l in 0..2 {
            peaks[l] = peaks[l].max(row[5 + l].parse::<u64>().unwrap());
        }
    }
    assert_eq!(allocs, 0, "every allocation must be released");
    let last = rows.last().unwrap();
    assert_eq!((last[5].as_str(), last[6].as_str()), ("0", "0"));

    let rep = report(&out);
    let reported: Vec<u64> = rep["best"]["per_level_peak_bytes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(peaks.to_vec(), reported);
}

/// `--verify` recomputes every incremental reservation profile from the
/// assembled tree; it must change nothing but the config echo.
#[test]
fn verification_mode_reproduces_the_default_result() {
    let dir = tempdir().unwrap();
    let (w, a) = chain_files(dir.path(), 3, 2, &[(4, 2), (2, 4)], 256);
    let plain = dir.path().join("plain.json");
    let checked = dir.path().join("checked.json");
    for (out, extra) in [(&plain, None), (&checked, Some("--verify"))] {
        let mut args: Vec<&OsStr> = vec![
            "map".as_ref(),
            "--workload".as_ref(),
            w.as_os_str(),
            "--arch".as_ref(),
            a.as_os_str(),
            "--objective".as_ref(),
            "edp".as_ref(),
            "--out".as_ref(),
            out.as_os_str(),
        ];
        if let Some(flag) = extra {
            args.push(flag.as_ref());
        }
        let r = run(args);
        assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    }
    let p = report(&plain);
    let c = report(&checked);
    assert_eq!(p["config"]["verify_incremental_profiles"], false);
    assert_eq!(c["config"]["verify_incremental_profiles"], true);
    assert_eq!(p["best"], c["best"]);
    assert_eq!(p["steps"], c["steps"]);
}

#[test]
fn thread_configuration_comes_from_flag_or_environment() {
    let dir = tempdir().unwrap();
    let (w, a) = chain_files(dir.path(), 2, 2, &[(2, 2)], 64);
    let out = dir.path().join("out.json");

    let r = run_env(
        [
            "map".as_ref(),
            "--workload".as_ref(),
            w.as_os_str(),
            "--arch".as_ref(),
            a.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ],
        &[("FUSEMAP_THREADS", "2")],
    );
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);

    let r = run_env(
        [
            "map".as_ref(),
            "--workload".as_ref(),
            w.as_os_str(),
            "--arch".as_ref(),
            a.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ],
        &[("FUSEMAP_THREADS", "plenty")],
    );
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("FUSEMAP_THREADS"), "stderr: {}", r.stderr);

    assert_eq!(run(["--version"]).code, 0);
    assert_eq!(run(["--help"]).code, 0);
}
