use bope_cli::bench::Manifest;
use bope_cli::sha256_hex;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bope")).args(args).output().expect("spawn bope")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn smoke_args(out: &str) -> Vec<String> {
    [
        "bench",
        "--suite",
        "single-pe-stage",
        "--reps",
        "2",
        "--strategies",
        "eubo-ftilde,random-ftilde",
        "--benchmarks",
        "vehicle-safety/kumaraswamy",
        "--comparisons",
        "10",
        "--seed",
        "3",
        "--no-timing",
        "--out",
        out,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn single_pe_stage_smoke_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for out in [&a, &b] {
        let args = smoke_args(out.to_str().unwrap());
        let o = bope(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&b));

    let summary = fs::read_to_string(a.join("vehicle-safety__kumaraswamy.csv")).unwrap();
    let rows = bope_cli::plots::summary_from_csv(&summary).unwrap();
    for strategy in ["eubo-ftilde", "random-ftilde"] {
        let cmp: Vec<usize> = rows
            .iter()
            .filter(|r| r.strategy == strategy && r.checkpoint_type == "comparison")
            .map(|r| r.comparisons)
            .collect();
        assert_eq!(cmp, vec![5, 10]);
        assert!(rows
            .iter()
            .filter(|r| r.strategy == strategy && r.checkpoint_type == "comparison")
            .all(|r| r.n_reps == 2 && r.best_guess_mean.is_some() && r.seconds_acq_mean == 0.0));
    }

    let manifest: Manifest = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.replication_seeds.len(), 2);
    assert_eq!(manifest.runs.len(), 2);
    assert!(manifest.failures.is_empty());
    assert_eq!(manifest.files.len(), 3);
    for f in &manifest.files {
        assert_eq!(f.sha256, sha256_hex(&fs::read(a.join(&f.path)).unwrap()), "{}", f.path);
    }

    let o = bope(&["bench", "--manifest", a.join("manifest.json").to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&c));
}

#[test]
fn multi_stage_covers_the_four_main_problems() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ms");
    let o = bope(&[
        "bench",
        "--suite",
        "multi-stage",
        "--reps",
        "2",
        "--strategies",
        "sobol-only",
        "--batches",
        "1",
        "--jobs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for stem in ["vehicle-safety__kumaraswamy", "dtlz2__l1", "osy__piecewise-linear", "car-cab__piecewise-linear"] {
        let text = fs::read_to_string(out.join(format!("{stem}.csv"))).unwrap();
        let rows = bope_cli::plots::summary_from_csv(&text).unwrap();
        let batches: Vec<usize> = rows.iter().filter(|r| r.checkpoint_type == "batch").map(|r| r.checkpoint_index).collect();
        assert_eq!(batches, vec![0, 1], "{stem}");
        assert!(rows.iter().all(|r| r.max_observed_mean.is_some() && r.best_guess_mean.is_none()));
        let plot = fs::read_to_string(out.join(format!("{stem}.plot.csv"))).unwrap();
        assert_eq!(plot.lines().count(), 3, "{plot}");
    }
}

#[test]
fn validation_errors_exit_with_one() {
    let o = bope(&["bench", "--suite", "multi-stage", "--strategies", "eubo-magic"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("eubo-magic") && e.contains("eubo-zeta") && e.contains("sobol-only"), "{e}");

    let o = bope(&["bench", "--suite", "sideways"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("single-pe-stage"));

    let o = bope(&["run", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));

    let o = bope(&["run", "--pe-strategy", "psychic"]);
    assert_eq!(o.status.code(), Some(1));

    let o = bope(&["calibrate", "--benchmark", "vehicle-safety/kumaraswamy", "--target", "0.7"]);
    assert_eq!(o.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"seed\": \"x\"}").unwrap();
    let o = bope(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = bope(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn run_writes_replayable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"benchmark": "vehicle-safety/kumaraswamy", "pe_strategy": "eubo-zeta", "comparisons_per_stage": 6, "n_batches": 1, "seed": 11}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = bope(&["run", "--config", cfg.to_str().unwrap(), "--desk", "--no-timing", "--batches", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("12 comparisons"));

    let events = bope_core::session::events_from_jsonl(&fs::read_to_string(out.join("events.jsonl")).unwrap()).unwrap();
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut config: bope_core::config::LoopConfig = serde_json::from_slice(&fs::read(&cfg).unwrap()).unwrap();
    config.budgets = bope_core::config::Budgets::desk();
    config.budgets.record_timing = false;
    config.n_batches = 2;
    let session = bope_core::session::Session::replay(config, 0, events).unwrap();
    assert_eq!(bope_core::session::metrics_to_csv(session.metrics()).unwrap(), metrics);
}

#[test]
fn calibrate_and_export_plots() {
    let o = bope(&["calibrate", "--benchmark", "dtlz2/l1", "--designs", "2000", "--pairs", "2000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cal: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(cal["lambda"].as_f64().unwrap() > 0.0);
    assert!((cal["error_rate"].as_f64().unwrap() - 0.1).abs() < 1e-6);

    let dir = tempfile::tempdir().unwrap();
    let summary = dir.path().join("s.csv");
    fs::write(
        &summary,
        "problem,utility,strategy,schedule,checkpoint_type,checkpoint_index,comparisons,evaluations,n_reps,best_guess_mean,best_guess_sem,max_observed_mean,max_observed_sem,seconds_acq_mean\n\
         p,u,s,interleaved,batch,0,0,16,2,,,0.5,0.1,0.0\n\
         p,u,s,interleaved,batch,1,25,24,2,,,0.7,0.05,0.0\n\
         p,u,s,interleaved,comparison,1,5,16,2,0.4,0.1,0.5,0.1,0.0\n",
    )
    .unwrap();
    let out = dir.path().join("plot.csv");
    let o = bope(&["export-plots", summary.to_str().unwrap(), "--x", "evaluations", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(&out).unwrap(),
        "problem,utility,strategy,schedule,x,mean,sem\np,u,s,interleaved,16.0,0.5,0.1\np,u,s,interleaved,24.0,0.7,0.05\n"
    );
    let o = bope(&["export-plots", summary.to_str().unwrap(), "--metric", "best-guess"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout), "problem,utility,strategy,schedule,x,mean,sem\np,u,s,interleaved,5.0,0.4,0.1\n");
    let o = bope(&["export-plots", summary.to_str().unwrap(), "--metric", "regret"]);
    assert_eq!(o.status.code(), Some(1));
}
