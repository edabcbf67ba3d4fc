//! End-to-end runs of the `pipesynth` binary: exit codes, report shapes,
//! schema conformance and determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use pipesynth::evaluator::brute_force_best;
use pipesynth::experiments::DatasetSpec;
use pipesynth::grammar::parse_grammar;
use pipesynth::task::TaskSpec;
use pipesynth_cli::strip_timing;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_pipesynth")
}

fn grammar(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../grammars").join(name).display().to_string()
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).args(args).current_dir(dir).env_remove("PIPESYNTH_EXECUTOR").output().expect("spawn pipesynth")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).expect("report exists")).expect("report is JSON")
}

fn schema() -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/report.schema.json");
    jsonschema::validator_for(&read_json(path)).expect("schema compiles")
}

fn assert_valid(report: &Value) {
    let errors: Vec<String> = schema().iter_errors(report).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "schema violations: {errors:?}");
}

fn all_numbers_finite(v: &Value) -> bool {
    match v {
        Value::Number(n) => n.as_f64().is_some_and(f64::is_finite),
        Value::Array(a) => a.iter().all(all_numbers_finite),
        Value::Object(m) => m.values().all(all_numbers_finite),
        _ => true,
    }
}

fn tmp() -> TempDir {
    tempfile::tempdir().expect("tempdir")
}

#[test]
fn synth_finds_the_oracle_pipeline_and_writes_report_and_log() {
    let dir = tmp();
    let g = grammar("classification.grammar");
    let o = run(
        dir.path(),
        &["synth", "--grammar", &g, "--dataset", "surrogate:7", "--evaluator", "surrogate", "--budget-episodes", "50", "--out", "r.json"],
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let parsed = parse_grammar(&std::fs::read_to_string(&g).unwrap()).unwrap();
    let spec = DatasetSpec::surrogate(7, &parsed, TaskSpec::classification());
    let (best, e_star) = brute_force_best(spec.surrogate.unwrap(), &parsed, 8).unwrap();
    let first = stdout(&o).lines().next().unwrap().to_string();
    assert_eq!(first, format!("{} {}", best.join(" "), e_star));

    let report = read_json(dir.path().join("r.json"));
    assert_valid(&report);
    assert!(all_numbers_finite(&report));
    assert_eq!(report["records"][0]["best_e"].as_f64(), Some(e_star));

    let log = std::fs::read_to_string(dir.path().join("r.json.log.jsonl")).unwrap();
    let events: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events[0]["event"], "start");
    assert_eq!(events.iter().filter(|e| e["event"] == "episode").count(), 50);
    let curve = events.iter().find(|e| e["event"] == "curve").unwrap();
    let points = curve["best_so_far"].as_array().unwrap();
    assert!(points.windows(2).all(|w| w[0][1].as_f64() < w[1][1].as_f64()));
}

#[test]
fn missing_grammar_file_exits_2_naming_the_path() {
    let dir = tmp();
    let o = run(dir.path(), &["synth", "--grammar", "no/such.grammar", "--dataset", "surrogate:1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such.grammar"), "{}", stderr(&o));
}

#[test]
fn zero_budget_exits_2() {
    let dir = tmp();
    let g = grammar("classification.grammar");
    let o = run(dir.path(), &["synth", "--grammar", &g, "--dataset", "surrogate:1", "--budget-episodes", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_dataset_and_bad_flags_exit_2() {
    let dir = tmp();
    let g = grammar("classification.grammar");
    for args in [
        vec!["synth", "--grammar", &g, "--dataset", "iris"],
        vec!["synth", "--grammar", &g, "--dataset", "surrogate:x"],
        vec!["synth", "--grammar", &g, "--dataset", "iris", "--evaluator", "external"],
        vec!["synth", "--grammar", &g, "--dataset", "surrogate:1", "--bogus"],
    ] {
        assert_eq!(run(dir.path(), &args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn grammar_stats_counts_the_shipped_language() {
    let dir = tmp();
    let o = run(dir.path(), &["grammar-stats", "--grammar", &grammar("classification.grammar"), "--out", "s.json"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("language size: 576"));
    let s = read_json(dir.path().join("s.json"));
    assert_valid(&s);
    assert_eq!(s["language_size"], 576);
    assert_eq!(s["derivation_lengths"], serde_json::json!([2, 3, 4]));

    let o = run(dir.path(), &["grammar-stats", "--grammar", &grammar("classification.grammar"), "--max-terminals", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grammar_stats_on_a_unary_grammar() {
    let dir = tmp();
    std::fs::write(dir.path().join("u.grammar"), "<S> ::= a | a <S>\n").unwrap();
    let o = run(dir.path(), &["grammar-stats", "--grammar", "u.grammar", "--max-terminals", "3", "--out", "s.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = read_json(dir.path().join("s.json"));
    assert_eq!(s["language_size"], 3);
    assert_eq!(s["derivation_lengths"], serde_json::json!([1, 2, 3]));
}

#[test]
fn enumeration_overflow_is_a_config_error() {
    let dir = tmp();
    let g = grammar("classification-recursive.grammar");
    let o = run(dir.path(), &["grammar-stats", "--grammar", &g, "--limit", "1000"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn compare_grammar_pairs_every_dataset() {
    let dir = tmp();
    let g = grammar("classification.grammar");
    let o = run(
        dir.path(),
        &["compare-grammar", "--grammar", &g, "--seeds", "1-10", "--budget-episodes", "2", "--out", "c.json", "--csv", "c.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(dir.path().join("c.json"));
    assert_valid(&r);
    let pairs = r["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 10);
    for p in pairs {
        assert!(p["grammar_mean_branching"].as_f64() < p["edit_mean_branching"].as_f64(), "{p}");
        let d = p["grammar_best_e"].as_f64().unwrap() - p["edit_best_e"].as_f64().unwrap();
        assert_eq!(p["delta_best_e"].as_f64(), Some(d));
    }
    let csv = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("dataset,grammar_best_e,edit_best_e,delta_best_e"));
}

#[test]
fn ablate_fills_both_columns_for_every_seed() {
    let dir = tmp();
    let g = grammar("classification.grammar");
    let o = run(
        dir.path(),
        &[
            "ablate", "--grammar", &g, "--seeds", "1-5", "--repetitions", "2", "--budget-evaluations", "60",
            "--max-episodes", "10", "--out", "a.json",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(dir.path().join("a.json"));
    assert_valid(&r);
    let medians = r["medians"].as_array().unwrap();
    assert_eq!(medians.len(), 10);
    for mode in ["trained", "uniform"] {
        assert_eq!(medians.iter().filter(|m| m["mode"] == mode).count(), 5);
    }
    assert_eq!(r["records"].as_array().unwrap().len(), 20);
}

fn pretrain(dir: &Path, grammar_file: &str, out: &str) -> Output {
    run(
        dir,
        &[
            "pretrain", "--grammar", grammar_file, "--seeds", "1-2", "--iterations", "2", "--episodes-per-iteration",
            "4", "--checkpoint-out", out, "--out", "p.json",
        ],
    )
}

#[test]
fn pretrain_then_warmstart_reports_both_arms() {
    let dir = tmp();
    let g = grammar("classification.grammar");
    let o = pretrain(dir.path(), &g, "net.ckpt");
    assert!(o.status.success(), "{}", stderr(&o));
    let p = read_json(dir.path().join("p.json"));
    assert_valid(&p);
    assert_eq!(p["iterations"].as_array().unwrap().len(), 2);

    let o = run(
        dir.path(),
        &[
            "warmstart-eval", "--grammar", &g, "--checkpoint", "net.ckpt", "--dataset", "surrogate:9", "--repetitions",
            "2", "--budget-evaluations", "60", "--max-episodes", "10", "--out", "w.json",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let w = read_json(dir.path().join("w.json"));
    assert_valid(&w);
    let modes: Vec<&str> = w["medians"].as_array().unwrap().iter().map(|m| m["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["warm", "cold"]);

    let o = run(dir.path(), &["synth", "--grammar", &g, "--dataset", "surrogate:9", "--checkpoint", "net.ckpt", "--budget-episodes", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn checkpoint_from_another_grammar_exits_2_naming_the_fingerprint() {
    let dir = tmp();
    let o = pretrain(dir.path(), &grammar("classification.grammar"), "net.ckpt");
    assert!(o.status.success(), "{}", stderr(&o));
    let other = grammar("regression.grammar");
    for args in [
        vec!["warmstart-eval", "--grammar", &other, "--checkpoint", "net.ckpt", "--task", "regression"],
        vec!["synth", "--grammar", &other, "--checkpoint", "net.ckpt", "--dataset", "surrogate:1"],
    ] {
        let o = run(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains("fingerprint"), "{}", stderr(&o));
    }
}

fn external_fixture(dir: &Path) -> String {
    std::fs::write(dir.join("g.grammar"), "<S> ::= <E> | SkImputer <E>\n<E> ::= GaussianNB | LinearSVC\n").unwrap();
    std::fs::write(dir.join("tiny.csv"), "x,y,class\n1,2,a\n3,,b\n5,6,a\n").unwrap();
    std::fs::write(
        dir.join("manifest.json"),
        r#"[{"name":"tiny","path":"tiny.csv","task":"classification","target_column":"class"}]"#,
    )
    .unwrap();
    format!("{} echo-executor", bin())
}

#[test]
fn external_evaluator_round_trip_through_the_loopback_executor() {
    let dir = tmp();
    let cmd = external_fixture(dir.path());
    let o = run(
        dir.path(),
        &[
            "synth", "--grammar", "g.grammar", "--dataset", "tiny", "--evaluator", "external", "--manifest",
            "manifest.json", "--executor-cmd", &cmd, "--budget-episodes", "5", "--out", "r.json",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().next().unwrap().ends_with(" 0.42"), "{}", stdout(&o));
    assert_valid(&read_json(dir.path().join("r.json")));

    // The executor command can also come from the environment.
    let o = Command::new(bin())
        .args(["synth", "--grammar", "g.grammar", "--dataset", "tiny", "--evaluator", "external"])
        .args(["--manifest", "manifest.json", "--budget-episodes", "2"])
        .env("PIPESYNTH_EXECUTOR", &cmd)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn executor_failures_exit_3() {
    let dir = tmp();
    let cmd = external_fixture(dir.path());
    let base = ["synth", "--grammar", "g.grammar", "--dataset", "tiny", "--evaluator", "external", "--manifest", "manifest.json"];
    let crash = format!("{cmd} --crash-after 0");
    let missing = format!("{cmd} --primitives GaussianNB");
    for exec in [crash.as_str(), missing.as_str(), "/no/such/executor"] {
        let mut args = base.to_vec();
        args.extend(["--executor-cmd", exec, "--budget-episodes", "3"]);
        let o = run(dir.path(), &args);
        assert_eq!(o.status.code(), Some(3), "{exec}: {}", stderr(&o));
    }
    let o = run(dir.path(), &base);
    assert_eq!(o.status.code(), Some(2), "no executor command is a config error");
}

fn stripped(p: PathBuf) -> Value {
    let mut v = read_json(p);
    strip_timing(&mut v);
    v
}

#[test]
fn equal_seeds_give_identical_reports() {
    let g = grammar("classification.grammar");
    let runs: Vec<(TempDir, Value)> = (0..2)
        .map(|_| {
            let dir = tmp();
            let o = run(dir.path(), &["synth", "--grammar", &g, "--dataset", "surrogate:4", "--budget-episodes", "20", "--seed", "5", "--out", "r.json"]);
            assert!(o.status.success());
            let v = stripped(dir.path().join("r.json"));
            (dir, v)
        })
        .collect();
    assert_eq!(runs[0].1, runs[1].1);

    let dir = tmp();
    let o = run(dir.path(), &["synth", "--grammar", &g, "--dataset", "surrogate:4", "--budget-episodes", "20", "--seed", "6", "--out", "r.json"]);
    assert!(o.status.success());
    assert_ne!(stripped(dir.path().join("r.json"))["records"], runs[0].1["records"]);
}
