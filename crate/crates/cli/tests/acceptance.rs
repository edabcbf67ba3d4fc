//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion with the
//! measured values and the pinned tolerances.
//!
//! This target reports; it does not gate. Criteria that are plain
//! correctness properties (A1, A2, A6, A7, A8) are also asserted by the
//! regular unit and integration tests, so a regression there still fails
//! `cargo test`. Select a subset with `PIPESYNTH_ACCEPTANCE=A1,A6`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use pipesynth::evaluator::brute_force_best;
use pipesynth::experiments::{
    ablate, compare_grammar, median, pretrain_family, synth, warmstart_eval, DatasetSpec, ExperimentReport, Settings,
};
use pipesynth::game::{Action, EncodedState, PAD, SOP};
use pipesynth::grammar::{parse_grammar, Grammar, Role};
use pipesynth::mcts::{ucb, Edge};
use pipesynth::network::{gradient, loss, ModelParams, ModelShape, TrainingExample};
use pipesynth::task::TaskSpec;
use pipesynth::trainer::Budget;
use pipesynth_cli::strip_timing;

// A2
const FD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_REL_FLOOR: f64 = 1e-6;
// A3
const A3_SEEDS: u64 = 10;
const A3_EPISODES: u64 = 50;
const A3_MAX_ABS_DELTA: f64 = 0.02;
// A4
const A4_SEEDS: u64 = 5;
const A4_REPS: u32 = 20;
const A4_FRACTION: f64 = 0.99;
const A4_MIN_SEEDS_OK: usize = 4;
// A4, A5: evaluation budget (the classification language size) and episode cap.
const TARGET_EVALUATIONS: u64 = 576;
const TARGET_EPISODES: u64 = 400;
// A5
const A5_FAMILY: std::ops::RangeInclusive<u64> = 1..=8;
const A5_HELD_OUT: u64 = 9;
const A5_PRETRAIN_ITERATIONS: usize = 50;
const A5_REPS: u32 = 20;
const A5_FRACTION: f64 = 0.95;
const A5_MAX_RATIO: f64 = 1.1;
// A6
const A6_SEED: u64 = 7;
const A6_EPISODES: u64 = 50;
const A6_MAX_TERMINALS: usize = 8;
// A7
const A7_EPISODES: u64 = 1000;

const MASTER_SEED: u64 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn grammars_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../grammars")
}

fn load(name: &str) -> Arc<Grammar> {
    let text = std::fs::read_to_string(grammars_dir().join(name)).expect("shipped grammar");
    Arc::new(parse_grammar(&text).expect("shipped grammar parses"))
}

fn surrogates(g: &Grammar, seeds: impl IntoIterator<Item = u64>) -> Vec<DatasetSpec> {
    seeds.into_iter().map(|k| DatasetSpec::surrogate(k, g, TaskSpec::classification())).collect()
}

fn cell(r: &ExperimentReport, scope: &str, mode: &str, metric: &str) -> f64 {
    r.medians
        .iter()
        .find(|m| m.scope == scope && m.mode == mode && m.metric == metric)
        .unwrap_or_else(|| panic!("median {scope}/{mode}/{metric} missing"))
        .value
}

fn a1() -> Outcome {
    let mut e = Edge::new(Action::Finish, 0, 0.25);
    e.n = 3;
    e.w = 1.5;
    let u = ucb(&e, 16, 1.0);
    let zero = ucb(&Edge::new(Action::Finish, 0, 0.25), 0, 1.0);
    Outcome { pass: u == 0.75 && zero == 0.0, detail: format!("ucb = {u} (want 0.75 exactly), unvisited at N=0: {zero}") }
}

fn a2() -> Outcome {
    let shape = ModelShape::new(10, 8, 12, 9);
    let params = ModelParams::init(shape, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let batch: Vec<TrainingExample> = (0..4)
        .map(|_| {
            let len = rng.random_range(1..=6);
            let mut tokens = vec![SOP];
            tokens.extend((0..len).map(|_| rng.random_range(2..shape.vocab as u32)));
            tokens.resize(16, PAD);
            let meta = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let mut legal: Vec<u32> = (0..shape.actions as u32).filter(|_| rng.random_bool(0.6)).collect();
            if legal.is_empty() {
                legal.push(0);
            }
            let raw: Vec<f64> = legal.iter().map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            TrainingExample {
                encoded: EncodedState { tokens, meta },
                legal,
                pi: raw.iter().map(|x| x / total).collect(),
                e: rng.random_range(0.0..1.0),
            }
        })
        .collect();
    let alpha = 1e-3;
    let g = gradient(&params, &batch, alpha).expect("gradient");
    let mut worst: f64 = 0.0;
    for k in 0..params.data().len() {
        let mut plus = params.clone();
        plus.data_mut()[k] += FD_STEP;
        let mut minus = params.clone();
        minus.data_mut()[k] -= FD_STEP;
        let numeric = (loss(&plus, &batch, alpha).unwrap() - loss(&minus, &batch, alpha).unwrap()) / (2.0 * FD_STEP);
        let analytic = g.data[k];
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR));
    }
    Outcome {
        pass: worst <= GRAD_REL_TOL,
        detail: format!("{} coordinates, worst relative error {worst:.2e} (tol {GRAD_REL_TOL:e})", params.data().len()),
    }
}

fn a3() -> Outcome {
    let g = load("classification.grammar");
    let ds = surrogates(&g, 1..=A3_SEEDS);
    let r = compare_grammar(&g, &ds, &Settings::default(), Budget::episodes(A3_EPISODES), true, MASTER_SEED)
        .expect("compare-grammar");
    let ga = cell(&r, "all", "grammar", "total_actions");
    let ea = cell(&r, "all", "edit", "total_actions");
    let deltas: Vec<f64> = r.pairs.iter().map(|p| p.delta_best_e.abs()).collect();
    let d = median(&deltas);
    Outcome {
        pass: ga < ea && d <= A3_MAX_ABS_DELTA,
        detail: format!(
            "median total actions grammar {ga} < edit {ea}: {}; median |best-e delta| {d:.4} <= {A3_MAX_ABS_DELTA}: {} \
             (median best e grammar {:.4}, edit {:.4})",
            ga < ea,
            d <= A3_MAX_ABS_DELTA,
            cell(&r, "all", "grammar", "best_e"),
            cell(&r, "all", "edit", "best_e"),
        ),
    }
}

fn target_budget() -> Budget {
    Budget { episodes: Some(TARGET_EPISODES), ..Budget::evaluations(TARGET_EVALUATIONS) }
}

fn a4() -> Outcome {
    let g = load("classification.grammar");
    let ds = surrogates(&g, 1..=A4_SEEDS);
    let r = ablate(&g, &ds, &Settings::default(), A4_FRACTION, target_budget(), A4_REPS, MASTER_SEED).expect("ablate");
    let mut ok = 0;
    let mut cells = Vec::new();
    for d in &ds {
        let t = cell(&r, &d.name, "trained", "evaluations_to_target");
        let u = cell(&r, &d.name, "uniform", "evaluations_to_target");
        ok += usize::from(t <= u);
        cells.push(format!("{} {t}/{u}", d.name));
    }
    let missed = r.records.iter().filter(|x| x.reached_target == Some(false)).count();
    Outcome {
        pass: ok >= A4_MIN_SEEDS_OK,
        detail: format!(
            "trained <= uniform on {ok}/{A4_SEEDS} seeds (need {A4_MIN_SEEDS_OK}); medians trained/uniform: {}; \
             {missed}/{} runs censored at {TARGET_EVALUATIONS}",
            cells.join(", "),
            r.records.len()
        ),
    }
}

fn a5() -> Outcome {
    let g = load("classification.grammar");
    let s = Settings::default();
    let family = surrogates(&g, A5_FAMILY);
    let (ck, _) = pretrain_family(&g, &family, &s, A5_PRETRAIN_ITERATIONS, MASTER_SEED, None, |_| {}).expect("pretrain");
    let held = DatasetSpec::surrogate(A5_HELD_OUT, &g, TaskSpec::classification());
    let r = warmstart_eval(&g, &held, &s, &ck, A5_FRACTION, target_budget(), A5_REPS, true, MASTER_SEED)
        .expect("warmstart-eval");
    let warm = cell(&r, &held.name, "warm", "evaluations_to_target");
    let cold = cell(&r, &held.name, "cold", "evaluations_to_target");
    let worst = r
        .records
        .iter()
        .filter(|x| x.mode == "warm")
        .filter_map(|x| x.evaluations_to_target)
        .max()
        .unwrap_or(0) as f64;
    let bound = A5_MAX_RATIO * cold;
    Outcome {
        pass: warm <= cold && worst <= bound,
        detail: format!(
            "median evaluations warm {warm} <= cold {cold}: {}; worst warm run {worst} <= {A5_MAX_RATIO} x cold = {bound:.1}: {}",
            warm <= cold,
            worst <= bound
        ),
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_pipesynth")
}

fn a6() -> Outcome {
    let g = load("classification.grammar");
    let spec = DatasetSpec::surrogate(A6_SEED, &g, TaskSpec::classification());
    let language = g.enumerate_pipelines(A6_MAX_TERMINALS).len();
    let (best, e_star) = brute_force_best(spec.surrogate.unwrap(), &g, A6_MAX_TERMINALS).expect("oracle");
    let out = Command::new(bin())
        .args(["synth", "--grammar"])
        .arg(grammars_dir().join("classification.grammar"))
        .args(["--dataset", &format!("surrogate:{A6_SEED}"), "--evaluator", "surrogate"])
        .args(["--budget-episodes", &A6_EPISODES.to_string()])
        .output()
        .expect("run pipesynth");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().next().unwrap_or("");
    let mut words: Vec<&str> = line.split_whitespace().collect();
    let e: f64 = words.pop().and_then(|w| w.parse().ok()).unwrap_or(f64::NAN);
    let pass = out.status.success() && language <= 2000 && words == best && e == e_star;
    Outcome {
        pass,
        detail: format!("language {language}; synth -> {line:?}; oracle {} {e_star}", best.join(" ")),
    }
}

fn a7() -> Outcome {
    let mut total = 0;
    let mut bad = Vec::new();
    let mut detail = Vec::new();
    for name in ["classification.grammar", "classification-recursive.grammar"] {
        let g = load(name);
        let ds = DatasetSpec::surrogate(3, &g, TaskSpec::classification());
        let out = synth(&g, &ds, &Settings::default(), None, Budget::episodes(A7_EPISODES), true, MASTER_SEED)
            .expect("synth");
        let mut produced = 0;
        for ep in &out.synthesis.log {
            let Some(p) = &ep.pipeline else {
                bad.push(format!("{name}: episode {} realized no pipeline", ep.episode));
                continue;
            };
            produced += 1;
            let roles: Vec<Role> = p.iter().map(|t| g.role(g.terminal_index(t).expect("known terminal"))).collect();
            let ordered = roles.windows(2).all(|w| w[0] <= w[1]);
            let one_estimator = roles.iter().filter(|r| **r == Role::Estimator).count() == 1;
            if !g.recognizes_names(p) || !ordered || !one_estimator || roles.last() != Some(&Role::Estimator) {
                bad.push(format!("{name}: {p:?}"));
            }
        }
        total += out.synthesis.log.len();
        detail.push(format!("{name}: {produced}/{} episodes", out.synthesis.log.len()));
    }
    Outcome {
        pass: bad.is_empty() && total as u64 == 2 * A7_EPISODES,
        detail: format!("{}; violations {}{}", detail.join(", "), bad.len(), bad.first().map(|b| format!(" e.g. {b}")).unwrap_or_default()),
    }
}

/// Runs `args` twice in fresh directories and compares every report,
/// run log and checkpoint with timing fields removed.
fn twice(label: &str, args: &[String], files: &[&str], setup: Option<&Path>) -> Result<(), String> {
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        if let Some(ck) = setup {
            std::fs::copy(ck, dir.path().join("input.ckpt")).map_err(|e| e.to_string())?;
        }
        let out = Command::new(bin()).args(args).current_dir(dir.path()).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{label}: exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
        }
        let mut blobs = vec![out.stdout];
        for f in files {
            let bytes = std::fs::read(dir.path().join(f)).map_err(|e| format!("{label}: {f}: {e}"))?;
            if f.ends_with(".json") || f.ends_with(".jsonl") {
                let text = String::from_utf8(bytes).map_err(|e| e.to_string())?;
                let mut norm = String::new();
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    let single = f.ends_with(".json");
                    let src = if single { &text } else { line };
                    let mut v: Value = serde_json::from_str(src).map_err(|e| format!("{label}: {f}: {e}"))?;
                    strip_timing(&mut v);
                    norm.push_str(&v.to_string());
                    norm.push('\n');
                    if single {
                        break;
                    }
                }
                blobs.push(norm.into_bytes());
            } else {
                blobs.push(bytes);
            }
        }
        outputs.push(blobs);
    }
    if outputs[0] != outputs[1] {
        return Err(format!("{label}: outputs differ"));
    }
    Ok(())
}

fn a8() -> Outcome {
    let g = grammars_dir().join("classification.grammar").display().to_string();
    let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let common = |cmd: &str| s(&[cmd, "--grammar", &g, "--seed", "11", "--out", "report.json"]);
    let mut failures = Vec::new();
    let mut run = |label: &str, mut args: Vec<String>, extra: &[&str], files: &[&str], setup: Option<&Path>| {
        args.extend(s(extra));
        if let Err(e) = twice(label, &args, files, setup) {
            failures.push(e);
        }
    };
    let report = ["report.json", "report.json.log.jsonl"];
    run("synth", common("synth"), &["--dataset", "surrogate:3", "--budget-episodes", "20"], &report, None);
    run(
        "compare-grammar",
        common("compare-grammar"),
        &["--seeds", "1-2", "--budget-episodes", "4", "--csv", "pairs.csv"],
        &["report.json", "report.json.log.jsonl", "pairs.csv"],
        None,
    );
    let small = ["--repetitions", "2", "--budget-evaluations", "100", "--max-episodes", "30"];
    let mut ablate_args = vec!["--seeds", "1-2"];
    ablate_args.extend(small);
    run("ablate", common("ablate"), &ablate_args, &report, None);
    run(
        "pretrain",
        common("pretrain"),
        &["--seeds", "1-2", "--iterations", "2", "--episodes-per-iteration", "4", "--checkpoint-out", "net.ckpt"],
        &["report.json", "report.json.log.jsonl", "net.ckpt"],
        None,
    );
    run("grammar-stats", s(&["grammar-stats", "--grammar", &g, "--out", "report.json"]), &[], &["report.json"], None);

    let dir = tempfile::tempdir().expect("tempdir");
    let ck = dir.path().join("net.ckpt");
    let made = Command::new(bin())
        .args(["pretrain", "--grammar", &g, "--seeds", "1-2", "--iterations", "1", "--episodes-per-iteration", "4"])
        .arg("--checkpoint-out")
        .arg(&ck)
        .output()
        .expect("pretrain");
    if made.status.success() {
        let mut warm_args = vec!["--checkpoint", "input.ckpt", "--dataset", "surrogate:9"];
        warm_args.extend(small);
        run("warmstart-eval", common("warmstart-eval"), &warm_args, &report, Some(&ck));
    } else {
        failures.push("warmstart-eval: checkpoint setup failed".into());
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "synth, compare-grammar, ablate, pretrain, warmstart-eval, grammar-stats: identical modulo timing fields".into()
        } else {
            failures.join("; ")
        },
    }
}

fn main() {
    // libtest flags such as `--nocapture` may be forwarded; ignore them.
    let selected: Option<Vec<String>> = std::env::var("PIPESYNTH_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_uppercase()).filter(|s| !s.is_empty()).collect());
    let criteria: [(&str, fn() -> Outcome); 8] =
        [("A1", a1), ("A2", a2), ("A3", a3), ("A4", a4), ("A5", a5), ("A6", a6), ("A7", a7), ("A8", a8)];
    let mut passed = 0;
    let mut ran = 0;
    for (id, f) in criteria {
        if selected.as_ref().is_some_and(|s| !s.iter().any(|x| x == id)) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        ran += 1;
        passed += usize::from(o.pass);
        println!("{id} {} [{:.1}s] {}", if o.pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64(), o.detail);
    }
    println!("acceptance: {passed}/{ran} criteria pass");
}
