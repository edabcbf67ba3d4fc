use std::sync::Arc;
use std::time::Duration;

use pipesynth::evaluator::{
    CachedEvaluator, DatasetEntry, Evaluator, ExecutorClient, ExecutorError, ExternalEvaluator, Status,
};
use pipesynth::task::TaskKind;

fn argv(extra: &[&str]) -> Vec<String> {
    let mut v = vec![env!("CARGO_BIN_EXE_echo-executor").to_string()];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn dataset() -> DatasetEntry {
    DatasetEntry {
        name: "iris".into(),
        path: "data/iris.csv".into(),
        task: TaskKind::Classification,
        target_column: "class".into(),
    }
}

fn names(p: &[&str]) -> Vec<String> {
    p.iter().map(|s| s.to_string()).collect()
}

fn client(extra: &[&str], timeout_ms: u64) -> Arc<ExecutorClient> {
    Arc::new(ExecutorClient::connect(argv(extra), &[], Duration::from_millis(timeout_ms), 0).unwrap())
}

#[test]
fn planted_score_round_trip() {
    let c = client(&[], 5000);
    assert!(c.primitives().iter().any(|p| p == "GaussianNB"));
    let ev = ExternalEvaluator::new(c, dataset());
    let r = ev.evaluate(&names(&["SkImputer", "PCA", "GaussianNB"]));
    assert_eq!((r.score, r.status), (0.42, Status::Ok));
}

#[test]
fn unknown_primitive_is_invalid() {
    let ev = ExternalEvaluator::new(client(&[], 5000), dataset());
    let r = ev.evaluate(&names(&["SkImputer", "XGBoost"]));
    assert_eq!((r.score, r.status), (0.0, Status::InvalidPipeline));
}

#[test]
fn malformed_reply_scores_zero_and_search_goes_on() {
    let ev = ExternalEvaluator::new(client(&["--malformed"], 5000), dataset());
    for _ in 0..2 {
        let r = ev.evaluate(&names(&["GaussianNB"]));
        assert_eq!(r.score, 0.0);
        assert!(matches!(r.status, Status::ExecutorError(_)));
    }
    assert!(ev.fatal_error().is_none());
}

#[test]
fn crash_is_retried_once() {
    // Each process answers one request and dies on the next; the restart
    // serves the retried request.
    let ev = ExternalEvaluator::new(client(&["--crash-after", "1"], 5000), dataset());
    for _ in 0..3 {
        assert_eq!(ev.evaluate(&names(&["PCA", "GaussianNB"])).score, 0.42);
    }
    assert!(ev.fatal_error().is_none());
}

#[test]
fn repeated_crash_is_fatal() {
    let ev = ExternalEvaluator::new(client(&["--crash-after", "0"], 5000), dataset());
    let r = ev.evaluate(&names(&["GaussianNB"]));
    assert!(matches!(r.status, Status::ExecutorError(_)));
    assert!(ev.fatal_error().unwrap().contains("after retry"));
}

#[test]
fn slow_executor_times_out() {
    let ev = ExternalEvaluator::new(client(&["--delay-ms", "3000"], 200), dataset());
    let r = ev.evaluate(&names(&["GaussianNB"]));
    match r.status {
        Status::ExecutorError(m) => assert!(m.contains("timeout"), "{m}"),
        s => panic!("expected timeout, got {s:?}"),
    }
}

#[test]
fn handshake_checks_primitives() {
    let err = ExecutorClient::connect(argv(&[]), &names(&["GaussianNB", "XGBoost"]), Duration::from_secs(5), 0)
        .err()
        .unwrap();
    assert!(matches!(err, ExecutorError::MissingPrimitives(ref m) if m == "XGBoost"), "{err}");
    let err = ExecutorClient::connect(vec!["/nonexistent/executor".into()], &[], Duration::from_secs(5), 0)
        .err()
        .unwrap();
    assert!(matches!(err, ExecutorError::Spawn { .. } | ExecutorError::Handshake(_)), "{err}");
}

#[test]
fn cache_calls_the_executor_once_per_pipeline() {
    let ev: Arc<dyn Evaluator> = Arc::new(ExternalEvaluator::new(client(&[], 5000), dataset()));
    let cache = CachedEvaluator::new(ev);
    let p = names(&["GaussianNB"]);
    let (a, fresh_a) = cache.get_or_evaluate(&p);
    let (b, fresh_b) = cache.get_or_evaluate(&p);
    assert!(fresh_a && !fresh_b);
    assert_eq!(a.score, b.score);
}
