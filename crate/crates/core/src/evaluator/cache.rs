use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use super::{EvaluationResult, Evaluator};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

impl CacheStats {
    pub fn hit_ratio(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

type Slot = Arc<OnceLock<EvaluationResult>>;

/// Memoizes an evaluator by `(identity, pipeline)`.
///
/// Get-or-insert is atomic: concurrent callers asking for the same pipeline
/// share one slot and the inner evaluator runs once.
pub struct CachedEvaluator {
    inner: Arc<dyn Evaluator>,
    slots: Mutex<HashMap<String, Slot>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CachedEvaluator {
    pub fn new(inner: Arc<dyn Evaluator>) -> Self {
        CachedEvaluator {
            inner,
            slots: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    fn key(&self, pipeline: &[String]) -> String {
        format!("{}\u{1f}{}", self.inner.identity(), pipeline.join(" "))
    }

    /// Returns the result and whether this call ran the inner evaluator.
    pub fn get_or_evaluate(&self, pipeline: &[String]) -> (EvaluationResult, bool) {
        let slot = {
            let mut slots = self.slots.lock().expect("cache lock");
            slots.entry(self.key(pipeline)).or_default().clone()
        };
        let mut fresh = false;
        let result = slot.get_or_init(|| {
            fresh = true;
            self.inner.evaluate(pipeline)
        });
        if fresh {
            self.misses.fetch_add(1, Ordering::Relaxed);
        } else {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        (result.clone(), fresh)
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Evaluator for CachedEvaluator {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn evaluate(&self, pipeline: &[String]) -> EvaluationResult {
        self.get_or_evaluate(pipeline).0
    }

    fn fatal_error(&self) -> Option<String> {
        self.inner.fatal_error()
    }
}

/// Anything the search can ask for the actual score of a realized pipeline.
pub trait Scorer {
    fn score(&mut self, pipeline: &[String]) -> EvaluationResult;
}

impl<E: Evaluator + ?Sized> Scorer for &E {
    fn score(&mut self, pipeline: &[String]) -> EvaluationResult {
        self.evaluate(pipeline)
    }
}

/// Per-run view of a shared cache: counts this run's actual evaluations
/// (cache misses) and tracks the best pipeline seen so far.
pub struct EvalSession {
    cache: Arc<CachedEvaluator>,
    evaluations: u64,
    calls: u64,
    failures: u64,
    best: Option<(Vec<String>, f64)>,
    evaluations_to_best: u64,
    target: Option<f64>,
    evaluations_to_target: Option<u64>,
    /// `(evaluations, best-so-far)` at every improvement.
    curve: Vec<(u64, f64)>,
}

impl EvalSession {
    pub fn new(cache: Arc<CachedEvaluator>) -> Self {
        EvalSession {
            cache,
            evaluations: 0,
            calls: 0,
            failures: 0,
            best: None,
            evaluations_to_best: 0,
            target: None,
            evaluations_to_target: None,
            curve: Vec::new(),
        }
    }

    pub fn with_target(mut self, target: f64) -> Self {
        self.target = Some(target);
        self
    }

    pub fn cache(&self) -> &Arc<CachedEvaluator> {
        &self.cache
    }

    /// Actual evaluator calls made through this session.
    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn failures(&self) -> u64 {
        self.failures
    }

    pub fn best(&self) -> Option<(&[String], f64)> {
        self.best.as_ref().map(|(p, e)| (p.as_slice(), *e))
    }

    pub fn evaluations_to_best(&self) -> u64 {
        self.evaluations_to_best
    }

    pub fn evaluations_to_target(&self) -> Option<u64> {
        self.evaluations_to_target
    }

    pub fn curve(&self) -> &[(u64, f64)] {
        &self.curve
    }
}

impl EvalSession {
    /// Books one scorer call whose result was obtained elsewhere, e.g. by a
    /// worker thread sharing this session's cache.
    pub fn record(&mut self, pipeline: &[String], result: &EvaluationResult, fresh: bool) {
        self.calls += 1;
        if fresh {
            self.evaluations += 1;
        }
        if matches!(result.status, super::Status::ExecutorError(_)) {
            self.failures += 1;
        }
        let e = result.score;
        if self.best.as_ref().is_none_or(|(_, b)| e > *b) {
            self.best = Some((pipeline.to_vec(), e));
            self.evaluations_to_best = self.evaluations;
            self.curve.push((self.evaluations, e));
        }
        if let (Some(t), None) = (self.target, self.evaluations_to_target) {
            if e >= t {
                self.evaluations_to_target = Some(self.evaluations);
            }
        }
    }
}

impl Scorer for EvalSession {
    fn score(&mut self, pipeline: &[String]) -> EvaluationResult {
        let (result, fresh) = self.cache.get_or_evaluate(pipeline);
        self.record(pipeline, &result, fresh);
        result
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::AtomicUsize;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    struct Counting(AtomicUsize);

    impl Evaluator for Counting {
        fn identity(&self) -> String {
            "counting".into()
        }
        fn evaluate(&self, pipeline: &[String]) -> EvaluationResult {
            self.0.fetch_add(1, Ordering::SeqCst);
            EvaluationResult::ok(pipeline.len() as f64 / 10.0)
        }
    }

    fn p(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_calls_hit_once() {
        let inner = Arc::new(Counting(AtomicUsize::new(0)));
        let cache = CachedEvaluator::new(inner.clone());
        let a = cache.evaluate(&p("x y"));
        let b = cache.evaluate(&p("x y"));
        assert_eq!(a, b);
        assert_eq!(inner.0.load(Ordering::SeqCst), 1);
        cache.evaluate(&p("x z"));
        assert_eq!(inner.0.load(Ordering::SeqCst), 2);
        assert_eq!(cache.stats(), CacheStats { hits: 1, misses: 2 });
    }

    #[test]
    fn hit_ratio_matches_distinct_count() {
        let inner = Arc::new(Counting(AtomicUsize::new(0)));
        let cache = CachedEvaluator::new(inner.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut distinct = std::collections::HashSet::new();
        for _ in 0..1000 {
            let k: u32 = rng.random_range(0..150);
            distinct.insert(k);
            cache.evaluate(&[k.to_string()]);
        }
        let expected = 1.0 - distinct.len() as f64 / 1000.0;
        assert!((cache.stats().hit_ratio() - expected).abs() < 1e-12);
        assert_eq!(inner.0.load(Ordering::SeqCst), distinct.len());
    }

    #[test]
    fn concurrent_callers_share_one_evaluation() {
        let inner = Arc::new(Counting(AtomicUsize::new(0)));
        let cache = Arc::new(CachedEvaluator::new(inner.clone()));
        std::thread::scope(|s| {
            for _ in 0..4 {
                let cache = cache.clone();
                s.spawn(move || {
                    for i in 0..50 {
                        cache.evaluate(&[format!("p{}", i % 10)]);
                    }
                });
            }
        });
        assert_eq!(inner.0.load(Ordering::SeqCst), 10);
    }

    #[test]
    fn session_tracks_best_and_target() {
        let cache = Arc::new(CachedEvaluator::new(Arc::new(Counting(AtomicUsize::new(0)))));
        let mut s = EvalSession::new(cache).with_target(0.25);
        s.score(&p("a"));
        s.score(&p("a b"));
        s.score(&p("a"));
        assert_eq!(s.evaluations_to_target(), None);
        s.score(&p("a b c"));
        assert_eq!(s.evaluations(), 3);
        assert_eq!(s.calls(), 4);
        assert_eq!(s.evaluations_to_target(), Some(3));
        assert_eq!(s.best().unwrap().1, 0.3);
        assert_eq!(s.curve(), &[(1, 0.1), (2, 0.2), (3, 0.3)]);
    }
}
