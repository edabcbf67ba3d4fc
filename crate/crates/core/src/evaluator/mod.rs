//! Pipeline scoring: the deterministic surrogate, its brute-force oracle,
//! the memoizing cache and the external executor client.

mod cache;
pub mod echo;
mod external;
mod surrogate;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::{CachedEvaluator, CacheStats, EvalSession, Scorer};
pub use external::{
    evaluate_external, DatasetEntry, ExecutorClient, ExecutorError, ExternalEvaluator,
    DEFAULT_TIMEOUT,
};
pub use surrogate::{brute_force_best, SurrogateEvaluator, SurrogateSpec, ORACLE_LIMIT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "message", rename_all = "snake_case")]
pub enum Status {
    Ok,
    InvalidPipeline,
    ExecutorError(String),
}

/// Score `e` of a realized pipeline. Any non-ok status carries `e = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub score: f64,
    pub status: Status,
    #[serde(with = "secs")]
    pub wall_time: Duration,
}

impl EvaluationResult {
    pub fn ok(score: f64) -> Self {
        EvaluationResult {
            score: score.clamp(0.0, 1.0),
            status: Status::Ok,
            wall_time: Duration::ZERO,
        }
    }

    pub fn invalid() -> Self {
        EvaluationResult { score: 0.0, status: Status::InvalidPipeline, wall_time: Duration::ZERO }
    }

    pub fn error(message: impl Into<String>) -> Self {
        EvaluationResult {
            score: 0.0,
            status: Status::ExecutorError(message.into()),
            wall_time: Duration::ZERO,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(v.max(0.0)))
    }
}

pub trait Evaluator: Send + Sync {
    /// Stable name used as part of cache keys.
    fn identity(&self) -> String;

    fn evaluate(&self, pipeline: &[String]) -> EvaluationResult;

    /// A failure that should abort the run (executor gone after retries).
    fn fatal_error(&self) -> Option<String> {
        None
    }
}

impl<E: Evaluator + ?Sized> Evaluator for std::sync::Arc<E> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn evaluate(&self, pipeline: &[String]) -> EvaluationResult {
        (**self).evaluate(pipeline)
    }

    fn fatal_error(&self) -> Option<String> {
        (**self).fatal_error()
    }
}
