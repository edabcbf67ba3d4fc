use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F1,
    R2,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("metric {metric:?} is not valid for a {kind:?} task")]
pub struct InconsistentTask {
    pub kind: TaskKind,
    pub metric: Metric,
}

/// A task kind paired with its scoring metric (f1 for classification, r2
/// for regression).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTask")]
pub struct TaskSpec {
    kind: TaskKind,
    metric: Metric,
}

#[derive(Deserialize)]
struct RawTask {
    kind: TaskKind,
    metric: Metric,
}

impl TryFrom<RawTask> for TaskSpec {
    type Error = InconsistentTask;
    fn try_from(raw: RawTask) -> Result<Self, Self::Error> {
        TaskSpec::with_metric(raw.kind, raw.metric)
    }
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        let metric = match kind {
            TaskKind::Classification => Metric::F1,
            TaskKind::Regression => Metric::R2,
        };
        TaskSpec { kind, metric }
    }

    pub fn with_metric(kind: TaskKind, metric: Metric) -> Result<Self, InconsistentTask> {
        let spec = TaskSpec::new(kind);
        if spec.metric == metric {
            Ok(spec)
        } else {
            Err(InconsistentTask { kind, metric })
        }
    }

    pub fn classification() -> Self {
        TaskSpec::new(TaskKind::Classification)
    }

    pub fn regression() -> Self {
        TaskSpec::new(TaskKind::Regression)
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn kind_str(&self) -> &'static str {
        match self.kind {
            TaskKind::Classification => "classification",
            TaskKind::Regression => "regression",
        }
    }

    pub fn metric_str(&self) -> &'static str {
        match self.metric {
            Metric::F1 => "f1",
            Metric::R2 => "r2",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_follows_kind() {
        assert_eq!(TaskSpec::classification().metric(), Metric::F1);
        assert_eq!(TaskSpec::regression().metric(), Metric::R2);
        assert!(TaskSpec::with_metric(TaskKind::Regression, Metric::F1).is_err());
        let bad = serde_json::from_str::<TaskSpec>(r#"{"kind":"classification","metric":"r2"}"#);
        assert!(bad.is_err());
    }
}
