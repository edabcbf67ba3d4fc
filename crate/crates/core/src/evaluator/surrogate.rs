use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{EvaluationResult, Evaluator};
use crate::grammar::{EnumerationOverflow, Grammar, Role};
use crate::hashing::{fnv1a64, splitmix64, unit_fraction};

/// Largest language the brute-force oracle will scan.
pub const ORACLE_LIMIT: usize = 100_000;

const ESTIMATOR_WEIGHT: f64 = 0.5;
const TRANSFORM_WEIGHT: f64 = 0.3;
const CLEANER_WEIGHT: f64 = 0.2;
const LENGTH_PENALTY: f64 = 0.02;

/// A synthetic dataset identified by its seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub seed: u64,
}

impl SurrogateSpec {
    pub fn new(seed: u64) -> Self {
        SurrogateSpec { seed }
    }

    /// `w(t) = (splitmix64(seed ^ fnv1a64(t)) mod 10^6) / 10^6`.
    pub fn weight(&self, terminal: &str) -> f64 {
        unit_fraction(splitmix64(self.seed ^ fnv1a64(terminal.as_bytes())))
    }
}

/// Deterministic stand-in for running a pipeline on a dataset.
///
/// A pipeline is valid when it is nonempty, its only estimator is the last
/// primitive and no cleaner follows a transform. Valid pipelines score
/// `0.5 w(est) + 0.3 mean w(transforms) + 0.2 mean w(cleaners) - 0.02 (len - 1)`
/// clamped to `[0, 1]`, with the mean of an empty segment taken as 0.
#[derive(Clone, Debug)]
pub struct SurrogateEvaluator {
    spec: SurrogateSpec,
    roles: HashMap<String, Role>,
}

impl SurrogateEvaluator {
    pub fn new(spec: SurrogateSpec, grammar: &Grammar) -> Self {
        let roles = grammar
            .terminals()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), grammar.role(i)))
            .collect();
        SurrogateEvaluator { spec, roles }
    }

    pub fn spec(&self) -> SurrogateSpec {
        self.spec
    }

    pub fn score(&self, pipeline: &[String]) -> EvaluationResult {
        let Some((last, body)) = pipeline.split_last() else {
            return EvaluationResult::invalid();
        };
        if self.roles.get(last) != Some(&Role::Estimator) {
            return EvaluationResult::invalid();
        }
        let mut cleaners = (0.0, 0usize);
        let mut transforms = (0.0, 0usize);
        for name in body {
            match self.roles.get(name) {
                Some(Role::Cleaner) if transforms.1 == 0 => {
                    cleaners.0 += self.spec.weight(name);
                    cleaners.1 += 1;
                }
                Some(Role::Transform) => {
                    transforms.0 += self.spec.weight(name);
                    transforms.1 += 1;
                }
                _ => return EvaluationResult::invalid(),
            }
        }
        let mean = |(sum, n): (f64, usize)| if n == 0 { 0.0 } else { sum / n as f64 };
        let e = ESTIMATOR_WEIGHT * self.spec.weight(last)
            + TRANSFORM_WEIGHT * mean(transforms)
            + CLEANER_WEIGHT * mean(cleaners)
            - LENGTH_PENALTY * (pipeline.len() - 1) as f64;
        EvaluationResult::ok(e)
    }
}

impl Evaluator for SurrogateEvaluator {
    fn identity(&self) -> String {
        format!("surrogate:{}", self.spec.seed)
    }

    fn evaluate(&self, pipeline: &[String]) -> EvaluationResult {
        self.score(pipeline)
    }
}

/// Exact argmax of the surrogate over the capped language. Ties go to the
/// lexicographically smallest name sequence.
pub fn brute_force_best(
    spec: SurrogateSpec,
    grammar: &Grammar,
    max_terminals: usize,
) -> Result<(Vec<String>, f64), EnumerationOverflow> {
    let eval = SurrogateEvaluator::new(spec, grammar);
    let mut best: Option<(Vec<String>, f64)> = None;
    for p in grammar.enumerate_pipelines_capped(max_terminals, ORACLE_LIMIT)? {
        let names: Vec<String> = p.iter().map(|&t| grammar.terminals()[t].clone()).collect();
        let e = eval.score(&names).score;
        if best.as_ref().is_none_or(|(bp, b)| e > *b || (e == *b && names < *bp)) {
            best = Some((names, e));
        }
    }
    Ok(best.expect("a parsed grammar derives at least one pipeline"))
}
