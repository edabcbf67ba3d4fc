//! Browser bindings. Each export takes plain values and returns a JSON
//! string; the page in `www/` renders it. The `*_json` functions hold the
//! logic so they can be tested natively.

use std::sync::Arc;

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use pipesynth::evaluator::{SurrogateEvaluator, SurrogateSpec};
use pipesynth::experiments::{grammar_stats, synth, DatasetSpec, Settings};
use pipesynth::game::ActionMode;
use pipesynth::grammar::{parse_grammar, Grammar, Role};
use pipesynth::task::TaskSpec;
use pipesynth::trainer::Budget;

/// Pipelines listed at most, so a recursive grammar cannot hang the tab.
const ENUMERATION_LIMIT: usize = 200_000;
const MAX_EPISODES: u64 = 500;

const CLASSIFICATION: &str = include_str!("../../../grammars/classification.grammar");

fn grammar(text: &str) -> Result<Arc<Grammar>, String> {
    parse_grammar(text).map(Arc::new).map_err(|e| format!("grammar: {e}"))
}

fn role_name(r: Role) -> &'static str {
    match r {
        Role::Cleaner => "cleaner",
        Role::Transform => "transform",
        Role::Estimator => "estimator",
    }
}

fn names(g: &Grammar, p: &[usize]) -> Vec<String> {
    p.iter().map(|&t| g.terminals()[t].clone()).collect()
}

/// Language size, derivation lengths, alternatives per nonterminal and the
/// first few pipelines of the capped language.
pub fn explore_json(text: &str, max_terminals: usize, sample: usize) -> Result<String, String> {
    let g = grammar(text)?;
    let stats = grammar_stats(&g, max_terminals, ENUMERATION_LIMIT).map_err(|e| e.to_string())?;
    let pipelines = g.enumerate_pipelines_capped(max_terminals, ENUMERATION_LIMIT).map_err(|e| e.to_string())?;
    let terminals: Vec<Value> = g
        .terminals()
        .iter()
        .enumerate()
        .map(|(i, t)| json!({ "name": t, "role": role_name(g.role(i)) }))
        .collect();
    let sample: Vec<Vec<String>> = pipelines.iter().take(sample).map(|p| names(&g, p)).collect();
    Ok(json!({ "stats": stats, "terminals": terminals, "sample": sample }).to_string())
}

/// One seeded search on a surrogate dataset, with the best-so-far curve and
/// the exact optimum when the language is small enough to enumerate.
pub fn synthesize_json(text: &str, seed: u64, episodes: u64, edit_mode: bool, train: bool) -> Result<String, String> {
    let g = grammar(text)?;
    let episodes = episodes.clamp(1, MAX_EPISODES);
    let mut settings = Settings::default();
    if edit_mode {
        settings.game.mode = ActionMode::Edit;
    }
    let dataset = DatasetSpec::surrogate(seed, &g, TaskSpec::classification());
    let out = synth(&g, &dataset, &settings, None, Budget::episodes(episodes), train, seed).map_err(|e| e.to_string())?;
    let s = out.synthesis;
    let optimum = dataset
        .optimum(&g, settings.game.max_terminals)
        .ok()
        .map(|(p, e)| json!({ "pipeline": p, "e": e }));
    let trace: Vec<Value> = s
        .log
        .iter()
        .map(|ep| json!({ "episode": ep.episode, "pipeline": ep.pipeline, "e": ep.e, "best_e": ep.best_e }))
        .collect();
    Ok(json!({
        "pipeline": s.pipeline,
        "e": s.e,
        "episodes": s.episodes,
        "evaluations": s.evaluations,
        "evaluations_to_best": s.evaluations_to_best,
        "curve": s.curve,
        "mean_branching": s.stats.mean_branching(),
        "mean_depth": s.stats.mean_depth(),
        "optimum": optimum,
        "trace": trace,
    })
    .to_string())
}

/// Terminal weights of a surrogate seed, the best pipelines and a histogram
/// of scores over the capped language.
pub fn landscape_json(text: &str, seed: u64, max_terminals: usize, top: usize, bins: usize) -> Result<String, String> {
    let g = grammar(text)?;
    let spec = SurrogateSpec::new(seed);
    let eval = SurrogateEvaluator::new(spec, &g);
    let pipelines = g.enumerate_pipelines_capped(max_terminals, ENUMERATION_LIMIT).map_err(|e| e.to_string())?;
    let mut scored: Vec<(Vec<String>, f64)> = pipelines
        .iter()
        .map(|p| {
            let n = names(&g, p);
            let e = eval.score(&n).score;
            (n, e)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let bins = bins.max(1);
    let mut histogram = vec![0usize; bins];
    for (_, e) in &scored {
        histogram[((e * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let weights: Vec<Value> = g
        .terminals()
        .iter()
        .enumerate()
        .map(|(i, t)| json!({ "name": t, "role": role_name(g.role(i)), "w": spec.weight(t) }))
        .collect();
    let best: Vec<Value> = scored.iter().take(top).map(|(p, e)| json!({ "pipeline": p, "e": e })).collect();
    Ok(json!({ "size": scored.len(), "weights": weights, "best": best, "histogram": histogram }).to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = defaultGrammar)]
pub fn default_grammar() -> String {
    CLASSIFICATION.to_string()
}

#[wasm_bindgen]
pub fn explore(text: &str, max_terminals: usize, sample: usize) -> Result<String, JsError> {
    js(explore_json(text, max_terminals, sample))
}

#[wasm_bindgen]
pub fn synthesize(text: &str, seed: u32, episodes: u32, edit_mode: bool, train: bool) -> Result<String, JsError> {
    js(synthesize_json(text, seed.into(), episodes.into(), edit_mode, train))
}

#[wasm_bindgen]
pub fn landscape(text: &str, seed: u32, max_terminals: usize, top: usize, bins: usize) -> Result<String, JsError> {
    js(landscape_json(text, seed.into(), max_terminals, top, bins))
}
