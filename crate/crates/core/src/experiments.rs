//! Seeded experiment drivers shared by the command-line front end and the
//! acceptance tests. Every run gets its own evaluation cache and a seed
//! derived from the master seed, so runs are independent and a report is a
//! pure function of its inputs (timing fields aside).

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::evaluator::{DatasetEntry, ExecutorClient, ExternalEvaluator};
use crate::evaluator::{brute_force_best, CachedEvaluator, Evaluator, SurrogateEvaluator, SurrogateSpec};
use crate::game::{ActionMode, Game, GameConfig};
use crate::grammar::{EnumerationOverflow, Grammar, Symbol};
use crate::hashing::splitmix64;
use crate::metafeatures::{compute, MetaError, MetaFeatures, Table};
use crate::network::ModelParams;
use crate::task::TaskSpec;
use crate::trainer::{pretrain, synthesize, Budget, Dataset, IterationReport, NetworkSize, Synthesis, TrainConfig, TrainError, Trainer};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0} needs a surrogate dataset to compute the optimum")]
    NeedsOracle(String),
    #[error(transparent)]
    Overflow(#[from] EnumerationOverflow),
    #[error("{0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub game: GameConfig,
    pub network: NetworkSize,
    pub train: TrainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { game: GameConfig::default(), network: NetworkSize::default(), train: TrainConfig::default() }
    }
}

/// A dataset an experiment can be run on: its meta-features, task, and the
/// evaluator that scores pipelines on it.
#[derive(Clone)]
pub struct DatasetSpec {
    pub name: String,
    pub meta: MetaFeatures,
    pub task: TaskSpec,
    pub evaluator: Arc<dyn Evaluator>,
    pub surrogate: Option<SurrogateSpec>,
}

impl DatasetSpec {
    pub fn surrogate(seed: u64, grammar: &Grammar, task: TaskSpec) -> Self {
        let spec = SurrogateSpec::new(seed);
        DatasetSpec {
            name: format!("surrogate:{seed}"),
            meta: MetaFeatures::surrogate(seed),
            task,
            evaluator: Arc::new(SurrogateEvaluator::new(spec, grammar)),
            surrogate: Some(spec),
        }
    }

    /// A manifest dataset scored by an external executor. Meta-features come
    /// from the CSV at `entry.path`.
    pub fn external(entry: DatasetEntry, client: Arc<ExecutorClient>) -> Result<Self, MetaError> {
        let task = TaskSpec::new(entry.task);
        let table = Table::read_csv(Path::new(&entry.path))?;
        let meta = compute(&table, &entry.target_column, task)?;
        Ok(DatasetSpec {
            name: entry.name.clone(),
            meta,
            task,
            evaluator: Arc::new(ExternalEvaluator::new(client, entry)),
            surrogate: None,
        })
    }

    /// A [`Dataset`] with a cache of its own.
    pub fn instantiate(&self) -> Dataset {
        Dataset::new(self.name.clone(), self.meta, self.task, Arc::new(CachedEvaluator::new(self.evaluator.clone())))
    }

    /// Exact optimum over the grammar's capped language.
    pub fn optimum(&self, grammar: &Grammar, max_terminals: usize) -> Result<(Vec<String>, f64), ExperimentError> {
        let spec = self.surrogate.ok_or_else(|| ExperimentError::NeedsOracle(self.name.clone()))?;
        Ok(brute_force_best(spec, grammar, max_terminals)?)
    }
}

/// Seed for one run, mixed from the master seed and the run's coordinates.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub mode: String,
    pub repetition: u32,
    pub seed: u64,
    pub best_pipeline: Vec<String>,
    pub best_e: f64,
    pub target: Option<f64>,
    pub evaluations: u64,
    pub evaluations_to_best: u64,
    /// Evaluations until the target was first met; the evaluation budget
    /// when it never was.
    pub evaluations_to_target: Option<u64>,
    pub reached_target: Option<bool>,
    pub episodes: u64,
    pub total_actions: u64,
    pub mean_branching: f64,
    pub mean_depth: f64,
    pub max_depth: u64,
    pub cpu_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianCell {
    /// Dataset name, or `"all"`.
    pub scope: String,
    pub mode: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRecord {
    pub dataset: String,
    pub grammar_best_e: f64,
    pub edit_best_e: f64,
    /// `grammar_best_e - edit_best_e`.
    pub delta_best_e: f64,
    pub grammar_total_actions: u64,
    pub edit_total_actions: u64,
    pub grammar_mean_branching: f64,
    pub edit_mean_branching: f64,
    pub grammar_mean_depth: f64,
    pub edit_mean_depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: u32,
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub records: Vec<RunRecord>,
    pub medians: Vec<MedianCell>,
    pub pairs: Vec<PairedRecord>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn record(
    dataset: &str,
    mode: &str,
    repetition: u32,
    seed: u64,
    s: &Synthesis,
    target: Option<f64>,
    budget: &Budget,
) -> RunRecord {
    let reached = target.map(|_| s.evaluations_to_target.is_some());
    let to_target = target.map(|_| {
        s.evaluations_to_target
            .unwrap_or_else(|| budget.evaluations.unwrap_or(s.evaluations).max(s.evaluations))
    });
    RunRecord {
        dataset: dataset.to_string(),
        mode: mode.to_string(),
        repetition,
        seed,
        best_pipeline: s.pipeline.clone(),
        best_e: s.e,
        target,
        evaluations: s.evaluations,
        evaluations_to_best: s.evaluations_to_best,
        evaluations_to_target: to_target,
        reached_target: reached,
        episodes: s.episodes,
        total_actions: s.stats.total_actions,
        mean_branching: s.stats.mean_branching(),
        mean_depth: s.stats.mean_depth(),
        max_depth: s.stats.max_depth,
        cpu_seconds: s.cpu_seconds,
    }
}

/// How the network of a run starts out.
#[derive(Clone, Copy)]
pub enum Init<'a> {
    Fresh,
    Zero,
    Checkpoint(&'a Checkpoint),
}

/// One synthesis run.
pub struct RunSpec<'a> {
    pub grammar: &'a Arc<Grammar>,
    pub dataset: &'a DatasetSpec,
    pub settings: &'a Settings,
    pub init: Init<'a>,
    pub budget: Budget,
    pub train: bool,
    pub target: Option<f64>,
    pub seed: u64,
}

pub fn run(spec: &RunSpec) -> Result<Synthesis, ExperimentError> {
    let mut train = spec.settings.train;
    train.workers = 1;
    let mut trainer = match spec.init {
        Init::Checkpoint(ck) => {
            let game = Arc::new(ck.game(spec.grammar.clone())?);
            Trainer::from_checkpoint(game, ck, train, spec.seed)?
        }
        Init::Fresh => {
            let game = Arc::new(Game::new(spec.grammar.clone(), spec.settings.game));
            Trainer::fresh(game, spec.settings.network, train, spec.seed)?
        }
        Init::Zero => {
            let game = Arc::new(Game::new(spec.grammar.clone(), spec.settings.game));
            let params = ModelParams::zeros(spec.settings.network.shape(&game));
            Trainer::new(game, params, train, spec.seed)?
        }
    };
    let mut dataset = spec.dataset.instantiate();
    if let Some(t) = spec.target {
        dataset = dataset.with_target(t);
    }
    Ok(synthesize(&mut trainer, &mut dataset, spec.budget, spec.train)?)
}

/// Runs independent jobs, `workers` at a time; results keep job order.
fn run_all<T: Send>(
    workers: usize,
    jobs: Vec<Box<dyn FnOnce() -> Result<T, ExperimentError> + Send + '_>>,
) -> Result<Vec<T>, ExperimentError> {
    let mut out = Vec::with_capacity(jobs.len());
    let mut jobs = jobs.into_iter().peekable();
    while jobs.peek().is_some() {
        let chunk: Vec<_> = jobs.by_ref().take(workers.max(1)).collect();
        if chunk.len() == 1 {
            for j in chunk {
                out.push(j()?);
            }
            continue;
        }
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.into_iter().map(|j| s.spawn(j)).collect();
            handles.into_iter().map(|h| h.join().expect("experiment worker panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

fn config_echo(settings: &Settings, extra: Value) -> Value {
    let mut v = serde_json::json!({ "settings": settings });
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    v
}

/// Output of `synth`: the report plus the full synthesis with its log.
pub struct SynthOutput {
    pub report: ExperimentReport,
    pub synthesis: Synthesis,
}

pub fn synth(
    grammar: &Arc<Grammar>,
    dataset: &DatasetSpec,
    settings: &Settings,
    checkpoint: Option<&Checkpoint>,
    budget: Budget,
    train: bool,
    seed: u64,
) -> Result<SynthOutput, ExperimentError> {
    let init = checkpoint.map_or(Init::Fresh, Init::Checkpoint);
    let game_config = checkpoint.map_or(settings.game, |c| c.game);
    let s = run(&RunSpec { grammar, dataset, settings, init, budget, train, target: None, seed })?;
    let mode = game_config.mode.as_str();
    let rec = record(&dataset.name, mode, 0, seed, &s, None, &budget);
    let report = ExperimentReport {
        version: REPORT_VERSION,
        command: "synth".into(),
        seed,
        config: config_echo(
            settings,
            serde_json::json!({
                "grammar_fingerprint": grammar.fingerprint(),
                "dataset": dataset.name,
                "budget": budget,
                "train": train,
                "checkpoint_iteration": checkpoint.map(|c| c.iteration),
            }),
        ),
        medians: Vec::new(),
        pairs: Vec::new(),
        records: vec![rec],
    };
    Ok(SynthOutput { report, synthesis: s })
}

/// Both action modes on every dataset with the same budget and seed.
pub fn compare_grammar(
    grammar: &Arc<Grammar>,
    datasets: &[DatasetSpec],
    settings: &Settings,
    budget: Budget,
    train: bool,
    seed: u64,
) -> Result<ExperimentReport, ExperimentError> {
    let modes = [ActionMode::Grammar, ActionMode::Edit];
    let mut jobs: Vec<Box<dyn FnOnce() -> Result<RunRecord, ExperimentError> + Send>> = Vec::new();
    for (di, d) in datasets.iter().enumerate() {
        let run_seed = derive_seed(seed, &[di as u64]);
        for mode in modes {
            let mut s = *settings;
            s.game.mode = mode;
            jobs.push(Box::new(move || {
                let out = run(&RunSpec {
                    grammar,
                    dataset: d,
                    settings: &s,
                    init: Init::Fresh,
                    budget,
                    train,
                    target: None,
                    seed: run_seed,
                })?;
                Ok(record(&d.name, mode.as_str(), 0, run_seed, &out, None, &budget))
            }));
        }
    }
    let records = run_all(settings.train.workers, jobs)?;
    let pairs: Vec<PairedRecord> = records
        .chunks(2)
        .map(|p| PairedRecord {
            dataset: p[0].dataset.clone(),
            grammar_best_e: p[0].best_e,
            edit_best_e: p[1].best_e,
            delta_best_e: p[0].best_e - p[1].best_e,
            grammar_total_actions: p[0].total_actions,
            edit_total_actions: p[1].total_actions,
            grammar_mean_branching: p[0].mean_branching,
            edit_mean_branching: p[1].mean_branching,
            grammar_mean_depth: p[0].mean_depth,
            edit_mean_depth: p[1].mean_depth,
        })
        .collect();
    let mut medians = Vec::new();
    for mode in modes {
        let rs: Vec<&RunRecord> = records.iter().filter(|r| r.mode == mode.as_str()).collect();
        let metrics: [(&str, fn(&RunRecord) -> f64); 4] = [
            ("best_e", |r| r.best_e),
            ("total_actions", |r| r.total_actions as f64),
            ("mean_branching", |r| r.mean_branching),
            ("mean_depth", |r| r.mean_depth),
        ];
        for (name, f) in metrics {
            medians.push(MedianCell {
                scope: "all".into(),
                mode: mode.as_str().into(),
                metric: name.into(),
                value: median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>()),
            });
        }
    }
    medians.push(MedianCell {
        scope: "all".into(),
        mode: "paired".into(),
        metric: "abs_delta_best_e".into(),
        value: median(&pairs.iter().map(|p| p.delta_best_e.abs()).collect::<Vec<_>>()),
    });
    Ok(ExperimentReport {
        version: REPORT_VERSION,
        command: "compare-grammar".into(),
        seed,
        config: config_echo(
            settings,
            serde_json::json!({
                "grammar_fingerprint": grammar.fingerprint(),
                "datasets": datasets.iter().map(|d| d.name.clone()).collect::<Vec<_>>(),
                "budget": budget,
                "train": train,
            }),
        ),
        records,
        medians,
        pairs,
    })
}

/// One arm of a repeated evaluations-to-target comparison.
pub struct Arm<'a> {
    pub mode: &'a str,
    pub init: Init<'a>,
    pub train: bool,
}

fn repeated_to_target(
    command: &str,
    grammar: &Arc<Grammar>,
    datasets: &[DatasetSpec],
    settings: &Settings,
    arms: &[Arm],
    target_fraction: f64,
    budget: Budget,
    repetitions: u32,
    seed: u64,
    extra: Value,
) -> Result<ExperimentReport, ExperimentError> {
    if repetitions == 0 {
        return Err(ExperimentError::Config("repetitions must be at least 1".into()));
    }
    if !(target_fraction > 0.0 && target_fraction <= 1.0) {
        return Err(ExperimentError::Config(format!("target fraction {target_fraction} is outside (0, 1]")));
    }
    let max_terminals = arms
        .iter()
        .find_map(|a| match a.init {
            Init::Checkpoint(c) => Some(c.game.max_terminals),
            _ => None,
        })
        .unwrap_or(settings.game.max_terminals);
    let mut optima = Vec::with_capacity(datasets.len());
    for d in datasets {
        optima.push(d.optimum(grammar, max_terminals)?.1);
    }
    let budget = Budget { stop_at: None, ..budget };
    let mut jobs: Vec<Box<dyn FnOnce() -> Result<RunRecord, ExperimentError> + Send>> = Vec::new();
    for (di, d) in datasets.iter().enumerate() {
        let target = target_fraction * optima[di];
        for rep in 0..repetitions {
            let run_seed = derive_seed(seed, &[di as u64, u64::from(rep)]);
            for arm in arms {
                let (mode, init, train) = (arm.mode.to_string(), arm.init, arm.train);
                let b = Budget { stop_at: Some(target), ..budget };
                jobs.push(Box::new(move || {
                    let out = run(&RunSpec {
                        grammar,
                        dataset: d,
                        settings,
                        init,
                        budget: b,
                        train,
                        target: Some(target),
                        seed: run_seed,
                    })?;
                    Ok(record(&d.name, &mode, rep, run_seed, &out, Some(target), &b))
                }));
            }
        }
    }
    let records = run_all(settings.train.workers, jobs)?;
    let mut medians = Vec::new();
    for d in datasets {
        for arm in arms {
            let v: Vec<f64> = records
                .iter()
                .filter(|r| r.dataset == d.name && r.mode == arm.mode)
                .map(|r| r.evaluations_to_target.unwrap_or(0) as f64)
                .collect();
            medians.push(MedianCell {
                scope: d.name.clone(),
                mode: arm.mode.into(),
                metric: "evaluations_to_target".into(),
                value: median(&v),
            });
        }
    }
    let mut echo = serde_json::json!({
        "grammar_fingerprint": grammar.fingerprint(),
        "datasets": datasets.iter().map(|d| d.name.clone()).collect::<Vec<_>>(),
        "optima": optima,
        "target_fraction": target_fraction,
        "budget": budget,
        "repetitions": repetitions,
        "arms": arms.iter().map(|a| serde_json::json!({"mode": a.mode, "train": a.train})).collect::<Vec<_>>(),
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut echo, extra) {
        m.extend(e);
    }
    Ok(ExperimentReport {
        version: REPORT_VERSION,
        command: command.into(),
        seed,
        config: config_echo(settings, echo),
        records,
        medians,
        pairs: Vec::new(),
    })
}

/// Network-guided search with online training against uniform priors with
/// training disabled, evaluations to `target_fraction * e*`.
pub fn ablate(
    grammar: &Arc<Grammar>,
    datasets: &[DatasetSpec],
    settings: &Settings,
    target_fraction: f64,
    budget: Budget,
    repetitions: u32,
    seed: u64,
) -> Result<ExperimentReport, ExperimentError> {
    let arms = [
        Arm { mode: "trained", init: Init::Fresh, train: true },
        Arm { mode: "uniform", init: Init::Zero, train: false },
    ];
    repeated_to_target("ablate", grammar, datasets, settings, &arms, target_fraction, budget, repetitions, seed, Value::Null)
}

/// Checkpoint against a freshly initialized network, both trained online
/// with equal budgets.
pub fn warmstart_eval(
    grammar: &Arc<Grammar>,
    dataset: &DatasetSpec,
    settings: &Settings,
    checkpoint: &Checkpoint,
    target_fraction: f64,
    budget: Budget,
    repetitions: u32,
    train: bool,
    seed: u64,
) -> Result<ExperimentReport, ExperimentError> {
    checkpoint.check_compatible(grammar)?;
    let mut s = *settings;
    s.game = checkpoint.game;
    s.network.embed = checkpoint.params.shape().embed;
    s.network.hidden = checkpoint.params.shape().hidden;
    let arms = [
        Arm { mode: "warm", init: Init::Checkpoint(checkpoint), train },
        Arm { mode: "cold", init: Init::Fresh, train },
    ];
    let extra = serde_json::json!({ "checkpoint_iteration": checkpoint.iteration });
    repeated_to_target(
        "warmstart-eval",
        grammar,
        std::slice::from_ref(dataset),
        &s,
        &arms,
        target_fraction,
        budget,
        repetitions,
        seed,
        extra,
    )
}

/// Trains one network across `datasets` and returns its checkpoint.
pub fn pretrain_family(
    grammar: &Arc<Grammar>,
    datasets: &[DatasetSpec],
    settings: &Settings,
    iterations: usize,
    seed: u64,
    checkpoint: Option<(&Path, usize)>,
    on_iteration: impl FnMut(&IterationReport),
) -> Result<(Checkpoint, Vec<IterationReport>), ExperimentError> {
    let game = Arc::new(Game::new(grammar.clone(), settings.game));
    let mut trainer = Trainer::fresh(game, settings.network, settings.train, seed)?;
    let mut ds: Vec<Dataset> = datasets.iter().map(DatasetSpec::instantiate).collect();
    let reports = pretrain(&mut trainer, &mut ds, iterations, checkpoint, on_iteration)?;
    Ok((trainer.checkpoint(), reports))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonterminalStats {
    pub name: String,
    pub alternatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarStats {
    pub version: u32,
    pub command: String,
    pub grammar_fingerprint: String,
    pub max_terminals: usize,
    pub language_size: usize,
    /// Distinct derivation lengths (rule applications), ascending.
    pub derivation_lengths: Vec<usize>,
    pub max_derivation_length: usize,
    pub mean_derivation_length: f64,
    pub terminals: usize,
    pub rules: usize,
    pub nonterminals: Vec<NonterminalStats>,
}

pub fn grammar_stats(grammar: &Grammar, max_terminals: usize, limit: usize) -> Result<GrammarStats, ExperimentError> {
    if max_terminals == 0 {
        return Err(ExperimentError::Config("max_terminals must be at least 1".into()));
    }
    let derivations = grammar.enumerate_derivations(max_terminals, limit)?;
    let pipelines = grammar.enumerate_pipelines_capped(max_terminals, limit)?;
    let lengths: Vec<usize> = derivations.iter().map(|d| d.applied.len()).collect();
    let mut distinct = lengths.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let mean = if lengths.is_empty() {
        0.0
    } else {
        lengths.iter().sum::<usize>() as f64 / lengths.len() as f64
    };
    Ok(GrammarStats {
        version: REPORT_VERSION,
        command: "grammar-stats".into(),
        grammar_fingerprint: grammar.fingerprint(),
        max_terminals,
        language_size: pipelines.len(),
        max_derivation_length: distinct.last().copied().unwrap_or(0),
        derivation_lengths: distinct,
        mean_derivation_length: mean,
        terminals: grammar.terminals().len(),
        rules: grammar.rules().len(),
        nonterminals: grammar
            .nonterminals()
            .iter()
            .enumerate()
            .map(|(i, _)| NonterminalStats {
                name: grammar.symbol_name(Symbol::Nonterminal(i)),
                alternatives: grammar.rules_for(i).len(),
            })
            .collect(),
    })
}
