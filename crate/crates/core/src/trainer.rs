//! Self-play training: episodes fill a replay buffer, SGD on uniform
//! mini-batches updates the network, and synthesis runs episodes against a
//! budget while keeping a provenance log.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::evaluator::{CachedEvaluator, EvalSession, EvaluationResult, Evaluator, Scorer, Status, SurrogateEvaluator, SurrogateSpec};
use crate::game::{Game, GameState};
use crate::grammar::Grammar;
use crate::mcts::{run_episode, Episode, MoveRecord, NetworkGuide, SearchConfig, SearchError, SearchStats};
use crate::metafeatures::MetaFeatures;
use crate::network::{loss, loss_and_gradient, sgd_step, ModelParams, ModelShape, NetworkError, TrainingExample};
use crate::task::TaskSpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub alpha: f64,
    pub batch: usize,
    pub buffer_capacity: usize,
    pub episodes_per_iteration: usize,
    pub gradient_steps: usize,
    pub search: SearchConfig,
    /// Episodes played concurrently. 1 keeps runs bit-reproducible.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            alpha: 1e-4,
            batch: 32,
            buffer_capacity: 50_000,
            episodes_per_iteration: 16,
            gradient_steps: 64,
            search: SearchConfig::default(),
            workers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSize {
    pub embed: usize,
    pub hidden: usize,
}

impl Default for NetworkSize {
    fn default() -> Self {
        NetworkSize { embed: 32, hidden: 64 }
    }
}

impl NetworkSize {
    pub fn shape(&self, game: &Game) -> ModelShape {
        ModelShape::new(game.vocabulary().len(), self.embed, self.hidden, game.action_space_size())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no datasets to train on")]
    NoDatasets,
    #[error("pretraining needs at least 2 datasets, got {0}")]
    TooFewDatasets(usize),
    #[error("budget must allow at least one episode")]
    EmptyBudget,
    #[error("evaluator failed: {0}")]
    Evaluator(String),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("network does not fit the game: {0}")]
    Guide(#[from] crate::mcts::GuideError),
}

/// FIFO ring of training examples.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<TrainingExample>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), items: VecDeque::new() }
    }

    pub fn push(&mut self, ex: TrainingExample) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(ex);
    }

    pub fn extend(&mut self, examples: impl IntoIterator<Item = TrainingExample>) {
        for ex in examples {
            self.push(ex);
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &TrainingExample> {
        self.items.iter()
    }

    /// `n` examples drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<TrainingExample> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| self.items[rng.random_range(0..self.items.len())].clone()).collect()
    }
}

/// One dataset the search plays on, with its own evaluation bookkeeping.
pub struct Dataset {
    pub name: String,
    pub meta: MetaFeatures,
    pub task: TaskSpec,
    pub session: EvalSession,
}

impl Dataset {
    pub fn new(name: impl Into<String>, meta: MetaFeatures, task: TaskSpec, cache: Arc<CachedEvaluator>) -> Self {
        Dataset { name: name.into(), meta, task, session: EvalSession::new(cache) }
    }

    /// Surrogate dataset `surrogate:SEED` with a fresh cache.
    pub fn surrogate(seed: u64, grammar: &Grammar, task: TaskSpec) -> Self {
        let ev: Arc<dyn Evaluator> = Arc::new(SurrogateEvaluator::new(SurrogateSpec::new(seed), grammar));
        Dataset::new(format!("surrogate:{seed}"), MetaFeatures::surrogate(seed), task, Arc::new(CachedEvaluator::new(ev)))
    }

    pub fn with_target(mut self, target: f64) -> Self {
        self.session = EvalSession::new(self.session.cache().clone()).with_target(target);
        self
    }

    pub fn best_e(&self) -> f64 {
        self.session.best().map_or(0.0, |(_, e)| e)
    }
}

/// Records scorer calls so they can be booked into a session afterwards.
struct Recorder<'a> {
    cache: &'a CachedEvaluator,
    calls: Vec<(Vec<String>, EvaluationResult, bool)>,
}

impl Scorer for Recorder<'_> {
    fn score(&mut self, pipeline: &[String]) -> EvaluationResult {
        let (result, fresh) = self.cache.get_or_evaluate(pipeline);
        self.calls.push((pipeline.to_vec(), result.clone(), fresh));
        result
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: u64,
    pub dataset: String,
    pub moves: Vec<MoveRecord>,
    pub pipeline: Option<Vec<String>>,
    pub e: f64,
    pub status: Option<Status>,
    /// Evaluations used on this dataset once the episode finished.
    pub evaluations: u64,
    pub best_e: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IterationReport {
    pub iteration: u64,
    pub episodes: usize,
    pub mean_e: f64,
    /// Best evaluation seen so far across all datasets.
    pub best_e: f64,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
    pub evaluations: u64,
    pub buffer_len: usize,
}

pub struct Trainer {
    game: Arc<Game>,
    params: Arc<ModelParams>,
    buffer: ReplayBuffer,
    config: TrainConfig,
    seed: u64,
    batch_rng: ChaCha8Rng,
    episodes_played: u64,
    iteration: u64,
    best_e: f64,
}

impl Trainer {
    pub fn new(game: Arc<Game>, params: ModelParams, config: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        NetworkGuide::new(Arc::new(ModelParams::zeros(*params.shape())), &game)?;
        let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);
        batch_rng.set_stream(u64::MAX);
        Ok(Trainer {
            game,
            params: Arc::new(params),
            buffer: ReplayBuffer::new(config.buffer_capacity),
            config,
            seed,
            batch_rng,
            episodes_played: 0,
            iteration: 0,
            best_e: 0.0,
        })
    }

    /// Fresh network initialized from `seed`.
    pub fn fresh(game: Arc<Game>, size: NetworkSize, config: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        let params = ModelParams::init(size.shape(&game), seed);
        Self::new(game, params, config, seed)
    }

    pub fn from_checkpoint(game: Arc<Game>, ck: &Checkpoint, config: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        ck.check_compatible(game.grammar())?;
        let mut t = Self::new(game, ck.params.clone(), config, seed)?;
        t.iteration = ck.iteration;
        Ok(t)
    }

    pub fn game(&self) -> &Arc<Game> {
        &self.game
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn episodes_played(&self) -> u64 {
        self.episodes_played
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new((*self.params).clone(), &self.game, self.iteration)
    }

    fn episode_rng(&self, episode: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(episode);
        rng
    }

    fn start(&self, d: &Dataset) -> GameState {
        self.game.initial_state(d.meta, d.task)
    }

    /// Plays `n` episodes, round-robin over `datasets`, in chunks of
    /// `workers`. Examples go to the buffer; results are booked into each
    /// dataset's session in episode order.
    pub fn play(&mut self, datasets: &mut [Dataset], n: usize) -> Result<Vec<(usize, Episode, EpisodeLog)>, TrainError> {
        if datasets.is_empty() {
            return Err(TrainError::NoDatasets);
        }
        let mut out = Vec::with_capacity(n);
        let mut remaining = n;
        while remaining > 0 {
            let k = remaining.min(self.config.workers.max(1));
            out.extend(self.play_chunk(datasets, k)?);
            remaining -= k;
        }
        Ok(out)
    }

    fn play_chunk(&mut self, datasets: &mut [Dataset], k: usize) -> Result<Vec<(usize, Episode, EpisodeLog)>, TrainError> {
        let guide = NetworkGuide::new(self.params.clone(), &self.game)?;
        let jobs: Vec<(u64, usize)> = (0..k as u64)
            .map(|i| {
                let ep = self.episodes_played + i;
                (ep, (ep % datasets.len() as u64) as usize)
            })
            .collect();
        let run = |&(ep, di): &(u64, usize)| {
            let d = &datasets[di];
            let mut rec = Recorder { cache: d.session.cache(), calls: Vec::new() };
            let mut rng = self.episode_rng(ep);
            let episode = run_episode(&self.game, &guide, &mut rec, self.start(d), &self.config.search, &mut rng);
            (episode, rec.calls)
        };
        let results: Vec<_> = if k == 1 {
            jobs.iter().map(run).collect()
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = jobs.iter().map(|j| s.spawn(move || run(j))).collect();
                handles.into_iter().map(|h| h.join().expect("episode worker panicked")).collect()
            })
        };

        let mut out = Vec::with_capacity(k);
        for ((ep, di), (episode, calls)) in jobs.into_iter().zip(results) {
            let episode = episode?;
            let d = &mut datasets[di];
            for (p, r, fresh) in &calls {
                d.session.record(p, r, *fresh);
            }
            if let Some(msg) = d.session.cache().fatal_error() {
                return Err(TrainError::Evaluator(msg));
            }
            self.best_e = self.best_e.max(d.best_e());
            self.buffer.extend(episode.examples.iter().cloned());
            let log = EpisodeLog {
                episode: ep,
                dataset: d.name.clone(),
                moves: episode.moves.clone(),
                pipeline: episode.pipeline.clone(),
                e: episode.e,
                status: episode.status.clone(),
                evaluations: d.session.evaluations(),
                best_e: d.best_e(),
            };
            out.push((di, episode, log));
        }
        self.episodes_played += k as u64;
        Ok(out)
    }

    /// `steps` SGD updates on uniform mini-batches from the buffer. Returns
    /// the loss on one probe batch before and after, or `None` when there is
    /// nothing to train on.
    pub fn gradient_steps(&mut self, steps: usize) -> Result<Option<(f64, f64)>, TrainError> {
        if steps == 0 || self.buffer.is_empty() {
            return Ok(None);
        }
        let probe = self.buffer.sample(self.config.batch, &mut self.batch_rng);
        let before = loss(&self.params, &probe, self.config.alpha)?;
        let mut params = (*self.params).clone();
        for _ in 0..steps {
            let batch = self.buffer.sample(self.config.batch, &mut self.batch_rng);
            let (_, grad) = loss_and_gradient(&params, &batch, self.config.alpha)?;
            params = sgd_step(&params, &grad, self.config.lr)?;
        }
        let after = loss(&params, &probe, self.config.alpha)?;
        self.params = Arc::new(params);
        Ok(Some((before, after)))
    }

    /// E episodes then G gradient steps.
    pub fn train_iteration(&mut self, datasets: &mut [Dataset]) -> Result<IterationReport, TrainError> {
        let before: u64 = datasets.iter().map(|d| d.session.evaluations()).sum();
        let played = self.play(datasets, self.config.episodes_per_iteration)?;
        let losses = self.gradient_steps(self.config.gradient_steps)?;
        self.iteration += 1;
        let after: u64 = datasets.iter().map(|d| d.session.evaluations()).sum();
        let mean_e = if played.is_empty() {
            0.0
        } else {
            played.iter().map(|(_, ep, _)| ep.e).sum::<f64>() / played.len() as f64
        };
        Ok(IterationReport {
            iteration: self.iteration,
            episodes: played.len(),
            mean_e,
            best_e: self.best_e,
            loss_before: losses.map(|l| l.0),
            loss_after: losses.map(|l| l.1),
            evaluations: after - before,
            buffer_len: self.buffer.len(),
        })
    }
}

/// Runs `iterations` training iterations interleaved across `datasets`,
/// writing a checkpoint every `every` iterations and at the end when a path
/// is given. `on_iteration` sees each report as it is produced.
pub fn pretrain(
    trainer: &mut Trainer,
    datasets: &mut [Dataset],
    iterations: usize,
    checkpoint: Option<(&Path, usize)>,
    mut on_iteration: impl FnMut(&IterationReport),
) -> Result<Vec<IterationReport>, TrainError> {
    if datasets.len() < 2 {
        return Err(TrainError::TooFewDatasets(datasets.len()));
    }
    let mut reports = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let r = trainer.train_iteration(datasets)?;
        on_iteration(&r);
        reports.push(r);
        if let Some((path, every)) = checkpoint {
            if every > 0 && trainer.iteration() % every as u64 == 0 {
                trainer.checkpoint().save(path)?;
            }
        }
    }
    if let Some((path, _)) = checkpoint {
        trainer.checkpoint().save(path)?;
    }
    Ok(reports)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub episodes: Option<u64>,
    pub evaluations: Option<u64>,
    pub cpu_seconds: Option<f64>,
    /// Stop as soon as the best score reaches this value.
    pub stop_at: Option<f64>,
}

impl Budget {
    pub fn episodes(n: u64) -> Self {
        Budget { episodes: Some(n), ..Budget::default() }
    }

    pub fn evaluations(n: u64) -> Self {
        Budget { evaluations: Some(n), ..Budget::default() }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let limits = [
            self.episodes.map(|n| n > 0),
            self.evaluations.map(|n| n > 0),
            self.cpu_seconds.map(|s| s > 0.0),
        ];
        if limits.iter().all(Option::is_none) || limits.contains(&Some(false)) {
            return Err(TrainError::EmptyBudget);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Synthesis {
    pub pipeline: Vec<String>,
    pub e: f64,
    pub episodes: u64,
    pub evaluations: u64,
    pub evaluations_to_best: u64,
    pub evaluations_to_target: Option<u64>,
    pub curve: Vec<(u64, f64)>,
    pub stats: SearchStats,
    pub cpu_seconds: f64,
    pub iterations: Vec<IterationReport>,
    pub log: Vec<EpisodeLog>,
}

/// Searches `dataset` until the budget runs out. When `train` is set the
/// network is updated after every `episodes_per_iteration` episodes.
pub fn synthesize(trainer: &mut Trainer, dataset: &mut Dataset, budget: Budget, train: bool) -> Result<Synthesis, TrainError> {
    budget.validate()?;
    let clock = CpuClock::start();
    let mut log = Vec::new();
    let mut stats = SearchStats::default();
    let mut iterations = Vec::new();
    let mut since_update = 0;
    let mut episodes = 0u64;
    let mut iter_e = Vec::new();
    let mut iter_evals = dataset.session.evaluations();
    loop {
        let done = budget.episodes.is_some_and(|n| episodes >= n)
            || budget.evaluations.is_some_and(|n| dataset.session.evaluations() >= n)
            || budget.cpu_seconds.is_some_and(|s| clock.elapsed() >= s)
            || budget.stop_at.is_some_and(|t| dataset.best_e() >= t);
        if done {
            break;
        }
        let chunk = match budget.episodes {
            Some(n) => (n - episodes).min(trainer.config.workers.max(1) as u64),
            None => trainer.config.workers.max(1) as u64,
        } as usize;
        for (_, ep, entry) in trainer.play(std::slice::from_mut(dataset), chunk)? {
            stats.merge(&ep.stats);
            iter_e.push(ep.e);
            log.push(entry);
        }
        episodes += chunk as u64;
        since_update += chunk;
        if train && since_update >= trainer.config.episodes_per_iteration {
            since_update = 0;
            let losses = trainer.gradient_steps(trainer.config.gradient_steps)?;
            trainer.iteration += 1;
            iterations.push(IterationReport {
                iteration: trainer.iteration,
                episodes: iter_e.len(),
                mean_e: iter_e.iter().sum::<f64>() / iter_e.len() as f64,
                best_e: dataset.best_e(),
                loss_before: losses.map(|l| l.0),
                loss_after: losses.map(|l| l.1),
                evaluations: dataset.session.evaluations() - iter_evals,
                buffer_len: trainer.buffer.len(),
            });
            iter_e.clear();
            iter_evals = dataset.session.evaluations();
        }
    }
    let (pipeline, e) = dataset
        .session
        .best()
        .map(|(p, e)| (p.to_vec(), e))
        .unwrap_or_default();
    Ok(Synthesis {
        pipeline,
        e,
        episodes,
        evaluations: dataset.session.evaluations(),
        evaluations_to_best: dataset.session.evaluations_to_best(),
        evaluations_to_target: dataset.session.evaluations_to_target(),
        curve: dataset.session.curve().to_vec(),
        stats,
        cpu_seconds: clock.elapsed(),
        iterations,
        log,
    })
}

/// Replays a logged episode through the game and returns the pipeline it
/// realizes.
pub fn replay_log(game: &Game, start: GameState, entry: &EpisodeLog) -> Result<Option<Vec<String>>, SearchError> {
    let mut s = start;
    for m in &entry.moves {
        s = game.step(&s, &m.action)?;
    }
    Ok(game.realized_pipeline(&s).filter(|p| !p.is_empty()))
}

/// Process CPU time where the platform exposes it.
pub struct CpuClock {
    start: f64,
}

impl CpuClock {
    pub fn start() -> Self {
        CpuClock { start: process_cpu_seconds() }
    }

    pub fn elapsed(&self) -> f64 {
        (process_cpu_seconds() - self.start).max(0.0)
    }
}

#[cfg(unix)]
pub fn process_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

#[cfg(not(unix))]
pub fn process_cpu_seconds() -> f64 {
    0.0
}
