//! The `pipesynth` command line: argument parsing, dataset resolution,
//! report writing and exit-code mapping. `main.rs` only forwards here so the
//! integration tests can drive the same code in-process.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use pipesynth::checkpoint::{Checkpoint, CheckpointError};
use pipesynth::evaluator::{DatasetEntry, ExecutorClient, ExecutorError};
use pipesynth::experiments::{
    ablate, compare_grammar, grammar_stats, pretrain_family, synth, warmstart_eval, DatasetSpec, ExperimentError,
    ExperimentReport, Settings, REPORT_VERSION,
};
use pipesynth::game::ActionMode;
use pipesynth::grammar::{parse_grammar, Grammar};
use pipesynth::task::{TaskKind, TaskSpec};
use pipesynth::trainer::{Budget, TrainError};

/// Environment variable holding the default executor command line.
pub const EXECUTOR_ENV: &str = "PIPESYNTH_EXECUTOR";

/// Report keys that carry measured time; everything else is a function of
/// the inputs and the seed.
pub const TIMING_KEYS: [&str; 3] = ["generated_at", "cpu_seconds", "wall_seconds"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("executor failure: {0}")]
    Executor(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Executor(_) => 3,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(TrainError::Evaluator(m)) => CliError::Executor(m),
            ExperimentError::Train(
                t @ (TrainError::EmptyBudget | TrainError::NoDatasets | TrainError::TooFewDatasets(_)),
            ) => CliError::Config(t.to_string()),
            ExperimentError::Train(TrainError::Checkpoint(c)) | ExperimentError::Checkpoint(c) => checkpoint_error(c),
            ExperimentError::Train(t) => CliError::Internal(t.to_string()),
            e @ (ExperimentError::NeedsOracle(_) | ExperimentError::Overflow(_) | ExperimentError::Config(_)) => {
                CliError::Config(e.to_string())
            }
        }
    }
}

impl From<ExecutorError> for CliError {
    fn from(e: ExecutorError) -> Self {
        CliError::Executor(e.to_string())
    }
}

fn checkpoint_error(e: CheckpointError) -> CliError {
    CliError::Config(format!("checkpoint: {e}"))
}

#[derive(Parser, Debug)]
#[command(name = "pipesynth", version, about = "Grammar-guided MCTS synthesis of ML pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Search for the best pipeline on one dataset.
    Synth(SynthArgs),
    /// Run grammar and edit action modes side by side on several datasets.
    CompareGrammar(CompareArgs),
    /// Trained network against uniform priors: evaluations to a target score.
    Ablate(AblateArgs),
    /// Train one network across a family of datasets and save a checkpoint.
    Pretrain(PretrainArgs),
    /// Checkpoint against a fresh network on a held-out dataset.
    WarmstartEval(WarmstartArgs),
    /// Language size and derivation statistics of a grammar.
    GrammarStats(GrammarStatsArgs),
    /// Loopback executor for protocol tests.
    #[command(hide = true)]
    EchoExecutor {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvaluatorKind {
    Surrogate,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Grammar,
    Edit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Classification,
    Regression,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Grammar file.
    #[arg(long)]
    pub grammar: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Report path (JSON). A JSON-lines run log is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run log path; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Parallel workers. Results are bit-reproducible only with 1.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 8)]
    pub max_terminals: usize,
    #[arg(long)]
    pub simulations: Option<usize>,
    /// PUCT exploration constant.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub episodes_per_iteration: Option<usize>,
    #[arg(long)]
    pub gradient_steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Task of surrogate datasets.
    #[arg(long, value_enum, default_value_t = TaskArg::Classification)]
    pub task: TaskArg,
}

#[derive(Args, Debug, Clone)]
pub struct Sources {
    #[arg(long, value_enum, default_value_t = EvaluatorKind::Surrogate)]
    pub evaluator: EvaluatorKind,
    /// Executor command line, split on whitespace.
    #[arg(long, env = EXECUTOR_ENV)]
    pub executor_cmd: Option<String>,
    #[arg(long, default_value_t = 300)]
    pub executor_timeout_secs: u64,
    /// Dataset manifest (JSON array of {name, path, task, target_column}).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sources: Sources,
    /// `surrogate:SEED` or the name of a manifest entry.
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub budget_episodes: u64,
    #[arg(long)]
    pub budget_evaluations: Option<u64>,
    /// Process CPU time budget.
    #[arg(long)]
    pub budget_cpu_seconds: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Grammar)]
    pub mode: ModeArg,
    /// Search with the network as given; no self-play updates.
    #[arg(long)]
    pub no_train: bool,
}

#[derive(Args, Debug, Clone)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sources: Sources,
    /// Dataset; repeatable. Defaults to surrogate seeds 1-10.
    #[arg(long)]
    pub dataset: Vec<String>,
    /// Surrogate seeds, e.g. `1-10` or `1,3,5`.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub budget_episodes: u64,
    /// Paired records as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub no_train: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TargetArgs {
    /// Evaluation budget per run; runs that miss the target are charged this.
    #[arg(long, default_value_t = 576)]
    pub budget_evaluations: u64,
    /// Episode cap per run, so a search that stops finding new pipelines ends.
    #[arg(long, default_value_t = 400)]
    pub max_episodes: u64,
    #[arg(long, default_value_t = 20)]
    pub repetitions: u32,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Surrogate seeds.
    #[arg(long, default_value = "1-5")]
    pub seeds: String,
    /// Target as a fraction of the oracle optimum.
    #[arg(long, default_value_t = 0.99)]
    pub target_fraction: f64,
    #[command(flatten)]
    pub target: TargetArgs,
}

#[derive(Args, Debug, Clone)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sources: Sources,
    /// Dataset; repeatable. Defaults to surrogate seeds 1-8.
    #[arg(long)]
    pub dataset: Vec<String>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub iterations: usize,
    /// Where to write the checkpoint.
    #[arg(long)]
    pub checkpoint_out: PathBuf,
    /// Also save every N iterations (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Args, Debug, Clone)]
pub struct WarmstartArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Held-out surrogate dataset.
    #[arg(long, default_value = "surrogate:9")]
    pub dataset: String,
    #[arg(long, default_value_t = 0.95)]
    pub target_fraction: f64,
    #[command(flatten)]
    pub target: TargetArgs,
    #[arg(long)]
    pub no_train: bool,
}

#[derive(Args, Debug, Clone)]
pub struct GrammarStatsArgs {
    #[arg(long)]
    pub grammar: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub max_terminals: usize,
    /// Enumeration guard: fail instead of listing more pipelines than this.
    #[arg(long, default_value_t = 10_000_000)]
    pub limit: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs one parsed command, writing human-readable output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, stdout),
        Command::CompareGrammar(a) => cmd_compare(&a, stdout),
        Command::Ablate(a) => cmd_ablate(&a, stdout),
        Command::Pretrain(a) => cmd_pretrain(&a, stdout),
        Command::WarmstartEval(a) => cmd_warmstart(&a, stdout),
        Command::GrammarStats(a) => cmd_grammar_stats(&a, stdout),
        Command::EchoExecutor { args } => {
            let config = pipesynth::evaluator::echo::parse_args(&args).map_err(CliError::Config)?;
            let stdin = std::io::stdin();
            pipesynth::evaluator::echo::serve(config, stdin.lock(), std::io::stdout().lock())
                .map_err(|e| CliError::Internal(e.to_string()))
        }
    }
}

pub fn load_grammar(path: &Path) -> Result<Arc<Grammar>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read grammar file {}: {e}", path.display())))?;
    let g = parse_grammar(&text).map_err(|e| CliError::Config(format!("grammar {}: {e}", path.display())))?;
    Ok(Arc::new(g))
}

/// Parses `1-10`, `3`, or `1,4-6,9` into seeds.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("invalid seed list `{spec}`"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn settings(c: &Common) -> Result<Settings, CliError> {
    if c.max_terminals == 0 {
        return Err(CliError::Config("--max-terminals must be at least 1".into()));
    }
    if c.workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    let mut s = Settings::default();
    s.game.max_terminals = c.max_terminals;
    s.train.workers = c.workers;
    if let Some(n) = c.simulations {
        if n == 0 {
            return Err(CliError::Config("--simulations must be at least 1".into()));
        }
        s.train.search.simulations = n;
    }
    if let Some(x) = c.c {
        if !(x > 0.0 && x.is_finite()) {
            return Err(CliError::Config("--c must be positive".into()));
        }
        s.train.search.c = x;
    }
    if let Some(n) = c.episodes_per_iteration {
        s.train.episodes_per_iteration = n.max(1);
    }
    if let Some(n) = c.gradient_steps {
        s.train.gradient_steps = n;
    }
    if let Some(x) = c.learning_rate {
        s.train.lr = x;
    }
    if let Some(n) = c.embed {
        s.network.embed = n;
    }
    if let Some(n) = c.hidden {
        s.network.hidden = n;
    }
    Ok(s)
}

fn task(c: &Common) -> TaskSpec {
    match c.task {
        TaskArg::Classification => TaskSpec::new(TaskKind::Classification),
        TaskArg::Regression => TaskSpec::new(TaskKind::Regression),
    }
}

/// Resolves dataset names against the chosen evaluator. The executor is
/// started once and shared by every manifest dataset.
struct Resolver<'a> {
    grammar: &'a Arc<Grammar>,
    task: TaskSpec,
    sources: Option<&'a Sources>,
    seed: u64,
    client: Option<Arc<ExecutorClient>>,
    manifest: Option<Vec<DatasetEntry>>,
}

impl<'a> Resolver<'a> {
    fn new(grammar: &'a Arc<Grammar>, task: TaskSpec, sources: Option<&'a Sources>, seed: u64) -> Self {
        Resolver { grammar, task, sources, seed, client: None, manifest: None }
    }

    fn resolve(&mut self, name: &str) -> Result<DatasetSpec, CliError> {
        let external = self.sources.is_some_and(|s| s.evaluator == EvaluatorKind::External);
        if let Some(seed) = name.strip_prefix("surrogate:") {
            if external {
                return Err(CliError::Config(format!("{name} needs --evaluator surrogate")));
            }
            let seed: u64 = seed
                .parse()
                .map_err(|_| CliError::Config(format!("invalid surrogate seed in `{name}`")))?;
            return Ok(DatasetSpec::surrogate(seed, self.grammar, self.task));
        }
        if !external {
            return Err(CliError::Config(format!(
                "dataset `{name}` is not `surrogate:SEED`; manifest datasets need --evaluator external"
            )));
        }
        let entry = self
            .manifest()?
            .iter()
            .find(|e| e.name == name)
            .cloned()
            .ok_or_else(|| CliError::Config(format!("dataset `{name}` is not in the manifest")))?;
        let client = self.client()?;
        DatasetSpec::external(entry, client).map_err(|e| CliError::Config(format!("dataset `{name}`: {e}")))
    }

    fn manifest(&mut self) -> Result<&[DatasetEntry], CliError> {
        if self.manifest.is_none() {
            let path = self
                .sources
                .and_then(|s| s.manifest.as_ref())
                .ok_or_else(|| CliError::Config("manifest datasets need --manifest".into()))?;
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
            let mut entries: Vec<DatasetEntry> = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("manifest {}: {e}", path.display())))?;
            // Dataset paths are relative to the manifest.
            let base = path.parent().unwrap_or(Path::new("."));
            for e in &mut entries {
                if Path::new(&e.path).is_relative() {
                    e.path = base.join(&e.path).display().to_string();
                }
            }
            self.manifest = Some(entries);
        }
        Ok(self.manifest.as_deref().unwrap_or_default())
    }

    fn client(&mut self) -> Result<Arc<ExecutorClient>, CliError> {
        if let Some(c) = &self.client {
            return Ok(c.clone());
        }
        let sources = self.sources.ok_or_else(|| CliError::Config("no executor configured".into()))?;
        let cmd = sources
            .executor_cmd
            .as_deref()
            .filter(|c| !c.trim().is_empty())
            .ok_or_else(|| CliError::Config(format!("--evaluator external needs --executor-cmd or {EXECUTOR_ENV}")))?;
        let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
        let client = ExecutorClient::connect(
            argv,
            self.grammar.terminals(),
            Duration::from_secs(sources.executor_timeout_secs.max(1)),
            self.seed,
        )?;
        let client = Arc::new(client);
        self.client = Some(client.clone());
        Ok(client)
    }
}

fn resolve_many(
    r: &mut Resolver,
    datasets: &[String],
    seeds: Option<&str>,
    default_seeds: &str,
) -> Result<Vec<DatasetSpec>, CliError> {
    let mut names: Vec<String> = datasets.to_vec();
    if let Some(s) = seeds {
        names.extend(parse_seeds(s)?.into_iter().map(|k| format!("surrogate:{k}")));
    }
    if names.is_empty() {
        names.extend(parse_seeds(default_seeds)?.into_iter().map(|k| format!("surrogate:{k}")));
    }
    names.iter().map(|n| r.resolve(n)).collect()
}

fn load_checkpoint(path: &Path, grammar: &Grammar) -> Result<Checkpoint, CliError> {
    let ck = Checkpoint::load(path).map_err(checkpoint_error)?;
    ck.check_compatible(grammar)
        .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))?;
    Ok(ck)
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Serializes `report` with a `generated_at` stamp and writes it to `out`.
pub fn write_report(out: &Path, report: &impl Serialize) -> Result<(), CliError> {
    let mut v = serde_json::to_value(report).map_err(|e| CliError::Internal(e.to_string()))?;
    if let Value::Object(m) = &mut v {
        m.insert("generated_at".into(), json!(now()));
    }
    let mut text = serde_json::to_string_pretty(&v).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    fs::write(out, text).map_err(|e| CliError::Config(format!("cannot write report {}: {e}", out.display())))
}

/// Removes every timing key, at any depth.
pub fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(m) => {
            for k in TIMING_KEYS {
                m.remove(k);
            }
            m.values_mut().for_each(strip_timing);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

/// Append-only JSON-lines run log.
struct RunLog {
    file: Option<fs::File>,
    path: Option<PathBuf>,
}

impl RunLog {
    fn open(c: &Common) -> Result<Self, CliError> {
        let path = c.log.clone().or_else(|| {
            c.out.as_ref().map(|o| {
                let mut s = o.clone().into_os_string();
                s.push(".log.jsonl");
                PathBuf::from(s)
            })
        });
        let file = match &path {
            Some(p) => Some(
                fs::File::create(p)
                    .map_err(|e| CliError::Config(format!("cannot create run log {}: {e}", p.display())))?,
            ),
            None => None,
        };
        Ok(RunLog { file, path })
    }

    fn line(&mut self, event: &str, body: impl Serialize) -> Result<(), CliError> {
        let Some(f) = &mut self.file else { return Ok(()) };
        let mut v = json!({ "event": event, "generated_at": now() });
        if let (Value::Object(m), Ok(Value::Object(b))) = (&mut v, serde_json::to_value(body)) {
            m.extend(b);
        }
        let p = self.path.as_deref().unwrap_or(Path::new("?")).display().to_string();
        writeln!(f, "{v}").map_err(|e| CliError::Internal(format!("run log {p}: {e}")))
    }
}

fn start_line(log: &mut RunLog, command: &str, grammar: &Grammar, seed: u64, settings: &Settings) -> Result<(), CliError> {
    log.line(
        "start",
        json!({
            "command": command,
            "version": REPORT_VERSION,
            "grammar_fingerprint": grammar.fingerprint(),
            "seed": seed,
            "settings": settings,
        }),
    )
}

fn finish(
    common: &Common,
    log: &mut RunLog,
    report: &ExperimentReport,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    for r in &report.records {
        log.line("run", r)?;
    }
    for m in &report.medians {
        log.line("median", m)?;
    }
    if let Some(out) = &common.out {
        write_report(out, report)?;
        say(stdout, format_args!("report written to {}", out.display()))?;
    }
    Ok(())
}

fn say(stdout: &mut dyn Write, args: std::fmt::Arguments) -> Result<(), CliError> {
    writeln!(stdout, "{args}").map_err(|e| CliError::Internal(e.to_string()))
}

fn cmd_synth(a: &SynthArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let grammar = load_grammar(&a.common.grammar)?;
    let mut s = settings(&a.common)?;
    s.game.mode = match a.mode {
        ModeArg::Grammar => ActionMode::Grammar,
        ModeArg::Edit => ActionMode::Edit,
    };
    let budget = Budget {
        episodes: Some(a.budget_episodes),
        evaluations: a.budget_evaluations,
        cpu_seconds: a.budget_cpu_seconds,
        stop_at: None,
    };
    if a.budget_episodes == 0 || a.budget_evaluations == Some(0) || a.budget_cpu_seconds.is_some_and(|c| c <= 0.0) {
        return Err(CliError::Config("budgets must be positive".into()));
    }
    let checkpoint = a.checkpoint.as_deref().map(|p| load_checkpoint(p, &grammar)).transpose()?;
    let mut resolver = Resolver::new(&grammar, task(&a.common), Some(&a.sources), a.common.seed);
    let dataset = resolver.resolve(&a.dataset)?;
    let mut log = RunLog::open(&a.common)?;
    start_line(&mut log, "synth", &grammar, a.common.seed, &s)?;
    let out = synth(&grammar, &dataset, &s, checkpoint.as_ref(), budget, !a.no_train, a.common.seed)?;
    for ep in &out.synthesis.log {
        log.line(
            "episode",
            json!({
                "episode": ep.episode,
                "dataset": ep.dataset,
                "actions": ep.moves.iter().map(|m| m.label.as_str()).collect::<Vec<_>>(),
                "pipeline": ep.pipeline,
                "e": ep.e,
                "status": ep.status,
                "evaluations": ep.evaluations,
                "best_e": ep.best_e,
            }),
        )?;
    }
    log.line("curve", json!({ "best_so_far": out.synthesis.curve }))?;
    if let Some(msg) = resolver.client.as_ref().and_then(|c| c.fatal_error()) {
        return Err(CliError::Executor(msg));
    }
    say(stdout, format_args!("{} {}", out.synthesis.pipeline.join(" "), out.synthesis.e))?;
    finish(&a.common, &mut log, &out.report, stdout)
}

fn cmd_compare(a: &CompareArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let grammar = load_grammar(&a.common.grammar)?;
    let s = settings(&a.common)?;
    if a.budget_episodes == 0 {
        return Err(CliError::Config("--budget-episodes must be at least 1".into()));
    }
    let mut resolver = Resolver::new(&grammar, task(&a.common), Some(&a.sources), a.common.seed);
    let datasets = resolve_many(&mut resolver, &a.dataset, a.seeds.as_deref(), "1-10")?;
    let mut log = RunLog::open(&a.common)?;
    start_line(&mut log, "compare-grammar", &grammar, a.common.seed, &s)?;
    let report = compare_grammar(&grammar, &datasets, &s, Budget::episodes(a.budget_episodes), !a.no_train, a.common.seed)?;
    say(stdout, format_args!("dataset grammar_best_e edit_best_e grammar_actions edit_actions"))?;
    for p in &report.pairs {
        say(
            stdout,
            format_args!(
                "{} {:.6} {:.6} {} {}",
                p.dataset, p.grammar_best_e, p.edit_best_e, p.grammar_total_actions, p.edit_total_actions
            ),
        )?;
    }
    if let Some(path) = &a.csv {
        let err = |e: csv::Error| CliError::Config(format!("cannot write {}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        for p in &report.pairs {
            w.serialize(p).map_err(err)?;
        }
        w.flush().map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    }
    finish(&a.common, &mut log, &report, stdout)
}

fn to_target_budget(t: &TargetArgs) -> Result<Budget, CliError> {
    if t.budget_evaluations == 0 || t.max_episodes == 0 {
        return Err(CliError::Config("budgets must be positive".into()));
    }
    Ok(Budget { episodes: Some(t.max_episodes), ..Budget::evaluations(t.budget_evaluations) })
}

fn print_medians(report: &ExperimentReport, stdout: &mut dyn Write) -> Result<(), CliError> {
    say(stdout, format_args!("dataset mode median_{}", "evaluations_to_target"))?;
    for m in &report.medians {
        say(stdout, format_args!("{} {} {}", m.scope, m.mode, m.value))?;
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let grammar = load_grammar(&a.common.grammar)?;
    let s = settings(&a.common)?;
    let budget = to_target_budget(&a.target)?;
    let mut resolver = Resolver::new(&grammar, task(&a.common), None, a.common.seed);
    let datasets = resolve_many(&mut resolver, &[], Some(&a.seeds), "1-5")?;
    let mut log = RunLog::open(&a.common)?;
    start_line(&mut log, "ablate", &grammar, a.common.seed, &s)?;
    let report = ablate(&grammar, &datasets, &s, a.target_fraction, budget, a.target.repetitions, a.common.seed)?;
    print_medians(&report, stdout)?;
    finish(&a.common, &mut log, &report, stdout)
}

#[derive(Serialize)]
struct PretrainReport<'a> {
    version: u32,
    command: &'static str,
    seed: u64,
    config: Value,
    iterations: &'a [pipesynth::trainer::IterationReport],
}

fn cmd_pretrain(a: &PretrainArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let grammar = load_grammar(&a.common.grammar)?;
    let s = settings(&a.common)?;
    if a.iterations == 0 {
        return Err(CliError::Config("--iterations must be at least 1".into()));
    }
    let mut resolver = Resolver::new(&grammar, task(&a.common), Some(&a.sources), a.common.seed);
    let datasets = resolve_many(&mut resolver, &a.dataset, a.seeds.as_deref(), "1-8")?;
    let mut log = RunLog::open(&a.common)?;
    start_line(&mut log, "pretrain", &grammar, a.common.seed, &s)?;
    let every = (a.checkpoint_every > 0).then_some((a.checkpoint_out.as_path(), a.checkpoint_every));
    let mut lines = Vec::new();
    let (ck, reports) =
        pretrain_family(&grammar, &datasets, &s, a.iterations, a.common.seed, every, |r| lines.push(r.clone()))?;
    for r in &lines {
        log.line("iteration", r)?;
    }
    ck.save(&a.checkpoint_out).map_err(checkpoint_error)?;
    if let Some(msg) = resolver.client.as_ref().and_then(|c| c.fatal_error()) {
        return Err(CliError::Executor(msg));
    }
    if let Some(last) = reports.last() {
        say(stdout, format_args!("iteration {} best_e {} mean_e {}", last.iteration, last.best_e, last.mean_e))?;
    }
    say(stdout, format_args!("checkpoint written to {}", a.checkpoint_out.display()))?;
    if let Some(out) = &a.common.out {
        let report = PretrainReport {
            version: REPORT_VERSION,
            command: "pretrain",
            seed: a.common.seed,
            config: json!({
                "settings": s,
                "grammar_fingerprint": grammar.fingerprint(),
                "datasets": datasets.iter().map(|d| d.name.clone()).collect::<Vec<_>>(),
                "iterations": a.iterations,
            }),
            iterations: &reports,
        };
        write_report(out, &report)?;
    }
    Ok(())
}

fn cmd_warmstart(a: &WarmstartArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let grammar = load_grammar(&a.common.grammar)?;
    let s = settings(&a.common)?;
    let budget = to_target_budget(&a.target)?;
    let ck = load_checkpoint(&a.checkpoint, &grammar)?;
    let mut resolver = Resolver::new(&grammar, task(&a.common), None, a.common.seed);
    let dataset = resolver.resolve(&a.dataset)?;
    let mut log = RunLog::open(&a.common)?;
    start_line(&mut log, "warmstart-eval", &grammar, a.common.seed, &s)?;
    let report = warmstart_eval(
        &grammar,
        &dataset,
        &s,
        &ck,
        a.target_fraction,
        budget,
        a.target.repetitions,
        !a.no_train,
        a.common.seed,
    )?;
    print_medians(&report, stdout)?;
    finish(&a.common, &mut log, &report, stdout)
}

fn cmd_grammar_stats(a: &GrammarStatsArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let grammar = load_grammar(&a.grammar)?;
    let stats = grammar_stats(&grammar, a.max_terminals, a.limit)?;
    say(stdout, format_args!("language size: {}", stats.language_size))?;
    say(
        stdout,
        format_args!(
            "derivation length: max {} mean {:.4} (observed {:?})",
            stats.max_derivation_length, stats.mean_derivation_length, stats.derivation_lengths
        ),
    )?;
    for n in &stats.nonterminals {
        say(stdout, format_args!("{}: {} alternatives", n.name, n.alternatives))?;
    }
    if let Some(out) = &a.out {
        write_report(out, &stats)?;
    }
    Ok(())
}
