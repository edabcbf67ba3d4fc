//! The single-player pipeline synthesis game.
//!
//! A state is a partial pipeline together with the dataset meta-features and
//! the task. Two action spaces are available:
//!
//! * [`ActionMode::Grammar`]: an action applies one production to the
//!   leftmost nonterminal of the derivation.
//! * [`ActionMode::Edit`]: an action inserts, deletes or substitutes one
//!   primitive, or finishes the episode.
//!
//! Both modes cap pipelines at `max_terminals` primitives and episodes at
//! `max_steps` moves so the game tree is finite.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{Derivation, Grammar, RuleId, Symbol};
use crate::metafeatures::{MetaFeatures, META_DIM};
use crate::task::{TaskKind, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Grammar,
    Edit,
}

impl ActionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionMode::Grammar => "grammar",
            ActionMode::Edit => "edit",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameConfig {
    pub mode: ActionMode,
    pub max_terminals: usize,
    pub max_steps: usize,
    pub encode_len: usize,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig { mode: ActionMode::Grammar, max_terminals: 8, max_steps: 20, encode_len: 16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    Rule { rule: RuleId },
    Insert { pos: usize, terminal: usize },
    Delete { pos: usize },
    Substitute { pos: usize, terminal: usize },
    Finish,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Board {
    Grammar(Derivation),
    Edit { pipeline: Vec<usize>, finished: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GameState {
    pub board: Board,
    pub meta: MetaFeatures,
    pub task: TaskSpec,
    pub steps_taken: usize,
}

/// Token ids fed to the sequence model plus the meta-feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedState {
    pub tokens: Vec<u32>,
    pub meta: [f64; META_DIM],
}

impl EncodedState {
    /// Number of tokens before the first padding token.
    pub fn len(&self) -> usize {
        self.tokens.iter().position(|&t| t == PAD).unwrap_or(self.tokens.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal action {action} in state {state}")]
pub struct IllegalAction {
    pub action: String,
    pub state: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("symbol `{0}` is not in the vocabulary")]
pub struct UnknownSymbol(pub String);

pub const PAD: u32 = 0;
pub const SOP: u32 = 1;

/// Token table: pad, start-of-pipeline, terminals, nonterminals, task tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn for_grammar(g: &Grammar) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<sop>".to_string()];
        tokens.extend(g.terminals().iter().cloned());
        tokens.extend(g.nonterminals().iter().map(|n| format!("<{n}>")));
        tokens.push(task_token(TaskKind::Classification).to_string());
        tokens.push(task_token(TaskKind::Regression).to_string());
        Vocabulary { tokens }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Vocabulary { tokens }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.tokens.iter().position(|t| t == name).map(|i| i as u32)
    }
}

fn task_token(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Classification => "[classification]",
        TaskKind::Regression => "[regression]",
    }
}

pub struct Game {
    grammar: Arc<Grammar>,
    config: GameConfig,
    vocab: Vocabulary,
    terminal_tokens: Vec<Option<u32>>,
    nonterminal_tokens: Vec<Option<u32>>,
    task_tokens: HashMap<TaskKind, Option<u32>>,
}

impl Game {
    pub fn new(grammar: Arc<Grammar>, config: GameConfig) -> Self {
        let vocab = Vocabulary::for_grammar(&grammar);
        Self::with_vocabulary(grammar, config, vocab)
    }

    /// Uses an externally supplied token table, e.g. one read from a checkpoint.
    pub fn with_vocabulary(grammar: Arc<Grammar>, config: GameConfig, vocab: Vocabulary) -> Self {
        let terminal_tokens = grammar.terminals().iter().map(|t| vocab.id(t)).collect();
        let nonterminal_tokens = grammar
            .nonterminals()
            .iter()
            .map(|n| vocab.id(&format!("<{n}>")))
            .collect();
        let task_tokens = [TaskKind::Classification, TaskKind::Regression]
            .into_iter()
            .map(|k| (k, vocab.id(task_token(k))))
            .collect();
        Game { grammar, config, vocab, terminal_tokens, nonterminal_tokens, task_tokens }
    }

    pub fn grammar(&self) -> &Arc<Grammar> {
        &self.grammar
    }

    pub fn config(&self) -> &GameConfig {
        &self.config
    }

    pub fn mode(&self) -> ActionMode {
        self.config.mode
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn initial_state(&self, meta: MetaFeatures, task: TaskSpec) -> GameState {
        let board = match self.config.mode {
            ActionMode::Grammar => Board::Grammar(Derivation::start(&self.grammar)),
            ActionMode::Edit => Board::Edit { pipeline: Vec::new(), finished: false },
        };
        GameState { board, meta, task, steps_taken: 0 }
    }

    /// Size of the fixed action vocabulary the policy head ranges over.
    ///
    /// Edit mode buckets actions by (kind, position, terminal):
    /// `M*V` inserts, `M` deletes, `M*V` substitutions and one finish, with
    /// `M = max_terminals` and `V` the number of terminals.
    pub fn action_space_size(&self) -> usize {
        match self.config.mode {
            ActionMode::Grammar => self.grammar.rules().len(),
            ActionMode::Edit => {
                let (m, v) = (self.config.max_terminals, self.grammar.terminals().len());
                2 * m * v + m + 1
            }
        }
    }

    pub fn action_index(&self, action: &Action) -> usize {
        let (m, v) = (self.config.max_terminals, self.grammar.terminals().len());
        match *action {
            Action::Rule { rule } => rule,
            Action::Insert { pos, terminal } => pos * v + terminal,
            Action::Delete { pos } => m * v + pos,
            Action::Substitute { pos, terminal } => m * v + m + pos * v + terminal,
            Action::Finish => 2 * m * v + m,
        }
    }

    pub fn action_label(&self, action: &Action) -> String {
        let t = |i: usize| self.grammar.terminals()[i].as_str();
        match *action {
            Action::Rule { rule } => self.grammar.rule_label(rule),
            Action::Insert { pos, terminal } => format!("insert({pos}, {})", t(terminal)),
            Action::Delete { pos } => format!("delete({pos})"),
            Action::Substitute { pos, terminal } => format!("substitute({pos}, {})", t(terminal)),
            Action::Finish => "finish".into(),
        }
    }

    pub fn state_label(&self, state: &GameState) -> String {
        let names: Vec<String> = match &state.board {
            Board::Grammar(d) => d.symbols.iter().map(|&s| self.grammar.symbol_name(s)).collect(),
            Board::Edit { pipeline, .. } => {
                pipeline.iter().map(|&t| self.grammar.terminals()[t].clone()).collect()
            }
        };
        format!("[{}]", names.join(", "))
    }

    /// Legal actions in ascending action-index order; empty on terminal states.
    pub fn legal_actions(&self, state: &GameState) -> Vec<Action> {
        if self.is_terminal(state) {
            return Vec::new();
        }
        match &state.board {
            Board::Grammar(d) => {
                let cap = self.config.max_terminals;
                let Some((pos, _)) = d.leftmost_nonterminal() else {
                    return Vec::new();
                };
                // Rules whose result can still complete within the cap.
                let rest = self.grammar.min_terminals(&d.symbols) - self.grammar.min_yield(d.symbols[pos]);
                self.grammar
                    .applicable_rules(d)
                    .iter()
                    .filter(|&&r| rest + self.grammar.min_terminals(&self.grammar.rule(r).rhs) <= cap)
                    .map(|&rule| Action::Rule { rule })
                    .collect()
            }
            Board::Edit { pipeline, .. } => {
                let len = pipeline.len();
                let v = self.grammar.terminals().len();
                let mut out = Vec::new();
                if len < self.config.max_terminals {
                    for pos in 0..=len {
                        out.extend((0..v).map(|terminal| Action::Insert { pos, terminal }));
                    }
                }
                out.extend((0..len).map(|pos| Action::Delete { pos }));
                for pos in 0..len {
                    out.extend((0..v).map(|terminal| Action::Substitute { pos, terminal }));
                }
                if len > 0 {
                    out.push(Action::Finish);
                }
                out
            }
        }
    }

    pub fn is_legal(&self, state: &GameState, action: &Action) -> bool {
        if self.is_terminal(state) {
            return false;
        }
        match (&state.board, *action) {
            (Board::Grammar(_), Action::Rule { .. }) => self.legal_actions(state).contains(action),
            (Board::Edit { pipeline, .. }, a) => {
                let len = pipeline.len();
                let v = self.grammar.terminals().len();
                match a {
                    Action::Insert { pos, terminal } => {
                        len < self.config.max_terminals && pos <= len && terminal < v
                    }
                    Action::Delete { pos } => pos < len,
                    Action::Substitute { pos, terminal } => pos < len && terminal < v,
                    Action::Finish => len > 0,
                    Action::Rule { .. } => false,
                }
            }
            _ => false,
        }
    }

    pub fn step(&self, state: &GameState, action: &Action) -> Result<GameState, IllegalAction> {
        if !self.is_legal(state, action) {
            return Err(IllegalAction {
                action: format!("{action:?}"),
                state: self.state_label(state),
            });
        }
        let board = match (&state.board, *action) {
            (Board::Grammar(d), Action::Rule { rule }) => {
                Board::Grammar(self.grammar.apply_rule(d, rule).expect("checked legal"))
            }
            (Board::Edit { pipeline, .. }, a) => {
                let mut pipeline = pipeline.clone();
                let mut finished = false;
                match a {
                    Action::Insert { pos, terminal } => pipeline.insert(pos, terminal),
                    Action::Delete { pos } => {
                        pipeline.remove(pos);
                    }
                    Action::Substitute { pos, terminal } => pipeline[pos] = terminal,
                    Action::Finish => finished = true,
                    Action::Rule { .. } => unreachable!("checked legal"),
                }
                Board::Edit { pipeline, finished }
            }
            _ => unreachable!("checked legal"),
        };
        Ok(GameState {
            board,
            meta: state.meta,
            task: state.task,
            steps_taken: state.steps_taken + 1,
        })
    }

    pub fn is_terminal(&self, state: &GameState) -> bool {
        is_terminal(state, self.config.max_steps)
    }

    /// The realized pipeline of a terminal state. `None` when the step cap
    /// cut a grammar derivation short.
    pub fn realized_pipeline(&self, state: &GameState) -> Option<Vec<String>> {
        let indices = match &state.board {
            Board::Grammar(d) if d.is_complete() => d.terminal_indices(),
            Board::Grammar(_) => return None,
            Board::Edit { pipeline, .. } => pipeline.clone(),
        };
        Some(indices.iter().map(|&t| self.grammar.terminals()[t].clone()).collect())
    }

    pub fn encode(&self, state: &GameState) -> Result<EncodedState, UnknownSymbol> {
        let len = self.config.encode_len;
        let mut tokens = Vec::with_capacity(len);
        tokens.push(SOP);
        let task = self.task_tokens[&state.task.kind()]
            .ok_or_else(|| UnknownSymbol(task_token(state.task.kind()).into()))?;
        tokens.push(task);
        let mut push = |s: Symbol| -> Result<(), UnknownSymbol> {
            let id = match s {
                Symbol::Terminal(t) => self.terminal_tokens[t],
                Symbol::Nonterminal(n) => self.nonterminal_tokens[n],
            };
            tokens.push(id.ok_or_else(|| UnknownSymbol(self.grammar.symbol_name(s)))?);
            Ok(())
        };
        match &state.board {
            Board::Grammar(d) => d.symbols.iter().try_for_each(|&s| push(s))?,
            Board::Edit { pipeline, .. } => {
                pipeline.iter().try_for_each(|&t| push(Symbol::Terminal(t)))?
            }
        }
        tokens.resize(len, PAD);
        Ok(EncodedState { tokens, meta: state.meta.0 })
    }

    pub fn legal_mask(&self, legal: &[Action]) -> Vec<bool> {
        let mut mask = vec![false; self.action_space_size()];
        for a in legal {
            mask[self.action_index(a)] = true;
        }
        mask
    }
}

pub fn is_terminal(state: &GameState, max_steps: usize) -> bool {
    state.steps_taken >= max_steps
        || match &state.board {
            Board::Grammar(d) => d.is_complete(),
            Board::Edit { finished, .. } => *finished,
        }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_grammar;

    const TABLE1: &str = "\
<S> ::= <E> | <DC> <E> | <DT> <E> | <DC> <DT> <E>
<DC> ::= SkImputer <DC> | MissingIndicator <DC> | SkImputer | MissingIndicator
<DT> ::= OneHotEncoder <DT> | OrdinalEncoder <DT> | PCA <DT> | OneHotEncoder | OrdinalEncoder | PCA
<E> ::= GaussianNB | RidgeClassifier | SGDClassifier | LinearSVC
";

    fn game(mode: ActionMode) -> Game {
        let g = Arc::new(parse_grammar(TABLE1).unwrap());
        Game::new(g, GameConfig { mode, ..GameConfig::default() })
    }

    fn start(game: &Game) -> GameState {
        game.initial_state(MetaFeatures([0.0; META_DIM]), TaskSpec::classification())
    }

    fn edit_state(game: &Game, names: &[&str]) -> GameState {
        let pipeline = names.iter().map(|n| game.grammar().terminal_index(n).unwrap()).collect();
        GameState { board: Board::Edit { pipeline, finished: false }, ..start(game) }
    }

    #[test]
    fn grammar_root_has_four_actions() {
        let g = game(ActionMode::Grammar);
        let actions = g.legal_actions(&start(&g));
        assert_eq!(actions.len(), 4);
        let next = g.step(&start(&g), &actions[0]).unwrap();
        assert_eq!(g.state_label(&next), "[<E>]");
        assert_eq!(next.steps_taken, 1);
    }

    #[test]
    fn edit_mode_empty_pipeline_only_inserts() {
        let g = game(ActionMode::Edit);
        let v = g.grammar().terminals().len();
        let actions = g.legal_actions(&start(&g));
        assert_eq!(actions.len(), v);
        assert!(actions.iter().all(|a| matches!(a, Action::Insert { pos: 0, .. })));
    }

    #[test]
    fn edit_mode_action_counts() {
        let g = game(ActionMode::Edit);
        let v = g.grammar().terminals().len();
        let s = edit_state(&g, &["PCA", "LinearSVC"]);
        let actions = g.legal_actions(&s);
        let count = |f: fn(&Action) -> bool| actions.iter().filter(|a| f(a)).count();
        assert_eq!(count(|a| matches!(a, Action::Insert { .. })), 3 * v);
        assert_eq!(count(|a| matches!(a, Action::Delete { .. })), 2);
        assert_eq!(count(|a| matches!(a, Action::Substitute { .. })), 2 * v);
        assert_eq!(count(|a| matches!(a, Action::Finish)), 1);
        assert_eq!(actions.len(), 5 * v + 3);
        let idx: Vec<usize> = actions.iter().map(|a| g.action_index(a)).collect();
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.iter().all(|&i| i < g.action_space_size()));
    }

    #[test]
    fn edit_steps() {
        let g = game(ActionMode::Edit);
        let nb = g.grammar().terminal_index("GaussianNB").unwrap();
        let s = g.step(&start(&g), &Action::Insert { pos: 0, terminal: nb }).unwrap();
        assert_eq!(g.realized_pipeline(&s).unwrap(), ["GaussianNB"]);

        let s = edit_state(&g, &["PCA", "LinearSVC"]);
        let s = g.step(&s, &Action::Delete { pos: 0 }).unwrap();
        assert_eq!(g.realized_pipeline(&s).unwrap(), ["LinearSVC"]);
        let done = g.step(&s, &Action::Finish).unwrap();
        assert!(g.is_terminal(&done));
        assert!(g.legal_actions(&done).is_empty());
    }

    #[test]
    fn illegal_actions_are_rejected() {
        let g = game(ActionMode::Edit);
        let err = g.step(&start(&g), &Action::Delete { pos: 0 }).unwrap_err();
        assert!(err.to_string().contains("Delete") && err.to_string().contains("[]"));
        assert!(g.step(&start(&g), &Action::Finish).is_err());
        let gg = game(ActionMode::Grammar);
        assert!(gg.step(&start(&gg), &Action::Rule { rule: 5 }).is_err());
        assert!(gg.step(&start(&gg), &Action::Finish).is_err());
    }

    #[test]
    fn terminal_detection() {
        let g = game(ActionMode::Grammar);
        let gr = g.grammar().clone();
        let complete = gr.replay(&[1, 6, 17]).unwrap();
        assert!(complete.is_complete());
        let s = GameState { board: Board::Grammar(complete), ..start(&g) };
        assert!(g.is_terminal(&s));
        let partial = gr.replay(&[3]).unwrap();
        let s = GameState { board: Board::Grammar(partial), steps_taken: 1, ..start(&g) };
        assert!(!g.is_terminal(&s));
        let capped = GameState { steps_taken: 20, ..s };
        assert!(g.is_terminal(&capped));
        assert_eq!(g.realized_pipeline(&capped), None);
    }

    #[test]
    fn grammar_mode_respects_terminal_cap() {
        let gr = Arc::new(parse_grammar(TABLE1).unwrap());
        let g = Game::new(gr.clone(), GameConfig { max_terminals: 2, ..GameConfig::default() });
        let s = g.initial_state(MetaFeatures([0.0; META_DIM]), TaskSpec::classification());
        // <DC> <DT> <E> needs three terminals.
        assert_eq!(g.legal_actions(&s).len(), 3);
        let s = g.step(&s, &Action::Rule { rule: 1 }).unwrap();
        // Only the non-recursive cleaner rules fit.
        let rules: Vec<_> = g.legal_actions(&s).iter().map(|a| g.action_label(a)).collect();
        assert_eq!(rules, ["<DC> ::= SkImputer", "<DC> ::= MissingIndicator"]);
    }

    #[test]
    fn encoding_layout() {
        let g = game(ActionMode::Edit);
        let e = g.encode(&start(&g)).unwrap();
        let cls = g.vocabulary().id("[classification]").unwrap();
        assert_eq!(e.tokens.len(), 16);
        assert_eq!(&e.tokens[..3], &[SOP, cls, PAD]);
        assert_eq!(e.len(), 2);

        let s = edit_state(&g, &["SkImputer", "GaussianNB"]);
        let e = g.encode(&s).unwrap();
        let v = g.vocabulary();
        assert_eq!(
            &e.tokens[..5],
            &[SOP, cls, v.id("SkImputer").unwrap(), v.id("GaussianNB").unwrap(), PAD]
        );
        let e2 = g.encode(&edit_state(&g, &["SkImputer", "LinearSVC"])).unwrap();
        let diff = e.tokens.iter().zip(&e2.tokens).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 1);
    }

    #[test]
    fn encoding_with_foreign_vocabulary_names_missing_symbol() {
        let gr = Arc::new(parse_grammar(TABLE1).unwrap());
        let mut tokens = Vocabulary::for_grammar(&gr).tokens().to_vec();
        tokens.retain(|t| t != "PCA");
        let g = Game::with_vocabulary(
            gr,
            GameConfig { mode: ActionMode::Edit, ..GameConfig::default() },
            Vocabulary::from_tokens(tokens),
        );
        let s = edit_state(&g, &["PCA", "LinearSVC"]);
        assert_eq!(g.encode(&s).unwrap_err(), UnknownSymbol("PCA".into()));
    }
}
